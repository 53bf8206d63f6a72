import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.constants import speed_of_light as C

from rissense.channel import SubcarrierGrid
from rissense.metrics import (
    DegenerateGeometry, aoa_geometric, doppler_estimate, doppler_shift, fmcw_beat,
    fmcw_dechirp, fmcw_tof, rss_logdistance, rss_of, tof_estimate_ofdm,
    triangulate_aoa,
)


def test_rss_logdistance():
    assert rss_logdistance(10, 2, 100) == pytest.approx(-30.0, abs=1e-12)
    assert rss_logdistance(7.5, 3.1, 1.0) == 7.5
    d = np.logspace(0, 3, 31)
    slope = np.polyfit(np.log10(d), rss_logdistance(10, 2.7, d), 1)[0]
    assert slope == pytest.approx(-27.0, abs=1e-9)
    with pytest.raises(ValueError):
        rss_logdistance(0, 2, 0.0)


def test_rss_of():
    assert rss_of(np.ones(8)) == 0.0
    y = np.exp(1j * np.arange(5)) * 0.3
    assert rss_of(10 * y) - rss_of(y) == pytest.approx(20.0, abs=1e-12)
    assert rss_of(np.zeros(4)) == -math.inf


GRID = SubcarrierGrid(64, 3.2e9, 312.5e3)
TS = 1 / (GRID.N * GRID.spacing)


def _paths(delays, gains):
    f = GRID.frequencies
    return sum(g * np.exp(-2j * np.pi * f * t) for t, g in zip(delays, gains))


def test_tof_on_grid_single_path():
    x = np.exp(1j * np.linspace(0, 5, GRID.N))
    y = _paths([3 * TS], [0.8]) * x
    est = tof_estimate_ofdm(y, x, GRID, oversample=16)
    assert est.resolved
    assert abs(est.tau - 3 * TS) <= TS / 16 / 2


def test_tof_zero_delay():
    est = tof_estimate_ofdm(np.full(GRID.N, 0.5 + 0.5j), np.ones(GRID.N), GRID)
    assert est.tau == 0.0


def test_tof_two_paths_first_stronger():
    sep = 2 / (GRID.N * GRID.spacing)
    y = _paths([5 * TS, 5 * TS + sep], [1.0, 0.6])
    est = tof_estimate_ofdm(y, np.ones(GRID.N), GRID)
    # picks the earlier path; the later path's leakage may bias it by a grid step
    assert abs(est.tau - 5 * TS) < TS / 2


def test_tof_unresolved_for_flat_spectrum():
    rng = np.random.default_rng(1)
    # white delay spectrum: random phases on every subcarrier
    H = np.exp(2j * np.pi * rng.random(GRID.N))
    est = tof_estimate_ofdm(H, np.ones(GRID.N), GRID, min_ratio=50.0)
    assert not est.resolved and math.isnan(est.tau)


def test_tof_rejects_zero_pilot():
    x = np.ones(GRID.N)
    x[3] = 0
    with pytest.raises(ValueError):
        tof_estimate_ofdm(np.ones(GRID.N), x, GRID)


def test_fmcw():
    assert fmcw_tof(1e6, 1e12) == pytest.approx(1e-6)
    assert C * fmcw_tof(1e6, 1e12) == pytest.approx(299.792458, rel=1e-12)
    assert fmcw_tof(0.0, 1e12) == 0.0
    with pytest.raises(ValueError):
        fmcw_tof(6e6, 1e12, fs=10e6)


def test_fmcw_round_trip():
    fs, eta, dur = 10e6, 1e12, 1e-3
    tau = 250e3 / eta
    mixed = fmcw_dechirp(tau, eta, fs, dur)
    fb = fmcw_beat(mixed, fs)
    assert abs(fb - 250e3) <= 1 / dur
    assert abs(fmcw_tof(fb, eta, fs) - tau) <= 1 / dur / eta
    real = np.cos(2 * np.pi * 250e3 * np.arange(int(fs * dur)) / fs)
    assert abs(fmcw_beat(real, fs) - 250e3) <= 1 / dur


def test_doppler_forward():
    # f from the 3.198 GHz prototype; 21.32 Hz with c rounded to 3e8
    assert doppler_shift(1.0, 0.0, 3.198e9) == pytest.approx(2 * 3.198e9 / C, rel=1e-12)
    assert abs(doppler_shift(1.0, 0.0, 3.198e9) - 21.32) < 0.02
    assert doppler_shift(0.0, 0.3, 3.198e9) == 0.0
    assert abs(doppler_shift(1.0, math.pi / 2, 3.198e9)) < 1e-12
    with pytest.raises(ValueError):
        doppler_shift(100.0, 0.0, 3.198e9, prf=100.0)


@given(st.floats(-50, 50), st.floats(-3, 3))
def test_doppler_symmetry(v, phi):
    f = 3.198e9
    assert doppler_shift(-v, phi, f) == pytest.approx(-doppler_shift(v, phi, f), abs=1e-12)
    assert doppler_shift(v, -phi, f) == pytest.approx(doppler_shift(v, phi, f), abs=1e-12)
    if v > 0 and math.cos(phi) > 1e-9:
        assert doppler_shift(v, phi, f) > 0


def test_doppler_estimate_round_trip():
    prf, n = 200.0, 400
    for v in (1.0, -1.0, 0.0):
        df = doppler_shift(v, 0.0, 3.198e9, prf=prf)
        s = np.exp(2j * np.pi * df * np.arange(n) / prf)
        assert abs(doppler_estimate(s, prf) - df) <= prf / n


def test_aoa_geometric():
    assert aoa_geometric((1, 1), (0, 0)) == pytest.approx(math.pi / 4)
    assert aoa_geometric((-1, 0), (0, 0)) == pytest.approx(math.pi)
    with pytest.raises(ValueError):
        aoa_geometric((1, 1), (1, 1))


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=5),
       st.floats(-3, 3), st.floats(-3, 3))
def test_triangulation_exact(anchors, ux, uy):
    u = np.array([ux, uy])
    anchors = [np.array(a) for a in anchors if np.linalg.norm(np.array(a) - u) > 0.5]
    if len(anchors) < 2:
        return
    meas = [(a, aoa_geometric(u, a)) for a in anchors]
    dirs = np.array([[math.cos(p), math.sin(p)] for _, p in meas])
    if np.linalg.matrix_rank(dirs, tol=0.05) < 2:
        return
    np.testing.assert_allclose(triangulate_aoa(meas), u, atol=1e-9)


def test_triangulation_parallel_bearings():
    with pytest.raises(DegenerateGeometry):
        triangulate_aoa([((0, 0), 0.0), ((0, 1), 0.0)])


def test_triangulation_noisy_against_grid_search():
    rng = np.random.default_rng(4)
    u = np.array([0.3, 0.9])
    anchors = [np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.5])]
    meas = [(a, aoa_geometric(u, a, 1e-3, rng)) for a in anchors]
    est = triangulate_aoa(meas)
    assert np.linalg.norm(est - u) < 1e-2
    # brute-force oracle: minimise the same squared perpendicular residuals on a grid
    xs = np.linspace(u[0] - 0.02, u[0] + 0.02, 401)
    ys = np.linspace(u[1] - 0.02, u[1] + 0.02, 401)
    X, Y = np.meshgrid(xs, ys)
    cost = sum((-(X - a[0]) * math.sin(p) + (Y - a[1]) * math.cos(p)) ** 2 for a, p in meas)
    k = np.unravel_index(np.argmin(cost), cost.shape)
    assert np.linalg.norm(est - [X[k], Y[k]]) < 2e-4
