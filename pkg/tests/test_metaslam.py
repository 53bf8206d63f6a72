import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rissense.metaslam import (
    C, SCHEMES, NoiseModel, ParticleSet, PathObservation, Reflector, Scatterer, SlamWorld,
    aoa_gradient, crlb, delay_gradient, fisher_information, group_paths, line_trajectory,
    mirror, path_delay, pf_step, ris_amplitude, ris_landmark_update, select_config_crlb,
    slam_run, specular_point, synthesize_paths,
)
from rissense.ris import PhaseCodebook, RisConfig, RisPanel

F = 3.2e9
LAM = C / F

coord = st.floats(-5, 5)
pt3 = st.tuples(coord, coord, coord).map(np.array)
pt2 = st.tuples(coord, coord).map(np.array)
unit3 = st.tuples(coord, coord, coord).filter(lambda v: np.linalg.norm(v) > 0.1)


def _panel(cols=16, groups=8, codebook=None):
    return RisPanel.planar((3, 4.2, 0), 1, cols, LAM / 2, 1, groups, codebook=codebook,
                           u_axis=(1, 0, 0), v_axis=(0, 0, 1))


def _world(**kw):
    base = dict(reflectors=(Reflector((0, 1), 0.0),),
                scatterers=(Scatterer((1.5, 3.0)), Scatterer((4.5, 3.4))),
                panel=_panel(), frequency=F)
    base.update(kw)
    return SlamWorld(**base)


# ---- mirror geometry ----

def test_mirror_examples():
    z0 = Reflector((0, 0, 1), 0.0)
    assert np.array_equal(mirror((0, 0, 1), z0), [0, 0, -1])
    on = np.array([1.3, -2.0, 0.0])
    assert np.allclose(mirror(on, z0), on, atol=1e-15)


def test_reflector_normalises():
    r = Reflector((0, 2.0), 4.0)
    assert np.allclose(r.normal, [0, 1]) and r.offset == 2.0
    with pytest.raises(ValueError):
        Reflector((0, 0), 1.0)


@settings(max_examples=60, deadline=None)
@given(pt3, unit3, st.floats(-3, 3))
def test_mirror_is_an_involution(p, n, d):
    r = Reflector(n, d)
    assert np.allclose(mirror(mirror(p, r), r), p, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(pt3, pt3, unit3, st.floats(-3, 3))
def test_mirror_is_an_isometry(a, b, n, d):
    r = Reflector(n, d)
    assert abs(np.linalg.norm(mirror(a, r) - mirror(b, r)) - np.linalg.norm(a - b)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(pt2, pt2, st.tuples(coord, coord).filter(lambda v: np.linalg.norm(v) > 0.1),
       st.floats(-3, 3))
def test_virtual_tx_matches_specular_path(tx, rx, n, d):
    r = Reflector(n, d)
    sa, sb = r.side(tx), r.side(rx)
    if sa * sb <= 0 or min(abs(sa), abs(sb)) < 1e-3:
        return
    s = specular_point(tx, rx, r)
    assert abs(r.side(s)) < 1e-9
    two_segment = np.linalg.norm(s - tx) + np.linalg.norm(rx - s)
    assert abs(np.linalg.norm(mirror(tx, r) - rx) - two_segment) < 1e-12 * max(1.0, two_segment)


# ---- path synthesis ----

def test_empty_room_is_los_only():
    w = SlamWorld(tx_offset=(0.3, 0.4))
    paths = synthesize_paths(w, (1.0, 1.0), None)
    assert len(paths) == 1 and paths[0].kind == "los"
    assert paths[0].delay == pytest.approx(0.5 / C, rel=1e-15)


def test_reflector_path_delay_from_virtual_tx():
    r = Reflector((0, 1), 0.0)
    w = SlamWorld(reflectors=(r,), tx_offset=(0.05, 0.0))
    pose = np.array([1.0, 1.2])
    p = [q for q in synthesize_paths(w, pose, None) if q.kind == "reflector"][0]
    vt = mirror(pose + w.tx_offset, r)
    assert abs(p.range_sum - np.linalg.norm(vt - pose)) < 1e-12
    s = specular_point(pose + w.tx_offset, pose, r)
    assert abs(p.range_sum - np.linalg.norm(s - pose - w.tx_offset)
               - np.linalg.norm(pose - s)) < 1e-12


def test_scatterer_and_virtual_scatterer_delays():
    r = Reflector((0, 1), 0.0)
    s = np.array([2.0, 3.0])
    w = SlamWorld(reflectors=(r,), scatterers=(Scatterer(s),), tx_offset=(0.05, 0.0))
    pose = np.array([1.0, 1.0])
    tx = pose + w.tx_offset
    paths = {p.kind: p for p in synthesize_paths(w, pose, None)}
    assert paths["scatterer"].range_sum == pytest.approx(
        np.linalg.norm(s - tx) + np.linalg.norm(s - pose), abs=1e-12)
    vs = mirror(s, r)
    assert paths["scatterer_reflector"].range_sum == pytest.approx(
        np.linalg.norm(s - tx) + np.linalg.norm(vs - pose), abs=1e-12)
    assert paths["scatterer_reflector"].aoa == pytest.approx(math.atan2(*(vs - pose)[::-1]))


def test_ris_amplitude_scales_with_element_gain():
    cfg = RisConfig.constant(8, 1)
    full = _world(panel=_panel(codebook=PhaseCodebook.uniform(4, 1.0)))
    half = _world(panel=_panel(codebook=PhaseCodebook.uniform(4, 0.5)))
    a = ris_amplitude(full, cfg, (1, 1))
    b = ris_amplitude(half, cfg, (1, 1))
    assert b == pytest.approx(0.5 * a, rel=1e-12)
    ka = [p for p in synthesize_paths(full, (1, 1), cfg) if p.kind == "ris"][0]
    assert ka.amplitude == pytest.approx(a)


def test_path_observation_rejects_negative_delay():
    with pytest.raises(ValueError):
        PathObservation(-1e-9, 0.0, 1.0)


# ---- Fisher information ----

def test_single_measurement_type_is_rank_one():
    for use in (("delay",), ("aoa",)):
        J = fisher_information((0, 0), [(3, 1)], 1e-20, 1e-4, use=use)
        assert np.linalg.matrix_rank(J, tol=1e-9 * np.abs(J).max()) == 1
        with pytest.raises(ValueError, match="unlocalizable"):
            crlb(J)


def test_orthogonal_bearings_give_isotropic_information():
    J = fisher_information((0, 0), [(2, 0), (0, 2)], 1.0, 1e-4, use=("aoa",))
    w = np.linalg.eigvalsh(J)
    assert w[0] == pytest.approx(w[1], rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(pt2, pt2, st.tuples(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2)))
def test_delay_gradient_matches_finite_differences(x, a, o):
    o = np.array(o)
    if np.linalg.norm(a - x) < 0.5 or np.linalg.norm(a - x - o) < 0.5:
        return
    g = delay_gradient(x, a, o)
    h = 1e-6
    fd = np.array([(path_delay(x + h * e, a, o) - path_delay(x - h * e, a, o)) / (2 * h)
                   for e in np.eye(2)])
    assert np.linalg.norm(fd - g) <= 1e-6 * np.linalg.norm(g)


@settings(max_examples=40, deadline=None)
@given(pt2, pt2)
def test_aoa_gradient_matches_finite_differences(x, a):
    if np.linalg.norm(a - x) < 0.5:
        return
    th = lambda p: math.atan2(a[1] - p[1], a[0] - p[0])
    h = 1e-6
    # wrap the difference so the ±π branch cut does not count
    fd = np.array([np.angle(np.exp(1j * (th(x + h * e) - th(x - h * e)))) / (2 * h)
                   for e in np.eye(2)])
    g = aoa_gradient(x, a)
    assert np.linalg.norm(fd - g) <= 1e-6 * np.linalg.norm(g)


@settings(max_examples=40, deadline=None)
@given(st.lists(pt2, min_size=1, max_size=5), st.floats(1e-22, 1e-16), st.floats(1e-6, 1e-1))
def test_fisher_is_symmetric_psd(anchors, vt, va):
    anchors = [a for a in anchors if np.linalg.norm(a - np.array([0.1, -0.2])) > 0.3]
    J = fisher_information((0.1, -0.2), anchors, vt, va) if anchors else np.zeros((2, 2))
    assert np.allclose(J, J.T)
    assert np.linalg.eigvalsh(J / max(np.abs(J).max(), 1e-300))[0] >= -1e-9


# ---- CRLB configuration search ----

_NOISE = NoiseModel(1e-9, 0.1, 1e-9, 1.0)


def _crlb_of(world, cfg, pose, anchors, amps):
    vt, va = _NOISE.variances(np.array(amps))
    a = ris_amplitude(world, cfg, pose)
    t, s = _NOISE.variances(a)
    J = fisher_information(pose, anchors, vt, va, world.tx_offset) \
        + fisher_information(pose, world.ris_center, t, s, world.tx_offset)
    return crlb(J)


def test_crlb_search_single_state_codebook():
    w = _world(panel=_panel(codebook=PhaseCodebook.uniform(1)))
    res = select_config_crlb(w, (1, 1), _NOISE, 10, np.random.default_rng(0), [(1.5, 3.0)], [2e-4])
    assert res.config == RisConfig.constant(8, 0)
    assert res.evaluations == 1


def test_crlb_search_beats_random_configs():
    w = _world()
    pose = np.array([1.5, 1.0])
    anchors, amps = [(1.5, 3.0)], [2e-4]
    res = select_config_crlb(w, pose, _NOISE, 60, np.random.default_rng(1), anchors, amps)
    assert np.all(np.diff(res.trace) <= 0)
    assert res.crlb == min(res.trace)
    assert res.crlb == pytest.approx(_crlb_of(w, res.config, pose, anchors, amps), rel=1e-12)
    rng = np.random.default_rng(2)
    rand = [_crlb_of(w, w.panel.random_config(rng), pose, anchors, amps) for _ in range(50)]
    assert res.crlb <= np.mean(rand)
    with pytest.raises(ValueError):
        select_config_crlb(w, pose, _NOISE, 0, rng, anchors, amps)


# ---- grouping and RIS identification ----

def _obs(aoas):
    return [PathObservation(1e-8, a, 1.0) for a in aoas]


def test_group_paths_examples():
    assert group_paths(_obs([0.3, 0.3]), 0.1) == [[0, 1]]
    assert sorted(group_paths(_obs([0.0, np.pi / 2]), 0.1)) == [[0], [1]]
    # the circle wraps
    assert group_paths(_obs([np.pi - 0.01, -np.pi + 0.01]), 0.1) == [[0, 1]]
    assert group_paths([], 0.1) == []
    with pytest.raises(ValueError):
        group_paths(_obs([0.0]), 0.0)


def test_grouping_recovers_scatterer_count():
    scat = (Scatterer((3.0, 0.5)), Scatterer((1.0, 3.0)), Scatterer((-2.0, 1.5)))
    w = SlamWorld(scatterers=scat)
    paths = [p for p in synthesize_paths(w, (0.0, 0.0), None) if p.kind != "los"]
    assert len(group_paths(paths, 0.05)) == 3


def test_equal_likelihoods_keep_belief():
    b = np.array([0.2, 0.5, 0.3])
    out = ris_landmark_update(b, [1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0.1)
    assert np.allclose(out, b, rtol=0, atol=1e-15)
    out = ris_landmark_update(b, [np.nan] * 3, [1.0, 2.0, 3.0], [4.0, 5.0, 6.0], 0.1)
    assert np.allclose(out, b, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5)),
                min_size=1, max_size=100))
def test_landmark_belief_stays_normalised(seq):
    b = np.full(3, 1 / 3)
    for a, p, s in seq:
        b = ris_landmark_update(b, [a, s, p], [p, a, s], [s, p, a], 0.05)
        assert abs(b.sum() - 1.0) < 1e-12


def test_config_tracking_landmark_is_identified():
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        b = np.full(4, 0.25)
        static = rng.uniform(1, 2, 4)
        for _ in range(10):
            pred = rng.uniform(0.5, 3.0, 4)       # amplitude each landmark would show as the RIS
            meas = static + 0.1 * rng.standard_normal(4)
            meas[2] = pred[2] + 0.1 * rng.standard_normal()
            b = ris_landmark_update(b, meas, pred, static, 0.2)
        hits += int(np.argmax(b) == 2)
    assert hits >= 45


# ---- particle filter ----

def _known_map(ps, landmarks, var=1e-12):
    L = np.asarray(landmarks, dtype=float)
    ps.means = np.tile(L, (ps.count, 1, 1))
    ps.covs = np.tile(var * np.eye(2), (ps.count, len(L), 1, 1))
    return ps


def _z(pose, L, off):
    d = np.asarray(L) - pose
    return (np.linalg.norm(d) + np.linalg.norm(d - off), math.atan2(d[1], d[0]))


def test_noise_free_filter_stays_exact():
    off = np.array([0.05, 0.0])
    L = [(2.0, 3.0), (-1.0, 2.5)]
    ps = _known_map(ParticleSet.at((0, 0), 50), L)
    x = np.zeros(2)
    R = np.diag([1e-12, 1e-12])
    for k in range(5):
        x = x + np.array([0.1, 0.05])
        obs = [(i, _z(x, L[i], off), R) for i in range(2)]
        ps = pf_step(ps, obs, (0.1, 0.05), 0.0, np.random.default_rng(k), off)
        assert np.linalg.norm(ps.mean_pose() - x) < 1e-12


@pytest.mark.parametrize("proposal", ["motion", "conditioned"])
def test_weights_normalised_and_ess_bounded(proposal):
    off = np.array([0.05, 0.0])
    L = [(2.0, 3.0)]
    ps = _known_map(ParticleSet.at((0, 0), 200), L, 1e-4)
    rng = np.random.default_rng(0)
    R = np.diag([1e-3, 1e-3])
    for _ in range(10):
        ps = pf_step(ps, [(0, _z(np.zeros(2), L[0], off), R)], (0, 0), 0.05, rng, off, proposal)
        assert abs(ps.weights.sum() - 1) < 1e-12 and np.all(ps.weights >= 0)
        assert 1 <= ps.ess <= ps.count + 1e-9
        assert np.all(np.linalg.eigvalsh(ps.covs) > 0)


def test_all_zero_weights_flag_degeneracy():
    ps = _known_map(ParticleSet.at((0, 0), 10), [(2.0, 3.0)])
    ps.weights = np.zeros(10)
    out = pf_step(ps, [], (0, 0), 0.0, np.random.default_rng(0))
    assert out.degenerate and np.allclose(out.weights, 0.1)


def test_particle_count_must_be_positive():
    with pytest.raises(ValueError):
        ParticleSet.at((0, 0), 0)


@pytest.mark.parametrize("proposal", ["motion", "conditioned"])
def test_posterior_mean_matches_grid_filter(proposal):
    off = np.array([0.05, 0.0])
    L = np.array([(2.0, 3.0), (-1.5, 2.0)])
    start, u, q = np.array([0.2, 0.1]), np.array([0.1, 0.0]), 0.05
    truth = start + u + np.array([0.03, -0.02])
    R = np.diag([0.02 ** 2, 0.01 ** 2])
    zs = [_z(truth, l, off) for l in L]
    ps = _known_map(ParticleSet.at(start, 40000), L)
    out = pf_step(ps, [(i, zs[i], R) for i in range(2)], u, q, np.random.default_rng(3),
                  off, proposal)
    # grid oracle: prior N(start + u, q² I) times both readings' likelihoods
    cell = 1e-3
    g = np.arange(-0.25, 0.25 + cell / 2, cell)
    X, Y = np.meshgrid(start[0] + u[0] + g, start[1] + u[1] + g, indexing="ij")
    logp = -0.5 * ((X - start[0] - u[0]) ** 2 + (Y - start[1] - u[1]) ** 2) / q ** 2
    for l, z in zip(L, zs):
        dx, dy = l[0] - X, l[1] - Y
        rho = np.hypot(dx, dy) + np.hypot(dx - off[0], dy - off[1])
        th = np.angle(np.exp(1j * (np.arctan2(dy, dx) - z[1])))
        logp += -0.5 * ((rho - z[0]) ** 2 / R[0, 0] + th ** 2 / R[1, 1])
    w = np.exp(logp - logp.max())
    w /= w.sum()
    oracle = np.array([np.sum(w * X), np.sum(w * Y)])
    assert np.linalg.norm(out.mean_pose() - oracle) < 3 * cell


# ---- full loop ----

def test_noise_free_run_is_exact():
    w = _world()
    traj = line_trajectory((1.0, 1.0), (0.1, 0.0), 8)
    for scheme in SCHEMES:
        r = slam_run(w, traj, 8, scheme, np.random.default_rng(0), NoiseModel(1e-9, 0.1, 0.0),
                     particles=500, motion_std=0.0)
        assert r.rmse[-1] < 0.01
        assert r.n_landmarks >= 1


def test_run_identifies_the_ris_and_maps_only_static_anchors():
    w = _world()
    traj = line_trajectory((1.0, 1.0), (0.1, 0.0), 12)
    r = slam_run(w, traj, 12, "random_config", np.random.default_rng(4),
                 NoiseModel(1e-9, 0.1, 5e-10), np.random.default_rng(5), particles=200)
    # the reflector is mapped as a wall, not a point
    assert len(r.walls) >= 1
    assert r.n_landmarks <= 3
    assert abs(r.ris_belief[-1].sum() - 1) < 1e-12


def test_run_is_deterministic_and_checks_inputs():
    w = _world()
    traj = line_trajectory((1.0, 1.0), (0.1, 0.0), 5)
    noise = NoiseModel(1e-9, 0.1, 5e-10)
    a = slam_run(w, traj, 5, "proposed", np.random.default_rng(1), noise,
                 np.random.default_rng(2), particles=100)
    b = slam_run(w, traj, 5, "proposed", np.random.default_rng(1), noise,
                 np.random.default_rng(2), particles=100)
    assert np.array_equal(a.errors, b.errors)
    assert np.all(np.diff(a.rmse ** 2 * np.arange(1, 6)) >= -1e-15)
    n = slam_run(w, traj, 5, "no_ris", np.random.default_rng(1), noise, particles=50)
    assert all(c is None for c in n.configs)
    with pytest.raises(ValueError):
        slam_run(w, traj, 5, "bogus", np.random.default_rng(1), noise)
    with pytest.raises(ValueError):
        slam_run(w, traj, 9, "proposed", np.random.default_rng(1), noise)
