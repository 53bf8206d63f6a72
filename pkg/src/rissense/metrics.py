"""Measurement metrics: RSS, time of flight (OFDM and FMCW), Doppler, AoA."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.constants import speed_of_light as C

from .channel import SubcarrierGrid


class DegenerateGeometry(ValueError):
    pass


@dataclass(frozen=True)
class TofEstimate:
    """Delay estimate with its peak-to-leakage score.

    ``resolved`` is False when no peak stands out of the leakage floor; ``tau``
    is then NaN.
    """

    tau: float
    peak_to_leakage: float
    resolved: bool = True

    @property
    def distance(self) -> float:
        return C * self.tau


def rss_logdistance(p_t: float, alpha: float, d, sigma_rss: float = 0.0,
                    rng: np.random.Generator | None = None):
    """Log-distance path loss, dB."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be > 0")
    p = p_t - 10.0 * alpha * np.log10(d)
    if sigma_rss > 0:
        if rng is None:
            raise ValueError("noise requested without a random stream")
        p = p + rng.normal(0.0, sigma_rss, size=p.shape)
    return p[()] if p.ndim == 0 else p


def rss_of(y) -> float:
    """Mean received power in dB; -inf for an all-zero signal."""
    y = np.asarray(y, dtype=complex)
    if y.size == 0:
        raise ValueError("empty signal")
    power = float(np.mean(np.abs(y) ** 2))
    return 10.0 * math.log10(power) if power > 0 else -math.inf


def delay_spectrum(H, grid: SubcarrierGrid, taus) -> np.ndarray:
    """|Σ_n H_n e^{j2π n Δf τ}| on the given delay grid."""
    n = grid.offsets
    phase = np.exp(2j * np.pi * np.outer(np.asarray(taus), n) * grid.spacing)
    return np.abs(phase @ np.asarray(H))


def tof_estimate_ofdm(y, x, grid: SubcarrierGrid, oversample: int = 16,
                      min_ratio: float = 2.0) -> TofEstimate:
    """Delay-spectrum peak ToF estimator with a peak-to-leakage score.

    Deconvolves H_n = y_n / x_n, scans τ in [0, 1/Δf) with step
    1/(N Δf oversample) and returns the strongest peak. The score is the
    peak power over the mean power of the spectrum outside the peak's
    mainlobe (±1/(N Δf)).
    """
    x = np.asarray(x, dtype=complex)
    if np.any(x == 0):
        raise ValueError("pilot symbols must be nonzero")
    if grid.N < 2 or grid.spacing <= 0:
        raise ValueError("ToF estimation needs at least two spaced subcarriers")
    H = np.asarray(y, dtype=complex) / x
    n_tau = grid.N * oversample
    step = 1.0 / (grid.N * grid.spacing * oversample)
    taus = np.arange(n_tau) * step
    spec = delay_spectrum(H, grid, taus) ** 2
    k = int(np.argmax(spec))
    peak = spec[k]
    dist = np.abs(np.arange(n_tau) - k)
    dist = np.minimum(dist, n_tau - dist)
    side = spec[dist > oversample]
    leak = float(np.mean(side)) if side.size else 0.0
    ratio = math.inf if leak == 0 else float(peak / leak)
    if peak == 0 or ratio < min_ratio:
        return TofEstimate(math.nan, ratio, resolved=False)
    return TofEstimate(float(taus[k]), ratio)


def fmcw_tof(f_d: float, eta: float, fs: float | None = None) -> float:
    """ToF from beat frequency and chirp slope, τ = f_d / η."""
    if eta <= 0:
        raise ValueError("chirp slope must be > 0")
    if f_d < 0:
        raise ValueError("beat frequency must be >= 0")
    if fs is not None and f_d >= fs / 2:
        raise ValueError("beat frequency above Nyquist")
    return f_d / eta


def fmcw_beat(mixed, fs: float) -> float:
    """Dominant frequency of a dechirped (mixed) signal, Hz."""
    mixed = np.asarray(mixed)
    n = mixed.size
    if np.iscomplexobj(mixed):
        spec = np.abs(np.fft.fft(mixed))
        freqs = np.fft.fftfreq(n, 1.0 / fs)
        return float(abs(freqs[int(np.argmax(spec))]))
    spec = np.abs(np.fft.rfft(mixed - mixed.mean()))
    return float(np.fft.rfftfreq(n, 1.0 / fs)[int(np.argmax(spec))])


def fmcw_dechirp(tau: float, eta: float, fs: float, duration: float,
                 f0: float = 0.0) -> np.ndarray:
    """Mixer output for a single echo delayed by ``tau`` (complex baseband)."""
    t = np.arange(int(round(duration * fs))) / fs
    tx_phase = 2 * np.pi * (f0 * t + 0.5 * eta * t ** 2)
    tr = t - tau
    rx_phase = 2 * np.pi * (f0 * tr + 0.5 * eta * tr ** 2)
    return np.exp(1j * (tx_phase - rx_phase))


def doppler_shift(v, phi, f: float, prf: float | None = None):
    """Δf = 2 v cos(φ) f / c; positive for motion towards the receiver."""
    df = 2.0 * np.asarray(v, dtype=float) * np.cos(phi) * f / C
    if prf is not None and np.any(np.abs(df) >= prf / 2):
        raise ValueError("Doppler shift aliases at this PRF")
    return df[()] if np.ndim(df) == 0 else df


def doppler_estimate(slow_time, prf: float, pad: int = 1) -> float:
    """Signed dominant slow-time frequency, Hz."""
    s = np.asarray(slow_time, dtype=complex)
    n = s.size * pad
    spec = np.abs(np.fft.fft(s, n))
    freqs = np.fft.fftfreq(n, 1.0 / prf)
    k = int(np.argmax(spec))
    if n % 2 == 0 and k == n // 2:
        raise ValueError("Doppler peak at the Nyquist bin: aliased")
    return float(freqs[k])


def aoa_geometric(u, a, sigma_aoa: float = 0.0, rng: np.random.Generator | None = None) -> float:
    """Bearing from anchor ``a`` to point ``u`` (rad), optionally noisy."""
    u = np.asarray(u, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.allclose(u, a, rtol=0, atol=0):
        raise ValueError("point coincides with the anchor")
    phi = math.atan2(u[1] - a[1], u[0] - a[0])
    if sigma_aoa > 0:
        if rng is None:
            raise ValueError("noise requested without a random stream")
        phi += rng.normal(0.0, sigma_aoa)
    return phi


def triangulate_aoa(measurements: Sequence[tuple[Sequence[float], float]]) -> np.ndarray:
    """Least-squares intersection of bearing lines ``[(anchor, aoa), ...]``."""
    if len(measurements) < 2:
        raise ValueError("need at least two bearings")
    anchors = np.array([m[0] for m in measurements], dtype=float)
    phis = np.array([m[1] for m in measurements], dtype=float)
    normals = np.column_stack([-np.sin(phis), np.cos(phis)])
    A = normals
    b = np.einsum("ij,ij->i", normals, anchors)
    G = A.T @ A
    if np.linalg.cond(G) > 1e12:
        raise DegenerateGeometry("bearing lines are parallel")
    return np.linalg.solve(G, A.T @ b)
