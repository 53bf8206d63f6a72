"""Scene geometry and received-signal synthesis (LoS, RIS reflection, target
two-bounce paths, environmental scattering, OFDM composition, noise)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.constants import speed_of_light as C

from .ris import RisConfig, RisPanel, expand_config


@dataclass(frozen=True)
class Antenna:
    position: np.ndarray
    gain: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if self.gain <= 0:
            raise ValueError("antenna gain must be positive")


@dataclass(frozen=True)
class RxArray(Antenna):
    """Receiver; a far-field uniform linear array when ``antenna_count > 1``."""

    antenna_count: int = 1
    spacing: float = 0.0
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def __post_init__(self):
        super().__post_init__()
        if self.antenna_count < 1:
            raise ValueError("antenna_count must be >= 1")
        axis = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", axis / np.linalg.norm(axis))


@dataclass(frozen=True)
class SpaceOfInterest:
    """Axis-aligned box split into ``nx * ny * nz`` equal blocks (x fastest)."""

    lo: np.ndarray
    hi: np.ndarray
    divisions: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        div = tuple(int(d) for d in self.divisions)
        if len(div) != 3 or min(div) < 1:
            raise ValueError("divisions must be three positive integers")
        if np.any(hi < lo):
            raise ValueError("SOI upper corner below lower corner")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "divisions", div)

    @property
    def Q(self) -> int:
        return int(np.prod(self.divisions))

    @property
    def side_lengths(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.divisions)

    @property
    def block_volume(self) -> float:
        return float(np.prod(self.side_lengths))

    @property
    def centers(self) -> np.ndarray:
        """Block centres, shape (Q, 3)."""
        side = self.side_lengths
        axes = [self.lo[i] + side[i] * (np.arange(self.divisions[i]) + 0.5) for i in range(3)]
        zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


@dataclass(frozen=True)
class Scene:
    tx: Antenna
    rx: RxArray
    panel: RisPanel | None = None
    soi: SpaceOfInterest | None = None
    scatter_variance: float = 0.0
    scatter_seed: int = 0

    def __post_init__(self):
        if self.scatter_variance < 0:
            raise ValueError("scatter_variance must be >= 0")
        if self.soi is not None:
            for name, ant in (("tx", self.tx), ("rx", self.rx)):
                if self.soi.contains(ant.position):
                    raise ValueError(f"{name} lies inside the space of interest")


@dataclass(frozen=True)
class SubcarrierGrid:
    N: int
    center_frequency: float
    spacing: float = 0.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if np.any(self.frequencies <= 0):
            raise ValueError("non-positive subcarrier frequency")

    @property
    def offsets(self) -> np.ndarray:
        """n - (N+1)/2 for n = 1..N."""
        return np.arange(1, self.N + 1) - (self.N + 1) / 2

    @property
    def frequencies(self) -> np.ndarray:
        return self.center_frequency + self.offsets * self.spacing

    @property
    def wavelengths(self) -> np.ndarray:
        return C / self.frequencies

    @classmethod
    def single(cls, frequency: float) -> "SubcarrierGrid":
        return cls(1, frequency, 0.0)


@dataclass(frozen=True)
class ChannelResponse:
    """Per-subcarrier complex gains of each component and their sum."""

    los: np.ndarray
    reflect: np.ndarray
    scatter: np.ndarray
    target: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.los + self.reflect + self.scatter + self.target


def _check_positive(**dists):
    for name, d in dists.items():
        if np.any(np.asarray(d) <= 0):
            raise ValueError(f"{name} must be > 0")


def los_gain(d, g_t, g_r, lam):
    """Free-space direct path (λ/4π)·sqrt(g_T g_R)·e^{-j2πd/λ}/d."""
    _check_positive(distance=d, wavelength=lam)
    d = np.asarray(d, dtype=float)
    lam = np.asarray(lam, dtype=float)
    out = lam / (4 * np.pi) * np.sqrt(g_t * g_r) * np.exp(-2j * np.pi * d / lam) / d
    return out[()] if out.ndim == 0 else out


def ris_path_gain(d_t, d_r, gamma, g_t, g_r, lam):
    """Gain of the Tx -> element -> Rx path through one element with response ``gamma``."""
    _check_positive(d_t=d_t, d_r=d_r, wavelength=lam)
    d_t = np.asarray(d_t, dtype=float)
    d_r = np.asarray(d_r, dtype=float)
    lam = np.asarray(lam, dtype=float)
    out = (lam * np.sqrt(g_t * g_r) * np.asarray(gamma)
           * np.exp(-2j * np.pi * (d_t + d_r) / lam) / (8 * np.pi ** 1.5 * d_t * d_r))
    return out[()] if out.ndim == 0 else out


def _rx_pos(scene: Scene, rx_position) -> np.ndarray:
    return scene.rx.position if rx_position is None else np.asarray(rx_position, dtype=float)


def element_gains(scene: Scene, config: RisConfig, lam, rx_position=None) -> np.ndarray:
    """Per-element reflection gains h_m, shape (M,) or (len(lam), M)."""
    panel = scene.panel
    if panel is None:
        return np.zeros((0,), dtype=complex)
    e = panel.element_positions
    d_t = np.linalg.norm(e - scene.tx.position, axis=1)
    d_r = np.linalg.norm(e - _rx_pos(scene, rx_position), axis=1)
    gamma = expand_config(panel, config)
    lam = np.asarray(lam, dtype=float)
    return ris_path_gain(d_t, d_r, gamma, scene.tx.gain, scene.rx.gain, lam[..., None])


def cascade_coefficients(scene: Scene, lam: float, rx_position=None) -> np.ndarray:
    """Two-bounce Tx -> element m -> block q -> Rx gains for γ_m = 1, ν_q = 1.

    Shape (M, Q).  The Tx -> element -> block leg uses the element-path form
    with unit block gain; the block -> Rx leg is a free-space segment.
    """
    panel, soi = scene.panel, scene.soi
    if panel is None or soi is None:
        raise ValueError("cascade needs both a panel and a space of interest")
    e = panel.element_positions
    b = soi.centers
    d_t = np.linalg.norm(e - scene.tx.position, axis=1)[:, None]
    d_mq = np.linalg.norm(e[:, None, :] - b[None, :, :], axis=2)
    d_qr = np.linalg.norm(b - _rx_pos(scene, rx_position), axis=1)[None, :]
    _check_positive(d_t=d_t, d_mq=d_mq, d_qr=d_qr)
    first = ris_path_gain(d_t, d_mq, 1.0, scene.tx.gain, 1.0, lam)
    second = math.sqrt(scene.rx.gain) * lam / (4 * np.pi) * np.exp(-2j * np.pi * d_qr / lam) / d_qr
    return first * second


def two_bounce_gain(scene: Scene, m: int, q: int, nu: complex, config: RisConfig,
                    lam: float, rx_position=None) -> complex:
    """Gain of the Tx -> element ``m`` -> block ``q`` -> Rx path with block reflectivity ``nu``."""
    panel, soi = scene.panel, scene.soi
    if panel is None or soi is None:
        raise ValueError("cascade needs both a panel and a space of interest")
    e = panel.element_positions[m]
    b = soi.centers[q]
    rx = _rx_pos(scene, rx_position)
    d_t = float(np.linalg.norm(e - scene.tx.position))
    d_mq = float(np.linalg.norm(e - b))
    d_qr = float(np.linalg.norm(b - rx))
    if min(d_t, d_mq, d_qr) <= 0:
        raise ValueError("degenerate two-bounce geometry")
    gamma = expand_config(panel, config)[m]
    first = ris_path_gain(d_t, d_mq, gamma, scene.tx.gain, 1.0, lam)
    second = math.sqrt(scene.rx.gain) * lam / (4 * np.pi) * np.exp(-2j * np.pi * d_qr / lam) / d_qr
    return complex(first * nu * second)


def scatter_gain(scene: Scene, lam, rng: np.random.Generator | None = None):
    """Environmental scattering gain h_sc ~ CN(0, scatter_variance).

    Without an explicit stream the draw is keyed by ``scene.scatter_seed`` so it
    stays frozen across frames. One draw per wavelength entry.
    """
    if rng is None:
        rng = np.random.default_rng(scene.scatter_seed)
    lam = np.asarray(lam, dtype=float)
    z = rng.standard_normal(lam.shape + (2,))
    h = math.sqrt(scene.scatter_variance / 2) * (z[..., 0] + 1j * z[..., 1])
    return h[()] if h.ndim == 0 else h


def channel_response(scene: Scene, config: RisConfig | None, grid: SubcarrierGrid,
                     nu=None, scatter=None, rx_position=None,
                     los: bool = True) -> ChannelResponse:
    """Noise-free per-subcarrier channel components at the (reference) Rx antenna.

    ``nu`` is an optional (Q,) vector of block reflectivities; ``scatter`` an
    explicit h_sc value/vector (zero when omitted).
    """
    lam = grid.wavelengths
    rx = _rx_pos(scene, rx_position)
    zero = np.zeros(grid.N, dtype=complex)
    h_los = los_gain(np.linalg.norm(rx - scene.tx.position), scene.tx.gain,
                     scene.rx.gain, lam) if los else zero
    h_los = np.broadcast_to(h_los, (grid.N,)).astype(complex)
    h_ref = zero
    h_tgt = zero
    if scene.panel is not None and config is not None:
        h_ref = element_gains(scene, config, lam, rx).sum(axis=-1)
        if nu is not None:
            nu = np.asarray(nu, dtype=complex)
            gamma = expand_config(scene.panel, config)
            h_tgt = np.array([gamma @ cascade_coefficients(scene, l, rx) @ nu for l in lam])
    h_sc = zero if scatter is None else np.broadcast_to(np.asarray(scatter, complex), (grid.N,))
    return ChannelResponse(h_los, np.asarray(h_ref, complex), np.array(h_sc, complex),
                           np.asarray(h_tgt, complex))


def complex_noise(rng: np.random.Generator, shape, sigma2: float) -> np.ndarray:
    """Circularly symmetric complex Gaussian samples of variance ``sigma2``."""
    if sigma2 < 0:
        raise ValueError("noise power must be >= 0")
    z = rng.standard_normal(tuple(np.atleast_1d(shape)) + (2,))
    return math.sqrt(sigma2 / 2) * (z[..., 0] + 1j * z[..., 1])


def received_symbol(scene: Scene, config: RisConfig | None, x, sigma2: float,
                    rng: np.random.Generator | None, grid: SubcarrierGrid,
                    nu=None, scatter=None, rx_position=None) -> np.ndarray:
    """y_n = (h_los + Σ_m h_m + h_sc [+ target paths]) x_n + ω_n."""
    x = np.asarray(x, dtype=complex)
    h = channel_response(scene, config, grid, nu=nu, scatter=scatter,
                         rx_position=rx_position).total
    y = h * x
    if sigma2 > 0:
        if rng is None:
            raise ValueError("noise requested without a random stream")
        y = y + complex_noise(rng, y.shape, sigma2)
    return y


def ula_steering(count: int, spacing: float, aoa, lam: float) -> np.ndarray:
    """Far-field ULA response e^{-j2π·spacing·(v-1)·sin(aoa)/λ}, shape (..., count)."""
    v = np.arange(count)
    aoa = np.asarray(aoa, dtype=float)
    return np.exp(-2j * np.pi * spacing * v * np.sin(aoa)[..., None] / lam)


def path_delay(*segments: Sequence[float]) -> float:
    """Propagation delay through a polyline of points."""
    pts = [np.asarray(p, dtype=float) for p in segments]
    return sum(float(np.linalg.norm(b - a)) for a, b in zip(pts, pts[1:])) / C
