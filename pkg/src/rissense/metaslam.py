"""Radio SLAM in a planar room with an RIS acting as a controllable landmark.

Geometry is 2D. The agent carries its Rx at the pose and its Tx at a fixed
offset. Every resolvable path is summarised by a range sum ρ = cτ, an arrival
angle and a complex amplitude; its delay/AoA noise shrinks with path SNR, so
the RIS configuration changes how informative the RIS path is. Mapping uses a
Rao-Blackwellised particle filter (one pose per particle, one EKF per landmark).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .channel import los_gain, ris_path_gain
from .ris import RisConfig, RisPanel, expand_config, neighbor_configs

C = 299792458.0
SCHEMES = ("proposed", "random_config", "no_ris")
_RHO_FLOOR = 1e-6     # m
_AOA_FLOOR = 1e-6     # rad


def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def _angle(v) -> float:
    return math.atan2(v[1], v[0])


# ---- geometry ----

@dataclass(frozen=True)
class Reflector:
    """Infinite plane {x : n·x = offset} with unit normal n."""
    normal: np.ndarray
    offset: float
    gain: float = 1.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = float(np.linalg.norm(n))
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("reflector normal must be nonzero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def side(self, p) -> float:
        return float(np.dot(self.normal, p) - self.offset)


@dataclass(frozen=True)
class Scatterer:
    position: np.ndarray
    reflectivity: complex = 1.0
    is_ris_element: bool = False

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float)
        if not np.all(np.isfinite(p)):
            raise ValueError("scatterer position must be finite")
        object.__setattr__(self, "position", p)


def mirror(point, reflector: Reflector) -> np.ndarray:
    """Image of ``point`` across the reflector plane (virtual Tx / scatterer)."""
    p = np.asarray(point, dtype=float)
    return p - 2.0 * reflector.side(p) * reflector.normal


def specular_point(a, b, reflector: Reflector) -> np.ndarray:
    """Point on the plane where a ray a -> plane -> b bounces."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ai = mirror(a, reflector)
    da, db = reflector.side(ai), reflector.side(b)
    t = da / (da - db)
    return ai + t * (b - ai)


@dataclass(frozen=True)
class PathObservation:
    delay: float
    aoa: float
    amplitude: complex
    cycle: int = 0
    kind: str = ""

    def __post_init__(self):
        if not self.delay >= 0:
            raise ValueError("path delay must be >= 0")

    @property
    def range_sum(self) -> float:
        return self.delay * C


@dataclass
class SlamWorld:
    """Planar room content. The panel's first two coordinates are used."""
    reflectors: tuple[Reflector, ...] = ()
    scatterers: tuple[Scatterer, ...] = ()
    panel: RisPanel | None = None
    frequency: float = 3.2e9
    tx_offset: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.0]))

    def __post_init__(self):
        self.tx_offset = np.asarray(self.tx_offset, dtype=float)

    @property
    def lam(self) -> float:
        return C / self.frequency

    @property
    def ris_center(self) -> np.ndarray | None:
        return None if self.panel is None else self.panel.center[:2].copy()

    @property
    def element_offsets(self) -> np.ndarray:
        return self.panel.element_positions[:, :2] - self.panel.center[:2]

    def without_ris(self) -> "SlamWorld":
        return SlamWorld(self.reflectors, self.scatterers, None, self.frequency, self.tx_offset)


def ris_amplitude(world: SlamWorld, config: RisConfig, pose, center=None) -> complex:
    """Coherent Tx -> elements -> Rx gain of the panel placed at ``center``."""
    if world.panel is None:
        return 0j
    c = world.ris_center if center is None else np.asarray(center, dtype=float)
    elems = c + world.element_offsets
    rx = np.asarray(pose, dtype=float)
    tx = rx + world.tx_offset
    d_t = np.linalg.norm(elems - tx, axis=1)
    d_r = np.linalg.norm(elems - rx, axis=1)
    gamma = expand_config(world.panel, config)
    return complex(np.sum(ris_path_gain(d_t, d_r, gamma, 1.0, 1.0, world.lam)))


def synthesize_paths(world: SlamWorld, pose, config: RisConfig | None,
                     cycle: int = 0, second_order: bool = True) -> list[PathObservation]:
    """Noise-free paths seen at ``pose``.

    LoS, one virtual-Tx path per reflector, one path per scatterer, the
    composite RIS path (delay and AoA of the panel centre) and, with
    ``second_order``, scatterer-then-reflector paths via virtual scatterers.
    """
    lam = world.lam
    rx = np.asarray(pose, dtype=float)
    tx = rx + world.tx_offset
    out: list[PathObservation] = []
    d0 = float(np.linalg.norm(world.tx_offset))
    if d0 > 0:
        out.append(PathObservation(d0 / C, _angle(world.tx_offset),
                                   complex(los_gain(d0, 1.0, 1.0, lam)), cycle, "los"))
    for r in world.reflectors:
        if r.side(tx) * r.side(rx) <= 0:
            continue
        vt = mirror(tx, r)
        d = float(np.linalg.norm(vt - rx))
        out.append(PathObservation(d / C, _angle(vt - rx),
                                   r.gain * complex(los_gain(d, 1.0, 1.0, lam)), cycle, "reflector"))
    for s in world.scatterers:
        d1 = float(np.linalg.norm(s.position - tx))
        d2 = float(np.linalg.norm(s.position - rx))
        out.append(PathObservation((d1 + d2) / C, _angle(s.position - rx),
                                   complex(ris_path_gain(d1, d2, s.reflectivity, 1.0, 1.0, lam)),
                                   cycle, "scatterer"))
    if world.panel is not None and config is not None:
        c = world.ris_center
        d = float(np.linalg.norm(c - tx) + np.linalg.norm(c - rx))
        out.append(PathObservation(d / C, _angle(c - rx), ris_amplitude(world, config, rx),
                                   cycle, "ris"))
    if second_order:
        for s in world.scatterers:
            for r in world.reflectors:
                if r.side(s.position) * r.side(rx) <= 0:
                    continue
                vs = mirror(s.position, r)
                d1 = float(np.linalg.norm(s.position - tx))
                d2 = float(np.linalg.norm(vs - rx))
                amp = r.gain * complex(ris_path_gain(d1, d2, s.reflectivity, 1.0, 1.0, lam))
                out.append(PathObservation((d1 + d2) / C, _angle(vs - rx), amp, cycle,
                                           "scatterer_reflector"))
    return out


# ---- measurement noise ----

@dataclass(frozen=True)
class NoiseModel:
    """Per-path Gaussian errors with std ∝ 1/sqrt(SNR), SNR = |a|²/noise_power.

    ``delay_std`` (s) and ``aoa_std`` (rad) are the stds at unit SNR. Paths
    below ``snr_min`` are not detected.
    """
    delay_std: float = 1e-9
    aoa_std: float = 0.1
    noise_power: float = 0.0
    snr_min: float = 1.0

    def snr(self, amplitude) -> np.ndarray:
        a2 = np.abs(np.asarray(amplitude)) ** 2
        if self.noise_power == 0:
            return np.where(a2 > 0, np.inf, 0.0)
        return a2 / self.noise_power

    def variances(self, amplitude) -> tuple[np.ndarray, np.ndarray]:
        """(delay variance s², AoA variance rad²) of paths with these amplitudes."""
        with np.errstate(divide="ignore"):
            inv = 1.0 / self.snr(amplitude)
        return self.delay_std ** 2 * inv, self.aoa_std ** 2 * inv


def observe(paths: Sequence[PathObservation], noise: NoiseModel,
            rng: np.random.Generator) -> list[PathObservation]:
    """Noisy detected copies of ``paths`` (one draw of every noise term per path)."""
    out = []
    for p in paths:
        z = rng.standard_normal(4)
        snr = float(noise.snr(p.amplitude))
        if snr < noise.snr_min:
            continue
        vt, va = noise.variances(p.amplitude)
        amp = p.amplitude + math.sqrt(noise.noise_power / 2) * complex(z[2], z[3])
        out.append(PathObservation(max(p.delay + math.sqrt(vt) * z[0], 0.0),
                                   float(_wrap(p.aoa + math.sqrt(va) * z[1])),
                                   amp, p.cycle, p.kind))
    return out


# ---- Fisher information ----

def delay_gradient(pose, anchor, tx_offset=(0.0, 0.0)) -> np.ndarray:
    """∂τ/∂pose (s/m) of the path Tx -> anchor -> Rx, Tx = pose + offset."""
    x = np.asarray(pose, dtype=float)
    a = np.asarray(anchor, dtype=float)
    u1 = (a - x) / np.linalg.norm(a - x)
    u2 = (a - x - tx_offset) / np.linalg.norm(a - x - tx_offset)
    return -(u1 + u2) / C


def path_delay(pose, anchor, tx_offset=(0.0, 0.0)) -> float:
    x = np.asarray(pose, dtype=float)
    a = np.asarray(anchor, dtype=float)
    return float(np.linalg.norm(a - x) + np.linalg.norm(a - x - tx_offset)) / C


def aoa_gradient(pose, anchor) -> np.ndarray:
    d = np.asarray(anchor, dtype=float) - np.asarray(pose, dtype=float)
    return np.array([d[1], -d[0]]) / float(d @ d)


def fisher_information(pose, anchors, delay_var, aoa_var, tx_offset=(0.0, 0.0),
                       use: Sequence[str] = ("delay", "aoa")) -> np.ndarray:
    """Σ_l J_τ ∇τ∇τᵀ + J_θ ∇θ∇θᵀ over static anchors, J = 1/variance."""
    J = np.zeros((2, 2))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    # noise-free readings are floored like the filter's own covariances
    vt = np.maximum(np.broadcast_to(np.asarray(delay_var, dtype=float), (anchors.shape[0],)),
                    (_RHO_FLOOR / C) ** 2)
    va = np.maximum(np.broadcast_to(np.asarray(aoa_var, dtype=float), (anchors.shape[0],)),
                    _AOA_FLOOR ** 2)
    for a, st, sa in zip(anchors, vt, va):
        if "delay" in use and st < math.inf:
            g = delay_gradient(pose, a, tx_offset)
            J += np.outer(g, g) / st
        if "aoa" in use and sa < math.inf:
            g = aoa_gradient(pose, a)
            J += np.outer(g, g) / sa
    return J


def crlb(J) -> float:
    """Trace of the inverse information (m²)."""
    J = np.asarray(J, dtype=float)
    w = np.linalg.eigvalsh(0.5 * (J + J.T))
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        raise ValueError("unlocalizable pose: singular Fisher information")
    return float(np.sum(1.0 / w))


@dataclass
class CrlbSearch:
    config: RisConfig
    crlb: float
    trace: list[float] = field(default_factory=list)
    evaluations: int = 0


def select_config_crlb(world: SlamWorld, pose, noise: NoiseModel, budget: int,
                       rng: np.random.Generator, static_anchors=(), static_amplitudes=(),
                       ris_anchor=None, init: Sequence[RisConfig] = ()) -> CrlbSearch:
    """Random-restart neighbor descent on the CRLB trace at ``pose``.

    Static anchors contribute config-independent information; the RIS anchor
    (panel centre estimate) contributes a path whose SNR follows the config.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    panel = world.panel
    G, K = panel.n_groups, panel.K
    pose = np.asarray(pose, dtype=float)
    ris_anchor = world.ris_center if ris_anchor is None else np.asarray(ris_anchor, dtype=float)
    anchors = np.asarray(static_anchors, dtype=float).reshape(-1, 2)
    vt, va = noise.variances(np.asarray(static_amplitudes, dtype=complex))
    detected = noise.snr(np.asarray(static_amplitudes, dtype=complex)) >= noise.snr_min
    J0 = fisher_information(pose, anchors[detected], vt[detected], va[detected], world.tx_offset)
    cache: dict[RisConfig, float] = {}
    trace: list[float] = []
    best = [None, math.inf]

    def f(cfg: RisConfig) -> float:
        if cfg in cache:
            return cache[cfg]
        if len(cache) >= budget:
            raise StopIteration
        a = ris_amplitude(world, cfg, pose, ris_anchor)
        J = J0
        if noise.snr(a) >= noise.snr_min:
            t, s = noise.variances(a)
            J = J0 + fisher_information(pose, ris_anchor, t, s, world.tx_offset)
        try:
            v = crlb(J)
        except ValueError:
            v = math.inf
        cache[cfg] = v
        if v < best[1] or best[0] is None:
            best[0], best[1] = cfg, v
        trace.append(best[1])
        return v

    try:
        starts = list(init) + [RisConfig.random(G, K, rng) for _ in range(2)]
        stalls = 0
        while stalls < 20:
            n0 = len(cache)
            cur = starts.pop(0) if starts else RisConfig.random(G, K, rng)
            val = f(cur)
            while True:
                nxt, nv = None, val
                for nb in neighbor_configs(cur, K):
                    v = f(nb)
                    if v < nv:
                        nxt, nv = nb, v
                if nxt is None:
                    break
                cur, val = nxt, nv
            stalls = stalls + 1 if len(cache) == n0 else 0
    except StopIteration:
        pass
    return CrlbSearch(best[0], best[1], trace, len(cache))


# ---- path grouping and RIS identification ----

def group_paths(observations: Sequence[PathObservation], angle_threshold: float) -> list[list[int]]:
    """Single-linkage clusters of arrival angles on the circle."""
    if angle_threshold <= 0:
        raise ValueError("angle_threshold must be > 0")
    n = len(observations)
    if n == 0:
        return []
    ang = np.array([o.aoa for o in observations]) % (2 * np.pi)
    order = np.argsort(ang, kind="stable")
    a = ang[order]
    gaps = np.diff(np.append(a, a[0] + 2 * np.pi))
    cuts = np.flatnonzero(gaps > angle_threshold)
    if cuts.size == 0:
        return [sorted(order.tolist())]
    groups = []
    # rotate so every cluster starts right after a cut
    start = (cuts[-1] + 1) % n
    cur: list[int] = []
    for k in range(n):
        i = (start + k) % n
        cur.append(int(order[i]))
        if gaps[i] > angle_threshold:
            groups.append(sorted(cur))
            cur = []
    return groups


def ris_landmark_update(belief, amplitudes, predicted, static_amplitudes, sigma) -> np.ndarray:
    """Posterior that each landmark is the RIS, given the path amplitudes.

    Under "landmark i is the RIS" its magnitude is Gaussian around the
    config-predicted ``predicted[i]``; every other landmark sits at its
    config-independent level ``static_amplitudes``. Only the ratio for the
    landmark in question survives normalisation. NaN inputs are uninformative.
    """
    belief = np.asarray(belief, dtype=float)
    a = np.abs(np.asarray(amplitudes, dtype=complex))
    a = np.where(np.isnan(np.asarray(amplitudes, dtype=complex)), np.nan, a)
    pr = np.abs(np.asarray(predicted, dtype=complex))
    st = np.abs(np.asarray(static_amplitudes, dtype=complex))
    st = np.where(np.isnan(np.asarray(static_amplitudes, dtype=complex)), np.nan, st)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), belief.shape)
    llr = (-0.5 * ((a - pr) / sigma) ** 2) - (-0.5 * ((a - st) / sigma) ** 2)
    llr = np.where(np.isfinite(llr), llr, 0.0)
    with np.errstate(divide="ignore"):
        logp = np.log(belief) + llr
    post = np.exp(logp - np.max(logp))
    return post / post.sum()


# ---- particle filter ----

def _h(x, L, offset):
    """(ρ, θ) predicted for poses x (..., 2) and landmarks L (..., 2)."""
    d = L - x
    d2 = d - offset
    r1 = np.linalg.norm(d, axis=-1)
    r2 = np.linalg.norm(d2, axis=-1)
    return np.stack([r1 + r2, np.arctan2(d[..., 1], d[..., 0])], axis=-1), d, d2, r1, r2


def _jac_landmark(d, d2, r1, r2):
    H = np.empty(d.shape[:-1] + (2, 2))
    H[..., 0, :] = d / r1[..., None] + d2 / r2[..., None]
    H[..., 1, 0] = -d[..., 1] / r1 ** 2
    H[..., 1, 1] = d[..., 0] / r1 ** 2
    return H


def backproject(pose, z, offset) -> np.ndarray:
    """Anchor position at range sum ρ along bearing θ from ``pose`` (..., 2)."""
    pose = np.asarray(pose, dtype=float)
    rho, th = z[0], z[1]
    u = np.array([math.cos(th), math.sin(th)])
    o = np.asarray(offset, dtype=float)
    r = (rho ** 2 - o @ o) / (2 * (rho - u @ o))
    return pose + r * u


@dataclass
class ParticleSet:
    poses: np.ndarray                  # (P, 2)
    means: np.ndarray                  # (P, L, 2)
    covs: np.ndarray                   # (P, L, 2, 2)
    weights: np.ndarray                # (P,)
    degenerate: bool = False

    @classmethod
    def at(cls, pose, count: int) -> "ParticleSet":
        if count < 1:
            raise ValueError("particle count must be >= 1")
        poses = np.tile(np.asarray(pose, dtype=float), (count, 1))
        return cls(poses, np.zeros((count, 0, 2)), np.zeros((count, 0, 2, 2)),
                   np.full(count, 1.0 / count))

    @property
    def count(self) -> int:
        return self.poses.shape[0]

    @property
    def n_landmarks(self) -> int:
        return self.means.shape[1]

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def mean_pose(self) -> np.ndarray:
        return self.weights @ self.poses

    def landmark_means(self) -> np.ndarray:
        return np.einsum("p,pld->ld", self.weights, self.means)

    def add_landmark(self, z, R, offset) -> None:
        """Initialise a landmark in every particle from one (ρ, θ) reading."""
        z = np.asarray(z, dtype=float)
        L = np.array([backproject(x, z, offset) for x in self.poses])
        _, d, d2, r1, r2 = _h(self.poses, L, np.asarray(offset, dtype=float))
        Hi = np.linalg.inv(_jac_landmark(d, d2, r1, r2))
        S = Hi @ np.asarray(R, dtype=float) @ np.swapaxes(Hi, -1, -2)
        self.means = np.concatenate([self.means, L[:, None, :]], axis=1)
        self.covs = np.concatenate([self.covs, 0.5 * (S + np.swapaxes(S, -1, -2))[:, None]], axis=1)


def measurement_cov(obs: PathObservation, noise: NoiseModel) -> np.ndarray:
    """(ρ, θ) covariance estimated from the measured amplitude."""
    vt, va = noise.variances(obs.amplitude)
    return np.diag([max(float(vt) * C * C, _RHO_FLOOR ** 2), max(float(va), _AOA_FLOOR ** 2)])


def systematic_resample(weights, rng: np.random.Generator) -> np.ndarray:
    P = weights.size
    pos = (rng.random() + np.arange(P)) / P
    idx = np.searchsorted(np.cumsum(weights), pos, side="right")
    return np.minimum(idx, P - 1)


def _ekf_landmarks(poses, means, covs, observations, offset):
    """Per-particle landmark EKF updates (Joseph form); returns the log-likelihood."""
    P = poses.shape[0]
    loglik = np.zeros(P)
    I = np.eye(2)
    for l, z, R in observations:
        z = np.asarray(z, dtype=float)
        R = np.asarray(R, dtype=float)
        zh, d, d2, r1, r2 = _h(poses, means[:, l], offset)
        H = _jac_landmark(d, d2, r1, r2)
        Sig = covs[:, l]
        Ht = np.swapaxes(H, -1, -2)
        S = H @ Sig @ Ht + R
        nu = z - zh
        nu[:, 1] = _wrap(nu[:, 1])
        Si = np.linalg.inv(S)
        K = Sig @ Ht @ Si
        means[:, l] += np.einsum("pij,pj->pi", K, nu)
        A = I - K @ H
        new = A @ Sig @ np.swapaxes(A, -1, -2) + K @ R @ np.swapaxes(K, -1, -2)
        covs[:, l] = 0.5 * (new + np.swapaxes(new, -1, -2))
        _, logdet = np.linalg.slogdet(2 * np.pi * S)
        loglik += -0.5 * np.einsum("pi,pij,pj->p", nu, Si, nu) - 0.5 * logdet
    return loglik


def _conditioned_poses(poses, means, covs, observations, offset, motion_std, rng):
    """Sample poses from the motion prior conditioned on the readings.

    Linearised at each particle's predicted pose: the stacked innovation has
    covariance H_x Q H_xᵀ + blockdiag(H_L Σ_l H_Lᵀ + R_l), whose Gaussian
    density is the particle's weight factor.
    """
    P = poses.shape[0]
    n = len(observations)
    Hx = np.empty((P, 2 * n, 2))
    nu = np.empty((P, 2 * n))
    Sb = np.zeros((P, 2 * n, 2 * n))
    for k, (l, z, R) in enumerate(observations):
        zh, d, d2, r1, r2 = _h(poses, means[:, l], offset)
        H = _jac_landmark(d, d2, r1, r2)
        Hx[:, 2 * k:2 * k + 2] = -H
        v = np.asarray(z, dtype=float) - zh
        v[:, 1] = _wrap(v[:, 1])
        nu[:, 2 * k:2 * k + 2] = v
        Sb[:, 2 * k:2 * k + 2, 2 * k:2 * k + 2] = H @ covs[:, l] @ np.swapaxes(H, -1, -2) \
            + np.asarray(R, dtype=float)
    q = motion_std ** 2
    Hxt = np.swapaxes(Hx, -1, -2)
    T = q * Hx @ Hxt + Sb
    Ti = np.linalg.inv(T)
    _, logdet = np.linalg.slogdet(2 * np.pi * T)
    loglik = -0.5 * np.einsum("pi,pij,pj->p", nu, Ti, nu) - 0.5 * logdet
    Kx = q * Hxt @ Ti                                   # (P, 2, 2n)
    mu = poses + np.einsum("pij,pj->pi", Kx, nu)
    cov = q * np.eye(2) - q * Kx @ Hx
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, V = np.linalg.eigh(cov)
    root = V * np.sqrt(np.clip(w, 0.0, None))[:, None, :]
    return mu + np.einsum("pij,pj->pi", root, rng.standard_normal((P, 2))), loglik


def pf_step(ps: ParticleSet, observations, motion, motion_std: float,
            rng: np.random.Generator, tx_offset=(0.0, 0.0),
            proposal: str = "conditioned") -> ParticleSet:
    """Propagate, update landmark EKFs, reweight and resample if ESS < P/2.

    ``observations`` holds (landmark index, z = (ρ, θ), R) triples. Each
    path's likelihood uses its own R, which weights paths by inverse error
    variance. ``proposal="motion"`` draws poses from the motion model alone;
    ``"conditioned"`` also folds the readings into the pose draw, which keeps
    particles alive when paths are much sharper than odometry.
    """
    if proposal not in ("motion", "conditioned"):
        raise ValueError(f"unknown proposal {proposal!r}")
    P = ps.count
    offset = np.asarray(tx_offset, dtype=float)
    poses = ps.poses + np.asarray(motion, dtype=float)
    means, covs = ps.means.copy(), ps.covs.copy()
    if proposal == "conditioned" and observations and motion_std > 0:
        poses, loglik = _conditioned_poses(poses, means, covs, observations, offset,
                                           motion_std, rng)
        _ekf_landmarks(poses, means, covs, observations, offset)
    else:
        if motion_std > 0:
            poses = poses + motion_std * rng.standard_normal(poses.shape)
        loglik = _ekf_landmarks(poses, means, covs, observations, offset)
    with np.errstate(divide="ignore"):
        logw = np.log(ps.weights) + loglik
    degenerate = False
    if not np.any(np.isfinite(logw)):
        w = np.full(P, 1.0 / P)
        degenerate = True
    else:
        logw = np.where(np.isnan(logw), -np.inf, logw)
        w = np.exp(logw - logsumexp(logw))
        w = w / w.sum()
    out = ParticleSet(poses, means, covs, w, degenerate)
    if out.ess < P / 2:
        idx = systematic_resample(w, rng)
        out = ParticleSet(poses[idx], means[idx], covs[idx], np.full(P, 1.0 / P), degenerate)
    return out


# ---- full loop ----

@dataclass
class SlamRun:
    errors: np.ndarray         # per-cycle position error (m)
    rmse: np.ndarray           # cumulative RMSE up to each cycle (m)
    ris_belief: list[np.ndarray]
    configs: list[RisConfig | None]
    n_landmarks: int
    estimates: np.ndarray      # (cycles, 2)
    walls: list[Reflector] = field(default_factory=list)


@dataclass
class _Landmark:
    amplitudes: list[float] = field(default_factory=list)

    def level(self) -> float:
        return float(np.mean(self.amplitudes)) if self.amplitudes else math.nan


def implied_wall(pose, z, tx_offset) -> Reflector:
    """Wall that would produce reading z = (ρ, θ) as a virtual-Tx path."""
    rx = np.asarray(pose, dtype=float)
    tx = rx + np.asarray(tx_offset, dtype=float)
    vt = rx + z[0] * np.array([math.cos(z[1]), math.sin(z[1])])
    n = vt - tx
    n = n / np.linalg.norm(n)
    return Reflector(n, float(n @ (tx + vt) / 2))


def same_wall(a: Reflector, b: Reflector, angle_tol: float, offset_tol: float) -> bool:
    cosang = float(np.clip(a.normal @ b.normal, -1.0, 1.0))
    return math.acos(cosang) < angle_tol and abs(a.offset - b.offset) < offset_tol


def vs_reading(anchor, wall: Reflector, pose, tx_offset) -> tuple[float, float] | None:
    """(ρ, θ) of the anchor -> wall -> Rx path, via the virtual scatterer."""
    rx = np.asarray(pose, dtype=float)
    tx = rx + np.asarray(tx_offset, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    if wall.side(anchor) * wall.side(rx) <= 0:
        return None
    vs = mirror(anchor, wall)
    return float(np.linalg.norm(anchor - tx) + np.linalg.norm(vs - rx)), _angle(vs - rx)


def _explained_as_vs(o: PathObservation, anchors, walls, pose, offset, rho_tol, angle_tol) -> bool:
    for a in anchors:
        for w in walls:
            r = vs_reading(a, w, pose, offset)
            if r is not None and abs(r[0] - o.range_sum) < rho_tol \
                    and abs(_wrap(r[1] - o.aoa)) < angle_tol:
                return True
    return False


def slam_run(world: SlamWorld, trajectory, cycles: int, scheme: str, rng: np.random.Generator,
             noise: NoiseModel, noise_rng: np.random.Generator | None = None,
             particles: int = 500, motion_std: float = 0.01, angle_threshold: float = 0.05,
             assoc_gate: float = 0.3, confirm_gate: float = 0.05, budget: int = 60,
             amp_rel_std: float = 0.1, second_order: bool = True,
             wall_tol: tuple[float, float] = (0.01, 0.02)) -> SlamRun:
    """Cycle loop: pick config, measure, group, identify the RIS, filter.

    ``trajectory`` holds cycles + 1 true positions; the first is the known
    start. Odometry is the true step plus N(0, motion_std²) per axis.

    Path types are told apart by what stays put across cycles: a reading
    whose implied wall repeats is a virtual-Tx path (the wall is mapped, the
    path is not used for positioning); a reading whose back-projected anchor
    repeats is a static landmark; a reading that a known landmark mirrored in
    a known wall explains is a virtual-scatterer path and is skipped.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    traj = np.asarray(trajectory, dtype=float)
    if traj.shape[0] < cycles + 1:
        raise ValueError("trajectory needs cycles + 1 positions")
    noise_rng = rng if noise_rng is None else noise_rng
    if scheme == "no_ris":
        world = world.without_ris()
    offset = world.tx_offset
    d0 = float(np.linalg.norm(offset))
    ps = ParticleSet.at(traj[0], particles)
    marks: list[_Landmark] = []
    belief = np.zeros(0)
    candidates: list[np.ndarray] = []
    walls: list[Reflector] = []
    wall_cands: list[Reflector] = []
    config: RisConfig | None = None
    errors, estimates, beliefs, configs = [], [], [], []

    def is_wall(o, pose, pool):
        w = implied_wall(pose, (o.range_sum, o.aoa), offset)
        return any(same_wall(w, q, *wall_tol) for q in pool)

    for c in range(cycles):
        step = traj[c + 1] - traj[c]
        odo = step + motion_std * noise_rng.standard_normal(2)
        pred = ps.mean_pose() + odo
        # step 1: configuration
        if world.panel is None:
            config = None
        elif scheme == "random_config" or belief.size == 0:
            config = world.panel.random_config(rng)
        else:
            lm = ps.landmark_means()
            k = int(np.argmax(belief))
            static = [i for i in range(len(marks)) if i != k]
            init = () if config is None else (config,)
            config = select_config_crlb(
                world, pred, noise, budget, rng, lm[static],
                [marks[i].level() for i in static], lm[k], init).config
        configs.append(config)
        # step 2: measurement
        obs = observe(synthesize_paths(world, traj[c + 1], config, c, second_order),
                      noise, noise_rng)
        obs = [o for o in obs if o.range_sum > d0 + 0.05]   # own Tx leakage
        # step 3: grouping, path typing, association, RIS identification, filtering
        groups = group_paths(obs, angle_threshold) if obs else []
        reps = [max((obs[i] for i in g), key=lambda o: abs(o.amplitude)) for g in groups]
        lm = ps.landmark_means()
        rho_tol = 3 * assoc_gate
        matched: list[tuple[int, PathObservation]] = []
        fresh: list[PathObservation] = []
        for o in reps:
            if is_wall(o, pred, walls) or _explained_as_vs(
                    o, lm, walls, pred, offset, rho_tol, 2 * angle_threshold):
                continue
            p = backproject(pred, (o.range_sum, o.aoa), offset)
            if len(marks):
                dist = np.linalg.norm(lm - p, axis=1)
                j = int(np.argmin(dist))
                if dist[j] < assoc_gate and j not in [m for m, _ in matched]:
                    matched.append((j, o))
                    continue
            fresh.append(o)
        if len(marks) and world.panel is not None:
            amps = np.full(len(marks), np.nan, dtype=complex)
            for j, o in matched:
                amps[j] = o.amplitude
            predicted = np.array([ris_amplitude(world, config, pred, lm[i])
                                  for i in range(len(marks))])
            levels = np.array([m.level() for m in marks])
            sig = np.sqrt(noise.noise_power / 2
                          + (amp_rel_std * np.maximum(np.abs(predicted), np.nan_to_num(levels))) ** 2)
            sig = np.maximum(sig, 1e-300)
            belief = ris_landmark_update(belief, amps, predicted, levels, sig)
        for j, o in matched:
            marks[j].amplitudes.append(abs(o.amplitude))
        zs = [(j, (o.range_sum, o.aoa), measurement_cov(o, noise)) for j, o in matched]
        ps = pf_step(ps, zs, odo, motion_std, rng, offset)
        est = ps.mean_pose()
        # walls first, so virtual-Tx readings never become point landmarks
        rest, new_walls = [], []
        for o in fresh:
            w = implied_wall(est, (o.range_sum, o.aoa), offset)
            if any(same_wall(w, q, *wall_tol) for q in wall_cands):
                walls.append(w)
            else:
                new_walls.append(w)
                rest.append(o)
        wall_cands = new_walls
        pts = [backproject(est, (o.range_sum, o.aoa), offset) for o in rest]
        anchors = list(ps.landmark_means()) + pts
        keep = []
        for o, p in zip(rest, pts):
            if _explained_as_vs(o, anchors, walls, est, offset, rho_tol, 2 * angle_threshold):
                continue
            # gate widens with the reading's own spread (3σ of the anchor)
            R = measurement_cov(o, noise)
            spread = math.sqrt(R[0, 0] + (np.linalg.norm(p - est) ** 2) * R[1, 1])
            gate = max(confirm_gate, 3 * math.sqrt(2) * spread)
            if any(np.linalg.norm(p - q) < gate for q in candidates):
                ps.add_landmark((o.range_sum, o.aoa), measurement_cov(o, noise), offset)
                marks.append(_Landmark([abs(o.amplitude)]))
                n = len(marks)
                belief = np.append(belief * (n - 1) / n, 1.0 / n) if n > 1 else np.ones(1)
            else:
                keep.append(p)
        candidates = keep
        errors.append(float(np.linalg.norm(est - traj[c + 1])))
        estimates.append(est)
        beliefs.append(belief.copy())
    e = np.array(errors)
    rmse = np.sqrt(np.cumsum(e ** 2) / np.arange(1, cycles + 1))
    return SlamRun(e, rmse, beliefs, configs, len(marks), np.array(estimates), walls)


def line_trajectory(start, step, cycles: int) -> np.ndarray:
    """Straight walk: cycles + 1 positions spaced by ``step``."""
    return np.asarray(start, dtype=float) + np.arange(cycles + 1)[:, None] * np.asarray(step, float)
