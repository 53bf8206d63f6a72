"""Multi-target detection with an RIS-assisted MIMO radar.

Hypotheses are sets of occupied angular blocks. Each cycle the radar picks a
waveform and RIS configurations that separate the currently plausible
hypotheses, transmits, fits target delays and responses per hypothesis and
updates the posterior.

Echo model: the array sees target r through a composite steering vector

    v(θ, c) = a(θ) + κ·α(θ, c)·a(θ_RIS)

where a is the ULA response, θ_RIS the bearing of the panel from the array
and α the element-summed relay factor of the panel under configuration c.
Echoes are recorded on a few subcarriers so that delays appear as a linear
phase ramp e^{-j2π f_n τ}.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channel import SubcarrierGrid, complex_noise, ula_steering
from .ris import RisConfig, RisPanel

SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True, order=True)
class Hypothesis:
    blocks: tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(v) for v in self.blocks)
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("hypothesis blocks must be strictly increasing")
        object.__setattr__(self, "blocks", b)

    @property
    def R(self) -> int:
        return len(self.blocks)


def enumerate_hypotheses(R_min: int, R_max: int, block_count: int) -> list[Hypothesis]:
    if not 0 <= R_min <= R_max <= block_count:
        raise ValueError("need 0 <= R_min <= R_max <= block_count")
    return [Hypothesis(c) for R in range(R_min, R_max + 1)
            for c in itertools.combinations(range(block_count), R)]


@dataclass(frozen=True)
class RadarParams:
    """Unit-power transmit weights and the RIS states for both radar modes."""

    waveform: np.ndarray
    tx_config: RisConfig | None = None
    rx_config: RisConfig | None = None

    def __post_init__(self):
        w = np.asarray(self.waveform, dtype=complex).ravel()
        if abs(np.vdot(w, w).real - 1.0) > 1e-9:
            raise ValueError("waveform must have unit total power")
        object.__setattr__(self, "waveform", w)


@dataclass
class RadarScene:
    """Array, angular blocks, optional panel and the delay search grid."""

    antenna_count: int
    block_angles: np.ndarray
    grid: SubcarrierGrid
    delays: np.ndarray
    panel: RisPanel | None = None
    ris_gain: float = 1.0
    spacing: float | None = None

    def __post_init__(self):
        self.block_angles = np.asarray(self.block_angles, dtype=float)
        self.delays = np.asarray(self.delays, dtype=float)
        if self.antenna_count < 1 or self.block_angles.size < 1 or self.delays.size < 1:
            raise ValueError("radar scene needs antennas, blocks and delays")
        self.lam = float(np.mean(self.grid.wavelengths))
        if self.spacing is None:
            self.spacing = self.lam / 2
        self.direct = ula_steering(self.antenna_count, self.spacing, self.block_angles, self.lam)
        # (D, N) delay ramps
        self.ramps = np.exp(-2j * np.pi * np.outer(self.delays, self.grid.frequencies))
        self.ramp_gram = self.ramps.conj() @ self.ramps.T
        if self.panel is not None:
            p = self.panel.element_positions
            u = np.column_stack([np.cos(self.block_angles), np.sin(self.block_angles),
                                 np.zeros(self.block_angles.size)])
            path = np.linalg.norm(p, axis=1)[:, None] - p @ u.T         # (M, B)
            relay = np.exp(-2j * np.pi * path / self.lam) / self.panel.M
            A = np.zeros((self.panel.n_groups, self.B), dtype=complex)
            np.add.at(A, self.panel.group_index, relay)
            self.relay = A
            c = self.panel.center
            self.ris_angle = math.atan2(c[1], c[0])
            self.ris_steer = ula_steering(self.antenna_count, self.spacing, self.ris_angle, self.lam)

    @property
    def B(self) -> int:
        return self.block_angles.size

    @property
    def V(self) -> int:
        return self.antenna_count

    @property
    def D(self) -> int:
        return self.delays.size

    @property
    def has_ris(self) -> bool:
        return self.panel is not None and self.ris_gain != 0

    def steering(self, config: RisConfig | None) -> np.ndarray:
        """Composite steering vectors of every block, shape (B, V)."""
        if not self.has_ris or config is None:
            return self.direct
        alpha = self.panel.group_responses(config) @ self.relay
        return self.direct + self.ris_gain * alpha[:, None] * self.ris_steer[None, :]

    def default_params(self) -> RadarParams:
        w = np.ones(self.V, dtype=complex) / math.sqrt(self.V)
        if self.panel is None:
            return RadarParams(w)
        c = self.panel.default_config()
        return RadarParams(w, c, c)

    def random_params(self, rng: np.random.Generator, waveform=None) -> RadarParams:
        w = self.default_params().waveform if waveform is None else waveform
        if self.panel is None:
            return RadarParams(w)
        return RadarParams(w, self.panel.random_config(rng), self.panel.random_config(rng))


def _block_factors(scene: RadarScene, params: RadarParams) -> tuple[np.ndarray, np.ndarray]:
    """Receive steering (B, V) and scalar transmit gain (B,) of every block."""
    v_rx = scene.steering(params.rx_config)
    t = scene.steering(params.tx_config) @ params.waveform
    return v_rx, t


def expected_echo(U: Hypothesis, taus, gammas, params: RadarParams,
                  scene: RadarScene) -> np.ndarray:
    """Noise-free echo ȳ, shape (V, N)."""
    gammas = np.asarray(gammas, dtype=complex).ravel()
    taus = np.asarray(taus, dtype=float).ravel()
    if gammas.size != U.R or taus.size != U.R:
        raise ValueError("one delay and one response per target")
    y = np.zeros((scene.V, scene.grid.N), dtype=complex)
    if U.R == 0:
        return y
    v_rx, t = _block_factors(scene, params)
    ramps = np.exp(-2j * np.pi * np.outer(taus, scene.grid.frequencies))
    for r, b in enumerate(U.blocks):
        y += gammas[r] * t[b] * np.outer(v_rx[b], ramps[r])
    return y


def transmit(U: Hypothesis, taus, gammas, params: RadarParams, scene: RadarScene,
             sigma2: float, rng: np.random.Generator | None) -> np.ndarray:
    y = expected_echo(U, taus, gammas, params, scene)
    if sigma2 > 0:
        y = y + complex_noise(rng, y.shape, sigma2)
    return y


class EchoHistory:
    """Sufficient statistics of all received cycles.

    Targets are static, so every cycle shares (τ, γ); the least-squares
    normal equations then only need Σ_i P_i (block cross-gains),
    Σ_i b_i (block/delay correlations) and Σ_i ‖y_i‖².
    """

    def __init__(self, scene: RadarScene):
        self.scene = scene
        self.P = np.zeros((scene.B, scene.B), dtype=complex)
        self.b = np.zeros((scene.B, scene.D), dtype=complex)
        self.yy = 0.0
        self.cycles = 0

    def add(self, y, params: RadarParams) -> None:
        y = np.asarray(y, dtype=complex).reshape(self.scene.V, self.scene.grid.N)
        v_rx, t = _block_factors(self.scene, params)
        s = v_rx * t[:, None]                                     # (B, V)
        self.P += s.conj() @ s.T
        self.b += s.conj() @ y @ self.scene.ramps.conj().T
        self.yy += float(np.vdot(y, y).real)
        self.cycles += 1

    @classmethod
    def of(cls, scene: RadarScene, ys: Sequence, params: Sequence[RadarParams]) -> "EchoHistory":
        h = cls(scene)
        for y, p in zip(ys, params):
            h.add(y, p)
        return h

    def normal_equations(self, U: Hypothesis, delay_idx) -> tuple[np.ndarray, np.ndarray]:
        """Gram (…, R, R) and right-hand side (…, R) for delay index tuples."""
        d = np.asarray(delay_idx, dtype=int)
        blocks = np.asarray(U.blocks)
        P = self.P[np.ix_(blocks, blocks)]
        E = self.scene.ramp_gram[d[..., :, None], d[..., None, :]]
        G = P * E
        rhs = self.b[blocks, d]
        return G, rhs


@dataclass
class Fit:
    hypothesis: Hypothesis
    taus: np.ndarray
    gammas: np.ndarray
    residual: float
    identifiable: bool = True
    delay_idx: tuple[int, ...] = ()


def ml_fit(history: EchoHistory, U: Hypothesis) -> Fit:
    """Grid search over target delays with closed-form least-squares responses."""
    scene = history.scene
    if U.R == 0:
        return Fit(U, np.zeros(0), np.zeros(0, complex), history.yy)
    combos = np.array(list(itertools.product(range(scene.D), repeat=U.R)), dtype=int)
    G, rhs = history.normal_equations(U, combos)
    scale = np.real(np.trace(G, axis1=1, axis2=2))
    ok = np.linalg.cond(G) < 1e10 if U.R > 1 else (scale > 0)
    ok &= scale > 1e-300
    if not ok.any():
        return Fit(U, np.full(U.R, np.nan), np.full(U.R, np.nan + 0j), history.yy, identifiable=False)
    Gs, rs = G[ok], rhs[ok]
    gam = np.linalg.solve(Gs, rs[..., None])[..., 0]
    explained = np.real(np.einsum("ki,ki->k", rs.conj(), gam))
    k = int(np.argmax(explained))
    idx = tuple(int(v) for v in combos[ok][k])
    return Fit(U, scene.delays[list(idx)], gam[k], history.yy - float(explained[k]), True, idx)


def log_likelihood(history: EchoHistory, U: Hypothesis, sigma2: float,
                   fit: Fit | None = None, prior_var: float | None = 1.0) -> float:
    """Log-likelihood of the whole history under U at the fitted delays.

    With ``prior_var=None`` this is the plug-in value −‖y − ȳ(τ̂, γ̂)‖²/σ².
    Otherwise the responses are integrated against a CN(0, prior_var) prior,
    which adds the log-determinant penalty that keeps nested hypotheses from
    always favouring more targets. Constants shared by all hypotheses are
    dropped.
    """
    sigma2 = max(float(sigma2), SIGMA2_FLOOR)
    fit = ml_fit(history, U) if fit is None else fit
    if not fit.identifiable:
        return -math.inf
    if prior_var is None or U.R == 0:
        return -max(fit.residual, 0.0) / sigma2
    G, rhs = history.normal_equations(U, fit.delay_idx)
    R = U.R
    sol = np.linalg.solve(G + (sigma2 / prior_var) * np.eye(R), rhs)
    quad = history.yy - float(np.real(np.vdot(rhs, sol)))
    _, logdet = np.linalg.slogdet(np.eye(R) + (prior_var / sigma2) * G)
    return -quad / sigma2 - float(logdet)


def bayes_update(prior, loglik) -> np.ndarray:
    """Posterior ∝ prior · exp(loglik), normalised in log space."""
    prior = np.asarray(prior, dtype=float)
    loglik = np.asarray(loglik, dtype=float)
    if np.any(prior < 0) or abs(prior.sum() - 1) > 1e-9:
        raise ValueError("prior must be a probability vector")
    with np.errstate(divide="ignore"):
        logp = np.log(prior) + loglik
    if not np.isfinite(logp).any():
        raise FloatingPointError("numerical underflow: no hypothesis has mass")
    # shifting by the max keeps the largest term at exactly 1
    post = np.exp(logp - np.max(logp))
    return post / post.sum()


def symmetric_kl(fit_a: Fit, fit_b: Fit, params: RadarParams, sigma2: float,
                 scene: RadarScene) -> float:
    """KL(p_a‖p_b) + KL(p_b‖p_a) = ‖ȳ_a − ȳ_b‖²/σ² for equal-covariance Gaussians."""
    sigma2 = max(float(sigma2), SIGMA2_FLOOR)
    diff = (expected_echo(fit_a.hypothesis, fit_a.taus, fit_a.gammas, params, scene)
            - expected_echo(fit_b.hypothesis, fit_b.taus, fit_b.gammas, params, scene))
    return float(np.vdot(diff, diff).real) / sigma2


def prior_fit(U: Hypothesis, scene: RadarScene) -> Fit:
    """Nuisance stand-in before any echo: unit responses at the nearest delay."""
    return Fit(U, np.full(U.R, scene.delays[0]), np.ones(U.R, complex), 0.0, True, (0,) * U.R)


class _Separation:
    """Pairwise separation objective over the top-P hypotheses.

    Each pair's echo difference is linear in the waveform, Δȳ = M·w, so its
    divergence is w^H (M^H M) w / σ². The objective is min over pairs of
    d_jj' / w_jj' with w_jj' the normalised posterior weight p_j p_j'.
    """

    def __init__(self, fits: Sequence[Fit], weights: np.ndarray, sigma2: float, scene: RadarScene):
        self.scene = scene
        self.sigma2 = max(float(sigma2), SIGMA2_FLOOR)
        self.pairs = [(i, j) for i in range(len(fits)) for j in range(i + 1, len(fits))]
        w = np.array([weights[i] * weights[j] for i, j in self.pairs])
        self.pair_w = w / w.max() if w.size and w.max() > 0 else w
        # per fit: list of (block, γ·ramp row)
        self.terms = [[(b, g * np.exp(-2j * np.pi * tau * scene.grid.frequencies))
                       for b, g, tau in zip(f.hypothesis.blocks, f.gammas, f.taus)] for f in fits]

    def pair_maps(self, params: RadarParams) -> list[np.ndarray]:
        """Δȳ as a linear map of the waveform, one (V·N, V) matrix per pair."""
        v_rx = self.scene.steering(params.rx_config)
        v_tx = self.scene.steering(params.tx_config)
        maps = []
        for i, j in self.pairs:
            Mx = np.zeros((self.scene.V * self.scene.grid.N, self.scene.V), dtype=complex)
            for sign, terms in ((1.0, self.terms[i]), (-1.0, self.terms[j])):
                for b, ramp in terms:
                    Mx += sign * np.outer(np.outer(v_rx[b], ramp).ravel(), v_tx[b])
            maps.append(Mx)
        return maps

    def value(self, params: RadarParams, maps=None) -> tuple[float, int]:
        maps = self.pair_maps(params) if maps is None else maps
        w = params.waveform
        d = np.array([np.vdot(Mx @ w, Mx @ w).real for Mx in maps]) / self.sigma2
        with np.errstate(divide="ignore"):
            score = np.where(self.pair_w > 0, d / np.where(self.pair_w > 0, self.pair_w, 1.0), np.inf)
        k = int(np.argmin(score))
        return float(score[k]), k


def separation_objective(posterior, fits: Sequence[Fit], params: RadarParams, sigma2: float,
                         scene: RadarScene, top: int = 4) -> float:
    order = np.argsort(-np.asarray(posterior), kind="stable")[:top]
    alive = [k for k in order if posterior[k] > 0]
    if len(alive) < 2:
        return math.inf
    sep = _Separation([fits[k] for k in alive], np.asarray(posterior)[alive], sigma2, scene)
    return sep.value(params)[0]


def optimize_params(posterior, fits: Sequence[Fit], scene: RadarScene, sigma2: float,
                    params: RadarParams, budget: int, rng: np.random.Generator,
                    top: int = 4, optimize_waveform: bool = True,
                    step: float = 0.5) -> tuple[RadarParams, list[float]]:
    """Alternate normalised-gradient waveform steps and greedy per-group
    (tx state, rx state) selection; only improving moves are accepted."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    posterior = np.asarray(posterior, dtype=float)
    order = np.argsort(-posterior, kind="stable")[:top]
    alive = [int(k) for k in order if posterior[k] > 0]
    if len(alive) < 2:
        return params, []
    sep = _Separation([fits[k] for k in alive], posterior[alive], sigma2, scene)
    best, active = sep.value(params)
    trace = [best]
    left = budget - 1
    K = scene.panel.K if scene.has_ris else 1
    groups = scene.panel.n_groups if scene.has_ris else 0
    while left > 0:
        improved = False
        if optimize_waveform and scene.V > 1:
            eta = step
            for _ in range(8):
                if left <= 0:
                    break
                maps = sep.pair_maps(params)
                Mx = maps[active]
                grad = Mx.conj().T @ (Mx @ params.waveform)
                gn = np.linalg.norm(grad)
                if gn == 0:
                    break
                w = params.waveform + eta * grad / gn
                cand = RadarParams(w / np.linalg.norm(w), params.tx_config, params.rx_config)
                v, k = sep.value(cand, maps)
                left -= 1
                if v > best:
                    params, best, active, improved = cand, v, k, True
                    trace.append(best)
                else:
                    eta /= 2
        for g in rng.permutation(groups):
            if left <= 0:
                break
            for kt in range(K):
                for kr in range(K):
                    if left <= 0 or (kt == params.tx_config[g] and kr == params.rx_config[g]):
                        continue
                    cand = RadarParams(params.waveform, params.tx_config.with_state(g, kt),
                                       params.rx_config.with_state(g, kr))
                    v, k = sep.value(cand)
                    left -= 1
                    if v > best:
                        params, best, active, improved = cand, v, k, True
                        trace.append(best)
        if not improved:
            break
    return params, trace


@dataclass
class Target:
    hypothesis: Hypothesis
    taus: np.ndarray
    gammas: np.ndarray


def draw_target(hypotheses: Sequence[Hypothesis], scene: RadarScene, rng: np.random.Generator,
                R_choices: Sequence[int] | None = None, prior_var: float = 1.0) -> Target:
    """Truth drawn uniformly over the hypothesis set with on-grid delays and
    CN(0, prior_var) responses."""
    pool = [h for h in hypotheses if R_choices is None or h.R in R_choices]
    U = pool[int(rng.integers(len(pool)))]
    taus = scene.delays[rng.integers(0, scene.D, size=U.R)]
    gammas = complex_noise(rng, U.R, prior_var)
    return Target(U, taus, gammas)


@dataclass
class DetectionRun:
    hypotheses: list[Hypothesis]
    posteriors: np.ndarray
    chosen: list[Hypothesis] = field(default_factory=list)

    @property
    def final(self) -> Hypothesis:
        return self.chosen[-1]


SCHEMES = ("optimized", "random", "no_ris")


def detect(scene: RadarScene, truth: Target, hypotheses: Sequence[Hypothesis], cycles: int,
           sigma2: float, rng: np.random.Generator, scheme: str = "optimized",
           budget: int = 200, prior_var: float = 1.0, top: int = 4,
           noise_rng: np.random.Generator | None = None) -> DetectionRun:
    """Per-cycle loop: choose parameters, transmit/receive, fit every
    hypothesis on the full history, update the posterior from the uniform
    initial prior and pick the MAP hypothesis."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "no_ris":
        scene = RadarScene(scene.antenna_count, scene.block_angles, scene.grid, scene.delays,
                           None, 0.0, scene.spacing)
    noise_rng = rng if noise_rng is None else noise_rng
    hypotheses = list(hypotheses)
    J = len(hypotheses)
    p1 = np.full(J, 1.0 / J)
    post = p1
    fits = [prior_fit(U, scene) for U in hypotheses]
    history = EchoHistory(scene)
    params = scene.default_params()
    trace, chosen = [], []
    for _ in range(cycles):
        if scheme == "optimized":
            params, _ = optimize_params(post, fits, scene, sigma2, params, budget, rng, top)
        else:
            params = scene.random_params(rng)
        y = transmit(truth.hypothesis, truth.taus, truth.gammas, params, scene, sigma2, noise_rng)
        history.add(y, params)
        fits = [ml_fit(history, U) for U in hypotheses]
        ll = np.array([log_likelihood(history, U, sigma2, f, prior_var) for U, f in zip(hypotheses, fits)])
        post = bayes_update(p1, ll)
        trace.append(post)
        chosen.append(hypotheses[int(np.argmax(post))])
    return DetectionRun(hypotheses, np.array(trace), chosen)


def detection_curves(runs: Sequence[DetectionRun], truths: Sequence[Target]) -> tuple[np.ndarray, np.ndarray]:
    """P_D (MAP equals the truth) and P_MD (MAP misses a true block) per cycle."""
    hit = np.array([[c == t.hypothesis for c in r.chosen] for r, t in zip(runs, truths)], dtype=float)
    miss = np.array([[not set(t.hypothesis.blocks) <= set(c.blocks) for c in r.chosen]
                     for r, t in zip(runs, truths)], dtype=float)
    return hit.mean(axis=0), miss.mean(axis=0)


def cycles_to_detection(run: DetectionRun, truth: Target, level: float = 0.95) -> float:
    """First cycle (1-based) whose MAP is the truth with posterior ≥ level; inf if never."""
    j = run.hypotheses.index(truth.hypothesis)
    for c, (p, ch) in enumerate(zip(run.posteriors, run.chosen), start=1):
        if ch == truth.hypothesis and p[j] >= level:
            return float(c)
    return math.inf
