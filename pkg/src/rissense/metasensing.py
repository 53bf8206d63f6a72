"""Sensing with commodity signals: the cycle protocol, measurement matrix and
vector, coherence-driven schedule design, Bayes posture recognition and
occupancy reconstruction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .channel import Scene, SubcarrierGrid, cascade_coefficients, channel_response, complex_noise
from .ris import RisConfig

CLIP = 1e-9


@dataclass(frozen=True)
class FrameSchedule:
    """RIS configurations of the F data-collection frames plus the
    calibration-phase default."""

    configs: tuple[RisConfig, ...]
    default_config: RisConfig

    def __post_init__(self):
        object.__setattr__(self, "configs", tuple(self.configs))
        if len(self.configs) < 1:
            raise ValueError("schedule needs at least one frame")

    @property
    def F(self) -> int:
        return len(self.configs)

    @property
    def states(self) -> np.ndarray:
        return np.array([c.states for c in self.configs], dtype=int)

    @classmethod
    def from_states(cls, states, default_config: RisConfig) -> "FrameSchedule":
        return cls(tuple(RisConfig(tuple(row)) for row in np.asarray(states)), default_config)

    def validate(self, n_groups: int, K: int) -> None:
        self.default_config.validate(n_groups, K)
        for c in self.configs:
            c.validate(n_groups, K)


class CascadeModel:
    """Group-summed two-bounce coefficients of a scene at one wavelength.

    Γ̃ for any schedule is then (Δγ)·A with Δγ[f, g] = γ(c_f[g]) − γ(c0[g]).
    """

    def __init__(self, scene: Scene, lam: float):
        panel = scene.panel
        if panel is None or scene.soi is None:
            raise ValueError("sensing needs a panel and a space of interest")
        self.scene = scene
        self.lam = lam
        C = cascade_coefficients(scene, lam)
        A = np.zeros((panel.n_groups, C.shape[1]), dtype=complex)
        np.add.at(A, panel.group_index, C)
        self.group_cascade = A
        self.table = np.array([panel.group_responses(RisConfig.constant(panel.n_groups, k))[0]
                               for k in range(panel.K)])

    @property
    def n_groups(self) -> int:
        return self.group_cascade.shape[0]

    @property
    def K(self) -> int:
        return self.table.size

    @property
    def Q(self) -> int:
        return self.group_cascade.shape[1]

    def matrix_from_states(self, states, default_states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=int))
        delta = self.table[states] - self.table[np.asarray(default_states, dtype=int)][None, :]
        return delta @ self.group_cascade

    def matrix(self, schedule: FrameSchedule) -> np.ndarray:
        return self.matrix_from_states(schedule.states, schedule.default_config.states)


def measurement_matrix(scene: Scene, schedule: FrameSchedule, lam: float) -> np.ndarray:
    """Γ̃[f, q] = Σ_m cascade(config_f) − cascade(default) for unit block reflectivity."""
    schedule.validate(scene.panel.n_groups, scene.panel.K)
    return CascadeModel(scene, lam).matrix(schedule)


def simulate_frames(model: CascadeModel, schedule: FrameSchedule, nu, x: complex,
                    sigma2: float, rng: np.random.Generator | None,
                    static: complex = 0.0) -> tuple[np.ndarray, complex]:
    """Received frame signals and the calibration reference of one cycle.

    ``static`` collects every configuration-independent term (LoS, frozen
    scattering); it cancels in the measurement vector.
    """
    nu = np.asarray(nu, dtype=complex)
    A = model.group_cascade
    target = model.table[schedule.states] @ A @ nu
    target0 = model.table[np.asarray(schedule.default_config.states)] @ A @ nu
    y = (static + target) * x
    y0 = (static + target0) * x
    if sigma2 > 0:
        y = y + complex_noise(rng, y.shape, sigma2)
        y0 = y0 + complex_noise(rng, (), sigma2)[()]
    return y, complex(y0)


def empty_room_offset(scene: Scene, schedule: FrameSchedule, grid: SubcarrierGrid,
                      x=1.0, rx_position=None) -> np.ndarray:
    """Per-frame change of the Tx-RIS-Rx path relative to the default config.

    It carries no target information but does depend on the configuration,
    so it is recorded once with the space of interest empty. Shape (F, N).
    """
    x = np.broadcast_to(np.asarray(x, dtype=complex), (grid.N,))
    ref = channel_response(scene, schedule.default_config, grid, los=False,
                           rx_position=rx_position).reflect
    return np.array([(channel_response(scene, c, grid, los=False, rx_position=rx_position).reflect
                      - ref) * x for c in schedule.configs])


def measurement_vector(y_frames, y0, empty=0.0) -> np.ndarray:
    """ŷ = y − y0, minus the empty-room offset when one is given."""
    return np.asarray(y_frames, dtype=complex) - y0 - np.asarray(empty, dtype=complex)


def mutual_coherence(G) -> float:
    """Average normalised |inner product| over ordered pairs of distinct columns."""
    G = np.asarray(G, dtype=complex)
    Q = G.shape[1]
    norms = np.linalg.norm(G, axis=0)
    if np.any(norms == 0):
        raise ValueError("measurement matrix has a zero column")
    if Q < 2:
        return 0.0
    U = G / norms
    gram = np.abs(U.conj().T @ U)
    off = gram.sum() - np.trace(gram)
    return float(min(1.0, off / (Q * (Q - 1))))


def _coherence_or_one(G) -> float:
    try:
        return mutual_coherence(G)
    except ValueError:
        return 1.0


@dataclass
class SearchResult:
    """Outcome of a discrete configuration search.

    ``trace`` holds the best-so-far loss after every evaluation.
    """

    states: np.ndarray
    loss: float
    trace: list[float] = field(default_factory=list)
    evaluations: int = 0

    def schedule(self, default_config: RisConfig) -> FrameSchedule:
        return FrameSchedule.from_states(self.states, default_config)


class _Budget:
    def __init__(self, loss_fn, budget: int):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.loss_fn = loss_fn
        self.left = budget
        self.best_states = None
        self.best = math.inf
        self.trace: list[float] = []

    def __call__(self, states) -> float:
        if self.left <= 0:
            raise StopIteration
        self.left -= 1
        value = float(self.loss_fn(states))
        if value < self.best:
            self.best = value
            self.best_states = np.array(states, copy=True)
        self.trace.append(self.best)
        return value

    def result(self) -> SearchResult:
        return SearchResult(self.best_states, self.best, self.trace, len(self.trace))


def coordinate_descent(loss_fn: Callable[[np.ndarray], float], shape: tuple[int, int],
                       K: int, budget: int, rng: np.random.Generator,
                       init=None) -> SearchResult:
    """Greedy coordinate descent over an integer state array with random restarts.

    Coordinates are visited frame-major, group-minor; at each coordinate all K
    states are tried with the rest frozen and the best is kept. A sweep with no
    improvement triggers a restart from a fresh random point.
    """
    ev = _Budget(loss_fn, budget)
    try:
        current = (np.asarray(init, dtype=int).copy() if init is not None
                   else rng.integers(0, K, size=shape))
        while True:
            value = ev(current)
            if K == 1:
                break
            improved = True
            while improved:
                improved = False
                for f in range(shape[0]):
                    for g in range(shape[1]):
                        keep = current[f, g]
                        best_k, best_v = keep, value
                        for k in range(K):
                            if k == keep:
                                continue
                            current[f, g] = k
                            v = ev(current)
                            if v < best_v:
                                best_k, best_v = k, v
                        current[f, g] = best_k
                        if best_k != keep:
                            value = best_v
                            improved = True
            current = rng.integers(0, K, size=shape)
    except StopIteration:
        pass
    return ev.result()


def optimize_schedule_coherence(model: CascadeModel, F: int, budget: int,
                                rng: np.random.Generator,
                                default_config: RisConfig | None = None) -> tuple[FrameSchedule, SearchResult]:
    """Frame schedule minimising the averaged mutual coherence of Γ̃."""
    default_config = default_config or RisConfig.constant(model.n_groups, 0)
    d = np.asarray(default_config.states)

    def loss(states):
        return _coherence_or_one(model.matrix_from_states(states, d))

    res = coordinate_descent(loss, (F, model.n_groups), model.K, budget, rng)
    return res.schedule(default_config), res


def greedy_config_search(model: CascadeModel, F: int, loss_fn: Callable[[FrameSchedule], float],
                         budget: int, rng: np.random.Generator,
                         default_config: RisConfig | None = None,
                         init: FrameSchedule | None = None) -> tuple[FrameSchedule, SearchResult]:
    """Greedy traversal of the configuration MDP.

    The state walks frames in order and, within a frame, groups in order; the
    action at each state picks the phase state whose terminal schedule (rest
    frozen) has the lowest loss, i.e. the highest terminal reward.
    """
    default_config = default_config or RisConfig.constant(model.n_groups, 0)

    def loss(states):
        return loss_fn(FrameSchedule.from_states(states, default_config))

    res = coordinate_descent(loss, (F, model.n_groups), model.K, budget, rng,
                             init=None if init is None else init.states)
    return res.schedule(default_config), res


@dataclass(frozen=True)
class PostureLibrary:
    """Known postures: block reflectivities, priors and misrecognition costs."""

    labels: tuple[str, ...]
    nus: np.ndarray
    priors: np.ndarray
    costs: np.ndarray

    def __post_init__(self):
        nus = np.atleast_2d(np.asarray(self.nus, dtype=complex))
        priors = np.asarray(self.priors, dtype=float)
        costs = np.asarray(self.costs, dtype=float)
        n = len(self.labels)
        if n < 1 or nus.shape[0] != n or priors.shape != (n,) or costs.shape != (n, n):
            raise ValueError("inconsistent posture library shapes")
        if abs(priors.sum() - 1) > 1e-12 or np.any(priors < 0):
            raise ValueError("priors must be a probability vector")
        if np.any(costs < 0) or np.any(np.diag(costs) != 0):
            raise ValueError("costs must be nonnegative with zero diagonal")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "nus", nus)
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "costs", costs)

    @property
    def size(self) -> int:
        return len(self.labels)

    @classmethod
    def zero_one(cls, labels: Sequence[str], nus, priors=None) -> "PostureLibrary":
        n = len(labels)
        priors = np.full(n, 1.0 / n) if priors is None else priors
        return cls(tuple(labels), nus, priors, 1.0 - np.eye(n))


def _risks(Yhat: np.ndarray, G: np.ndarray, library: PostureLibrary, sigma2: float,
           x: complex) -> np.ndarray:
    """Posterior expected cost of every decision, shape (T, I); ŷ noise is CN(0, 2σ²)."""
    means = (library.nus @ G.T) * x                      # (I, F)
    resid = np.sum(np.abs(Yhat[:, None, :] - means[None, :, :]) ** 2, axis=2)  # (T, I)
    with np.errstate(divide="ignore"):
        logp = np.log(library.priors)[None, :]
    if sigma2 > 0:
        logw = logp - resid / (2 * sigma2)
    else:
        # noiseless limit: all mass on the minimum-residual postures
        tie = resid <= resid.min(axis=1, keepdims=True) * (1 + 1e-12) + 1e-300
        logw = np.where(tie, logp, -np.inf)
    logw = logw - logsumexp(logw, axis=1, keepdims=True)
    return np.exp(logw) @ library.costs


def map_decide(Yhat, G, library: PostureLibrary, sigma2: float, x: complex = 1.0) -> np.ndarray:
    """Cost-minimising posture index for each row of ``Yhat`` (ties → lowest index)."""
    Yhat = np.atleast_2d(np.asarray(Yhat, dtype=complex))
    return np.argmin(_risks(Yhat, np.asarray(G), library, sigma2, x), axis=1)


def map_classify(yhat, G, library: PostureLibrary, sigma2: float, x: complex = 1.0) -> str:
    return library.labels[int(map_decide(yhat, G, library, sigma2, x)[0])]


def map_rule(G, library: PostureLibrary, sigma2: float, x: complex = 1.0):
    return lambda Yhat: map_decide(Yhat, G, library, sigma2, x)


def constant_rule(index: int):
    return lambda Yhat: np.full(np.atleast_2d(Yhat).shape[0], index, dtype=int)


def random_rule(n: int, rng: np.random.Generator):
    return lambda Yhat: rng.integers(0, n, size=np.atleast_2d(Yhat).shape[0])


def avg_cost(rule, library: PostureLibrary, G, sigma2: float, trials: int,
             rng: np.random.Generator, x: complex = 1.0) -> tuple[float, float]:
    """Monte Carlo average false-recognition cost and its standard error."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    G = np.asarray(G, dtype=complex)
    truth = rng.choice(library.size, size=trials, p=library.priors)
    means = (library.nus @ G.T) * x
    Y = means[truth] + complex_noise(rng, (trials, G.shape[0]), 2 * sigma2)
    cost = library.costs[truth, rule(Y)]
    se = float(cost.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.inf
    return float(cost.mean()), se


def ridge_solve(yhat, G, x: complex = 1.0, eps: float | None = None) -> np.ndarray:
    """ν̂ = (Γ̃^H Γ̃ + εI)^{-1} Γ̃^H (ŷ/x), ε = 1e-6·tr(Γ̃^H Γ̃)/Q by default."""
    G = np.asarray(G, dtype=complex)
    gram = G.conj().T @ G
    Q = G.shape[1]
    if eps is None:
        eps = 1e-6 * float(np.real(np.trace(gram))) / Q
    rhs = G.conj().T @ (np.asarray(yhat, dtype=complex).T / x)
    return np.linalg.solve(gram + eps * np.eye(Q), rhs).T


def logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def reconstruct_occupancy(yhat, G, x: complex = 1.0, threshold: float = 0.5,
                          scale: float | None = None, eps: float | None = None) -> np.ndarray:
    """Per-block occupancy probabilities logistic((|ν̂_q| − t)/s); s defaults to t/8."""
    scale = threshold / 8 if scale is None else scale
    if threshold <= 0 or scale <= 0:
        raise ValueError("threshold and scale must be positive")
    nu_hat = ridge_solve(yhat, G, x, eps)
    return logistic((np.abs(nu_hat) - threshold) / scale)


def calibrate_threshold(nu_hats, truths) -> float:
    """Half the median |ν̂| over occupied blocks of noise-free calibration scenes."""
    nu_hats = np.abs(np.asarray(nu_hats))
    occupied = np.abs(np.asarray(truths)) > 0
    if not occupied.any():
        raise ValueError("calibration scenes contain no occupied block")
    return 0.5 * float(np.median(nu_hats[occupied]))


def cross_entropy(p_hat, nu_truth, delta: float = CLIP) -> float:
    """Binary cross-entropy between estimated occupancy and the truth support."""
    p_hat = np.clip(np.asarray(p_hat, dtype=float), delta, 1 - delta)
    p = (np.abs(np.asarray(nu_truth)) > 0).astype(float)
    return float(-np.sum(p * np.log(p_hat) + (1 - p) * np.log1p(-p_hat)))


def reconstruction_loss(model: CascadeModel, schedule: FrameSchedule, scenes, x: complex,
                        sigma2: float, seed: int, threshold: float = 0.5,
                        scale: float | None = None) -> float:
    """Mean cross-entropy over ``scenes`` (rows of ν) with common random noise."""
    scenes = np.atleast_2d(np.asarray(scenes, dtype=complex))
    G = model.matrix(schedule)
    rng = np.random.default_rng(seed)
    Y = (scenes @ G.T) * x
    if sigma2 > 0:
        Y = Y + complex_noise(rng, Y.shape, 2 * sigma2)
    P = reconstruct_occupancy(Y, G, x, threshold, scale)
    return float(np.mean([cross_entropy(p, nu) for p, nu in zip(P, scenes)]))
