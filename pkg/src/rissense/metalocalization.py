"""RSS fingerprinting with a reconfigurable radio map.

Each cycle picks an RIS configuration, builds the radio map it induces over
the space-of-interest blocks, lets every user measure one RSS value, applies
the loss-minimising decision rule and refines the per-user block priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .channel import (
    Scene, SubcarrierGrid, los_gain, received_symbol, ris_path_gain,
)
from .metrics import rss_of
from .ris import RisConfig, neighbor_configs

SCHEMES = ("fixed", "random", "greedy", "sim_anneal")


@dataclass(frozen=True)
class RadioMap:
    rss: np.ndarray
    sigma_s: float
    config: RisConfig | None = None

    def __post_init__(self):
        rss = np.asarray(self.rss, dtype=float)
        if not np.all(np.isfinite(rss)):
            raise ValueError("radio map entries must be finite")
        if self.sigma_s < 0:
            raise ValueError("sigma_s must be >= 0")
        object.__setattr__(self, "rss", rss)

    @property
    def Q(self) -> int:
        return self.rss.size


def mislocalization_weights(centers) -> np.ndarray:
    """γ_{q,q'}: Euclidean distance between block centres."""
    c = np.asarray(centers, dtype=float)
    return np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)


def build_radio_map(scene: Scene, config: RisConfig | None, sigma_s: float,
                    frequency: float) -> RadioMap:
    """Noise-free RSS of a single-tone probe at every block centre."""
    grid = SubcarrierGrid.single(frequency)
    rss = [rss_of(received_symbol(scene, config, [1.0], 0.0, None, grid, rx_position=c))
           for c in scene.soi.centers]
    return RadioMap(np.array(rss), sigma_s, config)


class MapModel:
    """Radio maps for many configurations from precomputed group gains.

    h_q(c) = h_los,q + Σ_g γ(c_g)·B[g, q] with B the group-summed Tx-RIS-block
    path gains at unit element response.
    """

    def __init__(self, scene: Scene, frequency: float, sigma_s: float):
        if scene.soi is None:
            raise ValueError("localization needs a space of interest")
        lam = 299792458.0 / frequency
        self.scene = scene
        self.sigma_s = sigma_s
        centers = scene.soi.centers
        self.centers = centers
        self.los = los_gain(np.linalg.norm(centers - scene.tx.position, axis=1),
                            scene.tx.gain, scene.rx.gain, lam)
        panel = scene.panel
        if panel is None:
            self.B = np.zeros((0, centers.shape[0]), dtype=complex)
            self.table = np.zeros(1, dtype=complex)
            return
        d_t = np.linalg.norm(panel.element_positions - scene.tx.position, axis=1)
        d_r = np.linalg.norm(panel.element_positions[:, None, :] - centers[None, :, :], axis=2)
        per_elem = ris_path_gain(d_t[:, None], d_r, 1.0, scene.tx.gain, scene.rx.gain, lam)
        B = np.zeros((panel.n_groups, centers.shape[0]), dtype=complex)
        np.add.at(B, panel.group_index, per_elem)
        self.B = B
        self.table = np.array([panel.group_responses(RisConfig.constant(panel.n_groups, k))[0]
                               for k in range(panel.K)])

    @property
    def Q(self) -> int:
        return self.los.size

    @property
    def n_groups(self) -> int:
        return self.B.shape[0]

    @property
    def K(self) -> int:
        return self.table.size

    def rss(self, states) -> np.ndarray:
        if self.n_groups == 0:
            h = self.los
        else:
            h = self.los + self.table[np.asarray(states, dtype=int)] @ self.B
        return 10.0 * np.log10(np.abs(h) ** 2)

    def radio_map(self, config: RisConfig | None) -> RadioMap:
        states = () if config is None else config.states
        return RadioMap(self.rss(states), self.sigma_s, config)


def _log_gauss(s, means, sigma):
    z = (np.asarray(s, dtype=float)[..., None] - means) / sigma
    return -0.5 * z * z - math.log(sigma * math.sqrt(2 * math.pi))


def _risks(s, rss, prior, weights, sigma) -> np.ndarray:
    """Σ_q p_q γ_{q,q'} p(s | q) for every candidate q', scaled per sample."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    with np.errstate(divide="ignore"):
        logp = np.log(prior)
    if sigma > 0:
        logw = logp + _log_gauss(s, rss, sigma)
    else:
        d = np.abs(s[:, None] - rss[None, :])
        near = d <= d.min(axis=1, keepdims=True) * (1 + 1e-12)
        logw = np.where(near, logp, -np.inf)
    top = np.max(logw, axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.exp(logw - top) @ weights


def optimal_rule(radio_map: RadioMap, prior, weights) -> Callable[[np.ndarray], np.ndarray]:
    """Decision rule minimising the expected mislocalization distance.

    Maps measured RSS values to block indices; ties go to the lowest index.
    """
    prior = np.asarray(prior, dtype=float)
    weights = np.asarray(weights, dtype=float)

    def rule(s):
        return np.argmin(_risks(s, radio_map.rss, prior, weights, radio_map.sigma_s), axis=1)

    return rule


def nearest_rule(radio_map: RadioMap) -> Callable[[np.ndarray], np.ndarray]:
    def rule(s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return np.argmin(np.abs(s[:, None] - radio_map.rss[None, :]), axis=1)
    return rule


def constant_rule(q: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda s: np.full(np.atleast_1d(s).shape[0], q, dtype=int)


def localization_loss(radio_map: RadioMap, rules, priors, weights, samples: int,
                      rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo estimate of the summed expected localization error (m).

    ``rules`` is one rule shared by all users or one rule per user. Returns
    the estimate and its standard error.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    priors = np.atleast_2d(np.asarray(priors, dtype=float))
    weights = np.asarray(weights, dtype=float)
    if callable(rules):
        rules = [rules] * priors.shape[0]
    total, var = 0.0, 0.0
    for p, rule in zip(priors, rules):
        q = rng.choice(radio_map.Q, size=samples, p=p)
        s = radio_map.rss[q] + radio_map.sigma_s * rng.standard_normal(samples)
        err = weights[q, rule(s)]
        total += float(err.mean())
        var += float(err.var(ddof=1)) / samples if samples > 1 else math.inf
    return total, math.sqrt(var)


def expected_loss(radio_map: RadioMap, priors, weights, points_per_sigma: int = 8) -> float:
    """Summed expected error of the optimal rule, by quadrature over RSS.

    With the optimal rule the integrand is min_{q'} Σ_q p_q γ_{q,q'} p(s|q),
    so the loss is a deterministic function of the map and the priors.
    """
    priors = np.atleast_2d(np.asarray(priors, dtype=float))
    weights = np.asarray(weights, dtype=float)
    sigma = radio_map.sigma_s
    total = 0.0
    for p in priors:
        live = p > 1e-15
        m = radio_map.rss[live]
        pl = p[live]
        W = weights[live]
        if sigma == 0:
            for v in np.unique(m):
                at = m == v
                total += float(np.min(pl[at] @ W[at]))
            continue
        lo, hi = m.min() - 8 * sigma, m.max() + 8 * sigma
        n = int(math.ceil((hi - lo) / sigma * points_per_sigma)) + 1
        s = np.linspace(lo, hi, n)
        dens = pl * np.exp(_log_gauss(s, m, sigma))      # (n, live)
        integrand = np.min(dens @ W, axis=1)
        total += float(np.trapezoid(integrand, s))
    return total


@dataclass
class ConfigSearch:
    config: RisConfig
    loss: float
    trace: list[float] = field(default_factory=list)
    evaluations: int = 0


class _Evaluator:
    def __init__(self, model: MapModel, priors, weights, budget: int, cache: bool = True):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.model, self.priors, self.weights = model, priors, weights
        self.left = budget
        self.best: RisConfig | None = None
        self.best_loss = math.inf
        self.trace: list[float] = []
        self.use_cache = cache
        self.cache: dict[RisConfig, float] = {}

    def __call__(self, config: RisConfig) -> float:
        if self.use_cache and config in self.cache:
            return self.cache[config]
        if self.left <= 0:
            raise StopIteration
        self.left -= 1
        v = self.cache.get(config)
        if v is None:
            v = expected_loss(self.model.radio_map(config), self.priors, self.weights)
            self.cache[config] = v
        if v < self.best_loss:
            self.best, self.best_loss = config, v
        self.trace.append(self.best_loss)
        return v

    def result(self) -> ConfigSearch:
        return ConfigSearch(self.best, self.best_loss, self.trace, len(self.trace))


def greedy_search(model: MapModel, priors, weights, budget: int, rng: np.random.Generator,
                  n_init: int = 4, init: Sequence[RisConfig] = ()) -> ConfigSearch:
    """Best of random initial configs, then steepest neighbor descent.

    On reaching a local minimum the descent restarts from the next-best
    unexplored initial point, and from fresh random configs after that.
    """
    ev = _Evaluator(model, priors, weights, budget)
    G, K = model.n_groups, model.K
    try:
        starts = list(init) + [RisConfig.random(G, K, rng) for _ in range(n_init)]
        starts.sort(key=ev)
        stalls = 0
        while stalls < 20:
            left = ev.left
            current = starts.pop(0) if starts else RisConfig.random(G, K, rng)
            value = ev(current)
            while True:
                best_nb, best_v = None, value
                for nb in neighbor_configs(current, K):
                    v = ev(nb)
                    if v < best_v:
                        best_nb, best_v = nb, v
                if best_nb is None:
                    break
                current, value = best_nb, best_v
            # tiny search spaces: restarts that evaluate nothing new end the search
            stalls = stalls + 1 if ev.left == left else 0
    except StopIteration:
        pass
    return ev.result()


def anneal_search(model: MapModel, priors, weights, budget: int, rng: np.random.Generator,
                  t0: float | None = None, t_final_ratio: float = 1e-3,
                  init: RisConfig | None = None) -> ConfigSearch:
    """Simulated annealing over single-group moves with geometric cooling.

    ``t0`` defaults to 10% of the initial loss; ``t0=0`` accepts only strict
    improvements (random-neighbor descent).
    """
    # every proposal is charged, so revisits cannot stall the schedule
    ev = _Evaluator(model, priors, weights, budget, cache=False)
    G, K = model.n_groups, model.K
    try:
        current = init if init is not None else RisConfig.random(G, K, rng)
        value = ev(current)
        T = 0.1 * value if t0 is None else t0
        steps = max(budget - 1, 1)
        alpha = t_final_ratio ** (1.0 / steps)
        if K == 1:
            raise StopIteration
        while True:
            g = int(rng.integers(G))
            k = int(rng.integers(K - 1))
            k = k + 1 if k >= current[g] else k
            cand = current.with_state(g, k)
            v = ev(cand)
            if v < value or (T > 0 and rng.random() < math.exp(-(v - value) / T)):
                current, value = cand, v
            T *= alpha
    except StopIteration:
        pass
    return ev.result()


def select_config(model: MapModel, priors, weights, scheme: str, budget: int,
                  rng: np.random.Generator, default: RisConfig | None = None,
                  previous: RisConfig | None = None) -> RisConfig:
    """Configuration for the next cycle under one of the comparison schemes."""
    G, K = model.n_groups, model.K
    if scheme == "fixed":
        return default if default is not None else RisConfig.constant(G, 0)
    if scheme == "random":
        return RisConfig.random(G, K, rng)
    if scheme == "greedy":
        init = () if previous is None else (previous,)
        return greedy_search(model, priors, weights, budget, rng, init=init).config
    if scheme == "sim_anneal":
        return anneal_search(model, priors, weights, budget, rng, init=previous).config
    raise ValueError(f"unknown scheme {scheme!r}")


def cycle_update(priors, measurements, radio_map: RadioMap) -> np.ndarray:
    """Per-user Bayes filter for static users, computed in log space."""
    priors = np.atleast_2d(np.asarray(priors, dtype=float))
    s = np.asarray(measurements, dtype=float).reshape(-1)
    sigma = radio_map.sigma_s
    with np.errstate(divide="ignore"):
        logp = np.log(priors)
    if sigma > 0:
        logp = logp + _log_gauss(s, radio_map.rss, sigma)
    else:
        hit = np.isclose(s[:, None], radio_map.rss[None, :], rtol=0, atol=1e-12)
        logp = np.where(hit, logp, -np.inf)
    norm = logsumexp(logp, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise FloatingPointError("measurement has zero likelihood under the prior")
    post = np.exp(logp - norm)
    return post / post.sum(axis=1, keepdims=True)


def localize_run(model: MapModel, users: Sequence[int], cycles: int, scheme: str,
                 rng: np.random.Generator, noise_rng: np.random.Generator | None = None,
                 budget: int = 150, default: RisConfig | None = None) -> np.ndarray:
    """Mean localization error (m) of every cycle.

    ``rng`` drives configuration choices; ``noise_rng`` the RSS noise so that
    schemes can share it across a paired comparison.
    """
    users = np.asarray(users, dtype=int)
    noise_rng = rng if noise_rng is None else noise_rng
    weights = mislocalization_weights(model.centers)
    priors = np.full((users.size, model.Q), 1.0 / model.Q)
    z = noise_rng.standard_normal((cycles, users.size))
    errors = np.empty(cycles)
    config = None
    for c in range(cycles):
        config = select_config(model, priors, weights, scheme, budget, rng, default, config)
        rmap = model.radio_map(config)
        s = rmap.rss[users] + rmap.sigma_s * z[c]
        est = np.array([optimal_rule(rmap, p, weights)(si)[0] for p, si in zip(priors, s)])
        errors[c] = float(np.mean(weights[users, est]))
        priors = cycle_update(priors, s, rmap)
    return errors
