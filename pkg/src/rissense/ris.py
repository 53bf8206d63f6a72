"""RIS element responses, phase codebooks, panels and configurations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

RIS_TYPES = ("reflective", "refractive", "hybrid")
BRANCHES = ("reflect", "refract")


@dataclass(frozen=True)
class PhaseState:
    """One selectable element state: phase shift (rad) and amplitude."""

    phase: float
    amplitude: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError(f"amplitude must lie in [0, 1], got {self.amplitude}")
        phase = float(self.phase) % TWO_PI
        object.__setattr__(self, "phase", phase)

    @property
    def response(self) -> complex:
        return self.amplitude * complex(math.cos(self.phase), -math.sin(self.phase))


@dataclass(frozen=True)
class PhaseCodebook:
    states: tuple[PhaseState, ...]

    def __post_init__(self):
        states = tuple(self.states)
        object.__setattr__(self, "states", states)
        if len(states) < 1:
            raise ValueError("codebook needs at least one state")
        phases = [s.phase for s in states]
        if len(set(phases)) != len(phases):
            raise ValueError("codebook phases must be distinct")

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, k: int) -> PhaseState:
        return self.states[k]

    @property
    def K(self) -> int:
        return len(self.states)

    @property
    def responses(self) -> np.ndarray:
        """Complex responses Γ·e^{-jθ} of every state, shape (K,)."""
        return np.array([s.response for s in self.states], dtype=complex)

    @classmethod
    def uniform(cls, K: int, amplitude: float = 1.0) -> "PhaseCodebook":
        """K equally spaced phases 0, 2π/K, ..., 2(K-1)π/K."""
        if K < 1:
            raise ValueError("K must be positive")
        return cls(tuple(PhaseState(TWO_PI * k / K, amplitude) for k in range(K)))


def table1_codebook() -> PhaseCodebook:
    """Measured 4-state response of the 3.198 GHz PIN-diode prototype element.

    States 2 and 3 share a PIN pattern in the source table; they are kept as
    distinct logical states keyed by index.
    """
    q = math.pi / 4
    return PhaseCodebook((
        PhaseState(q, 0.97),
        PhaseState(3 * q, 0.97),
        PhaseState(5 * q, 0.92),
        PhaseState(7 * q, 0.88),
    ))


BUILTIN_CODEBOOKS = {
    "table1": table1_codebook,
    "uniform2": lambda: PhaseCodebook.uniform(2),
    "uniform4": lambda: PhaseCodebook.uniform(4),
    "uniform8": lambda: PhaseCodebook.uniform(8),
}


def hybrid_split(beta: float) -> tuple[float, float]:
    """Amplitude factors (reflect, refract) = (sqrt(β/(1+β)), sqrt(1/(1+β))).

    β = inf is the pure-reflective limit and is handled without dividing inf.
    """
    if math.isnan(beta) or beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if math.isinf(beta):
        return 1.0, 0.0
    return math.sqrt(beta / (1.0 + beta)), math.sqrt(1.0 / (1.0 + beta))


def element_response(state: PhaseState, ris_type: str = "reflective",
                     beta: float = math.inf, branch: str = "reflect") -> complex:
    """Complex response of a single element for the requested branch."""
    if ris_type not in RIS_TYPES:
        raise ValueError(f"unknown RIS type {ris_type!r}")
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}")
    if ris_type == "reflective":
        if branch != "reflect":
            raise ValueError("reflective RIS has no refract branch")
        return state.response
    if ris_type == "refractive":
        if branch != "refract":
            raise ValueError("refractive RIS has no reflect branch")
        return state.response
    refl, refr = hybrid_split(beta)
    return (refl if branch == "reflect" else refr) * state.response


@dataclass(frozen=True)
class RisConfig:
    """Per-group codebook indices."""

    states: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    def __getitem__(self, g: int) -> int:
        return self.states[g]

    def with_state(self, group: int, state: int) -> "RisConfig":
        s = list(self.states)
        s[group] = state
        return RisConfig(tuple(s))

    def validate(self, n_groups: int, K: int) -> None:
        if len(self.states) != n_groups:
            raise ValueError(f"config has {len(self.states)} entries, panel has {n_groups} groups")
        if any(s < 0 or s >= K for s in self.states):
            raise ValueError(f"config indices must lie in [0, {K}), got {self.states}")

    @classmethod
    def constant(cls, n_groups: int, state: int = 0) -> "RisConfig":
        return cls((state,) * n_groups)

    @classmethod
    def random(cls, n_groups: int, K: int, rng: np.random.Generator) -> "RisConfig":
        return cls(tuple(int(k) for k in rng.integers(0, K, size=n_groups)))


def neighbor_configs(config: RisConfig, codebook: PhaseCodebook | int) -> Iterator[RisConfig]:
    """Every config differing from ``config`` in exactly one group's state."""
    K = codebook if isinstance(codebook, int) else codebook.K
    for g, current in enumerate(config.states):
        for k in range(K):
            if k != current:
                yield config.with_state(g, k)


@dataclass(frozen=True)
class RisPanel:
    """Planar element grid partitioned into control groups.

    Parameters
    ----------
    element_positions : (M, 3) array
        Element centres in metres.
    groups : tuple of tuples
        Partition of ``range(M)``; all elements of a group share one state.
    codebook : PhaseCodebook
        Selectable states (reflect branch for hybrid panels).
    center, normal : (3,) arrays
        Panel plane, stored explicitly.
    """

    element_positions: np.ndarray
    groups: tuple[tuple[int, ...], ...]
    codebook: PhaseCodebook
    center: np.ndarray
    normal: np.ndarray
    ris_type: str = "reflective"
    beta: float = math.inf
    refract_codebook: PhaseCodebook | None = None
    _group_index: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pos = np.asarray(self.element_positions, dtype=float).reshape(-1, 3)
        pos.setflags(write=False)
        object.__setattr__(self, "element_positions", pos)
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        M = pos.shape[0]
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(M)):
            raise ValueError("groups must partition the element indices exactly")
        if any(len(g) == 0 for g in groups):
            raise ValueError("empty group")
        if self.ris_type not in RIS_TYPES:
            raise ValueError(f"unknown RIS type {self.ris_type!r}")
        if math.isnan(self.beta) or self.beta < 0:
            raise ValueError("beta must be >= 0")
        center = np.asarray(self.center, dtype=float)
        normal = np.asarray(self.normal, dtype=float)
        normal = normal / np.linalg.norm(normal)
        if M > 0 and np.max(np.abs((pos - center) @ normal)) > 1e-9:
            raise ValueError("element positions are not coplanar with the panel plane")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "normal", normal)
        gi = np.empty(M, dtype=int)
        for g, members in enumerate(groups):
            gi[list(members)] = g
        gi.setflags(write=False)
        object.__setattr__(self, "_group_index", gi)

    @property
    def M(self) -> int:
        return self.element_positions.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def K(self) -> int:
        return self.codebook.K

    @property
    def group_index(self) -> np.ndarray:
        """Group id of every element, shape (M,)."""
        return self._group_index

    def default_config(self, state: int = 0) -> RisConfig:
        return RisConfig.constant(self.n_groups, state)

    def random_config(self, rng: np.random.Generator) -> RisConfig:
        return RisConfig.random(self.n_groups, self.K, rng)

    def group_responses(self, config: RisConfig, branch: str | None = None) -> np.ndarray:
        """Complex response of each group under ``config``, shape (n_groups,)."""
        config.validate(self.n_groups, self.K)
        branch = branch or ("refract" if self.ris_type == "refractive" else "reflect")
        book = self.codebook
        if branch == "refract" and self.ris_type == "hybrid" and self.refract_codebook is not None:
            book = self.refract_codebook
        table = np.array([element_response(s, self.ris_type, self.beta, branch)
                          for s in book.states])
        return table[np.asarray(config.states)]

    @classmethod
    def planar(cls, center: Sequence[float], rows: int, cols: int, spacing: float,
               group_rows: int = 1, group_cols: int = 1,
               codebook: PhaseCodebook | None = None,
               u_axis: Sequence[float] = (0.0, 1.0, 0.0),
               v_axis: Sequence[float] = (0.0, 0.0, 1.0),
               ris_type: str = "reflective", beta: float = math.inf) -> "RisPanel":
        """Rectangular ``rows x cols`` grid spanned by ``u_axis`` (columns) and
        ``v_axis`` (rows), grouped into ``group_rows x group_cols`` square tiles."""
        if rows % group_rows or cols % group_cols:
            raise ValueError("group tiling must divide the element grid")
        center = np.asarray(center, dtype=float)
        u = np.asarray(u_axis, dtype=float)
        v = np.asarray(v_axis, dtype=float)
        u = u / np.linalg.norm(u)
        v = v / np.linalg.norm(v)
        cu = (np.arange(cols) - (cols - 1) / 2) * spacing
        rv = (np.arange(rows) - (rows - 1) / 2) * spacing
        pos = np.array([center + r * v + c * u for r in rv for c in cu])
        tr, tc = rows // group_rows, cols // group_cols
        groups: list[list[int]] = [[] for _ in range(group_rows * group_cols)]
        for i in range(rows):
            for j in range(cols):
                groups[(i // tr) * group_cols + j // tc].append(i * cols + j)
        return cls(pos, tuple(tuple(g) for g in groups), codebook or table1_codebook(),
                   center, np.cross(u, v), ris_type, beta)


def expand_config(panel: RisPanel, config: RisConfig, branch: str | None = None) -> np.ndarray:
    """Per-element complex responses, shape (M,)."""
    return panel.group_responses(config, branch)[panel.group_index]
