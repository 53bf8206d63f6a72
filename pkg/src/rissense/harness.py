"""Scenario files, deterministic seeding, experiment dispatch and result output.

A scenario is a YAML mapping validated into :class:`ScenarioSpec`. Running it
yields long-format :class:`RunRecord` rows, one per (module, scheme, seed,
cycle, metric), which :func:`emit` writes as CSV or JSON.

Random streams are derived from the root seed by hierarchical splitting:
``SeedSequence(root, spawn_key=(module, seed, purpose))`` feeds a counter-based
Philox generator. Schemes compared on the same seed share the ``scene`` and
``noise`` streams, so paired comparisons see the same truth and noise draws.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Literal, Sequence

import numpy as np
import yaml
from pydantic import (BaseModel, ConfigDict, Field, NonNegativeFloat, NonNegativeInt,
                      PositiveFloat, PositiveInt, ValidationError, field_validator,
                      model_validator)

from . import metalocalization as loc
from . import metaradar as radar
from . import metasensing as sense
from . import metaslam as slam
from .channel import Antenna, RxArray, Scene, SpaceOfInterest, SubcarrierGrid
from .ris import BUILTIN_CODEBOOKS, RisConfig, RisPanel

C = 299792458.0
MODULES = ("sense", "radar", "localize", "slam")
SENSE_SCHEMES = ("optimized", "random")
SCHEMES = {
    "sense": SENSE_SCHEMES,
    "radar": radar.SCHEMES,
    "localize": loc.SCHEMES,
    "slam": slam.SCHEMES,
}
HEADER = ("scenario", "module", "scheme", "seed", "cycle", "metric", "value")

Vec2 = tuple[float, float]
Vec3 = tuple[float, float, float]


class ScenarioError(ValueError):
    """Unreadable or invalid scenario; the message names the offending key."""


class RunFailure(RuntimeError):
    """A module run raised; ``records`` holds everything produced before it."""

    def __init__(self, message: str, records: list["RunRecord"]):
        super().__init__(message)
        self.records = records


# ---- schema ----

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PanelSpec(_Section):
    """Planar panel; ``spacing`` is in wavelengths, groups are counts per axis."""
    center: Vec3 = (0.0, 0.0, 0.0)
    rows: PositiveInt = 8
    cols: PositiveInt = 8
    spacing: PositiveFloat = 0.5
    group_rows: PositiveInt = 1
    group_cols: PositiveInt = 1
    codebook: Literal[tuple(BUILTIN_CODEBOOKS)] = "table1"
    u_axis: Vec3 = (0.0, 1.0, 0.0)
    v_axis: Vec3 = (0.0, 0.0, 1.0)

    @model_validator(mode="after")
    def _tiling(self):
        if self.rows % self.group_rows:
            raise ValueError("group_rows must divide rows")
        if self.cols % self.group_cols:
            raise ValueError("group_cols must divide cols")
        u, v = np.asarray(self.u_axis), np.asarray(self.v_axis)
        if np.linalg.norm(np.cross(u, v)) < 1e-9:
            raise ValueError("u_axis and v_axis must be nonzero and not parallel")
        return self

    def build(self, lam: float) -> RisPanel:
        return RisPanel.planar(self.center, self.rows, self.cols, self.spacing * lam,
                               self.group_rows, self.group_cols,
                               BUILTIN_CODEBOOKS[self.codebook](), self.u_axis, self.v_axis)


class SoiSpec(_Section):
    lo: Vec3
    hi: Vec3
    divisions: tuple[PositiveInt, PositiveInt, PositiveInt] = (1, 1, 1)

    @model_validator(mode="after")
    def _box(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("hi must exceed lo on every axis")
        return self

    def build(self) -> SpaceOfInterest:
        return SpaceOfInterest(self.lo, self.hi, self.divisions)


def _check_schemes(module: str, schemes):
    if schemes is None:
        return schemes
    if len(schemes) == 0:
        raise ValueError("schemes must not be empty")
    bad = [s for s in schemes if s not in SCHEMES[module]]
    if bad:
        raise ValueError(f"unknown scheme(s) {bad}; choose from {list(SCHEMES[module])}")
    if len(set(schemes)) != len(schemes):
        raise ValueError("schemes must be unique")
    return schemes


class SenseParams(_Section):
    """``case`` picks posture recognition (coherence-designed schedules scored by
    MAP cost) or occupancy reconstruction (schedules searched on training scenes)."""
    case: Literal["posture", "occupancy"] = "posture"
    frequency: PositiveFloat = 3.198e9
    tx: Vec3 = (1.0, 0.6, 0.5)
    rx: Vec3 = (0.3, 0.0, -0.6)
    panel: PanelSpec = PanelSpec(group_rows=4, group_cols=4)
    soi: SoiSpec = SoiSpec(lo=(0.9, -0.4, -0.4), hi=(1.1, 0.4, 0.4), divisions=(1, 4, 4))
    frames: PositiveInt = 8
    sigma2: NonNegativeFloat = 0.0
    budget: PositiveInt = 1500
    postures: int = Field(4, ge=2)
    posture_blocks: PositiveInt = 3
    trials: PositiveInt = 2000
    train_scenes: PositiveInt = 20
    test_scenes: PositiveInt = 20
    occupied: PositiveInt = 2
    threshold: PositiveFloat = 0.5
    schemes: tuple[str, ...] | None = None

    _schemes = field_validator("schemes")(lambda v: _check_schemes("sense", v))

    @model_validator(mode="after")
    def _blocks(self):
        q = math.prod(self.soi.divisions)
        if self.posture_blocks > q:
            raise ValueError("posture_blocks exceeds the number of blocks")
        if self.occupied > q:
            raise ValueError("occupied exceeds the number of blocks")
        return self


class RadarParams(_Section):
    """Delays are ``delays`` on-grid values spaced 1/(N·Δf)."""
    frequency: PositiveFloat = 3.2e9
    subcarriers: PositiveInt = 4
    subcarrier_spacing: PositiveFloat = 10e6
    antennas: PositiveInt = 2
    block_angles: tuple[float, ...] = (-0.6, -0.2, 0.2, 0.6)
    delays: PositiveInt = 4
    panel: PanelSpec | None = PanelSpec(center=(0.0, 2.0, 0.0), group_rows=2, group_cols=2,
                                        u_axis=(1.0, -1.0, 0.0))
    ris_gain: float = 3.0
    sigma2: NonNegativeFloat = 1.0
    r_min: PositiveInt = 1
    r_max: PositiveInt = 2
    budget: PositiveInt = 100
    top: PositiveInt = 4
    prior_var: PositiveFloat = 1.0
    schemes: tuple[str, ...] | None = None

    _schemes = field_validator("schemes")(lambda v: _check_schemes("radar", v))

    @model_validator(mode="after")
    def _ranges(self):
        if not self.block_angles:
            raise ValueError("block_angles must not be empty")
        if self.r_min > self.r_max:
            raise ValueError("r_min must not exceed r_max")
        if self.r_max > len(self.block_angles):
            raise ValueError("r_max exceeds the number of blocks")
        return self


class LocalizeParams(_Section):
    frequency: PositiveFloat = 3.2e9
    tx: Vec3 = (0.5, 0.0, 1.0)
    panel: PanelSpec | None = PanelSpec(group_rows=4, group_cols=4)
    soi: SoiSpec = SoiSpec(lo=(1.0, -1.0, -0.1), hi=(3.0, 1.0, 0.1), divisions=(4, 2, 1))
    sigma_s: NonNegativeFloat = 0.5
    users: PositiveInt = 1
    budget: PositiveInt = 100
    default_state: NonNegativeInt = 0
    schemes: tuple[str, ...] | None = None

    _schemes = field_validator("schemes")(lambda v: _check_schemes("localize", v))


class ReflectorSpec(_Section):
    normal: Vec2
    offset: float = 0.0
    gain: float = 1.0


class ScattererSpec(_Section):
    position: Vec2
    reflectivity: float = 1.0


class SlamParams(_Section):
    """Planar room; the trajectory is a straight walk of ``cycles`` steps."""
    frequency: PositiveFloat = 3.2e9
    panel: PanelSpec | None = PanelSpec(center=(3.0, 4.2, 0.0), rows=1, cols=32, group_cols=8,
                                        u_axis=(1.0, 0.0, 0.0), v_axis=(0.0, 0.0, 1.0))
    reflectors: tuple[ReflectorSpec, ...] = (ReflectorSpec(normal=(0.0, 1.0)),)
    scatterers: tuple[ScattererSpec, ...] = (
        ScattererSpec(position=(1.5, 3.0), reflectivity=0.3),
        ScattererSpec(position=(4.5, 3.4), reflectivity=0.3),
    )
    tx_offset: Vec2 = (0.05, 0.0)
    start: Vec2 = (1.0, 1.0)
    step: Vec2 = (0.1, 0.0)
    delay_std: PositiveFloat = 1e-9
    aoa_std: PositiveFloat = 0.1
    noise_power: NonNegativeFloat = 5e-9
    snr_min: NonNegativeFloat = 1.0
    particles: PositiveInt = 500
    motion_std: NonNegativeFloat = 0.003
    budget: PositiveInt = 60
    angle_threshold: PositiveFloat = 0.05
    assoc_gate: PositiveFloat = 0.3
    confirm_gate: PositiveFloat = 0.05
    amp_rel_std: PositiveFloat = 0.1
    second_order: bool = True
    schemes: tuple[str, ...] | None = None

    _schemes = field_validator("schemes")(lambda v: _check_schemes("slam", v))

    @field_validator("reflectors")
    @classmethod
    def _normals(cls, v):
        for r in v:
            if math.hypot(*r.normal) == 0:
                raise ValueError("reflector normal must be nonzero")
        return v


class OutputSpec(_Section):
    dir: str = "results"
    format: Literal["csv", "json"] = "csv"


class SweepSpec(_Section):
    """One dotted parameter path and the values it takes."""
    key: str
    values: tuple[Any, ...]

    @field_validator("values")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("sweep needs at least one value")
        return v


class ScenarioSpec(_Section):
    name: str = "scenario"
    module: tuple[Literal["sense", "radar", "localize", "slam"], ...]
    seed: int = Field(0, ge=0, lt=2 ** 64)
    seeds: tuple[NonNegativeInt, ...] = (0,)
    cycles: PositiveInt = 10
    workers: PositiveInt = 1
    output: OutputSpec = OutputSpec()
    sense: SenseParams = SenseParams()
    radar: RadarParams = RadarParams()
    localize: LocalizeParams = LocalizeParams()
    slam: SlamParams = SlamParams()
    sweep: SweepSpec | None = None

    @field_validator("module", mode="before")
    @classmethod
    def _one_or_many(cls, v):
        return (v,) if isinstance(v, str) else v

    @field_validator("module")
    @classmethod
    def _unique_modules(cls, v):
        if not v:
            raise ValueError("at least one module is required")
        if len(set(v)) != len(v):
            raise ValueError("modules must be unique")
        return v

    @field_validator("seeds", mode="before")
    @classmethod
    def _count_or_list(cls, v):
        if isinstance(v, int) and not isinstance(v, bool):
            if v < 1:
                raise ValueError("seed count must be >= 1")
            return tuple(range(v))
        return v

    @field_validator("seeds")
    @classmethod
    def _unique_seeds(cls, v):
        if not v:
            raise ValueError("seed list must not be empty")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be unique")
        return v

    @model_validator(mode="after")
    def _sweep_points(self):
        if self.sweep is not None:
            for value in self.sweep.values:
                _override(self, self.sweep.key, value, sweep=None)
        return self

    @model_validator(mode="after")
    def _buildable(self):
        # geometry checks that need the built scene (e.g. an antenna inside the SOI)
        for m in self.module:
            try:
                _BUILDERS[m](getattr(self, m))
            except ValueError as e:
                raise ValueError(f"{m}: {e}") from None
        return self

    def schemes(self, module: str) -> tuple[str, ...]:
        return getattr(self, module).schemes or SCHEMES[module]


def _loc(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def validate_scenario(data) -> ScenarioSpec:
    """Validate a parsed mapping; errors name the dotted key path."""
    if not isinstance(data, dict):
        raise ScenarioError("<root>: scenario must be a mapping")
    try:
        return ScenarioSpec.model_validate(data)
    except ValidationError as e:
        lines = [f"{_loc(err)}: {err['msg']}" for err in e.errors()]
        raise ScenarioError("; ".join(lines)) from None


def _override(spec: ScenarioSpec, key: str, value, **extra) -> ScenarioSpec:
    data = spec.model_dump(mode="json")
    data.update(extra)
    node, parts = data, key.split(".")
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node or not isinstance(node[p], dict):
            raise ScenarioError(f"sweep.key: unknown parameter {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ScenarioError(f"sweep.key: unknown parameter {key!r}")
    node[parts[-1]] = value
    return validate_scenario(data)


def parse_scenario(text: str) -> ScenarioSpec:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ScenarioError(f"<root>: parse error: {e}") from None
    return validate_scenario(data)


def load_scenario(path) -> ScenarioSpec:
    """Read and fully validate a scenario file; defaults are filled in."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ScenarioError(f"<root>: cannot read {path}: {e.strerror}") from None
    return parse_scenario(text)


def dump_scenario(spec: ScenarioSpec) -> str:
    """YAML text that :func:`parse_scenario` turns back into an equal spec."""
    return yaml.safe_dump(spec.model_dump(mode="json"), sort_keys=False)


# ---- seeding ----

def _key(text: str) -> int:
    return zlib.crc32(text.encode())


def stream(root: int, module: str, seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one (module, seed, purpose) leaf."""
    ss = np.random.SeedSequence(root, spawn_key=(_key(module), seed, _key(purpose)))
    return np.random.Generator(np.random.Philox(ss))


# ---- records ----

@dataclass(frozen=True)
class RunRecord:
    scenario: str
    module: str
    scheme: str
    seed: int
    cycle: int
    metric: str
    value: float


# ---- module runners ----
# Each builder turns a parameter section into reusable scene objects; each
# runner returns (cycle, metric, value) rows for one (seed, scheme).

def _build_sense(p: SenseParams):
    lam = C / p.frequency
    scene = Scene(Antenna(p.tx), RxArray(p.rx), p.panel.build(lam), p.soi.build())
    return sense.CascadeModel(scene, lam)


def _run_sense(model, p: SenseParams, cycles, scheme, streams):
    F, G, K, Q = p.frames, model.n_groups, model.K, model.Q
    d0 = RisConfig.constant(G, 0)
    scene_rng, search, noise = streams("scene"), streams("search"), streams("noise")
    if p.case == "posture":
        nus = np.zeros((p.postures, Q), dtype=complex)
        for i in range(p.postures):
            idx = scene_rng.choice(Q, p.posture_blocks, replace=False)
            nus[i, idx] = np.exp(2j * np.pi * scene_rng.random(p.posture_blocks))
        lib = sense.PostureLibrary.zero_one([f"posture{i}" for i in range(p.postures)], nus)
        if scheme == "random":
            sched = sense.FrameSchedule.from_states(search.integers(0, K, (F, G)), d0)
        else:
            sched, _ = sense.optimize_schedule_coherence(model, F, p.budget, search, d0)
        Gm = model.matrix(sched)
        cost, se = sense.avg_cost(sense.map_rule(Gm, lib, p.sigma2), lib, Gm, p.sigma2,
                                  p.trials, noise)
        return [(0, "coherence", sense.mutual_coherence(Gm)), (0, "avg_cost", cost),
                (0, "avg_cost_se", se)]

    def scenes(n):
        S = np.zeros((n, Q), dtype=complex)
        for i in range(n):
            S[i, scene_rng.choice(Q, p.occupied, replace=False)] = 1.0
        return S

    train, test = scenes(p.train_scenes), scenes(p.test_scenes)
    train_seed, test_seed = (int(s) for s in noise.integers(0, 2 ** 63, size=2))
    sched = sense.FrameSchedule.from_states(search.integers(0, K, (F, G)), d0)
    if scheme == "optimized":
        def loss(s):
            return sense.reconstruction_loss(model, s, train, 1.0, p.sigma2, train_seed, p.threshold)
        sched, _ = sense.greedy_config_search(model, F, loss, p.budget, search, d0, init=sched)
    Gm = model.matrix(sched)
    ce = sense.reconstruction_loss(model, sched, test, 1.0, p.sigma2, test_seed, p.threshold)
    eye = np.eye(Q, dtype=complex)
    P = sense.reconstruct_occupancy(eye @ Gm.T, Gm, 1.0, p.threshold)
    single = float(np.mean([sense.cross_entropy(pq, nu) for pq, nu in zip(P, eye)]))
    return [(0, "coherence", sense.mutual_coherence(Gm)), (0, "cross_entropy", ce),
            (0, "single_block_ce", single)]


def _build_radar(p: RadarParams):
    grid = SubcarrierGrid(p.subcarriers, p.frequency, p.subcarrier_spacing)
    delays = np.arange(p.delays) / (p.subcarriers * p.subcarrier_spacing)
    lam = C / p.frequency
    panel = None if p.panel is None else p.panel.build(lam)
    scene = radar.RadarScene(p.antennas, np.array(p.block_angles), grid, delays, panel, p.ris_gain)
    return scene, radar.enumerate_hypotheses(p.r_min, p.r_max, len(p.block_angles))


def _run_radar(ctx, p: RadarParams, cycles, scheme, streams):
    scene, hyps = ctx
    truth = radar.draw_target(hyps, scene, streams("scene"), prior_var=p.prior_var)
    run = radar.detect(scene, truth, hyps, cycles, p.sigma2, streams("search"), scheme,
                       p.budget, p.prior_var, p.top, noise_rng=streams("noise"))
    j = hyps.index(truth.hypothesis)
    true_blocks = set(truth.hypothesis.blocks)
    rows = []
    for c, (post, chosen) in enumerate(zip(run.posteriors, run.chosen)):
        rows += [(c, "p_truth", float(post[j])),
                 (c, "detected", float(chosen == truth.hypothesis)),
                 (c, "missed", float(not true_blocks <= set(chosen.blocks)))]
    return rows


def _build_localize(p: LocalizeParams):
    lam = C / p.frequency
    panel = None if p.panel is None else p.panel.build(lam)
    # the receiver sits at each block centre; the scene's own Rx only lends its gain
    scene = Scene(Antenna(p.tx), RxArray(p.tx), panel, p.soi.build())
    model = loc.MapModel(scene, p.frequency, p.sigma_s)
    if model.n_groups and p.default_state >= model.K:
        raise ValueError("localize.default_state exceeds the codebook size")
    return model


def _run_localize(model, p: LocalizeParams, cycles, scheme, streams):
    users = streams("scene").integers(0, model.Q, size=p.users)
    default = RisConfig.constant(model.n_groups, p.default_state) if model.n_groups else None
    errors = loc.localize_run(model, users, cycles, scheme, streams("search"), streams("noise"),
                              p.budget, default)
    return [(c, "error", float(e)) for c, e in enumerate(errors)]


def _build_slam(p: SlamParams):
    lam = C / p.frequency
    panel = None if p.panel is None else p.panel.build(lam)
    world = slam.SlamWorld(
        tuple(slam.Reflector(r.normal, r.offset, r.gain) for r in p.reflectors),
        tuple(slam.Scatterer(s.position, s.reflectivity) for s in p.scatterers),
        panel, p.frequency, np.array(p.tx_offset))
    noise = slam.NoiseModel(p.delay_std, p.aoa_std, p.noise_power, p.snr_min)
    return world, noise


def _run_slam(ctx, p: SlamParams, cycles, scheme, streams):
    world, noise = ctx
    traj = slam.line_trajectory(p.start, p.step, cycles)
    run = slam.slam_run(world, traj, cycles, scheme, streams("search"), noise, streams("noise"),
                        particles=p.particles, motion_std=p.motion_std,
                        angle_threshold=p.angle_threshold, assoc_gate=p.assoc_gate,
                        confirm_gate=p.confirm_gate, budget=p.budget, amp_rel_std=p.amp_rel_std,
                        second_order=p.second_order)
    rows = []
    for c in range(cycles):
        rows += [(c, "error", float(run.errors[c])), (c, "rmse", float(run.rmse[c]))]
    return rows


_BUILDERS: dict[str, Callable] = {
    "sense": _build_sense, "radar": _build_radar, "localize": _build_localize, "slam": _build_slam,
}
_RUNNERS: dict[str, Callable] = {
    "sense": _run_sense, "radar": _run_radar, "localize": _run_localize, "slam": _run_slam,
}


# ---- orchestration ----

def _job(spec: ScenarioSpec, module: str, seed: int, scheme: str, ctx=None) -> list[RunRecord]:
    params = getattr(spec, module)
    if ctx is None:
        ctx = _BUILDERS[module](params)

    def streams(purpose):
        return stream(spec.seed, module, seed, purpose)

    rows = _RUNNERS[module](ctx, params, spec.cycles, scheme, streams)
    return [RunRecord(spec.name, module, scheme, seed, c, m, float(v)) for c, m, v in rows]


def _jobs(spec: ScenarioSpec):
    return [(m, s, sch) for m in spec.module for s in spec.seeds for sch in spec.schemes(m)]


def _ordered(spec: ScenarioSpec, records: list[RunRecord]) -> list[RunRecord]:
    # stable: scheme and metric order within (module, seed, cycle) follow job order
    mi = {m: i for i, m in enumerate(spec.module)}
    si = {s: i for i, s in enumerate(spec.seeds)}
    return sorted(records, key=lambda r: (mi[r.module], si[r.seed], r.cycle))


def run(spec: ScenarioSpec, workers: int | None = None) -> list[RunRecord]:
    """Every (module, seed, scheme) run of ``spec`` as ordered records.

    On failure a :class:`RunFailure` carries the records of all runs that
    completed before it.
    """
    workers = spec.workers if workers is None else workers
    jobs = _jobs(spec)
    done: list[list[RunRecord] | None] = [None] * len(jobs)
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_job, spec, *j) for j in jobs]
                for i, f in enumerate(futures):
                    done[i] = f.result()
        else:
            contexts: dict[str, Any] = {}
            for i, (m, s, sch) in enumerate(jobs):
                if m not in contexts:
                    contexts[m] = _BUILDERS[m](getattr(spec, m))
                done[i] = _job(spec, m, s, sch, contexts[m])
    except Exception as e:
        partial = [r for d in done if d is not None for r in d]
        raise RunFailure(f"{type(e).__name__}: {e}", _ordered(spec, partial)) from e
    return _ordered(spec, [r for d in done for r in d])


def sweep_points(spec: ScenarioSpec) -> list[ScenarioSpec]:
    """One spec per sweep value, named ``name[key=value]``; the spec itself if no sweep."""
    if spec.sweep is None:
        return [spec]
    k = spec.sweep.key
    return [_override(spec, k, v, sweep=None, name=f"{spec.name}[{k}={v}]")
            for v in spec.sweep.values]


def run_sweep(spec: ScenarioSpec, workers: int | None = None) -> list[RunRecord]:
    records: list[RunRecord] = []
    for point in sweep_points(spec):
        try:
            records += run(point, workers)
        except RunFailure as e:
            raise RunFailure(str(e), records + e.records) from e
    return records


# ---- output ----

def _fmt(v: float) -> str:
    return format(v, ".17g")


def to_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in records:
        w.writerow((r.scenario, r.module, r.scheme, r.seed, r.cycle, r.metric, _fmt(r.value)))
    return buf.getvalue()


def to_json(records: Sequence[RunRecord]) -> str:
    return json.dumps([asdict(r) for r in records], indent=1) + "\n"


def emit(records: Sequence[RunRecord], path, fmt: str | None = None) -> Path:
    """Write records as CSV or JSON (format from ``fmt`` or the file suffix)."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown output format {fmt!r}")
    text = to_csv(records) if fmt == "csv" else to_json(records)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)
    return path


def read_csv(path) -> list[RunRecord]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != HEADER:
        raise ValueError("not a run-record CSV")
    return [RunRecord(a, b, c, int(d), int(e), g, float(h)) for a, b, c, d, e, g, h in rows[1:]]


def read_json(path) -> list[RunRecord]:
    with open(path) as f:
        return [RunRecord(**d) for d in json.load(f)]


def output_path(spec: ScenarioSpec) -> Path:
    return Path(spec.output.dir) / f"{spec.name}.{spec.output.format}"


def records_array(records: Sequence[RunRecord], module: str, scheme: str, metric: str,
                  seeds: Sequence[int] | None = None) -> np.ndarray:
    """(seeds, cycles) array of one metric, seeds in record order."""
    sel = [r for r in records if r.module == module and r.scheme == scheme and r.metric == metric]
    order = list(dict.fromkeys(r.seed for r in sel)) if seeds is None else list(seeds)
    by_seed: dict[int, list[float]] = {s: [] for s in order}
    for r in sel:
        if r.seed in by_seed:
            by_seed[r.seed].append(r.value)
    return np.array([by_seed[s] for s in order], dtype=float)
