"""Sweeps over r_min, array-size scaling studies and 1D chain comparisons."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from constraints import DEFAULT_CONFINEMENT_RADIUS, FREE2D, RESTRICTED1D, Constraints
from optimizer import SEED_MODULUS, DeRun, DeSettings, Problem, run_de
from physics import EmitterConfiguration, Polarization, build_hamiltonian, collective_modes, mode_character
from structures import BaselineResult, baseline_sweep, chain_gaps, modulated_gaps, ModulatedChainParams
from worker import TaskPool

logger = logging.getLogger(__name__)

GEOMETRY_CLASSES = ("linear_regular", "linear_stretched", "triangular", "square", "other")
SWEEP_BASELINES = ("chain", "triangle", "rectangle")
SCALING_FAMILIES = ("periodic", "modulated", "restricted1d")

DEFAULT_RMIN_GRID = tuple(round(0.1 + 0.05 * k, 10) for k in range(23))

GAP_CV_REGULAR = 1e-2
BOND_SHELL = 1.2
STRAIGHT_WINDOW_DEG = 15.0
MOTIF_TOLERANCE_DEG = 8.0
BASELINE_SLACK = 1e-6
MIN_FIT_POINTS = 4
PARAM_PREFIX = "params_"


@dataclass
class ExperimentRecord:
    """One result row; field order is the on-disk key order.

    params are written flat, one params_<key> entry per parameter.
    """

    n: int
    r_min: float
    polarization: str
    mode: str
    best_gamma: Optional[float]
    geometry_class: Optional[str]
    mode_character: Optional[str] = None
    phase_spread: Optional[float] = None
    confinement_radius: float = DEFAULT_CONFINEMENT_RADIUS
    params: Dict[str, Any] = field(default_factory=dict)
    configuration: Optional[list[list[float]]] = None
    seeds_used: list[int] = field(default_factory=list)
    runtime_s: float = 0.0
    flags: list[str] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.best_gamma is not None

    def config(self) -> EmitterConfiguration:
        if self.configuration is None:
            raise ValueError(f"Record {self.mode} n={self.n} r_min={self.r_min} has no configuration")
        return EmitterConfiguration.from_list(self.configuration)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "r_min": self.r_min,
            "polarization": self.polarization,
            "mode": self.mode,
            "best_gamma": self.best_gamma,
            "geometry_class": self.geometry_class,
            "mode_character": self.mode_character,
            "phase_spread": self.phase_spread,
            "confinement_radius": self.confinement_radius,
            **{PARAM_PREFIX + key: value for key, value in self.params.items()},
            "configuration": self.configuration,
            "seeds_used": list(self.seeds_used),
            "runtime_s": self.runtime_s,
            "flags": list(self.flags),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentRecord":
        names = cls.__dataclass_fields__.keys()
        fields_ = {k: v for k, v in data.items() if k in names and k != "params"}
        fields_["params"] = {k[len(PARAM_PREFIX):]: v for k, v in data.items() if k.startswith(PARAM_PREFIX)}
        return cls(**fields_)


@dataclass(frozen=True)
class ScalingFit:
    model: str
    amplitude: float
    exponent: float
    r_squared: float

    def predict(self, n: float | np.ndarray) -> float | np.ndarray:
        n = np.asarray(n, dtype=float)
        if self.model == "power_law":
            return self.amplitude * n**self.exponent
        return self.amplitude * np.exp(self.exponent * n)

    def to_dict(self) -> Dict[str, Any]:
        return {"model": self.model, "amplitude": self.amplitude, "exponent": self.exponent, "r_squared": self.r_squared}


# ---------------------------------------------------------------- classification


def _line_frame(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centred = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=True)
    return centred @ vt[0], centred @ vt[1]


def _bond_angles(cfg: EmitterConfiguration) -> np.ndarray:
    pts = cfg.positions
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    shell = dist.min() * BOND_SHELL
    angles: list[float] = []
    for i in range(cfg.n):
        nbrs = np.flatnonzero(dist[i] <= shell)
        for a in range(len(nbrs)):
            for b in range(a + 1, len(nbrs)):
                u, v = pts[nbrs[a]] - pts[i], pts[nbrs[b]] - pts[i]
                cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
                angles.append(math.degrees(math.acos(float(np.clip(cos, -1.0, 1.0)))))
    return np.array(angles)


def _motif_deviation(angles: np.ndarray, motif: Sequence[float]) -> float:
    """Mean distance in degrees from each bond angle to the closest motif angle."""
    if angles.size == 0:
        return math.inf
    return float(np.min(np.abs(angles[:, None] - np.asarray(motif)[None, :]), axis=1).mean())


def classify_geometry(cfg: EmitterConfiguration, tol: float = 0.05) -> str:
    """Linear (regular or stretched), triangular, square or other.

    Straight angles are dropped from the bond-angle histogram since both
    lattices produce them. The lattice whose motif angles sit closer on
    average wins, provided that mean deviation stays within
    MOTIF_TOLERANCE_DEG.
    """
    if cfg.n < 3:
        return "linear_regular"
    along, across = _line_frame(cfg.positions)
    if float(np.abs(across).max()) < tol:
        gaps = np.diff(np.sort(along))
        cv = float(np.std(gaps) / np.mean(gaps)) if np.mean(gaps) > 0 else math.inf
        return "linear_regular" if cv < GAP_CV_REGULAR else "linear_stretched"
    angles = _bond_angles(cfg)
    angles = angles[np.abs(angles - 180.0) > STRAIGHT_WINDOW_DEG]
    if angles.size == 0:
        return "other"
    tri = _motif_deviation(angles, (60.0, 120.0))
    sq = _motif_deviation(angles, (90.0,))
    if min(tri, sq) > MOTIF_TOLERANCE_DEG:
        return "other"
    return "triangular" if tri <= sq else "square"


def _most_subradiant(cfg: EmitterConfiguration, pol: Polarization) -> tuple[str, float, np.ndarray]:
    modes = collective_modes(build_hamiltonian(cfg, pol))
    character, spread = mode_character(modes, cfg, 0)
    return character, spread, np.abs(np.asarray(modes[0].wavefunction)) ** 2


def _describe(record: ExperimentRecord, cfg: EmitterConfiguration, pol: Polarization) -> ExperimentRecord:
    record.configuration = cfg.to_list()
    record.geometry_class = classify_geometry(cfg)
    record.mode_character, record.phase_spread, _ = _most_subradiant(cfg, pol)
    return record


# ---------------------------------------------------------------- r_min sweeps


@dataclass(frozen=True)
class _DeTask:
    n: int
    r_min: float
    polarization: Polarization
    layout: str
    confinement_radius: Optional[float]
    settings: DeSettings
    initial: Optional[tuple[tuple[float, ...], ...]] = None


@dataclass(frozen=True)
class _BaselineTask:
    family: str
    n: int
    r_min: float
    polarization: Polarization
    layout: str
    confinement_radius: Optional[float]


def _run_de_task(task: _DeTask) -> ExperimentRecord:
    t0 = time.perf_counter()
    c = Constraints.for_layout(task.layout, task.n, task.r_min, task.confinement_radius)
    record = ExperimentRecord(
        n=task.n,
        r_min=task.r_min,
        polarization=task.polarization.value,
        mode=task.layout,
        best_gamma=None,
        geometry_class=None,
        confinement_radius=c.confinement_radius,
        seeds_used=[(task.settings.seed + r) % SEED_MODULUS for r in range(task.settings.restarts)],
    )
    try:
        problem = Problem(task.n, c, task.polarization, task.layout)
        run: DeRun = run_de(problem, task.settings, initial=task.initial, jobs=1)
        record.best_gamma = run.best_gamma
        record.params = {"seed_used": run.seed_used, "generations": run.generations_used}
        _describe(record, run.best_configuration, task.polarization)
    except Exception as exc:
        logger.exception("DE point n=%d r_min=%.3f failed", task.n, task.r_min)
        record.error = f"{type(exc).__name__}: {exc}"
    record.runtime_s = time.perf_counter() - t0
    return record


def _run_baseline_task(task: _BaselineTask) -> ExperimentRecord:
    t0 = time.perf_counter()
    c = Constraints.for_layout(task.layout, task.n, task.r_min, task.confinement_radius)
    record = ExperimentRecord(
        n=task.n,
        r_min=task.r_min,
        polarization=task.polarization.value,
        mode=f"baseline:{task.family}",
        best_gamma=None,
        geometry_class=None,
        confinement_radius=c.confinement_radius,
    )
    try:
        result: BaselineResult = baseline_sweep(task.family, task.n, c, task.polarization, task.layout)
        record.best_gamma = result.best_gamma
        record.params = dict(result.params)
        _describe(record, result.configuration, task.polarization)
    except Exception as exc:
        logger.warning("Baseline %s n=%d r_min=%.3f failed: %s", task.family, task.n, task.r_min, exc)
        record.error = f"{type(exc).__name__}: {exc}"
    record.runtime_s = time.perf_counter() - t0
    return record


def _run_task(task: _DeTask | _BaselineTask) -> ExperimentRecord:
    if isinstance(task, _DeTask):
        return _run_de_task(task)
    return _run_baseline_task(task)


def _point_settings(settings: DeSettings, index: int) -> DeSettings:
    return replace(settings, seed=(settings.seed + index * settings.restarts) % SEED_MODULUS)


def _encoded(problem: Problem, cfg: EmitterConfiguration) -> tuple[float, ...]:
    return tuple(float(x) for x in problem.encode(cfg))


def _baseline_families(n: int) -> tuple[str, ...]:
    return SWEEP_BASELINES if n >= 3 else ("chain",)


def rmin_sweep(
    n: int,
    pol: Polarization,
    r_min_grid: Sequence[float],
    settings: DeSettings,
    confinement_radius: float = DEFAULT_CONFINEMENT_RADIUS,
    baselines: bool = True,
    jobs: Optional[int] = None,
) -> list[ExperimentRecord]:
    """Free 2D optimum plus regular baselines at every grid point.

    Records come back grouped per point: the DE record first, then one
    record per baseline family.
    """
    grid = [float(r) for r in r_min_grid]
    if not grid:
        raise ValueError("r_min grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"r_min grid must be strictly ascending, got {grid}")
    pol = Polarization.parse(pol)
    families = _baseline_families(n) if baselines else ()
    tasks: list[_DeTask | _BaselineTask] = []
    for k, r_min in enumerate(grid):
        tasks.append(_DeTask(n, r_min, pol, FREE2D, confinement_radius, _point_settings(settings, k)))
        tasks.extend(_BaselineTask(f, n, r_min, pol, FREE2D, confinement_radius) for f in families)
    logger.info("Sweep n=%d %s over %d r_min point(s), %d task(s)", n, pol.value, len(grid), len(tasks))
    results = TaskPool(jobs).map(_run_task, tasks)

    per_point = 1 + len(families)
    de_records = results[::per_point]
    base_records = [results[k * per_point + 1:(k + 1) * per_point] for k in range(len(grid))]
    for k, rec in enumerate(_enforce_dominance(n, pol, grid, de_records, base_records, settings, confinement_radius)):
        results[k * per_point] = rec
    return results


def _enforce_dominance(
    n: int,
    pol: Polarization,
    grid: list[float],
    de_records: list[ExperimentRecord],
    base_records: list[list[ExperimentRecord]],
    settings: DeSettings,
    confinement_radius: float,
) -> list[ExperimentRecord]:
    """Rerun DE points beaten by a baseline or by the next larger r_min.

    The optimum at a larger r_min is feasible for every smaller one, so it is
    walked from the top of the grid down and used as a population seed.
    """
    de_records = list(de_records)
    rerun_offset = len(grid) * settings.restarts
    for k in range(len(grid) - 1, -1, -1):
        rec = de_records[k]
        candidates = [b for b in base_records[k] if b.ok]
        if k + 1 < len(grid) and de_records[k + 1].ok:
            candidates.append(de_records[k + 1])
        if not candidates:
            continue
        target = min(c.best_gamma for c in candidates)
        if rec.ok and rec.best_gamma <= target + BASELINE_SLACK:
            continue
        c = Constraints.free2d(grid[k], confinement_radius)
        problem = Problem(n, c, pol, FREE2D)
        seeds = tuple(_encoded(problem, cand.config()) for cand in sorted(candidates, key=lambda r: r.best_gamma))
        retry = replace(settings, restarts=1, seed=(settings.seed + rerun_offset + k) % SEED_MODULUS)
        logger.info("Reseeding n=%d r_min=%.3f: %.6e above reference %.6e", n, grid[k], rec.best_gamma or math.inf, target)
        fresh = _run_de_task(_DeTask(n, grid[k], pol, FREE2D, confinement_radius, retry, seeds))
        fresh.seeds_used = rec.seeds_used + fresh.seeds_used
        fresh.runtime_s += rec.runtime_s
        if fresh.ok and fresh.best_gamma > target + BASELINE_SLACK:
            fresh.flags.append("under_converged")
        if not fresh.ok and rec.ok:
            rec.flags.append("under_converged")
            continue
        de_records[k] = fresh
    return de_records


def sweep_many(
    n_list: Iterable[int],
    polarizations: Iterable[Polarization | str],
    r_min_grid: Sequence[float],
    settings: DeSettings,
    confinement_radius: float = DEFAULT_CONFINEMENT_RADIUS,
    baselines: bool = True,
    jobs: Optional[int] = None,
) -> list[ExperimentRecord]:
    records: list[ExperimentRecord] = []
    for pol in polarizations:
        for n in n_list:
            records.extend(rmin_sweep(n, Polarization.parse(pol), r_min_grid, settings, confinement_radius, baselines, jobs))
    return records


def check_monotone(records: Iterable[ExperimentRecord], slack: float = BASELINE_SLACK) -> list[tuple[float, float]]:
    """(r_small, r_large) pairs where the smaller r_min has the larger loss."""
    rows = sorted((r.r_min, r.best_gamma) for r in records if r.ok)
    return [(a[0], b[0]) for a, b in zip(rows, rows[1:]) if a[1] > b[1] + slack]


# ---------------------------------------------------------------- scaling


def _fit(model: str, ns: np.ndarray, log_g: np.ndarray) -> ScalingFit:
    xs = np.log(ns) if model == "power_law" else ns
    res = stats.linregress(xs, log_g)
    r2 = float(res.rvalue**2) if np.isfinite(res.rvalue) else 0.0
    return ScalingFit(model, float(math.exp(res.intercept)), float(res.slope), min(1.0, max(0.0, r2)))


def fit_models(ns: Sequence[float], gammas: Sequence[float]) -> dict[str, ScalingFit]:
    ns = np.asarray(ns, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    if ns.size != gammas.size:
        raise ValueError("ns and gammas differ in length")
    if ns.size < MIN_FIT_POINTS:
        raise ValueError(f"Scaling fit needs at least {MIN_FIT_POINTS} points, got {ns.size}")
    if np.any(gammas <= 0) or np.any(ns <= 0):
        raise ValueError("Scaling fit needs positive N and losses")
    log_g = np.log(gammas)
    return {m: _fit(m, ns, log_g) for m in ("power_law", "exponential")}


def fit_scaling(ns: Sequence[float], gammas: Sequence[float]) -> ScalingFit:
    """Better of log-log and log-linear fits by r^2; ties go to the power law."""
    fits = fit_models(ns, gammas)
    power, expo = fits["power_law"], fits["exponential"]
    return expo if expo.r_squared > power.r_squared else power


@dataclass
class ScalingStudy:
    records: list[ExperimentRecord]
    fits: dict[str, ScalingFit]
    alternatives: dict[str, dict[str, ScalingFit]] = field(default_factory=dict)


def _scaling_task(family: str, n: int, r_min: float, pol: Polarization, settings: DeSettings) -> _DeTask | _BaselineTask:
    if family == "restricted1d":
        return _DeTask(n, r_min, pol, RESTRICTED1D, None, settings)
    return _BaselineTask("chain" if family == "periodic" else "modulated", n, r_min, pol, RESTRICTED1D, None)


def scaling_study(
    n_list: Sequence[int],
    r_min: float,
    pol: Polarization,
    families: Iterable[str] = ("periodic", "modulated"),
    settings: Optional[DeSettings] = None,
    jobs: Optional[int] = None,
) -> ScalingStudy:
    ns = sorted({int(n) for n in n_list})
    if len(ns) < MIN_FIT_POINTS:
        raise ValueError(f"Scaling study needs at least {MIN_FIT_POINTS} sizes, got {ns}")
    fams = [f for f in SCALING_FAMILIES if f in set(families)]
    unknown = set(families) - set(SCALING_FAMILIES)
    if unknown:
        raise ValueError(f"Unknown scaling families: {sorted(unknown)}")
    pol = Polarization.parse(pol)
    settings = settings or DeSettings()
    tasks = [
        _scaling_task(f, n, r_min, pol, _point_settings(settings, k))
        for f in fams
        for k, n in enumerate(ns)
    ]
    records = TaskPool(jobs).map(_run_task, tasks)
    fits: dict[str, ScalingFit] = {}
    alternatives: dict[str, dict[str, ScalingFit]] = {}
    for i, f in enumerate(fams):
        rows = [r for r in records[i * len(ns):(i + 1) * len(ns)] if r.ok]
        if len(rows) < MIN_FIT_POINTS:
            logger.warning("Scaling family %s has %d usable point(s); no fit", f, len(rows))
            continue
        alternatives[f] = fit_models([r.n for r in rows], [r.best_gamma for r in rows])
        fits[f] = fit_scaling([r.n for r in rows], [r.best_gamma for r in rows])
        logger.info("Scaling %s: %s exponent=%.4f r2=%.5f", f, fits[f].model, fits[f].exponent, fits[f].r_squared)
    return ScalingStudy(records, fits, alternatives)


# ---------------------------------------------------------------- 1D comparison


@dataclass
class Compare1dRow:
    n: int
    r_min: float
    polarization: str
    confinement_radius: float
    optimized: ExperimentRecord
    periodic: ExperimentRecord
    modulated: ExperimentRecord
    optimized_gaps: list[float] = field(default_factory=list)
    modulated_gaps: list[float] = field(default_factory=list)
    optimized_profile: list[float] = field(default_factory=list)

    def records(self) -> list[ExperimentRecord]:
        return [self.optimized, self.periodic, self.modulated]

    def to_row(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "r_min": self.r_min,
            "confinement_radius": self.confinement_radius,
            "optimized_free": self.optimized.best_gamma,
            "periodic_chain": self.periodic.best_gamma,
            "modulated_chain": self.modulated.best_gamma,
        }


def _compare_point(args: tuple[int, float, Polarization, DeSettings]) -> Compare1dRow:
    n, r_min, pol, settings = args
    c = Constraints.restricted1d(n, r_min)
    optimized = _run_de_task(_DeTask(n, r_min, pol, RESTRICTED1D, None, settings))
    periodic = _run_baseline_task(_BaselineTask("chain", n, r_min, pol, RESTRICTED1D, None))
    modulated = _run_baseline_task(_BaselineTask("modulated", n, r_min, pol, RESTRICTED1D, None))
    row = Compare1dRow(n, r_min, pol.value, c.confinement_radius, optimized, periodic, modulated)
    if optimized.ok:
        cfg = optimized.config()
        row.optimized_gaps = [float(g) for g in chain_gaps(cfg)]
        row.optimized_profile = [float(w) for w in _most_subradiant(cfg, pol)[2]]
    if modulated.ok:
        p = ModulatedChainParams(n, modulated.params["r_min"], modulated.params["r_max"])
        row.modulated_gaps = [float(g) for g in modulated_gaps(p)]
    return row


def compare_1d(
    n: int,
    r_min_grid: Sequence[float],
    settings: DeSettings,
    pol: Polarization = Polarization.SIGMA_Z,
    jobs: Optional[int] = None,
) -> list[Compare1dRow]:
    """Optimized chain vs periodic and modulated chains in the N (r_min + 1) / 2 circle."""
    if n < 3:
        raise ValueError(f"1D comparison needs n >= 3, got {n}")
    grid = [float(r) for r in r_min_grid]
    if not grid:
        raise ValueError("r_min grid is empty")
    pol = Polarization.parse(pol)
    tasks = [(n, r, pol, _point_settings(settings, k)) for k, r in enumerate(grid)]
    return TaskPool(jobs).map(_compare_point, tasks)


def success_fraction(records: Sequence[ExperimentRecord]) -> float:
    if not records:
        return 1.0
    return sum(1 for r in records if r.ok) / len(records)
