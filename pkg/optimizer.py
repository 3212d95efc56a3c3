"""Differential-evolution search for planar configurations with minimal decay.

The search follows DE/best/1/bin: one mutation weight per generation, binomial
crossover with a forced mutant component, greedy selection with immediate
update of the incumbent best. A run stops once the spread of objective values
drops below a fraction of their mean and the population has also collapsed
in parameter space.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, NamedTuple, Optional, Sequence

import numpy as np

from constraints import (
    FREE2D,
    LAYOUTS,
    RESTRICTED1D,
    Constraints,
    InfeasibleProblemError,
    configuration_violation,
)
from physics import K0, EmitterConfiguration, Polarization, green_coupling, min_decay
from structures import decode_1d
from worker import TaskPool

logger = logging.getLogger(__name__)

PENALTY_WEIGHT = 10.0
TWO_PI = 2.0 * math.pi
SEED_MODULUS = 2**64
CROSSOVER_BASES = ("candidate", "best")

__all__ = [
    "DeRun",
    "DeSettings",
    "DifferentialEvolution",
    "Feasibility",
    "InfeasibleProblemError",
    "OracleRefusedError",
    "OracleResult",
    "Problem",
    "de_generation",
    "decode",
    "encode",
    "feasibility",
    "grid_oracle",
    "objective",
    "run_de",
]


class OracleRefusedError(ValueError):
    pass


class Feasibility(NamedTuple):
    feasible: bool
    violation: float


@dataclass(frozen=True)
class DeSettings:
    population_size: Optional[int] = None
    f_range: tuple[float, float] = (0.5, 1.0)
    crossover_rate: float = 0.7
    max_generations: int = 3000
    stop_rel_dispersion: float = 0.01
    stop_spread: float = 1e-4
    restarts: int = 8
    seed: int = 0
    crossover_base: str = "candidate"
    init_tries: int = 1000

    def __post_init__(self):
        lo, hi = (float(v) for v in self.f_range)
        object.__setattr__(self, "f_range", (lo, hi))
        if not 0.0 < lo <= hi:
            raise ValueError(f"f_range must satisfy 0 < low <= high, got {self.f_range}")
        if not 0.0 < self.crossover_rate <= 1.0:
            raise ValueError(f"crossover_rate must lie in (0, 1], got {self.crossover_rate}")
        if self.population_size is not None and self.population_size < 4:
            raise ValueError(f"population_size must be >= 4, got {self.population_size}")
        if self.max_generations < 0:
            raise ValueError("max_generations must be non-negative")
        if self.stop_rel_dispersion < 0:
            raise ValueError("stop_rel_dispersion must be non-negative")
        if self.stop_spread < 0:
            raise ValueError("stop_spread must be non-negative")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not 0 <= int(self.seed) < SEED_MODULUS:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.crossover_base not in CROSSOVER_BASES:
            raise ValueError(f"crossover_base must be one of {CROSSOVER_BASES}, got {self.crossover_base!r}")

    def population_for(self, dimension: int) -> int:
        if self.population_size is not None:
            return int(self.population_size)
        return max(2 * dimension, 10)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "population_size": self.population_size,
            "f_range": list(self.f_range),
            "crossover_rate": self.crossover_rate,
            "max_generations": self.max_generations,
            "stop_rel_dispersion": self.stop_rel_dispersion,
            "stop_spread": self.stop_spread,
            "restarts": self.restarts,
            "seed": int(self.seed),
            "crossover_base": self.crossover_base,
        }


def _n_from_length(length: int, layout: str) -> int:
    if layout == RESTRICTED1D:
        return length + 1
    if length < 1 or length % 2 == 0:
        raise ValueError(f"A 2D parameter vector has odd length 2N-3, got {length}")
    return (length + 3) // 2


def decode(v: Sequence[float]) -> EmitterConfiguration:
    """[r2, rho3, phi3, ..., rhoN, phiN] -> positions, atom 1 at the origin."""
    v = np.asarray(v, dtype=float).ravel()
    n = _n_from_length(v.size, FREE2D)
    pts = np.zeros((n, 2))
    pts[1, 0] = v[0]
    if n > 2:
        rho, phi = v[1::2], v[2::2]
        pts[2:, 0] = rho * np.cos(phi)
        pts[2:, 1] = rho * np.sin(phi)
    return EmitterConfiguration(pts)


def encode(cfg: EmitterConfiguration) -> np.ndarray:
    """Gauge-fix a configuration: atom 1 to the origin, atom 2 onto +x."""
    if cfg.n < 2:
        raise ValueError(f"Encoding needs at least two emitters, got {cfg.n}")
    pts = cfg.positions - cfg.positions[0]
    r2 = float(np.hypot(*pts[1]))
    if r2 == 0.0:
        raise ValueError("Atoms 1 and 2 coincide; gauge is undefined")
    theta = math.atan2(pts[1, 1], pts[1, 0])
    c, s = math.cos(-theta), math.sin(-theta)
    pts = pts @ np.array([[c, -s], [s, c]]).T
    out = np.empty(2 * cfg.n - 3)
    out[0] = r2
    if cfg.n > 2:
        out[1::2] = np.hypot(pts[2:, 0], pts[2:, 1])
        out[2::2] = np.mod(np.arctan2(pts[2:, 1], pts[2:, 0]), TWO_PI)
    return out


def _decode_layout(v: np.ndarray, layout: str) -> EmitterConfiguration:
    return decode_1d(v) if layout == RESTRICTED1D else decode(v)


def feasibility(v: Sequence[float], c: Constraints, layout: str = FREE2D) -> Feasibility:
    violation = configuration_violation(_decode_layout(np.asarray(v, dtype=float), layout), c, layout)
    return Feasibility(violation == 0.0, violation)


def objective(v: Sequence[float], c: Constraints, pol: Polarization, layout: str = FREE2D) -> float:
    """min decay when feasible, otherwise N + 10 * violation."""
    v = np.asarray(v, dtype=float)
    cfg = _decode_layout(v, layout)
    violation = configuration_violation(cfg, c, layout)
    if violation > 0.0:
        return cfg.n + PENALTY_WEIGHT * violation
    return min_decay(cfg, pol).gamma_min


@dataclass(frozen=True)
class Problem:
    n: int
    constraints: Constraints
    polarization: Polarization = Polarization.SIGMA_Z
    layout: str = FREE2D

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"Optimization needs N >= 2, got {self.n}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"Unknown layout: {self.layout!r}")

    @property
    def dimension(self) -> int:
        return self.n - 1 if self.layout == RESTRICTED1D else 2 * self.n - 3

    @property
    def angle_mask(self) -> np.ndarray:
        mask = np.zeros(self.dimension, dtype=bool)
        if self.layout == FREE2D:
            mask[2::2] = True
        return mask

    @property
    def radial_upper(self) -> float:
        # a chain spans at most the circle diameter
        c = self.constraints
        return 2.0 * c.confinement_radius if self.layout == RESTRICTED1D else c.confinement_radius

    def decode(self, v: Sequence[float]) -> EmitterConfiguration:
        v = np.asarray(v, dtype=float)
        if v.size != self.dimension:
            raise ValueError(f"Expected {self.dimension} parameters for N={self.n}, got {v.size}")
        return _decode_layout(v, self.layout)

    def encode(self, cfg: EmitterConfiguration) -> np.ndarray:
        if cfg.n != self.n:
            raise ValueError(f"Configuration has {cfg.n} emitters, problem expects {self.n}")
        if self.layout == RESTRICTED1D:
            return np.diff(np.sort(cfg.positions[:, 0]))
        return encode(cfg)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        c = self.constraints
        if self.layout == RESTRICTED1D:
            # gaps up to r_min + lambda0 always fit the default N (r_min + 1) / 2 circle
            return rng.uniform(c.r_min, min(c.r_min + 1.0, self.radial_upper), size=self.dimension)
        v = rng.uniform(c.r_min, c.confinement_radius, size=self.dimension)
        mask = self.angle_mask
        v[mask] = rng.uniform(0.0, TWO_PI, size=int(mask.sum()))
        return v

    def repair(self, v: np.ndarray) -> np.ndarray:
        """Wrap angles into [0, 2 pi) and clamp radial components to [r_min, upper].

        A radial component is a distance to atom 1 (or a gap), so anything
        below r_min is infeasible on its own.
        """
        out = np.array(v, dtype=float)
        mask = self.angle_mask
        out[mask] = np.mod(out[mask], TWO_PI)
        upper = self.radial_upper
        out[~mask] = np.clip(out[~mask], min(self.constraints.r_min, upper), upper)
        return out

    def spread(self, population: np.ndarray) -> float:
        """Largest per-component spread of a population, scaled to [0, 1]-ish units.

        Radial components use std over the box width; angles use the circular
        standard deviation over 2 pi.
        """
        pop = np.atleast_2d(np.asarray(population, dtype=float))
        if pop.shape[0] < 2:
            return 0.0
        mask = self.angle_mask
        width = max(self.radial_upper - self.constraints.r_min, 1e-12)
        out = 0.0
        if np.any(~mask):
            out = float(np.max(np.std(pop[:, ~mask], axis=0))) / width
        if np.any(mask):
            resultant = np.abs(np.mean(np.exp(1j * pop[:, mask]), axis=0))
            circ = np.sqrt(-2.0 * np.log(np.clip(resultant, 1e-300, 1.0)))
            out = max(out, float(np.max(circ)) / TWO_PI)
        return out

    def violation(self, v: Sequence[float]) -> float:
        return feasibility(v, self.constraints, self.layout).violation

    def objective(self, v: Sequence[float]) -> float:
        return objective(v, self.constraints, self.polarization, self.layout)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "r_min": self.constraints.r_min,
            "confinement_radius": self.constraints.confinement_radius,
            "polarization": self.polarization.value,
            "layout": self.layout,
        }


class GenerationDraws(NamedTuple):
    f: float
    permutations: np.ndarray
    masks: np.ndarray


def draw_generation(rng: np.random.Generator, population_size: int, dimension: int, settings: DeSettings) -> GenerationDraws:
    """All random numbers of one generation, drawn in a fixed order."""
    f = float(rng.uniform(*settings.f_range))
    perms = np.array([rng.permutation(population_size) for _ in range(population_size)])
    masks = rng.random((population_size, dimension)) < settings.crossover_rate
    forced = rng.integers(0, dimension, size=population_size)
    masks[np.arange(population_size), forced] = True
    return GenerationDraws(f, perms, masks)


def make_trial(
    population: np.ndarray,
    i: int,
    best: int,
    draws: GenerationDraws,
    problem: Problem,
    settings: DeSettings,
) -> np.ndarray:
    """best + F (v_j - v_k), crossed with candidate i (or the best), then repaired."""
    j, k = [int(c) for c in draws.permutations[i] if c != i and c != best][:2]
    mutant = population[best] + draws.f * (population[j] - population[k])
    source = population[i] if settings.crossover_base == "candidate" else population[best]
    return problem.repair(np.where(draws.masks[i], mutant, source))


class Generation(NamedTuple):
    population: np.ndarray
    energies: np.ndarray
    best_index: int
    evaluations: int
    f: float


def de_generation(
    population: np.ndarray,
    energies: np.ndarray,
    best_index: int,
    problem: Problem,
    settings: DeSettings,
    rng: np.random.Generator,
) -> Generation:
    pop = np.array(population, dtype=float, copy=True)
    en = np.array(energies, dtype=float, copy=True)
    size, dim = pop.shape
    if size < 4:
        raise ValueError(f"Population needs at least 4 members, got {size}")
    draws = draw_generation(rng, size, dim, settings)
    best = int(best_index)
    for i in range(size):
        trial = make_trial(pop, i, best, draws, problem, settings)
        e = problem.objective(trial)
        improves_best = e < en[best]
        if e <= en[i]:
            pop[i] = trial
            en[i] = e
        if improves_best:
            best = i
    return Generation(pop, en, best, size, draws.f)


def _dispersion(energies: np.ndarray) -> float:
    mean = abs(float(np.mean(energies)))
    std = float(np.std(energies))
    if mean == 0.0:
        return 0.0 if std == 0.0 else math.inf
    return std / mean


@dataclass
class RestartResult:
    seed: int
    best_vector: np.ndarray
    best_gamma: float
    feasible: bool
    generations: int
    evaluations: int
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    converged: bool = False


class DifferentialEvolution:
    """One seeded DE run."""

    def __init__(self, problem: Problem, settings: DeSettings, seed: int, initial: Optional[Sequence[Sequence[float]]] = None):
        self.problem = problem
        self.settings = settings
        self.seed = int(seed) % SEED_MODULUS
        self.rng = np.random.default_rng(self.seed)
        self.initial = [np.asarray(v, dtype=float) for v in (initial or [])]
        self.population = np.zeros((0, problem.dimension))
        self.energies = np.zeros(0)
        self.best_index = 0
        self.evaluations = 0

    def initialize(self) -> None:
        problem, size = self.problem, self.settings.population_for(self.problem.dimension)
        members: list[np.ndarray] = []
        for v in self.initial[:size]:
            if v.size != problem.dimension:
                raise ValueError(f"Seed vector has {v.size} parameters, expected {problem.dimension}")
            members.append(problem.repair(v))
        while len(members) < size:
            v = problem.sample(self.rng)
            for _ in range(self.settings.init_tries - 1):
                if problem.violation(v) == 0.0:
                    break
                v = problem.sample(self.rng)
            members.append(v)
        self.population = np.array(members)
        self.energies = np.array([problem.objective(v) for v in self.population])
        self.evaluations = size
        self.best_index = int(np.argmin(self.energies))

    @property
    def convergence(self) -> float:
        return _dispersion(self.energies)

    def converged(self) -> bool:
        if self.convergence > self.settings.stop_rel_dispersion:
            return False
        return self.problem.spread(self.population) <= self.settings.stop_spread

    def solve(self) -> RestartResult:
        t0 = time.perf_counter()
        self.initialize()
        trace = [(0, float(self.energies[self.best_index]), self.convergence)]
        generation = 0
        done = self.converged()
        while not done and generation < self.settings.max_generations:
            step = de_generation(self.population, self.energies, self.best_index, self.problem, self.settings, self.rng)
            self.population, self.energies, self.best_index = step.population, step.energies, step.best_index
            self.evaluations += step.evaluations
            generation += 1
            trace.append((generation, float(self.energies[self.best_index]), self.convergence))
            if generation % 100 == 0:
                logger.debug("seed=%d gen=%d best=%.6e dispersion=%.3e", self.seed, generation, trace[-1][1], trace[-1][2])
            done = self.converged()
        best = self.population[self.best_index].copy()
        feasible = self.problem.violation(best) == 0.0
        logger.info(
            "DE seed=%d N=%d r_min=%.3f: best=%.6e feasible=%s after %d generation(s), %d evaluation(s), %.1f s",
            self.seed, self.problem.n, self.problem.constraints.r_min, self.energies[self.best_index],
            feasible, generation, self.evaluations, time.perf_counter() - t0,
        )
        return RestartResult(
            seed=self.seed,
            best_vector=best,
            best_gamma=float(self.energies[self.best_index]),
            feasible=feasible,
            generations=generation,
            evaluations=self.evaluations,
            trace=trace,
            converged=done,
        )


@dataclass
class DeRun:
    problem: Problem
    best_vector: np.ndarray
    best_gamma: float
    generations_used: int
    objective_evaluations: int
    convergence_trace: list[tuple[int, float, float]]
    seed_used: int
    seeds: list[int] = field(default_factory=list)
    restart_gammas: list[float] = field(default_factory=list)

    @property
    def best_configuration(self) -> EmitterConfiguration:
        return self.problem.decode(self.best_vector)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "problem": self.problem.to_dict(),
            "best_vector": [float(x) for x in self.best_vector],
            "best_gamma": float(self.best_gamma),
            "generations_used": int(self.generations_used),
            "objective_evaluations": int(self.objective_evaluations),
            "seed_used": int(self.seed_used),
            "seeds": [int(s) for s in self.seeds],
            "restart_gammas": [float(g) for g in self.restart_gammas],
            "convergence_trace": [[int(g), float(b), float(d)] for g, b, d in self.convergence_trace],
        }


def _restart_task(args: tuple[Problem, DeSettings, int, Optional[list[np.ndarray]]]) -> RestartResult:
    problem, settings, seed, initial = args
    return DifferentialEvolution(problem, settings, seed, initial).solve()


def run_de(
    problem: Problem,
    settings: DeSettings,
    initial: Optional[Sequence[Sequence[float]]] = None,
    jobs: int = 1,
) -> DeRun:
    """Best feasible result over restarts seeded seed, seed+1, ..."""
    seeds = [(int(settings.seed) + r) % SEED_MODULUS for r in range(settings.restarts)]
    seeded = [np.asarray(v, dtype=float) for v in initial] if initial else None
    tasks = [(problem, settings, seed, seeded) for seed in seeds]
    results: list[RestartResult] = TaskPool(jobs).map(_restart_task, tasks)
    feasible = [r for r in results if r.feasible]
    if not feasible:
        raise InfeasibleProblemError(
            f"infeasible problem: no feasible configuration for N={problem.n}, "
            f"r_min={problem.constraints.r_min}, radius={problem.constraints.confinement_radius}"
        )
    best = min(feasible, key=lambda r: r.best_gamma)
    return DeRun(
        problem=problem,
        best_vector=best.best_vector,
        best_gamma=best.best_gamma,
        generations_used=best.generations,
        objective_evaluations=sum(r.evaluations for r in results),
        convergence_trace=best.trace,
        seed_used=best.seed,
        seeds=seeds,
        restart_gammas=[r.best_gamma for r in results],
    )


@dataclass
class OracleResult:
    feasible: bool
    gamma_min: Optional[float]
    vector: Optional[np.ndarray]
    points_evaluated: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "feasible": self.feasible,
            "gamma_min": self.gamma_min,
            "best_vector": None if self.vector is None else [float(x) for x in self.vector],
            "points_evaluated": self.points_evaluated,
        }


def _batched_min_decay(dists: np.ndarray, n: int, pol: Polarization) -> np.ndarray:
    """gamma_min for a stack of configurations given their condensed distances."""
    m = dists.shape[0]
    h = np.zeros((m, n, n), dtype=complex)
    h[:, np.arange(n), np.arange(n)] = -0.5j
    iu, ju = np.triu_indices(n, k=1)
    g = green_coupling(K0 * dists, pol)
    h[:, iu, ju] = g
    h[:, ju, iu] = g
    return (-2.0 * np.linalg.eigvals(h).imag).min(axis=1)


def grid_oracle(
    problem: Problem,
    radial_step: float,
    angle_step: float = 0.01,
    r_max: Optional[float] = None,
    chunk: int = 200_000,
) -> OracleResult:
    """Exhaustive feasible-grid minimum for N = 2 or 3 in the 2D gauge.

    The third atom's angle is scanned over [0, pi]; mirrored configurations
    share their spectrum.
    """
    if problem.n not in (2, 3) or problem.layout != FREE2D:
        raise OracleRefusedError(f"Grid oracle supports free2d N in {{2, 3}}, got N={problem.n} ({problem.layout})")
    if not radial_step > 0 or not angle_step > 0:
        raise ValueError("Grid steps must be positive")
    c = problem.constraints
    top = c.confinement_radius if r_max is None else min(r_max, c.confinement_radius)
    radii = np.arange(c.r_min, top + radial_step / 2.0, radial_step)
    radii = radii[radii <= top + 1e-12]
    if radii.size == 0:
        logger.warning("Oracle grid is empty: r_min=%.3f exceeds scan radius %.3f", c.r_min, top)
        return OracleResult(False, None, None, 0)

    if problem.n == 2:
        gammas = _batched_min_decay(radii[:, None], 2, problem.polarization)
        k = int(np.argmin(gammas))
        return OracleResult(True, float(gammas[k]), np.array([radii[k]]), int(radii.size))

    phis = np.arange(0.0, math.pi + angle_step / 2.0, angle_step)
    rho, phi = (a.ravel() for a in np.meshgrid(radii, phis, indexing="ij"))
    best_gamma, best_vec, evaluated = math.inf, None, 0
    for r2 in radii:
        d23 = np.sqrt(np.maximum(r2**2 + rho**2 - 2.0 * r2 * rho * np.cos(phi), 0.0))
        ok = d23 >= c.r_min - 1e-12
        if not np.any(ok):
            continue
        idx = np.flatnonzero(ok)
        for start in range(0, idx.size, chunk):
            sel = idx[start:start + chunk]
            dists = np.column_stack([np.full(sel.size, r2), rho[sel], d23[sel]])
            gammas = _batched_min_decay(dists, 3, problem.polarization)
            evaluated += sel.size
            k = int(np.argmin(gammas))
            if gammas[k] < best_gamma:
                best_gamma = float(gammas[k])
                best_vec = np.array([r2, rho[sel[k]], phi[sel[k]]])
    if best_vec is None:
        return OracleResult(False, None, None, evaluated)
    logger.info("Oracle N=3 r_min=%.3f: gamma=%.6e over %d point(s)", c.r_min, best_gamma, evaluated)
    return OracleResult(True, best_gamma, best_vec, evaluated)
