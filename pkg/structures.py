"""Reference geometries: chains, lattice fragments and modulated chains."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from constraints import FREE2D, Constraints, InfeasibleProblemError, configuration_violation
from physics import EmitterConfiguration, Polarization, min_decay

logger = logging.getLogger(__name__)

FAMILIES = ("chain", "triangle", "rectangle", "modulated")

SCAN_STEP = 1e-3
SCAN_SPAN = 1.0
REFINE_XATOL = 1e-6
MODULATED_TOP = 1.0


def regular_chain(n: int, a: float) -> EmitterConfiguration:
    if n < 1:
        raise ValueError("Chain needs at least one emitter")
    if not a > 0:
        raise ValueError(f"Lattice constant must be positive, got {a}")
    xs = np.arange(n, dtype=float) * a
    return EmitterConfiguration(np.column_stack([xs, np.zeros(n)]))


def _triangle_fill(n: int, first_row: int, a: float) -> np.ndarray:
    pts: list[tuple[float, float]] = []
    row = 0
    while len(pts) < n and first_row - row > 0:
        for j in range(first_row - row):
            if len(pts) == n:
                break
            pts.append((row * a / 2.0 + j * a, row * a * math.sqrt(3.0) / 2.0))
        row += 1
    return np.array(pts, dtype=float)


def _diameter(pts: np.ndarray) -> float:
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())


def triangular_fragment(n: int, a: float) -> EmitterConfiguration:
    """Row-major fill of a triangular lattice, rows of k, k-1, ... sites.

    For non-triangular n the longest row k is chosen to minimize the
    diameter of the fragment; the result is centred on its centroid.
    """
    if n < 3:
        raise ValueError(f"Triangular fragment needs n >= 3, got {n}")
    if not a > 0:
        raise ValueError(f"Lattice constant must be positive, got {a}")
    k_min = 1
    while k_min * (k_min + 1) // 2 < n:
        k_min += 1
    best: np.ndarray | None = None
    best_diam = math.inf
    for k in range(k_min, n + 1):
        pts = _triangle_fill(n, k, a)
        if len(pts) != n:
            continue
        diam = _diameter(pts)
        if diam < best_diam - 1e-12:
            best, best_diam = pts, diam
    assert best is not None
    return EmitterConfiguration(best - best.mean(axis=0))


def rectangular_fragment(rows: int, cols: int, a: float) -> EmitterConfiguration:
    if rows < 1 or cols < 1:
        raise ValueError(f"Rectangle needs rows, cols >= 1, got {rows}x{cols}")
    if not a > 0:
        raise ValueError(f"Lattice constant must be positive, got {a}")
    jj, ii = np.meshgrid(np.arange(cols), np.arange(rows))
    pts = np.column_stack([jj.ravel() * a, ii.ravel() * a]).astype(float)
    return EmitterConfiguration(pts - pts.mean(axis=0))


@dataclass(frozen=True)
class ModulatedChainParams:
    n: int
    r_min: float
    r_max: float

    def __post_init__(self):
        if self.n < 3:
            raise ValueError(f"Modulated chain needs n >= 3, got {self.n}")
        if not self.r_min > 0:
            raise ValueError(f"r_min must be positive, got {self.r_min}")
        if self.r_max < self.r_min:
            raise ValueError(f"r_max {self.r_max} is below r_min {self.r_min}")


def modulated_gaps(p: ModulatedChainParams) -> np.ndarray:
    """Gaps r_max - (r_max - r_min) sin^2(pi (i - 1) / (N - 2)), i = 1..N-1."""
    i = np.arange(1, p.n, dtype=float)
    return p.r_max - (p.r_max - p.r_min) * np.sin(math.pi * (i - 1.0) / (p.n - 2)) ** 2


def decode_1d(gaps: Sequence[float]) -> EmitterConfiguration:
    gaps = np.asarray(gaps, dtype=float).ravel()
    xs = np.concatenate([[0.0], np.cumsum(gaps)])
    return EmitterConfiguration(np.column_stack([xs, np.zeros(xs.size)]))


def modulated_chain(p: ModulatedChainParams) -> EmitterConfiguration:
    return decode_1d(modulated_gaps(p))


def chain_gaps(cfg: EmitterConfiguration) -> np.ndarray:
    """Neighbour spacings along the x axis, left to right."""
    return np.diff(np.sort(cfg.positions[:, 0]))


@dataclass
class BaselineResult:
    family: str
    params: Dict[str, Any]
    best_gamma: float
    configuration: EmitterConfiguration = field(repr=False)


def _feasible_gamma(cfg: EmitterConfiguration, c: Constraints, pol: Polarization, layout: str) -> float:
    if configuration_violation(cfg, c, layout) > 0.0:
        return math.inf
    return min_decay(cfg, pol).gamma_min


def _scan(objective: Callable[[float], float], lo: float, hi: float, step: float) -> tuple[float, float]:
    """Grid scan followed by bounded Brent/golden refinement around the best cell."""
    grid = np.arange(lo, hi + step / 2.0, step)
    values = np.array([objective(float(a)) for a in grid])
    if not np.any(np.isfinite(values)):
        return math.nan, math.inf
    k = int(np.argmin(values))
    best_a, best_val = float(grid[k]), float(values[k])
    left = float(grid[max(k - 1, 0)])
    right = float(grid[min(k + 1, grid.size - 1)])
    if right - left > REFINE_XATOL:
        res = minimize_scalar(objective, bounds=(left, right), method="bounded", options={"xatol": REFINE_XATOL})
        if np.isfinite(res.fun) and res.fun < best_val:
            best_a, best_val = float(res.x), float(res.fun)
    return best_a, best_val


def baseline_sweep(
    family: str,
    n: int,
    c: Constraints,
    pol: Polarization,
    layout: str = FREE2D,
    step: float = SCAN_STEP,
    span: float = SCAN_SPAN,
) -> BaselineResult:
    """Best member of a regular family with every spacing >= r_min."""
    if family not in FAMILIES:
        raise ValueError(f"Unknown baseline family: {family!r}")
    lo, hi = c.r_min, c.r_min + span
    if family == "chain":
        build = lambda a: regular_chain(n, a)  # noqa: E731
        a, gamma = _scan(lambda a: _feasible_gamma(build(a), c, pol, layout), lo, hi, step)
        result = BaselineResult(family, {"a": a}, gamma, build(a) if np.isfinite(gamma) else None)
    elif family == "triangle":
        build = lambda a: triangular_fragment(n, a)  # noqa: E731
        a, gamma = _scan(lambda a: _feasible_gamma(build(a), c, pol, layout), lo, hi, step)
        result = BaselineResult(family, {"a": a}, gamma, build(a) if np.isfinite(gamma) else None)
    elif family == "rectangle":
        result = BaselineResult(family, {}, math.inf, None)
        for rows in range(1, int(math.isqrt(n)) + 1):
            if n % rows:
                continue
            cols = n // rows
            build = lambda a, r=rows, k=cols: rectangular_fragment(r, k, a)  # noqa: E731
            a, gamma = _scan(lambda a, b=build: _feasible_gamma(b(a), c, pol, layout), lo, hi, step)
            logger.debug("Rectangle %dx%d: a=%.6f gamma=%.6e", rows, cols, a, gamma)
            if gamma < result.best_gamma:
                result = BaselineResult(family, {"rows": rows, "cols": cols, "a": a}, gamma, build(a))
    else:
        result = _modulated_sweep(n, c, pol, layout, step)
    if not np.isfinite(result.best_gamma):
        raise InfeasibleProblemError(f"No feasible {family} baseline for n={n} under {c}")
    logger.info("Baseline %s n=%d r_min=%.3f: gamma=%.6e params=%s", family, n, c.r_min, result.best_gamma, result.params)
    return result


def _modulated_sweep(n: int, c: Constraints, pol: Polarization, layout: str, step: float) -> BaselineResult:
    """Scan r_max over [r_min, max(lambda0, r_min)]; the smallest gap stays pinned at r_min."""
    lower = c.r_min

    def gamma_of(upper: float) -> float:
        if upper < lower:
            return math.inf
        return _feasible_gamma(modulated_chain(ModulatedChainParams(n, lower, upper)), c, pol, layout)

    upper, gamma = _scan(gamma_of, lower, max(MODULATED_TOP, lower), step)
    cfg = modulated_chain(ModulatedChainParams(n, lower, upper)) if np.isfinite(gamma) else None
    return BaselineResult("modulated", {"r_min": lower, "r_max": upper}, gamma, cfg)
