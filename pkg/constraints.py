"""Minimum-distance and confinement constraints on emitter configurations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from physics import EmitterConfiguration

FREE2D = "free2d"
RESTRICTED1D = "restricted1d"
LAYOUTS = (FREE2D, RESTRICTED1D)

DEFAULT_CONFINEMENT_RADIUS = 5.0
# pairs closer than r_min by less than this are treated as touching, not violating
DISTANCE_SLACK = 1e-12


class InfeasibleProblemError(RuntimeError):
    pass


@dataclass(frozen=True)
class Constraints:
    r_min: float
    confinement_radius: float = DEFAULT_CONFINEMENT_RADIUS

    def __post_init__(self):
        if not self.r_min > 0.0:
            raise ValueError(f"r_min must be positive, got {self.r_min}")
        if not self.confinement_radius > 0.0:
            raise ValueError(f"confinement_radius must be positive, got {self.confinement_radius}")
        if self.confinement_radius < self.r_min:
            raise ValueError(
                f"confinement_radius {self.confinement_radius} is below r_min {self.r_min}"
            )

    @classmethod
    def free2d(cls, r_min: float, confinement_radius: float | None = None) -> "Constraints":
        return cls(r_min, DEFAULT_CONFINEMENT_RADIUS if confinement_radius is None else confinement_radius)

    @classmethod
    def restricted1d(cls, n: int, r_min: float, confinement_radius: float | None = None) -> "Constraints":
        """Chains get the N (r_min + lambda0) / 2 circle unless overridden."""
        radius = n * (r_min + 1.0) / 2.0 if confinement_radius is None else confinement_radius
        return cls(r_min, radius)

    @classmethod
    def for_layout(cls, layout: str, n: int, r_min: float, confinement_radius: float | None = None) -> "Constraints":
        if layout == RESTRICTED1D:
            return cls.restricted1d(n, r_min, confinement_radius)
        if layout == FREE2D:
            return cls.free2d(r_min, confinement_radius)
        raise ValueError(f"Unknown layout: {layout!r}")


def spacing_violation(cfg: EmitterConfiguration, c: Constraints) -> float:
    d = cfg.pairwise_distances()
    if d.size == 0:
        return 0.0
    return float(np.sum(np.maximum(0.0, c.r_min - d - DISTANCE_SLACK)))


def confinement_violation(cfg: EmitterConfiguration, c: Constraints, layout: str = FREE2D) -> float:
    """Excess distance beyond the confinement circle.

    In the 2D gauge the circle is centred on the first emitter; chains are
    measured from their midpoint, so the total length may reach 2R.
    """
    pts = cfg.positions
    if layout == RESTRICTED1D:
        xs = pts[:, 0]
        centre = np.array([(xs.min() + xs.max()) / 2.0, 0.0])
    else:
        centre = pts[0]
    rho = np.linalg.norm(pts - centre, axis=1)
    return float(np.sum(np.maximum(0.0, rho - c.confinement_radius - DISTANCE_SLACK)))


def configuration_violation(cfg: EmitterConfiguration, c: Constraints, layout: str = FREE2D) -> float:
    return spacing_violation(cfg, c) + confinement_violation(cfg, c, layout)
