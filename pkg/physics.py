"""Single-excitation effective Hamiltonian of planar two-level emitter ensembles.

Natural units throughout: lengths in lambda0 (k0 = 2*pi), frequencies and
decay rates in Gamma0, with omega0 subtracted from the diagonal.
"""
from __future__ import annotations

import enum
import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.spatial.distance import pdist

logger = logging.getLogger(__name__)

K0 = 2.0 * math.pi
MIN_SEPARATION = 1e-9
# decays/shifts are rounded to this many decimals only for ordering
_SORT_DECIMALS = 12


class CoincidentEmittersError(ValueError):
    def __init__(self, i: int, j: int, distance: float):
        super().__init__(f"Emitters {i} and {j} coincide (distance {distance:.3e} lambda0)")
        self.pair = (i, j)
        self.distance = distance

    def __reduce__(self):
        return type(self), (self.pair[0], self.pair[1], self.distance)


class EigensolverError(RuntimeError):
    def __init__(self, message: str, config_hash: str):
        super().__init__(f"{message} [configuration {config_hash}]")
        self.message = message
        self.config_hash = config_hash

    def __reduce__(self):
        return type(self), (self.message, self.config_hash)


class Polarization(enum.Enum):
    SIGMA_Z = "sigma_z"
    SIGMA_PLUS = "sigma_plus"
    SIGMA_MINUS = "sigma_minus"

    @classmethod
    def parse(cls, value: "Polarization | str") -> "Polarization":
        if isinstance(value, cls):
            return value
        text = str(value or "").strip().lower()
        aliases = {
            "z": "sigma_z", "sigmaz": "sigma_z",
            "+": "sigma_plus", "sigma+": "sigma_plus", "plus": "sigma_plus",
            "-": "sigma_minus", "sigma-": "sigma_minus", "minus": "sigma_minus",
        }
        text = aliases.get(text, text)
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"Unknown polarization: {value!r}")

    @property
    def unit_vector(self) -> np.ndarray:
        """Dipole orientation e_d used by the full-tensor evaluation."""
        if self is Polarization.SIGMA_Z:
            return np.array([0.0, 0.0, 1.0], dtype=complex)
        sign = 1.0 if self is Polarization.SIGMA_PLUS else -1.0
        return np.array([1.0, sign * 1j, 0.0], dtype=complex) / math.sqrt(2.0)


@dataclass(frozen=True, eq=False)
class EmitterConfiguration:
    """Emitter positions in the z = 0 plane, shape (N, 2), units of lambda0.

    Coincident emitters are representable (the optimizer decodes arbitrary
    vectors); they are rejected when a Hamiltonian is built.
    """

    positions: np.ndarray

    def __post_init__(self):
        pts = np.array(self.positions, dtype=float).reshape(-1, 2) if np.size(self.positions) else np.zeros((0, 2))
        if pts.shape[0] < 1:
            raise ValueError("Configuration needs at least one emitter")
        if not np.all(np.isfinite(pts)):
            raise ValueError("Configuration positions must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "positions", pts)

    @classmethod
    def from_list(cls, points: Iterable[Sequence[float]]) -> "EmitterConfiguration":
        return cls(np.array([[float(p[0]), float(p[1])] for p in points], dtype=float))

    @property
    def n(self) -> int:
        return int(self.positions.shape[0])

    def to_list(self) -> list[list[float]]:
        return [[float(x), float(y)] for x, y in self.positions]

    def pairwise_distances(self) -> np.ndarray:
        """Condensed distance vector in scipy's pdist order."""
        if self.n < 2:
            return np.zeros(0)
        return pdist(self.positions)

    def closest_pair(self) -> tuple[int, int, float]:
        dists = self.pairwise_distances()
        if dists.size == 0:
            return 0, 0, math.inf
        flat = int(np.argmin(dists))
        iu, ju = np.triu_indices(self.n, k=1)
        return int(iu[flat]), int(ju[flat]), float(dists[flat])

    def check_separations(self, min_separation: float = MIN_SEPARATION) -> None:
        i, j, d = self.closest_pair()
        if d < min_separation:
            raise CoincidentEmittersError(i, j, d)

    def transformed(self, angle: float = 0.0, shift: Sequence[float] = (0.0, 0.0), reflect: bool = False) -> "EmitterConfiguration":
        """Rigid motion: optional mirror y -> -y, rotation by angle, then translation."""
        pts = np.array(self.positions, dtype=float)
        if reflect:
            pts[:, 1] = -pts[:, 1]
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        pts = pts @ rot.T + np.asarray(shift, dtype=float)
        return EmitterConfiguration(pts)

    def config_hash(self) -> str:
        digest = hashlib.sha256(np.ascontiguousarray(self.positions, dtype="<f8").tobytes())
        return digest.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class EffectiveHamiltonian:
    matrix: np.ndarray
    polarization: Polarization
    config_hash: str = ""

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])


@dataclass(frozen=True, eq=False)
class CollectiveMode:
    shift: float
    decay: float
    wavefunction: np.ndarray


@dataclass(frozen=True, eq=False)
class CollectiveModeSet:
    modes: tuple[CollectiveMode, ...]

    def __len__(self) -> int:
        return len(self.modes)

    def __getitem__(self, index: int) -> CollectiveMode:
        return self.modes[index]

    @property
    def decays(self) -> np.ndarray:
        return np.array([m.decay for m in self.modes])

    @property
    def shifts(self) -> np.ndarray:
        return np.array([m.shift for m in self.modes])


class MinDecay(NamedTuple):
    gamma_min: float
    mode_index: int


class AtomAmplitude(NamedTuple):
    mode_index: int
    atom: int
    x: float
    y: float
    weight: float
    phase: float


def green_coupling(x, pol: Polarization):
    """Dimensionless pair coupling H_ij at reduced separation x = k0 * r.

    Accepts a scalar or an array of separations; both polarizations depend on
    the in-plane distance only.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0.0)):
        raise ValueError(f"Coupling needs positive separation, got {x!r}")
    inv = 1.0 / arr
    transverse = inv + 1j * inv**2 - inv**3
    if pol is Polarization.SIGMA_Z:
        scalar = transverse
    else:
        longitudinal = inv + 3j * inv**2 - 3.0 * inv**3
        scalar = transverse - 0.5 * longitudinal
    g = -0.75 * np.exp(1j * arr) * scalar
    if g.ndim == 0:
        return complex(g)
    return g


def dyadic_green(r_vec: Sequence[float], k: float = K0) -> np.ndarray:
    """Free-space dyadic Green's tensor G(R) with Im[e.G(0).e] = k/(6 pi)."""
    r_vec = np.asarray(r_vec, dtype=float).reshape(3)
    r = float(np.linalg.norm(r_vec))
    if r <= 0.0:
        raise ValueError("Green's tensor is singular at R = 0")
    r_hat = r_vec / r
    kr = k * r
    a = 1.0 + 1j / kr - 1.0 / kr**2
    b = -1.0 - 3j / kr + 3.0 / kr**2
    prefactor = np.exp(1j * kr) / (4.0 * math.pi * r)
    return prefactor * (a * np.eye(3) + b * np.outer(r_hat, r_hat))


def dyadic_coupling(r_vec: Sequence[float], pol: Polarization, k: float = K0) -> complex:
    """-(3 pi / k) e_d* . G . e_d, evaluated from the full tensor."""
    r = np.zeros(3)
    r[: len(r_vec)] = np.asarray(r_vec, dtype=float)
    e = pol.unit_vector
    return complex(-(3.0 * math.pi / k) * (e.conj() @ dyadic_green(r, k) @ e))


def pair_decays(r: float, pol: Polarization = Polarization.SIGMA_Z) -> tuple[float, float]:
    """Analytic (subradiant, superradiant) decays of an isolated pair."""
    g = green_coupling(K0 * r, pol)
    delta = -2.0 * g.imag
    return 1.0 - abs(delta), 1.0 + abs(delta)


def build_hamiltonian(cfg: EmitterConfiguration, pol: Polarization) -> EffectiveHamiltonian:
    cfg.check_separations()
    n = cfg.n
    matrix = np.zeros((n, n), dtype=complex)
    np.fill_diagonal(matrix, -0.5j)
    if n > 1:
        iu, ju = np.triu_indices(n, k=1)
        coupling = green_coupling(K0 * cfg.pairwise_distances(), pol)
        matrix[iu, ju] = coupling
        matrix[ju, iu] = coupling
    return EffectiveHamiltonian(matrix=matrix, polarization=pol, config_hash=cfg.config_hash())


def _mode_order(shifts: np.ndarray, decays: np.ndarray) -> np.ndarray:
    idx = np.arange(decays.size)
    return np.lexsort((idx, np.round(shifts, _SORT_DECIMALS), np.round(decays, _SORT_DECIMALS)))


def collective_modes(h: EffectiveHamiltonian) -> CollectiveModeSet:
    try:
        eigvals, eigvecs = linalg.eig(h.matrix, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise EigensolverError(f"Eigen-decomposition failed: {exc}", h.config_hash) from exc
    shifts = eigvals.real
    decays = -2.0 * eigvals.imag
    modes: list[CollectiveMode] = []
    for j in _mode_order(shifts, decays):
        vec = eigvecs[:, j]
        vec = vec / np.linalg.norm(vec)
        vec.setflags(write=False)
        modes.append(CollectiveMode(shift=float(shifts[j]), decay=float(decays[j]), wavefunction=vec))
    return CollectiveModeSet(tuple(modes))


def _eigenvalues(cfg: EmitterConfiguration, pol: Polarization) -> np.ndarray:
    h = build_hamiltonian(cfg, pol)
    try:
        return linalg.eigvals(h.matrix, overwrite_a=True, check_finite=False)
    except (linalg.LinAlgError, ValueError) as exc:
        raise EigensolverError(f"Eigenvalue solve failed: {exc}", h.config_hash) from exc


def decay_rates(cfg: EmitterConfiguration, pol: Polarization) -> np.ndarray:
    """All collective decay rates in eigensolver order (no eigenvectors)."""
    return -2.0 * _eigenvalues(cfg, pol).imag


def min_decay(cfg: EmitterConfiguration, pol: Polarization) -> MinDecay:
    """Objective of the optimization; mode_index indexes collective_modes order."""
    eigvals = _eigenvalues(cfg, pol)
    shifts, decays = eigvals.real, -2.0 * eigvals.imag
    j = int(np.argmin(decays))
    position = int(np.flatnonzero(_mode_order(shifts, decays) == j)[0])
    return MinDecay(float(decays[j]), position)


def _fixed_gauge(vec: np.ndarray) -> np.ndarray:
    weights = np.abs(vec)
    anchor = int(np.argmax(np.round(weights, _SORT_DECIMALS)))
    ref = vec[anchor]
    if abs(ref) == 0.0:
        return vec
    return vec * (abs(ref) / ref)


def _wrap_phase(phase: np.ndarray) -> np.ndarray:
    out = np.angle(np.exp(1j * phase))
    out[out <= -math.pi] = math.pi
    return out


def mode_report(
    modes: CollectiveModeSet,
    cfg: EmitterConfiguration,
    mode_indices: Optional[Iterable[int]] = None,
) -> list[AtomAmplitude]:
    """Per-atom |psi_i|^2 and Arg(psi_i) for the requested modes (all by default).

    The global phase is fixed by making the largest component real positive;
    phases lie in (-pi, pi].
    """
    if len(modes) != cfg.n:
        raise ValueError(f"Mode set has {len(modes)} modes but configuration has {cfg.n} emitters")
    indices = range(len(modes)) if mode_indices is None else list(mode_indices)
    rows: list[AtomAmplitude] = []
    for m in indices:
        vec = _fixed_gauge(np.asarray(modes[m].wavefunction))
        weights = np.abs(vec) ** 2
        phases = _wrap_phase(np.angle(vec))
        for i, (x, y) in enumerate(cfg.positions):
            rows.append(AtomAmplitude(int(m), i, float(x), float(y), float(weights[i]), float(phases[i])))
    return rows


def phase_spread(vec: np.ndarray, weight_floor: float = 1e-3) -> float:
    """Largest circular phase difference among components carrying weight."""
    vec = np.asarray(vec)
    mask = np.abs(vec) ** 2 >= weight_floor * float(np.max(np.abs(vec) ** 2))
    phases = np.angle(vec[mask])
    if phases.size < 2:
        return 0.0
    diff = np.abs(np.angle(np.exp(1j * (phases[:, None] - phases[None, :]))))
    return float(diff.max())


def mode_character(
    modes: CollectiveModeSet,
    cfg: EmitterConfiguration,
    index: int = 0,
    tol: float = 0.5,
) -> tuple[str, float]:
    """Label a mode in_phase, staggered (nearest neighbours out of phase) or mixed."""
    vec = np.asarray(modes[index].wavefunction)
    spread = phase_spread(vec)
    if cfg.n < 2 or spread < tol:
        return "in_phase", spread
    d = cfg.pairwise_distances()
    nearest = d.min()
    iu, ju = np.triu_indices(cfg.n, k=1)
    bonds = np.flatnonzero(d <= nearest * 1.15)
    staggered = True
    for b in bonds:
        delta = abs(np.angle(vec[iu[b]] * np.conj(vec[ju[b]])))
        if abs(delta - math.pi) > tol:
            staggered = False
            break
    return ("staggered" if staggered else "mixed"), spread
