from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage

from ..common import setup_engine_environment
from ..interpolation_engine.engine import DEPOSIT_SLACK, deposit, subcell_labels
from ..transport_engine.engine import BrenierField
from ..weak_euler_engine.engine import TestFunctionBank
from ...errors import InvalidShape, QuadratureMismatch
from ...shape_utils import GridDensity

# Setup environment and logging
logger = setup_engine_environment(__file__)

PARTITION_TOL = 1e-9
DIVERGENCE_TOL = 1e-10
MAX_SUPERSAMPLE = 16


# Pydantic Models
class RelaxedActionReport(BaseModel):
    """Kinetic energy of a two-fluid relaxed state"""
    action: float = Field(description="K(c, m); inf when any cell is infeasible")
    phase_actions: List[float] = Field(description="Contribution of each fluid")
    infinite: bool = Field(description="Some cell has khat = +inf")
    infinite_cells: int
    momentum_without_concentration: int = Field(description="Cells with |m| > 0 and c ≤ 0 in a finite-density fluid")
    structure_ok: bool = Field(description="Finite action implies m vanishes where c does")


class ConstraintReport(BaseModel):
    """Weak transport and partition constraints per test function"""
    partition: List[float] = Field(description="|∫∫q(1 − c₀ − c₁)|")
    transport: List[List[float]] = Field(description="Per fluid |ρ̂[∫cq]₀¹ − ∫∫(ρ̂c∂_tq + m·∇q)|")
    total: List[float]
    max_total: float


class MinimalityReport(BaseModel):
    """Sampled local minimality of a relaxed state"""
    probes: int
    rejected: int
    amplitude: float
    base_action: float
    gaps: List[float] = Field(description="K(perturbed) − K(base) per accepted probe")
    min_gap: Optional[float] = None
    max_divergence: float = Field(description="Largest discrete divergence of an accepted perturbation")
    max_constraint_change: float = Field(description="Largest change of the weak constraint residual")
    tolerance: float
    passed: bool


class ActionIdentityReport(BaseModel):
    """Relaxed action of an interpolant state against half its transport cost"""
    action: float = Field(description="K(c, m)")
    half_transport_cost: float = Field(description="½ Σ m|T(z) − z|² over the deposited labels")
    relative_gap: float
    tolerance: float
    passed: bool


# =======================
# Legendre Transform
# =======================

def khat(x: float, y, rho_hat: float) -> float:
    """
    Legendre transform of the indicator of {(a, b) : a + ½ρ̂|b|² ≤ 0}:
    ½|y|²/(ρ̂x) if y ≠ 0 and ρ̂x > 0; 0 if y = 0 and x ≥ 0; +∞ otherwise.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    norm_sq = float(y @ y)
    if norm_sq != 0.0:
        return 0.5 * norm_sq / (rho_hat * x) if rho_hat * x > 0 else float("inf")
    return 0.0 if x >= 0 else float("inf")


def khat_field(c: np.ndarray, m: np.ndarray, rho_hat: float, slack: float = 0.0) -> np.ndarray:
    """
    Vectorized khat over cells: c of shape S, m of shape S + (d,).

    Concentrations in [−slack, 0) count as vacuum (deposition overshoot of the
    complementary fluid).
    """
    c = np.asarray(c, dtype=float)
    norm_sq = np.sum(np.asarray(m, dtype=float) ** 2, axis=-1)
    out = np.full(c.shape, np.inf)
    moving = norm_sq > 0
    positive = rho_hat * c > 0
    ok = moving & positive
    out[ok] = 0.5 * norm_sq[ok] / (rho_hat * c[ok])
    out[~moving & (c >= -slack)] = 0.0
    return out


# =======================
# Relaxed States
# =======================

@dataclass(frozen=True)
class RelaxedState:
    """
    Two-fluid concentrations and momenta on a space grid × time samples.

    ``c`` has shape (2, T, *dims) and ``m`` shape (2, T, *dims, d). The
    prescribed endpoint concentrations of fluid 1 default to the state's first
    and last slices; fluid 0 takes the complement.
    """

    grid: GridDensity
    times: np.ndarray
    c: np.ndarray
    m: np.ndarray
    rho_hat: Tuple[float, float] = (0.0, 1.0)
    start: Optional[np.ndarray] = field(default=None)
    end: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        c = np.asarray(self.c, dtype=float)
        m = np.asarray(self.m, dtype=float)
        shape = (2, times.size) + self.grid.dims
        if c.shape != shape:
            raise InvalidShape(f"Concentrations have shape {c.shape}, expected {shape}")
        if m.shape != shape + (self.grid.dimension,):
            raise InvalidShape(f"Momenta have shape {m.shape}, expected {shape + (self.grid.dimension,)}")
        if np.any(np.diff(times) <= 0):
            raise InvalidShape("State times must be strictly increasing")
        if np.max(np.abs(c.sum(axis=0) - 1.0)) > PARTITION_TOL:
            raise InvalidShape("Concentrations must sum to one in every cell")
        if self.rho_hat[0] < 0 or self.rho_hat[1] <= self.rho_hat[0]:
            raise InvalidShape(f"Fluid densities must satisfy ρ̂₁ > ρ̂₀ ≥ 0, got {self.rho_hat}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "start", c[1, 0].copy() if self.start is None else np.asarray(self.start, dtype=float))
        object.__setattr__(self, "end", c[1, -1].copy() if self.end is None else np.asarray(self.end, dtype=float))

    @classmethod
    def single_fluid(
        cls,
        grid: GridDensity,
        times: np.ndarray,
        c1: np.ndarray,
        m1: np.ndarray,
        rho_hat: Tuple[float, float] = (0.0, 1.0),
        **kwargs,
    ) -> "RelaxedState":
        """State with c₀ = 1 − c₁ and m₀ = 0."""
        c1 = np.asarray(c1, dtype=float)
        m1 = np.asarray(m1, dtype=float)
        return cls(grid, times, np.stack([1.0 - c1, c1]), np.stack([np.zeros_like(m1), m1]), rho_hat, **kwargs)

    def with_momentum(self, m1: np.ndarray) -> "RelaxedState":
        m = self.m.copy()
        m[1] = m1
        return RelaxedState(self.grid, self.times, self.c, m, self.rho_hat, self.start, self.end)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": {"origin": self.grid.origin, "cell_size": self.grid.cell_size, "dims": list(self.grid.dims)},
            "times": self.times,
            "c": self.c,
            "m": self.m,
            "rho_hat": list(self.rho_hat),
            "start": self.start,
            "end": self.end,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RelaxedState":
        g = data["grid"]
        grid = GridDensity(np.asarray(g["origin"], dtype=float), float(g["cell_size"]), np.zeros(tuple(g["dims"])))
        return cls(
            grid, np.asarray(data["times"], dtype=float), np.asarray(data["c"], dtype=float),
            np.asarray(data["m"], dtype=float), tuple(float(v) for v in data["rho_hat"]),
            np.asarray(data["start"], dtype=float), np.asarray(data["end"], dtype=float),
        )


def label_supersample(field_: BrenierField, supersample: int = 4) -> int:
    """Sub-cells per axis so labels moved by T stay at most half a cell apart."""
    needed = int(np.ceil(2.0 * float(field_.lambda_hi.max()) - 1e-9)) if field_.size else 1
    s = max(int(supersample), needed)
    if s > MAX_SUPERSAMPLE:
        logger.warning(f"Map stretches by {field_.lambda_hi.max():.3g}; capping labels at {MAX_SUPERSAMPLE} per axis")
        s = MAX_SUPERSAMPLE
    return s


def interpolant_labels(
    field_: BrenierField,
    rho0: GridDensity,
    supersample: int = 4,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(labels, masses, velocities T(z) − z) of rho0's sub-cells under the field's continuous extension."""
    labels, masses = subcell_labels(rho0, label_supersample(field_, supersample))
    images, _, _ = field_.evaluate(labels)
    return labels, masses, images - labels


def interpolant_state(
    field_: BrenierField,
    rho0: GridDensity,
    grid: GridDensity,
    times: Optional[Sequence[float]] = None,
    supersample: int = 4,
) -> RelaxedState:
    """
    Relaxed state of the displacement interpolant: c₁ = ρ_t and m₁ = ρ_t v_t by
    tent deposition of sub-cell labels moved by T_t, fluid 0 at zero density.

    Labels follow the continuous extension of the field and are refined past
    ``supersample`` when the map stretches them beyond half a cell.
    """
    if grid.cell_size != rho0.cell_size or grid.dimension != rho0.dimension:
        raise QuadratureMismatch("Grid and source density must share cell size and dimension")
    times = np.linspace(0.0, 1.0, 17) if times is None else np.asarray(times, dtype=float)
    labels, masses, velocities = interpolant_labels(field_, rho0, supersample)
    c1, m1 = [], []
    for t in times:
        positions = labels + float(t) * velocities
        c1.append(deposit(positions, masses, grid))
        m1.append(np.stack([deposit(positions, masses * velocities[:, j], grid) for j in range(grid.dimension)], axis=-1))
    c1 = np.asarray(c1)
    peak = float(c1.max())
    if peak > 1.0 + DEPOSIT_SLACK:
        logger.warning(f"Interpolant density reaches {peak:.4f}, beyond the deposition slack")
    logger.info(f"Interpolant state: {labels.shape[0]} labels, {times.size} times, peak density {peak:.4f}")
    return RelaxedState.single_fluid(grid, times, c1, np.asarray(m1))


def action_identity_check(
    state: RelaxedState,
    field_: BrenierField,
    rho0: GridDensity,
    supersample: int = 4,
    rtol: float = 1e-4,
) -> ActionIdentityReport:
    """
    K(state) against ½ Σ m|T(z) − z|² over the labels interpolant_state deposits.

    The gap of a deposited interpolant shrinks like h² (velocity spread within
    a cell), so the 1e-4 default needs a fine grid.
    """
    _, masses, velocities = interpolant_labels(field_, rho0, supersample)
    half_cost = 0.5 * float(np.sum(masses * np.sum(velocities**2, axis=1)))
    action = relaxed_action(state).action
    gap = abs(action - half_cost) / half_cost if half_cost > 0 else abs(action)
    report = ActionIdentityReport(
        action=action, half_transport_cost=half_cost, relative_gap=gap, tolerance=rtol, passed=bool(gap <= rtol),
    )
    logger.info(f"Relaxed action {action:.8g} vs half transport cost {half_cost:.8g} (relative gap {gap:.3e})")
    return report


def relaxed_action(state: RelaxedState, slack: float = DEPOSIT_SLACK) -> RelaxedActionReport:
    """K(c, m) = Σ_i ∫∫ khat(c_i, m_i; ρ̂_i): midpoint in space, trapezoid in time."""
    phases, infinite_cells, orphan = [], 0, 0
    for i in range(2):
        density = khat_field(state.c[i], state.m[i], state.rho_hat[i], slack)
        bad = ~np.isfinite(density)
        infinite_cells += int(np.sum(bad))
        if state.rho_hat[i] > 0:
            orphan += int(np.sum((np.sum(state.m[i] ** 2, axis=-1) > 0) & (state.c[i] <= 0)))
        if np.any(bad):
            phases.append(float("inf"))
            continue
        per_time = density.reshape(state.times.size, -1).sum(axis=1) * state.grid.cell_volume
        phases.append(float(np.trapezoid(per_time, state.times)))
    infinite = infinite_cells > 0
    if infinite:
        logger.warning(f"Relaxed action is infinite on {infinite_cells} cells")
    return RelaxedActionReport(
        action=float(sum(phases)), phase_actions=phases, infinite=infinite, infinite_cells=infinite_cells,
        momentum_without_concentration=orphan, structure_ok=infinite or orphan == 0,
    )


def constraint_residual(state: RelaxedState, bank: TestFunctionBank) -> ConstraintReport:
    """
    Weak-form constraints per test function q (used as p and as φ_i):

        ∫∫ q(1 − Σc_i) = 0,   ρ̂_i[∫c_i q]₀¹ − ∫∫(ρ̂_i c_i ∂_t q + m_i·∇q) = 0,

    with the endpoint terms taken from the prescribed endpoint concentrations.
    """
    if bank.dimension != state.grid.dimension:
        raise QuadratureMismatch("Bank and state dimensions differ")
    centers = state.grid.cell_centers()
    vol = state.grid.cell_volume
    n_t = state.times.size
    partition = np.zeros((bank.size, n_t))
    transport = np.zeros((2, bank.size, n_t))
    for k, t in enumerate(state.times):
        q, qt, gq = bank.evaluate(centers, float(t))
        gap = 1.0 - state.c[:, k].sum(axis=0).reshape(-1)
        partition[:, k] = q @ gap * vol
        for i in range(2):
            c = state.c[i, k].reshape(-1)
            m = state.m[i, k].reshape(-1, state.grid.dimension)
            transport[i, :, k] = (state.rho_hat[i] * qt @ c + np.einsum("fnd,nd->f", gq, m)) * vol
    q0 = bank.evaluate(centers, float(state.times[0]))[0]
    q1 = bank.evaluate(centers, float(state.times[-1]))[0]
    ends = [(1.0 - state.start.reshape(-1), 1.0 - state.end.reshape(-1)), (state.start.reshape(-1), state.end.reshape(-1))]
    per_fluid = []
    for i, (c_start, c_end) in enumerate(ends):
        boundary = state.rho_hat[i] * (q1 @ c_end - q0 @ c_start) * vol
        per_fluid.append(np.abs(boundary - np.trapezoid(transport[i], state.times, axis=1)))
    part = np.abs(np.trapezoid(partition, state.times, axis=1))
    total = part + per_fluid[0] + per_fluid[1]
    return ConstraintReport(
        partition=part.tolist(), transport=[r.tolist() for r in per_fluid],
        total=total.tolist(), max_total=float(total.max(initial=0.0)),
    )


# =======================
# Minimality Probes
# =======================

def _central(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Central difference with zero on the outermost layer."""
    out = np.zeros_like(f)
    lead = [slice(None)] * f.ndim
    back = [slice(None)] * f.ndim
    mid = [slice(None)] * f.ndim
    lead[axis], back[axis], mid[axis] = slice(2, None), slice(None, -2), slice(1, -1)
    out[tuple(mid)] = (f[tuple(lead)] - f[tuple(back)]) / (2.0 * h)
    return out


def discrete_divergence(m: np.ndarray, h: float) -> np.ndarray:
    """Central-difference divergence of a field of shape S + (d,)."""
    return sum(_central(m[..., j], j, h) for j in range(m.shape[-1]))


def _curl_field(potential: np.ndarray, h: float) -> np.ndarray:
    """Divergence-free field from a potential: rotated gradient (d = 2) or curl (d = 3)."""
    if potential.ndim == 2:
        return np.stack([_central(potential, 1, h), -_central(potential, 0, h)], axis=-1)
    a = potential
    return np.stack([
        _central(a[..., 2], 1, h) - _central(a[..., 1], 2, h),
        _central(a[..., 0], 2, h) - _central(a[..., 2], 0, h),
        _central(a[..., 1], 0, h) - _central(a[..., 0], 1, h),
    ], axis=-1)


def _random_potential(state: RelaxedState, rng: np.random.Generator, interior: np.ndarray) -> np.ndarray:
    """Smooth bump potential centered on a random interior cell, zero off ``interior`` and on the two outer grid layers."""
    d = state.grid.dimension
    dims = state.grid.dims
    h = state.grid.cell_size
    centers = state.grid.cell_centers().reshape(dims + (d,))
    occupied = np.argwhere(interior)
    center = centers[tuple(occupied[rng.integers(len(occupied))])]
    extent = h * max(3.0, 0.15 * min(dims))
    width = extent * rng.uniform(0.5, 1.0)
    s2 = np.sum((centers - center) ** 2, axis=-1) / width**2
    bump = np.where((s2 < 1.0) & interior, (1.0 - s2) ** 4, 0.0)
    for axis in range(d):
        edge = [slice(None)] * d
        edge[axis] = slice(0, 2)
        bump[tuple(edge)] = 0.0
        edge[axis] = slice(-2, None)
        bump[tuple(edge)] = 0.0
    if d == 2:
        return bump * rng.normal()
    return bump[..., None] * rng.normal(size=3)


def minimality_probe(
    state: RelaxedState,
    perturbations: int = 100,
    amplitude: float = 0.1,
    seed: int = 0,
    tolerance: float = 1e-4,
    bank: Optional[TestFunctionBank] = None,
    max_attempts: Optional[int] = None,
) -> MinimalityReport:
    """
    Sampled minimality of K at ``state``: momentum perturbations that are
    discretely divergence-free and supported where fluid 1 is present keep
    every constraint, so K must not drop below K(state) − tolerance.

    The perturbation of probe k is a(t)·curl ψ_k with max magnitude
    ``amplitude``·max|m₁| and a smooth random time profile a(t). Probes with
    a nonzero divergence or touching cells without fluid 1 are rejected and
    resampled. One-dimensional states admit no such perturbation.
    """
    base = relaxed_action(state)
    d = state.grid.dimension
    if d == 1 or perturbations == 0:
        return MinimalityReport(
            probes=0, rejected=0, amplitude=amplitude, base_action=base.action, gaps=[],
            max_divergence=0.0, max_constraint_change=0.0, tolerance=tolerance, passed=True,
        )
    rng = np.random.default_rng(seed)
    h = state.grid.cell_size
    support = np.all(state.c[1] > DEPOSIT_SLACK, axis=0)
    if not np.any(support):
        raise InvalidShape("Fluid 1 occupies no cell at every time")
    # potential support one cell inside, so its curl stays where fluid 1 is
    interior = ndimage.binary_erosion(support, iterations=1, border_value=0)
    if not np.any(interior):
        raise InvalidShape("Fluid 1 support has no interior cell")
    scale = amplitude * (float(np.max(np.linalg.norm(state.m[1], axis=-1))) or 1.0)
    if bank is None:
        lo = state.grid.origin
        bank = TestFunctionBank.random(lo, lo + h * np.asarray(state.grid.dims), count=8, seed=seed)
    base_constraints = np.asarray(constraint_residual(state, bank).total)
    max_attempts = 20 * perturbations if max_attempts is None else max_attempts

    gaps, rejected, attempts = [], 0, 0
    max_div, max_change = 0.0, 0.0
    while len(gaps) < perturbations and attempts < max_attempts:
        attempts += 1
        shape = _curl_field(_random_potential(state, rng, interior), h)
        peak = float(np.max(np.linalg.norm(shape, axis=-1)))
        if peak == 0.0:
            rejected += 1
            continue
        shape *= scale / peak
        if np.any((np.linalg.norm(shape, axis=-1) > 0) & ~support):
            rejected += 1
            continue
        divergence = float(np.max(np.abs(discrete_divergence(shape, h))))
        if divergence > DIVERGENCE_TOL * max(scale / h, 1.0):
            rejected += 1
            continue
        phase, freq = rng.uniform(0, 2 * np.pi), rng.integers(1, 3)
        profile = np.sin(np.pi * freq * state.times + phase)
        perturbed = state.with_momentum(state.m[1] + profile.reshape((-1,) + (1,) * (d + 1)) * shape[None])
        change = float(np.max(np.abs(np.asarray(constraint_residual(perturbed, bank).total) - base_constraints)))
        gaps.append(relaxed_action(perturbed).action - base.action)
        max_div = max(max_div, divergence)
        max_change = max(max_change, change)
    if len(gaps) < perturbations:
        logger.warning(f"Only {len(gaps)} of {perturbations} probes accepted after {attempts} attempts")
    min_gap = min(gaps) if gaps else None
    passed = min_gap is None or min_gap >= -tolerance
    logger.info(f"Minimality probes: {len(gaps)} accepted, {rejected} rejected, min gap {min_gap}")
    return MinimalityReport(
        probes=len(gaps), rejected=rejected, amplitude=amplitude, base_action=base.action, gaps=gaps,
        min_gap=min_gap, max_divergence=max_div, max_constraint_change=max_change,
        tolerance=tolerance, passed=passed,
    )
