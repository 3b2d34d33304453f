from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from ..common import setup_engine_environment
from ..transport_engine.engine import BrenierField, wasserstein_distance
from ...errors import InvalidShape, ResolutionMismatch
from ...shape_utils import DiscreteMeasure, GridDensity, match_mass

# Setup environment and logging
logger = setup_engine_environment(__file__)

DEFAULT_TIMES = 33
MASS_RTOL = 1e-6
# Tent deposition of a supersampled lattice can overshoot 1 by a few percent.
DEPOSIT_SLACK = 0.05


# Pydantic Models
class ConvexityReport(BaseModel):
    """Concavity of ρ^(-1/d) and convexity of ρ along one particle path"""
    time_points: int = Field(description="Number of time samples")
    max_g_second_difference: float = Field(description="Largest second difference of ρ^(-1/d) (≤ 1e-10 expected)")
    min_rho_second_difference: float = Field(description="Smallest second difference of ρ (≥ -1e-10 expected)")
    max_density: float = Field(description="Largest sampled density (≤ 1 + 1e-10 expected)")
    violations: List[str] = Field(default_factory=list, description="Failed checks")
    passed: bool = Field(description="No violations")


class GeodesicPropertyReport(BaseModel):
    """d_W(μ_s, μ_t) against (t − s)·d_W(μ_0, μ_1)"""
    reference_distance: float = Field(description="d_W(μ_0, μ_1)")
    pairs: List[Tuple[float, float, float]] = Field(description="(s, t, ratio) per sampled pair")
    delta: float = Field(description="Relative tolerance")
    worst_deviation: float = Field(description="max |ratio − 1|")
    passed: bool = Field(description="All ratios within tolerance")


class CharacteristicReport(BaseModel):
    """How far the rasterized path is from a characteristic function"""
    max_defect: float = Field(description="max over frames of ‖ρ_t(1 − ρ_t)‖_∞")
    smear_cells: List[int] = Field(description="Cells with value strictly between 0 and 1, per frame")
    boundary_cells: List[int] = Field(description="Support boundary crossings of the rounded indicator, per frame")
    within_smear: bool = Field(description="Intermediate cells never exceed two per boundary crossing")


class DepositionReport(BaseModel):
    l1_gap: float = Field(description="∫|ρ_a − ρ_b|")
    perimeter: float = Field(description="Perimeter estimate of the reference density")
    bound: float = Field(description="2·h·perimeter")
    passed: bool = Field(description="Gap below bound")


# Domain Types
@dataclass(frozen=True)
class ParticlePathSample:
    z: np.ndarray
    eigvals: np.ndarray
    frame: np.ndarray
    velocity: np.ndarray


@dataclass(frozen=True)
class PathFrame:
    """
    Lagrangian snapshot: particle positions, velocities and masses at one time.

    ``pressure`` is only set for incompressible (unit density) flows, where the
    particle mass doubles as its volume.
    """

    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    pressure: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "positions": self.positions,
            "velocities": self.velocities,
            "masses": self.masses,
            "pressure": self.pressure,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PathFrame":
        pressure = data.get("pressure")
        return cls(
            np.asarray(data["positions"], dtype=float),
            np.asarray(data["velocities"], dtype=float),
            np.asarray(data["masses"], dtype=float),
            None if pressure is None else np.asarray(pressure, dtype=float),
        )


@dataclass(frozen=True)
class DensityPath:
    """Time-sampled path stored particle-first; densities are rasterized on demand."""

    times: np.ndarray
    frames: Tuple[PathFrame, ...]
    labels: Optional[np.ndarray] = None
    action: float = field(default=None)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size != len(self.frames):
            raise InvalidShape(f"{times.size} times but {len(self.frames)} frames")
        if times.size and (np.any(np.diff(times) < 0) or times[0] < -1e-12 or times[-1] > 1 + 1e-12):
            raise InvalidShape("Path times must be sorted within [0, 1]")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.action is None:
            object.__setattr__(self, "action", path_action(times, self.frames))

    @property
    def dimension(self) -> int:
        return self.frames[0].positions.shape[1]

    @property
    def size(self) -> int:
        return self.frames[0].positions.shape[0]

    def masses(self) -> np.ndarray:
        return np.array([frame.masses.sum() for frame in self.frames])

    def mass_drift(self) -> float:
        m = self.masses()
        return float(np.max(np.abs(m - m[0])) / m[0])

    def measure(self, index: int) -> DiscreteMeasure:
        frame = self.frames[index]
        keep = frame.masses > 0
        return DiscreteMeasure(frame.positions[keep], frame.masses[keep])

    def density(self, index: int, grid: GridDensity) -> GridDensity:
        frame = self.frames[index]
        return bounded_density(deposit(frame.positions, frame.masses, grid), grid)

    def velocity_on_grid(self, index: int, grid: GridDensity) -> Tuple[np.ndarray, np.ndarray]:
        """(cell centers, velocity) at occupied cells; momentum over density, never at vacuum."""
        frame = self.frames[index]
        rho = deposit(frame.positions, frame.masses, grid).reshape(-1)
        momentum = np.stack(
            [deposit(frame.positions, frame.masses * frame.velocities[:, j], grid).reshape(-1)
             for j in range(self.dimension)],
            axis=1,
        )
        occupied = rho > 0
        return grid.cell_centers()[occupied], momentum[occupied] / rho[occupied, None]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "times": self.times,
            "action": self.action,
            "labels": self.labels,
            "frames": [frame.to_dict() for frame in self.frames],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DensityPath":
        labels = data.get("labels")
        return cls(
            np.asarray(data["times"], dtype=float),
            tuple(PathFrame.from_dict(f) for f in data["frames"]),
            None if labels is None else np.asarray(labels, dtype=float),
            None if data.get("action") is None else float(data["action"]),
        )


def path_action(times: np.ndarray, frames: Sequence[PathFrame]) -> float:
    """Trapezoid in time of ∫ρ|v|² = Σ m|v|²."""
    kinetic = np.array([np.sum(f.masses * np.sum(f.velocities**2, axis=1)) for f in frames])
    if kinetic.size < 2:
        return 0.0
    return float(np.trapezoid(kinetic, times))


# =======================
# Deposition
# =======================

def covering_grid(points: np.ndarray, cell_size: float, padding: int = 2) -> GridDensity:
    """Empty grid aligned to multiples of cell_size that contains every point with padding."""
    pts = np.atleast_2d(points)
    lo = np.floor(pts.min(axis=0) / cell_size).astype(int) - padding
    hi = np.ceil(pts.max(axis=0) / cell_size).astype(int) + padding
    return GridDensity(lo * cell_size, cell_size, np.zeros(tuple(int(n) for n in hi - lo)))


def deposit(points: np.ndarray, masses: np.ndarray, grid: GridDensity) -> np.ndarray:
    """
    Tent-kernel (cloud-in-cell) deposition of particle masses, returned as densities.

    Mass-exact: every particle's mass is split over the 2^d surrounding cell
    centers with weights summing to one.

    Raises:
        ResolutionMismatch: If a particle's kernel reaches outside the grid
    """
    pts = np.atleast_2d(points)
    d = grid.dimension
    if pts.shape[1] != d:
        raise ResolutionMismatch(f"Particles are {pts.shape[1]}-dimensional, grid is {d}-dimensional")
    dims = np.asarray(grid.dims)
    u = (pts - grid.origin) / grid.cell_size - 0.5
    base = np.floor(u).astype(int)
    frac = u - base
    if np.any(base < 0) or np.any(base + 1 > dims - 1):
        raise ResolutionMismatch("Deposition kernel leaves the grid box; enlarge the grid")
    total = np.zeros(int(np.prod(dims)))
    for corner in np.ndindex(*([2] * d)):
        offset = np.asarray(corner)
        weight = np.prod(np.where(offset == 1, frac, 1.0 - frac), axis=1)
        flat = np.ravel_multi_index(tuple((base + offset).T), tuple(dims))
        total += np.bincount(flat, weights=masses * weight, minlength=total.size)
    return total.reshape(tuple(dims)) / grid.cell_volume


def bounded_density(values: np.ndarray, grid: GridDensity, slack: float = DEPOSIT_SLACK) -> GridDensity:
    """
    Deposited densities as a GridDensity on ``grid``.

    Overshoot up to 1 + slack is clipped and its mass handed back to the
    partially filled cells, so the total mass is unchanged.

    Raises:
        ResolutionMismatch: If some value exceeds 1 + slack
    """
    peak = float(values.max()) if values.size else 0.0
    if peak > 1.0 + slack:
        raise ResolutionMismatch(f"Deposited density {peak:.4f} exceeds 1 beyond the slack {slack}")
    if peak > 1.0:
        values = match_mass(values, float(values.sum()))
    return grid.with_values(values)


def subcell_labels(rho: GridDensity, supersample: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sub-cell centers of occupied cells and their masses value·h^d / s^d."""
    centers, values = rho.occupied()
    d = rho.dimension
    offsets = ((np.arange(supersample) + 0.5) / supersample - 0.5) * rho.cell_size
    sub = np.stack(np.meshgrid(*([offsets] * d), indexing="ij"), axis=-1).reshape(-1, d)
    labels = (centers[:, None, :] + sub[None, :, :]).reshape(-1, d)
    masses = np.repeat(values * rho.cell_volume / sub.shape[0], sub.shape[0])
    return labels, masses


def perimeter_estimate(rho: GridDensity) -> float:
    total = 0.0
    for axis in range(rho.dimension):
        total += float(np.sum(np.abs(np.diff(rho.values, axis=axis))))
    return total * rho.cell_size ** (rho.dimension - 1)


def deposition_gap(reference: GridDensity, other: GridDensity) -> DepositionReport:
    """L¹ distance between two densities on the same grid against 2h·perimeter."""
    if not reference.same_grid(other):
        raise ResolutionMismatch("Densities live on different grids")
    gap = float(np.sum(np.abs(reference.values - other.values)) * reference.cell_volume)
    perimeter = perimeter_estimate(reference)
    bound = 2.0 * reference.cell_size * perimeter
    return DepositionReport(l1_gap=gap, perimeter=perimeter, bound=bound, passed=gap < bound)


# =======================
# Particle Paths
# =======================

def interpolate_position(field_: BrenierField, z_index: int, t: float) -> np.ndarray:
    """T_t(z) = (1 − t)z + t·T(z)."""
    z = field_.points[z_index]
    return (1.0 - t) * z + t * field_.images[z_index]


def interpolation_map(field_: BrenierField, t: float, labels: Optional[np.ndarray] = None) -> np.ndarray:
    if labels is None:
        return (1.0 - t) * field_.points + t * field_.images
    images, _, _ = field_.evaluate(labels)
    return (1.0 - t) * labels + t * images


def particle_sample(field_: BrenierField, z_index: int) -> ParticlePathSample:
    return ParticlePathSample(
        z=field_.points[z_index].copy(),
        eigvals=field_.eigvals[z_index].copy(),
        frame=field_.frames[z_index].copy(),
        velocity=field_.images[z_index] - field_.points[z_index],
    )


def _eigvals(sample: Union[ParticlePathSample, np.ndarray]) -> np.ndarray:
    if isinstance(sample, ParticlePathSample):
        return sample.eigvals
    return np.asarray(sample, dtype=float)


def density_along_path(sample: Union[ParticlePathSample, np.ndarray], t):
    """ρ(T_t(z), t) = Π_j (1 − t + tλ_j)⁻¹; t may be an array."""
    lam = _eigvals(sample)
    t_arr = np.asarray(t, dtype=float)
    factors = 1.0 - t_arr[..., None] + t_arr[..., None] * lam
    rho = 1.0 / np.prod(factors, axis=-1)
    return float(rho) if rho.ndim == 0 else rho


def divergence_along_path(sample: Union[ParticlePathSample, np.ndarray], t):
    """∇·v(T_t(z), t) = Σ_j (λ_j − 1)/(1 − t + tλ_j)."""
    lam = _eigvals(sample)
    t_arr = np.asarray(t, dtype=float)
    div = np.sum((lam - 1.0) / (1.0 - t_arr[..., None] + t_arr[..., None] * lam), axis=-1)
    return float(div) if div.ndim == 0 else div


def divergence_fd_gap(sample: Union[ParticlePathSample, np.ndarray], t: float, step: float = 1e-5) -> float:
    """|∇·v − (−d/dt log ρ)| with a central difference in t."""
    lo, hi = max(t - step, 0.0), min(t + step, 1.0)
    fd = -(np.log(density_along_path(sample, hi)) - np.log(density_along_path(sample, lo))) / (hi - lo)
    return abs(divergence_along_path(sample, t) - fd)


def _second_differences(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    left = np.diff(values)[:-1] / np.diff(times)[:-1]
    right = np.diff(values)[1:] / np.diff(times)[1:]
    mean_step = 0.5 * (times[2:] - times[:-2])
    return (right - left) * mean_step


def convexity_check(
    sample: Union[ParticlePathSample, np.ndarray],
    time_grid: Optional[Sequence[float]] = None,
    tol: float = 1e-10,
) -> ConvexityReport:
    """
    Discrete concavity of g = ρ^(-1/d), convexity of ρ and ρ ≤ 1 along a particle path.

    Second differences are scaled by the mean step, so they coincide with the
    usual g[i-1] − 2g[i] + g[i+1] on uniform grids.
    """
    times = np.linspace(0.0, 1.0, DEFAULT_TIMES) if time_grid is None else np.asarray(time_grid, dtype=float)
    if times.size < 3:
        raise InvalidShape("convexity_check needs at least 3 time points")
    lam = _eigvals(sample)
    rho = density_along_path(lam, times)
    g = rho ** (-1.0 / lam.size)
    g2 = _second_differences(g, times)
    r2 = _second_differences(rho, times)
    violations = []
    if g2.max() > tol:
        violations.append(f"ρ^(-1/d) not concave: second difference {g2.max():.3e}")
    if r2.min() < -tol:
        violations.append(f"ρ not convex: second difference {r2.min():.3e}")
    if rho.max() > 1.0 + tol:
        violations.append(f"ρ exceeds 1: {rho.max():.12g}")
    return ConvexityReport(
        time_points=int(times.size),
        max_g_second_difference=float(g2.max()),
        min_rho_second_difference=float(r2.min()),
        max_density=float(rho.max()),
        violations=violations,
        passed=not violations,
    )


# =======================
# Displacement Interpolant
# =======================

def displacement_interpolant(
    field_: BrenierField,
    rho0: Optional[GridDensity] = None,
    times: Optional[Sequence[float]] = None,
    supersample: int = 2,
) -> DensityPath:
    """
    Lagrangian DensityPath of the displacement interpolant.

    With ``rho0`` the particles are sub-cell labels of the source density mapped
    by the continuous extension of the field; otherwise the field samples are used.
    Velocities T(z) − z are shared by every frame.
    """
    times = np.linspace(0.0, 1.0, DEFAULT_TIMES) if times is None else np.asarray(times, dtype=float)
    if rho0 is None:
        labels, masses = field_.points, field_.weights
        images = field_.images
    else:
        labels, masses = subcell_labels(rho0, supersample)
        images, _, _ = field_.evaluate(labels)
    velocities = images - labels
    frames = tuple(PathFrame(labels + t * velocities, velocities, masses) for t in times)
    path = DensityPath(times, frames, labels=labels)
    logger.info(f"Displacement interpolant: {labels.shape[0]} particles, {times.size} frames, action {path.action:.6g}")
    return path


def pushforward_density(
    field_: BrenierField,
    rho0: GridDensity,
    t: float,
    supersample: int = 4,
    grid: Optional[GridDensity] = None,
) -> GridDensity:
    """
    Rasterized pushforward of rho0 under T_t.

    Each occupied cell is split into supersample^d sub-particles, moved by the
    continuous extension of T_t and deposited with a tent kernel of
    width h on ``grid`` (default: a grid of rho0's cell size covering the image).

    Raises:
        ResolutionMismatch: On dimension or cell-size mismatch, or when the
            deposited density exceeds 1 beyond the tent-kernel slack
    """
    if field_.dimension != rho0.dimension:
        raise ResolutionMismatch(f"Field is {field_.dimension}-dimensional, density is {rho0.dimension}-dimensional")
    if grid is not None and grid.cell_size != rho0.cell_size:
        raise ResolutionMismatch(f"Output cell size {grid.cell_size} differs from input {rho0.cell_size}")
    labels, masses = subcell_labels(rho0, supersample)
    positions = interpolation_map(field_, t, labels)
    if grid is None:
        grid = covering_grid(np.vstack([positions, rho0.cell_centers()]), rho0.cell_size)
    values = deposit(positions, masses, grid)
    try:
        out = bounded_density(values, grid)
    except InvalidShape as e:
        raise ResolutionMismatch(f"Pushforward at t={t} is not a valid density: {e.message}")
    drift = abs(out.mass - rho0.mass) / rho0.mass
    if drift > MASS_RTOL:
        logger.warning(f"Pushforward mass drift {drift:.3e} at t={t}")
    return out


def geodesic_property_check(
    field_: BrenierField,
    times: Sequence[float],
    delta: float = 0.03,
    max_pairs: int = 10,
    seed: int = 0,
) -> GeodesicPropertyReport:
    """Check d_W(μ_s, μ_t) = (t − s)·d_W(μ_0, μ_1) on sampled time pairs."""
    times = sorted(float(t) for t in times)
    if len(times) < 2:
        raise InvalidShape("geodesic_property_check needs at least 2 times")
    w = field_.weights

    def measure(t):
        return DiscreteMeasure(interpolation_map(field_, t), w)

    reference = wasserstein_distance(measure(0.0), measure(1.0))
    pairs = [(s, t) for i, s in enumerate(times) for t in times[i + 1:] if t > s]
    if len(pairs) > max_pairs:
        rng = np.random.default_rng(seed)
        pairs = [pairs[k] for k in sorted(rng.choice(len(pairs), max_pairs, replace=False))]
    results = []
    for s, t in pairs:
        dist = wasserstein_distance(measure(s), measure(t))
        ratio = dist / ((t - s) * reference) if reference > 0 else 1.0
        results.append((s, t, float(ratio)))
    worst = max((abs(r - 1.0) for _, _, r in results), default=0.0)
    return GeodesicPropertyReport(
        reference_distance=reference, pairs=results, delta=delta,
        worst_deviation=worst, passed=worst <= delta,
    )


def characteristic_defect(path: DensityPath, grid: GridDensity, tol: float = 1e-9) -> CharacteristicReport:
    """
    Distance of each rasterized frame from a characteristic function.

    Reports max_t ‖ρ_t(1 − ρ_t)‖_∞ and counts intermediate cells against
    boundary crossings of the rounded indicator.
    """
    defects, smear, boundary = [], [], []
    for index in range(len(path.frames)):
        values = path.density(index, grid).values
        defects.append(float(np.max(values * (1.0 - values))))
        smear.append(int(np.sum((values > tol) & (values < 1.0 - tol))))
        indicator = values >= 0.5
        crossings = sum(int(np.sum(np.diff(indicator.astype(int), axis=axis) != 0)) for axis in range(values.ndim))
        boundary.append(crossings)
    within = all(s <= 2 * max(b, 1) for s, b in zip(smear, boundary))
    return CharacteristicReport(
        max_defect=max(defects), smear_cells=smear, boundary_cells=boundary, within_smear=within,
    )
