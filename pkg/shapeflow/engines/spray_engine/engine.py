import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import spatial
from tqdm import tqdm

from ..common import progress_enabled, setup_engine_environment
from ..droplet_engine.engine import (
    BoostedDroplet,
    DropletGeodesic,
    boosted_action,
    constant_geodesic,
    geodesic_bvp,
    scaled_geodesic,
    wasserstein_droplet_distance_sq,
)
from ..interpolation_engine.engine import DensityPath, PathFrame, characteristic_defect, covering_grid
from ..transport_engine.engine import (
    EIG_FLOOR,
    BrenierField,
    bottleneck_value,
    estimate_brenier_field,
    solve_exact,
    solve_transport,
)
from ...errors import (
    ChainBroken,
    EmptySupport,
    InvalidShape,
    MassMismatch,
    NumericalError,
    ResolutionTooCoarse,
    StallError,
)
from ...shape_utils import (
    DiscreteMeasure,
    Ellipsoid,
    GridDensity,
    ZERO_TOL,
    ball_quadrature,
    diam,
    diametral_pair,
    dist_sets,
    ellipsoid_gaps,
    quantization_block,
    rectangle_quantize,
    sample_uniform,
    unit_ball_volume,
)

# Setup environment and logging
logger = setup_engine_environment(__file__)

SHRINK = 1.0 - 1e-3
STALL_LIMIT = 100_000
CHAIN_TOL = 1e-6
# Fit standard errors allowed in the per-ball Taylor audit.
TAYLOR_NOISE = 4.0


# Pydantic Models
class RecenterReport(BaseModel):
    """sup |T| after recentering against (√3/2)·diam Ω₁"""
    shift: List[float] = Field(description="Translation applied to source and target")
    sup_norm: float = Field(description="max |T(x_i)| after the shift")
    bound: float = Field(description="(√3/2)·diam Ω₁ + slack")
    passed: bool


class PlanAuditReport(BaseModel):
    """Post-hoc audit of a ball packing"""
    balls: int = Field(description="Number of balls")
    coverage_fraction: float = Field(description="Σ|B_i| / mass(Ω₀)")
    overlapping_pairs: List[Tuple[int, int]] = Field(default_factory=list, description="Pairs with |x_i − x_j| ≤ r_i + r_j")
    inadmissible_balls: List[int] = Field(default_factory=list, description="Balls failing an admissibility inequality on re-audit")
    taylor_violations: List[int] = Field(default_factory=list, description="Balls whose sampled Taylor error exceeds ½‖D³ψ‖r² + fit noise + slack")
    max_taylor_ratio: float = Field(description="Largest sampled Taylor error over its allowance")
    passed: bool


class InjectivityReport(BaseModel):
    """Pairwise separation of droplets over sampled times"""
    time_samples: int
    pairs_checked: int = Field(description="Near pairs tested exactly, summed over times")
    analytic_violations: List[Tuple[int, int, float, float, float]] = Field(
        default_factory=list, description="(i, j, t, gap, required) below the analytic separation")
    geometric_violations: List[Tuple[int, int, float, float]] = Field(
        default_factory=list, description="(i, j, t, gap) with non-positive ellipsoid gap")
    min_geometric_gap: Optional[float] = Field(default=None, description="Smallest tested gap")
    passed: bool


class SprayActionReport(BaseModel):
    """Action accounting of a spray on covered mass"""
    total_action: float = Field(description="Σ droplet actions")
    wasserstein_sq: float = Field(description="d_W(Ω₀, Ω₁)² restricted to covered mass")
    wasserstein_sq_full: float = Field(description="d_W(Ω₀, Ω₁)² on the full sample")
    covered_mass: float = Field(description="Σ|B_i|")
    residual_mass: float = Field(description="mass(Ω₀) − covered mass")
    K: float = Field(description="d_W² + 2|Ω₀|(diam Ω₁)²")
    epsilon: float
    action_bound: float = Field(description="d_W² + Kε")
    action_ok: bool
    droplet_violations: List[int] = Field(default_factory=list, description="Droplets breaking 𝒜_i ≤ d_W(B_i,T(B_i))²(1+ε) + 2εK₁²|B_i|")
    linf_distance: Optional[float] = Field(default=None, description="Bottleneck d_∞(Ω₁^ε, Ω₁) on covered samples")
    linf_bound: float = Field(description="ε·diam Ω₁")
    linf_ok: bool
    passed: bool


class ConnectionReport(BaseModel):
    """Bookkeeping of a general-density connection"""
    rescaled: bool = Field(description="Masses were equalized by scaling the heavier density")
    shortcut: Optional[str] = Field(default=None, description="Why the displacement interpolant was returned directly")
    segments: List[str] = Field(default_factory=list, description="Segment kinds in time order")
    segment_actions: List[float] = Field(default_factory=list)
    taus: List[float] = Field(default_factory=list)
    levels: int = Field(default=0, description="Correction levels built per side")
    truncated: bool = Field(default=False, description="A correction cascade stopped early")
    truncation_gap: float = Field(default=0.0, description="√mass · last quantization diameter, per worst side")
    action: float
    wasserstein_sq: float = Field(description="d_W(ρ₀, ρ₁)² of the sample measures")
    bound: float = Field(description="d_W² + Cε reported for the path")
    within_bound: bool


# Domain Types
@dataclass(frozen=True)
class SprayPlan:
    epsilon: float
    centers: np.ndarray
    radii: np.ndarray
    images: np.ndarray
    eigvals: np.ndarray
    frames: np.ndarray
    lambda_lo: np.ndarray
    lambda_hi: np.ndarray
    d3: np.ndarray
    boosts: np.ndarray
    coverage_fraction: float
    source_mass: float
    target_diam: float
    safety_factor: float = 1.1
    shift: np.ndarray = field(default=None)

    @property
    def dimension(self) -> int:
        return self.centers.shape[1]

    @property
    def size(self) -> int:
        return self.radii.size

    @property
    def volumes(self) -> np.ndarray:
        return unit_ball_volume(self.dimension) * self.radii**self.dimension

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "centers": self.centers,
            "radii": self.radii,
            "images": self.images,
            "eigvals": self.eigvals,
            "frames": self.frames,
            "lambda_lo": self.lambda_lo,
            "lambda_hi": self.lambda_hi,
            "d3": self.d3,
            "boosts": self.boosts,
            "coverage_fraction": self.coverage_fraction,
            "source_mass": self.source_mass,
            "target_diam": self.target_diam,
            "safety_factor": self.safety_factor,
            "shift": self.shift,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SprayPlan":
        arrays = {k: np.asarray(data[k], dtype=float) for k in (
            "centers", "radii", "images", "eigvals", "frames", "lambda_lo", "lambda_hi", "d3", "boosts")}
        d = len(data["shift"]) if data.get("shift") is not None else None
        for key in ("centers", "images", "eigvals", "boosts"):
            if arrays[key].size == 0 and d:
                arrays[key] = arrays[key].reshape(0, d)
        if arrays["frames"].size == 0 and d:
            arrays["frames"] = arrays["frames"].reshape(0, d, d)
        return cls(
            epsilon=float(data["epsilon"]),
            coverage_fraction=float(data["coverage_fraction"]),
            source_mass=float(data["source_mass"]),
            target_diam=float(data["target_diam"]),
            safety_factor=float(data.get("safety_factor", 1.1)),
            shift=None if data.get("shift") is None else np.asarray(data["shift"], dtype=float),
            **arrays,
        )


@dataclass(frozen=True)
class EulerSpray:
    plan: SprayPlan
    droplets: Tuple[BoostedDroplet, ...]
    ball_indices: np.ndarray
    total_action: float
    dropped: Tuple[int, ...] = ()

    @property
    def dimension(self) -> int:
        return self.plan.dimension

    @property
    def covered_mass(self) -> float:
        return float(sum(dr.volume for dr in self.droplets))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "plan": self.plan.to_dict(),
            "droplets": [dr.to_dict() for dr in self.droplets],
            "ball_indices": self.ball_indices,
            "total_action": self.total_action,
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EulerSpray":
        droplets = tuple(BoostedDroplet.from_dict(dr) for dr in data["droplets"])
        return cls(
            SprayPlan.from_dict(data["plan"]),
            droplets,
            np.asarray(data["ball_indices"], dtype=int),
            float(data["total_action"]),
            tuple(int(i) for i in data.get("dropped", [])),
        )


# =======================
# Recentering
# =======================

def recenter_target(field_: BrenierField, slack: float = 0.0) -> np.ndarray:
    """
    Translation moving the midpoint of a diametral pair of Ω₁ to the origin.

    The same translation applies to source and target (T(x + s) = T(x) + s for
    the translated pair), so the transport cost is unchanged.

    Raises:
        EmptySupport: If the field has no target samples
    """
    if field_.size == 0:
        raise EmptySupport("No target samples")
    i, j, _ = diametral_pair(field_.images)
    shift = -0.5 * (field_.images[i] + field_.images[j])
    report = recenter_bound_check(field_, shift, slack)
    if not report.passed:
        logger.warning(f"Recentered sup|T| = {report.sup_norm:.6g} exceeds {report.bound:.6g}")
    return shift


def recenter_bound_check(field_: BrenierField, shift: np.ndarray, slack: float = 0.0) -> RecenterReport:
    _, _, diameter = diametral_pair(field_.images)
    sup = float(np.max(np.linalg.norm(field_.images + shift, axis=1)))
    bound = math.sqrt(3.0) / 2.0 * diameter + slack + 1e-12
    return RecenterReport(shift=np.asarray(shift).tolist(), sup_norm=sup, bound=bound, passed=sup <= bound)


def translate_density(rho: GridDensity, shift: np.ndarray) -> GridDensity:
    return GridDensity(rho.origin + np.asarray(shift, dtype=float), rho.cell_size, rho.values)


# =======================
# Vitali Cover
# =======================

def _radius_limits(epsilon, lam_lo, lam_hi, d3, target_diam):
    """Largest radii allowed by ε/4 > r‖D³ψ‖/λ̲², ε > (λ̄²r/(λ̲ diam Ω₁))² and r < diam Ω₁."""
    with np.errstate(divide="ignore"):
        taylor = np.where(d3 > 0, epsilon * lam_lo**2 / (4.0 * np.where(d3 > 0, d3, 1.0)), np.inf)
    stretch = math.sqrt(epsilon) * lam_lo * target_diam / lam_hi**2
    return np.minimum(np.minimum(taylor, stretch), target_diam)


def _ball_statistics(field_: BrenierField, center: np.ndarray, radius: float, safety: float):
    inside = field_.within(center, radius)
    nearest = field_.nearest(center[None])[0]
    idx = np.union1d(inside, [nearest]).astype(int)
    lam_lo = float(field_.lambda_lo[idx].min()) / safety
    lam_hi = float(field_.lambda_hi[idx].max()) * safety
    d3 = float(field_.d3_surrogate[idx].max())
    return lam_lo, lam_hi, d3


class _BoundaryDistance:
    """
    Distance to the boundary of Ω₀ at sub-cell resolution.

    A non-full cell of value v is treated as cut by a plane at h(v − ½) from
    its center, so the distance through it is |p − c| − h(½ − v).
    """

    def __init__(self, omega0: GridDensity):
        flat = omega0.values.reshape(-1)
        open_cells = np.flatnonzero(flat < 1.0)
        self.values = flat[open_cells]
        self.h = omega0.cell_size
        self.k = min(4**omega0.dimension, open_cells.size)
        self.tree = spatial.cKDTree(omega0.cell_centers()[open_cells])

    def __call__(self, points: np.ndarray) -> np.ndarray:
        dist, idx = self.tree.query(np.atleast_2d(points), k=self.k)
        dist = dist.reshape(dist.shape[0], -1)
        idx = idx.reshape(idx.shape[0], -1)
        return np.min(dist - self.h * (0.5 - self.values[idx]), axis=1)


class _PlacedBalls:
    """Placed balls with a k-d tree rebuilt every ``batch`` insertions and a linear tail."""

    def __init__(self, d: int, batch: int = 64):
        self.centers = np.zeros((0, d))
        self.radii = np.zeros(0)
        self.batch = batch
        self.indexed = 0
        self.tree = None

    def add(self, center: np.ndarray, radius: float):
        self.centers = np.vstack([self.centers, center[None]])
        self.radii = np.append(self.radii, radius)
        if self.radii.size - self.indexed >= self.batch:
            self.tree = spatial.cKDTree(self.centers)
            self.indexed = self.radii.size

    def clearance(self, points: np.ndarray, reach: float) -> np.ndarray:
        """min_j |p − c_j| − r_j over balls within reach (inf when none)."""
        out = np.full(points.shape[0], np.inf)
        if self.tree is not None:
            rmax = float(self.radii[:self.indexed].max())
            for n, near in enumerate(self.tree.query_ball_point(points, reach + rmax)):
                if near:
                    near = np.asarray(near, dtype=int)
                    out[n] = np.min(np.linalg.norm(self.centers[near] - points[n], axis=1) - self.radii[near])
        tail = slice(self.indexed, None)
        if self.radii[tail].size:
            gaps = np.linalg.norm(points[:, None, :] - self.centers[None, tail], axis=2) - self.radii[None, tail]
            out = np.minimum(out, gaps.min(axis=1))
        return out


def _refine_center(p: np.ndarray, free_at, step: float, levels: int = 6) -> Tuple[np.ndarray, float]:
    """Compass search for the point of largest free radius around p."""
    d = p.size
    moves = np.stack(np.meshgrid(*([np.array([-1.0, 0.0, 1.0])] * d), indexing="ij"), axis=-1).reshape(-1, d)
    moves = moves[np.any(moves != 0, axis=1)]
    best = float(free_at(p[None])[0])
    for _ in range(levels):
        for _ in range(8):
            trial = p + step * moves
            values = free_at(trial)
            k = int(np.argmax(values))
            if values[k] <= best:
                break
            p, best = trial[k], float(values[k])
        step *= 0.5
    return p, best


def vitali_cover(
    omega0: GridDensity,
    field_: BrenierField,
    epsilon: float,
    delta_coverage: float,
    safety_factor: float = 1.1,
    target_diam: Optional[float] = None,
    min_radius: Optional[float] = None,
    max_balls: Optional[int] = None,
    stall_limit: int = STALL_LIMIT,
) -> SprayPlan:
    """
    Greedy disjoint ball packing of Ω₀ with radii admissible for the spray construction.

    Candidates are the points of a half-cell lattice inside Ω₀ (cells at least
    half full). Each step takes the candidate with the largest free radius
    (lowest index on ties), moves it by compass search to a locally largest
    free radius against the sub-cell boundary and the placed balls, caps it
    by both admissibility inequalities over the field samples inside the ball
    (λ bounds widened by ``safety_factor``) and shrinks it by 1e-3 for
    strictness. Ball images and eigen-data come from the field's continuous
    extension at the centers.

    Raises:
        StallError: If stall_limit consecutive candidates are inadmissible
    """
    if not 0 < epsilon < 1:
        raise InvalidShape(f"epsilon must lie in (0, 1), got {epsilon}")
    if not 0 < delta_coverage < 1:
        raise InvalidShape(f"delta_coverage must lie in (0, 1), got {delta_coverage}")
    if omega0.dimension != field_.dimension:
        raise InvalidShape("Source density and field dimensions differ")
    d = omega0.dimension
    h = omega0.cell_size
    mass = omega0.mass
    target_diam = float(diam(field_.target_measure())) if target_diam is None else float(target_diam)
    min_radius = h / 8.0 if min_radius is None else float(min_radius)
    omega_d = unit_ball_volume(d)

    centers_all = omega0.cell_centers()
    flat = omega0.values.reshape(-1)
    inside_cells = centers_all[flat >= 0.5]
    if inside_cells.shape[0] == 0:
        raise EmptySupport("Source density has no cell at least half full")
    offsets = np.stack(np.meshgrid(*([np.array([-0.25, 0.25]) * h] * d), indexing="ij"), axis=-1).reshape(-1, d)
    candidates = (inside_cells[:, None, :] + offsets[None, :, :]).reshape(-1, d)
    boundary = _BoundaryDistance(omega0)
    free = boundary(candidates)

    nearest = field_.nearest(candidates)
    cap = _radius_limits(
        epsilon,
        field_.lambda_lo[nearest] / safety_factor,
        field_.lambda_hi[nearest] * safety_factor,
        field_.d3_surrogate[nearest],
        target_diam,
    )
    score = np.minimum(free, cap)
    tree = spatial.cKDTree(candidates)
    placed = _PlacedBalls(d)

    def free_at(points: np.ndarray, bound: float) -> np.ndarray:
        """Free radius at points, clipped to bound."""
        return np.minimum(np.minimum(boundary(points), bound), placed.clearance(points, bound))

    centers, radii, stats = [], [], []
    covered = 0.0
    consecutive = 0
    goal = (1.0 - delta_coverage) * mass
    with tqdm(total=goal, desc="Vitali cover", disable=not progress_enabled(), leave=False) as bar:
        while covered < goal:
            if max_balls is not None and len(radii) >= max_balls:
                logger.warning(f"Vitali cover reached max_balls={max_balls} at coverage {covered / mass:.4f}")
                break
            best = int(np.argmax(score))
            if score[best] < min_radius:
                logger.warning(
                    f"Vitali cover exhausted candidates at coverage {covered / mass:.4f} "
                    f"(goal {1.0 - delta_coverage:.4f}, {len(radii)} balls)"
                )
                break
            bound = float(cap[best])
            p, room = _refine_center(candidates[best], lambda pts: free_at(pts, bound), 0.25 * h)
            lam_lo, lam_hi, d3 = _ball_statistics(field_, p, room, safety_factor)
            limit = float(_radius_limits(epsilon, np.array(lam_lo), np.array(lam_hi), np.array(d3), target_diam))
            r = min(room, limit) * SHRINK
            if r < min_radius:
                score[best] = -np.inf
                consecutive += 1
                if consecutive >= stall_limit:
                    raise StallError(
                        f"{stall_limit} consecutive candidate balls were inadmissible",
                        {"coverage": covered / mass, "balls": len(radii)},
                    )
                continue
            consecutive = 0
            centers.append(p.copy())
            radii.append(r)
            stats.append((lam_lo, lam_hi, d3))
            placed.add(p, r)
            covered += omega_d * r**d
            bar.update(omega_d * r**d)
            reach = r + float(np.max(free[np.isfinite(free)], initial=0.0))
            near = np.asarray(tree.query_ball_point(p, reach), dtype=int)
            if near.size:
                gap = np.linalg.norm(candidates[near] - p, axis=1) - r
                free[near] = np.minimum(free[near], gap)
                score[near] = np.minimum(score[near], free[near])
                dead = near[free[near] <= 0]
                free[dead] = -np.inf
                score[dead] = -np.inf

    centers = np.asarray(centers, dtype=float).reshape(-1, d)
    radii = np.asarray(radii, dtype=float)
    if radii.size:
        images, jac, _ = field_.evaluate(centers)
        eigvals, frames = np.linalg.eigh(0.5 * (jac + np.swapaxes(jac, 1, 2)))
        eigvals = np.maximum(eigvals, EIG_FLOOR)
    else:
        images = np.zeros((0, d))
        eigvals = np.zeros((0, d))
        frames = np.zeros((0, d, d))
    stats = np.asarray(stats, dtype=float).reshape(-1, 3)
    boosts = (1.0 + epsilon) * images - centers
    coverage = min(covered / mass, 1.0)
    logger.info(f"Vitali cover: {radii.size} balls, coverage {coverage:.4f}, ε={epsilon}")
    return SprayPlan(
        epsilon=float(epsilon), centers=centers, radii=radii, images=images, eigvals=eigvals,
        frames=frames, lambda_lo=stats[:, 0], lambda_hi=stats[:, 1], d3=stats[:, 2], boosts=boosts,
        coverage_fraction=coverage, source_mass=mass, target_diam=target_diam,
        safety_factor=safety_factor, shift=np.zeros(d),
    )


def audit_plan(plan: SprayPlan, field_: BrenierField, taylor_slack: float = 1e-9) -> PlanAuditReport:
    """
    Re-audit a plan: exact disjointness, both admissibility inequalities with
    the raw sample bounds inside each ball, and the per-ball Taylor error
    sup |T(x) − T(x_i) − DT(x_i)(x − x_i)| over the fitted map values inside
    the ball. The allowance is ½‖D³ψ‖_i r_i² plus TAYLOR_NOISE standard
    errors of the fit (value and slope over the radius) plus ``taylor_slack``.
    """
    overlapping: List[Tuple[int, int]] = []
    if plan.size > 1:
        tree = spatial.cKDTree(plan.centers)
        for i, j in sorted(tree.query_pairs(2.0 * float(plan.radii.max()))):
            if np.linalg.norm(plan.centers[i] - plan.centers[j]) <= plan.radii[i] + plan.radii[j]:
                overlapping.append((int(i), int(j)))
    eps = plan.epsilon
    inadmissible, taylor_bad = [], []
    worst_ratio = 0.0
    _, jac_all, _ = field_.evaluate(plan.centers) if plan.size else (None, np.zeros((0,)), None)
    for i in range(plan.size):
        c, r = plan.centers[i], plan.radii[i]
        inside = field_.within(c, r)
        idx = np.union1d(inside, field_.nearest(c[None])).astype(int)
        raw_lo = float(field_.lambda_lo[idx].min())
        raw_hi = float(field_.lambda_hi[idx].max())
        raw_d3 = float(field_.d3_surrogate[idx].max())
        lam_lo = min(plan.lambda_lo[i], raw_lo)
        lam_hi = max(plan.lambda_hi[i], raw_hi)
        d3 = max(plan.d3[i], raw_d3)
        ok = (
            eps / 4.0 > r * d3 / lam_lo**2
            and eps > (lam_hi**2 * r / (lam_lo * plan.target_diam)) ** 2
            and r < plan.target_diam
        )
        if not ok:
            inadmissible.append(i)
        if inside.size:
            affine = plan.images[i] + (field_.points[inside] - c) @ jac_all[i].T
            error = float(np.max(np.linalg.norm(field_.fitted[inside] - affine, axis=1)))
            noise = float(field_.fit_error[idx].max() + field_.jacobian_error[idx].max() * r)
            allowance = 0.5 * d3 * r**2 + TAYLOR_NOISE * noise + taylor_slack
            worst_ratio = max(worst_ratio, error / allowance)
            if error > allowance:
                taylor_bad.append(i)
    passed = not overlapping and not inadmissible and not taylor_bad
    return PlanAuditReport(
        balls=plan.size, coverage_fraction=plan.coverage_fraction, overlapping_pairs=overlapping,
        inadmissible_balls=inadmissible, taylor_violations=taylor_bad,
        max_taylor_ratio=worst_ratio, passed=passed,
    )


# =======================
# Spray Assembly
# =======================

_UNIT_GEODESICS: Dict[bytes, DropletGeodesic] = {}


def unit_geodesic(lam: np.ndarray, cache_dir: Optional[str] = None) -> DropletGeodesic:
    """Unit-radius geodesic from the unit ball to axes λ (Πλ = 1), memoized per process on λ rounded to 1e-10."""
    key = np.round(np.asarray(lam, dtype=float), 10).tobytes()
    cached = _UNIT_GEODESICS.get(key)
    if cached is None:
        d = lam.size
        if np.max(np.abs(lam - 1.0)) < 1e-12:
            cached = constant_geodesic(1.0, np.ones(d))
        else:
            cached = geodesic_bvp(1.0, np.ones(d), lam, cache_dir=cache_dir)
        _UNIT_GEODESICS[key] = cached
    return cached


def normalized_axes(eigvals: np.ndarray) -> np.ndarray:
    """Eigenvalues rescaled to unit product so the droplet target lies on the constraint surface."""
    lam = np.asarray(eigvals, dtype=float)
    return lam / np.exp(np.mean(np.log(lam)))


def build_spray(plan: SprayPlan, cache_dir: Optional[str] = None) -> EulerSpray:
    """
    One boosted Euler droplet per ball: geodesic from (r_i,…,r_i) to r_i·λ_i in the
    eigen-frame R_i, started at x_i and boosted by b_i = (1+ε)T(x_i) − x_i.

    Balls whose geodesic solve fails are dropped and logged; the plan's coverage
    is reduced accordingly.
    """
    droplets, indices, dropped = [], [], []
    for i in tqdm(range(plan.size), desc="Droplets", disable=not progress_enabled(), leave=False):
        lam = normalized_axes(plan.eigvals[i])
        try:
            unit = unit_geodesic(lam, cache_dir)
        except NumericalError as e:
            logger.warning(f"Dropping ball {i}: {e.message}")
            dropped.append(i)
            continue
        geodesic = scaled_geodesic(unit, float(plan.radii[i]))
        droplets.append(BoostedDroplet(geodesic, plan.boosts[i], plan.centers[i], plan.frames[i]))
        indices.append(i)
    if dropped:
        kept = np.asarray(indices, dtype=int)
        coverage = float(np.sum(plan.volumes[kept]) / plan.source_mass) if kept.size else 0.0
        plan = SprayPlan(**{**plan.__dict__, "coverage_fraction": coverage})
        logger.warning(f"Dropped {len(dropped)} droplets; coverage now {coverage:.4f}")
    total = float(sum(boosted_action(dr) for dr in droplets))
    logger.info(f"Built Euler spray: {len(droplets)} droplets, total action {total:.6g}")
    return EulerSpray(plan, tuple(droplets), np.asarray(indices, dtype=int), total, tuple(dropped))


# =======================
# Spray Audits
# =======================

def _wasserstein_states(spray: EulerSpray, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centers, semi-axes and linear parts of the Wasserstein ellipsoids at time t."""
    centers = np.array([dr.center(t) for dr in spray.droplets])
    axes = np.array([(1.0 - t) * dr.geodesic.start + t * dr.geodesic.end for dr in spray.droplets])
    mats = np.array([dr.rotation * a[None, :] for dr, a in zip(spray.droplets, axes)])
    return centers, axes, mats


def certify_injectivity(spray: EulerSpray, time_samples=17) -> InjectivityReport:
    """
    Certify that droplets stay disjoint at sampled times.

    Euler droplets are nested in their Wasserstein ellipsoids, so it suffices
    to separate those. Near pairs come from a k-d tree over centers; each is
    tested with the separating-direction bound, refined numerically when the
    bound alone is inconclusive. The analytic certificate requires a gap of at
    least (εt/2)(λ̲_i² r_i + λ̲_j² r_j).
    """
    times = np.linspace(0.0, 1.0, time_samples) if np.isscalar(time_samples) else np.asarray(time_samples, dtype=float)
    if times.size < 3:
        raise InvalidShape("certify_injectivity needs at least 3 time samples")
    n = len(spray.droplets)
    plan = spray.plan
    if n < 2:
        return InjectivityReport(time_samples=int(times.size), pairs_checked=0, passed=True)
    eps = plan.epsilon
    owners = spray.ball_indices
    margin_unit = plan.lambda_lo[owners] ** 2 * plan.radii[owners]
    analytic, geometric = [], []
    checked = 0
    min_gap = np.inf
    for t in times:
        t = float(t)
        centers, axes, mats = _wasserstein_states(spray, t)
        reach = axes.max(axis=1)
        margin = eps * t * float(margin_unit.max())
        pairs = sorted(spatial.cKDTree(centers).query_pairs(2.0 * reach.max() + margin))
        if not pairs:
            continue
        pairs = np.asarray(pairs, dtype=int)
        i, j = pairs[:, 0], pairs[:, 1]
        near = np.linalg.norm(centers[i] - centers[j], axis=1) <= reach[i] + reach[j] + margin
        i, j = i[near], j[near]
        if i.size == 0:
            continue
        checked += i.size
        gaps = ellipsoid_gaps(centers[i], mats[i], centers[j], mats[j])
        required = 0.5 * eps * t * (margin_unit[i] + margin_unit[j])
        for k in np.flatnonzero(gaps < np.maximum(required, ZERO_TOL)):
            e1 = Ellipsoid(centers[i[k]], axes[i[k]], spray.droplets[i[k]].rotation)
            e2 = Ellipsoid(centers[j[k]], axes[j[k]], spray.droplets[j[k]].rotation)
            gaps[k] = max(gaps[k], dist_sets(e1, e2))
        min_gap = min(min_gap, float(gaps.min()))
        for k in np.flatnonzero(gaps <= 0):
            geometric.append((int(owners[i[k]]), int(owners[j[k]]), t, float(gaps[k])))
        for k in np.flatnonzero(gaps < required):
            analytic.append((int(owners[i[k]]), int(owners[j[k]]), t, float(gaps[k]), float(required[k])))
    if analytic or geometric:
        logger.warning(f"Injectivity: {len(analytic)} analytic and {len(geometric)} geometric violations")
    return InjectivityReport(
        time_samples=int(times.size), pairs_checked=int(checked),
        analytic_violations=analytic, geometric_violations=geometric,
        min_geometric_gap=None if not np.isfinite(min_gap) else float(min_gap),
        passed=not analytic and not geometric,
    )


def _covered_samples(spray: EulerSpray, field_: BrenierField) -> Tuple[np.ndarray, np.ndarray]:
    """(field sample indices inside a droplet's ball, owning droplet position)."""
    plan = spray.plan
    owners = np.full(field_.size, -1)
    for k, i in enumerate(spray.ball_indices):
        owners[field_.within(plan.centers[i], plan.radii[i])] = k
    idx = np.flatnonzero(owners >= 0)
    return idx, owners[idx]


def spray_images(spray: EulerSpray, points: np.ndarray, owners: np.ndarray) -> np.ndarray:
    """Time-one positions of points carried by their droplets' linear flows."""
    out = np.zeros_like(points)
    for k in np.unique(owners):
        dr = spray.droplets[k]
        sel = owners == k
        g = dr.geodesic
        stretch = dr.rotation @ np.diag(g.end / g.r) @ dr.rotation.T
        out[sel] = dr.center(1.0) + (points[sel] - dr.start_center) @ stretch.T
    return out


def spray_action_audit(
    spray: EulerSpray,
    field_: BrenierField,
    subsample: int = 1000,
    seed: int = 0,
) -> SprayActionReport:
    """
    Action accounting 𝒜^ε ≤ d_W² + Kε on covered mass, the per-droplet bound
    and the bottleneck distance between spray images and their targets.
    """
    plan = spray.plan
    eps = plan.epsilon
    d = spray.dimension
    w, x, tx = field_.weights, field_.points, field_.images
    full = float(np.sum(w * np.sum((tx - x) ** 2, axis=1)))
    covered_mass = spray.covered_mass
    idx, owners = _covered_samples(spray, field_)
    if idx.size:
        covered_cost = float(np.sum(w[idx] * np.sum((tx[idx] - x[idx]) ** 2, axis=1)))
        w_sq = covered_cost * covered_mass / float(np.sum(w[idx]))
    else:
        w_sq = 0.0
    K = w_sq + 2.0 * plan.source_mass * plan.target_diam**2
    bound = w_sq + K * eps
    action_ok = spray.total_action <= bound

    k1 = plan.target_diam
    violations = []
    for k, i in enumerate(spray.ball_indices):
        dr = spray.droplets[k]
        r = plan.radii[i]
        local = wasserstein_droplet_distance_sq(r, r * normalized_axes(plan.eigvals[i]), plan.images[i] - plan.centers[i])
        if boosted_action(dr) > local * (1.0 + eps) + 2.0 * eps * k1**2 * dr.volume:
            violations.append(int(i))

    linf = None
    linf_bound = eps * plan.target_diam
    if idx.size:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(idx.size, min(subsample, idx.size), replace=False))
        moved = spray_images(spray, x[idx[pick]], owners[pick])
        cost = spatial.distance.cdist(moved, tx[idx[pick]])
        weights = np.array(w[idx[pick]], dtype=float)
        linf = bottleneck_value(cost, weights, weights)
    linf_ok = linf is None or linf < linf_bound
    passed = action_ok and not violations and linf_ok
    report = SprayActionReport(
        total_action=spray.total_action, wasserstein_sq=w_sq, wasserstein_sq_full=full,
        covered_mass=covered_mass, residual_mass=plan.source_mass - covered_mass, K=K,
        epsilon=eps, action_bound=bound, action_ok=action_ok, droplet_violations=violations,
        linf_distance=linf, linf_bound=linf_bound, linf_ok=linf_ok, passed=passed,
    )
    logger.info(
        f"Spray action {spray.total_action:.6g} vs d_W² {w_sq:.6g} + Kε {K * eps:.6g} "
        f"(covered mass {covered_mass:.6g}); d_∞ {linf if linf is None else round(linf, 6)}"
    )
    return report


# =======================
# Spray Paths
# =======================

def droplets_path(
    droplets: Sequence[BoostedDroplet],
    times: Optional[Sequence[float]] = None,
    n_radial: int = 6,
) -> DensityPath:
    """
    Lagrangian DensityPath of disjoint droplets: each droplet carries ball-quadrature
    labels z with volume weights, at positions x_i + t·b_i + R·diag(a(t))·z.
    """
    if not droplets:
        raise EmptySupport("No droplets to sample")
    times = np.linspace(0.0, 1.0, 33) if times is None else np.asarray(times, dtype=float)
    d = droplets[0].dimension
    unit_labels, unit_weights = ball_quadrature(d, n_radial)
    masses = np.concatenate([unit_weights * dr.r**d for dr in droplets])
    frames = []
    for t in times:
        states = [dr.lagrangian(unit_labels, float(t)) for dr in droplets]
        frames.append(PathFrame(
            np.vstack([s[0] for s in states]),
            np.vstack([s[1] for s in states]),
            masses,
            np.concatenate([s[2] for s in states]),
        ))
    return DensityPath(times, tuple(frames), labels=frames[0].positions.copy())


def spray_path(spray: EulerSpray, times: Optional[Sequence[float]] = None, n_radial: int = 6) -> DensityPath:
    return droplets_path(spray.droplets, times, n_radial)


def spray_reference_path(
    spray: EulerSpray,
    field_: BrenierField,
    times: Optional[Sequence[float]] = None,
    n_radial: int = 6,
) -> DensityPath:
    """Displacement interpolant on the spray's own labels (shared quadrature for weak-star gaps)."""
    times = np.linspace(0.0, 1.0, 33) if times is None else np.asarray(times, dtype=float)
    d = spray.dimension
    unit_labels, unit_weights = ball_quadrature(d, n_radial)
    labels = np.vstack([dr.start_center + dr.r * unit_labels for dr in spray.droplets])
    masses = np.concatenate([unit_weights * dr.r**d for dr in spray.droplets])
    images, _, _ = field_.evaluate(labels)
    velocities = images - labels
    frames = tuple(PathFrame(labels + t * velocities, velocities, masses) for t in times)
    return DensityPath(times, frames, labels=labels)


def reverse_path(path: DensityPath) -> DensityPath:
    frames = tuple(
        PathFrame(f.positions, -f.velocities, f.masses, f.pressure) for f in reversed(path.frames)
    )
    return DensityPath(1.0 - path.times[::-1], frames, labels=path.frames[-1].positions.copy(), action=path.action)


def static_path(measure: DiscreteMeasure, times: Optional[Sequence[float]] = None) -> DensityPath:
    times = np.linspace(0.0, 1.0, 3) if times is None else np.asarray(times, dtype=float)
    zeros = np.zeros_like(measure.points)
    frames = tuple(PathFrame(measure.points, zeros, measure.weights) for _ in times)
    return DensityPath(times, frames, labels=measure.points.copy(), action=0.0)


def linear_path(
    start: np.ndarray,
    end: np.ndarray,
    masses: np.ndarray,
    times: Optional[Sequence[float]] = None,
) -> DensityPath:
    """Straight-line particle motion from start to end positions (pressureless)."""
    times = np.linspace(0.0, 1.0, 9) if times is None else np.asarray(times, dtype=float)
    velocities = end - start
    frames = []
    for t in times:
        positions = end.copy() if t == times[-1] == 1.0 else start + t * velocities
        frames.append(PathFrame(positions, velocities, masses))
    return DensityPath(times, tuple(frames), labels=start.copy())


def chain_gap(end: PathFrame, start: PathFrame) -> float:
    """d_W between the last frame of one path and the first of the next."""
    if end.positions.shape == start.positions.shape and np.array_equal(end.positions, start.positions) \
            and np.array_equal(end.masses, start.masses):
        return 0.0
    a = DiscreteMeasure(end.positions[end.masses > 0], end.masses[end.masses > 0])
    b = DiscreteMeasure(start.positions[start.masses > 0], start.masses[start.masses > 0])
    return float(np.sqrt(max(solve_exact(a, b).cost, 0.0)))


def concatenate(paths: Sequence[DensityPath], taus: Sequence[float], chain_tol: float = CHAIN_TOL) -> DensityPath:
    """
    Concatenate a chain of paths; segment k runs on [Σ_{j<k} τ_j, Σ_{j≤k} τ_j]
    with velocities scaled by 1/τ_k, so the action is Σ_k 𝒜_k/τ_k.

    Raises:
        ChainBroken: If consecutive endpoints differ by more than chain_tol in d_W
    """
    taus = np.asarray(taus, dtype=float)
    if len(paths) == 0 or taus.size != len(paths):
        raise InvalidShape(f"{len(paths)} paths but {taus.size} time fractions")
    if np.any(taus <= 0) or abs(taus.sum() - 1.0) > 1e-12:
        raise InvalidShape(f"Time fractions must be positive and sum to 1, got {taus.tolist()}")
    for k in range(len(paths) - 1):
        try:
            gap = chain_gap(paths[k].frames[-1], paths[k + 1].frames[0])
        except MassMismatch:
            raise ChainBroken(k, float("inf"))
        if gap > chain_tol:
            raise ChainBroken(k, gap)
    times, frames = [], []
    offset = 0.0
    for k, (path, tau) in enumerate(zip(paths, taus)):
        for t, f in zip(path.times, path.frames):
            times.append(offset + tau * t)
            frames.append(PathFrame(f.positions, f.velocities / tau, f.masses,
                                    None if f.pressure is None else f.pressure / tau**2))
        offset += tau
    times = np.clip(np.asarray(times), 0.0, 1.0)
    action = float(sum(p.action / tau for p, tau in zip(paths, taus)))
    sizes = {p.size for p in paths}
    labels = paths[0].labels if len(sizes) == 1 else None
    return DensityPath(times, tuple(frames), labels=labels, action=action)


def balanced_taus(actions: Sequence[float]) -> np.ndarray:
    """τ_k ∝ √𝒜_k, giving total action (Σ√𝒜_k)²; zero-action segments get a tiny share."""
    delta = np.sqrt(np.maximum(np.asarray(actions, dtype=float), 0.0))
    if delta.sum() <= 0:
        return np.full(delta.size, 1.0 / delta.size)
    delta = np.maximum(delta, 1e-9 * delta.sum())
    return delta / delta.sum()


# =======================
# General Densities
# =======================

def _is_characteristic(rho: GridDensity) -> bool:
    v = rho.values
    return bool(np.all((v < ZERO_TOL) | (np.abs(v - 1.0) < ZERO_TOL)))


def _carried_spray_paths(
    positions: np.ndarray,
    weights: np.ndarray,
    target: np.ndarray,
    shape: GridDensity,
    epsilon: float,
    delta: float,
    safety_factor: float,
    k_neighbors: Optional[int],
    cache_dir: Optional[str],
    times: np.ndarray,
) -> Tuple[List[DensityPath], List[str], Optional[EulerSpray], Optional[float]]:
    """
    Carry particles from ``positions`` to their optimal partners in ``target``:
    particles inside a droplet's ball follow the droplet's linear flow, the rest
    move straight to T(x); a closing segment takes spray images onto T(x).

    Returns:
        tuple: (paths, kinds, spray or None, K of the spray audit or None)
    """
    mu = DiscreteMeasure(positions, weights)
    nu = DiscreteMeasure(target, weights)
    field_ = estimate_brenier_field(mu, nu, k_neighbors=k_neighbors, plan=solve_transport(mu, nu))
    shift = recenter_target(field_)
    centered = field_.translated(shift)
    try:
        plan = vitali_cover(translate_density(shape, shift), centered, epsilon, delta, safety_factor)
        spray = build_spray(plan, cache_dir)
    except (StallError, EmptySupport) as e:
        logger.warning(f"Spray segment skipped ({e.message}); particles move straight")
        return [linear_path(positions, field_.images, weights, times)], ["displacement"], None, None

    x = centered.points
    owners = np.full(x.shape[0], -1)
    for k, i in enumerate(spray.ball_indices):
        owners[centered.within(spray.plan.centers[i], spray.plan.radii[i])] = k
    inside = owners >= 0
    frames = []
    for t in times:
        pos = x + t * (centered.images - x)
        vel = centered.images - x
        pressure = np.zeros(x.shape[0])
        for k in np.unique(owners[inside]):
            sel = owners == k
            dr = spray.droplets[k]
            g = dr.geodesic
            a, adot, beta_dot, _ = g.state(float(t))
            local = (x[sel] - dr.start_center) @ dr.rotation / g.r
            pos[sel] = dr.center(float(t)) + (local * a) @ dr.rotation.T
            vel[sel] = dr.boost + (local * adot) @ dr.rotation.T
            pressure[sel] = beta_dot * np.maximum(1.0 - np.sum(local**2, axis=1), 0.0)
        frames.append(PathFrame(pos - shift, vel, weights, pressure))
    carried = DensityPath(times, tuple(frames), labels=positions.copy())
    end = carried.frames[-1].positions
    closing = linear_path(end, field_.images, weights, times[:: max(1, times.size // 8)] if times.size > 9 else times)
    audit = spray_action_audit(spray, centered)
    return [carried, closing], ["spray", "closing"], spray, audit.K


def _quantization_cascade(rho: GridDensity, epsilon: float, max_levels: int) -> Tuple[List[GridDensity], float, bool]:
    """Quantizations of rho at block diameters ε·diam·2^{-k}, k = 0..; stops when the grid cannot resolve them."""
    scale = epsilon * diam(rho)
    cascade = []
    truncated = False
    last_diam = scale
    for k in range(max_levels + 1):
        cell_diam = scale * 2.0**-k
        try:
            quantization_block(rho, cell_diam)
        except ResolutionTooCoarse:
            truncated = True
            break
        cascade.append(rectangle_quantize(rho, cell_diam))
        last_diam = cell_diam
    if not cascade:
        raise ResolutionTooCoarse(f"Grid cannot represent quantization at scale {scale:.4g}")
    if len(cascade) == max_levels + 1:
        truncated = True
    return cascade, last_diam, truncated


def connect_general_densities(
    rho0: GridDensity,
    rho1: GridDensity,
    epsilon: float,
    delta: float = 0.05,
    n_samples: int = 400,
    seed: int = 0,
    max_levels: int = 2,
    safety_factor: float = 1.1,
    k_neighbors: Optional[int] = None,
    rescale: bool = True,
    characteristic_threshold: float = 0.05,
    cache_dir: Optional[str] = None,
) -> Tuple[DensityPath, ConnectionReport]:
    """
    Path from rho0 to rho1 built from Euler sprays between rectangle quantizations.

    Both densities are quantized at block diameters ε·diam·2^{-k}; correction
    sprays with budgets ε·2^{-k} link consecutive quantizations and the main
    spray links the coarsest ones. A fixed particle set is carried through all
    segments so every junction matches exactly. The cascade is truncated when
    the grid can no longer represent a finer quantization (or at max_levels),
    and the remaining distance is covered by a straight displacement segment
    whose size is reported as the truncation gap.

    Returns:
        tuple: (path, report)
    """
    if not 0 < epsilon < 1:
        raise InvalidShape(f"epsilon must lie in (0, 1), got {epsilon}")
    if rho0.dimension != rho1.dimension:
        raise InvalidShape("Densities have different dimensions")
    m0, m1 = rho0.mass, rho1.mass
    rescaled = False
    if abs(m0 - m1) > 1e-9 * max(m0, m1):
        if not rescale:
            raise MassMismatch(m0, m1)
        if m0 > m1:
            rho0 = rho0.with_values(rho0.values * (m1 / m0))
        else:
            rho1 = rho1.with_values(rho1.values * (m0 / m1))
        rescaled = True
        logger.info(f"Rescaled masses {m0:.6g}, {m1:.6g} to {min(m0, m1):.6g}")
    mass = rho0.mass

    mu0 = sample_uniform(rho0, n_samples, seed)
    mu1 = DiscreteMeasure(sample_uniform(rho1, n_samples, seed + 1).points, mu0.weights)
    w_sq = solve_exact(mu0, mu1).cost
    times = np.linspace(0.0, 1.0, 17)

    if rho0.same_grid(rho1) and np.array_equal(rho0.values, rho1.values):
        path = static_path(mu0, times)
        report = ConnectionReport(rescaled=rescaled, shortcut="identical densities", segments=["static"],
                                  segment_actions=[0.0], taus=[1.0], action=0.0, wasserstein_sq=0.0,
                                  bound=0.0, within_bound=True)
        return path, report

    # Displacement interpolant shortcut when it is itself a characteristic function.
    field_ = estimate_brenier_field(mu0, mu1, k_neighbors=k_neighbors)
    interp_frames = tuple(PathFrame(mu0.points + t * (field_.images - mu0.points), field_.images - mu0.points, mu0.weights)
                          for t in times)
    interpolant = DensityPath(times, interp_frames, labels=mu0.points.copy())
    if _is_characteristic(rho0) and _is_characteristic(rho1):
        grid = covering_grid(np.vstack([f.positions for f in interp_frames]), rho0.cell_size)
        try:
            defect = characteristic_defect(interpolant, grid).max_defect
        except InvalidShape:
            defect = np.inf
        if rho0.dimension == 1 and defect < characteristic_threshold:
            report = ConnectionReport(rescaled=rescaled, shortcut="characteristic interpolant",
                                      segments=["displacement"], segment_actions=[interpolant.action],
                                      taus=[1.0], action=interpolant.action, wasserstein_sq=w_sq,
                                      bound=w_sq, within_bound=interpolant.action <= w_sq * (1 + 1e-9) + 1e-12)
            return interpolant, report

    cascade0, diam0, trunc0 = _quantization_cascade(rho0, epsilon, max_levels)
    cascade1, diam1, trunc1 = _quantization_cascade(rho1, epsilon, max_levels)
    truncated = (trunc0 and not _is_characteristic(rho0)) or (trunc1 and not _is_characteristic(rho1))
    if _is_characteristic(rho0):
        cascade0 = [rho0]
    if _is_characteristic(rho1):
        cascade1 = [rho1]
    levels = max(len(cascade0), len(cascade1)) - 1

    rng_seed = seed + 2
    segments: List[DensityPath] = []
    kinds: List[str] = []
    spray_constants: List[float] = []
    positions, weights = mu0.points, mu0.weights

    def advance(target_points: np.ndarray, shape: GridDensity, eps_k: float):
        nonlocal positions
        paths, labels, spray, K = _carried_spray_paths(
            positions, weights, target_points, shape, eps_k, delta, safety_factor, k_neighbors, cache_dir, times)
        segments.extend(paths)
        kinds.extend(labels)
        if K is not None:
            spray_constants.append(K)
        positions = paths[-1].frames[-1].positions

    def samples_of(shape: GridDensity) -> np.ndarray:
        nonlocal rng_seed
        rng_seed += 1
        return sample_uniform(shape, n_samples, rng_seed).points

    # Source side: finest quantization first, then up the cascade to the coarsest.
    if not _is_characteristic(rho0):
        finest = samples_of(cascade0[-1])
        plan = solve_exact(DiscreteMeasure(positions, weights), DiscreteMeasure(finest, weights))
        matched = np.empty_like(positions)
        matched[plan.rows] = finest[plan.cols]
        segments.append(linear_path(positions, matched, weights))
        kinds.append("truncation")
        positions = matched
        for k in range(len(cascade0) - 1, 0, -1):
            advance(samples_of(cascade0[k - 1]), cascade0[k], epsilon * 2.0**-k)

    end_samples = samples_of(cascade1[0]) if not _is_characteristic(rho1) else mu1.points
    advance(end_samples, cascade0[0], epsilon)

    if not _is_characteristic(rho1):
        for k in range(1, len(cascade1)):
            advance(samples_of(cascade1[k]), cascade1[k - 1], epsilon * 2.0**-k)
        plan = solve_exact(DiscreteMeasure(positions, weights), mu1)
        matched = np.empty_like(positions)
        matched[plan.rows] = mu1.points[plan.cols]
        segments.append(linear_path(positions, matched, weights))
        kinds.append("truncation")

    actions = [p.action for p in segments]
    taus = balanced_taus(actions)
    path = concatenate(segments, taus)
    C = max(spray_constants) if spray_constants else 2.0 * mass * diam(rho1) ** 2
    bound = w_sq + C * epsilon
    truncation_gap = math.sqrt(mass) * max(diam0 if not _is_characteristic(rho0) else 0.0,
                                           diam1 if not _is_characteristic(rho1) else 0.0)
    report = ConnectionReport(
        rescaled=rescaled, segments=kinds, segment_actions=actions, taus=taus.tolist(), levels=levels,
        truncated=truncated, truncation_gap=truncation_gap, action=path.action, wasserstein_sq=w_sq,
        bound=bound, within_bound=path.action <= bound,
    )
    logger.info(
        f"Connected densities with {len(segments)} segments: action {path.action:.6g}, "
        f"d_W² {w_sq:.6g}, bound {bound:.6g}"
    )
    return path, report
