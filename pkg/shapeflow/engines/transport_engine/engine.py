from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import ot
from pydantic import BaseModel, Field
from scipy import spatial
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from ..common import setup_engine_environment
from ...errors import (
    DegenerateNeighborhood,
    InvalidShape,
    MassMismatch,
    NonConvergence,
    SizeGuardExceeded,
)
from ...shape_utils import DiscreteMeasure

# Setup environment and logging
logger = setup_engine_environment(__file__)

SIZE_GUARD = 20_000_000
MASS_RTOL = 1e-9
EIG_FLOOR = 1e-6
DEFAULT_NEIGHBORS = {1: 16, 2: 96, 3: 192}
BLEND_NEIGHBORS = {1: 3, 2: 9, 3: 16}
EVAL_CHUNK = 20_000
# Standard errors subtracted from the third-derivative surrogate.
D3_NOISE_FLOOR = 2.0


# Pydantic Models
class EntropicCrossCheck(BaseModel):
    """Exact-vs-entropic comparison on a subsample"""
    subsample: int = Field(description="Points drawn from each measure")
    exact_cost: float = Field(description="Exact optimal cost on the subsample")
    entropic_cost: float = Field(description="Entropic plan cost on the subsample")
    relative_gap: float = Field(description="(entropic - exact) / exact")
    passed: bool = Field(description="Relative gap within tolerance")


class MonotonicityReport(BaseModel):
    """Sampled cyclical / local monotonicity audit"""
    pairs_checked: int = Field(description="Number of pairs tested")
    violations: List[str] = Field(default_factory=list, description="Offending pairs")
    worst_slack: float = Field(description="Most negative normalized slack observed")
    mean_determinant: Optional[float] = Field(default=None, description="Mean det DT over samples")
    passed: bool = Field(description="No violations")


class StabilityReport(BaseModel):
    """Coupling costs of perturbed transport plans against the reference plan"""
    costs: List[float] = Field(description="Cost per sequence index k")


# Domain Types
@dataclass(frozen=True)
class TransportPlan:
    source: DiscreteMeasure
    target: DiscreteMeasure
    rows: np.ndarray
    cols: np.ndarray
    masses: np.ndarray
    cost: float
    method: str = "exact"
    regularization: Optional[float] = None
    duality_gap: Optional[float] = None

    @property
    def couplings(self) -> List[Tuple[int, int, float]]:
        return [(int(i), int(j), float(m)) for i, j, m in zip(self.rows, self.cols, self.masses)]

    def is_permutation(self) -> bool:
        n = self.source.size
        return (
            self.rows.size == n
            and self.target.size == n
            and np.array_equal(np.sort(self.rows), np.arange(n))
            and np.array_equal(np.sort(self.cols), np.arange(n))
        )

    def marginal_errors(self) -> Tuple[float, float]:
        row = np.bincount(self.rows, weights=self.masses, minlength=self.source.size)
        col = np.bincount(self.cols, weights=self.masses, minlength=self.target.size)
        mass = self.source.mass
        return (
            float(np.sum(np.abs(row - self.source.weights)) / mass),
            float(np.sum(np.abs(col - self.target.weights)) / mass),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "cost": self.cost,
            "regularization": self.regularization,
            "duality_gap": self.duality_gap,
            "couplings": [[int(i), int(j), float(m)] for i, j, m in zip(self.rows, self.cols, self.masses)],
        }


@dataclass(frozen=True)
class BrenierField:
    """
    Sampled optimal map with smoothed local fits, symmetric Jacobians and their eigen-data.

    ``images`` are the plan's barycentric images; ``fitted`` are the local
    regression values at the samples, with ``fit_error`` and ``jacobian_error``
    their standard errors (zero for noiseless data).
    """

    points: np.ndarray
    images: np.ndarray
    weights: np.ndarray
    jacobians: np.ndarray
    eigvals: np.ndarray
    frames: np.ndarray
    d3_surrogate: np.ndarray
    determinants: np.ndarray = field(default=None)
    fitted: np.ndarray = field(default=None)
    fit_error: np.ndarray = field(default=None)
    jacobian_error: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.determinants is None:
            object.__setattr__(self, "determinants", np.prod(self.eigvals, axis=1))
        if self.fitted is None:
            object.__setattr__(self, "fitted", self.images)
        if self.fit_error is None:
            object.__setattr__(self, "fit_error", np.zeros(self.points.shape[0]))
        if self.jacobian_error is None:
            object.__setattr__(self, "jacobian_error", np.zeros(self.points.shape[0]))

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def lambda_lo(self) -> np.ndarray:
        return self.eigvals[:, 0]

    @property
    def lambda_hi(self) -> np.ndarray:
        return self.eigvals[:, -1]

    @property
    def velocities(self) -> np.ndarray:
        return self.images - self.points

    @cached_property
    def _tree(self) -> spatial.cKDTree:
        return spatial.cKDTree(self.points)

    def source_measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.points, self.weights)

    def target_measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.images, self.weights)

    def nearest(self, x: np.ndarray) -> np.ndarray:
        _, idx = self._tree.query(np.atleast_2d(x), k=1)
        return np.atleast_1d(idx)

    def evaluate(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Continuous extension of the map: (T(x), DT(x), nearest sample index) for points x of shape (N, d).

        Blends the local affine models fitted_k + DT_k(x − x_k) of the nearest
        samples with weights (1 − (|x − x_k|/ρ)²)², where ρ is the distance to
        the first sample left out, so the blend never jumps when the
        neighbor set changes.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = min(BLEND_NEIGHBORS[self.dimension], self.size - 1)
        if m < 1:
            idx = self.nearest(x)
            jac = self.jacobians[idx]
            return self.fitted[idx] + np.einsum("nij,nj->ni", jac, x - self.points[idx]), jac, idx
        tx = np.empty_like(x)
        jac = np.empty((x.shape[0], self.dimension, self.dimension))
        idx = np.empty(x.shape[0], dtype=int)
        for start in range(0, x.shape[0], EVAL_CHUNK):
            chunk = x[start:start + EVAL_CHUNK]
            dist, nbrs = self._tree.query(chunk, k=m + 1)
            rho = dist[:, -1:]
            dist, nbrs = dist[:, :m], nbrs[:, :m]
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.where(rho > 0, (1.0 - (dist / np.where(rho > 0, rho, 1.0)) ** 2) ** 2, 0.0)
            w = np.maximum(w, 0.0)
            empty = w.sum(axis=1) <= 0
            w[empty, 0] = 1.0
            w /= w.sum(axis=1, keepdims=True)
            local = self.fitted[nbrs] + np.einsum("nkij,nkj->nki", self.jacobians[nbrs], chunk[:, None, :] - self.points[nbrs])
            tx[start:start + EVAL_CHUNK] = np.einsum("nk,nki->ni", w, local)
            jac[start:start + EVAL_CHUNK] = np.einsum("nk,nkij->nij", w, self.jacobians[nbrs])
            idx[start:start + EVAL_CHUNK] = nbrs[:, 0]
        return tx, jac, idx

    def within(self, center: np.ndarray, radius: float) -> np.ndarray:
        return np.asarray(self._tree.query_ball_point(center, radius), dtype=int)

    def translated(self, shift: np.ndarray) -> "BrenierField":
        shift = np.asarray(shift, dtype=float)
        return BrenierField(
            self.points + shift, self.images + shift, self.weights, self.jacobians,
            self.eigvals, self.frames, self.d3_surrogate, self.determinants,
            self.fitted + shift, self.fit_error, self.jacobian_error,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "points": self.points, "images": self.images, "weights": self.weights,
            "jacobians": self.jacobians, "eigvals": self.eigvals, "frames": self.frames,
            "d3_surrogate": self.d3_surrogate, "determinants": self.determinants,
            "fitted": self.fitted, "fit_error": self.fit_error, "jacobian_error": self.jacobian_error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BrenierField":
        arrays = {k: np.asarray(data[k], dtype=float) for k in (
            "points", "images", "weights", "jacobians", "eigvals", "frames", "d3_surrogate")}
        optional = {k: np.asarray(data[k], dtype=float) for k in (
            "determinants", "fitted", "fit_error", "jacobian_error") if data.get(k) is not None}
        return cls(**arrays, **optional)


# =======================
# Cost Matrices and Guards
# =======================

def squared_cost_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """|x_i − y_j|² evaluated elementwise (no expansion trick, so entries are exact sums of squares)."""
    diff = x[:, None, :] - y[None, :, :]
    return np.sum(diff * diff, axis=2)


def check_masses(mu: DiscreteMeasure, nu: DiscreteMeasure, rtol: float = MASS_RTOL):
    if abs(mu.mass - nu.mass) > rtol * max(mu.mass, nu.mass):
        raise MassMismatch(mu.mass, nu.mass)
    if mu.dimension != nu.dimension:
        raise InvalidShape(f"Dimension mismatch: {mu.dimension} vs {nu.dimension}")


def _check_size(n: int, m: int):
    if n * m > SIZE_GUARD:
        raise SizeGuardExceeded(
            f"Cost matrix {n}x{m} exceeds guard {SIZE_GUARD}",
            {"n": n, "m": m, "guard": SIZE_GUARD},
        )


def solve_cost_matrix(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact optimal coupling for a cost matrix.

    Equal-count uniform weights use the assignment solver (a permutation with
    lowest-index tie-breaking); general weights use the network simplex.

    Returns:
        tuple: (rows, cols, masses)
    """
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    n, m = cost.shape
    if n == m and np.all(a == a[0]) and np.all(b == b[0]) and np.isclose(a[0], b[0], rtol=MASS_RTOL):
        rows, cols = linear_sum_assignment(cost)
        return rows, cols, a[rows].copy()
    b_scaled = b * (a.sum() / b.sum())
    plan, log = ot.emd(a, b_scaled, cost, numItermax=max(100_000, 50 * n * m), log=True)
    if log.get("result_code", 1) != 1:
        raise NonConvergence(0, float("nan"), f"Network simplex stopped: {log.get('warning')}")
    rows, cols = np.nonzero(plan > 0)
    return rows, cols, plan[rows, cols]


def solve_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, cost_exponent: int = 2) -> TransportPlan:
    """
    Exact optimal transport plan for the quadratic cost.

    Raises:
        MassMismatch: If the measures have different masses
        SizeGuardExceeded: If the cost matrix would exceed the guard
    """
    if cost_exponent != 2:
        raise InvalidShape(f"Only the quadratic cost is supported, got exponent {cost_exponent}")
    check_masses(mu, nu)
    _check_size(mu.size, nu.size)
    cost = squared_cost_matrix(mu.points, nu.points)
    rows, cols, masses = solve_cost_matrix(mu.weights, nu.weights, cost)
    total = float(np.sum(masses * cost[rows, cols]))
    logger.debug(f"Exact OT {mu.size}x{nu.size}: cost {total:.6g}")
    return TransportPlan(mu, nu, rows, cols, masses, total)


# =======================
# Entropic Solver
# =======================

def default_epsilon_schedule(scale: float, final: float = 3e-4, steps: int = 8) -> List[float]:
    return list(scale * np.geomspace(1.0, final, steps))


def _round_to_marginals(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.minimum(np.where(plan.sum(1) > 0, a / plan.sum(1), 1.0), 1.0)
        plan = plan * x[:, None]
        y = np.minimum(np.where(plan.sum(0) > 0, b / plan.sum(0), 1.0), 1.0)
        plan = plan * y[None, :]
    err_a = a - plan.sum(1)
    err_b = b - plan.sum(0)
    total = err_a.sum()
    if total > 0:
        plan = plan + np.outer(err_a, err_b) / total
    return plan


def solve_entropic(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    epsilon_schedule: Optional[Sequence[float]] = None,
    max_iter: int = 5000,
    tol: float = 1e-9,
) -> TransportPlan:
    """
    Approximate plan by log-domain Sinkhorn with ε-scaling.

    The final iterate is rounded onto the exact marginals and the duality gap is
    certified with c-transformed (feasible) dual potentials.

    Raises:
        MassMismatch: If the measures have different masses
        NonConvergence: If the last stage leaves a large marginal violation
    """
    check_masses(mu, nu)
    mass = mu.mass
    a = mu.weights / mass
    b = nu.weights / nu.mass
    cost = squared_cost_matrix(mu.points, nu.points)
    scale = float(cost.max()) or 1.0
    schedule = list(epsilon_schedule) if epsilon_schedule else default_epsilon_schedule(scale)

    log_u = np.zeros(a.size)
    log_v = np.zeros(b.size)
    prev_reg = None
    err = np.inf
    iterations = 0
    plan = None
    for reg in schedule:
        if prev_reg is not None:
            log_u, log_v = log_u * prev_reg / reg, log_v * prev_reg / reg
        plan, log = ot.sinkhorn(
            a, b, cost, reg, method="sinkhorn_log", numItermax=max_iter,
            stopThr=tol, log=True, warn=False, warmstart=(log_u, log_v),
        )
        log_u, log_v = log["log_u"], log["log_v"]
        iterations += int(log.get("niter", max_iter))
        err = float(log["err"][-1]) if log.get("err") else np.inf
        prev_reg = reg
        logger.debug(f"Sinkhorn stage reg={reg:.3e}: marginal error {err:.3e}")

    if not np.isfinite(err) or err > 1e-3:
        raise NonConvergence(iterations, err)

    plan = _round_to_marginals(plan, a, b)
    f = prev_reg * log_u
    g = np.min(cost - f[:, None], axis=0)
    f = np.min(cost - g[None, :], axis=1)
    dual = float(a @ f + b @ g)
    primal = float(np.sum(plan * cost))

    keep = plan > 1e-16
    rows, cols = np.nonzero(keep)
    masses = plan[rows, cols] * mass
    total = float(np.sum(masses * cost[rows, cols]))
    logger.info(
        f"Entropic OT {mu.size}x{nu.size}: cost {total:.6g}, duality gap {(primal - dual) * mass:.3e}, "
        f"{iterations} iterations"
    )
    return TransportPlan(
        mu, nu, rows, cols, masses, total, method="entropic",
        regularization=float(prev_reg), duality_gap=(primal - dual) * mass,
    )


def cross_validate_entropic(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    subsample: int = 400,
    seed: int = 0,
    rtol: float = 0.01,
) -> EntropicCrossCheck:
    """Solve a random equal-count subsample both ways and compare costs."""
    rng = np.random.default_rng(seed)
    k = min(subsample, mu.size, nu.size)
    i = np.sort(rng.choice(mu.size, k, replace=False))
    j = np.sort(rng.choice(nu.size, k, replace=False))
    sub_mu = DiscreteMeasure(mu.points[i], np.full(k, 1.0 / k))
    sub_nu = DiscreteMeasure(nu.points[j], np.full(k, 1.0 / k))
    exact = solve_exact(sub_mu, sub_nu).cost
    entropic = solve_entropic(sub_mu, sub_nu).cost
    gap = (entropic - exact) / exact if exact > 0 else entropic
    report = EntropicCrossCheck(
        subsample=k, exact_cost=exact, entropic_cost=entropic,
        relative_gap=gap, passed=bool(gap <= rtol),
    )
    if not report.passed:
        logger.warning(f"Entropic cross-check gap {gap:.3%} exceeds {rtol:.1%}")
    return report


def solve_transport(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    method: str = "auto",
    cross_validate: int = 400,
    seed: int = 0,
) -> TransportPlan:
    """Exact solve unless the size guard forces the entropic surrogate, cross-validated on a subsample of ``cross_validate`` points (0 skips it)."""
    if method == "exact" or (method == "auto" and mu.size * nu.size <= SIZE_GUARD):
        return solve_exact(mu, nu)
    if method not in ("auto", "entropic"):
        raise InvalidShape(f"Unknown transport method {method!r}")
    if cross_validate > 0:
        cross_validate_entropic(mu, nu, cross_validate, seed)
    return solve_entropic(mu, nu)


# =======================
# Distances
# =======================

def wasserstein_distance(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    return float(np.sqrt(max(solve_exact(mu, nu).cost, 0.0)))


def bottleneck_value(cost: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """
    Smallest threshold t such that some coupling of (a, b) only uses entries cost ≤ t.

    Binary search over the sorted distinct costs. Feasibility is a perfect
    matching for equal-count uniform weights, otherwise a zero-cost transport
    on the 0/1 indicator of entries above the threshold.
    """
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    n, m = cost.shape
    uniform = n == m and np.all(a == a[0]) and np.all(b == b[0])
    values = np.unique(cost)
    floor = max(float(np.max(np.min(cost, axis=1))), float(np.max(np.min(cost, axis=0))))
    lo = int(np.searchsorted(values, floor))
    hi = values.size - 1
    b_scaled = b * (a.sum() / b.sum())
    mass = float(a.sum())

    def feasible(threshold: float) -> bool:
        allowed = cost <= threshold
        if uniform:
            matching = maximum_bipartite_matching(csr_matrix(allowed), perm_type="column")
            return not np.any(matching == -1)
        moved = ot.emd2(a, b_scaled, (~allowed).astype(float), numItermax=max(100_000, 50 * n * m))
        return moved <= 1e-12 * mass

    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(values[mid]):
            hi = mid
        else:
            lo = mid + 1
    return float(values[lo])


def linf_distance(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """d_∞ between equal-mass measures via bottleneck assignment."""
    check_masses(mu, nu)
    _check_size(mu.size, nu.size)
    cost = spatial.distance.cdist(mu.points, nu.points)
    return bottleneck_value(cost, mu.weights, nu.weights)


# =======================
# Brenier Field Estimation
# =======================

def barycentric_images(plan: TransportPlan) -> np.ndarray:
    """T(x_i) = Σ_j π_ij y_j / w_i (exact matching for permutation plans)."""
    src, tgt = plan.source, plan.target
    images = np.zeros_like(src.points)
    np.add.at(images, plan.rows, plan.masses[:, None] * tgt.points[plan.cols])
    row_mass = np.bincount(plan.rows, weights=plan.masses, minlength=src.size)
    if plan.is_permutation():
        images[plan.rows] = tgt.points[plan.cols]
        return images
    return images / row_mass[:, None]


def _local_linear_fit(
    design: np.ndarray,
    w: np.ndarray,
    gram: np.ndarray,
    values: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Weighted least-squares affine fit of neighbor values (n, k, q) on a shared design.

    Returns:
        tuple: (coefficients (n, d+1, q), intercept standard error, slope
        standard error in Frobenius norm), errors from the weighted residual
        variance through the sandwich covariance
    """
    n, k, p = design.shape
    q = values.shape[2]
    weighted = design * w[:, :, None]
    beta = np.linalg.solve(gram, np.einsum("nki,nkq->niq", weighted, values))
    residual = values - np.einsum("nki,niq->nkq", design, beta)
    dof = max(k - p, 1) / k
    sigma2 = np.einsum("nk,nkq->n", w, residual**2) / (q * w.sum(axis=1) * dof)
    inv = np.linalg.inv(gram)
    meat = np.einsum("nki,nkj->nij", weighted, weighted)
    cov = inv @ meat @ inv
    intercept_err = np.sqrt(np.maximum(q * sigma2 * cov[:, 0, 0], 0.0))
    slope_err = np.sqrt(np.maximum(q * sigma2 * np.trace(cov[:, 1:, 1:], axis1=1, axis2=2), 0.0))
    return beta, intercept_err, slope_err


def estimate_brenier_field(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    k_neighbors: Optional[int] = None,
    plan: Optional[TransportPlan] = None,
    d3_noise_floor: float = D3_NOISE_FLOOR,
) -> BrenierField:
    """
    Estimate the Brenier map and its local Jacobians from an optimal plan.

    Barycentric images are smoothed by a Gaussian-weighted local linear
    regression over the k nearest samples. The slope is symmetrized and
    clamped into the Jacobian; the intercept becomes the fitted map value.
    ‖D³ψ‖ is the Frobenius norm of a second regression of the Jacobian field
    over the same neighborhoods, less ``d3_noise_floor`` standard errors, so
    an affine map reads zero.

    Args:
        mu, nu: Source and target measures
        k_neighbors: Neighborhood size of the weighted fits
        plan: Optional precomputed plan (otherwise solved exactly)
        d3_noise_floor: Standard errors subtracted from the D³ surrogate

    Returns:
        BrenierField: Map samples, fitted values, symmetrized clamped Jacobians, eigen-data and ‖D³ψ‖ surrogate

    Raises:
        DegenerateNeighborhood: If a local fit is rank-deficient
    """
    d = mu.dimension
    k_min = d * (d + 3) // 2
    k = k_neighbors or DEFAULT_NEIGHBORS[d]
    if k < k_min:
        raise InvalidShape(f"k_neighbors must be at least {k_min} in dimension {d}, got {k}")
    if plan is None:
        plan = solve_transport(mu, nu)
    points = mu.points
    n = points.shape[0]
    images = barycentric_images(plan)
    k = min(k, n)
    if k < d + 1:
        raise DegenerateNeighborhood(f"Only {n} samples; affine fit needs {d + 1}")

    dist, neighbors = spatial.cKDTree(points).query(points, k=k)
    dist = dist.reshape(n, k)
    neighbors = neighbors.reshape(n, k)
    scale = np.maximum(dist[:, -1:], 1e-300)
    w = np.exp(-((dist / scale) ** 2))
    design = np.concatenate([np.ones((n, k, 1)), points[neighbors] - points[:, None, :]], axis=2)
    gram = np.einsum("nki,nkj->nij", design * w[:, :, None], design)
    rank = np.linalg.matrix_rank(gram, tol=1e-12 * np.max(np.abs(gram), axis=(1, 2), keepdims=False))
    bad = np.flatnonzero(rank < d + 1)
    if bad.size:
        raise DegenerateNeighborhood(
            f"Local affine fit is rank-deficient at {bad.size} samples",
            {"samples": bad[:20].tolist()},
        )
    beta, fit_error, jacobian_error = _local_linear_fit(design, w, gram, images[neighbors])
    fitted = beta[:, 0, :]
    raw = np.swapaxes(beta[:, 1:, :], 1, 2)
    sym = 0.5 * (raw + np.swapaxes(raw, 1, 2))
    eigvals, frames = np.linalg.eigh(sym)
    clamped = int(np.sum(eigvals < EIG_FLOOR))
    if clamped:
        logger.warning(f"Clamped {clamped} Jacobian eigenvalues to {EIG_FLOOR}")
    eigvals = np.maximum(eigvals, EIG_FLOOR)
    jac = np.einsum("nij,nj,nkj->nik", frames, eigvals, frames)

    gamma, _, gamma_error = _local_linear_fit(design, w, gram, jac.reshape(n, d * d)[neighbors])
    d3 = np.maximum(np.linalg.norm(gamma[:, 1:, :].reshape(n, -1), axis=1) - d3_noise_floor * gamma_error, 0.0)
    field_ = BrenierField(
        points.copy(), images, mu.weights.copy(), jac, eigvals, frames, d3,
        fitted=fitted, fit_error=fit_error, jacobian_error=jacobian_error,
    )
    logger.info(
        f"Estimated Brenier field on {n} samples (k={k}): "
        f"λ in [{eigvals.min():.4g}, {eigvals.max():.4g}], mean det {field_.determinants.mean():.4g}, "
        f"max ‖D³ψ‖ {d3.max():.4g}, median fit error {np.median(fit_error):.3g}"
    )
    return field_


# =======================
# Audits
# =======================

def cyclical_monotonicity_check(plan: TransportPlan, pairs: int = 1000, seed: int = 0) -> MonotonicityReport:
    """Spot-check |x_i−y_i|² + |x_j−y_j|² ≤ |x_i−y_j|² + |x_j−y_i|² on random coupling pairs."""
    rng = np.random.default_rng(seed)
    x = plan.source.points[plan.rows]
    y = plan.target.points[plan.cols]
    count = plan.rows.size
    if count < 2:
        return MonotonicityReport(pairs_checked=0, worst_slack=0.0, passed=True)
    i = rng.integers(0, count, pairs)
    j = rng.integers(0, count, pairs)

    def sq(u, v):
        return np.sum((u - v) ** 2, axis=1)

    slack = sq(x[i], y[j]) + sq(x[j], y[i]) - sq(x[i], y[i]) - sq(x[j], y[j])
    scale = 1e-9 * (sq(x[i], y[j]) + sq(x[j], y[i]) + 1e-300)
    bad = np.flatnonzero(slack < -scale)
    violations = [f"couplings ({int(i[b])}, {int(j[b])}): slack {slack[b]:.3e}" for b in bad[:50]]
    return MonotonicityReport(
        pairs_checked=int(pairs), violations=violations,
        worst_slack=float(slack.min()), passed=bad.size == 0,
    )


def map_monotonicity_check(field_: BrenierField, k_neighbors: int = 8, tol: float = 1e-6) -> MonotonicityReport:
    """⟨T(x_i)−T(x_j), x_i−x_j⟩ ≥ −tol·|x_i−x_j|² over neighbor pairs; also reports mean det DT."""
    k = min(k_neighbors, field_.size)
    _, neighbors = spatial.cKDTree(field_.points).query(field_.points, k=k)
    neighbors = neighbors.reshape(field_.size, k)
    i = np.repeat(np.arange(field_.size), k)
    j = neighbors.reshape(-1)
    mask = i != j
    i, j = i[mask], j[mask]
    dx = field_.points[i] - field_.points[j]
    dt = field_.images[i] - field_.images[j]
    sq = np.sum(dx * dx, axis=1)
    inner = np.sum(dt * dx, axis=1)
    slack = np.where(sq > 0, inner / np.where(sq > 0, sq, 1.0), 0.0)
    bad = np.flatnonzero(inner < -tol * sq)
    violations = [f"samples ({int(i[b])}, {int(j[b])}): normalized slack {slack[b]:.3e}" for b in bad[:50]]
    return MonotonicityReport(
        pairs_checked=int(i.size), violations=violations,
        worst_slack=float(slack.min()) if slack.size else 0.0,
        mean_determinant=float(np.mean(field_.determinants)),
        passed=bad.size == 0,
    )


def plan_stability_experiment(
    mu_k: Sequence[DiscreteMeasure],
    nu_k: Sequence[DiscreteMeasure],
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
) -> StabilityReport:
    """
    Coupling cost ∫|x−x̃|² + |T(x)−T_k(x̃)|² dθ_k between the reference plan and each perturbed plan.

    θ_k is composed through the optimal coupling of μ with μ_k: a pair (x, x̃)
    drawn from it carries the reference image T(x) and the perturbed image
    T_k(x̃), both barycentric images of the exact plans.
    """
    if len(mu_k) != len(nu_k):
        raise InvalidShape("mu_k and nu_k must have the same length")
    reference = barycentric_images(solve_exact(mu, nu))
    costs = []
    for k, (mk, nk) in enumerate(zip(mu_k, nu_k)):
        perturbed = barycentric_images(solve_exact(mk, nk))
        scaled = DiscreteMeasure(mk.points, mk.weights * (mu.mass / mk.mass))
        link = solve_exact(mu, scaled)
        dx = mu.points[link.rows] - mk.points[link.cols]
        dt = reference[link.rows] - perturbed[link.cols]
        costs.append(float(np.sum(link.masses * (np.sum(dx * dx, axis=1) + np.sum(dt * dt, axis=1)))))
        logger.debug(f"Stability step {k}: cost {costs[-1]:.6g}")
    return StabilityReport(costs=costs)
