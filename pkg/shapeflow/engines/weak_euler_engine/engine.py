from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from ..common import setup_engine_environment
from ..droplet_engine.engine import BoostedDroplet, boosted_action
from ..interpolation_engine.engine import DensityPath
from ..spray_engine.engine import EulerSpray, droplets_path, spray_path
from ...errors import InvalidShape, QuadratureMismatch
from ...shape_utils import ball_quadrature

# Setup environment and logging
logger = setup_engine_environment(__file__)

BUMP_POWER = 4
DEFAULT_BANK_SIZE = 20
RATIO_RANGE = (3.2, 4.8)


# Pydantic Models
class WeakResidualReport(BaseModel):
    """Weak continuity and momentum residuals per test function"""
    functions: int
    continuity: List[float] = Field(description="|∫∫ρ(∂_t q + v·∇q) − [∫ρq]₀¹| per function")
    momentum: List[float] = Field(description="Weak momentum residual per function")
    pressureless: bool = Field(description="Momentum residual omitted the pressure term")
    max_continuity: float
    max_momentum: float
    continuity_ratios: Optional[List[float]] = Field(default=None, description="Coarse over fine residual under refinement")
    momentum_ratios: Optional[List[float]] = Field(default=None, description="Coarse over fine residual under refinement")
    ratios_in_range: Optional[int] = Field(default=None, description="Functions whose both ratios fall in the second-order window")


class WeakStarReport(BaseModel):
    """Test-function gaps between a spray path and the displacement interpolant"""
    density_gaps: List[float] = Field(description="|⟨ρ^ε − ρ, q⟩| per function")
    momentum_gaps: List[float] = Field(description="|⟨ρ^εv^ε − ρv, ṽ⟩| per function")
    stress_gaps: List[float] = Field(description="|⟨ρ^εv^ε⊗v^ε − ρv⊗v, q e⊗e⟩| per function")
    sup_pressure: float = Field(description="max p^ε over particles and times")
    particle_gap: float = Field(description="sup |X^ε − T_t| + |Ẋ^ε − Ṫ_t| over shared labels")


class MeanVelocityReport(BaseModel):
    """Per-droplet mean velocity constancy and action decomposition"""
    droplets: int
    mean_velocities: List[List[float]] = Field(description="Spatial mean of v at t = 0 per droplet")
    max_drift: float = Field(description="max_t |v̄(t) − v̄(0)| over droplets")
    decomposition_error: float = Field(description="max relative gap of ∫∫|v−v̄|² + |Ω||v̄|² against the closed-form action")
    total_action: float = Field(description="Sum of the per-droplet decompositions")
    passed: bool


# Domain Types
@dataclass(frozen=True)
class TestFunctionBank:
    """
    Space-time test functions q(x, t) = A·Π_j (1 − s_j²)⁴·(1 + α(t − t₀) + γ(t − t₀)²),
    s_j = (x_j − c_j)/w_j, supported in the box |x_j − c_j| < w_j. Vector test
    functions are ṽ = q·e with a unit direction e per function.
    """

    __test__ = False

    centers: np.ndarray
    widths: np.ndarray
    amplitudes: np.ndarray
    slopes: np.ndarray
    curvatures: np.ndarray
    pivots: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        if np.any(self.widths <= 0):
            raise InvalidShape("Test function widths must be positive")

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def dimension(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def random(
        cls,
        lower: np.ndarray,
        upper: np.ndarray,
        count: int = DEFAULT_BANK_SIZE,
        seed: int = 42,
    ) -> "TestFunctionBank":
        """Seeded bank with centers in the box and widths 0.3–0.8 of its largest extent."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        d = lower.size
        rng = np.random.default_rng(seed)
        extent = float(np.max(upper - lower)) or 1.0
        centers = lower + rng.random((count, d)) * (upper - lower)
        widths = extent * rng.uniform(0.3, 0.8, size=(count, d))
        directions = rng.normal(size=(count, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return cls(
            centers=centers,
            widths=widths,
            amplitudes=np.ones(count),
            slopes=rng.uniform(-1.0, 1.0, count),
            curvatures=rng.uniform(-1.0, 1.0, count),
            pivots=rng.random(count),
            directions=directions,
        )

    @classmethod
    def for_path(cls, path: DensityPath, count: int = DEFAULT_BANK_SIZE, seed: int = 42) -> "TestFunctionBank":
        points = np.vstack([f.positions for f in path.frames])
        return cls.random(points.min(axis=0), points.max(axis=0), count, seed)

    def scaled(self, factor: float) -> "TestFunctionBank":
        return TestFunctionBank(
            self.centers, self.widths, self.amplitudes * factor, self.slopes,
            self.curvatures, self.pivots, self.directions,
        )

    def evaluate(self, x: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Values, time derivatives and spatial gradients at points x (N, d).

        Returns:
            tuple: (q of shape (F, N), ∂_t q of shape (F, N), ∇q of shape (F, N, d))
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dimension:
            raise QuadratureMismatch(f"Points of dimension {x.shape[1]} for a {self.dimension}-d bank")
        s = (x[None, :, :] - self.centers[:, None, :]) / self.widths[:, None, :]
        inside = np.abs(s) < 1.0
        base = np.where(inside, 1.0 - s**2, 0.0)
        profile = base**BUMP_POWER
        dprofile = np.where(inside, -2 * BUMP_POWER * s * base ** (BUMP_POWER - 1), 0.0) / self.widths[:, None, :]
        space = np.prod(profile, axis=2)
        grads = np.empty_like(s)
        for j in range(self.dimension):
            others = np.prod(np.delete(profile, j, axis=2), axis=2)
            grads[:, :, j] = dprofile[:, :, j] * others
        tau = t - self.pivots
        time = 1.0 + self.slopes * tau + self.curvatures * tau**2
        dtime = self.slopes + 2.0 * self.curvatures * tau
        amp = self.amplitudes[:, None]
        q = amp * space * time[:, None]
        qt = amp * space * dtime[:, None]
        gq = amp[:, :, None] * grads * time[:, None, None]
        return q, qt, gq


# =======================
# Path Preparation
# =======================

def as_path(flow: Union[DensityPath, EulerSpray, BoostedDroplet], times=None, n_radial: int = 6) -> DensityPath:
    if isinstance(flow, DensityPath):
        return flow
    if isinstance(flow, EulerSpray):
        return spray_path(flow, times, n_radial)
    if isinstance(flow, BoostedDroplet):
        return droplets_path([flow], times, n_radial)
    raise QuadratureMismatch(f"Cannot build a quadrature from {type(flow).__name__}")


def _check_path(path: DensityPath, bank: TestFunctionBank):
    if path.times.size < 2:
        raise QuadratureMismatch("Weak residuals need at least two time samples")
    sizes = {f.positions.shape[0] for f in path.frames}
    if len(sizes) != 1:
        raise QuadratureMismatch(f"Frames carry different particle counts: {sorted(sizes)}")
    if path.dimension != bank.dimension:
        raise QuadratureMismatch(f"Path dimension {path.dimension} does not match bank dimension {bank.dimension}")


# =======================
# Residuals
# =======================

def continuity_residual(flow, bank: TestFunctionBank, times=None, n_radial: int = 6) -> np.ndarray:
    """
    |∫₀¹ Σ m (∂_t q + v·∇q)(X, t) dt − [Σ m q(X, t)]₀¹| per test function.

    Time integral by the trapezoid rule over the path's frames; endpoint terms
    come from the first and last frames as stored.
    """
    path = as_path(flow, times, n_radial)
    _check_path(path, bank)
    integrand = np.zeros((bank.size, path.times.size))
    for k, (t, f) in enumerate(zip(path.times, path.frames)):
        _, qt, gq = bank.evaluate(f.positions, float(t))
        integrand[:, k] = (qt + np.einsum("fnd,nd->fn", gq, f.velocities)) @ f.masses
    first, last = path.frames[0], path.frames[-1]
    start = bank.evaluate(first.positions, float(path.times[0]))[0] @ first.masses
    end = bank.evaluate(last.positions, float(path.times[-1]))[0] @ last.masses
    return np.abs(np.trapezoid(integrand, path.times, axis=1) - (end - start))


def momentum_residual(flow, bank: TestFunctionBank, pressure: Optional[bool] = None, times=None, n_radial: int = 6) -> np.ndarray:
    """
    Weak momentum residual with ṽ = q·e:

        |∫₀¹ Σ m [v·e (∂_t q + v·∇q) + p e·∇q](X, t) dt − [Σ m v·e q]₀¹|

    The pressure term uses the frames' pressure when present (``pressure=None``)
    and is dropped for the pressureless system (``pressure=False``).
    """
    path = as_path(flow, times, n_radial)
    _check_path(path, bank)
    use_pressure = all(f.pressure is not None for f in path.frames) if pressure is None else bool(pressure)
    if use_pressure and any(f.pressure is None for f in path.frames):
        raise QuadratureMismatch("Pressure requested but the path frames carry none")
    e = bank.directions
    integrand = np.zeros((bank.size, path.times.size))
    for k, (t, f) in enumerate(zip(path.times, path.frames)):
        _, qt, gq = bank.evaluate(f.positions, float(t))
        ve = f.velocities @ e.T
        material = qt + np.einsum("fnd,nd->fn", gq, f.velocities)
        total = ve.T * material
        if use_pressure:
            total = total + np.einsum("fnd,fd->fn", gq, e) * f.pressure[None, :]
        integrand[:, k] = total @ f.masses
    first, last = path.frames[0], path.frames[-1]
    q0 = bank.evaluate(first.positions, float(path.times[0]))[0]
    q1 = bank.evaluate(last.positions, float(path.times[-1]))[0]
    start = (q0 * (first.velocities @ e.T).T) @ first.masses
    end = (q1 * (last.velocities @ e.T).T) @ last.masses
    return np.abs(np.trapezoid(integrand, path.times, axis=1) - (end - start))


def weak_residual_report(flow, bank: TestFunctionBank, pressure: Optional[bool] = None, times=None, n_radial: int = 6) -> WeakResidualReport:
    path = as_path(flow, times, n_radial)
    cont = continuity_residual(path, bank)
    mom = momentum_residual(path, bank, pressure)
    pressureless = pressure is False or any(f.pressure is None for f in path.frames)
    return WeakResidualReport(
        functions=bank.size, continuity=cont.tolist(), momentum=mom.tolist(), pressureless=pressureless,
        max_continuity=float(cont.max(initial=0.0)), max_momentum=float(mom.max(initial=0.0)),
    )


def refinement_study(
    make_path: Callable[[int], DensityPath],
    bank: TestFunctionBank,
    pressure: Optional[bool] = None,
    floor: float = 1e-13,
) -> WeakResidualReport:
    """
    Residuals at levels 0 and 1 of a caller-supplied discretization (level 1
    halves h and Δt) with the per-function coarse/fine ratios.

    Functions whose coarse residual is already below ``floor`` do not see the
    flow and count as in range.
    """
    coarse, fine = make_path(0), make_path(1)
    c0, c1 = continuity_residual(coarse, bank), continuity_residual(fine, bank)
    m0, m1 = momentum_residual(coarse, bank, pressure), momentum_residual(fine, bank, pressure)
    lo, hi = RATIO_RANGE

    def ratios(a, b):
        return np.where(b > 0, a / np.where(b > 0, b, 1.0), np.inf)

    rc, rm = ratios(c0, c1), ratios(m0, m1)
    ok_c = (c0 < floor) | ((rc >= lo) & (rc <= hi))
    ok_m = (m0 < floor) | ((rm >= lo) & (rm <= hi))
    report = WeakResidualReport(
        functions=bank.size, continuity=c1.tolist(), momentum=m1.tolist(),
        pressureless=pressure is False,
        max_continuity=float(c1.max(initial=0.0)), max_momentum=float(m1.max(initial=0.0)),
        continuity_ratios=rc.tolist(), momentum_ratios=rm.tolist(),
        ratios_in_range=int(np.sum(ok_c & ok_m)),
    )
    logger.info(f"Refinement study: {report.ratios_in_range}/{bank.size} functions with second-order ratios")
    return report


def time_refinement(path: DensityPath, bank: TestFunctionBank, pressure: Optional[bool] = None) -> WeakResidualReport:
    """Refinement study from a stored path: every other frame versus all frames (time only)."""
    if path.times.size < 3 or (path.times.size - 1) % 2:
        raise QuadratureMismatch("Time refinement needs an odd number (≥ 3) of frames")
    coarse = DensityPath(path.times[::2], path.frames[::2], labels=path.labels, action=path.action)
    return refinement_study(lambda level: coarse if level == 0 else path, bank, pressure)


# =======================
# Weak-star Diagnostics
# =======================

def weak_star_gap(spray_flow: DensityPath, interpolant: DensityPath, bank: TestFunctionBank) -> WeakStarReport:
    """
    Test-function gaps for ρ, ρv and ρv⊗v between a spray path and the
    displacement interpolant sampled on the same labels and times.
    """
    _check_path(spray_flow, bank)
    _check_path(interpolant, bank)
    if spray_flow.times.shape != interpolant.times.shape or not np.allclose(spray_flow.times, interpolant.times):
        raise QuadratureMismatch("Paths are sampled at different times")
    if spray_flow.size != interpolant.size:
        raise QuadratureMismatch(f"Paths carry {spray_flow.size} and {interpolant.size} particles")
    e = bank.directions

    def moments(path: DensityPath) -> np.ndarray:
        out = np.zeros((3, bank.size, path.times.size))
        for k, (t, f) in enumerate(zip(path.times, path.frames)):
            q = bank.evaluate(f.positions, float(t))[0]
            ve = (f.velocities @ e.T).T
            out[0, :, k] = q @ f.masses
            out[1, :, k] = (q * ve) @ f.masses
            out[2, :, k] = (q * ve**2) @ f.masses
        return np.trapezoid(out, path.times, axis=2)

    gaps = np.abs(moments(spray_flow) - moments(interpolant))
    particle = max(
        float(np.max(np.linalg.norm(a.positions - b.positions, axis=1) + np.linalg.norm(a.velocities - b.velocities, axis=1)))
        for a, b in zip(spray_flow.frames, interpolant.frames)
    )
    pressures = [float(f.pressure.max()) for f in spray_flow.frames if f.pressure is not None and f.pressure.size]
    return WeakStarReport(
        density_gaps=gaps[0].tolist(), momentum_gaps=gaps[1].tolist(), stress_gaps=gaps[2].tolist(),
        sup_pressure=max(pressures, default=0.0), particle_gap=particle,
    )


def mean_velocity_check(
    flow: Union[EulerSpray, BoostedDroplet, Sequence[BoostedDroplet]],
    times: Optional[Sequence[float]] = None,
    n_radial: int = 24,
    tol: float = 1e-6,
    rtol: float = 5e-3,
) -> MeanVelocityReport:
    """
    Per-droplet spatial mean of v is constant in time and the action splits as
    ∫∫|v − v̄|² + |Ω||v̄|² (checked against the closed form within rtol).
    """
    if isinstance(flow, EulerSpray):
        droplets = list(flow.droplets)
    elif isinstance(flow, BoostedDroplet):
        droplets = [flow]
    else:
        droplets = list(flow)
    times = np.linspace(0.0, 1.0, 17) if times is None else np.asarray(times, dtype=float)
    if not droplets:
        return MeanVelocityReport(droplets=0, mean_velocities=[], max_drift=0.0, decomposition_error=0.0,
                                  total_action=0.0, passed=True)
    d = droplets[0].dimension
    labels, weights = ball_quadrature(d, n_radial)
    means, drift, errors, total = [], 0.0, 0.0, 0.0
    for dr in droplets:
        vol_weights = weights * dr.r**d
        mean_t, spread = [], []
        for t in times:
            _, v, _ = dr.lagrangian(labels, float(t))
            v_bar = vol_weights @ v / vol_weights.sum()
            mean_t.append(v_bar)
            spread.append(vol_weights @ np.sum((v - v_bar) ** 2, axis=1))
        mean_t = np.asarray(mean_t)
        drift = max(drift, float(np.max(np.linalg.norm(mean_t - mean_t[0], axis=1))))
        decomposed = float(np.trapezoid(spread, times)) + dr.volume * float(mean_t[0] @ mean_t[0])
        exact = boosted_action(dr)
        errors = max(errors, abs(decomposed - exact) / max(exact, 1e-300))
        total += decomposed
        means.append(mean_t[0].tolist())
    passed = drift <= tol and errors <= rtol
    if not passed:
        logger.warning(f"Mean velocity check failed: drift {drift:.3e}, decomposition error {errors:.3e}")
    return MeanVelocityReport(
        droplets=len(droplets), mean_velocities=means, max_drift=drift,
        decomposition_error=errors, total_action=total, passed=passed,
    )
