from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import linalg, optimize
from scipy.integrate import solve_ivp

from ..common import run_with_fallback, setup_engine_environment
from ...errors import (
    BlowupGuard,
    InvalidShape,
    NoConvergence,
    NonConvergence,
    TangencyViolated,
)
from ...shape_utils import (
    ORTHO_TOL,
    Ellipsoid,
    ball_quadrature,
    get_cache_key,
    get_from_cache,
    save_to_cache,
    unit_ball_volume,
)

# Setup environment and logging
logger = setup_engine_environment(__file__)

RTOL = 1e-10
ATOL = 1e-12
BLOWUP_FACTOR = 1e3
CONSTRAINT_RTOL = 1e-9
DEFAULT_TIMES = 33


# Pydantic Models
class DropletInvariantReport(BaseModel):
    """Conservation checks along a droplet geodesic"""
    volume_drift: float = Field(description="max_t |Πa_j − r^d| / r^d")
    speed_drift: float = Field(description="max_t |Σȧ_j² − c²| / c²")
    action_drift: float = Field(description="Relative spread of the instantaneous action over the grid")
    min_acceleration: float = Field(description="Smallest ä_j over interior times")
    passed: bool = Field(description="All invariants within tolerance")


class BoundReport(BaseModel):
    """Sampled pressure and relative velocity against (λ̄⁴/λ̲²)·r²·d"""
    bound: float = Field(description="(λ̄⁴/λ̲²)·r²·d")
    lambda_lo: float = Field(description="λ̲ used")
    lambda_hi: float = Field(description="λ̄ used")
    min_pressure: float = Field(description="Smallest sampled pressure")
    max_pressure: float = Field(description="Largest sampled pressure")
    max_relative_speed_sq: float = Field(description="Largest sampled |∇φ − b|²")
    violations: List[str] = Field(default_factory=list, description="Failed checks")
    passed: bool = Field(description="No violations")


class NestingReport(BaseModel):
    """Euler droplet axes against the linearly interpolated Wasserstein axes"""
    max_excess: float = Field(description="max_{j,t} a_j(t) − A_j(t)")
    min_interior_gap: float = Field(description="min over interior times of min_j A_j(t) − a_j(t)")
    tolerance: float = Field(description="Allowed excess")
    passed: bool = Field(description="a_j(t) ≤ A_j(t) + tolerance everywhere")


class ActionBoundReport(BaseModel):
    """d_W² ≤ droplet action ≤ d_W² + (λ̄⁴/λ̲²)·ω_d·r^(d+2)"""
    r: float
    a_hat: List[float]
    boost: List[float]
    wasserstein_sq: float = Field(description="ω_d r^d (|b|² + |â − r̂|²/(d+2))")
    action: float = Field(description="ω_d r^d (|b|² + c²/(d+2))")
    upper_bound: float = Field(description="d_W² + (λ̄⁴/λ̲²) ω_d r^(d+2)")
    speed: float = Field(description="Geodesic speed c")
    lower_ok: bool
    upper_ok: bool
    passed: bool


# Domain Types
@dataclass(frozen=True)
class DropletGeodesic:
    """
    Constant-speed geodesic a(t) on the surface Πa_j = r^d.

    ``solution`` keeps the dense log-coordinate ODE solution when available so
    fields can be evaluated between grid times.
    """

    r: float
    times: np.ndarray
    a: np.ndarray
    adot: np.ndarray
    beta_dot: np.ndarray
    beta: np.ndarray
    speed: float
    solution: Any = field(default=None, repr=False, compare=False)

    @property
    def dimension(self) -> int:
        return self.a.shape[1]

    @property
    def addot(self) -> np.ndarray:
        return 2.0 * self.beta_dot[:, None] / self.a

    @property
    def start(self) -> np.ndarray:
        return self.a[0]

    @property
    def end(self) -> np.ndarray:
        return self.a[-1]

    def state(self, t: float) -> Tuple[np.ndarray, np.ndarray, float, float]:
        """(a, ȧ, β̇, β) at time t."""
        if self.solution is not None:
            return _unpack(self.solution(t), self.dimension, self.r)
        if self.speed == 0.0:
            return self.a[0], self.adot[0], 0.0, 0.0
        a = np.array([np.interp(t, self.times, self.a[:, j]) for j in range(self.dimension)])
        adot = np.array([np.interp(t, self.times, self.adot[:, j]) for j in range(self.dimension)])
        return a, adot, float(np.interp(t, self.times, self.beta_dot)), float(np.interp(t, self.times, self.beta))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "r": self.r,
            "times": self.times,
            "a": self.a,
            "adot": self.adot,
            "beta_dot": self.beta_dot,
            "beta": self.beta,
            "c": self.speed,
            "action": droplet_action(self),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DropletGeodesic":
        """Rebuild from stored arrays, re-integrating from a(0), ȧ(0) for dense output."""
        a = np.asarray(data["a"], dtype=float)
        adot = np.asarray(data["adot"], dtype=float)
        times = np.asarray(data["times"], dtype=float)
        if float(data["c"]) > 0:
            return geodesic_ivp(float(data["r"]), a[0], adot[0], t_end=float(times[-1]), times=times)
        return cls(
            float(data["r"]), times, a, adot,
            np.asarray(data["beta_dot"], dtype=float), np.asarray(data["beta"], dtype=float), 0.0,
        )


@dataclass(frozen=True)
class BoostedDroplet:
    """Droplet rotated by R, started at start_center and translated with velocity b."""

    geodesic: DropletGeodesic
    boost: np.ndarray
    start_center: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        d = self.geodesic.dimension
        rot = np.asarray(self.rotation, dtype=float)
        if rot.shape != (d, d) or np.max(np.abs(rot.T @ rot - np.eye(d))) > ORTHO_TOL:
            raise InvalidShape("Droplet rotation must be orthogonal")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "boost", np.asarray(self.boost, dtype=float).reshape(d))
        object.__setattr__(self, "start_center", np.asarray(self.start_center, dtype=float).reshape(d))

    @property
    def dimension(self) -> int:
        return self.geodesic.dimension

    @property
    def r(self) -> float:
        return self.geodesic.r

    @property
    def volume(self) -> float:
        return unit_ball_volume(self.dimension) * self.r**self.dimension

    def center(self, t: float) -> np.ndarray:
        return self.start_center + t * self.boost

    def local(self, y: np.ndarray, t: float) -> np.ndarray:
        """x = Rᵀ(y − y₀ − bt) for points y of shape (N, d)."""
        return (np.atleast_2d(y) - self.center(t)) @ self.rotation

    def fields(self, y: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Boosted potential, velocity and pressure at points y.

        φ̂ = φ(x, t) + b·(y − y₀ − bt) + ½|b|²t, v̂ = b + R∇φ(x, t), p̂ = p(x, t).
        """
        shifted = np.atleast_2d(y) - self.center(t)
        x = shifted @ self.rotation
        phi, v, p = droplet_fields(self.geodesic, x, t)
        phi_hat = phi + shifted @ self.boost + 0.5 * float(self.boost @ self.boost) * t
        return phi_hat, self.boost + v @ self.rotation.T, p

    def ellipsoid(self, t: float) -> Ellipsoid:
        a, _, _, _ = self.geodesic.state(t)
        return Ellipsoid(self.center(t), a, self.rotation)

    def wasserstein_ellipsoid(self, t: float) -> Ellipsoid:
        return Ellipsoid(self.center(t), wasserstein_axes(self.geodesic, t), self.rotation)

    def lagrangian(self, labels: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Positions, velocities and pressures of unit-ball labels z at time t."""
        a, adot, beta_dot, _ = self.geodesic.state(t)
        positions = self.center(t) + (labels * a) @ self.rotation.T
        velocities = self.boost + (labels * adot) @ self.rotation.T
        pressure = beta_dot * (1.0 - np.sum(labels**2, axis=1))
        return positions, velocities, pressure

    def mean_velocity(self, t: float, n_radial: int = 8) -> np.ndarray:
        labels, weights = ball_quadrature(self.dimension, n_radial)
        _, velocities, _ = self.lagrangian(labels, t)
        return weights @ velocities / weights.sum()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "geodesic": self.geodesic.to_dict(),
            "boost": self.boost,
            "start_center": self.start_center,
            "rotation": self.rotation,
            "action": boosted_action(self),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BoostedDroplet":
        return cls(
            DropletGeodesic.from_dict(data["geodesic"]),
            np.asarray(data["boost"], dtype=float),
            np.asarray(data["start_center"], dtype=float),
            np.asarray(data["rotation"], dtype=float),
        )


# =======================
# Log-coordinate Integrator
# =======================

def _rhs(t, y, d):
    # y = (u, w = u̇, β) with a_j = exp(u_j)
    u, w = y[:d], y[d:2 * d]
    e = np.exp(-2.0 * u)
    beta_dot = 0.5 * np.dot(w, w) / np.sum(e)
    return np.concatenate([w, 2.0 * beta_dot * e - w * w, [beta_dot]])


def _unpack(y: np.ndarray, d: int, r: float) -> Tuple[np.ndarray, np.ndarray, float, float]:
    u = y[:d] - (np.sum(y[:d]) - d * np.log(r)) / d
    w = y[d:2 * d] - np.mean(y[d:2 * d])
    a = np.exp(u)
    beta_dot = 0.5 * float(np.dot(w, w) / np.sum(np.exp(-2.0 * u)))
    return a, a * w, beta_dot, float(y[2 * d])


def _integrate(r: float, u0: np.ndarray, w0: np.ndarray, t_end: float, t_eval=None, dense: bool = True,
               rtol: float = RTOL, atol: float = ATOL):
    d = u0.size
    ceiling = np.log(BLOWUP_FACTOR * r)

    def blowup(t, y, d):
        return ceiling - np.max(y[:d])

    blowup.terminal = True
    blowup.direction = -1
    y0 = np.concatenate([u0, w0, [0.0]])
    sol = solve_ivp(
        _rhs, (0.0, t_end), y0, method="DOP853", t_eval=t_eval, dense_output=dense,
        events=blowup, rtol=rtol, atol=atol, args=(d,),
    )
    if sol.status == 1:
        raise BlowupGuard(
            f"Semi-axis exceeded {BLOWUP_FACTOR:g}·r at t={sol.t_events[0][0]:.4g}",
            {"t": float(sol.t_events[0][0]), "r": r},
        )
    if sol.status < 0:
        raise NonConvergence(int(sol.nfev), float("nan"), f"Droplet integration failed: {sol.message}")
    return sol


def _check_on_surface(r: float, a: np.ndarray, name: str):
    if r <= 0 or not np.isfinite(r):
        raise InvalidShape(f"Volume radius must be positive, got {r}")
    if np.any(a <= 0):
        raise InvalidShape(f"{name} semi-axes must be positive, got {a.tolist()}")
    d = a.size
    if abs(np.prod(a) - r**d) > CONSTRAINT_RTOL * r**d:
        raise InvalidShape(
            f"{name} is off the constraint surface: Πa = {np.prod(a)!r}, r^d = {r**d!r}",
            {"product": float(np.prod(a)), "target": r**d},
        )


@dataclass(frozen=True)
class _ScaledSolution:
    base: Any
    scale: float
    d: int

    def __call__(self, t):
        y = np.array(self.base(t), dtype=float)
        y[:self.d] += np.log(self.scale)
        y[2 * self.d] *= self.scale**2
        return y


def scaled_geodesic(g: DropletGeodesic, s: float) -> DropletGeodesic:
    """Geodesic for (s·r, s·a): axes and speed scale by s, β̇ and β by s²."""
    solution = None if g.solution is None else _ScaledSolution(g.solution, float(s), g.dimension)
    return DropletGeodesic(
        g.r * s, g.times, g.a * s, g.adot * s, g.beta_dot * s**2, g.beta * s**2, g.speed * s, solution=solution,
    )


def constant_geodesic(r: float, a: np.ndarray, times: Optional[np.ndarray] = None) -> DropletGeodesic:
    times = np.linspace(0.0, 1.0, DEFAULT_TIMES) if times is None else np.asarray(times, dtype=float)
    n = times.size
    return DropletGeodesic(
        float(r), times, np.tile(a, (n, 1)), np.zeros((n, a.size)), np.zeros(n), np.zeros(n), 0.0,
    )


def geodesic_ivp(
    r: float,
    a0: Sequence[float],
    adot0: Sequence[float],
    t_end: float = 1.0,
    times: Optional[Sequence[float]] = None,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> DropletGeodesic:
    """
    Integrate the droplet geodesic equations a_j ä_j = 2β̇ from (a0, ȧ0).

    Integration runs in log coordinates u_j = log a_j, where the constraint is
    the hyperplane Σu_j = d·log r; each output is renormalized onto it.

    Raises:
        InvalidShape: If a0 is off the constraint surface
        TangencyViolated: If Σ ȧ0_j/a0_j ≠ 0
        BlowupGuard: If a semi-axis exceeds 10³·r
    """
    a0 = np.asarray(a0, dtype=float).reshape(-1)
    adot0 = np.asarray(adot0, dtype=float).reshape(-1)
    _check_on_surface(r, a0, "a0")
    w0 = adot0 / a0
    scale = max(1.0, float(np.linalg.norm(w0)))
    if abs(np.sum(w0)) > CONSTRAINT_RTOL * scale:
        raise TangencyViolated(
            f"Initial velocity is not tangent: Σ ȧ/a = {np.sum(w0):.3e}",
            {"tangency": float(np.sum(w0))},
        )
    w0 = w0 - np.mean(w0)
    times = np.linspace(0.0, t_end, DEFAULT_TIMES) if times is None else np.asarray(times, dtype=float)
    if not np.any(w0):
        return constant_geodesic(r, a0, times)
    d = a0.size
    u0 = np.log(a0)
    sol = _integrate(r, u0, w0, float(times[-1]), t_eval=times, rtol=rtol, atol=atol)
    states = [_unpack(sol.y[:, k], d, r) for k in range(times.size)]
    a = np.array([s[0] for s in states])
    adot = np.array([s[1] for s in states])
    beta_dot = np.array([s[2] for s in states])
    beta = np.array([s[3] for s in states])
    speed = float(np.linalg.norm(a0 * w0))
    return DropletGeodesic(float(r), times, a, adot, beta_dot, beta, speed, solution=sol.sol)


# =======================
# Boundary Value Problem
# =======================

def _tangent_basis(d: int) -> np.ndarray:
    return linalg.null_space(np.ones((1, d)))


def _shoot(r, u0, u1, guess_w, basis, tol, max_newton, times) -> DropletGeodesic:
    d = u0.size

    def residual(s):
        sol = _integrate(r, u0, basis @ s, 1.0, t_eval=None, dense=False)
        return basis.T @ (sol.y[:d, -1] - u1)

    result = optimize.root(
        residual, basis.T @ guess_w, method="hybr",
        options={"xtol": 1e-14, "maxfev": max_newton * (d + 1)},
    )
    a0 = np.exp(u0)
    geodesic = geodesic_ivp(r, a0, a0 * (basis @ result.x), times=times)
    error = float(np.max(np.abs(geodesic.end - np.exp(u1))))
    if error > tol:
        raise NoConvergence(error, f"Shooting stopped with endpoint error {error:.3e} ({result.message})")
    return geodesic


def _energy_guess(r, u0, u1, basis, max_descent, nodes) -> np.ndarray:
    """Minimize the discrete energy Σ|a_{k+1} − a_k|²/Δt in the hyperplane; return the initial log-velocity."""
    d = u0.size
    dt = 1.0 / nodes
    offset = np.log(r) * np.ones(d)
    s0, s1 = basis.T @ u0, basis.T @ u1
    frac = np.linspace(0.0, 1.0, nodes + 1)[1:-1, None]
    x0 = ((1 - frac) * s0 + frac * s1).reshape(-1)

    def energy(x):
        s = np.vstack([s0, x.reshape(nodes - 1, d - 1), s1])
        a = np.exp(offset + s @ basis.T)
        diff = np.diff(a, axis=0)
        grad_u = np.zeros_like(a)
        grad_u[1:] += 2.0 * diff * a[1:] / dt
        grad_u[:-1] -= 2.0 * diff * a[:-1] / dt
        return float(np.sum(diff**2) / dt), (grad_u[1:-1] @ basis).reshape(-1)

    result = optimize.minimize(energy, x0, jac=True, method="L-BFGS-B", options={"maxiter": max_descent})
    if not np.all(np.isfinite(result.x)):
        raise NoConvergence(float("nan"), "Energy minimization diverged")
    s_first = result.x.reshape(nodes - 1, d - 1)[0]
    logger.debug(f"Energy minimization: {result.nit} iterations, energy {result.fun:.6g}")
    return basis @ (s_first - s0) / dt


def geodesic_bvp(
    r: float,
    a_start: Sequence[float],
    a_end: Sequence[float],
    tol: Optional[float] = None,
    times: Optional[Sequence[float]] = None,
    max_newton: int = 200,
    max_descent: int = 5000,
    nodes: int = 64,
    cache_dir: Optional[str] = None,
) -> DropletGeodesic:
    """
    Geodesic on Πa_j = r^d connecting a_start at t=0 to a_end at t=1.

    Shooting on the initial log-velocity (Powell hybrid, damped Newton type)
    from the straight segment in log coordinates, falling back to a discrete
    energy minimization whose initial velocity seeds a second shooting pass.

    Raises:
        InvalidShape: If an endpoint is off the constraint surface
        NoConvergence: If every strategy leaves an endpoint error above tol
    """
    a_start = np.asarray(a_start, dtype=float).reshape(-1)
    a_end = np.asarray(a_end, dtype=float).reshape(-1)
    if a_start.size != a_end.size:
        raise InvalidShape("Endpoints have different dimensions")
    _check_on_surface(r, a_start, "a_start")
    _check_on_surface(r, a_end, "a_end")
    tol = 1e-8 * r if tol is None else tol
    times = np.linspace(0.0, 1.0, DEFAULT_TIMES) if times is None else np.asarray(times, dtype=float)
    d = a_start.size
    if d == 1 or np.array_equal(a_start, a_end):
        return constant_geodesic(r, a_start, times)

    u0, u1 = np.log(a_start), np.log(a_end)
    basis = _tangent_basis(d)

    cache_key = get_cache_key("droplet_bvp", r=r, a_start=a_start, a_end=a_end, tol=tol)
    cached = get_from_cache(cache_key, cache_dir)
    if cached is not None:
        geodesic = geodesic_ivp(r, a_start, a_start * np.asarray(cached["w0"]), times=times)
        if np.max(np.abs(geodesic.end - a_end)) <= tol:
            logger.debug(f"Using cached geodesic {cache_key[1][:12]}")
            return geodesic

    geodesic = run_with_fallback(
        [
            ("shooting", lambda: _shoot(r, u0, u1, u1 - u0, basis, tol, max_newton, times)),
            ("energy minimization", lambda: _shoot(
                r, u0, u1, _energy_guess(r, u0, u1, basis, max_descent, nodes), basis, tol, max_newton, times)),
        ],
        "geodesic_bvp",
        logger,
    )
    save_to_cache(cache_key, {"w0": geodesic.adot[0] / geodesic.a[0]}, cache_dir)
    return geodesic


# =======================
# Fields and Actions
# =======================

def droplet_fields(g: DropletGeodesic, x: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Potential, velocity and pressure of the droplet at local points x (N, d).

    φ = ½Σ ȧ_j x_j²/a_j − β(t), v_j = ȧ_j x_j/a_j, p = β̇(1 − Σ x_j²/a_j²) inside
    the ellipsoid and 0 outside.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a, adot, beta_dot, beta = g.state(t)
    phi = 0.5 * np.sum(adot * x**2 / a, axis=1) - beta
    v = adot * x / a
    level = 1.0 - np.sum((x / a) ** 2, axis=1)
    p = np.where(level >= 0, beta_dot * level, 0.0)
    return phi, v, p


def wasserstein_axes(g: DropletGeodesic, t) -> np.ndarray:
    """A(t) = (1 − t)a(0) + t·a(1)."""
    t = np.asarray(t, dtype=float)
    return (1.0 - t[..., None]) * g.start + t[..., None] * g.end


def droplet_action(g: DropletGeodesic) -> float:
    d = g.dimension
    return unit_ball_volume(d) * g.r**d * g.speed**2 / (d + 2)


def boosted_action(droplet: BoostedDroplet) -> float:
    """ω_d r^d (|b|² + c²/(d+2))."""
    d = droplet.dimension
    g = droplet.geodesic
    return unit_ball_volume(d) * g.r**d * (float(droplet.boost @ droplet.boost) + g.speed**2 / (d + 2))


def action_profile(g: DropletGeodesic) -> np.ndarray:
    """Instantaneous ∫|v|² at every grid time."""
    d = g.dimension
    return unit_ball_volume(d) * g.r**d * np.sum(g.adot**2, axis=1) / (d + 2)


def action_by_quadrature(
    g: DropletGeodesic,
    boost: Optional[np.ndarray] = None,
    n_radial: int = 16,
) -> float:
    """Space-time quadrature of ∫∫|v|² over the moving ellipsoid (trapezoid in time)."""
    d = g.dimension
    labels, weights = ball_quadrature(d, n_radial)
    b = np.zeros(d) if boost is None else np.asarray(boost, dtype=float)
    kinetic = np.array([
        g.r**d * weights @ np.sum((b + labels * g.adot[k]) ** 2, axis=1) for k in range(g.times.size)
    ])
    return float(np.trapezoid(kinetic, g.times))


# =======================
# Audits
# =======================

def invariant_report(g: DropletGeodesic, tol_volume: float = 1e-9, tol_speed: float = 1e-8) -> DropletInvariantReport:
    d = g.dimension
    volume_drift = float(np.max(np.abs(np.prod(g.a, axis=1) - g.r**d)) / g.r**d)
    profile = action_profile(g)
    if g.speed > 0:
        speed_drift = float(np.max(np.abs(np.sum(g.adot**2, axis=1) - g.speed**2)) / g.speed**2)
        action_drift = float((profile.max() - profile.min()) / profile.max())
        min_acc = float(np.min(g.addot[1:-1])) if g.times.size > 2 else float(np.min(g.addot))
    else:
        speed_drift = float(np.max(np.sum(g.adot**2, axis=1)))
        action_drift = 0.0
        min_acc = 0.0
    passed = volume_drift <= tol_volume and speed_drift <= tol_speed and (g.speed == 0 or min_acc > 0)
    return DropletInvariantReport(
        volume_drift=volume_drift, speed_drift=speed_drift, action_drift=action_drift,
        min_acceleration=min_acc, passed=passed,
    )


def planar_residuals(g: DropletGeodesic) -> Tuple[float, float]:
    """
    Closed-form checks of the elliptical droplet (d = 2).

    Returns:
        tuple: (max |ȧ/a − c/√(a²+b²)|, max |β̇ − (c·ab/(a²+b²))²|) with the
        first axis oriented to grow
    """
    if g.dimension != 2:
        raise InvalidShape("planar_residuals needs a two-dimensional droplet")
    a, b = g.a[:, 0], g.a[:, 1]
    sign = 1.0 if g.adot[0, 0] >= 0 else -1.0
    norm = np.sqrt(a**2 + b**2)
    rate = np.max(np.abs(sign * g.adot[:, 0] / a - g.speed / norm))
    beta = np.max(np.abs(g.beta_dot - (g.speed * a * b / norm**2) ** 2))
    return float(rate), float(beta)


def time_reversal_gap(g: DropletGeodesic) -> float:
    """Integrate back from (a(1), −ȧ(1)) and compare with a(0)."""
    if g.speed == 0:
        return 0.0
    back = geodesic_ivp(g.r, g.end, -g.adot[-1], t_end=float(g.times[-1]), times=[0.0, float(g.times[-1])])
    return float(np.max(np.abs(back.end - g.start)))


def bound_check(
    g: DropletGeodesic,
    lambda_lo: Optional[float] = None,
    lambda_hi: Optional[float] = None,
    n_radial: int = 8,
) -> BoundReport:
    """
    Verify 0 ≤ p ≤ (λ̄⁴/λ̲²)r²d and |∇φ − b|² ≤ (λ̄⁴/λ̲²)r²d on a space-time sample.

    Defaults take λ̲, λ̄ as the extreme ratios a_j(1)/r. The relative velocity
    of a boosted droplet equals the unboosted one, so the boost never enters.
    """
    d = g.dimension
    ratios = g.end / g.r
    lam_lo = float(ratios.min()) if lambda_lo is None else float(lambda_lo)
    lam_hi = float(ratios.max()) if lambda_hi is None else float(lambda_hi)
    bound = lam_hi**4 / lam_lo**2 * g.r**2 * d
    labels, _ = ball_quadrature(d, n_radial)
    boundary = np.eye(d)
    labels = np.vstack([labels, boundary, -boundary])
    radial = np.sum(labels**2, axis=1)
    pressures = g.beta_dot[:, None] * (1.0 - radial[None, :])
    speeds = np.array([np.max(np.sum((labels * g.adot[k]) ** 2, axis=1)) for k in range(g.times.size)])
    violations = []
    if pressures.min() < -1e-10:
        violations.append(f"negative pressure {pressures.min():.3e}")
    if pressures.max() > bound:
        violations.append(f"pressure {pressures.max():.6g} exceeds bound {bound:.6g}")
    if speeds.max() > bound:
        violations.append(f"|∇φ − b|² = {speeds.max():.6g} exceeds bound {bound:.6g}")
    return BoundReport(
        bound=bound, lambda_lo=lam_lo, lambda_hi=lam_hi,
        min_pressure=float(pressures.min()), max_pressure=float(pressures.max()),
        max_relative_speed_sq=float(speeds.max()), violations=violations, passed=not violations,
    )


def nesting_check(g: DropletGeodesic, tol: float = 1e-10) -> NestingReport:
    """a_j(t) ≤ A_j(t) = (1 − t)a_j(0) + t·a_j(1) for all j and grid times."""
    t = (g.times - g.times[0]) / (g.times[-1] - g.times[0]) if g.times[-1] > g.times[0] else g.times
    gap = wasserstein_axes(g, t) - g.a
    interior = gap[1:-1] if gap.shape[0] > 2 else gap
    return NestingReport(
        max_excess=float(np.max(-gap)),
        min_interior_gap=float(np.min(interior)),
        tolerance=tol,
        passed=bool(np.all(-gap <= tol)),
    )


def wasserstein_droplet_distance_sq(r: float, a_hat: np.ndarray, b: np.ndarray) -> float:
    """ω_d r^d (|b|² + |â − r̂|²/(d+2)) between a ball of radius r and the ellipsoid â moved by b."""
    d = a_hat.size
    return unit_ball_volume(d) * r**d * (float(b @ b) + float(np.sum((a_hat - r) ** 2)) / (d + 2))


def action_bound_check(
    r: float,
    a_hat: Sequence[float],
    b: Sequence[float],
    cache_dir: Optional[str] = None,
) -> Tuple[ActionBoundReport, DropletGeodesic]:
    """
    Solve the droplet from the ball of radius r to â and sandwich its action.

    Returns:
        tuple: (report, geodesic)
    """
    a_hat = np.asarray(a_hat, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    d = a_hat.size
    geodesic = geodesic_bvp(r, np.full(d, float(r)), a_hat, cache_dir=cache_dir)
    w_sq = wasserstein_droplet_distance_sq(r, a_hat, b)
    omega = unit_ball_volume(d)
    action = omega * r**d * (float(b @ b) + geodesic.speed**2 / (d + 2))
    lam = a_hat / r
    upper = w_sq + lam.max() ** 4 / lam.min() ** 2 * omega * r ** (d + 2)
    lower_ok = action >= w_sq * (1.0 - 1e-9)
    upper_ok = action <= upper
    report = ActionBoundReport(
        r=float(r), a_hat=a_hat.tolist(), boost=b.tolist(), wasserstein_sq=w_sq, action=action,
        upper_bound=upper, speed=geodesic.speed, lower_ok=lower_ok, upper_ok=upper_ok,
        passed=lower_ok and upper_ok,
    )
    return report, geodesic
