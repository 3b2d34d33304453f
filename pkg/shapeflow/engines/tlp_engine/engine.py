from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy import spatial

from ..common import setup_engine_environment
from ..transport_engine.engine import (
    BrenierField,
    barycentric_images,
    bottleneck_value,
    check_masses,
    solve_cost_matrix,
    solve_exact,
)
from ...errors import InvalidShape
from ...shape_utils import DiscreteMeasure

# Setup environment and logging
logger = setup_engine_environment(__file__)


# Pydantic Models
class UniformityReport(BaseModel):
    """Geodesic TL² comparison of two interpolants through a stagnating plan"""
    times: List[float]
    position_gaps: List[float] = Field(description="∫|x − S_{k,t}(x)|² dμ_t per time")
    velocity_gaps: List[float] = Field(description="∫|v_t − v_{k,t}∘S_{k,t}|² dμ_t per time")
    tensor_gaps: List[float] = Field(description="∫|v_t⊗v_t − v_{k,t}⊗v_{k,t}∘S_{k,t}| dμ_t per time")
    sup_position: float
    sup_velocity: float
    sup_tensor: float
    velocity_spread: float = Field(description="max − min of the velocity gap over times")
    stagnation: float = Field(description="∫|x − S_k(x)|² dμ of the plan between sources")


# Domain Types
@dataclass(frozen=True)
class TLpPair:
    """A measure with one function value (scalar, vector or flattened tensor) per support point."""

    measure: DiscreteMeasure
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape[0] != self.measure.size:
            raise InvalidShape(f"{values.shape[0]} values for {self.measure.size} support points")
        values = values.reshape(self.measure.size, -1)
        if not np.all(np.isfinite(values)):
            raise InvalidShape("TL^p values must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def of_field(cls, field_: BrenierField) -> "TLpPair":
        return cls(field_.source_measure(), field_.images)

    def to_dict(self) -> Dict[str, Any]:
        return {"points": self.measure.points, "weights": self.measure.weights, "values": self.values}


def lifted_cost(a: TLpPair, b: TLpPair, p: Union[int, float]) -> np.ndarray:
    """|x − y|^p + |g₀(x) − g₁(y)|^p (p = ∞ uses |x − y| + |g₀(x) − g₁(y)|)."""
    if a.values.shape[1] != b.values.shape[1]:
        raise InvalidShape(f"Value dimensions differ: {a.values.shape[1]} vs {b.values.shape[1]}")
    space = spatial.distance.cdist(a.measure.points, b.measure.points)
    values = spatial.distance.cdist(a.values, b.values)
    if np.isinf(p):
        return space + values
    return space**p + values**p


def tlp_distance(a: TLpPair, b: TLpPair, p: Union[int, float] = 2) -> float:
    """
    TL^p distance between (μ, g₀) and (ν, g₁).

    For finite p the optimal coupling of the lifted cost is solved exactly and the
    result is raised to 1/p; p = ∞ is the bottleneck value of the lifted cost.

    Raises:
        MassMismatch: If the measures have different masses
    """
    if not (p in (1, 2) or np.isinf(p)):
        raise InvalidShape(f"p must be 1, 2 or inf, got {p}")
    check_masses(a.measure, b.measure)
    cost = lifted_cost(a, b, p)
    if np.isinf(p):
        return bottleneck_value(cost, a.measure.weights, b.measure.weights)
    rows, cols, masses = solve_cost_matrix(a.measure.weights, b.measure.weights, cost)
    total = float(np.sum(masses * cost[rows, cols]))
    return max(total, 0.0) ** (1.0 / p)


def _map_pair(mu: DiscreteMeasure, nu: DiscreteMeasure) -> TLpPair:
    return TLpPair(mu, barycentric_images(solve_exact(mu, nu)))


def map_stability_tlp(
    mu_k: Sequence[DiscreteMeasure],
    nu_k: Sequence[DiscreteMeasure],
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
) -> List[float]:
    """d_TL²((μ_k, T_k), (μ, T)) for each k, with T_k, T the barycentric optimal maps."""
    if len(mu_k) != len(nu_k):
        raise InvalidShape(f"{len(mu_k)} sources but {len(nu_k)} targets")
    reference = _map_pair(mu, nu)
    distances = [tlp_distance(_map_pair(a, b), reference, 2) for a, b in zip(mu_k, nu_k)]
    logger.info(f"Map stability over {len(distances)} steps: {', '.join(f'{d:.4g}' for d in distances)}")
    return distances


def geodesic_tlp_uniformity(
    field_: BrenierField,
    field_k: BrenierField,
    times: Optional[Sequence[float]] = None,
) -> UniformityReport:
    """
    Compare two displacement interpolants through the optimal plan S_k between
    their sources, composed on Lagrangian labels: S_{k,t} sends T_t(x) to
    T_{k,t}(x') for every coupled pair (x, x').
    """
    times = np.linspace(0.0, 1.0, 5) if times is None else np.asarray(times, dtype=float)
    plan = solve_exact(field_.source_measure(), field_k.source_measure())
    i, j, w = plan.rows, plan.cols, plan.masses
    x, tx = field_.points[i], field_.images[i]
    y, ty = field_k.points[j], field_k.images[j]
    stagnation = float(np.sum(w * np.sum((x - y) ** 2, axis=1)))
    positions, velocities, tensors = [], [], []
    for t in times:
        xt = (1.0 - t) * x + t * tx
        yt = (1.0 - t) * y + t * ty
        v = (tx - xt) / (1.0 - t) if t < 1.0 else tx - x
        vk = (ty - yt) / (1.0 - t) if t < 1.0 else ty - y
        positions.append(float(np.sum(w * np.sum((xt - yt) ** 2, axis=1))))
        velocities.append(float(np.sum(w * np.sum((v - vk) ** 2, axis=1))))
        outer = np.einsum("ni,nj->nij", v, v) - np.einsum("ni,nj->nij", vk, vk)
        tensors.append(float(np.sum(w * np.linalg.norm(outer, axis=(1, 2)))))
    return UniformityReport(
        times=times.tolist(), position_gaps=positions, velocity_gaps=velocities, tensor_gaps=tensors,
        sup_position=max(positions), sup_velocity=max(velocities), sup_tensor=max(tensors),
        velocity_spread=max(velocities) - min(velocities), stagnation=stagnation,
    )
