"""
Common utilities for shapeflow engines.
Shapes and measures, rasterization and sampling, file formats, result caching
and validation summaries shared across all engine steps.
"""

import os
import json
import math
import hashlib
import logging
from dataclasses import dataclass
from functools import singledispatch
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import spatial
from termcolor import colored

from .errors import (
    EmptySupport,
    InvalidShape,
    ResolutionTooCoarse,
    ZeroMass,
)

logging.getLogger("ot").setLevel(logging.WARNING)

logger = logging.getLogger("shape_utils")

# Values below this are exact zeros (tolerant supports).
ZERO_TOL = 1e-12
ORTHO_TOL = 1e-12

UNIT_BALL_VOLUME = {1: 2.0, 2: math.pi, 3: 4.0 * math.pi / 3.0}


# =======================
# Shape Types
# =======================

def as_point(coords: Any) -> np.ndarray:
    """Validate and copy a coordinate vector (finite, length 1 to 3)."""
    arr = np.array(coords, dtype=float).reshape(-1)
    if arr.size not in (1, 2, 3):
        raise InvalidShape(f"Unsupported dimension {arr.size}; d must be 1, 2 or 3")
    if not np.all(np.isfinite(arr)):
        raise InvalidShape(f"Point has non-finite coordinates: {arr.tolist()}")
    return arr


def unit_ball_volume(d: int) -> float:
    """Closed-form volume ω_d of the unit ball for d ≤ 3."""
    if d not in UNIT_BALL_VOLUME:
        raise InvalidShape(f"Unsupported dimension {d}")
    return UNIT_BALL_VOLUME[d]


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise InvalidShape(f"Ball radius must be positive, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dimension(self) -> int:
        return self.center.size

    def as_ellipsoid(self) -> "Ellipsoid":
        d = self.dimension
        return Ellipsoid(self.center, np.full(d, self.radius), np.eye(d))


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid {center + R·diag(semi_axes)·z : |z| ≤ 1}."""

    center: np.ndarray
    semi_axes: np.ndarray
    rotation: Optional[np.ndarray] = None

    def __post_init__(self):
        center = as_point(self.center)
        axes = np.array(self.semi_axes, dtype=float).reshape(-1)
        d = center.size
        if axes.size != d:
            raise InvalidShape(f"Ellipsoid has {axes.size} semi-axes in dimension {d}")
        if not np.all(axes > 0) or not np.all(np.isfinite(axes)):
            raise InvalidShape(f"Semi-axes must be positive, got {axes.tolist()}")
        rot = np.eye(d) if self.rotation is None else np.array(self.rotation, dtype=float)
        if rot.shape != (d, d):
            raise InvalidShape(f"Rotation must be {d}x{d}, got {rot.shape}")
        if np.max(np.abs(rot.T @ rot - np.eye(d))) > ORTHO_TOL:
            raise InvalidShape("Rotation matrix is not orthogonal")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "semi_axes", axes)
        object.__setattr__(self, "rotation", rot)

    @property
    def dimension(self) -> int:
        return self.center.size

    def matrix(self) -> np.ndarray:
        """Linear part M = R·diag(a) mapping the unit ball onto the ellipsoid."""
        return self.rotation * self.semi_axes[None, :]

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        local = (pts - self.center) @ self.rotation / self.semi_axes
        return np.sum(local**2, axis=1) <= 1.0

    def bounding_half_widths(self) -> np.ndarray:
        return np.sqrt(np.sum((self.rotation * self.semi_axes[None, :]) ** 2, axis=1))


@dataclass(frozen=True)
class GridDensity:
    """Raster density on a regular grid; ``origin`` is the lower corner of the grid box."""

    origin: np.ndarray
    cell_size: float
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        origin = as_point(self.origin)
        if values.ndim != origin.size:
            raise InvalidShape(
                f"Values have {values.ndim} axes but origin has dimension {origin.size}"
            )
        if not (np.isfinite(self.cell_size) and self.cell_size > 0):
            raise InvalidShape(f"cell_size must be positive, got {self.cell_size}")
        if not np.all(np.isfinite(values)):
            raise InvalidShape("GridDensity values must be finite")
        if values.size and (values.min() < -ZERO_TOL or values.max() > 1.0 + ZERO_TOL):
            raise InvalidShape(
                f"GridDensity values must lie in [0, 1], got range "
                f"[{values.min():.3e}, {values.max():.3e}]"
            )
        values[values < ZERO_TOL] = 0.0
        np.minimum(values, 1.0, out=values)
        if _touches_boundary(values):
            raise InvalidShape("Support must lie strictly inside the grid box")
        values.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "values", values)

    @property
    def dimension(self) -> int:
        return self.values.ndim

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def cell_volume(self) -> float:
        return self.cell_size**self.dimension

    @property
    def mass(self) -> float:
        return float(self.cell_volume * np.sum(self.values))

    def cell_centers(self) -> np.ndarray:
        """Centers of all cells in row-major order, shape (N, d)."""
        axes = [self.origin[j] + (np.arange(n) + 0.5) * self.cell_size for j, n in enumerate(self.dims)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def occupied(self) -> Tuple[np.ndarray, np.ndarray]:
        """(centers, values) of cells with positive value."""
        flat = self.values.reshape(-1)
        idx = np.flatnonzero(flat > 0)
        return self.cell_centers()[idx], flat[idx]

    def with_values(self, values: np.ndarray) -> "GridDensity":
        return GridDensity(self.origin, self.cell_size, values)

    def same_grid(self, other: "GridDensity") -> bool:
        return (
            self.dims == other.dims
            and self.cell_size == other.cell_size
            and np.array_equal(self.origin, other.origin)
        )


def _touches_boundary(values: np.ndarray) -> bool:
    for axis in range(values.ndim):
        if values.shape[axis] < 3:
            return bool(np.any(values > 0))
        first = np.take(values, 0, axis=axis)
        last = np.take(values, values.shape[axis] - 1, axis=axis)
        if np.any(first > 0) or np.any(last > 0):
            return True
    return False


@dataclass(frozen=True)
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.size:
            raise InvalidShape(f"{pts.shape[0]} points but {w.size} weights")
        if pts.shape[1] not in (1, 2, 3):
            raise InvalidShape(f"Unsupported dimension {pts.shape[1]}")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise InvalidShape("Measure contains non-finite entries")
        if w.size == 0:
            raise EmptySupport("Measure has no points")
        if np.any(w <= 0):
            raise InvalidShape("Measure weights must be positive")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def translated(self, b: np.ndarray) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points + np.asarray(b, dtype=float), self.weights)

    def subset(self, indices: np.ndarray) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points[indices], self.weights[indices])


Shape = Union[GridDensity, Ellipsoid, Ball]


# =======================
# Elementary Quantities
# =======================

@singledispatch
def volume(shape) -> float:
    """Volume (mass) of a shape."""
    raise InvalidShape(f"Unsupported shape type {type(shape).__name__}")


@volume.register
def _(shape: Ball) -> float:
    return unit_ball_volume(shape.dimension) * shape.radius**shape.dimension


@volume.register
def _(shape: Ellipsoid) -> float:
    return unit_ball_volume(shape.dimension) * float(np.prod(shape.semi_axes))


@volume.register
def _(shape: GridDensity) -> float:
    return shape.mass


def diametral_pair(points: np.ndarray) -> Tuple[int, int, float]:
    """Indices (i, j) of a farthest pair of points and their distance."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = pts.shape
    if n == 0:
        raise EmptySupport("No points to measure")
    if n == 1:
        return 0, 0, 0.0
    if d == 1:
        i, j = int(np.argmin(pts[:, 0])), int(np.argmax(pts[:, 0]))
        return i, j, float(pts[j, 0] - pts[i, 0])
    try:
        candidates = spatial.ConvexHull(pts).vertices
    except Exception:
        # Degenerate (collinear / coplanar) sets: extremes along many directions.
        directions = _direction_fan(d, 64)
        proj = pts @ directions.T
        candidates = np.unique(np.concatenate([proj.argmin(axis=0), proj.argmax(axis=0)]))
    sub = pts[candidates]
    dist = spatial.distance.squareform(spatial.distance.pdist(sub))
    a, b = np.unravel_index(np.argmax(dist), dist.shape)
    return int(candidates[a]), int(candidates[b]), float(dist[a, b])


def _direction_fan(d: int, count: int) -> np.ndarray:
    if d == 2:
        theta = np.pi * np.arange(count) / count
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    # Fibonacci half-sphere
    k = np.arange(count) + 0.5
    z = k / count
    phi = np.pi * (1 + 5**0.5) * k
    r = np.sqrt(1 - z**2)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@singledispatch
def diam(shape) -> float:
    """Euclidean diameter of the support of a shape."""
    raise InvalidShape(f"Unsupported shape type {type(shape).__name__}")


@diam.register
def _(shape: Ball) -> float:
    return 2.0 * shape.radius


@diam.register
def _(shape: Ellipsoid) -> float:
    return 2.0 * float(np.max(shape.semi_axes))


@diam.register
def _(shape: GridDensity) -> float:
    centers, _ = shape.occupied()
    if centers.shape[0] == 0:
        raise EmptySupport("GridDensity has empty support")
    return diametral_pair(centers)[2] + shape.cell_size * math.sqrt(shape.dimension)


@diam.register
def _(shape: DiscreteMeasure) -> float:
    return diametral_pair(shape.points)[2]


def ellipsoid_gaps(
    c1: np.ndarray, m1: np.ndarray, c2: np.ndarray, m2: np.ndarray
) -> np.ndarray:
    """
    Vectorized separating-direction lower bounds on the distance between ellipsoid pairs.

    Ellipsoid i of a pair is c + M·B with M = R·diag(a). For any unit direction u,
    u·(c2 − c1) − |M1ᵀu| − |M2ᵀu| is a lower bound on the distance; positive
    values certify disjointness. The bound is exact for balls and for pairs of
    co-oriented ellipsoids with proportional axes.

    Args:
        c1, c2: Centers, shape (P, d)
        m1, m2: Linear parts, shape (P, d, d)

    Returns:
        np.ndarray: Best lower bound per pair, shape (P,)
    """
    delta = c2 - c1
    p, d = delta.shape
    if p == 0:
        return np.zeros(0)
    g1 = m1 @ np.swapaxes(m1, 1, 2)
    g2 = m2 @ np.swapaxes(m2, 1, 2)
    candidates = [delta]
    for gram in (g1, g2, g1 + g2):
        candidates.append(np.linalg.solve(gram, delta[:, :, None])[:, :, 0])
    best = np.full(p, -np.inf)
    for u in candidates:
        norm = np.linalg.norm(u, axis=1)
        safe = norm > 0
        u = np.where(safe[:, None], u / np.where(safe, norm, 1.0)[:, None], 0.0)
        reach1 = np.linalg.norm(np.einsum("pji,pj->pi", m1, u), axis=1)
        reach2 = np.linalg.norm(np.einsum("pji,pj->pi", m2, u), axis=1)
        gap = np.einsum("pi,pi->p", u, delta) - reach1 - reach2
        gap = np.where(safe, gap, -np.inf)
        best = np.maximum(best, gap)
    return best


def _ellipsoid_gap_refined(e1: Ellipsoid, e2: Ellipsoid) -> float:
    from scipy import optimize

    m1, m2 = e1.matrix(), e2.matrix()
    delta = e2.center - e1.center
    start = float(ellipsoid_gaps(e1.center[None], m1[None], e2.center[None], m2[None])[0])

    def negative_gap(w):
        norm = np.linalg.norm(w)
        if norm == 0:
            return np.inf
        u = w / norm
        return -(u @ delta - np.linalg.norm(m1.T @ u) - np.linalg.norm(m2.T @ u))

    w0 = delta if np.linalg.norm(delta) > 0 else np.ones_like(delta)
    result = optimize.minimize(negative_gap, w0, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14})
    return max(start, -float(result.fun))


def dist_sets(a, b) -> float:
    """
    Set distance between two shapes of the same kind.

    Balls and ellipsoids use the separating-direction bound (exact for balls);
    grid densities use occupied cell centers deflated by the cell diagonal;
    discrete measures use the closest pair of support points.
    """
    if isinstance(a, (Ball, Ellipsoid)) and isinstance(b, (Ball, Ellipsoid)):
        e1 = a.as_ellipsoid() if isinstance(a, Ball) else a
        e2 = b.as_ellipsoid() if isinstance(b, Ball) else b
        return max(_ellipsoid_gap_refined(e1, e2), 0.0)
    if isinstance(a, GridDensity) and isinstance(b, GridDensity):
        ca, _ = a.occupied()
        cb, _ = b.occupied()
        if ca.shape[0] == 0 or cb.shape[0] == 0:
            raise EmptySupport("GridDensity has empty support")
        nearest, _ = spatial.cKDTree(cb).query(ca, k=1)
        slack = 0.5 * (a.cell_size + b.cell_size) * math.sqrt(a.dimension)
        return max(float(np.min(nearest)) - slack, 0.0)
    if isinstance(a, DiscreteMeasure) and isinstance(b, DiscreteMeasure):
        nearest, _ = spatial.cKDTree(b.points).query(a.points, k=1)
        return float(np.min(nearest))
    raise InvalidShape(f"Cannot measure distance between {type(a).__name__} and {type(b).__name__}")


# =======================
# Rasterization and Sampling
# =======================

def match_mass(values: np.ndarray, total: float, max_iter: int = 64) -> np.ndarray:
    """
    Clip values to [0, 1] and rescale the partially filled cells until they sum to ``total``.

    Full and empty cells are left alone; cells that saturate at 1 drop out of
    the rescaled set on the next pass.
    """
    out = np.clip(np.array(values, dtype=float), 0.0, 1.0)
    tol = 1e-14 * max(abs(total), 1.0)
    for _ in range(max_iter):
        gap = total - float(out.sum())
        if abs(gap) <= tol:
            break
        partial = (out > 0.0) & (out < 1.0)
        weight = float(out[partial].sum())
        if weight <= 0.0:
            break
        out[partial] = np.minimum(out[partial] * (1.0 + gap / weight), 1.0)
    gap = total - float(out.sum())
    if abs(gap) > 1e-12 * max(abs(total), 1.0):
        logger.warning(f"Could not match mass: off by {gap:.3e} cells")
    return out


def rasterize(
    shape: Union[Ball, Ellipsoid],
    cell_size: float,
    padding: int = 2,
    supersample: int = 4,
) -> GridDensity:
    """
    Rasterize a ball or ellipsoid into a coverage-fraction GridDensity.

    The grid origin is aligned to integer multiples of ``cell_size`` so that
    shapes translated by whole cells rasterize to translated arrays. Boundary
    cells are rescaled so the raster mass equals the shape's exact volume.
    """
    ell = shape.as_ellipsoid() if isinstance(shape, Ball) else shape
    half = ell.bounding_half_widths()
    lo_idx = np.floor((ell.center - half) / cell_size).astype(int) - padding
    hi_idx = np.ceil((ell.center + half) / cell_size).astype(int) + padding
    dims = tuple(int(n) for n in hi_idx - lo_idx)
    origin = lo_idx * cell_size
    grid = GridDensity(origin, cell_size, np.zeros(dims))
    centers = grid.cell_centers()
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    sub = np.stack(np.meshgrid(*([offsets] * ell.dimension), indexing="ij"), axis=-1).reshape(-1, ell.dimension)
    coverage = np.zeros(centers.shape[0])
    for off in sub:
        coverage += ell.contains(centers + off * cell_size)
    values = match_mass((coverage / sub.shape[0]).reshape(dims), volume(ell) / grid.cell_volume)
    return GridDensity(origin, cell_size, values)


def sample_uniform(shape: GridDensity, n: int, seed: int) -> DiscreteMeasure:
    """
    Draw n equal-weight points from a grid density.

    Systematic (stratified) selection of cells along the row-major cumulative
    mass with one random offset, then uniform jitter inside each chosen cell.

    Raises:
        ZeroMass: If the density has no mass
    """
    if n < 1:
        raise InvalidShape(f"Sample count must be positive, got {n}")
    mass = shape.mass
    if mass <= 0:
        raise ZeroMass("Cannot sample a density with zero mass")
    rng = np.random.default_rng(seed)
    flat = shape.values.reshape(-1)
    cumulative = np.cumsum(flat)
    cumulative /= cumulative[-1]
    positions = (rng.random() + np.arange(n)) / n
    cells = np.minimum(np.searchsorted(cumulative, positions, side="right"), flat.size - 1)
    index = np.stack(np.unravel_index(cells, shape.dims), axis=1)
    jitter = rng.random((n, shape.dimension))
    points = shape.origin + (index + jitter) * shape.cell_size
    return DiscreteMeasure(points, np.full(n, mass / n))


def sample_cell_centers(shape: GridDensity) -> DiscreteMeasure:
    """Deterministic lattice sample: occupied cell centers weighted by value·h^d."""
    centers, values = shape.occupied()
    if centers.shape[0] == 0:
        raise ZeroMass("Cannot sample a density with zero mass")
    return DiscreteMeasure(centers, values * shape.cell_volume)


def ball_quadrature(d: int, n_radial: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Second-order quadrature of the unit ball.

    Midpoint rule in the radius, uniform (spectral) rule in the angles and
    Gauss-Legendre in the polar cosine for d = 3. Weights sum to ω_d.

    Returns:
        tuple: (labels of shape (N, d), weights of shape (N,))
    """
    if n_radial < 1:
        raise InvalidShape("n_radial must be positive")
    radii = (np.arange(n_radial) + 0.5) / n_radial
    dr = 1.0 / n_radial
    if d == 1:
        nodes = (np.arange(2 * n_radial) + 0.5) / n_radial - 1.0
        return nodes[:, None], np.full(nodes.size, dr)
    if d == 2:
        n_ang = 4 * n_radial
        theta = 2 * np.pi * (np.arange(n_ang) + 0.5) / n_ang
        rr, tt = np.meshgrid(radii, theta, indexing="ij")
        labels = np.stack([rr * np.cos(tt), rr * np.sin(tt)], axis=-1).reshape(-1, 2)
        weights = (rr * dr * (2 * np.pi / n_ang)).reshape(-1)
        return labels, weights
    if d == 3:
        n_az = 4 * n_radial
        cos_nodes, cos_weights = np.polynomial.legendre.leggauss(2 * n_radial)
        phi = 2 * np.pi * (np.arange(n_az) + 0.5) / n_az
        rr, cc, pp = np.meshgrid(radii, cos_nodes, phi, indexing="ij")
        _, wc, _ = np.meshgrid(radii, cos_weights, phi, indexing="ij")
        ss = np.sqrt(1 - cc**2)
        labels = np.stack([rr * ss * np.cos(pp), rr * ss * np.sin(pp), rr * cc], axis=-1).reshape(-1, 3)
        weights = (rr**2 * dr * wc * (2 * np.pi / n_az)).reshape(-1)
        weights *= unit_ball_volume(3) / weights.sum()
        return labels, weights
    raise InvalidShape(f"Unsupported dimension {d}")


# =======================
# Rectangle Quantization
# =======================

def quantization_block(rho: GridDensity, cell_diam: float) -> Tuple[int, float]:
    """
    Cells per block side and block diameter for a quantization scale.

    Raises:
        ResolutionTooCoarse: If a single cell is already wider than cell_diam
    """
    cell_diag = rho.cell_size * math.sqrt(rho.dimension)
    m = int(math.ceil(cell_diam / cell_diag)) - 1
    if m < 1:
        raise ResolutionTooCoarse(
            f"cell_diam {cell_diam} is below the cell diagonal {cell_diag:.4g}",
            {"cell_diam": cell_diam, "cell_diagonal": cell_diag},
        )
    return m, m * cell_diag


def _homothetic_order(extents: Tuple[int, ...]) -> np.ndarray:
    index = np.stack(np.unravel_index(np.arange(int(np.prod(extents))), extents), axis=1)
    scale = np.max((index + 1) / np.asarray(extents, dtype=float), axis=1)
    return np.lexsort(tuple(index[:, j] for j in reversed(range(index.shape[1]))) + (scale,))


def rectangle_quantize(rho: GridDensity, cell_diam: float) -> GridDensity:
    """
    Replace a density by a characteristic function on homothetically shrunk rectangles.

    The grid is partitioned into blocks of diameter < cell_diam. Blocks that
    already hold a characteristic function are kept; otherwise the block's
    mass (rounded to whole cells) is placed on nested sub-rectangles grown
    from the block's lower corner.

    Args:
        rho: Input density with values in [0, 1]
        cell_diam: Upper bound on the block diameter

    Returns:
        GridDensity: Characteristic function with the same mass up to h^d per block,
        on the input grid grown by one empty cell on each side
    """
    m, block_diam = quantization_block(rho, cell_diam)
    values = np.asarray(rho.values)
    out = np.zeros_like(values)
    orders: Dict[Tuple[int, ...], np.ndarray] = {}
    starts = [range(0, n, m) for n in rho.dims]
    for corner in np.stack(np.meshgrid(*starts, indexing="ij"), axis=-1).reshape(-1, rho.dimension):
        block = tuple(slice(int(c), int(min(c + m, n))) for c, n in zip(corner, rho.dims))
        vals = values[block]
        if not np.any(vals > 0):
            continue
        if np.all((vals < ZERO_TOL) | (np.abs(vals - 1.0) < ZERO_TOL)):
            out[block] = np.round(vals)
            continue
        extents = vals.shape
        k = int(round(float(np.sum(vals))))
        if k == 0:
            continue
        order = orders.setdefault(extents, _homothetic_order(extents))
        filled = np.zeros(vals.size)
        filled[order[:k]] = 1.0
        out[block] = filled.reshape(extents)
    # sub-rectangles start at block corners, which may sit on the grid edge
    result = GridDensity(rho.origin - rho.cell_size, rho.cell_size, np.pad(out, 1))
    logger.info(
        f"Quantized density at block diameter {block_diam:.4g}: "
        f"mass {rho.mass:.6g} -> {result.mass:.6g}"
    )
    return result


# =======================
# File Formats
# =======================

def _stem(path: str) -> str:
    return path[:-5] if path.endswith(".json") else path


def save_grid_density(rho: GridDensity, path: str) -> str:
    """
    Write a GridDensity as ``{name}.json`` header plus ``{name}.f64`` raw data.

    Returns:
        str: Path of the JSON header
    """
    stem = _stem(path)
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    data_file = os.path.basename(stem) + ".f64"
    header = {
        "dimension": rho.dimension,
        "origin": rho.origin.tolist(),
        "cell_size": rho.cell_size,
        "dims": list(rho.dims),
        "data_file": data_file,
    }
    with open(stem + ".json", "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2)
    np.ascontiguousarray(rho.values, dtype="<f8").tofile(stem + ".f64")
    return stem + ".json"


def load_grid_density(path: str) -> GridDensity:
    """Read a GridDensity written by save_grid_density."""
    header_path = _stem(path) + ".json"
    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
        dims = tuple(int(n) for n in header["dims"])
        data_path = os.path.join(os.path.dirname(os.path.abspath(header_path)), header["data_file"])
        raw = np.fromfile(data_path, dtype="<f8")
    except (OSError, KeyError, ValueError) as e:
        raise InvalidShape(f"Cannot read grid density {header_path}: {e}")
    if raw.size != int(np.prod(dims)) or len(dims) != int(header["dimension"]):
        raise InvalidShape(
            f"Data file holds {raw.size} values, header declares dims {list(dims)}"
        )
    return GridDensity(header["origin"], header["cell_size"], raw.reshape(dims))


def save_measure_csv(mu: DiscreteMeasure, path: str):
    columns = [f"x{j + 1}" for j in range(mu.dimension)]
    df = pd.DataFrame(mu.points, columns=columns)
    df["weight"] = mu.weights
    df.to_csv(path, index=False, float_format="%.17g")


def load_measure_csv(path: str) -> DiscreteMeasure:
    """Read a DiscreteMeasure from CSV with columns x1..xd,weight (header mandatory)."""
    try:
        df = pd.read_csv(path)
    except (OSError, ValueError) as e:
        raise InvalidShape(f"Cannot read measure {path}: {e}")
    coords = [c for c in df.columns if c.startswith("x")]
    expected = [f"x{j + 1}" for j in range(len(coords))]
    if "weight" not in df.columns or coords != expected or not coords:
        raise InvalidShape(
            f"Measure CSV {path} must have header x1..xd,weight, got {list(df.columns)}"
        )
    return DiscreteMeasure(df[coords].to_numpy(dtype=float), df["weight"].to_numpy(dtype=float))


def to_jsonable(obj: Any) -> Any:
    """Convert numpy containers to plain JSON types (floats keep round-trip precision)."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return _json_float(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float):
        return _json_float(obj)
    return obj


def _json_float(x: float):
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def write_json(path: str, payload: Any):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(payload), f, indent=2, ensure_ascii=False)


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# =======================
# Path Setup
# =======================

def setup_paths(out_dir: str, run_name: str = "run") -> Dict[str, str]:
    """
    Generate all standard paths for a pipeline run.

    Args:
        out_dir: Output directory
        run_name: Bundle name below out_dir

    Returns:
        dict: Dictionary containing all standard paths
    """
    base_path = os.path.join(out_dir, run_name)
    return {
        "base_path": base_path,
        "spray_file": os.path.join(base_path, "spray.json"),
        "field_file": os.path.join(base_path, "field.json"),
        "base_path_reports": os.path.join(base_path, "reports"),
        "base_path_figures": os.path.join(base_path, "figures"),
        "cache_dir": os.path.join(out_dir, "cache"),
    }


def create_directories(paths: Dict[str, str]):
    """Create all necessary directories from paths dictionary."""
    for key in ("base_path", "base_path_reports", "base_path_figures", "cache_dir"):
        if key in paths:
            os.makedirs(paths[key], exist_ok=True)


# =======================
# Caching Functions
# =======================

CACHE_VERSION = "1.0"


def get_cache_key(cache_type: str, **params) -> Tuple[str, str]:
    """
    Generate a cache key from parameters.

    Args:
        cache_type: Type of cached computation
        **params: Parameters identifying the computation

    Returns:
        Tuple[str, str]: (cache_type, SHA256 hash)
    """
    if "version" not in params:
        params["version"] = CACHE_VERSION
    key_data = {"type": cache_type, **to_jsonable(params)}
    try:
        key_str = json.dumps(key_data, sort_keys=True, ensure_ascii=False)
    except TypeError as e:
        logger.warning(f"Error generating cache key: {e}")
        key_str = f"{cache_type}_{params!r}"
    return cache_type, hashlib.sha256(key_str.encode("utf-8")).hexdigest()


def get_from_cache(cache_key: Tuple[str, str], cache_dir: Optional[str]) -> Optional[Any]:
    """Retrieve a cached result, or None when absent or unreadable."""
    if not cache_dir:
        return None
    cache_type, hash_key = cache_key
    cache_file = os.path.join(cache_dir, cache_type, f"{hash_key}.json")
    try:
        if os.path.exists(cache_file):
            with open(cache_file, "r", encoding="utf-8") as f:
                return json.load(f)
    except (OSError, ValueError) as e:
        logger.warning(f"Cache read failed for {cache_file}: {e}")
    return None


def save_to_cache(cache_key: Tuple[str, str], data: Any, cache_dir: Optional[str]):
    """Save a result to the cache as formatted JSON; failures are logged only."""
    if not cache_dir:
        return
    cache_type, hash_key = cache_key
    try:
        cache_subdir = os.path.join(cache_dir, cache_type)
        os.makedirs(cache_subdir, exist_ok=True)
        with open(os.path.join(cache_subdir, f"{hash_key}.json"), "w", encoding="utf-8") as f:
            json.dump(to_jsonable(data), f, indent=2, ensure_ascii=False)
    except OSError as e:
        logger.warning(f"Failed to save cache - {e}")


# =======================
# Validation Functions
# =======================

def validate_required_files(*file_paths: str) -> Tuple[bool, List[str]]:
    """
    Validate that all required input files exist.

    Returns:
        tuple: (is_valid, errors)
    """
    errors = []
    for file_path in file_paths:
        if not os.path.exists(file_path) and not os.path.exists(file_path + ".json"):
            errors.append(f"Required file not found: {file_path}")
    return len(errors) == 0, errors


def print_validation_summary(title: str, is_valid: bool, errors: Iterable[str]):
    """
    Print a formatted audit summary.

    Args:
        title: Title for the audit
        is_valid: Whether the audit passed
        errors: Violation messages
    """
    errors = list(errors)
    print(f"\n{'=' * 60}")
    print(f"📋 {title}")
    print(f"{'=' * 60}")
    if is_valid:
        print(colored("✅ AUDIT PASSED", "green"))
        print("   All checks completed successfully")
    else:
        print(colored("❌ AUDIT FAILED", "red"))
        print(f"   Found {len(errors)} violation(s):")
        for i, error in enumerate(errors, 1):
            print(f"   {i}. {error}")
    print(f"{'=' * 60}")
