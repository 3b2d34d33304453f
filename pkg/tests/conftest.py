import numpy as np
import pytest

from shapeflow.shape_utils import Ball, DiscreteMeasure, Ellipsoid, rasterize, sample_cell_centers, sample_uniform
from shapeflow.engines.transport_engine.engine import estimate_brenier_field, solve_exact


@pytest.fixture(autouse=True)
def _quiet_progress(monkeypatch):
    monkeypatch.setenv("SHAPEFLOW_PROGRESS", "0")
    for var in ("SHAPEFLOW_SEED", "SHAPEFLOW_OUT_DIR", "SHAPEFLOW_DIMENSION", "SHAPEFLOW_CACHE_DIR"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_disk():
    return rasterize(Ball([0.0, 0.0], 1.0), 0.1)


@pytest.fixture
def small_disk():
    return rasterize(Ball([0.0, 0.0], 0.5), 0.1)


@pytest.fixture
def stretched_ellipse():
    return rasterize(Ellipsoid([0.0, 0.0], [2.0, 0.5]), 0.1)


@pytest.fixture
def lattice_measure():
    """10 x 10 lattice in the unit square with total mass one."""
    axis = np.linspace(0.0, 1.0, 10)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    points = np.column_stack([xx.ravel(), yy.ravel()])
    return DiscreteMeasure(points, np.full(points.shape[0], 0.01))


@pytest.fixture
def linear_field(lattice_measure):
    """Brenier field of the symmetric linear map diag(2, 1/2) on the lattice."""
    target = DiscreteMeasure(lattice_measure.points * np.array([2.0, 0.5]), lattice_measure.weights)
    return estimate_brenier_field(lattice_measure, target, plan=solve_exact(lattice_measure, target))


@pytest.fixture
def disk_samples(unit_disk):
    return sample_uniform(unit_disk, 200, seed=0)


@pytest.fixture
def translation_field(small_disk):
    """Brenier field of the shift by (0.2, 0.1) on the cell centers of the small disk."""
    mu = sample_cell_centers(small_disk)
    nu = mu.translated(np.array([0.2, 0.1]))
    return estimate_brenier_field(mu, nu, plan=solve_exact(mu, nu))


@pytest.fixture
def disk_to_ellipse():
    """Factory: rasterized unit disk and the exact field of diag(2, 1/2) on its cell centers."""

    def build(cell_size):
        rho0 = rasterize(Ball([0.0, 0.0], 1.0), cell_size)
        mu = sample_cell_centers(rho0)
        nu = DiscreteMeasure(mu.points * np.array([2.0, 0.5]), mu.weights)
        return rho0, estimate_brenier_field(mu, nu, plan=solve_exact(mu, nu))

    return build
