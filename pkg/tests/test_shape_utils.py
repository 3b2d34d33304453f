import math
import os

import numpy as np
import pytest

from shapeflow.errors import EmptySupport, InvalidShape, ResolutionTooCoarse, ZeroMass
from shapeflow.shape_utils import (
    Ball,
    DiscreteMeasure,
    Ellipsoid,
    GridDensity,
    ball_quadrature,
    diam,
    diametral_pair,
    dist_sets,
    get_cache_key,
    get_from_cache,
    load_grid_density,
    load_measure_csv,
    match_mass,
    quantization_block,
    rasterize,
    rectangle_quantize,
    sample_cell_centers,
    sample_uniform,
    save_grid_density,
    save_measure_csv,
    save_to_cache,
    setup_paths,
    to_jsonable,
    unit_ball_volume,
    validate_required_files,
    volume,
)


# =======================
# Shapes
# =======================

def test_volumes_of_primitive_shapes():
    assert volume(Ball([0.0, 0.0], 1.0)) == pytest.approx(math.pi)
    assert volume(Ellipsoid([0.0, 0.0], [2.0, 0.5])) == pytest.approx(math.pi)
    assert volume(Ball([0.0, 0.0, 0.0], 2.0)) == pytest.approx(4.0 / 3.0 * math.pi * 8.0)
    assert volume(Ball([1.0], 0.5)) == pytest.approx(1.0)


def test_ellipsoid_rejects_bad_input():
    with pytest.raises(InvalidShape):
        Ellipsoid([0.0, 0.0], [1.0, -1.0])
    with pytest.raises(InvalidShape):
        Ellipsoid([0.0, 0.0], [1.0, 1.0], rotation=[[1.0, 0.1], [0.0, 1.0]])
    with pytest.raises(InvalidShape):
        Ball([0.0, 0.0], 0.0)


def test_rasterized_disk_has_disk_area():
    rho = rasterize(Ball([0.0, 0.0], 1.0), 0.05)
    assert rho.mass == pytest.approx(math.pi, rel=1e-12)
    assert rho.values.max() == 1.0
    assert rho.values.min() == 0.0


def test_rasterize_is_translation_aligned():
    a = rasterize(Ball([0.0, 0.0], 0.5), 0.125)
    b = rasterize(Ball([0.375, -0.25], 0.5), 0.125)
    assert a.dims == b.dims
    np.testing.assert_allclose(b.origin - a.origin, [0.375, -0.25], atol=1e-12)
    np.testing.assert_array_equal(a.values, b.values)


@pytest.mark.parametrize("h", [0.1, 0.05])
def test_rasterized_disk_and_ellipse_carry_equal_mass(h):
    disk = rasterize(Ball([0.0, 0.0], 1.0), h)
    ellipse = rasterize(Ellipsoid([0.0, 0.0], [2.0, 0.5]), h)
    assert disk.mass == pytest.approx(ellipse.mass, rel=1e-12)
    assert ellipse.mass == pytest.approx(math.pi, rel=1e-12)
    assert ellipse.values.max() <= 1.0


def test_match_mass_rescales_only_partial_cells():
    values = np.array([0.0, 1.0, 0.25, 0.5, 1.2])
    out = match_mass(values, 3.0)
    assert out.sum() == pytest.approx(3.0, rel=1e-14)
    assert out[0] == 0.0
    assert out[1] == 1.0
    assert out[4] == 1.0
    assert out[3] / out[2] == pytest.approx(2.0)


def test_grid_density_validation():
    inner = np.zeros((5, 5))
    inner[2, 2] = 1.0
    GridDensity([0.0, 0.0], 0.1, inner)
    with pytest.raises(InvalidShape):
        GridDensity([0.0, 0.0], 0.1, inner * 2.0)
    touching = np.zeros((5, 5))
    touching[0, 2] = 1.0
    with pytest.raises(InvalidShape):
        GridDensity([0.0, 0.0], 0.1, touching)
    with pytest.raises(InvalidShape):
        GridDensity([0.0, 0.0], -0.1, inner)
    overshoot = np.zeros((5, 5))
    overshoot[2, 2] = 1.04
    with pytest.raises(InvalidShape):
        GridDensity([0.0, 0.0], 0.1, overshoot)
    overshoot[2, 2] = 1.0 + 1e-13
    assert GridDensity([0.0, 0.0], 0.1, overshoot).values.max() == 1.0


def test_discrete_measure_validation():
    with pytest.raises(InvalidShape):
        DiscreteMeasure([[0.0, 0.0], [1.0, 1.0]], [1.0])
    with pytest.raises(InvalidShape):
        DiscreteMeasure([[0.0, 0.0]], [0.0])
    with pytest.raises(EmptySupport):
        DiscreteMeasure(np.zeros((0, 2)), np.zeros(0))
    mu = DiscreteMeasure([0.0, 1.0, 2.0], [1.0, 1.0, 1.0])
    assert mu.dimension == 1
    assert mu.mass == 3.0
    assert mu.is_uniform()


# =======================
# Geometry
# =======================

def test_diametral_pair_of_square_corners():
    points = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.5]])
    i, j, distance = diametral_pair(points)
    assert distance == pytest.approx(math.sqrt(2.0))
    assert {i, j} in ({0, 3}, {1, 2})


def test_diametral_pair_of_collinear_points():
    points = np.column_stack([np.linspace(0.0, 3.0, 7), np.zeros(7)])
    _, _, distance = diametral_pair(points)
    assert distance == pytest.approx(3.0)


def test_diam_of_shapes():
    assert diam(Ball([0.0, 0.0], 1.5)) == 3.0
    assert diam(Ellipsoid([0.0, 0.0], [2.0, 0.5])) == 4.0
    rho = rasterize(Ball([0.0, 0.0], 1.0), 0.1)
    assert 2.0 <= diam(rho) <= 2.0 + 2 * 0.1 * math.sqrt(2.0)


def test_ball_distance_is_exact():
    a = Ball([0.0, 0.0], 1.0)
    b = Ball([3.0, 0.0], 1.0)
    assert dist_sets(a, b) == pytest.approx(1.0, abs=1e-9)
    assert dist_sets(a, Ball([1.0, 0.0], 1.0)) == 0.0


def test_discrete_measure_distance():
    a = DiscreteMeasure([[0.0, 0.0], [1.0, 0.0]], [1.0, 1.0])
    b = DiscreteMeasure([[4.0, 0.0], [1.0, 2.0]], [1.0, 1.0])
    assert dist_sets(a, b) == pytest.approx(2.0)


# =======================
# Sampling and Quadrature
# =======================

def test_sample_uniform_is_seeded_and_equal_weight(unit_disk):
    a = sample_uniform(unit_disk, 100, seed=7)
    b = sample_uniform(unit_disk, 100, seed=7)
    np.testing.assert_array_equal(a.points, b.points)
    assert a.size == 100
    assert a.mass == pytest.approx(unit_disk.mass)
    assert np.all(a.weights == a.weights[0])
    assert np.all(np.linalg.norm(a.points, axis=1) < 1.0 + 0.15)


def test_sample_cell_centers_keeps_mass(unit_disk):
    mu = sample_cell_centers(unit_disk)
    assert mu.mass == pytest.approx(unit_disk.mass)


def test_zero_mass_cannot_be_sampled():
    empty = GridDensity([0.0, 0.0], 0.1, np.zeros((5, 5)))
    with pytest.raises(ZeroMass):
        sample_uniform(empty, 10, seed=0)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_ball_quadrature_weights_sum_to_ball_volume(d):
    labels, weights = ball_quadrature(d, 6)
    assert weights.sum() == pytest.approx(unit_ball_volume(d))
    assert np.all(np.linalg.norm(labels, axis=1) < 1.0)
    np.testing.assert_allclose(weights @ labels, np.zeros(d), atol=1e-12)


def test_ball_quadrature_second_moment():
    labels, weights = ball_quadrature(2, 24)
    # ∫_B x² = π/4
    assert weights @ labels[:, 0] ** 2 == pytest.approx(math.pi / 4.0, rel=2e-3)


# =======================
# Rectangle Quantization
# =======================

def test_quantization_block_rejects_too_fine_scale(unit_disk):
    with pytest.raises(ResolutionTooCoarse):
        quantization_block(unit_disk, 0.1)
    m, block = quantization_block(unit_disk, 0.5)
    assert m >= 1
    assert block < 0.5


def test_rectangle_quantize_produces_characteristic_function():
    x = np.linspace(-1.0, 1.0, 24)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    values = np.zeros((24, 24))
    inside = (xx**2 + yy**2) < 0.8
    values[inside] = 0.5 + 0.4 * np.cos(3 * xx[inside])
    values[:2] = 0.0
    values[-2:] = 0.0
    values[:, :2] = 0.0
    values[:, -2:] = 0.0
    rho = GridDensity([-1.2, -1.2], 0.1, values)
    out = rectangle_quantize(rho, 0.6)
    assert set(np.unique(out.values)) <= {0.0, 1.0}
    m, _ = quantization_block(rho, 0.6)
    blocks = math.ceil(24 / m) ** 2
    assert abs(out.mass - rho.mass) <= blocks * rho.cell_volume


def test_rectangle_quantize_keeps_characteristic_blocks(unit_disk):
    binary = unit_disk.with_values(np.round(unit_disk.values))
    out = rectangle_quantize(binary, 0.5)
    assert out.dims == tuple(n + 2 for n in binary.dims)
    np.testing.assert_array_equal(out.values[1:-1, 1:-1], binary.values)


# =======================
# Files and Cache
# =======================

def test_grid_density_file_round_trip(tmp_path, stretched_ellipse):
    header = save_grid_density(stretched_ellipse, str(tmp_path / "ellipse.json"))
    assert os.path.exists(tmp_path / "ellipse.f64")
    loaded = load_grid_density(header)
    assert loaded.same_grid(stretched_ellipse)
    np.testing.assert_array_equal(loaded.values, stretched_ellipse.values)


def test_grid_density_with_wrong_data_size(tmp_path, small_disk):
    header = save_grid_density(small_disk, str(tmp_path / "disk"))
    np.zeros(3).tofile(tmp_path / "disk.f64")
    with pytest.raises(InvalidShape):
        load_grid_density(header)


def test_grid_density_file_above_one_is_rejected(tmp_path, small_disk):
    header = save_grid_density(small_disk, str(tmp_path / "disk"))
    values = small_disk.values.copy()
    values[tuple(n // 2 for n in small_disk.dims)] = 1.04
    values.astype("<f8").tofile(tmp_path / "disk.f64")
    with pytest.raises(InvalidShape):
        load_grid_density(header)


def test_measure_csv_round_trip(tmp_path, disk_samples):
    path = str(tmp_path / "mu.csv")
    save_measure_csv(disk_samples, path)
    loaded = load_measure_csv(path)
    np.testing.assert_array_equal(loaded.points, disk_samples.points)
    np.testing.assert_array_equal(loaded.weights, disk_samples.weights)


def test_measure_csv_requires_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(InvalidShape):
        load_measure_csv(str(path))


def test_to_jsonable_handles_numpy_and_infinity():
    data = to_jsonable({"a": np.arange(3), "b": np.float64(np.inf), "c": np.bool_(True), "d": (1.5, float("nan"))})
    assert data == {"a": [0, 1, 2], "b": "inf", "c": True, "d": [1.5, None]}


def test_cache_round_trip(tmp_path):
    key = get_cache_key("droplet_bvp", r=1.0, a_end=np.array([2.0, 0.5]))
    assert key == get_cache_key("droplet_bvp", r=1.0, a_end=[2.0, 0.5])
    assert get_from_cache(key, str(tmp_path)) is None
    save_to_cache(key, {"w0": np.array([0.5, -0.5])}, str(tmp_path))
    assert get_from_cache(key, str(tmp_path)) == {"w0": [0.5, -0.5]}
    assert get_from_cache(key, None) is None


def test_setup_paths_and_required_files(tmp_path):
    paths = setup_paths(str(tmp_path), "bundle")
    assert paths["spray_file"] == os.path.join(str(tmp_path), "bundle", "spray.json")
    ok, errors = validate_required_files(paths["spray_file"])
    assert not ok and len(errors) == 1
    (tmp_path / "x.json").write_text("{}")
    assert validate_required_files(str(tmp_path / "x"))[0]
