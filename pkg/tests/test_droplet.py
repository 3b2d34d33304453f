import math

import numpy as np
import pytest

from shapeflow.errors import BlowupGuard, InvalidShape, TangencyViolated
from shapeflow.shape_utils import unit_ball_volume
from shapeflow.engines.droplet_engine.engine import (
    BoostedDroplet,
    DropletGeodesic,
    action_bound_check,
    action_by_quadrature,
    action_profile,
    bound_check,
    droplet_action,
    droplet_fields,
    geodesic_bvp,
    geodesic_ivp,
    invariant_report,
    nesting_check,
    planar_residuals,
    scaled_geodesic,
    time_reversal_gap,
    wasserstein_droplet_distance_sq,
)


@pytest.fixture(scope="module")
def disk_to_ellipse():
    return geodesic_bvp(1.0, [1.0, 1.0], [2.0, 0.5])


# =======================
# Initial Value Problem
# =======================

def test_ivp_rejects_non_tangent_velocity():
    with pytest.raises(TangencyViolated):
        geodesic_ivp(1.0, [1.0, 1.0], [1.0, 1.0])


def test_ivp_rejects_point_off_surface():
    with pytest.raises(InvalidShape):
        geodesic_ivp(1.0, [1.0, 2.0], [0.5, -0.5])
    with pytest.raises(InvalidShape):
        geodesic_ivp(-1.0, [1.0, 1.0], [0.5, -0.5])


def test_ivp_at_rest_is_constant():
    g = geodesic_ivp(1.0, [1.0, 1.0], [0.0, 0.0])
    assert g.speed == 0.0
    np.testing.assert_array_equal(g.a, np.ones((g.times.size, 2)))
    assert droplet_action(g) == 0.0


def test_ivp_conserves_volume_and_speed():
    g = geodesic_ivp(1.0, [1.0, 1.0], [0.5, -0.5])
    report = invariant_report(g)
    assert report.passed
    assert g.speed == pytest.approx(math.sqrt(0.5))
    assert time_reversal_gap(g) < 1e-8


def test_ivp_blowup_guard():
    with pytest.raises(BlowupGuard):
        geodesic_ivp(1.0, [1.0, 1.0], [5.0, -5.0], t_end=500.0)


def test_droplet_fields_inside_and_outside():
    g = geodesic_ivp(1.0, [1.0, 1.0], [0.5, -0.5])
    a, adot, beta_dot, beta = g.state(0.5)
    x = np.array([[0.0, 0.0], [0.3 * a[0], -0.2 * a[1]], [a[0], 0.0], [2.0 * a[0], 0.0]])
    phi, v, p = droplet_fields(g, x, 0.5)
    np.testing.assert_allclose(v, adot * x / a, rtol=1e-14)
    assert phi[0] == pytest.approx(-beta)
    assert p[0] == pytest.approx(beta_dot)
    assert p[2] == pytest.approx(0.0, abs=1e-12)
    assert p[3] == 0.0
    assert np.sum(adot / a) == pytest.approx(0.0, abs=1e-6)


def test_scaled_geodesic_scales_speed_and_pressure():
    g = geodesic_ivp(1.0, [1.0, 1.0], [0.5, -0.5])
    s = scaled_geodesic(g, 2.0)
    assert s.r == 2.0
    assert s.speed == pytest.approx(2.0 * g.speed)
    np.testing.assert_allclose(s.beta_dot, 4.0 * g.beta_dot)
    a, _, _, _ = s.state(0.5)
    np.testing.assert_allclose(a, 2.0 * g.state(0.5)[0], rtol=1e-12)


def test_geodesic_dict_round_trip():
    g = geodesic_ivp(0.5, [0.5, 0.5], [0.2, -0.2])
    restored = DropletGeodesic.from_dict(g.to_dict())
    np.testing.assert_allclose(restored.a, g.a, rtol=1e-10)
    assert restored.speed == pytest.approx(g.speed)


# =======================
# Boundary Value Problem
# =======================

@pytest.mark.slow
def test_disk_to_ellipse_meets_acceptance_tolerances(disk_to_ellipse):
    g = disk_to_ellipse
    assert np.max(np.abs(g.end - np.array([2.0, 0.5]))) < 1e-8
    report = invariant_report(g)
    assert report.volume_drift < 1e-9
    assert report.speed_drift < 1e-8
    assert report.min_acceleration > 0
    assert report.action_drift < 1e-6
    profile = action_profile(g)
    expected = unit_ball_volume(2) * g.speed**2 / 4.0
    np.testing.assert_allclose(profile, expected, rtol=1e-6)
    assert droplet_action(g) == pytest.approx(expected, rel=1e-12)


@pytest.mark.slow
def test_disk_to_ellipse_closed_forms(disk_to_ellipse):
    rate, beta = planar_residuals(disk_to_ellipse)
    assert rate < 1e-7
    assert beta < 1e-7


@pytest.mark.slow
def test_disk_to_ellipse_is_nested_and_bounded(disk_to_ellipse):
    assert nesting_check(disk_to_ellipse).passed
    assert bound_check(disk_to_ellipse).passed
    assert action_by_quadrature(disk_to_ellipse, n_radial=24) == pytest.approx(droplet_action(disk_to_ellipse), rel=5e-3)


def test_bvp_in_one_dimension_is_constant():
    g = geodesic_bvp(1.0, [1.0], [1.0])
    assert g.speed == 0.0


def test_bvp_rejects_endpoint_off_surface():
    with pytest.raises(InvalidShape):
        geodesic_bvp(1.0, [1.0, 1.0], [2.0, 2.0])


def test_bvp_cache_is_reused(tmp_path):
    first = geodesic_bvp(1.0, [1.0, 1.0], [1.5, 1.0 / 1.5], cache_dir=str(tmp_path))
    assert list(tmp_path.iterdir())
    second = geodesic_bvp(1.0, [1.0, 1.0], [1.5, 1.0 / 1.5], cache_dir=str(tmp_path))
    assert second.speed == pytest.approx(first.speed, rel=1e-10)


def test_planar_residuals_need_two_dimensions():
    g = geodesic_ivp(1.0, [1.0, 1.0, 1.0], [0.5, -0.25, -0.25])
    with pytest.raises(InvalidShape):
        planar_residuals(g)


# =======================
# Boosted Droplets and Action Bounds
# =======================

def test_boost_shifts_mean_velocity():
    g = geodesic_ivp(1.0, [1.0, 1.0], [0.5, -0.5])
    boost = np.array([0.3, -0.1])
    droplet = BoostedDroplet(g, boost, np.zeros(2), np.eye(2))
    np.testing.assert_allclose(droplet.mean_velocity(0.4), boost, atol=1e-12)
    np.testing.assert_allclose(droplet.center(1.0), boost)
    with pytest.raises(InvalidShape):
        BoostedDroplet(g, boost, np.zeros(2), np.array([[1.0, 0.2], [0.0, 1.0]]))


def test_droplet_distance_of_ball_to_itself():
    assert wasserstein_droplet_distance_sq(1.0, np.array([1.0, 1.0]), np.zeros(2)) == 0.0
    assert wasserstein_droplet_distance_sq(1.0, np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(math.pi)


@pytest.mark.slow
def test_action_sandwich_on_random_droplets():
    rng = np.random.default_rng(7)
    failures = []
    for _ in range(200):
        r = float(rng.uniform(0.5, 2.0))
        lam = float(np.exp(rng.uniform(-math.log(2.0), math.log(2.0))))
        a_hat = r * np.array([lam, 1.0 / lam])
        b = rng.normal(size=2)
        report, geodesic = action_bound_check(r, a_hat, b)
        if not report.passed or not nesting_check(geodesic).passed:
            failures.append((r, lam, b.tolist()))
    assert failures == []
