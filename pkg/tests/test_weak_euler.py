import numpy as np
import pytest

from shapeflow.errors import QuadratureMismatch
from shapeflow.shape_utils import DiscreteMeasure
from shapeflow.engines.droplet_engine.engine import BoostedDroplet, boosted_action, geodesic_ivp
from shapeflow.engines.spray_engine.engine import (
    build_spray,
    droplets_path,
    linear_path,
    recenter_target,
    spray_path,
    spray_reference_path,
    static_path,
    translate_density,
    vitali_cover,
)
from shapeflow.engines.weak_euler_engine.engine import (
    TestFunctionBank,
    continuity_residual,
    mean_velocity_check,
    momentum_residual,
    time_refinement,
    weak_residual_report,
    weak_star_gap,
)


@pytest.fixture
def bank():
    return TestFunctionBank.random(np.array([-1.0, -1.0]), np.array([1.0, 1.0]), count=20, seed=3)


@pytest.fixture
def boosted_droplet():
    g = geodesic_ivp(0.5, [0.5, 0.5], [0.25, -0.25], times=np.linspace(0.0, 1.0, 65))
    return BoostedDroplet(g, np.array([0.2, 0.1]), np.array([-0.2, 0.0]), np.eye(2))


# =======================
# Test Functions
# =======================

def test_bank_derivatives_match_finite_differences(bank, rng):
    x = rng.uniform(-0.8, 0.8, size=(30, 2))
    t, step = 0.4, 1e-6
    q, qt, gq = bank.evaluate(x, t)
    fd_t = (bank.evaluate(x, t + step)[0] - bank.evaluate(x, t - step)[0]) / (2 * step)
    np.testing.assert_allclose(qt, fd_t, atol=1e-7)
    for j in range(2):
        e = np.zeros(2)
        e[j] = step
        fd_x = (bank.evaluate(x + e, t)[0] - bank.evaluate(x - e, t)[0]) / (2 * step)
        np.testing.assert_allclose(gq[:, :, j], fd_x, atol=1e-6)
    assert q.shape == (20, 30)


def test_bank_rejects_other_dimension(bank):
    with pytest.raises(QuadratureMismatch):
        bank.evaluate(np.zeros((3, 3)), 0.0)


def test_scaled_bank_scales_values(bank, rng):
    x = rng.uniform(-0.5, 0.5, size=(5, 2))
    np.testing.assert_allclose(bank.scaled(3.0).evaluate(x, 0.2)[0], 3.0 * bank.evaluate(x, 0.2)[0])


# =======================
# Residuals
# =======================

def test_static_path_has_no_residual(bank, rng):
    points = rng.uniform(-0.5, 0.5, size=(40, 2))
    path = static_path(DiscreteMeasure(points, np.full(40, 0.025)))
    report = weak_residual_report(path, bank)
    assert report.max_continuity < 1e-12
    assert report.max_momentum < 1e-12
    assert report.pressureless


def test_pressure_requires_pressure_frames(bank):
    path = linear_path(np.zeros((2, 2)), np.ones((2, 2)), np.full(2, 0.5))
    with pytest.raises(QuadratureMismatch):
        momentum_residual(path, bank, pressure=True)


@pytest.mark.slow
def test_linear_motion_refines_at_second_order(rng):
    start = rng.random((200, 2))
    end = start + np.array([0.3, 0.1]) + 0.2 * start
    path = linear_path(start, end, np.full(200, 1.0 / 200), times=np.linspace(0.0, 1.0, 33))
    bank = TestFunctionBank.for_path(path, count=20, seed=11)
    report = time_refinement(path, bank, pressure=False)
    assert report.ratios_in_range >= 16


def test_time_refinement_needs_odd_frame_count(bank):
    path = linear_path(np.zeros((2, 2)), np.ones((2, 2)), np.full(2, 0.5), times=np.linspace(0.0, 1.0, 4))
    with pytest.raises(QuadratureMismatch):
        time_refinement(path, bank)


def test_droplet_pressure_balances_acceleration(boosted_droplet, bank):
    path = droplets_path([boosted_droplet], boosted_droplet.geodesic.times, n_radial=12)
    with_pressure = momentum_residual(path, bank)
    without = momentum_residual(path, bank, pressure=False)
    assert with_pressure.max() < 0.1 * without.max()
    assert continuity_residual(path, bank).max() < 1e-3


# =======================
# Droplet Diagnostics
# =======================

def test_mean_velocity_is_the_boost(boosted_droplet):
    report = mean_velocity_check(boosted_droplet)
    assert report.passed
    np.testing.assert_allclose(report.mean_velocities[0], [0.2, 0.1], atol=1e-9)
    assert report.total_action == pytest.approx(boosted_action(boosted_droplet), rel=5e-3)


def test_mean_velocity_of_nothing():
    report = mean_velocity_check([])
    assert report.passed
    assert report.droplets == 0


def test_weak_star_gap_of_translation_spray(translation_field, small_disk, bank):
    shift = recenter_target(translation_field)
    field_ = translation_field.translated(shift)
    spray = build_spray(vitali_cover(translate_density(small_disk, shift), field_, 0.1, 0.05))
    times = np.linspace(0.0, 1.0, 5)
    flow = spray_path(spray, times, n_radial=4)
    reference = spray_reference_path(spray, field_, times, n_radial=4)
    report = weak_star_gap(flow, reference, bank)
    assert len(report.density_gaps) == bank.size
    assert report.sup_pressure == 0.0
    assert report.particle_gap < 2.0 * 0.1 * spray.plan.target_diam
    with pytest.raises(QuadratureMismatch):
        weak_star_gap(flow, spray_reference_path(spray, field_, np.linspace(0.0, 1.0, 3), n_radial=4), bank)


@pytest.mark.slow
def test_spray_pressure_and_particle_gap_scale_with_epsilon(disk_to_ellipse):
    rho0, field_ = disk_to_ellipse(0.1)
    shift = recenter_target(field_)
    centered = field_.translated(shift)
    omega0 = translate_density(rho0, shift)
    times = np.linspace(0.0, 1.0, 5)
    pressure_ratios, particle_ratios = [], []
    for epsilon in (0.4, 0.2, 0.1):
        spray = build_spray(vitali_cover(omega0, centered, epsilon, 0.05, max_balls=40))
        flow = spray_path(spray, times, n_radial=4)
        reference = spray_reference_path(spray, centered, times, n_radial=4)
        report = weak_star_gap(flow, reference, TestFunctionBank.for_path(reference, 10, seed=0))
        assert report.sup_pressure > 0.0
        pressure_ratios.append(report.sup_pressure / epsilon)
        particle_ratios.append(report.particle_gap / np.sqrt(epsilon))
    # the largest ball sits at the stretch cap r ∝ √ε, so pressure ∝ ε and particle gaps ∝ √ε
    np.testing.assert_allclose(pressure_ratios, pressure_ratios[0], rtol=0.05)
    np.testing.assert_allclose(particle_ratios, particle_ratios[0], rtol=0.05)
    assert max(particle_ratios) < 5.0
