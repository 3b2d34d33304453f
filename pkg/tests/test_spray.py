import math

import numpy as np
import pytest

from shapeflow.errors import ChainBroken, InvalidShape, MassMismatch
from shapeflow.shape_utils import Ball, DiscreteMeasure, rasterize
from shapeflow.engines.spray_engine.engine import (
    EulerSpray,
    SprayPlan,
    audit_plan,
    balanced_taus,
    build_spray,
    certify_injectivity,
    concatenate,
    connect_general_densities,
    linear_path,
    normalized_axes,
    recenter_bound_check,
    recenter_target,
    reverse_path,
    spray_action_audit,
    spray_path,
    static_path,
    translate_density,
    vitali_cover,
)


@pytest.fixture
def centered_translation(translation_field, small_disk):
    shift = recenter_target(translation_field)
    return translation_field.translated(shift), translate_density(small_disk, shift)


@pytest.fixture
def translation_spray(centered_translation):
    field_, omega0 = centered_translation
    plan = vitali_cover(omega0, field_, 0.1, 0.05)
    return build_spray(plan), field_


# =======================
# Recentering
# =======================

def test_recentered_target_is_within_bound(linear_field):
    shift = recenter_target(linear_field)
    report = recenter_bound_check(linear_field, shift)
    assert report.passed
    # diametral pair of the stretched lattice is (0, 0)–(2, 0.5)
    np.testing.assert_allclose(shift, [-1.0, -0.25])


def test_translate_density_moves_origin(small_disk):
    moved = translate_density(small_disk, [1.0, -2.0])
    np.testing.assert_allclose(moved.origin, small_disk.origin + np.array([1.0, -2.0]))
    assert moved.mass == small_disk.mass


# =======================
# Vitali Cover and Spray
# =======================

def test_vitali_cover_rejects_bad_parameters(centered_translation):
    field_, omega0 = centered_translation
    with pytest.raises(InvalidShape):
        vitali_cover(omega0, field_, 1.5, 0.05)
    with pytest.raises(InvalidShape):
        vitali_cover(omega0, field_, 0.1, 0.0)


def test_vitali_cover_of_translation_is_disjoint_and_admissible(centered_translation):
    field_, omega0 = centered_translation
    plan = vitali_cover(omega0, field_, 0.1, 0.05)
    assert plan.size > 0
    assert 0 < plan.coverage_fraction <= 1.0
    report = audit_plan(plan, field_)
    assert report.overlapping_pairs == []
    assert report.inadmissible_balls == []


@pytest.mark.slow
def test_disk_to_ellipse_cover_is_dense_and_audits_pass(disk_to_ellipse):
    rho0, field_ = disk_to_ellipse(0.1)
    shift = recenter_target(field_)
    centered = field_.translated(shift)
    plan = vitali_cover(translate_density(rho0, shift), centered, 0.1, 0.05)
    assert plan.size > 10
    assert plan.radii.min() >= 0.1 / 8.0
    assert plan.coverage_fraction > 0.8
    np.testing.assert_allclose(plan.eigvals, np.tile([0.5, 2.0], (plan.size, 1)), atol=1e-8)
    report = audit_plan(plan, centered)
    assert report.passed
    spray = build_spray(plan)
    assert len(spray.droplets) == plan.size
    assert certify_injectivity(spray, time_samples=17).passed
    audit = spray_action_audit(spray, centered)
    assert audit.passed
    assert audit.wasserstein_sq > 0.0
    assert audit.linf_distance < audit.linf_bound
    assert report.taylor_violations == []
    assert report.passed


def test_spray_plan_dict_round_trip(centered_translation):
    field_, omega0 = centered_translation
    plan = vitali_cover(omega0, field_, 0.1, 0.05, max_balls=3)
    assert plan.size <= 3
    restored = SprayPlan.from_dict(plan.to_dict())
    np.testing.assert_array_equal(restored.radii, plan.radii)
    np.testing.assert_array_equal(restored.frames, plan.frames)


def test_translation_spray_is_injective_with_bounded_action(translation_spray):
    spray, field_ = translation_spray
    assert len(spray.droplets) == spray.plan.size
    assert spray.dropped == ()
    injectivity = certify_injectivity(spray, time_samples=9)
    assert injectivity.geometric_violations == []
    assert injectivity.analytic_violations == []
    audit = spray_action_audit(spray, field_)
    assert audit.action_ok
    assert audit.droplet_violations == []
    assert audit.linf_ok


def test_spray_path_keeps_droplet_volumes(translation_spray):
    spray, _ = translation_spray
    path = spray_path(spray, times=np.linspace(0.0, 1.0, 5), n_radial=4)
    np.testing.assert_allclose(path.masses(), spray.covered_mass, rtol=1e-12)
    restored = EulerSpray.from_dict(spray.to_dict())
    assert restored.total_action == pytest.approx(spray.total_action)


def test_normalized_axes_have_unit_product():
    lam = normalized_axes(np.array([0.5, 8.0]))
    assert np.prod(lam) == pytest.approx(1.0)
    assert lam[1] / lam[0] == pytest.approx(16.0)


# =======================
# Path Algebra
# =======================

def test_balanced_taus():
    np.testing.assert_allclose(balanced_taus([1.0, 4.0]), [1.0 / 3.0, 2.0 / 3.0])
    np.testing.assert_allclose(balanced_taus([0.0, 0.0]), [0.5, 0.5])
    taus = balanced_taus([0.0, 4.0])
    assert taus[0] > 0
    assert taus.sum() == pytest.approx(1.0)


def test_concatenated_action_is_sum_over_fractions():
    masses = np.full(4, 0.25)
    a = np.zeros((4, 2))
    b = a + np.array([1.0, 0.0])
    c = b + np.array([0.0, 2.0])
    first = linear_path(a, b, masses)
    second = linear_path(b, c, masses)
    assert first.action == pytest.approx(1.0)
    assert second.action == pytest.approx(4.0)
    taus = balanced_taus([first.action, second.action])
    path = concatenate([first, second], taus)
    assert path.action == pytest.approx(9.0)
    assert path.times[0] == 0.0
    assert path.times[-1] == pytest.approx(1.0)
    np.testing.assert_array_equal(path.frames[-1].positions, c)


def test_concatenate_rejects_broken_chain():
    masses = np.full(2, 0.5)
    a = np.zeros((2, 2))
    first = linear_path(a, a + 1.0, masses)
    second = linear_path(a + 2.0, a + 3.0, masses)
    with pytest.raises(ChainBroken):
        concatenate([first, second], [0.5, 0.5])
    with pytest.raises(InvalidShape):
        concatenate([first, second], [0.5, 0.6])


def test_reverse_and_static_paths():
    masses = np.full(3, 1.0 / 3.0)
    start = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    path = linear_path(start, start * 2.0, masses)
    back = reverse_path(path)
    assert back.action == path.action
    np.testing.assert_array_equal(back.frames[0].positions, path.frames[-1].positions)
    still = static_path(DiscreteMeasure(start, masses))
    assert still.action == 0.0
    assert len(still.frames) == 3


# =======================
# General Densities
# =======================

def test_identical_densities_connect_statically(small_disk):
    path, report = connect_general_densities(small_disk, small_disk, 0.5, n_samples=50)
    assert report.shortcut == "identical densities"
    assert path.action == 0.0


def test_mass_mismatch_without_rescaling(unit_disk, small_disk):
    with pytest.raises(MassMismatch):
        connect_general_densities(unit_disk, small_disk, 0.5, n_samples=50, rescale=False)
    with pytest.raises(InvalidShape):
        connect_general_densities(unit_disk, small_disk, 1.0, n_samples=50)


@pytest.mark.slow
def test_general_connection_is_a_consistent_chain():
    rho0 = rasterize(Ball([0.0, 0.0], 0.5), 0.05)
    rho1 = rasterize(Ball([0.4, 0.1], 0.5), 0.05)
    path, report = connect_general_densities(rho0, rho1, 0.5, n_samples=120, max_levels=1)
    assert len(report.segments) == len(report.taus) == len(report.segment_actions)
    assert sum(report.taus) == pytest.approx(1.0)
    assert path.times[0] == 0.0
    assert path.times[-1] == pytest.approx(1.0)
    assert path.action == pytest.approx(report.action)
    assert path.mass_drift() < 1e-12
    assert math.isfinite(report.bound)
