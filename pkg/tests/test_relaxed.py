import math

import numpy as np
import pytest

from shapeflow.errors import InvalidShape, QuadratureMismatch
from shapeflow.shape_utils import Ball, DiscreteMeasure, GridDensity, rasterize, sample_cell_centers
from shapeflow.engines.interpolation_engine.engine import covering_grid
from shapeflow.engines.transport_engine.engine import BrenierField, estimate_brenier_field, solve_exact
from shapeflow.engines.relaxed_engine.engine import (
    RelaxedState,
    action_identity_check,
    constraint_residual,
    discrete_divergence,
    interpolant_state,
    khat,
    khat_field,
    label_supersample,
    minimality_probe,
    relaxed_action,
)
from shapeflow.engines.weak_euler_engine.engine import TestFunctionBank


@pytest.fixture
def translation_state(translation_field, small_disk):
    points = sample_cell_centers(small_disk).points
    grid = covering_grid(np.vstack([points, points + np.array([0.2, 0.1])]), 0.1, padding=3)
    return interpolant_state(translation_field, small_disk, grid)


def _static_state(dims=(8, 8), times=5):
    grid = GridDensity(np.zeros(2), 0.25, np.zeros(dims))
    c1 = np.zeros((times,) + dims)
    c1[:, 2:6, 2:6] = 1.0
    return RelaxedState.single_fluid(grid, np.linspace(0.0, 1.0, times), c1, np.zeros(c1.shape + (2,)))


# =======================
# Legendre Transform
# =======================

def test_khat_matches_numerical_supremum():
    xs = np.linspace(0.1, 2.0, 100)
    ys = np.linspace(-1.0, 1.0, 100)
    # for x > 0 the sup over the constraint set sits on a = −½b²
    b = np.linspace(-12.0, 12.0, 48001)
    for x in xs:
        numerical = np.max(-0.5 * x * b[None, :] ** 2 + ys[:, None] * b[None, :], axis=1)
        exact = np.array([khat(x, y, 1.0) for y in ys])
        np.testing.assert_allclose(exact, numerical, atol=1e-6)


def test_khat_special_cases():
    assert khat(0.0, 0.0, 1.0) == 0.0
    assert khat(2.0, 0.0, 1.0) == 0.0
    assert khat(-0.1, 0.0, 1.0) == math.inf
    assert khat(0.0, 1.0, 1.0) == math.inf
    assert khat(-1.0, [0.5, 0.0], 1.0) == math.inf
    assert khat(2.0, [3.0, 4.0], 0.5) == pytest.approx(12.5)


def test_khat_field_agrees_with_scalar(rng):
    c = rng.uniform(-0.5, 1.0, size=(6, 5))
    m = rng.normal(size=(6, 5, 2))
    m[0] = 0.0
    field = khat_field(c, m, 1.0)
    scalar = np.array([khat(c[idx], m[idx], 1.0) for idx in np.ndindex(c.shape)]).reshape(c.shape)
    np.testing.assert_allclose(field, scalar, rtol=1e-14)


def test_khat_field_slack_treats_overshoot_as_vacuum():
    c = np.array([-0.01, -0.2])
    m = np.zeros((2, 2))
    np.testing.assert_array_equal(khat_field(c, m, 1.0, slack=0.05), [0.0, np.inf])


# =======================
# Relaxed States
# =======================

def test_state_validation():
    grid = GridDensity(np.zeros(2), 0.25, np.zeros((4, 4)))
    c = np.full((2, 3, 4, 4), 0.5)
    m = np.zeros((2, 3, 4, 4, 2))
    RelaxedState(grid, np.linspace(0.0, 1.0, 3), c, m)
    with pytest.raises(InvalidShape):
        RelaxedState(grid, np.linspace(0.0, 1.0, 3), c * 1.5, m)
    with pytest.raises(InvalidShape):
        RelaxedState(grid, np.array([0.0, 0.7, 0.5]), c, m)
    with pytest.raises(InvalidShape):
        RelaxedState(grid, np.linspace(0.0, 1.0, 3), c, m[..., :1])
    with pytest.raises(InvalidShape):
        RelaxedState(grid, np.linspace(0.0, 1.0, 3), c, m, rho_hat=(1.0, 1.0))


def test_state_dict_round_trip():
    state = _static_state()
    restored = RelaxedState.from_dict(state.to_dict())
    np.testing.assert_array_equal(restored.c, state.c)
    np.testing.assert_array_equal(restored.end, state.end)
    assert restored.grid.dims == state.grid.dims


def test_static_state_satisfies_constraints():
    state = _static_state()
    bank = TestFunctionBank.random(np.zeros(2), np.full(2, 2.0), count=10, seed=5)
    report = constraint_residual(state, bank)
    assert report.max_total < 1e-12
    assert relaxed_action(state).action == 0.0


def test_constraint_bank_dimension_must_match():
    bank = TestFunctionBank.random(np.zeros(3), np.ones(3), count=2)
    with pytest.raises(QuadratureMismatch):
        constraint_residual(_static_state(), bank)


def test_momentum_without_concentration_is_infinite():
    state = _static_state()
    m1 = state.m[1].copy()
    m1[:, 0, 0] = [1.0, 0.0]
    report = relaxed_action(state.with_momentum(m1))
    assert report.infinite
    assert report.action == math.inf
    assert report.momentum_without_concentration == state.times.size
    assert report.structure_ok


# =======================
# Interpolant and Minimality
# =======================

def test_translation_interpolant_action_is_kinetic_energy(translation_state, small_disk):
    report = relaxed_action(translation_state)
    assert not report.infinite
    expected = 0.5 * small_disk.mass * (0.2**2 + 0.1**2)
    assert report.action == pytest.approx(expected, rel=1e-9)
    assert report.phase_actions[0] == 0.0


def test_translation_interpolant_is_locally_minimal(translation_state):
    report = minimality_probe(translation_state, perturbations=10, seed=2)
    assert report.probes == 10
    assert report.passed
    assert report.min_gap > -1e-10


def test_interpolant_requires_matching_grid(translation_field, small_disk):
    grid = covering_grid(sample_cell_centers(small_disk).points, 0.05)
    with pytest.raises(QuadratureMismatch):
        interpolant_state(translation_field, small_disk, grid)


def test_one_dimensional_state_has_no_probes():
    grid = GridDensity(np.zeros(1), 0.25, np.zeros(8))
    c1 = np.zeros((3, 8))
    c1[:, 2:6] = 1.0
    state = RelaxedState.single_fluid(grid, np.linspace(0.0, 1.0, 3), c1, np.zeros((3, 8, 1)))
    report = minimality_probe(state)
    assert report.probes == 0
    assert report.passed


def test_discrete_divergence_of_rotated_gradient_vanishes(rng):
    potential = np.zeros((12, 12))
    potential[2:-2, 2:-2] = rng.normal(size=(8, 8))
    h = 0.1
    gx = np.zeros_like(potential)
    gy = np.zeros_like(potential)
    gx[1:-1, :] = (potential[2:, :] - potential[:-2, :]) / (2 * h)
    gy[:, 1:-1] = (potential[:, 2:] - potential[:, :-2]) / (2 * h)
    field = np.stack([gy, -gx], axis=-1)
    assert np.max(np.abs(discrete_divergence(field, h))) < 1e-10


# =======================
# Action Identity
# =======================

def test_translation_action_equals_half_transport_cost(translation_state, translation_field, small_disk):
    report = action_identity_check(translation_state, translation_field, small_disk)
    assert report.passed
    assert report.relative_gap < 1e-9
    assert report.half_transport_cost == pytest.approx(0.5 * small_disk.mass * (0.2**2 + 0.1**2), rel=1e-12)


def test_label_supersample_follows_the_stretch(linear_field, lattice_measure):
    assert label_supersample(linear_field, 2) == 4
    assert label_supersample(linear_field, 6) == 6
    target = DiscreteMeasure(lattice_measure.points * np.array([20.0, 0.05]), lattice_measure.weights)
    stretched = estimate_brenier_field(lattice_measure, target, plan=solve_exact(lattice_measure, target))
    assert label_supersample(stretched) == 16


@pytest.mark.slow
def test_disk_to_ellipse_action_approaches_half_transport_cost(disk_to_ellipse):
    rho0, field_ = disk_to_ellipse(0.05)
    grid = covering_grid(np.vstack([field_.points, field_.images]), 0.05, padding=3)
    state = interpolant_state(field_, rho0, grid)
    report = action_identity_check(state, field_, rho0, rtol=1e-2)
    # deposition averages velocities within a cell, which can only lower the action
    assert report.action <= report.half_transport_cost
    assert report.passed
    assert report.half_transport_cost == pytest.approx(0.5 * np.sum(field_.weights * np.sum(field_.velocities**2, axis=1)), rel=0.02)


@pytest.mark.slow
def test_fine_grid_interpolant_matches_half_cost_and_is_minimal():
    h = 0.01
    rho0 = rasterize(Ball([0.0, 0.0], 1.0), h)
    mu = sample_cell_centers(rho0)
    n = mu.size
    stretch = np.array([2.0, 0.5])
    field_ = BrenierField(
        mu.points, mu.points * stretch, mu.weights,
        np.tile(np.diag(stretch), (n, 1, 1)),
        np.tile([0.5, 2.0], (n, 1)),
        np.tile([[0.0, 1.0], [1.0, 0.0]], (n, 1, 1)),
        np.zeros(n),
    )
    grid = covering_grid(np.vstack([field_.points, field_.images]), h, padding=3)
    state = interpolant_state(field_, rho0, grid)
    report = action_identity_check(state, field_, rho0, rtol=1e-4)
    assert report.passed
    # ½∫_disk |(A − I)x|² = (π/8)(1 + 1/4)
    assert report.half_transport_cost == pytest.approx(math.pi * 1.25 / 8.0, rel=1e-3)
    minimality = minimality_probe(state, 100)
    assert minimality.passed
    assert minimality.min_gap >= -1e-4
