"""
Tests for the PAM-driven arm model
"""
import logging
import math

import numpy as np
import pytest

from src.core.plant import (
    MAX_PRESSURE,
    TRAJECTORY_HEADER,
    ArmModel,
    ControlInput,
    PlantDynamics,
    PlantState,
    dynamics_step,
    gravity_hold_pressure,
    gravity_torque,
    linearize,
    mass_matrix,
    mechanical_energy,
    pam_torque,
    pressure_step,
    rollout,
)


def test_model_defaults_resolve_mid_link_com_and_rod_inertia(arm):
    assert arm.com_offsets == pytest.approx((0.15, 0.175))
    assert arm.inertias == pytest.approx((2.0 * 0.09 / 12.0, 1.7 * 0.35 ** 2 / 12.0))


def test_model_rejects_nonpositive_mass():
    with pytest.raises(ValueError):
        ArmModel(masses=(0.0, 1.0))


def test_state_rejects_pressure_outside_range():
    with pytest.raises(ValueError):
        PlantState(0.0, 0.0, 0.0, 0.0, 0.9, 0.0)
    with pytest.raises(ValueError):
        ControlInput(-0.1, 0.2)


def test_mass_matrix_is_symmetric_positive_definite(arm):
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = mass_matrix(rng.uniform(-np.pi, np.pi, 2), arm)
        assert np.allclose(m, m.T)
        assert np.all(np.linalg.eigvalsh(m) > 0.0)


def test_gravity_torque_vanishes_hanging_down(arm):
    assert np.allclose(gravity_torque([0.0, 0.0], arm), 0.0)


def test_pam_torque_is_one_sided():
    model = ArmModel(pam_offsets=(30.0, 0.0))
    state = PlantState(0.0, 0.0, 0.0, 0.0, 0.01, 0.5)
    torque = pam_torque(state, model)
    assert torque[0] == 0.0
    assert torque[1] == pytest.approx(0.04 * 1200.0 * 0.5)


def test_pressure_step_exact_lag(arm):
    rising = pressure_step(0.0, 0.5, 1.0, 0.08, arm)
    assert rising == pytest.approx(0.5 * (1.0 - math.exp(-1.0)), abs=1e-15)
    falling = pressure_step(0.5, 0.0, -1.0, 0.4, arm)
    assert falling == pytest.approx(0.5 * math.exp(-1.0), abs=1e-15)


def test_pressure_stays_clamped_under_adversarial_controls(arm):
    rng = np.random.default_rng(11)
    controls = rng.uniform(-10.0, 10.0, size=(200, 2))
    traj = rollout(PlantState(0.0, 0.0, 0.0, 0.0), controls, arm)
    assert traj.states[:, 4:].min() >= 0.0
    assert traj.states[:, 4:].max() <= MAX_PRESSURE
    assert traj.controls.min() >= 0.0 and traj.controls.max() <= MAX_PRESSURE


def test_unactuated_frictionless_energy_is_conserved():
    model = ArmModel(friction=(0.0, 0.0))
    x0 = PlantState(0.05, -0.03, 0.0, 0.0)
    traj = rollout(x0, np.zeros((100, 2)), model)
    energies = [mechanical_energy(x, model) for x in traj.states]
    assert max(abs(e - energies[0]) for e in energies) < 1e-6


def test_rk4_global_error_is_fourth_order():
    base = ArmModel()
    x0 = np.array([0.0, 0.0, 0.0, 0.0, 0.05, 0.05])
    duration = 0.4

    def final_state(dt):
        model = base.with_dt(dt)
        steps = int(round(duration / dt))
        return rollout(x0, np.full((steps, 2), 0.05), model).final_state[:4]

    reference = final_state(0.01 / 16.0)
    coarse = np.linalg.norm(final_state(0.02) - reference)
    fine = np.linalg.norm(final_state(0.01) - reference)
    assert 12.0 < coarse / fine < 20.0


def test_linearization_matches_finite_differences(arm):
    rng = np.random.default_rng(5)
    checked = 0
    while checked < 100:
        theta = rng.uniform(-1.0, 1.0, 2)
        omega = rng.uniform(-2.0, 2.0, 2)
        p = rng.uniform(0.05, 0.75, 2)
        pref = rng.uniform(0.05, 0.75, 2)
        if np.min(np.abs(pref - p)) <= 0.01:
            continue
        x = np.concatenate([theta, omega, p])
        a_matrix, b_matrix = linearize(PlantState.from_array(x), ControlInput(*pref), arm)

        dynamics = PlantDynamics(arm)
        h = 1e-5
        a_fd = np.column_stack([
            (dynamics.step(x + h * e, pref) - dynamics.step(x - h * e, pref)) / (2 * h) for e in np.eye(6)
        ])
        b_fd = np.column_stack([
            (dynamics.step(x, pref + h * e) - dynamics.step(x, pref - h * e)) / (2 * h) for e in np.eye(2)
        ])
        assert np.linalg.norm(a_matrix - a_fd) / max(np.linalg.norm(a_fd), 1.0) < 1e-4
        assert np.linalg.norm(b_matrix - b_fd) / max(np.linalg.norm(b_fd), 1.0) < 1e-4
        checked += 1


def test_gravity_hold_keeps_arm_at_rest(arm):
    theta = (0.3, 0.2)
    hold = gravity_hold_pressure(theta, arm)
    assert 0.0 < hold.pref1 < MAX_PRESSURE
    state = PlantState(theta[0], theta[1], 0.0, 0.0, hold.pref1, hold.pref2)
    after = dynamics_step(state, hold, arm)
    assert abs(after.omega1) < 1e-8
    assert abs(after.omega2) < 1e-8


def test_gravity_hold_is_zero_when_gravity_pulls_into_extension(arm):
    start = PlantState.from_theta((-0.5, 0.2), arm)
    assert start.p1 == 0.0 and start.p2 == 0.0


def test_gravity_hold_saturates_with_warning(caplog):
    weak = ArmModel(pam_gains=(1.0, 1.0))
    with caplog.at_level(logging.WARNING):
        hold = gravity_hold_pressure((1.2, 0.4), weak)
    assert hold.pref1 == MAX_PRESSURE
    assert "saturating" in caplog.text
    torque = gravity_torque((1.2, 0.4), weak)[0]
    assert f"{torque:.4g} N m of gravity" in caplog.text


def test_trajectory_rows_leave_final_control_empty(arm):
    traj = rollout(PlantState(0.0, 0.0, 0.0, 0.0), np.full((3, 2), 0.2), arm)
    rows = traj.to_rows()
    assert len(rows) == 4
    assert len(rows[0]) == len(TRAJECTORY_HEADER)
    assert rows[-1][-2:] == [None, None]
    assert rows[2][1] == pytest.approx(0.02)


def test_pam_torque_affine_reference_values():
    model = ArmModel(pulley_radii=(0.05, 0.05), pam_gains=(1000.0, 1000.0))
    state = PlantState(0.0, 0.0, 0.0, 0.0, 0.4, 0.2)
    np.testing.assert_allclose(pam_torque(state, model), [20.0, 10.0])
    assert np.all(pam_torque(PlantState(0.0, 0.0, 0.0, 0.0), model) == 0.0)


def test_gravity_hold_at_horizontal_forearm(arm):
    hold = gravity_hold_pressure((0.0, math.pi / 2), arm)
    state = PlantState(0.0, math.pi / 2, 0.0, 0.0, hold.pref1, hold.pref2)
    np.testing.assert_allclose(pam_torque(state, arm), gravity_torque((0.0, math.pi / 2), arm), atol=1e-9)


def test_gravity_hold_keeps_arm_still_for_one_second(arm):
    theta = (0.3, 0.2)
    hold = gravity_hold_pressure(theta, arm)
    x0 = PlantState(theta[0], theta[1], 0.0, 0.0, hold.pref1, hold.pref2)
    steps = int(round(1.0 / arm.dt))
    traj = rollout(x0, np.tile(hold.as_array(), (steps, 1)), arm)
    assert np.max(np.abs(traj.states - x0.as_array())) < 1e-6


def test_linearization_differences_inward_at_zero_pressure(arm):
    x = np.array([-0.3, 0.3, 0.0, 0.0, 0.0, 0.0])
    u = np.zeros(2)
    a_matrix, b_matrix = linearize(PlantState.from_array(x), ControlInput(*u), arm)

    dynamics = PlantDynamics(arm)
    h = 1e-7
    centre = dynamics.step(x, u)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        forward = (dynamics.step(x, u + e) - centre) / h
        np.testing.assert_allclose(b_matrix[:, j], forward, rtol=1e-3, atol=1e-6)
        shifted = x.copy()
        shifted[4 + j] = h
        np.testing.assert_allclose(a_matrix[:, 4 + j], (dynamics.step(shifted, u) - centre) / h,
                                   rtol=1e-3, atol=1e-6)
    rise = 1.0 - math.exp(-arm.dt / arm.tc_rise)
    assert b_matrix[4, 0] == pytest.approx(rise, rel=1e-6)
    assert b_matrix[5, 1] == pytest.approx(rise, rel=1e-6)
