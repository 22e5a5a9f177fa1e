"""
Tests for the iLQR solver: Riccati and least-squares oracles, value model,
solver bookkeeping and the solved throw policies
"""
from dataclasses import replace

import numpy as np
import pytest

from src.core.errors import ArtifactError, HorizonMismatch, IndexOutOfHorizon, NonPositiveDefinite, NoProgress
from src.core.ilqr import (
    CostSpec,
    LinearDynamics,
    QuadraticCost,
    SolverOptions,
    backward_pass,
    closed_loop_rollout,
    forward_pass,
    load_policy,
    policy_from_dict,
    policy_to_dict,
    save_policy,
    solve,
    total_cost,
    value_at,
    _nominal_policy,
)
from src.core.plant import PlantDynamics, PlantState, Trajectory, rollout
from src.core.task import terminal_errors


def random_lti(rng, nx=3, nu=2):
    a_matrix = rng.normal(size=(nx, nx))
    a_matrix *= 1.1 / max(abs(np.linalg.eigvals(a_matrix)))
    b_matrix = rng.normal(size=(nx, nu))
    root = rng.normal(size=(nx, nx))
    weight = root @ root.T + 0.1 * np.eye(nx)
    return LinearDynamics(a_matrix, b_matrix, dt=0.1), weight


def riccati(a_matrix, b_matrix, weight, control_weight, horizon):
    """Textbook backward recursion for x_N' W x_N + sum r |u|^2"""
    p = weight.copy()
    gains = [None] * horizon
    values = [None] * (horizon + 1)
    values[horizon] = p
    r = control_weight * np.eye(b_matrix.shape[1])
    for k in range(horizon - 1, -1, -1):
        gain = -np.linalg.solve(r + b_matrix.T @ p @ b_matrix, b_matrix.T @ p @ a_matrix)
        p = a_matrix.T @ p @ a_matrix + a_matrix.T @ p @ b_matrix @ gain
        p = 0.5 * (p + p.T)
        gains[k] = gain
        values[k] = p
    return gains, values


def least_squares_controls(dynamics, cost, x0):
    """Minimize the LQ cost directly over the stacked control vector"""
    a_matrix, b_matrix = dynamics.a_matrix, dynamics.b_matrix
    n, nu = cost.horizon, b_matrix.shape[1]
    free = np.linalg.matrix_power(a_matrix, n) @ x0 - cost.terminal_target
    g = np.hstack([np.linalg.matrix_power(a_matrix, n - 1 - k) @ b_matrix for k in range(n)])
    diff = np.zeros(((n - 1) * nu, n * nu))
    for k in range(1, n):
        diff[(k - 1) * nu:k * nu, k * nu:(k + 1) * nu] = np.eye(nu)
        diff[(k - 1) * nu:k * nu, (k - 1) * nu:k * nu] = -np.eye(nu)
    rate = cost.rate_weight / cost.dt ** 2
    hessian = g.T @ cost.terminal_weight @ g + cost.control_weight * np.eye(n * nu) + rate * diff.T @ diff
    return np.linalg.solve(hessian, -g.T @ cost.terminal_weight @ free).reshape(n, nu)


@pytest.mark.parametrize("nx", [2, 3, 4])
@pytest.mark.parametrize("seed", range(10))
def test_lti_gains_and_cost_match_riccati(seed, nx):
    rng = np.random.default_rng(seed)
    dynamics, weight = random_lti(rng, nx=nx)
    horizon = 12
    cost = QuadraticCost(weight, np.zeros(nx), 0.5, 0.0, horizon, dynamics.dt)
    x0 = rng.normal(size=nx)

    policy, report = solve(x0, np.zeros((horizon, 2)), dynamics, cost)
    gains, values = riccati(dynamics.a_matrix, dynamics.b_matrix, weight, 0.5, horizon)

    assert report.converged
    for k in range(horizon):
        assert np.linalg.norm(policy.feedback[k] - gains[k]) <= 1e-8 * max(np.linalg.norm(gains[k]), 1.0)
        assert np.allclose(policy.value_hessian[k], 2.0 * values[k], rtol=1e-8, atol=1e-10)
    expected = float(x0 @ values[0] @ x0)
    assert policy.total_cost == pytest.approx(expected, rel=1e-8)


def test_rate_cost_solution_matches_least_squares():
    rng = np.random.default_rng(42)
    dynamics, weight = random_lti(rng)
    horizon = 8
    cost = QuadraticCost(weight, rng.normal(size=3), 0.3, 0.02, horizon, dynamics.dt)
    x0 = rng.normal(size=3)

    policy, report = solve(x0, np.zeros((horizon, 2)), dynamics, cost)

    assert report.converged
    np.testing.assert_allclose(policy.nominal_controls, least_squares_controls(dynamics, cost, x0),
                               rtol=1e-5, atol=1e-6)


def test_value_model_equals_cost_to_go_along_nominal():
    rng = np.random.default_rng(7)
    dynamics, weight = random_lti(rng)
    cost = QuadraticCost(weight, np.zeros(3), 0.2, 0.01, 6, dynamics.dt)
    policy, _ = solve(rng.normal(size=3), np.zeros((6, 2)), dynamics, cost)

    assert policy.value(policy.nominal_states[0], 0) == pytest.approx(policy.total_cost, rel=1e-10)
    assert policy.value(policy.nominal_states[6], 6) == pytest.approx(
        cost.terminal_cost(policy.nominal_states[6]), rel=1e-12, abs=1e-14)


def test_controls_pinned_at_a_bound_drop_out_of_the_step():
    dynamics = LinearDynamics(np.eye(2), np.eye(2), dt=0.1, lower=np.zeros(2), upper=np.full(2, 10.0))
    cost = QuadraticCost(np.eye(2), np.array([-1.0, 1.0]), 0.1, 0.0, 3, 0.1)
    policy, report = solve(np.zeros(2), np.zeros((3, 2)), dynamics, cost)

    assert report.converged
    assert np.all(policy.nominal_controls[:, 0] == 0.0)
    assert np.all(policy.feedforward[:, 0] == 0.0)
    assert np.all(policy.feedback[:, 0, :] == 0.0)
    np.testing.assert_allclose(policy.nominal_controls[:, 1], 6.0 / 18.2, rtol=1e-5)


def test_converged_policy_has_no_step_left():
    rng = np.random.default_rng(13)
    dynamics, weight = random_lti(rng)
    cost = QuadraticCost(weight, rng.normal(size=3), 0.3, 0.02, 8, dynamics.dt)
    policy, report = solve(rng.normal(size=3), np.zeros((8, 2)), dynamics, cost)
    assert report.converged
    stepped = forward_pass(policy, dynamics, cost, step=1.0)
    assert abs(total_cost(stepped, cost) - policy.total_cost) < 1e-10


def test_target_at_nominal_endpoint_costs_nothing(arm):
    x0 = PlantState.from_theta((-0.3, 0.3), arm)
    traj = rollout(x0, np.full((40, 2), 0.3), arm)
    end = traj.final_state
    spec = CostSpec(theta_target=tuple(end[:2]), omega_target=tuple(end[2:4]), c_p=0.0, c_pd=0.0)
    assert total_cost(traj, spec) == 0.0

    nominal = _nominal_policy(traj, spec.to_quadratic(), PlantDynamics(arm))
    candidate, (d_linear, d_quadratic) = backward_pass(nominal, arm, spec, reg=1e-6)
    assert np.all(candidate.feedforward == 0.0)
    assert d_linear == 0.0 and d_quadratic == 0.0


def test_value_hessians_are_positive_semidefinite(solved):
    rng = np.random.default_rng(17)
    for name, (policy, _) in solved.items():
        for k in range(policy.horizon + 1):
            hessian = policy.value_hessian[k]
            scale = max(np.linalg.norm(hessian), 1.0)
            for dx in rng.normal(size=(100, policy.state_dim)):
                assert dx @ hessian @ dx >= -1e-9 * scale * (dx @ dx), (name, k)


def test_throw_policies_are_stationary(solved, run_config):
    """Directional derivatives of the open-loop cost vanish along controls off the bounds"""
    rng = np.random.default_rng(23)
    step = 1e-6
    for name, (policy, _) in solved.items():
        controls = policy.nominal_controls
        start = policy.nominal_states[0]

        def cost_of(u):
            return total_cost(rollout(start, u, run_config.arm), policy.cost)

        interior = (controls > policy.control_lower + 1e-4) & (controls < policy.control_upper - 1e-4)
        assert interior.any(), name
        base = cost_of(controls)
        bound = 1e-3 * (1.0 + abs(base))
        for _ in range(20):
            direction = np.where(interior, rng.normal(size=controls.shape), 0.0)
            direction /= np.linalg.norm(direction)
            slope = (cost_of(controls + step * direction) - cost_of(controls - step * direction)) / (2.0 * step)
            assert abs(slope) <= bound, name


def test_total_cost_matches_hand_summation():
    cost = QuadraticCost(np.diag([2.0, 1.0]), np.array([1.0, 0.0]), 0.5, 0.1, 3, 0.5)
    traj = Trajectory(
        states=np.array([[0.0, 0.0], [0.1, 0.2], [0.3, 0.1], [0.8, -0.4]]),
        controls=np.array([[1.0], [2.0], [0.5]]),
        dt=0.5,
    )
    terminal = 2.0 * (0.8 - 1.0) ** 2 + 1.0 * 0.4 ** 2
    running = 0.5 * (1.0 + 4.0 + 0.25) + 0.1 * ((1.0 / 0.5) ** 2 + (-1.5 / 0.5) ** 2)
    assert total_cost(traj, cost) == pytest.approx(terminal + running, rel=1e-14)


def test_policy_control_law_and_index_bounds(policy_factory):
    policy = policy_factory(np.random.default_rng(0))
    x = policy.nominal_states[2] + 0.1
    expected = policy.nominal_controls[2] + policy.feedforward[2] + policy.feedback[2] @ np.full(3, 0.1)
    np.testing.assert_allclose(policy.control(x, 2, clamp=False), expected)
    with pytest.raises(IndexOutOfHorizon):
        policy.control(x, policy.horizon)
    with pytest.raises(IndexOutOfHorizon):
        policy.value(x, policy.horizon + 1)


def test_solve_rejects_wrong_control_count():
    dynamics = LinearDynamics(np.eye(2), np.eye(2), dt=0.1)
    cost = QuadraticCost(np.eye(2), np.zeros(2), 1.0, 0.0, 5, 0.1)
    with pytest.raises(HorizonMismatch):
        solve(np.ones(2), np.zeros((4, 2)), dynamics, cost)


def test_negative_curvature_raises_non_positive_definite():
    dynamics = LinearDynamics(np.eye(2), np.eye(2), dt=0.1)
    cost = QuadraticCost(-np.eye(2), np.zeros(2), 0.0, 0.0, 3, 0.1)
    policy, _ = solve(np.ones(2), np.zeros((3, 2)), dynamics,
                      QuadraticCost(np.eye(2), np.zeros(2), 1.0, 0.0, 3, 0.1))
    with pytest.raises(NonPositiveDefinite):
        backward_pass(policy, dynamics, cost, reg=0.0)


def test_iteration_cap_reports_non_convergence():
    rng = np.random.default_rng(1)
    dynamics, weight = random_lti(rng)
    cost = QuadraticCost(weight, np.zeros(3), 0.5, 0.0, 10, dynamics.dt)
    x0 = rng.normal(size=3)

    policy, report = solve(x0, np.zeros((10, 2)), dynamics, cost, SolverOptions(max_iter=1))
    assert not report.converged
    assert report.reason == "max_iter"
    assert not policy.converged
    with pytest.raises(NoProgress):
        solve(x0, np.zeros((10, 2)), dynamics, cost, SolverOptions(max_iter=1), strict=True)


def test_policy_round_trips_through_json(tmp_path):
    rng = np.random.default_rng(2)
    dynamics, weight = random_lti(rng)
    cost = QuadraticCost(weight, np.zeros(3), 0.5, 0.01, 5, dynamics.dt)
    policy, _ = solve(rng.normal(size=3), np.zeros((5, 2)), dynamics, cost, name="lti")

    path = tmp_path / "policy.json"
    save_policy(policy, path)
    loaded = load_policy(path)

    assert loaded.name == "lti"
    assert np.array_equal(loaded.feedback, policy.feedback)
    assert np.array_equal(loaded.value_hessian, policy.value_hessian)
    assert loaded.total_cost == policy.total_cost


def test_policy_document_with_wrong_schema_is_rejected(policy_factory):
    data = policy_to_dict(policy_factory(np.random.default_rng(0)))
    data["version"] = 99
    with pytest.raises(ArtifactError):
        policy_from_dict(data)
    data = policy_to_dict(policy_factory(np.random.default_rng(0)))
    del data["feedback"]
    with pytest.raises(ArtifactError):
        policy_from_dict(data)


def test_throw_policies_converge_with_decreasing_cost(solved):
    for name, (policy, report) in solved.items():
        assert report.converged, name
        assert policy.converged
        assert all(b < a for a, b in zip(report.costs, report.costs[1:])), name


def test_throw_policies_reach_release_targets(solved, run_config):
    for name, (policy, _) in solved.items():
        task = run_config.task(name)
        traj = closed_loop_rollout(policy, run_config.arm)
        angle, velocity = terminal_errors(traj, task, run_config.arm)
        assert np.all(angle <= 0.02), name
        assert np.all(velocity <= 0.1), name


def test_closed_loop_rollout_reproduces_nominal(solved, run_config):
    policy, _ = solved["2m"]
    policy = replace(policy, feedforward=np.zeros_like(policy.feedforward))
    traj = closed_loop_rollout(policy, run_config.arm)
    np.testing.assert_allclose(traj.states, policy.nominal_states, atol=1e-9)


def test_feedback_rejects_start_perturbation(solved, run_config):
    policy, _ = solved["2m"]
    start = policy.nominal_states[0].copy()
    start[0] += 0.02
    open_loop = replace(policy, feedback=np.zeros_like(policy.feedback))
    closed = closed_loop_rollout(policy, run_config.arm, start).final_state
    drifted = closed_loop_rollout(open_loop, run_config.arm, start).final_state
    target = policy.nominal_states[-1]
    assert np.linalg.norm(closed[:4] - target[:4]) < np.linalg.norm(drifted[:4] - target[:4])


def test_forward_pass_without_feedforward_retraces_nominal():
    rng = np.random.default_rng(6)
    dynamics, weight = random_lti(rng)
    cost = QuadraticCost(weight, np.zeros(3), 0.5, 0.0, 4, dynamics.dt)
    policy, _ = solve(rng.normal(size=3), np.zeros((4, 2)), dynamics, cost)
    still = replace(policy, feedforward=np.zeros_like(policy.feedforward))
    traj = forward_pass(still, dynamics, cost, step=0.5)
    np.testing.assert_allclose(traj.states, policy.nominal_states, atol=1e-12)
    assert value_at(policy, policy.nominal_states[1], 1) == policy.value_offset[1]
