"""
Finite-horizon iterative LQR

Produces time-varying affine policies u = u_bar + l + L (x - x_bar) together
with a quadratic approximation of the optimal cost-to-go at every stage.
The solver is written against a small dynamics protocol (step, linearize,
control bounds) so the same code runs on the arm and on linear test plants.
"""
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Protocol, Tuple, Union

import numpy as np
import numpy.typing as npt
from numpy.linalg import LinAlgError
from scipy.linalg import cho_factor, cho_solve

from src.core.errors import (
    ArtifactError,
    HorizonMismatch,
    IndexOutOfHorizon,
    NonFiniteState,
    NonPositiveDefinite,
    NoProgress,
)
from src.core.plant import ArmModel, PlantDynamics, PlantState, Trajectory
from src.utils.io_utils import read_json, write_json_atomic
from src.utils.logger_config import get_logger

DoubleMatrix = npt.NDArray[np.float64]

POLICY_SCHEMA = "affine-policy"
POLICY_SCHEMA_VERSION = 1

# Distance at which a nominal control counts as resting on its bound
BOUND_TOL = 1e-9


class Dynamics(Protocol):
    state_dim: int
    control_dim: int
    dt: float
    control_lower: DoubleMatrix
    control_upper: DoubleMatrix

    def step(self, x: DoubleMatrix, u: DoubleMatrix) -> DoubleMatrix: ...

    def linearize(self, x: DoubleMatrix, u: DoubleMatrix) -> Tuple[DoubleMatrix, DoubleMatrix]: ...


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    """x(k+1) = A x(k) + B u(k), optionally with box-bounded controls"""

    a_matrix: DoubleMatrix
    b_matrix: DoubleMatrix
    dt: float = 1.0
    lower: Optional[DoubleMatrix] = None
    upper: Optional[DoubleMatrix] = None

    def __post_init__(self):
        a_matrix = np.atleast_2d(np.asarray(self.a_matrix, dtype=np.float64))
        b_matrix = np.atleast_2d(np.asarray(self.b_matrix, dtype=np.float64))
        if a_matrix.shape[0] != a_matrix.shape[1] or b_matrix.shape[0] != a_matrix.shape[0]:
            raise ValueError(f"Incompatible shapes A{a_matrix.shape} B{b_matrix.shape}")
        object.__setattr__(self, "a_matrix", a_matrix)
        object.__setattr__(self, "b_matrix", b_matrix)

    @property
    def state_dim(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def control_dim(self) -> int:
        return self.b_matrix.shape[1]

    @property
    def control_lower(self) -> DoubleMatrix:
        if self.lower is None:
            return np.full(self.control_dim, -np.inf)
        return np.asarray(self.lower, dtype=np.float64)

    @property
    def control_upper(self) -> DoubleMatrix:
        if self.upper is None:
            return np.full(self.control_dim, np.inf)
        return np.asarray(self.upper, dtype=np.float64)

    def step(self, x: DoubleMatrix, u: DoubleMatrix) -> DoubleMatrix:
        return self.a_matrix @ x + self.b_matrix @ u

    def linearize(self, x: DoubleMatrix, u: DoubleMatrix) -> Tuple[DoubleMatrix, DoubleMatrix]:
        return self.a_matrix, self.b_matrix


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """
    g(x_N) = (x_N - target)' W (x_N - target)
    l(u_k) = c_p |u_k|^2 + c_pd |(u_k - u_{k-1}) / dt|^2   (rate term for k >= 1)
    """

    terminal_weight: DoubleMatrix
    terminal_target: DoubleMatrix
    control_weight: float
    rate_weight: float
    horizon: int
    dt: float

    def __post_init__(self):
        weight = np.atleast_2d(np.asarray(self.terminal_weight, dtype=np.float64))
        target = np.asarray(self.terminal_target, dtype=np.float64).reshape(-1)
        if weight.shape != (target.size, target.size):
            raise ValueError(f"Terminal weight {weight.shape} does not match target size {target.size}")
        if not np.allclose(weight, weight.T):
            raise ValueError("Terminal weight must be symmetric")
        if self.control_weight < 0.0 or self.rate_weight < 0.0:
            raise ValueError("Running weights must be nonnegative")
        if self.horizon < 1:
            raise ValueError(f"Horizon must be at least 1, got {self.horizon}")
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "terminal_weight", weight)
        object.__setattr__(self, "terminal_target", target)

    def terminal_cost(self, x: DoubleMatrix) -> float:
        err = np.asarray(x, dtype=np.float64) - self.terminal_target
        return float(err @ self.terminal_weight @ err)

    def stage_cost(self, u: DoubleMatrix, previous: Optional[DoubleMatrix]) -> float:
        value = self.control_weight * float(u @ u)
        if previous is not None:
            rate = (u - previous) / self.dt
            value += self.rate_weight * float(rate @ rate)
        return value

    def running_cost(self, controls: DoubleMatrix) -> float:
        controls = np.asarray(controls, dtype=np.float64)
        value = self.control_weight * float(np.sum(controls * controls))
        if controls.shape[0] > 1:
            rates = np.diff(controls, axis=0) / self.dt
            value += self.rate_weight * float(np.sum(rates * rates))
        return value

    def to_dict(self) -> Dict[str, Any]:
        return {
            "terminal_weight": self.terminal_weight.tolist(),
            "terminal_target": self.terminal_target.tolist(),
            "control_weight": self.control_weight,
            "rate_weight": self.rate_weight,
            "horizon": self.horizon,
            "dt": self.dt,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QuadraticCost":
        return cls(
            terminal_weight=np.asarray(data["terminal_weight"], dtype=np.float64),
            terminal_target=np.asarray(data["terminal_target"], dtype=np.float64),
            control_weight=float(data["control_weight"]),
            rate_weight=float(data["rate_weight"]),
            horizon=int(data["horizon"]),
            dt=float(data["dt"]),
        )


@dataclass(frozen=True)
class CostSpec:
    """Release-point targets plus terminal and running weights for the arm"""

    theta_target: Tuple[float, float]
    omega_target: Tuple[float, float]
    c_a: float = 500.0
    c_v: float = 50.0
    c_p: float = 1e-2
    c_pd: float = 1e-2
    horizon: int = 40
    dt: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "theta_target", tuple(float(v) for v in self.theta_target))
        object.__setattr__(self, "omega_target", tuple(float(v) for v in self.omega_target))
        if min(self.c_a, self.c_v, self.c_p, self.c_pd) < 0.0:
            raise ValueError("Cost weights must be nonnegative")
        if self.c_a <= 0.0 and self.c_v <= 0.0:
            raise ValueError("At least one of c_a, c_v must be positive")
        if self.horizon < 1:
            raise ValueError(f"Horizon must be at least 1, got {self.horizon}")
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    def to_quadratic(self) -> QuadraticCost:
        weight = np.diag([self.c_a, self.c_a, self.c_v, self.c_v, 0.0, 0.0])
        target = np.array([*self.theta_target, *self.omega_target, 0.0, 0.0])
        return QuadraticCost(weight, target, self.c_p, self.c_pd, self.horizon, self.dt)


CostLike = Union[CostSpec, QuadraticCost]
ModelLike = Union[ArmModel, Dynamics]


def as_quadratic(spec: CostLike) -> QuadraticCost:
    return spec.to_quadratic() if isinstance(spec, CostSpec) else spec


def as_dynamics(model: ModelLike) -> Dynamics:
    return PlantDynamics(model) if isinstance(model, ArmModel) else model


@dataclass(frozen=True)
class SolverOptions:
    tol_cost: float = 1e-9
    max_iter: int = 200
    reg_init: float = 1e-6
    reg_increase: float = 10.0
    reg_decrease: float = 2.0
    reg_max: float = 1e6
    line_search_steps: int = 11

    def __post_init__(self):
        if not self.tol_cost > 0.0:
            raise ValueError(f"tol_cost must be positive, got {self.tol_cost}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.reg_init < 0.0 or self.reg_max <= 0.0:
            raise ValueError("Regularization bounds must be nonnegative")
        if self.reg_increase <= 1.0 or self.reg_decrease <= 1.0:
            raise ValueError("Regularization factors must exceed 1")
        if self.line_search_steps < 1:
            raise ValueError("line_search_steps must be at least 1")

    def threshold(self, cost: float) -> float:
        """Cost change below which the solver stops, relative to costs above 1"""
        return self.tol_cost * max(1.0, abs(cost))


@dataclass(frozen=True, eq=False)
class AffinePolicy:
    """
    Local solution of one finite-horizon problem.

    Stage k holds the nominal pair (x_bar, u_bar), the open-loop term l, the
    feedback gain L and the quadratic value model
    v(x, k) = s0 + s' dx + 0.5 dx' S dx with dx = x - x_bar(k).
    """

    nominal_states: DoubleMatrix
    nominal_controls: DoubleMatrix
    feedforward: DoubleMatrix
    feedback: DoubleMatrix
    value_offset: DoubleMatrix
    value_gradient: DoubleMatrix
    value_hessian: DoubleMatrix
    cost: QuadraticCost
    control_lower: DoubleMatrix
    control_upper: DoubleMatrix
    converged: bool = False
    total_cost: float = float("nan")
    name: str = ""

    def __post_init__(self):
        n = self.nominal_controls.shape[0]
        nx = self.nominal_states.shape[1]
        nu = self.nominal_controls.shape[1]
        expected = {
            "nominal_states": (n + 1, nx),
            "feedforward": (n, nu),
            "feedback": (n, nu, nx),
            "value_offset": (n + 1,),
            "value_gradient": (n + 1, nx),
            "value_hessian": (n + 1, nx, nx),
        }
        for attr, shape in expected.items():
            if getattr(self, attr).shape != shape:
                raise HorizonMismatch(f"{attr} has shape {getattr(self, attr).shape}, expected {shape}")
        if n != self.cost.horizon:
            raise HorizonMismatch(f"Policy horizon {n} differs from cost horizon {self.cost.horizon}")

    @property
    def horizon(self) -> int:
        return int(self.nominal_controls.shape[0])

    @property
    def dt(self) -> float:
        return self.cost.dt

    @property
    def state_dim(self) -> int:
        return int(self.nominal_states.shape[1])

    def control(self, x, k: int, step: float = 1.0, clamp: bool = True) -> DoubleMatrix:
        """u(k) = u_bar(k) + step * l(k) + L(k) (x - x_bar(k))"""
        if not 0 <= k < self.horizon:
            raise IndexOutOfHorizon(f"Control index {k} outside [0, {self.horizon})")
        dx = _state_vector(x) - self.nominal_states[k]
        u = self.nominal_controls[k] + step * self.feedforward[k] + self.feedback[k] @ dx
        if clamp:
            u = np.clip(u, self.control_lower, self.control_upper)
        return u

    def value(self, x, k: int) -> float:
        if not 0 <= k <= self.horizon:
            raise IndexOutOfHorizon(f"Value index {k} outside [0, {self.horizon}]")
        dx = _state_vector(x) - self.nominal_states[k]
        return float(
            self.value_offset[k]
            + self.value_gradient[k] @ dx
            + 0.5 * dx @ self.value_hessian[k] @ dx
        )


@dataclass
class SolveReport:
    iterations: int = 0
    costs: List[float] = field(default_factory=list)
    regs: List[float] = field(default_factory=list)
    steps: List[float] = field(default_factory=list)
    expected: List[float] = field(default_factory=list)
    reason: str = "max_iter"

    @property
    def converged(self) -> bool:
        return self.reason == "converged"

    @property
    def final_cost(self) -> float:
        return self.costs[-1]

    def record(self, cost: float, reg: float, step: float, expected: float) -> None:
        self.costs.append(float(cost))
        self.regs.append(float(reg))
        self.steps.append(float(step))
        self.expected.append(float(expected))

    def to_rows(self) -> List[List[float]]:
        return [
            [i, c, r, s, e]
            for i, (c, r, s, e) in enumerate(zip(self.costs, self.regs, self.steps, self.expected))
        ]


CONVERGENCE_HEADER = ["iteration", "cost", "reg", "step", "expected_reduction"]


def _state_vector(x) -> DoubleMatrix:
    if isinstance(x, PlantState):
        return x.as_array()
    return np.asarray(x, dtype=np.float64)


def total_cost(traj: Trajectory, spec: CostLike) -> float:
    """Terminal cost of the final state plus the running pressure penalties"""
    cost = as_quadratic(spec)
    if traj.horizon != cost.horizon:
        raise HorizonMismatch(f"Trajectory horizon {traj.horizon} differs from cost horizon {cost.horizon}")
    return cost.terminal_cost(traj.states[-1]) + cost.running_cost(traj.controls)


def _simulate(dynamics: Dynamics, x0: DoubleMatrix, controls: DoubleMatrix) -> Trajectory:
    controls = np.clip(controls, dynamics.control_lower, dynamics.control_upper)
    states = np.empty((controls.shape[0] + 1, x0.size))
    states[0] = x0
    for k in range(controls.shape[0]):
        try:
            states[k + 1] = dynamics.step(states[k], controls[k])
        except NonFiniteState as e:
            raise NonFiniteState("Rollout diverged", index=k) from e
        if not np.all(np.isfinite(states[k + 1])):
            raise NonFiniteState("Rollout diverged", index=k)
    return Trajectory(states=states, controls=controls, dt=dynamics.dt)


def _nominal_policy(traj: Trajectory, cost: QuadraticCost, dynamics: Dynamics, name: str = "") -> AffinePolicy:
    n, nu = traj.controls.shape
    nx = traj.states.shape[1]
    return AffinePolicy(
        nominal_states=traj.states,
        nominal_controls=traj.controls,
        feedforward=np.zeros((n, nu)),
        feedback=np.zeros((n, nu, nx)),
        value_offset=np.zeros(n + 1),
        value_gradient=np.zeros((n + 1, nx)),
        value_hessian=np.zeros((n + 1, nx, nx)),
        cost=cost,
        control_lower=np.asarray(dynamics.control_lower, dtype=np.float64),
        control_upper=np.asarray(dynamics.control_upper, dtype=np.float64),
        name=name,
    )


def backward_pass(policy: AffinePolicy, model: ModelLike, spec: CostLike,
                  reg: float) -> Tuple[AffinePolicy, Tuple[float, float]]:
    """
    Riccati-like sweep from k = N down to 0 about the policy's nominal.

    The rate penalty couples u(k) with u(k-1), so the sweep runs on the
    state augmented with the previous control z = [x; u_prev]. Its value
    model therefore accounts for the cross term exactly; the stored gains
    and value terms are the plant-state blocks.

    A nominal control sitting on a bound of the dynamics with a gradient
    pointing out of the box is held there: its feedforward and gain rows
    are zero and the step is solved on the remaining controls.

    Args:
        policy: Policy whose nominal trajectory is expanded
        model: ArmModel or any Dynamics implementation
        spec: CostSpec or QuadraticCost
        reg: Levenberg term added to Q_uu (>= 0)

    Returns:
        Tuple of (updated policy, (dV1, dV2)) where a step of size e is
        predicted to change the cost by e*dV1 + e^2*dV2

    Raises:
        NonPositiveDefinite: if the free block of Q_uu + reg*I has no Cholesky factor
    """
    if reg < 0.0:
        raise ValueError(f"reg must be nonnegative, got {reg}")
    dynamics = as_dynamics(model)
    cost = as_quadratic(spec)
    x_bar, u_bar = policy.nominal_states, policy.nominal_controls
    n, nu = u_bar.shape
    nx = x_bar.shape[1]
    if n != cost.horizon:
        raise HorizonMismatch(f"Policy horizon {n} differs from cost horizon {cost.horizon}")

    nz = nx + nu
    eye_u = np.eye(nu)
    lower = np.asarray(dynamics.control_lower, dtype=np.float64)
    upper = np.asarray(dynamics.control_upper, dtype=np.float64)
    rate = cost.rate_weight / cost.dt ** 2
    cp = cost.control_weight

    feedforward = np.zeros((n, nu))
    feedback = np.zeros((n, nu, nx))
    s0 = np.zeros(n + 1)
    s = np.zeros((n + 1, nx))
    big_s = np.zeros((n + 1, nx, nx))

    err = x_bar[n] - cost.terminal_target
    v_z = np.zeros(nz)
    v_z[:nx] = 2.0 * cost.terminal_weight @ err
    v_zz = np.zeros((nz, nz))
    v_zz[:nx, :nx] = 2.0 * cost.terminal_weight
    s0[n] = cost.terminal_cost(x_bar[n])
    s[n] = v_z[:nx]
    big_s[n] = v_zz[:nx, :nx]

    cost_to_go = s0[n]
    d_linear = 0.0
    d_quadratic = 0.0
    a_z = np.zeros((nz, nz))
    b_z = np.zeros((nz, nu))
    b_z[nx:, :] = eye_u

    for k in range(n - 1, -1, -1):
        a_matrix, b_matrix = dynamics.linearize(x_bar[k], u_bar[k])
        a_z[:nx, :nx] = a_matrix
        b_z[:nx, :] = b_matrix

        u = u_bar[k]
        ck = rate if k > 0 else 0.0
        u_prev = u_bar[k - 1] if k > 0 else np.zeros(nu)
        du = u - u_prev

        l_u = 2.0 * cp * u + 2.0 * ck * du
        l_z = np.zeros(nz)
        l_z[nx:] = -2.0 * ck * du
        l_uu = 2.0 * (cp + ck) * eye_u
        l_zz = np.zeros((nz, nz))
        l_zz[nx:, nx:] = 2.0 * ck * eye_u
        l_uz = np.zeros((nu, nz))
        l_uz[:, nx:] = -2.0 * ck * eye_u

        q_z = l_z + a_z.T @ v_z
        q_u = l_u + b_z.T @ v_z
        q_zz = l_zz + a_z.T @ v_zz @ a_z
        q_uu = l_uu + b_z.T @ v_zz @ b_z
        q_uz = l_uz + b_z.T @ v_zz @ a_z
        q_uu = 0.5 * (q_uu + q_uu.T)

        h_matrix = q_uu + reg * eye_u
        if not np.all(np.isfinite(h_matrix)):
            raise NonPositiveDefinite(k, reg)
        # Controls resting on a bound that the gradient pushes further out
        # stay there: zero open-loop step and zero feedback row.
        free = ~(((u <= lower + BOUND_TOL) & (q_u > 0.0)) | ((u >= upper - BOUND_TOL) & (q_u < 0.0)))
        l_k = np.zeros(nu)
        gain = np.zeros((nu, nz))
        if free.any():
            try:
                factor = cho_factor(h_matrix[np.ix_(free, free)])
            except LinAlgError:
                raise NonPositiveDefinite(k, reg)
            l_k[free] = -cho_solve(factor, q_u[free])
            gain[free] = -cho_solve(factor, q_uz[free])

        d_linear += float(l_k @ q_u)
        d_quadratic += 0.5 * float(l_k @ q_uu @ l_k)

        v_z = q_z + gain.T @ q_uu @ l_k + gain.T @ q_u + q_uz.T @ l_k
        v_zz = q_zz + gain.T @ q_uu @ gain + gain.T @ q_uz + q_uz.T @ gain
        v_zz = 0.5 * (v_zz + v_zz.T)

        cost_to_go += cost.stage_cost(u, u_prev if k > 0 else None)
        feedforward[k] = l_k
        feedback[k] = gain[:, :nx]
        s0[k] = cost_to_go
        s[k] = v_z[:nx]
        big_s[k] = v_zz[:nx, :nx]

    updated = replace(
        policy,
        feedforward=feedforward,
        feedback=feedback,
        value_offset=s0,
        value_gradient=s,
        value_hessian=big_s,
        cost=cost,
    )
    return updated, (d_linear, d_quadratic)


def forward_pass(policy: AffinePolicy, model: ModelLike, spec: CostLike, step: float) -> Trajectory:
    """
    Simulate u(k) = u_bar(k) + step*l(k) + L(k)(x(k) - x_bar(k)) from x_bar(0).

    Controls are clamped to the plant's bounds before each step.
    """
    dynamics = as_dynamics(model)
    cost = as_quadratic(spec)
    if policy.horizon != cost.horizon:
        raise HorizonMismatch(f"Policy horizon {policy.horizon} differs from cost horizon {cost.horizon}")
    return _closed_loop(policy, dynamics, policy.nominal_states[0], step)


def _closed_loop(policy: AffinePolicy, dynamics: Dynamics, x0: DoubleMatrix, step: float) -> Trajectory:
    n = policy.horizon
    states = np.empty((n + 1, policy.state_dim))
    controls = np.empty_like(policy.nominal_controls)
    states[0] = x0
    for k in range(n):
        controls[k] = policy.control(states[k], k, step=step)
        try:
            states[k + 1] = dynamics.step(states[k], controls[k])
        except NonFiniteState as e:
            raise NonFiniteState("Closed-loop rollout diverged", index=k) from e
        if not np.all(np.isfinite(states[k + 1])):
            raise NonFiniteState("Closed-loop rollout diverged", index=k)
    return Trajectory(states=states, controls=controls, dt=dynamics.dt)


def closed_loop_rollout(policy: AffinePolicy, model: ModelLike, x0=None) -> Trajectory:
    """Run the policy's affine law (full feedforward) from x0, default the nominal start"""
    start = policy.nominal_states[0] if x0 is None else _state_vector(x0)
    return _closed_loop(policy, as_dynamics(model), np.array(start, dtype=np.float64), 1.0)


def value_at(policy: AffinePolicy, x, k: int) -> float:
    """Quadratic cost-to-go model of the policy at (x, k)"""
    return policy.value(x, k)


def _backward_with_escalation(policy: AffinePolicy, dynamics: Dynamics, cost: QuadraticCost,
                              reg: float, opts: SolverOptions):
    while True:
        try:
            candidate, expected = backward_pass(policy, dynamics, cost, reg)
            return candidate, expected, reg
        except NonPositiveDefinite:
            reg = max(reg * opts.reg_increase, opts.reg_init)
            if reg > opts.reg_max:
                raise NoProgress(f"Q_uu not positive definite up to reg={opts.reg_max:g}")


def solve(x0, init_controls, model: ModelLike, spec: CostLike,
          opts: Optional[SolverOptions] = None, strict: bool = False,
          name: str = "") -> Tuple[AffinePolicy, SolveReport]:
    """
    Minimize total_cost from x0 by alternating backward and forward passes.

    Accepted iterates strictly decrease the cost. The returned policy's
    nominal is the best trajectory found; its gains come from a final
    unregularized backward pass about that nominal.

    Args:
        x0: Initial state (PlantState or array)
        init_controls: (N, nu) initial control sequence
        model: ArmModel or Dynamics
        spec: CostSpec or QuadraticCost
        opts: Solver tolerances and regularization schedule
        strict: Raise NoProgress instead of returning a non-converged policy
        name: Label stored in the policy

    Returns:
        Tuple of (AffinePolicy, SolveReport)

    Raises:
        HorizonMismatch: init_controls or dynamics dt disagree with the cost
        NoProgress: only when strict=True and the solver stalls
    """
    opts = opts or SolverOptions()
    dynamics = as_dynamics(model)
    cost = as_quadratic(spec)
    logger = get_logger(__name__, {"task": name} if name else None)

    controls = np.asarray(init_controls, dtype=np.float64).reshape(-1, dynamics.control_dim)
    if controls.shape[0] != cost.horizon:
        raise HorizonMismatch(f"Got {controls.shape[0]} initial controls for horizon {cost.horizon}")
    if abs(dynamics.dt - cost.dt) > 1e-12:
        raise HorizonMismatch(f"Dynamics dt {dynamics.dt} differs from cost dt {cost.dt}")

    nominal = _simulate(dynamics, _state_vector(x0).astype(np.float64), controls)
    policy = _nominal_policy(nominal, cost, dynamics, name)
    current = total_cost(nominal, cost)
    reg = opts.reg_init
    report = SolveReport()
    report.record(current, reg, 0.0, 0.0)
    logger.debug(f"Initial cost {current:.6g}")

    for iteration in range(1, opts.max_iter + 1):
        report.iterations = iteration
        try:
            candidate, (d_linear, d_quadratic), reg = _backward_with_escalation(policy, dynamics, cost, reg, opts)
        except NoProgress:
            report.reason = "no_progress"
            break

        predicted = -(d_linear + d_quadratic)
        if predicted < opts.threshold(current):
            report.reason = "converged"
            break

        accepted = None
        for i in range(opts.line_search_steps):
            step = 0.5 ** i
            try:
                trial = forward_pass(candidate, dynamics, cost, step)
            except NonFiniteState:
                continue
            trial_cost = total_cost(trial, cost)
            if trial_cost < current:
                accepted = (trial, trial_cost, step)
                break

        if accepted is None:
            reg = max(reg * opts.reg_increase, opts.reg_init)
            logger.debug(f"Line search failed, reg -> {reg:.3g}", extra={"iteration": iteration})
            if reg > opts.reg_max:
                report.reason = "no_progress"
                break
            continue

        trial, trial_cost, step = accepted
        improvement = current - trial_cost
        policy = _nominal_policy(trial, cost, dynamics, name)
        current = trial_cost
        reg = reg / opts.reg_decrease
        report.record(current, reg, step, predicted)
        logger.debug(
            f"cost={current:.9g} step={step:g} reg={reg:.3g} predicted={predicted:.3g}",
            extra={"iteration": iteration},
        )
        if improvement < opts.threshold(current):
            report.reason = "converged"
            break

    try:
        final, _, _ = _backward_with_escalation(policy, dynamics, cost, 0.0, opts)
    except NoProgress:
        logger.warning("Final backward pass failed; policy carries open-loop nominal only")
        final = policy
    final = replace(final, converged=report.converged, total_cost=current, name=name)

    if report.converged:
        logger.info(f"Converged in {report.iterations} iterations, cost {current:.9g}")
    else:
        logger.warning(f"Stopped without convergence ({report.reason}) after {report.iterations} iterations")
        if strict:
            raise NoProgress(f"Solver stopped with reason {report.reason}")
    return final, report


def policy_to_dict(policy: AffinePolicy) -> Dict[str, Any]:
    return {
        "schema": POLICY_SCHEMA,
        "version": POLICY_SCHEMA_VERSION,
        "name": policy.name,
        "converged": bool(policy.converged),
        "total_cost": float(policy.total_cost),
        "cost": policy.cost.to_dict(),
        "control_lower": policy.control_lower.tolist(),
        "control_upper": policy.control_upper.tolist(),
        "nominal_states": policy.nominal_states.tolist(),
        "nominal_controls": policy.nominal_controls.tolist(),
        "feedforward": policy.feedforward.tolist(),
        "feedback": policy.feedback.tolist(),
        "value_offset": policy.value_offset.tolist(),
        "value_gradient": policy.value_gradient.tolist(),
        "value_hessian": policy.value_hessian.tolist(),
    }


def policy_from_dict(data: Dict[str, Any]) -> AffinePolicy:
    if data.get("schema") != POLICY_SCHEMA or data.get("version") != POLICY_SCHEMA_VERSION:
        raise ArtifactError(
            f"Unsupported policy document: schema={data.get('schema')} version={data.get('version')}"
        )
    try:
        arrays = {
            key: np.asarray(data[key], dtype=np.float64)
            for key in ("nominal_states", "nominal_controls", "feedforward", "feedback",
                        "value_offset", "value_gradient", "value_hessian",
                        "control_lower", "control_upper")
        }
        return AffinePolicy(
            cost=QuadraticCost.from_dict(data["cost"]),
            converged=bool(data["converged"]),
            total_cost=float(data["total_cost"]),
            name=str(data.get("name", "")),
            **arrays,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"Malformed policy document: {e}") from e


def save_policy(policy: AffinePolicy, path) -> None:
    write_json_atomic(path, policy_to_dict(policy), exact=True)


def load_policy(path) -> AffinePolicy:
    return policy_from_dict(read_json(path))
