"""
Two-link arm driven by pneumatic artificial muscles

Deterministic discrete-time model of the combined human+robot arm in the
sagittal plane. Joint angles are measured from the arm hanging straight
down; positive angles flex the shoulder forward and the elbow upward.
Each joint carries one single-acting PAM whose inner pressure follows a
first-order lag toward the commanded reference pressure.
"""
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.optimize import brentq

from src.core.errors import NonFiniteState
from src.utils.logger_config import get_logger

DoubleMatrix = npt.NDArray[np.float64]

MAX_PRESSURE = 0.8  # MPa
STATE_DIM = 6
CONTROL_DIM = 2

TRAJECTORY_HEADER = [
    "k", "t", "theta1", "theta2", "omega1", "omega2", "p1", "p2", "pref1", "pref2",
]


def _pair(values, name: str) -> Tuple[float, float]:
    pair = tuple(float(v) for v in values)
    if len(pair) != 2:
        raise ValueError(f"{name} must have exactly two entries, got {len(pair)}")
    return pair


@dataclass(frozen=True)
class ArmModel:
    """
    Physical parameters of the arm and its actuators.

    Per-link entries are ordered (upper arm, forearm+hand); per-joint
    entries are ordered (shoulder, elbow). Center-of-mass offsets default
    to mid-link and inertias to the uniform-rod value m*l^2/12.
    """

    masses: Tuple[float, float] = (2.0, 1.7)
    lengths: Tuple[float, float] = (0.30, 0.35)
    com_offsets: Optional[Tuple[float, float]] = None
    inertias: Optional[Tuple[float, float]] = None
    pulley_radii: Tuple[float, float] = (0.05, 0.04)
    pam_gains: Tuple[float, float] = (1500.0, 1200.0)
    pam_offsets: Tuple[float, float] = (0.0, 0.0)
    friction: Tuple[float, float] = (0.1, 0.1)
    gravity: float = 9.81
    dt: float = 0.01
    tc_rise: float = 0.08
    tc_fall: float = 0.4

    def __post_init__(self):
        masses = _pair(self.masses, "masses")
        lengths = _pair(self.lengths, "lengths")
        com = _pair(self.com_offsets, "com_offsets") if self.com_offsets is not None \
            else (lengths[0] / 2.0, lengths[1] / 2.0)
        inertias = _pair(self.inertias, "inertias") if self.inertias is not None \
            else (masses[0] * lengths[0] ** 2 / 12.0, masses[1] * lengths[1] ** 2 / 12.0)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "com_offsets", com)
        object.__setattr__(self, "inertias", inertias)
        for name in ("pulley_radii", "pam_gains", "pam_offsets", "friction"):
            object.__setattr__(self, name, _pair(getattr(self, name), name))

        for name in ("masses", "lengths", "inertias"):
            if min(getattr(self, name)) <= 0.0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        for name, value in (("dt", self.dt), ("tc_rise", self.tc_rise), ("tc_fall", self.tc_fall)):
            if not value > 0.0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if min(self.pulley_radii) <= 0.0 or min(self.pam_gains) <= 0.0:
            raise ValueError("pulley radii and PAM gains must be strictly positive")
        if min(self.friction) < 0.0 or self.gravity < 0.0:
            raise ValueError("friction and gravity must be nonnegative")
        if min(com) < 0.0:
            raise ValueError(f"com_offsets must be nonnegative, got {com}")

    def with_dt(self, dt: float) -> "ArmModel":
        return replace(self, dt=dt)


@dataclass(frozen=True)
class PlantState:
    """Joint angles (rad), angular velocities (rad/s) and PAM pressures (MPa)"""

    theta1: float
    theta2: float
    omega1: float
    omega2: float
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise NonFiniteState(f"Plant state has non-finite entries: {values.tolist()}")
        for name in ("p1", "p2"):
            pressure = getattr(self, name)
            if pressure < 0.0 or pressure > MAX_PRESSURE:
                raise ValueError(f"{name}={pressure} outside [0, {MAX_PRESSURE}] MPa")

    def as_array(self) -> DoubleMatrix:
        return np.array(
            [self.theta1, self.theta2, self.omega1, self.omega2, self.p1, self.p2],
            dtype=np.float64,
        )

    @property
    def theta(self) -> DoubleMatrix:
        return np.array([self.theta1, self.theta2])

    @property
    def omega(self) -> DoubleMatrix:
        return np.array([self.omega1, self.omega2])

    @property
    def pressure(self) -> DoubleMatrix:
        return np.array([self.p1, self.p2])

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "PlantState":
        values = [float(v) for v in x]
        if len(values) != STATE_DIM:
            raise ValueError(f"Plant state needs {STATE_DIM} entries, got {len(values)}")
        return cls(*values)

    @classmethod
    def from_theta(cls, theta: Sequence[float], model: ArmModel) -> "PlantState":
        """At-rest state whose pressures sit at the gravity-hold values"""
        hold = gravity_hold_pressure(theta, model)
        return cls(float(theta[0]), float(theta[1]), 0.0, 0.0, hold.pref1, hold.pref2)


@dataclass(frozen=True)
class ControlInput:
    """Reference pressures (MPa) sent to the two PAM valves"""

    pref1: float
    pref2: float

    def __post_init__(self):
        for name in ("pref1", "pref2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0 or value > MAX_PRESSURE:
                raise ValueError(f"{name}={value} outside [0, {MAX_PRESSURE}] MPa")

    def as_array(self) -> DoubleMatrix:
        return np.array([self.pref1, self.pref2], dtype=np.float64)

    @classmethod
    def clamped(cls, u: Sequence[float]) -> "ControlInput":
        lo, hi = 0.0, MAX_PRESSURE
        return cls(min(max(float(u[0]), lo), hi), min(max(float(u[1]), lo), hi))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    States x(0..N) and controls u(0..N-1) sampled every dt seconds.

    Arrays are generic in their dimensions so the solver can also carry
    linear test systems; `state(k)` is only meaningful for the arm.
    """

    states: DoubleMatrix
    controls: DoubleMatrix
    dt: float

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        controls = np.asarray(self.controls, dtype=np.float64)
        if controls.ndim == 1:
            controls = controls.reshape(0, CONTROL_DIM) if controls.size == 0 else controls[None, :]
        if states.shape[0] != controls.shape[0] + 1:
            raise ValueError(
                f"Trajectory needs N+1 states for N controls, got {states.shape[0]} and {controls.shape[0]}"
            )
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @property
    def horizon(self) -> int:
        return int(self.controls.shape[0])

    @property
    def times(self) -> DoubleMatrix:
        return np.arange(self.horizon + 1) * self.dt

    @property
    def final_state(self) -> DoubleMatrix:
        return self.states[-1]

    def state(self, k: int) -> PlantState:
        return PlantState.from_array(self.states[k])

    def to_rows(self):
        """Rows matching TRAJECTORY_HEADER; the final row has no control"""
        rows = []
        for k in range(self.horizon + 1):
            control = list(self.controls[k]) if k < self.horizon else [None, None]
            rows.append([k, k * self.dt, *self.states[k], *control])
        return rows


def mass_matrix(theta: Sequence[float], model: ArmModel) -> DoubleMatrix:
    m1, m2 = model.masses
    l1 = model.lengths[0]
    c1, c2 = model.com_offsets
    i1, i2 = model.inertias
    cos2 = math.cos(theta[1])
    m11 = i1 + i2 + m1 * c1 * c1 + m2 * (l1 * l1 + c2 * c2 + 2.0 * l1 * c2 * cos2)
    m12 = i2 + m2 * (c2 * c2 + l1 * c2 * cos2)
    m22 = i2 + m2 * c2 * c2
    return np.array([[m11, m12], [m12, m22]])


def coriolis_vector(theta: Sequence[float], omega: Sequence[float], model: ArmModel) -> DoubleMatrix:
    """C(theta, omega) @ omega"""
    h = model.masses[1] * model.lengths[0] * model.com_offsets[1] * math.sin(theta[1])
    w1, w2 = float(omega[0]), float(omega[1])
    return np.array([-h * (2.0 * w1 * w2 + w2 * w2), h * w1 * w1])


def gravity_torque(theta: Sequence[float], model: ArmModel) -> DoubleMatrix:
    m1, m2 = model.masses
    l1 = model.lengths[0]
    c1, c2 = model.com_offsets
    g = model.gravity
    s12 = math.sin(theta[0] + theta[1])
    return np.array([
        (m1 * c1 + m2 * l1) * g * math.sin(theta[0]) + m2 * c2 * g * s12,
        m2 * c2 * g * s12,
    ])


def mechanical_energy(state: Union[PlantState, Sequence[float]], model: ArmModel) -> float:
    x = state.as_array() if isinstance(state, PlantState) else np.asarray(state, dtype=np.float64)
    theta, omega = x[0:2], x[2:4]
    m1, m2 = model.masses
    l1 = model.lengths[0]
    c1, c2 = model.com_offsets
    kinetic = 0.5 * float(omega @ mass_matrix(theta, model) @ omega)
    potential = -model.gravity * (
        (m1 * c1 + m2 * l1) * math.cos(theta[0]) + m2 * c2 * math.cos(theta[0] + theta[1])
    )
    return kinetic + potential


def _muscle_torque(pressure: float, joint: int, model: ArmModel) -> float:
    force = model.pam_gains[joint] * pressure - model.pam_offsets[joint]
    return model.pulley_radii[joint] * (force if force > 0.0 else 0.0)


def pam_torque(state: PlantState, model: ArmModel) -> DoubleMatrix:
    """Joint torques tau = r * max(a*P - b, 0); a muscle can only pull"""
    return np.array([
        _muscle_torque(state.p1, 0, model),
        _muscle_torque(state.p2, 1, model),
    ])


def pressure_step(p: float, pref: float, torque_rate_sign: float, dt: float, model: ArmModel) -> float:
    """
    Exact first-order lag step toward pref, clamped to [0, MAX_PRESSURE].

    The rise time constant applies while the muscle torque is increasing
    (torque_rate_sign > 0), the slower fall constant otherwise.
    """
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    tc = model.tc_rise if torque_rate_sign > 0.0 else model.tc_fall
    value = pref + (p - pref) * math.exp(-dt / tc)
    return min(max(value, 0.0), MAX_PRESSURE)


def _accelerations(th1, th2, w1, w2, tau1, tau2, model: ArmModel) -> Tuple[float, float]:
    m1, m2 = model.masses
    l1 = model.lengths[0]
    c1, c2 = model.com_offsets
    i1, i2 = model.inertias
    g = model.gravity
    b1, b2 = model.friction

    cos2 = math.cos(th2)
    h = m2 * l1 * c2 * math.sin(th2)
    m11 = i1 + i2 + m1 * c1 * c1 + m2 * (l1 * l1 + c2 * c2 + 2.0 * l1 * c2 * cos2)
    m12 = i2 + m2 * (c2 * c2 + l1 * c2 * cos2)
    m22 = i2 + m2 * c2 * c2

    s12 = math.sin(th1 + th2)
    grav2 = m2 * c2 * g * s12
    grav1 = (m1 * c1 + m2 * l1) * g * math.sin(th1) + grav2

    r1 = tau1 + h * (2.0 * w1 * w2 + w2 * w2) - grav1 - b1 * w1
    r2 = tau2 - h * w1 * w1 - grav2 - b2 * w2
    det = m11 * m22 - m12 * m12
    return (m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det


def _step(x: Sequence[float], u: Sequence[float], model: ArmModel) -> DoubleMatrix:
    th1, th2, w1, w2, p1, p2 = (float(v) for v in x)
    pref1 = min(max(float(u[0]), 0.0), MAX_PRESSURE)
    pref2 = min(max(float(u[1]), 0.0), MAX_PRESSURE)
    dt = model.dt

    # Pressure inside the step follows the analytic lag so every RK4 stage
    # sees the torque the valve actually produces at that instant.
    tc1 = model.tc_rise if pref1 - p1 > 0.0 else model.tc_fall
    tc2 = model.tc_rise if pref2 - p2 > 0.0 else model.tc_fall
    half1, half2 = math.exp(-0.5 * dt / tc1), math.exp(-0.5 * dt / tc2)
    full1, full2 = half1 * half1, half2 * half2

    tau_start = (_muscle_torque(p1, 0, model), _muscle_torque(p2, 1, model))
    tau_mid = (
        _muscle_torque(pref1 + (p1 - pref1) * half1, 0, model),
        _muscle_torque(pref2 + (p2 - pref2) * half2, 1, model),
    )
    tau_end = (
        _muscle_torque(pref1 + (p1 - pref1) * full1, 0, model),
        _muscle_torque(pref2 + (p2 - pref2) * full2, 1, model),
    )

    a1, b1 = _accelerations(th1, th2, w1, w2, *tau_start, model)
    k1 = (w1, w2, a1, b1)
    a2, b2 = _accelerations(
        th1 + 0.5 * dt * k1[0], th2 + 0.5 * dt * k1[1],
        w1 + 0.5 * dt * k1[2], w2 + 0.5 * dt * k1[3], *tau_mid, model,
    )
    k2 = (w1 + 0.5 * dt * k1[2], w2 + 0.5 * dt * k1[3], a2, b2)
    a3, b3 = _accelerations(
        th1 + 0.5 * dt * k2[0], th2 + 0.5 * dt * k2[1],
        w1 + 0.5 * dt * k2[2], w2 + 0.5 * dt * k2[3], *tau_mid, model,
    )
    k3 = (w1 + 0.5 * dt * k2[2], w2 + 0.5 * dt * k2[3], a3, b3)
    a4, b4 = _accelerations(
        th1 + dt * k3[0], th2 + dt * k3[1],
        w1 + dt * k3[2], w2 + dt * k3[3], *tau_end, model,
    )
    k4 = (w1 + dt * k3[2], w2 + dt * k3[3], a4, b4)

    sixth = dt / 6.0
    result = np.array([
        th1 + sixth * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        th2 + sixth * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        w1 + sixth * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        w2 + sixth * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
        pressure_step(p1, pref1, pref1 - p1, dt, model),
        pressure_step(p2, pref2, pref2 - p2, dt, model),
    ])
    if not np.all(np.isfinite(result)):
        raise NonFiniteState("Integration produced a non-finite state")
    return result


def dynamics_step(state: PlantState, u: ControlInput, model: ArmModel) -> PlantState:
    """Advance the arm by one model.dt step"""
    return PlantState.from_array(_step(state.as_array(), u.as_array(), model))


_STATE_LOWER = np.array([-np.inf] * 4 + [0.0] * CONTROL_DIM)
_STATE_UPPER = np.array([np.inf] * 4 + [MAX_PRESSURE] * CONTROL_DIM)


def _difference(f, centre: DoubleMatrix, value: float, h: float, lower: float, upper: float) -> DoubleMatrix:
    # Torque and pressure lag both kink at the pressure bounds, so differences
    # there are taken one-sided from inside the valid range.
    if value - h < lower:
        return (f(h) - centre) / h
    if value + h > upper:
        return (centre - f(-h)) / h
    return (f(h) - f(-h)) / (2.0 * h)


def _linearize(x: DoubleMatrix, u: DoubleMatrix, model: ArmModel, h: float = 1e-6):
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    centre = _step(x, u, model)
    a_matrix = np.empty((STATE_DIM, STATE_DIM))
    b_matrix = np.empty((STATE_DIM, CONTROL_DIM))
    for i in range(STATE_DIM):
        def shifted_state(d, i=i):
            dx = np.zeros(STATE_DIM)
            dx[i] = d
            return _step(x + dx, u, model)
        a_matrix[:, i] = _difference(shifted_state, centre, x[i], h, _STATE_LOWER[i], _STATE_UPPER[i])
    for j in range(CONTROL_DIM):
        def shifted_control(d, j=j):
            du = np.zeros(CONTROL_DIM)
            du[j] = d
            return _step(x, u + du, model)
        b_matrix[:, j] = _difference(shifted_control, centre, u[j], h, 0.0, MAX_PRESSURE)
    return a_matrix, b_matrix


def linearize(state: PlantState, u: ControlInput, model: ArmModel) -> Tuple[DoubleMatrix, DoubleMatrix]:
    """
    Finite-difference Jacobians (A, B) of dynamics_step.

    Central differences with h = 1e-6 inside the pressure range; at a
    pressure or control bound the difference is one-sided and points inward.
    """
    return _linearize(state.as_array(), u.as_array(), model)


def _as_state_array(x0) -> DoubleMatrix:
    if isinstance(x0, PlantState):
        return x0.as_array()
    return np.asarray(x0, dtype=np.float64).copy()


def _as_control_array(controls) -> DoubleMatrix:
    if isinstance(controls, np.ndarray):
        return controls.reshape(-1, CONTROL_DIM).astype(np.float64)
    rows = [c.as_array() if isinstance(c, ControlInput) else np.asarray(c, dtype=np.float64)
            for c in controls]
    if not rows:
        return np.zeros((0, CONTROL_DIM))
    return np.vstack(rows)


def rollout(x0, controls, model: ArmModel) -> Trajectory:
    """
    Iterate dynamics_step from x0 over the control sequence.

    Args:
        x0: Initial PlantState (or 6-array)
        controls: Sequence of ControlInput or an (N, 2) array; values are
            clamped to the valid pressure range before use
        model: Arm parameters

    Returns:
        Trajectory with N+1 states and the clamped controls

    Raises:
        NonFiniteState: with the index of the failing step
    """
    u_seq = np.clip(_as_control_array(controls), 0.0, MAX_PRESSURE)
    states = np.empty((u_seq.shape[0] + 1, STATE_DIM))
    states[0] = _as_state_array(x0)
    for k in range(u_seq.shape[0]):
        try:
            states[k + 1] = _step(states[k], u_seq[k], model)
        except NonFiniteState as e:
            raise NonFiniteState("Rollout diverged", index=k) from e
    return Trajectory(states=states, controls=u_seq, dt=model.dt)


def gravity_hold_pressure(theta: Sequence[float], model: ArmModel) -> ControlInput:
    """
    Reference pressures that statically balance gravity at posture theta.

    Each joint is solved independently by root-finding on the static torque
    residual over [0, MAX_PRESSURE]. Joints whose gravity torque already
    points into extension need no pressure and get 0.
    """
    logger = get_logger(__name__)
    torque = gravity_torque(theta, model)
    hold = []
    for joint in range(2):
        def residual(pressure: float, j: int = joint) -> float:
            return _muscle_torque(pressure, j, model) - torque[j]

        if residual(0.0) >= 0.0:
            hold.append(0.0)
        elif residual(MAX_PRESSURE) < 0.0:
            logger.warning(
                f"Joint {joint + 1} cannot hold posture {list(theta)} against "
                f"{float(torque[joint]):.4g} N m of gravity: saturating at {MAX_PRESSURE} MPa"
            )
            hold.append(MAX_PRESSURE)
        else:
            hold.append(brentq(residual, 0.0, MAX_PRESSURE, xtol=1e-15, rtol=4.0 * np.finfo(float).eps))
    return ControlInput(hold[0], hold[1])


@dataclass(frozen=True)
class PlantDynamics:
    """Array-level view of the arm used by the trajectory optimizer"""

    model: ArmModel
    state_dim: int = field(default=STATE_DIM, init=False)
    control_dim: int = field(default=CONTROL_DIM, init=False)

    @property
    def dt(self) -> float:
        return self.model.dt

    @property
    def control_lower(self) -> DoubleMatrix:
        return np.zeros(CONTROL_DIM)

    @property
    def control_upper(self) -> DoubleMatrix:
        return np.full(CONTROL_DIM, MAX_PRESSURE)

    def step(self, x: DoubleMatrix, u: DoubleMatrix) -> DoubleMatrix:
        return _step(x, u, self.model)

    def linearize(self, x: DoubleMatrix, u: DoubleMatrix) -> Tuple[DoubleMatrix, DoubleMatrix]:
        return _linearize(x, u, self.model)
