"""
Throw task: release targets from hoop distance and simulated shots

Release velocity targets come from a 45 degree frictionless projectile
that passes through the hoop; the joint-velocity target is the inverse
hand Jacobian applied to that velocity. Horizontal distances are measured
from the task's nominal release point.
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from src.core.blend import BlendSet, blended_rollout
from src.core.errors import HorizonMismatch, NeverReachesHoopHeight, SingularJacobian, UnreachableHoop
from src.core.ilqr import AffinePolicy, CostSpec, closed_loop_rollout
from src.core.plant import ArmModel, PlantState, Trajectory
from src.utils.logger_config import get_logger

DoubleMatrix = npt.NDArray[np.float64]

LAUNCH_ANGLE = math.pi / 4.0
SHOT_HEADER = ["trial", "seed", "landing", "margin", "hit"]

Controller = Union[AffinePolicy, BlendSet]


@dataclass(frozen=True)
class ThrowTask:
    """
    One hoop distance. hoop_height is measured in the shoulder frame, by
    default just below the shoulder; None puts the hoop level with the
    nominal release point.
    """

    name: str
    distance: float
    hoop_height: Optional[float] = -0.02
    radius: float = 0.23
    release_theta: Tuple[float, float] = (0.5, 0.5)
    t_rel: float = 0.4
    ball_mass: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "release_theta", tuple(float(v) for v in self.release_theta))
        if len(self.release_theta) != 2:
            raise ValueError("release_theta needs two joint angles")
        if not self.distance > 0.0:
            raise ValueError(f"Hoop distance must be positive, got {self.distance}")
        if not self.radius > 0.0:
            raise ValueError(f"Hoop radius must be positive, got {self.radius}")
        if not self.t_rel > 0.0:
            raise ValueError(f"Release time must be positive, got {self.t_rel}")
        if self.ball_mass < 0.0:
            raise ValueError(f"Ball mass must be nonnegative, got {self.ball_mass}")

    def release_index(self, dt: float) -> int:
        index = int(round(self.t_rel / dt))
        if index < 1:
            raise HorizonMismatch(f"Release time {self.t_rel} s is shorter than one step of {dt} s")
        return index


@dataclass(frozen=True, eq=False)
class ShotResult:
    landing: float
    margin: float
    hit: bool
    release_position: DoubleMatrix
    release_velocity: DoubleMatrix
    flight_time: float = float("nan")

    def to_row(self) -> list:
        return [self.landing, self.margin, self.hit]

    @classmethod
    def short(cls, position: Sequence[float], velocity: Sequence[float]) -> "ShotResult":
        """A ball that never climbs to the hoop: no landing point, a miss"""
        return cls(
            landing=float("nan"),
            margin=float("nan"),
            hit=False,
            release_position=np.asarray(position, dtype=np.float64),
            release_velocity=np.asarray(velocity, dtype=np.float64),
        )


@dataclass
class ScoreReport:
    task: str
    controller: str
    shots: List[ShotResult] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    efforts: List[float] = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.shots)

    @property
    def hit_rate(self) -> float:
        if not self.shots:
            return 0.0
        return sum(shot.hit for shot in self.shots) / len(self.shots)

    @property
    def mean_effort(self) -> float:
        return float(np.mean(self.efforts)) if self.efforts else float("nan")

    def to_rows(self) -> List[list]:
        return [[i, seed, *shot.to_row()] for i, (seed, shot) in enumerate(zip(self.seeds, self.shots))]


def forward_kinematics(theta: Sequence[float], model: ArmModel) -> DoubleMatrix:
    """Hand position in the shoulder frame (x forward, y up)"""
    l1, l2 = model.lengths
    th1, th2 = float(theta[0]), float(theta[1])
    return np.array([
        l1 * math.sin(th1) + l2 * math.sin(th1 + th2),
        -l1 * math.cos(th1) - l2 * math.cos(th1 + th2),
    ])


def jacobian(theta: Sequence[float], model: ArmModel) -> DoubleMatrix:
    l1, l2 = model.lengths
    th1, th2 = float(theta[0]), float(theta[1])
    c1, s1 = math.cos(th1), math.sin(th1)
    c12, s12 = math.cos(th1 + th2), math.sin(th1 + th2)
    return np.array([
        [l1 * c1 + l2 * c12, l2 * c12],
        [l1 * s1 + l2 * s12, l2 * s12],
    ])


def hand_velocity(theta: Sequence[float], omega: Sequence[float], model: ArmModel) -> DoubleMatrix:
    return jacobian(theta, model) @ np.asarray(omega, dtype=np.float64)


def required_release_speed(dx: float, dh: float, gravity: float = 9.81) -> float:
    """
    Launch speed of a 45 degree shot covering dx horizontally and rising dh.

    Raises:
        UnreachableHoop: the 45 degree parabola cannot pass through the hoop
    """
    if not gravity > 0.0:
        raise ValueError(f"gravity must be positive, got {gravity}")
    if dx <= 0.0 or dx - dh <= 0.0:
        raise UnreachableHoop(f"No 45 degree trajectory reaches a hoop {dx} m away and {dh} m up")
    return math.sqrt(gravity * dx * dx / (dx - dh))


def hoop_height_for(task: ThrowTask, model: ArmModel) -> float:
    if task.hoop_height is not None:
        return float(task.hoop_height)
    return float(forward_kinematics(task.release_theta, model)[1])


def target_state(task: ThrowTask, model: ArmModel) -> Tuple[DoubleMatrix, DoubleMatrix]:
    """
    Joint angles and velocities to reach at release.

    Raises:
        UnreachableHoop: no real 45 degree solution
        SingularJacobian: release posture is at a kinematic singularity
    """
    release = forward_kinematics(task.release_theta, model)
    speed = required_release_speed(task.distance, hoop_height_for(task, model) - release[1], model.gravity)
    velocity = speed * np.array([math.cos(LAUNCH_ANGLE), math.sin(LAUNCH_ANGLE)])
    jac = jacobian(task.release_theta, model)
    if abs(np.linalg.det(jac)) < 1e-9:
        raise SingularJacobian(f"Release posture {task.release_theta} is singular")
    omega = np.linalg.solve(jac, velocity)
    return np.array(task.release_theta), omega


def cost_spec_for(task: ThrowTask, model: ArmModel, **weights) -> CostSpec:
    """CostSpec targeting the task's release state over T_rel / dt steps"""
    theta, omega = target_state(task, model)
    return CostSpec(
        theta_target=tuple(theta),
        omega_target=tuple(omega),
        horizon=task.release_index(model.dt),
        dt=model.dt,
        **weights,
    )


def flight_position(position: Sequence[float], velocity: Sequence[float], t: float,
                    gravity: float = 9.81) -> Tuple[DoubleMatrix, DoubleMatrix]:
    """Ball position and velocity t seconds after release"""
    p0 = np.asarray(position, dtype=np.float64)
    v0 = np.asarray(velocity, dtype=np.float64)
    g = np.array([0.0, -gravity])
    return p0 + v0 * t + 0.5 * g * t * t, v0 + g * t


def ballistic_flight(position: Sequence[float], velocity: Sequence[float], distance: float,
                     hoop_height: float, radius: float, origin_x: Optional[float] = None,
                     gravity: float = 9.81) -> ShotResult:
    """
    Closed-form flight to the descending crossing of the hoop height.

    Raises:
        NeverReachesHoopHeight: the apex stays below the hoop
    """
    if not gravity > 0.0:
        raise ValueError(f"gravity must be positive, got {gravity}")
    x0, y0 = float(position[0]), float(position[1])
    vx, vy = float(velocity[0]), float(velocity[1])
    discriminant = vy * vy + 2.0 * gravity * (y0 - hoop_height)
    if discriminant < 0.0:
        raise NeverReachesHoopHeight(f"Apex stays below hoop height {hoop_height} m")
    t = (vy + math.sqrt(discriminant)) / gravity
    if t <= 0.0:
        raise NeverReachesHoopHeight("Ball is already below the hoop and falling")
    origin = x0 if origin_x is None else float(origin_x)
    landing = x0 + vx * t - origin
    margin = landing - distance
    return ShotResult(
        landing=landing,
        margin=margin,
        hit=abs(margin) <= radius,
        release_position=np.array([x0, y0]),
        release_velocity=np.array([vx, vy]),
        flight_time=t,
    )


def release_state(state, model: ArmModel) -> Tuple[DoubleMatrix, DoubleMatrix]:
    """Hand position and velocity for a plant state"""
    x = state.as_array() if isinstance(state, PlantState) else np.asarray(state, dtype=np.float64)
    return forward_kinematics(x[:2], model), hand_velocity(x[:2], x[2:4], model)


def shoot(state, task: ThrowTask, model: ArmModel) -> ShotResult:
    """Detach the ball at state and fly it toward the task's hoop"""
    position, velocity = release_state(state, model)
    origin = forward_kinematics(task.release_theta, model)[0]
    return ballistic_flight(position, velocity, task.distance, hoop_height_for(task, model),
                            task.radius, origin_x=origin, gravity=model.gravity)


def terminal_errors(trajectory: Trajectory, task: ThrowTask, model: ArmModel) -> Tuple[DoubleMatrix, DoubleMatrix]:
    """Absolute joint angle and velocity errors at the release step"""
    theta, omega = target_state(task, model)
    state = trajectory.states[min(task.release_index(model.dt), trajectory.horizon)]
    return np.abs(state[:2] - theta), np.abs(state[2:4] - omega)


def effort(trajectory: Trajectory) -> float:
    """Sum of squared reference pressures times dt (MPa^2 s)"""
    return float(np.sum(trajectory.controls ** 2) * trajectory.dt)


def _start_state(controller: Controller) -> DoubleMatrix:
    policy = controller.policies[0] if isinstance(controller, BlendSet) else controller
    return policy.nominal_states[0].copy()


def run_controller(controller: Controller, model: ArmModel, x0=None) -> Trajectory:
    if isinstance(controller, BlendSet):
        trajectory, _ = blended_rollout(controller, _start_state(controller) if x0 is None else x0, model)
        return trajectory
    return closed_loop_rollout(controller, model, x0)


def score_policy(controller: Controller, task: ThrowTask, model: ArmModel, trials: int = 20,
                 perturbation_scale: float = 0.0, seed: int = 0, name: str = "",
                 progress=None) -> ScoreReport:
    """
    Hit rate of a policy or blend under Gaussian start-state perturbations.

    Joint angles (rad) and velocities (rad/s) of the nominal start state are
    perturbed with standard deviation perturbation_scale; every trial draws
    its own generator from SeedSequence(seed). A ball that never climbs to
    the hoop height is scored as a miss with a NaN landing.
    """
    if trials < 1:
        raise ValueError(f"trials must be at least 1, got {trials}")
    if perturbation_scale < 0.0:
        raise ValueError(f"perturbation_scale must be nonnegative, got {perturbation_scale}")
    horizon = controller.horizon
    if task.release_index(model.dt) > horizon:
        raise HorizonMismatch(f"Release step {task.release_index(model.dt)} beyond controller horizon {horizon}")
    logger = get_logger(__name__, {"task": task.name})
    report = ScoreReport(task=task.name, controller=name or getattr(controller, "name", "blend"))
    start = _start_state(controller)
    for trial, trial_seed in enumerate(int(s) for s in np.random.SeedSequence(seed).generate_state(trials)):
        rng = np.random.default_rng(trial_seed)
        x0 = start.copy()
        x0[:4] += rng.normal(0.0, perturbation_scale, 4)
        trajectory = run_controller(controller, model, x0)
        release = trajectory.states[task.release_index(model.dt)]
        try:
            shot = shoot(release, task, model)
        except NeverReachesHoopHeight as e:
            logger.warning(f"Scored as a miss: {e}", extra={"trial": trial})
            shot = ShotResult.short(*release_state(release, model))
        report.shots.append(shot)
        report.seeds.append(trial_seed)
        report.efforts.append(effort(trajectory))
        logger.debug(f"landing={shot.landing:.4f} margin={shot.margin:+.4f} hit={shot.hit}",
                     extra={"trial": trial})
        if progress is not None:
            progress.update(1)
    logger.info(f"{report.controller}: hit rate {report.hit_rate:.3f} over {trials} trials")
    return report
