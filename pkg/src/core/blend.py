"""
Linear Bellman combination of solved policies

Policies that share dynamics, horizon and running cost but differ in their
terminal cost are mixed with state- and time-dependent coefficients
alpha_i(x, k) proportional to w_i * exp(-v_i(x, k)), where v_i is each
policy's quadratic cost-to-go model. Coefficients are computed in the log
domain so large values never underflow.
"""
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp

from src.core.errors import AllWeightsZero, IncompatiblePolicies, IndexOutOfHorizon, NonFiniteState
from src.core.ilqr import AffinePolicy, ModelLike, _state_vector, as_dynamics
from src.core.plant import Trajectory

DoubleMatrix = npt.NDArray[np.float64]


def _check_compatible(policies: Sequence[AffinePolicy]) -> None:
    reference = policies[0]
    for policy in policies[1:]:
        if policy.horizon != reference.horizon:
            raise IncompatiblePolicies(
                f"Policy '{policy.name}' has horizon {policy.horizon}, expected {reference.horizon}"
            )
        if policy.dt != reference.dt:
            raise IncompatiblePolicies(f"Policy '{policy.name}' has dt {policy.dt}, expected {reference.dt}")
        if policy.state_dim != reference.state_dim:
            raise IncompatiblePolicies(f"Policy '{policy.name}' has a different state dimension")
        if (policy.cost.control_weight != reference.cost.control_weight
                or policy.cost.rate_weight != reference.cost.rate_weight):
            raise IncompatiblePolicies(f"Policy '{policy.name}' uses a different running cost")
        if (not np.array_equal(policy.control_lower, reference.control_lower)
                or not np.array_equal(policy.control_upper, reference.control_upper)):
            raise IncompatiblePolicies(f"Policy '{policy.name}' uses different control bounds")


@dataclass(frozen=True, eq=False)
class BlendSet:
    """Solved policies plus the intent weights that mix them"""

    policies: Tuple[AffinePolicy, ...]
    weights: DoubleMatrix
    value_scale: float = 0.01

    def __post_init__(self):
        policies = tuple(self.policies)
        if not policies:
            raise ValueError("A blend needs at least one policy")
        _check_compatible(policies)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.size != len(policies):
            raise ValueError(f"Got {weights.size} weights for {len(policies)} policies")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0.0):
            raise ValueError(f"Blend weights must be finite and nonnegative, got {weights.tolist()}")
        if not np.any(weights > 0.0):
            raise AllWeightsZero("At least one blend weight must be positive")
        if not self.value_scale > 0.0:
            raise ValueError(f"value_scale must be positive, got {self.value_scale}")
        object.__setattr__(self, "policies", policies)
        object.__setattr__(self, "weights", weights)

    @property
    def horizon(self) -> int:
        return self.policies[0].horizon

    @property
    def size(self) -> int:
        return len(self.policies)

    def with_weights(self, weights: Sequence[float]) -> "BlendSet":
        return replace(self, weights=np.asarray(weights, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class BlendCoefficients:
    alpha: DoubleMatrix
    k: int


def coefficients(blend: BlendSet, x, k: int) -> BlendCoefficients:
    """
    alpha_i = softmax(log w_i - scale * v_i(x, k)) over the policies with w_i > 0.

    Raises:
        AllWeightsZero: no positive weight
        IndexOutOfHorizon: k outside [0, N]
    """
    if not 0 <= k <= blend.horizon:
        raise IndexOutOfHorizon(f"Blend index {k} outside [0, {blend.horizon}]")
    active = blend.weights > 0.0
    if not np.any(active):
        raise AllWeightsZero("At least one blend weight must be positive")
    state = _state_vector(x)
    logits = np.full(blend.size, -np.inf)
    for i in np.flatnonzero(active):
        logits[i] = np.log(blend.weights[i]) - blend.value_scale * blend.policies[i].value(state, k)
    alpha = np.zeros(blend.size)
    alpha[active] = np.exp(logits[active] - logsumexp(logits[active]))
    return BlendCoefficients(alpha=alpha, k=k)


def blended_control(blend: BlendSet, x, k: int, clamp: bool = True) -> DoubleMatrix:
    """u = sum_i alpha_i(x, k) * [u_bar_i + l_i + L_i (x - x_bar_i)]"""
    if not 0 <= k < blend.horizon:
        raise IndexOutOfHorizon(f"Control index {k} outside [0, {blend.horizon})")
    state = _state_vector(x)
    alpha = coefficients(blend, state, k).alpha
    components = np.vstack([policy.control(state, k, clamp=False) for policy in blend.policies])
    u = alpha @ components
    if clamp:
        reference = blend.policies[0]
        u = np.clip(u, reference.control_lower, reference.control_upper)
    return u


def blended_rollout(blend: BlendSet, x0, model: ModelLike) -> Tuple[Trajectory, DoubleMatrix]:
    """
    Closed-loop simulation under the blended law.

    Returns:
        Tuple of (trajectory, alpha series with one row per control step)
    """
    dynamics = as_dynamics(model)
    n = blend.horizon
    states = np.empty((n + 1, blend.policies[0].state_dim))
    controls = np.empty((n, blend.policies[0].nominal_controls.shape[1]))
    alphas = np.empty((n, blend.size))
    states[0] = _state_vector(x0)
    for k in range(n):
        alphas[k] = coefficients(blend, states[k], k).alpha
        controls[k] = blended_control(blend, states[k], k)
        try:
            states[k + 1] = dynamics.step(states[k], controls[k])
        except NonFiniteState as e:
            raise NonFiniteState("Blended rollout diverged", index=k) from e
    return Trajectory(states=states, controls=controls, dt=dynamics.dt), alphas


def coefficient_header(n: int) -> List[str]:
    return ["k"] + [f"alpha_{i + 1}" for i in range(n)]


def coefficients_to_rows(alphas: DoubleMatrix) -> List[list]:
    return [[k, *row] for k, row in enumerate(alphas)]
