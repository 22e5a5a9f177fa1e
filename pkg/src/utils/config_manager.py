"""
Configuration management for loading and validating run configs

Configs are JSON documents with `schema_version: 1`. Absent sections take
the defaults below; unknown keys are rejected so typos never pass silently.
"""
import json
import math
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Mapping, Optional, Tuple

from src.core.errors import ConfigError, HorizonMismatch
from src.core.ilqr import SolverOptions
from src.core.intent import GeneratorProfile, SigmoidMap
from src.core.plant import ArmModel
from src.core.task import ThrowTask
from src.utils.logger_config import get_logger

SCHEMA_VERSION = 1
DEFAULT_CONFIG_PATH = "config/config.json"

TOP_LEVEL_KEYS = (
    "schema_version", "seed", "output_dir", "arm", "initial_theta", "cost", "tasks",
    "solver", "blend", "intent", "evaluation",
)


@dataclass(frozen=True)
class CostWeights:
    c_a: float = 500.0
    c_v: float = 50.0
    c_p: float = 1e-2
    c_pd: float = 1e-2

    def __post_init__(self):
        if min(self.c_a, self.c_v, self.c_p, self.c_pd) < 0.0:
            raise ValueError("cost weights must be nonnegative")

    def as_kwargs(self) -> Dict[str, float]:
        return {"c_a": self.c_a, "c_v": self.c_v, "c_p": self.c_p, "c_pd": self.c_pd}


@dataclass(frozen=True)
class BlendConfig:
    """Which solved policies are blended, and the task they are compared against"""

    policies: Tuple[str, ...] = ("1m", "3m")
    compare_task: str = "2m"
    weights: Tuple[float, ...] = (0.5, 0.5)
    value_scale: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "policies", tuple(str(p) for p in self.policies))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.policies) < 1:
            raise ValueError("blend.policies must name at least one task")
        if len(self.weights) != len(self.policies):
            raise ValueError(f"blend.weights has {len(self.weights)} entries for {len(self.policies)} policies")
        if min(self.weights) < 0.0:
            raise ValueError("blend.weights must be nonnegative")
        if not self.value_scale > 0.0:
            raise ValueError("blend.value_scale must be positive")


@dataclass(frozen=True)
class IntentConfig:
    components: int = 1
    window_ms: float = 50.0
    emg_lead_ms: float = 80.0
    onset_threshold: float = 0.2
    sigmoid_a: float = 3.0
    sigmoid_b: float = -6.0
    train_distances: Tuple[float, ...] = (1.0, 3.0)
    holdout_distances: Tuple[float, ...] = (2.0,)
    trials_per_distance: int = 20
    holdout_trials: int = 20
    lead_candidates_ms: Tuple[float, ...] = (60.0, 70.0, 80.0, 90.0, 100.0)
    cv_folds: int = 5
    generator: GeneratorProfile = field(default_factory=GeneratorProfile)

    def __post_init__(self):
        for name in ("train_distances", "holdout_distances", "lead_candidates_ms"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not 1 <= self.components <= 12:
            raise ValueError("intent.components must be in [1, 12]")
        if not self.window_ms > 0.0 or self.emg_lead_ms < 0.0:
            raise ValueError("intent.window_ms must be positive and emg_lead_ms nonnegative")
        if self.onset_threshold < 0.0:
            raise ValueError("intent.onset_threshold must be nonnegative")
        if self.trials_per_distance < 1 or self.holdout_trials < 0:
            raise ValueError("intent trial counts must be positive")
        if not self.train_distances or min(self.train_distances + self.holdout_distances, default=1.0) <= 0.0:
            raise ValueError("intent distances must be positive")
        if self.cv_folds < 2:
            raise ValueError("intent.cv_folds must be at least 2")
        if not self.lead_candidates_ms:
            raise ValueError("intent.lead_candidates_ms must not be empty")
        SigmoidMap(self.sigmoid_a, self.sigmoid_b)

    @property
    def sigmoid(self) -> SigmoidMap:
        return SigmoidMap(self.sigmoid_a, self.sigmoid_b)


@dataclass(frozen=True)
class EvaluationConfig:
    trials: int = 20
    perturbation_scale: float = 0.01

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("evaluation.trials must be at least 1")
        if self.perturbation_scale < 0.0:
            raise ValueError("evaluation.perturbation_scale must be nonnegative")


def _default_tasks() -> Tuple[ThrowTask, ...]:
    return tuple(ThrowTask(name=f"{d}m", distance=float(d)) for d in (1, 2, 3))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    arm: ArmModel = field(default_factory=ArmModel)
    initial_theta: Tuple[float, float] = (-0.3, 0.3)
    cost: CostWeights = field(default_factory=CostWeights)
    tasks: Tuple[ThrowTask, ...] = field(default_factory=_default_tasks)
    solver: SolverOptions = field(default_factory=SolverOptions)
    blend: BlendConfig = field(default_factory=BlendConfig)
    intent: IntentConfig = field(default_factory=IntentConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def task(self, name: str) -> ThrowTask:
        for task in self.tasks:
            if task.name == name:
                return task
        raise ConfigError(f"Unknown task '{name}'; configured tasks: {[t.name for t in self.tasks]}")

    @property
    def task_names(self) -> Tuple[str, ...]:
        return tuple(task.name for task in self.tasks)


def _build(cls, raw: Any, section: str):
    """Instantiate a frozen dataclass from a JSON mapping, rejecting unknown keys"""
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"Section '{section}' must be an object, got {type(raw).__name__}")
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {unknown}")
    values = {key: tuple(value) if isinstance(value, list) else value for key, value in raw.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{section}' section: {e}") from e


def _joint_pair(raw: Any, name: str) -> Tuple[float, float]:
    if isinstance(raw, (str, bytes)) or not isinstance(raw, (list, tuple)) or len(raw) != 2:
        raise ConfigError(f"{name} must list two joint angles, got {raw!r}")
    try:
        pair = (float(raw[0]), float(raw[1]))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name} must hold numbers, got {raw!r}") from e
    if not all(math.isfinite(v) for v in pair):
        raise ConfigError(f"{name} must be finite, got {raw!r}")
    return pair


def _apply_overrides(raw: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Set dotted keys such as 'solver.max_iter'; None values are skipped"""
    merged = json.loads(json.dumps(raw))
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = merged
        *parents, leaf = dotted.split(".")
        for key in parents:
            child = node.get(key)
            if child is None:
                child = node[key] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"Cannot override '{dotted}': '{key}' is not a section")
            node = child
        node[leaf] = list(value) if isinstance(value, tuple) else value
    return merged


def load_config(config_file: str = DEFAULT_CONFIG_PATH) -> Dict[str, Any]:
    """Read the raw JSON document"""
    if not os.path.isfile(config_file):
        raise ConfigError(f"Config file not found: {config_file}")
    try:
        with open(config_file, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_file} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"Config file {config_file} must hold a JSON object")
    return raw


def parse_config(raw: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Validate a raw config and return a RunConfig

    Args:
        raw: Parsed JSON document
        overrides: Dotted-key values from the command line, validated like file values

    Returns:
        Frozen RunConfig

    Raises:
        ConfigError: on any schema violation
    """
    logger = get_logger(__name__)
    data = _apply_overrides(dict(raw), overrides or {})

    unknown = sorted(set(data) - set(TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f"Unknown top-level keys: {unknown}")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"Unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")

    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    output_dir = data.get("output_dir", "out")
    if not isinstance(output_dir, str) or not output_dir.strip():
        raise ConfigError("output_dir must be a non-empty string")

    initial_theta = _joint_pair(data.get("initial_theta", [-0.3, 0.3]), "initial_theta")

    intent_raw = data.get("intent")
    if isinstance(intent_raw, Mapping) and "generator" in intent_raw:
        intent_raw = dict(intent_raw)
        intent_raw["generator"] = _build(GeneratorProfile, intent_raw["generator"], "intent.generator")

    tasks_raw = data.get("tasks")
    if tasks_raw is None:
        tasks = _default_tasks()
    else:
        if not isinstance(tasks_raw, list) or not tasks_raw:
            raise ConfigError("tasks must be a non-empty list")
        tasks = tuple(_build(ThrowTask, entry, f"tasks[{i}]") for i, entry in enumerate(tasks_raw))

    config = RunConfig(
        seed=seed,
        output_dir=os.path.normpath(os.path.expanduser(os.path.expandvars(output_dir))),
        arm=_build(ArmModel, data.get("arm"), "arm"),
        initial_theta=initial_theta,
        cost=_build(CostWeights, data.get("cost"), "cost"),
        tasks=tasks,
        solver=_build(SolverOptions, data.get("solver"), "solver"),
        blend=_build(BlendConfig, data.get("blend"), "blend"),
        intent=_build(IntentConfig, intent_raw, "intent"),
        evaluation=_build(EvaluationConfig, data.get("evaluation"), "evaluation"),
    )
    _check_references(config)
    logger.info("Configuration parsed successfully", extra={"task": ",".join(config.task_names)})
    return config


def _check_references(config: RunConfig) -> None:
    names = config.task_names
    if len(set(names)) != len(names):
        raise ConfigError(f"Task names must be unique, got {list(names)}")
    for name in config.blend.policies + (config.blend.compare_task,):
        if name not in names:
            raise ConfigError(f"blend references unknown task '{name}'")
    for task in config.tasks:
        try:
            task.release_index(config.arm.dt)
        except HorizonMismatch as e:
            raise ConfigError(f"Task '{task.name}': {e}") from e
