"""
Pipeline stages behind the command-line subcommands

Each cmd_* function takes a validated RunConfig, writes its artifacts under
config.output_dir and returns the process exit code. Domain failures are
raised as DomainError subclasses and mapped to exit codes by main().
"""
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.blend import BlendSet, blended_rollout, coefficient_header, coefficients_to_rows
from src.core.errors import ArtifactError, ConfigError
from src.core.ilqr import CONVERGENCE_HEADER, AffinePolicy, SolveReport, closed_loop_rollout, load_policy, save_policy, solve
from src.core.intent import (
    TRAINING_HEADER,
    PlsModel,
    SensorStream,
    detect_onset,
    extract_features,
    generate_trials,
    load_model,
    pls_fit,
    pls_project,
    predict_goal,
    predict_many,
    read_stream,
    save_model,
    select_emg_lead,
    synth_trial,
    weights_from_goal,
    write_stream,
    write_training,
)
from src.core.plant import TRAJECTORY_HEADER, PlantState, Trajectory
from src.core.task import (
    SHOT_HEADER,
    ThrowTask,
    cost_spec_for,
    effort,
    hand_velocity,
    score_policy,
    shoot,
    terminal_errors,
)
from src.utils.config_manager import RunConfig
from src.utils.io_utils import format_number, read_csv, write_csv_atomic, write_json_atomic, write_text_atomic
from src.utils.logger_config import PerformanceLogger, get_logger
from src.utils.progress_utils import LoggingTqdm

METRICS_HEADER = ["split", "distance", "trials", "mean_score", "mean_prediction", "mean_abs_error", "rmse", "r2"]
PREDICTIONS_HEADER = ["split", "trial", "seed", "label", "score", "prediction", "w1", "w2"]
LEAD_CV_HEADER = ["emg_lead_ms", "rmse", "selected"]
SHOT_DETAIL_HEADER = [
    "distance", "landing", "margin", "hit", "release_x", "release_y", "release_vx", "release_vy", "flight_time",
]
TERMINAL_HEADER = ["task", "joint", "angle_error", "velocity_error"]
COMPARISON_HEADER = [
    "controller", "angle_error_1", "angle_error_2", "velocity_error_1", "velocity_error_2",
    "release_speed", "error_ratio",
]
HIT_RATE_HEADER = ["task", "condition", "trials", "hit_rate", "mean_effort"]
SYNTH_HEADER = ["trial", "seed", "onset"] + TRAINING_HEADER

HOLDOUT_STREAM = 1


def _logger(run_id: Optional[str]):
    return get_logger(__name__, {"run_id": run_id} if run_id else None)


def _progress(**kwargs) -> LoggingTqdm:
    return LoggingTqdm(progress_logger=logging.getLogger("progress"), **kwargs)


def output_path(config: RunConfig, *parts: str) -> Path:
    return Path(config.output_dir).joinpath(*parts)


def initial_state(config: RunConfig) -> np.ndarray:
    """Arm at rest in the configured posture with gravity-hold pressures"""
    return PlantState.from_theta(config.initial_theta, config.arm).as_array()


def solve_task(config: RunConfig, task: ThrowTask, strict: bool = False) -> Tuple[AffinePolicy, SolveReport]:
    """Solve one task's release problem from the configured start, warm-started at the hold pressures"""
    spec = cost_spec_for(task, config.arm, **config.cost.as_kwargs())
    x0 = initial_state(config)
    init_controls = np.tile(x0[4:6], (spec.horizon, 1))
    return solve(x0, init_controls, config.arm, spec, config.solver, strict=strict, name=task.name)


def load_task_policy(config: RunConfig, name: str) -> AffinePolicy:
    path = output_path(config, "policies", f"{name}.json")
    if not path.is_file():
        raise ArtifactError(f"No policy for task '{name}' at {path}; run 'solve' first")
    return load_policy(path)


def make_blend(config: RunConfig, weights: Sequence[float]) -> BlendSet:
    policies = tuple(load_task_policy(config, name) for name in config.blend.policies)
    return BlendSet(policies=policies, weights=np.asarray(weights, dtype=np.float64),
                    value_scale=config.blend.value_scale)


def cmd_solve(config: RunConfig, task: str = "all", run_id: Optional[str] = None) -> int:
    """Solve the selected tasks and persist policies plus convergence traces"""
    logger = _logger(run_id)
    tasks = list(config.tasks) if task == "all" else [config.task(task)]
    converged = 0
    with _progress(total=len(tasks), desc="Solving tasks", unit="task") as pbar:
        for throw in tasks:
            task_logger = logger.bind(task=throw.name)
            pbar.set_description(f"Solving {throw.name}")
            with PerformanceLogger(task_logger, f"solve_{throw.name}", task=throw.name):
                policy, report = solve_task(config, throw)
            save_policy(policy, output_path(config, "policies", f"{throw.name}.json"))
            write_csv_atomic(output_path(config, "policies", f"{throw.name}_convergence.csv"),
                             CONVERGENCE_HEADER, report.to_rows())
            if report.converged:
                converged += 1
            else:
                task_logger.error(f"Task {throw.name} did not converge ({report.reason})")
            pbar.set_postfix({"converged": converged})
            pbar.update(1)

    print(f"✓ solved {converged}/{len(tasks)} tasks")
    return 0 if converged == len(tasks) else 2


def _split_rows(split: str, trials, features: np.ndarray, model: PlsModel, config: RunConfig) -> List[list]:
    scores = pls_project(model, features)[:, 0]
    predictions = predict_many(model, features)
    rows = []
    for i, (trial, score, prediction) in enumerate(zip(trials, scores, predictions)):
        w1, w2 = weights_from_goal(config.intent.sigmoid, float(prediction))
        rows.append([split, i, trial.seed, trial.label, score, prediction, w1, w2])
    return rows


def _metric_rows(split: str, labels: np.ndarray, scores: np.ndarray, predictions: np.ndarray) -> List[list]:
    rows = []
    for distance in np.unique(labels):
        mask = labels == distance
        errors = predictions[mask] - labels[mask]
        rows.append([split, distance, int(mask.sum()), scores[mask].mean(), predictions[mask].mean(),
                     np.abs(errors).mean(), math.sqrt(float(np.mean(errors ** 2))), None])
    return rows


def cmd_train_intent(config: RunConfig, cv_lead: bool = False, run_id: Optional[str] = None) -> int:
    """Generate synthetic training trials, fit the PLS model and report train/holdout metrics"""
    logger = _logger(run_id)
    intent = config.intent
    profile = intent.generator
    train_total = len(intent.train_distances) * intent.trials_per_distance
    with _progress(total=train_total, desc="Generating training trials", unit="trial") as pbar:
        trials = generate_trials(intent.train_distances, intent.trials_per_distance, config.seed, profile, pbar)
    labels = np.array([trial.label for trial in trials])

    lead_ms = intent.emg_lead_ms
    if cv_lead:
        with PerformanceLogger(logger, "select_emg_lead"):
            selection = select_emg_lead([t.stream for t in trials], labels, intent.lead_candidates_ms,
                                        intent.window_ms, intent.components, intent.cv_folds, config.seed,
                                        intent.onset_threshold)
        lead_ms = selection.best_ms
        write_csv_atomic(output_path(config, "intent", "lead_cv.csv"), LEAD_CV_HEADER, selection.to_rows())

    def featurize(stream: SensorStream) -> np.ndarray:
        onset = detect_onset(stream, intent.onset_threshold)
        return extract_features(stream, onset, intent.window_ms, lead_ms).values

    features = np.vstack([featurize(t.stream) for t in trials])
    with PerformanceLogger(logger, "pls_fit", trial=len(trials)):
        model = pls_fit(features, labels, intent.components)
    model = replace(model, window_ms=intent.window_ms, emg_lead_ms=lead_ms, onset_threshold=intent.onset_threshold)

    holdout = []
    if intent.holdout_distances and intent.holdout_trials > 0:
        holdout = generate_trials(intent.holdout_distances, intent.holdout_trials,
                                  [config.seed, HOLDOUT_STREAM], profile)
    holdout_features = np.vstack([featurize(t.stream) for t in holdout]) if holdout else np.zeros((0, features.shape[1]))
    holdout_labels = np.array([t.label for t in holdout])

    save_model(model, output_path(config, "intent", "pls_model.json"))
    write_training(output_path(config, "intent", "training.csv"), features, labels)

    prediction_rows = _split_rows("train", trials, features, model, config)
    metric_rows = _metric_rows("train", labels, pls_project(model, features)[:, 0], predict_many(model, features))
    metric_rows.append(["train", "all", len(trials), None, None, None, model.rmse, model.r2])
    if holdout:
        prediction_rows += _split_rows("holdout", holdout, holdout_features, model, config)
        metric_rows += _metric_rows("holdout", holdout_labels, pls_project(model, holdout_features)[:, 0],
                                    predict_many(model, holdout_features))
    write_csv_atomic(output_path(config, "intent", "predictions.csv"), PREDICTIONS_HEADER, prediction_rows)
    write_csv_atomic(output_path(config, "intent", "metrics.csv"), METRICS_HEADER, metric_rows)

    print(f"✓ trained PLS model on {len(trials)} trials: R²={model.r2:.4f}, EMG lead {lead_ms:g} ms")
    return 0


def _hoop_task(config: RunConfig, distance: float) -> ThrowTask:
    for task in config.tasks:
        if task.distance == distance:
            return task
    template = config.task(config.blend.compare_task)
    return replace(template, name=f"{distance:g}m", distance=distance)


def cmd_assist(config: RunConfig, distance: Optional[float] = None, stream_path: Optional[str] = None,
               weights: Optional[Sequence[float]] = None, window_ms: Optional[float] = None,
               emg_lead_ms: Optional[float] = None, onset_threshold: Optional[float] = None,
               run_id: Optional[str] = None) -> int:
    """
    Simulate one intent-assisted throw.

    The goal estimate from the pre-movement window sets the weights of the
    near and far policies; the blended law drives the arm to release and
    the ball is flown to the hoop. Feature window, EMG lead and onset
    threshold default to the values the model was trained with.
    """
    logger = _logger(run_id)
    if len(config.blend.policies) != 2:
        raise ConfigError("Intent-driven assist blends exactly two policies (near, far)")
    model = load_model(output_path(config, "intent", "pls_model.json")) \
        if weights is None else None

    if stream_path is not None:
        stream = read_stream(stream_path)
        label = None
        hoop = config.task(config.blend.compare_task)
    else:
        hoop_distance = distance if distance is not None else config.task(config.blend.compare_task).distance
        stream, label = synth_trial(hoop_distance, config.seed, config.intent.generator)
        hoop = _hoop_task(config, hoop_distance)

    record: Dict[str, object] = {"distance": hoop.distance, "label": label}
    if model is not None:
        window = window_ms if window_ms is not None else model.window_ms
        lead = emg_lead_ms if emg_lead_ms is not None else model.emg_lead_ms
        threshold = onset_threshold if onset_threshold is not None else model.onset_threshold
        onset = detect_onset(stream, threshold)
        psi = extract_features(stream, onset, window, lead)
        y_hat = predict_goal(model, psi)
        blend_weights = weights_from_goal(config.intent.sigmoid, y_hat)
        record.update({
            "onset_index": onset,
            "onset_time": onset / stream.sample_rate,
            "features": psi.values.tolist(),
            "score": pls_project(model, psi).tolist(),
            "goal_estimate": y_hat,
        })
        logger.info(f"Onset at sample {onset}, goal estimate {y_hat:.3f} m")
    else:
        blend_weights = tuple(float(w) for w in weights)
    record["weights"] = list(blend_weights)

    blend = make_blend(config, blend_weights)
    with PerformanceLogger(logger, "blended_rollout"):
        trajectory, alphas = blended_rollout(blend, initial_state(config), config.arm)
    write_csv_atomic(output_path(config, "assist", "trajectory.csv"), TRAJECTORY_HEADER, trajectory.to_rows())
    write_csv_atomic(output_path(config, "assist", "coefficients.csv"), coefficient_header(blend.size),
                     coefficients_to_rows(alphas))

    shot = shoot(trajectory.states[hoop.release_index(config.arm.dt)], hoop, config.arm)
    write_csv_atomic(output_path(config, "assist", "shot.csv"), SHOT_DETAIL_HEADER, [[
        hoop.distance, shot.landing, shot.margin, shot.hit, *shot.release_position, *shot.release_velocity,
        shot.flight_time,
    ]])
    record.update({"landing": shot.landing, "margin": shot.margin, "hit": shot.hit,
                   "effort": effort(trajectory)})
    write_json_atomic(output_path(config, "assist", "assist.json"), record)

    w1, w2 = blend_weights
    print(f"✓ assisted throw: w=({w1:.3f}, {w2:.3f}), landing {shot.landing:.3f} m "
          f"({'hit' if shot.hit else 'miss'})")
    return 0


def _release_speed(trajectory: Trajectory, task: ThrowTask, config: RunConfig) -> float:
    state = trajectory.states[task.release_index(config.arm.dt)]
    return float(np.linalg.norm(hand_velocity(state[:2], state[2:4], config.arm)))


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(format_number(cell) for cell in row) + " |" for row in rows]
    return "\n".join(lines)


def _intent_section(config: RunConfig) -> str:
    path = output_path(config, "intent", "metrics.csv")
    if not path.is_file():
        return "No intent model has been trained for this output directory."
    header, rows = read_csv(path)
    return _markdown_table(header, rows)


def cmd_evaluate(config: RunConfig, run_id: Optional[str] = None) -> int:
    """Terminal errors, blend-vs-dedicated comparison and simulated hit rates"""
    logger = _logger(run_id)
    arm = config.arm
    policies = {task.name: load_task_policy(config, task.name) for task in config.tasks}
    compare = config.task(config.blend.compare_task)
    fixed_blend = make_blend(config, config.blend.weights)

    terminal_rows = []
    for task in config.tasks:
        trajectory = closed_loop_rollout(policies[task.name], arm)
        angle, velocity = terminal_errors(trajectory, task, arm)
        terminal_rows += [[task.name, joint + 1, angle[joint], velocity[joint]] for joint in range(2)]

    with PerformanceLogger(logger, "blend_comparison"):
        dedicated = closed_loop_rollout(policies[compare.name], arm)
        blended, _ = blended_rollout(fixed_blend, initial_state(config), arm)
    baseline_angle, baseline_velocity = terminal_errors(dedicated, compare, arm)
    baseline = max(np.max(baseline_angle), 1e-12)
    comparison_rows = []
    controllers = [(name, closed_loop_rollout(policies[name], arm)) for name in config.blend.policies]
    controllers += [(f"{compare.name}_dedicated", dedicated), ("blend", blended)]
    for name, trajectory in controllers:
        angle, velocity = terminal_errors(trajectory, compare, arm)
        comparison_rows.append([name, *angle, *velocity, _release_speed(trajectory, compare, config),
                                float(np.max(angle)) / baseline])
    component_speeds = [row[5] for row in comparison_rows[:len(config.blend.policies)]]
    blend_speed = comparison_rows[-1][5]
    speed_between = min(component_speeds) < blend_speed < max(component_speeds)

    trials = config.evaluation.trials
    scale = config.evaluation.perturbation_scale
    conditions: List[Tuple[ThrowTask, str, object]] = []
    for task in config.tasks:
        conditions.append((task, "dedicated", policies[task.name]))
        if len(config.blend.policies) == 2:
            conditions.append((task, "intent_blend",
                               make_blend(config, weights_from_goal(config.intent.sigmoid, task.distance))))
    conditions.append((compare, "fixed_blend", fixed_blend))

    hit_rows = []
    with _progress(total=len(conditions) * trials, desc="Scoring", unit="shot") as pbar:
        for task, condition, controller in conditions:
            label = f"{task.name}_{condition}"
            pbar.set_description(f"Scoring {label}")
            report = score_policy(controller, task, arm, trials, scale, config.seed, name=label, progress=pbar)
            write_csv_atomic(output_path(config, "evaluate", f"shots_{label}.csv"), SHOT_HEADER, report.to_rows())
            hit_rows.append([task.name, condition, report.trials, report.hit_rate, report.mean_effort])

    write_csv_atomic(output_path(config, "evaluate", "terminal_errors.csv"), TERMINAL_HEADER, terminal_rows)
    write_csv_atomic(output_path(config, "evaluate", "comparison.csv"), COMPARISON_HEADER, comparison_rows)
    write_csv_atomic(output_path(config, "evaluate", "hit_rates.csv"), HIT_RATE_HEADER, hit_rows)

    report_md = "\n\n".join([
        "# Evaluation report",
        "## Terminal errors",
        _markdown_table(TERMINAL_HEADER, terminal_rows),
        "## Blended vs dedicated",
        f"Blend of {', '.join(config.blend.policies)} with weights {list(config.blend.weights)} "
        f"(value scale {format_number(config.blend.value_scale)}) against task {compare.name}.",
        _markdown_table(COMPARISON_HEADER, comparison_rows),
        f"Blend release speed strictly between component speeds: {'yes' if speed_between else 'no'}",
        "## Hit rates",
        f"{trials} trials per condition, perturbation scale {format_number(scale)}.",
        _markdown_table(HIT_RATE_HEADER, hit_rows),
        "## Intent estimation",
        _intent_section(config),
    ]) + "\n"
    write_text_atomic(output_path(config, "evaluate", "report.md"), report_md)

    print(f"✓ evaluation report written to {output_path(config, 'evaluate', 'report.md')}")
    return 0


def cmd_synth(config: RunConfig, distances: Optional[Sequence[float]] = None, trials: Optional[int] = None,
              run_id: Optional[str] = None) -> int:
    """Write synthetic sensor streams and their feature table"""
    logger = _logger(run_id)
    intent = config.intent
    distances = tuple(distances) if distances else intent.train_distances
    if min(distances) <= 0.0:
        raise ConfigError(f"Distances must be positive, got {list(distances)}")
    per_distance = trials if trials is not None else intent.trials_per_distance
    with _progress(total=len(distances) * per_distance, desc="Synthesizing trials", unit="trial") as pbar:
        generated = generate_trials(distances, per_distance, config.seed, intent.generator, pbar)

    rows = []
    for k, trial in enumerate(generated):
        write_stream(output_path(config, "synth", f"stream_{k}.csv"), trial.stream)
        onset = detect_onset(trial.stream, intent.onset_threshold)
        psi = extract_features(trial.stream, onset, intent.window_ms, intent.emg_lead_ms)
        rows.append([k, trial.seed, onset, *psi.values, trial.label])
    write_csv_atomic(output_path(config, "synth", "trials.csv"), SYNTH_HEADER, rows)
    logger.info(f"Wrote {len(generated)} synthetic trials")

    print(f"✓ synthesized {len(generated)} trials")
    return 0
