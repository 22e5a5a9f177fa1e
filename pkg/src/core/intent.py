"""
Motor-goal estimation from pre-movement sensor windows

Features are averaged over short windows before the detected movement
onset (EMG windows shifted earlier by the activation lead), standardized,
projected onto PLS directions and regressed onto the goal label (throw
distance in meters). The estimate is turned into blend weights through a
logistic map.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from src.core.errors import ArtifactError, DegenerateLabels, InsufficientHistory, NoOnset, RankDeficient
from src.utils.io_utils import read_csv, read_json, write_csv_atomic, write_json_atomic
from src.utils.logger_config import get_logger

DoubleMatrix = npt.NDArray[np.float64]

EMG_CHANNELS = 8
FEATURE_DIM = EMG_CHANNELS + 4
EMG_NAMES = [f"emg{i + 1}" for i in range(EMG_CHANNELS)]
FEATURE_NAMES = EMG_NAMES + ["theta1", "theta2", "omega1", "omega2"]
STREAM_HEADER = ["t"] + FEATURE_NAMES
TRAINING_HEADER = FEATURE_NAMES + ["label"]

MODEL_SCHEMA = "pls-model"
MODEL_SCHEMA_VERSION = 1

ONSET_THRESHOLD = 0.2  # rad/s, shoulder
WINDOW_MS = 50.0
EMG_LEAD_MS = 80.0

# Zero-variance channels are kept at unit scale
_MIN_SCALE = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """[emg1..emg8, theta1, theta2, omega1, omega2]"""

    values: DoubleMatrix

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size != FEATURE_DIM:
            raise ValueError(f"Feature vector needs {FEATURE_DIM} entries, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Feature vector has non-finite entries")
        if np.any(values[:EMG_CHANNELS] < 0.0):
            raise ValueError("EMG features must be nonnegative")
        object.__setattr__(self, "values", values)

    @property
    def emg(self) -> DoubleMatrix:
        return self.values[:EMG_CHANNELS]

    @property
    def theta(self) -> DoubleMatrix:
        return self.values[EMG_CHANNELS:EMG_CHANNELS + 2]

    @property
    def omega(self) -> DoubleMatrix:
        return self.values[EMG_CHANNELS + 2:]

    def as_array(self) -> DoubleMatrix:
        return self.values.copy()


@dataclass(frozen=True, eq=False)
class SensorStream:
    """Uniformly sampled EMG amplitudes (n, 8), joint angles (n, 2) and velocities (n, 2)"""

    emg: DoubleMatrix
    theta: DoubleMatrix
    omega: DoubleMatrix
    sample_rate: float = 1000.0

    def __post_init__(self):
        emg = np.asarray(self.emg, dtype=np.float64).reshape(-1, EMG_CHANNELS)
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 2)
        omega = np.asarray(self.omega, dtype=np.float64).reshape(-1, 2)
        if not emg.shape[0] == theta.shape[0] == omega.shape[0]:
            raise ValueError(
                f"Channel lengths differ: emg {emg.shape[0]}, theta {theta.shape[0]}, omega {omega.shape[0]}"
            )
        if not self.sample_rate > 0.0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "emg", emg)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "omega", omega)

    def __len__(self) -> int:
        return int(self.emg.shape[0])

    @property
    def times(self) -> DoubleMatrix:
        return np.arange(len(self)) / self.sample_rate

    def samples(self, duration_ms: float) -> int:
        return int(round(duration_ms * self.sample_rate / 1000.0))

    def to_rows(self) -> List[list]:
        table = np.hstack([self.times[:, None], self.emg, self.theta, self.omega])
        return table.tolist()


@dataclass(frozen=True, eq=False)
class PlsModel:
    """
    Fitted PLS regression of the goal label on standardized features.

    weights holds one unit-norm direction per column; scores are
    weights.T @ z with z the standardized feature vector, and the label is
    recovered as y_mean + y_scale * (coef @ scores + intercept).
    """

    weights: DoubleMatrix
    coef: DoubleMatrix
    intercept: float
    x_mean: DoubleMatrix
    x_scale: DoubleMatrix
    y_mean: float
    y_scale: float
    train_scores: DoubleMatrix
    r2: float = float("nan")
    rmse: float = float("nan")
    feature_names: Tuple[str, ...] = tuple(FEATURE_NAMES)
    window_ms: float = WINDOW_MS
    emg_lead_ms: float = EMG_LEAD_MS
    onset_threshold: float = ONSET_THRESHOLD

    def __post_init__(self):
        weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if weights.shape[1] < 1:
            raise ValueError("PLS model needs at least one component")
        if np.any(np.asarray(self.x_scale) <= 0.0) or not self.y_scale > 0.0:
            raise ValueError("Stored scales must be strictly positive")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "coef", np.asarray(self.coef, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "x_mean", np.asarray(self.x_mean, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "x_scale", np.asarray(self.x_scale, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "train_scores", np.asarray(self.train_scores, dtype=np.float64)
                           .reshape(-1, weights.shape[1]))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def components(self) -> int:
        return int(self.weights.shape[1])


@dataclass(frozen=True)
class SigmoidMap:
    """w2 = 1 / (1 + exp(-a*y - b)); w1 = 1 - w2"""

    a: float = 3.0
    b: float = -6.0

    def __post_init__(self):
        if not self.a > 0.0:
            raise ValueError(f"Sigmoid gain must be positive, got {self.a}")

    @property
    def midpoint(self) -> float:
        return -self.b / self.a


@dataclass(frozen=True)
class GeneratorProfile:
    """
    Synthetic throw-trial generator.

    EMG is amplitude coded: a burst of height channel_gain * (burst_base +
    burst_gain * D) starts burst_lead_s before the nominal kinematic onset.
    The shoulder velocity ramps with slope ramp_base + ramp_gain * D from
    the movement start, the elbow follows at elbow_ratio of that speed.
    """

    sample_rate: float = 1000.0
    duration: float = 1.0
    movement_start: float = 0.5
    start_jitter: float = 0.02
    emg_baseline: float = 0.05
    emg_noise: float = 0.02
    channel_gains: Tuple[float, ...] = (1.0, 0.8, 0.6, 0.9, 0.5, 0.7, 0.4, 0.3)
    burst_base: float = 0.1
    burst_gain: float = 0.15
    burst_jitter: float = 0.05
    burst_lead_s: float = 0.08
    ramp_base: float = 1.0
    ramp_gain: float = 0.8
    elbow_ratio: float = 0.4
    initial_theta: Tuple[float, float] = (-0.5, 0.2)
    angle_noise: float = 0.002
    velocity_noise: float = 0.005
    onset_threshold: float = ONSET_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "channel_gains", tuple(float(g) for g in self.channel_gains))
        object.__setattr__(self, "initial_theta", tuple(float(v) for v in self.initial_theta))
        if len(self.channel_gains) != EMG_CHANNELS:
            raise ValueError(f"channel_gains needs {EMG_CHANNELS} entries")
        if min(self.channel_gains) < 0.0:
            raise ValueError("channel_gains must be nonnegative")
        if not self.sample_rate > 0.0 or not self.duration > 0.0:
            raise ValueError("sample_rate and duration must be positive")
        if not 0.0 < self.movement_start - self.start_jitter < self.duration:
            raise ValueError("movement_start must lie inside the stream")
        for name in ("emg_baseline", "emg_noise", "burst_jitter", "angle_noise", "velocity_noise",
                     "start_jitter", "burst_lead_s"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.ramp_base > 0.0 or self.ramp_gain < 0.0:
            raise ValueError("ramp slope must stay positive")

    def ramp_slope(self, distance: float) -> float:
        return self.ramp_base + self.ramp_gain * distance

    def burst_amplitude(self, distance: float) -> float:
        return self.burst_base + self.burst_gain * distance


@dataclass(frozen=True, eq=False)
class SyntheticTrial:
    stream: SensorStream
    label: float
    seed: int


@dataclass(frozen=True)
class LeadSelection:
    best_ms: float
    rmse: Dict[float, float] = field(default_factory=dict)

    def to_rows(self) -> List[list]:
        return [[lead, value, lead == self.best_ms] for lead, value in self.rmse.items()]


def _standardize(samples: DoubleMatrix) -> Tuple[DoubleMatrix, DoubleMatrix]:
    mean = samples.mean(axis=0)
    scale = samples.std(axis=0)
    scale = np.where(scale > _MIN_SCALE, scale, 1.0)
    return mean, scale


def pls_fit(samples, labels, components: int = 1) -> PlsModel:
    """
    Fit a PLS1 model with sequential NIPALS extraction.

    Each direction is the unit vector maximizing the squared covariance
    between the deflated standardized features and the deflated label.
    The affine map from scores to the standardized label is least squares.

    Args:
        samples: (n, 12) feature matrix or sequence of FeatureVector
        labels: (n,) goal labels
        components: number of PLS directions, 1..12

    Raises:
        DegenerateLabels: constant labels
        RankDeficient: the deflated features carry no label covariance
    """
    x = np.vstack([s.values if isinstance(s, FeatureVector) else np.asarray(s, dtype=np.float64)
                   for s in samples])
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.shape[0] < 2:
        raise DegenerateLabels(f"PLS needs at least 2 samples, got {x.shape[0]}")
    if x.shape[0] != y.size:
        raise ValueError(f"{x.shape[0]} samples but {y.size} labels")
    if not 1 <= components <= x.shape[1]:
        raise ValueError(f"components must be in [1, {x.shape[1]}], got {components}")
    if np.ptp(y) == 0.0:
        raise DegenerateLabels(f"All {y.size} labels equal {y[0]}")

    x_mean, x_scale = _standardize(x)
    y_mean, y_scale = float(y.mean()), float(y.std())
    z = (x - x_mean) / x_scale
    target = (y - y_mean) / y_scale

    weights = np.zeros((x.shape[1], components))
    x_res, y_res = z.copy(), target.copy()
    for a in range(components):
        w = x_res.T @ y_res
        norm = np.linalg.norm(w)
        if norm < 1e-10 * max(1.0, np.linalg.norm(x_res)):
            raise RankDeficient(f"No label covariance left for component {a + 1}")
        w /= norm
        t = x_res @ w
        tt = t @ t
        x_res = x_res - np.outer(t, x_res.T @ t / tt)
        y_res = y_res - t * (t @ y_res / tt)
        weights[:, a] = w

    scores = z @ weights
    design = np.hstack([scores, np.ones((scores.shape[0], 1))])
    solution, *_ = np.linalg.lstsq(design, target, rcond=None)
    fitted = y_mean + y_scale * (design @ solution)
    residual = y - fitted
    r2 = 1.0 - float(residual @ residual) / float(((y - y_mean) ** 2).sum())
    rmse = float(np.sqrt(np.mean(residual ** 2)))
    get_logger(__name__).info(f"PLS fit on {y.size} samples, {components} component(s): R2={r2:.4f} RMSE={rmse:.4g}")
    return PlsModel(
        weights=weights,
        coef=solution[:-1],
        intercept=float(solution[-1]),
        x_mean=x_mean,
        x_scale=x_scale,
        y_mean=y_mean,
        y_scale=y_scale,
        train_scores=scores,
        r2=r2,
        rmse=rmse,
    )


def _feature_array(psi) -> DoubleMatrix:
    if isinstance(psi, FeatureVector):
        return psi.values
    return np.asarray(psi, dtype=np.float64)


def pls_project(model: PlsModel, psi) -> DoubleMatrix:
    """mu = W' z with z the standardized feature vector (rows of a matrix project independently)"""
    z = (_feature_array(psi) - model.x_mean) / model.x_scale
    return z @ model.weights


def predict_goal(model: PlsModel, psi) -> float:
    mu = pls_project(model, psi)
    return float(model.y_mean + model.y_scale * (mu @ model.coef + model.intercept))


def predict_many(model: PlsModel, samples) -> DoubleMatrix:
    mu = pls_project(model, np.atleast_2d(samples))
    return model.y_mean + model.y_scale * (mu @ model.coef + model.intercept)


def detect_onset(stream: SensorStream, threshold: float = ONSET_THRESHOLD) -> int:
    """First sample where the shoulder speed exceeds threshold (rad/s)"""
    crossed = np.flatnonzero(np.abs(stream.omega[:, 0]) > threshold)
    if crossed.size == 0:
        raise NoOnset(f"Shoulder velocity never exceeds {threshold} rad/s in {len(stream)} samples")
    return int(crossed[0])


def extract_features(stream: SensorStream, onset: int, window_ms: float = WINDOW_MS,
                     emg_lead_ms: float = EMG_LEAD_MS) -> FeatureVector:
    """
    Windowed means before onset.

    Kinematics average over [onset - window, onset); EMG averages over
    [onset - lead - window, onset - lead).
    """
    window = stream.samples(window_ms)
    lead = stream.samples(emg_lead_ms)
    if window < 1:
        raise ValueError(f"Window of {window_ms} ms holds no samples at {stream.sample_rate} Hz")
    emg_start = onset - lead - window
    if emg_start < 0 or onset - window < 0:
        raise InsufficientHistory(
            f"Onset at sample {onset} leaves no room for a {window_ms} ms window with {emg_lead_ms} ms EMG lead"
        )
    if onset > len(stream):
        raise InsufficientHistory(f"Onset {onset} beyond stream length {len(stream)}")
    emg = stream.emg[emg_start:onset - lead].mean(axis=0)
    theta = stream.theta[onset - window:onset].mean(axis=0)
    omega = stream.omega[onset - window:onset].mean(axis=0)
    return FeatureVector(np.concatenate([emg, theta, omega]))


def weights_from_goal(sigmoid: SigmoidMap, y_hat: float) -> Tuple[float, float]:
    """Blend weights (w1, w2) for the near and far policies"""
    eps = np.finfo(np.float64).eps
    w2 = float(np.clip(expit(sigmoid.a * y_hat + sigmoid.b), eps, 1.0 - eps))
    return 1.0 - w2, w2


def synth_trial(distance: float, noise_seed, profile: Optional[GeneratorProfile] = None) -> Tuple[SensorStream, float]:
    """Deterministic synthetic pre-movement recording for a throw of the given distance"""
    if not distance > 0.0:
        raise ValueError(f"distance must be positive, got {distance}")
    profile = profile or GeneratorProfile()
    rng = np.random.default_rng(noise_seed)
    n = int(round(profile.duration * profile.sample_rate))
    t = np.arange(n) / profile.sample_rate

    start = profile.movement_start + rng.uniform(-profile.start_jitter, profile.start_jitter)
    slope = profile.ramp_slope(distance)
    elapsed = np.clip(t - start, 0.0, None)
    omega1 = slope * elapsed
    theta1 = profile.initial_theta[0] + 0.5 * slope * elapsed ** 2
    omega = np.column_stack([omega1, profile.elbow_ratio * omega1])
    theta = np.column_stack([theta1, profile.initial_theta[1] + profile.elbow_ratio * (theta1 - profile.initial_theta[0])])

    nominal_onset = start + profile.onset_threshold / slope
    gains = np.asarray(profile.channel_gains)
    amplitude = gains * profile.burst_amplitude(distance) * (1.0 + rng.normal(0.0, profile.burst_jitter, EMG_CHANNELS))
    emg = profile.emg_baseline + np.abs(rng.normal(0.0, profile.emg_noise, (n, EMG_CHANNELS)))
    active = t >= nominal_onset - profile.burst_lead_s
    emg[active] += np.clip(amplitude, 0.0, None)

    theta = theta + rng.normal(0.0, profile.angle_noise, theta.shape)
    omega = omega + rng.normal(0.0, profile.velocity_noise, omega.shape)
    return SensorStream(emg=emg, theta=theta, omega=omega, sample_rate=profile.sample_rate), float(distance)


def trial_seeds(seed, count: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def generate_trials(distances: Sequence[float], trials_per_distance: int, seed,
                    profile: Optional[GeneratorProfile] = None, progress=None) -> List[SyntheticTrial]:
    """trials_per_distance trials for every distance, each seeded from SeedSequence(seed)"""
    if trials_per_distance < 1:
        raise ValueError(f"trials_per_distance must be at least 1, got {trials_per_distance}")
    plan = [float(d) for d in distances for _ in range(trials_per_distance)]
    trials = []
    for distance, trial_seed in zip(plan, trial_seeds(seed, len(plan))):
        stream, label = synth_trial(distance, trial_seed, profile)
        trials.append(SyntheticTrial(stream=stream, label=label, seed=trial_seed))
        if progress is not None:
            progress.update(1)
    return trials


def features_for(stream: SensorStream, onset_threshold: float = ONSET_THRESHOLD,
                 window_ms: float = WINDOW_MS, emg_lead_ms: float = EMG_LEAD_MS) -> FeatureVector:
    onset = detect_onset(stream, onset_threshold)
    return extract_features(stream, onset, window_ms, emg_lead_ms)


def generate_dataset(distances: Sequence[float], trials_per_distance: int, seed: int,
                     profile: Optional[GeneratorProfile] = None, onset_threshold: float = ONSET_THRESHOLD,
                     window_ms: float = WINDOW_MS,
                     emg_lead_ms: float = EMG_LEAD_MS) -> Tuple[DoubleMatrix, DoubleMatrix, List[int]]:
    """
    Synthetic training set.

    Returns:
        Tuple of (features (n, 12), labels (n,), per-trial seeds)
    """
    trials = generate_trials(distances, trials_per_distance, seed, profile)
    features = np.vstack([
        features_for(trial.stream, onset_threshold, window_ms, emg_lead_ms).values for trial in trials
    ])
    labels = np.array([trial.label for trial in trials])
    return features, labels, [trial.seed for trial in trials]


def _stratified_folds(labels: DoubleMatrix, folds: int, seed: int) -> DoubleMatrix:
    rng = np.random.default_rng(seed)
    assignment = np.empty(labels.size, dtype=int)
    for value in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == value))
        assignment[members] = np.arange(members.size) % folds
    return assignment


def select_emg_lead(streams: Sequence[SensorStream], labels, candidates_ms: Sequence[float] = (60, 70, 80, 90, 100),
                    window_ms: float = WINDOW_MS, components: int = 1, folds: int = 5, seed: int = 0,
                    onset_threshold: float = ONSET_THRESHOLD) -> LeadSelection:
    """
    Pick the EMG activation lead with the lowest k-fold held-out RMSE.

    Folds are stratified by label and shared across candidates; ties go to
    the earlier candidate.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(streams) != y.size:
        raise ValueError(f"{len(streams)} streams but {y.size} labels")
    if folds < 2:
        raise ValueError(f"folds must be at least 2, got {folds}")
    logger = get_logger(__name__)
    onsets = [detect_onset(stream, onset_threshold) for stream in streams]
    assignment = _stratified_folds(y, folds, seed)

    rmse: Dict[float, float] = {}
    for lead in candidates_ms:
        x = np.vstack([extract_features(s, on, window_ms, float(lead)).values for s, on in zip(streams, onsets)])
        errors = np.empty(y.size)
        for fold in range(folds):
            held = assignment == fold
            if not np.any(held):
                continue
            model = pls_fit(x[~held], y[~held], components)
            errors[held] = predict_many(model, x[held]) - y[held]
        rmse[float(lead)] = float(np.sqrt(np.mean(errors ** 2)))
        logger.debug(f"EMG lead {lead} ms: held-out RMSE {rmse[float(lead)]:.4g}")

    best = min(rmse, key=lambda lead: (rmse[lead], lead))
    logger.info(f"Selected EMG lead {best:g} ms (RMSE {rmse[best]:.4g})")
    return LeadSelection(best_ms=best, rmse=rmse)


def model_to_dict(model: PlsModel) -> Dict[str, Any]:
    return {
        "schema": MODEL_SCHEMA,
        "version": MODEL_SCHEMA_VERSION,
        "components": model.components,
        "feature_names": list(model.feature_names),
        "weights": model.weights.tolist(),
        "coef": model.coef.tolist(),
        "intercept": model.intercept,
        "x_mean": model.x_mean.tolist(),
        "x_scale": model.x_scale.tolist(),
        "y_mean": model.y_mean,
        "y_scale": model.y_scale,
        "train_scores": model.train_scores.tolist(),
        "r2": model.r2,
        "rmse": model.rmse,
        "window_ms": model.window_ms,
        "emg_lead_ms": model.emg_lead_ms,
        "onset_threshold": model.onset_threshold,
    }


def model_from_dict(data: Dict[str, Any]) -> PlsModel:
    if data.get("schema") != MODEL_SCHEMA or data.get("version") != MODEL_SCHEMA_VERSION:
        raise ArtifactError(
            f"Unsupported model document: schema={data.get('schema')} version={data.get('version')}"
        )
    try:
        return PlsModel(
            weights=np.asarray(data["weights"], dtype=np.float64),
            coef=np.asarray(data["coef"], dtype=np.float64),
            intercept=float(data["intercept"]),
            x_mean=np.asarray(data["x_mean"], dtype=np.float64),
            x_scale=np.asarray(data["x_scale"], dtype=np.float64),
            y_mean=float(data["y_mean"]),
            y_scale=float(data["y_scale"]),
            train_scores=np.asarray(data["train_scores"], dtype=np.float64),
            r2=float(data["r2"]),
            rmse=float(data["rmse"]),
            feature_names=tuple(data.get("feature_names", FEATURE_NAMES)),
            window_ms=float(data.get("window_ms", WINDOW_MS)),
            emg_lead_ms=float(data.get("emg_lead_ms", EMG_LEAD_MS)),
            onset_threshold=float(data.get("onset_threshold", ONSET_THRESHOLD)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"Malformed model document: {e}") from e


def save_model(model: PlsModel, path) -> None:
    write_json_atomic(path, model_to_dict(model), exact=True)


def load_model(path) -> PlsModel:
    return model_from_dict(read_json(path))


def write_stream(path, stream: SensorStream) -> None:
    write_csv_atomic(path, STREAM_HEADER, stream.to_rows())


def read_stream(path) -> SensorStream:
    header, rows = read_csv(path)
    if header != STREAM_HEADER:
        raise ArtifactError(f"Stream {path} has header {header}, expected {STREAM_HEADER}")
    try:
        table = np.array([[float(cell) for cell in row] for row in rows])
    except ValueError as e:
        raise ArtifactError(f"Stream {path} has a non-numeric cell: {e}") from e
    if table.shape[0] < 2:
        raise ArtifactError(f"Stream {path} needs at least two samples")
    step = float(np.median(np.diff(table[:, 0])))
    if not step > 0.0:
        raise ArtifactError(f"Stream {path} has non-increasing timestamps")
    return SensorStream(
        emg=table[:, 1:1 + EMG_CHANNELS],
        theta=table[:, 1 + EMG_CHANNELS:3 + EMG_CHANNELS],
        omega=table[:, 3 + EMG_CHANNELS:],
        sample_rate=round(1.0 / step, 6),
    )


def write_training(path, features: DoubleMatrix, labels: DoubleMatrix) -> None:
    rows = [[*row, label] for row, label in zip(np.atleast_2d(features), np.asarray(labels).reshape(-1))]
    write_csv_atomic(path, TRAINING_HEADER, rows)
