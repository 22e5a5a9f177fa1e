"""
Command-line smoke tests: exit codes, artifacts and reruns
"""
import json
from pathlib import Path

import numpy as np
import pytest

from main import build_parser, main
from src.core.intent import SensorStream, write_stream

REPO_CONFIG = str(Path(__file__).parents[2] / "config" / "config.json")


def run(out: Path, *args: str, config: str = REPO_CONFIG) -> int:
    return main(["--config", config, "--out", str(out), *args])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """Output directory after solve and train-intent have run once"""
    out = tmp_path_factory.mktemp("pipeline")
    assert run(out, "solve") == 0
    assert run(out, "train-intent", "--trials", "10") == 0
    return out


def test_parser_reads_global_and_command_flags():
    args = build_parser().parse_args(["--seed", "4", "assist", "--weights", "0.2,0.8", "--value-scale", "0.5"])
    assert args.seed == 4
    assert args.command == "assist"
    assert args.weights == (0.2, 0.8)
    assert args.value_scale == 0.5


def test_usage_errors_exit_with_one():
    assert main([]) == 1
    assert main(["assist", "--distance", "2", "--stream", "s.csv"]) == 1
    assert main(["evaluate", "--weights", "a,b"]) == 1
    assert main(["--help"]) == 0


def test_missing_config_exits_with_one(tmp_path):
    assert run(tmp_path, "synth", config=str(tmp_path / "absent.json")) == 1


def test_invalid_config_exits_with_one(tmp_path, monkeypatch):
    monkeypatch.delenv("LOG_DIR", raising=False)
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"schema_version": 1, "solver": {"max_iter": 0}}))
    assert run(tmp_path / "out", "synth", config=str(path)) == 1
    assert not (tmp_path / "out").exists()


def test_malformed_initial_posture_exits_with_one(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LOG_DIR", raising=False)
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"schema_version": 1, "initial_theta": ["a", 1]}))
    assert run(tmp_path / "out", "synth", config=str(path)) == 1
    assert "initial_theta" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_synth_is_deterministic(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        assert run(out, "synth", "--distance", "1", "3", "--trials", "2") == 0
    assert (first / "synth" / "trials.csv").read_bytes() == (second / "synth" / "trials.csv").read_bytes()
    assert (first / "synth" / "stream_3.csv").read_bytes() == (second / "synth" / "stream_3.csv").read_bytes()
    lines = (first / "synth" / "trials.csv").read_text().splitlines()
    assert len(lines) == 5
    assert lines[0].startswith("trial,seed,onset,emg1")


def test_constant_training_labels_exit_with_two(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"schema_version": 1, "intent": {"train_distances": [2.0]}}))
    assert run(tmp_path / "out", "train-intent", "--trials", "5", config=str(path)) == 2


def test_assist_without_policies_exits_with_one(tmp_path):
    assert run(tmp_path, "assist", "--weights", "0.5,0.5") == 1


def test_motionless_stream_exits_with_two(tmp_path):
    assert run(tmp_path, "train-intent", "--trials", "5") == 0
    stream = tmp_path / "still.csv"
    write_stream(stream, SensorStream(np.full((300, 8), 0.05), np.zeros((300, 2)), np.zeros((300, 2))))
    assert run(tmp_path, "assist", "--stream", str(stream)) == 2


def test_train_intent_writes_model_and_metrics(pipeline_dir):
    intent = pipeline_dir / "intent"
    for name in ("pls_model.json", "training.csv", "predictions.csv", "metrics.csv"):
        assert (intent / name).is_file()
    model = json.loads((intent / "pls_model.json").read_text())
    assert model["schema"] == "pls-model"
    assert model["emg_lead_ms"] == 80.0
    assert "holdout" in (intent / "metrics.csv").read_text()


def test_assist_from_generated_trial(pipeline_dir):
    assert run(pipeline_dir, "assist", "--distance", "2") == 0
    record = json.loads((pipeline_dir / "assist" / "assist.json").read_text())
    assert sum(record["weights"]) == pytest.approx(1.0)
    assert record["distance"] == 2.0
    assert len(record["features"]) == 12
    coefficients = (pipeline_dir / "assist" / "coefficients.csv").read_text().splitlines()
    assert coefficients[0] == "k,alpha_1,alpha_2"
    assert len(coefficients) == 41


def test_assist_with_fixed_weights(pipeline_dir):
    assert run(pipeline_dir, "assist", "--weights", "1,0") == 0
    record = json.loads((pipeline_dir / "assist" / "assist.json").read_text())
    assert record["weights"] == [1.0, 0.0]
    assert "goal_estimate" not in record


def test_evaluate_writes_report(pipeline_dir):
    assert run(pipeline_dir, "evaluate", "--trials", "3") == 0
    report = (pipeline_dir / "evaluate" / "report.md").read_text()
    for section in ("## Terminal errors", "## Blended vs dedicated", "## Hit rates", "## Intent estimation"):
        assert section in report
    assert (pipeline_dir / "evaluate" / "shots_2m_fixed_blend.csv").is_file()
    hit_rates = (pipeline_dir / "evaluate" / "hit_rates.csv").read_text().splitlines()
    assert hit_rates[0] == "task,condition,trials,hit_rate,mean_effort"
    assert len(hit_rates) == 1 + 3 * 2 + 1
    comparison = (pipeline_dir / "evaluate" / "comparison.csv").read_text().splitlines()
    assert len(comparison) == 1 + 2 + 2
    assert all(float(line.split(",")[5]) > 0.0 for line in comparison[1:])


def test_rerun_reproduces_artifacts(pipeline_dir, tmp_path):
    assert run(tmp_path, "solve", "--task", "1m") == 0
    assert run(tmp_path, "train-intent", "--trials", "10") == 0
    for relative in ("policies/1m.json", "policies/1m_convergence.csv", "intent/pls_model.json",
                     "intent/predictions.csv"):
        assert (tmp_path / relative).read_bytes() == (pipeline_dir / relative).read_bytes(), relative


def test_unknown_task_exits_with_one(tmp_path):
    assert run(tmp_path, "solve", "--task", "9m") == 1
