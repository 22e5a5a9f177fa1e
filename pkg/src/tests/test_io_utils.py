"""
Tests for atomic artifact writers and readers
"""
import json

import numpy as np
import pytest

from src.core.errors import ArtifactError
from src.utils.io_utils import format_number, read_csv, read_json, write_csv_atomic, write_json_atomic


def test_numbers_use_nine_significant_digits():
    assert format_number(1.0 / 3.0) == "0.333333333"
    assert format_number(np.float64(12345.6789012)) == "12345.6789"
    assert format_number(np.int64(7)) == "7"
    assert format_number(True) == "1"
    assert format_number(None) == ""
    assert format_number("2m") == "2m"


def test_csv_round_trip_leaves_no_temp_files(tmp_path):
    path = tmp_path / "nested" / "table.csv"
    write_csv_atomic(path, ["a", "b"], [[1, 0.5], [2, None]])
    assert read_csv(path) == (["a", "b"], [["1", "0.5"], ["2", ""]])
    assert [p.name for p in path.parent.iterdir()] == ["table.csv"]


def test_json_rounds_unless_exact(tmp_path):
    value = 0.1 + 0.2
    write_json_atomic(tmp_path / "rounded.json", {"x": value, "v": np.array([value])})
    write_json_atomic(tmp_path / "exact.json", {"x": value}, exact=True)
    assert read_json(tmp_path / "rounded.json") == {"x": 0.3, "v": [0.3]}
    assert json.loads((tmp_path / "exact.json").read_text())["x"] == value


def test_missing_artifacts_raise(tmp_path):
    with pytest.raises(ArtifactError):
        read_json(tmp_path / "absent.json")
    with pytest.raises(ArtifactError):
        read_csv(tmp_path / "absent.csv")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ArtifactError):
        read_json(tmp_path / "bad.json")
