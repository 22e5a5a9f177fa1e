"""
Artifact reading and writing

All writers go through a temp file in the destination directory followed by
os.replace, so a reader never observes a partially written artifact.
Numbers in CSV and report JSON are rendered with 9 significant digits.
"""
import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from src.core.errors import ArtifactError
from src.utils.logger_config import get_logger

PathLike = Union[str, os.PathLike]

SIGNIFICANT_DIGITS = 9


def format_number(value: Any) -> str:
    """Render a CSV cell; floats get 9 significant digits, None an empty cell"""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.{SIGNIFICANT_DIGITS}g}"
    return str(value)


def _round_floats(data: Any) -> Any:
    if isinstance(data, dict):
        return {key: _round_floats(value) for key, value in data.items()}
    if isinstance(data, (list, tuple)):
        return [_round_floats(value) for value in data]
    if isinstance(data, np.ndarray):
        return _round_floats(data.tolist())
    if isinstance(data, (bool, np.bool_)):
        return bool(data)
    if isinstance(data, (int, np.integer)):
        return int(data)
    if isinstance(data, (float, np.floating)):
        value = float(data)
        return float(f"{value:.{SIGNIFICANT_DIGITS}g}") if math.isfinite(value) else value
    return data


def write_text_atomic(path: PathLike, text: str) -> Path:
    """Write text to path via a sibling temp file and os.replace"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(temp_path, target)
    except Exception:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
    get_logger(__name__).debug(f"Wrote {target}")
    return target


def write_csv_atomic(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_number(cell) for cell in row])
    return write_text_atomic(path, buffer.getvalue())


def write_json_atomic(path: PathLike, data: Dict[str, Any], exact: bool = False) -> Path:
    """
    Write a JSON document.

    Args:
        path: Destination file
        data: JSON-serializable mapping (numpy scalars and arrays allowed)
        exact: Keep full float precision so arrays round-trip bit for bit;
            otherwise floats are rounded to 9 significant digits
    """
    payload = data if exact else _round_floats(data)
    text = json.dumps(payload, indent=2, sort_keys=False) + "\n"
    return write_text_atomic(path, text)


def read_json(path: PathLike) -> Dict[str, Any]:
    source = Path(path)
    if not source.is_file():
        raise ArtifactError(f"Artifact not found: {source}")
    try:
        with open(source, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ArtifactError(f"Artifact {source} is not valid JSON: {e}") from e


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    source = Path(path)
    if not source.is_file():
        raise ArtifactError(f"Artifact not found: {source}")
    with open(source, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ArtifactError(f"Artifact {source} is empty")
        rows = [row for row in reader if row]
    return header, rows
