"""Atomic output writers: every artifact lands via a temp file in its directory and os.replace."""

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np


def write_bytes(path: Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_text(path: Path, text: str) -> Path:
    return write_bytes(path, text.encode("utf-8"))


def dumps_json(data: Any) -> str:
    """Deterministic JSON: sorted keys, two-space indent, trailing newline."""
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return value.as_posix()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(path: Path, data: Any) -> Path:
    return write_text(path, dumps_json(data))


def read_json(path: Path) -> Any:
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def write_jsonl(path: Path, records: Iterable[dict[str, Any]]) -> Path:
    lines = [json.dumps(record, sort_keys=True, default=_json_default) for record in records]
    return write_text(path, "".join(line + "\n" for line in lines))


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(value) for value in row])
    return write_text(path, buffer.getvalue())


def _csv_cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def write_ply(path: Path, points: np.ndarray, track_ids: Sequence[int]) -> Path:
    """ASCII PLY with float x, y, z and an int track_id per vertex."""
    points = np.asarray(points, dtype=np.float64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property int track_id",
        "end_header",
    ]
    for (x, y, z), track in zip(points, track_ids):
        lines.append(f"{x!r} {y!r} {z!r} {int(track)}")
    return write_text(path, "\n".join(lines) + "\n")


def read_ply(path: Path) -> tuple[np.ndarray, list[int]]:
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    body = lines[lines.index("end_header") + 1 :]
    rows = [line.split() for line in body if line.strip()]
    points = np.array([[float(v) for v in row[:3]] for row in rows]).reshape(-1, 3)
    return points, [int(row[3]) for row in rows]
