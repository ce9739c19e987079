"""Append-only JSONL metrics stream and its validator."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable

from .errors import ArtifactIOError, DataError

SCHEMA = 1
COMMON_KEYS = ("kind", "schema", "step", "method", "run_id", "config_hash")
TRAIN_KEYS = COMMON_KEYS + (
    "loss", "steer", "pos", "eta", "lambda", "n_clipped_terms", "n_steered_rollouts",
    "n_skipped_correct", "n_skipped_empty_pool", "n_pos_tail_rollouts", "update_applied",
    "grad_norm", "wall_time",
)
EVAL_KEYS = COMMON_KEYS + ("avg_at_k", "answer_format_rate", "marker_rate_per_1k", "k")
VOLATILE = ("wall_time",)


class MetricsWriter:
    """Writes one JSON object per line and flushes after each row."""

    def __init__(self, path: str | Path, run_id: str, config_hash: str, mode: str = "a"):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id
        self.config_hash = config_hash
        self._fh = self.path.open(mode, encoding="utf-8")

    def write(self, row: dict) -> None:
        rec = {**row, "run_id": self.run_id, "config_hash": self.config_hash}
        self._fh.write(json.dumps(rec, allow_nan=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"metrics file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise DataError(f"{path}:{lineno}: expected an object")
        rows.append(rec)
    return rows


def validate_rows(rows: Iterable[dict], where: str = "metrics") -> int:
    """Check required keys, schema version, and step order; returns the row count."""
    n = 0
    last_train = 0
    for i, row in enumerate(rows, 1):
        kind = row.get("kind")
        if kind not in ("train", "eval"):
            raise DataError(f"{where}: row {i} has unknown kind {kind!r}")
        required = TRAIN_KEYS if kind == "train" else EVAL_KEYS
        missing = [k for k in required if k not in row]
        if missing:
            raise DataError(f"{where}: row {i} ({kind}) lacks {missing}")
        if row["schema"] != SCHEMA:
            raise DataError(f"{where}: row {i} has schema {row['schema']}, expected {SCHEMA}")
        if kind == "train":
            if row["step"] != last_train + 1 and row["step"] <= last_train:
                raise DataError(f"{where}: row {i} step {row['step']} does not follow {last_train}")
            last_train = row["step"]
        n += 1
    return n


def round_trip(path: str | Path) -> int:
    """Parse, validate, and re-serialize every row; raises if anything changes."""
    rows = read_metrics(path)
    n = validate_rows(rows, str(path))
    for i, row in enumerate(rows, 1):
        again = json.loads(json.dumps(row, allow_nan=True))
        if not _same(again, row):
            raise DataError(f"{path}: row {i} does not survive a serialization round trip")
    return n


def _same(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


def strip_volatile(row: dict) -> dict:
    return {k: v for k, v in row.items() if k not in VOLATILE}
