"""Run-directory files: atomic writes, summary CSV, JSON-lines records, matrices."""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .orchestrator import RoundRecord

CONFIG_FILE = "config.toml"
MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "rounds.jsonl"
SUMMARY_FILE = "summary.csv"
CHECKPOINT_FILE = "model.bin"
PARTITION_FILE = "partition.json"

SUMMARY_HEADER = ("round", "strategy", "accuracy", "lambda_min", "lambda_max", "objective")


def fmt(x: float | None) -> str:
    """17 significant digits so a float survives a text round trip bit-exactly."""
    return "" if x is None else format(float(x), ".17g")


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temporary sibling and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def summary_csv(records: Iterable[RoundRecord]) -> str:
    lines = [",".join(SUMMARY_HEADER)]
    for r in records:
        if r.accuracy is None:
            continue
        lo, hi = r.lambda_range()
        lines.append(",".join([str(r.round), r.strategy, fmt(r.accuracy), fmt(lo), fmt(hi), fmt(r.objective)]))
    return "\n".join(lines) + "\n"


def records_jsonl(records: Iterable[RoundRecord]) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)


def read_records(path: str | Path) -> list[RoundRecord]:
    with open(path) as fh:
        return [RoundRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def matrix_csv(values: np.ndarray, ids: Sequence[int | str]) -> str:
    buf = io.StringIO()
    buf.write("client," + ",".join(str(i) for i in ids) + "\n")
    for i, row in zip(ids, np.asarray(values)):
        buf.write(f"{i}," + ",".join(fmt(v) for v in row) + "\n")
    return buf.getvalue()


def table_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else str(v) if isinstance(v, (int, np.integer)) else fmt(v) for v in row))
    return "\n".join(lines) + "\n"
