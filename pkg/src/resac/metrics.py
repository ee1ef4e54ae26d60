"""Append-only JSON-lines metrics streams.

Rows are step-indexed dicts serialized with sorted keys and no whitespace, so
a rerun with the same config and seed reproduces the file byte for byte.  No
wall-clock fields for the same reason.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

__all__ = ["MetricsError", "MetricsWriter", "read_metrics", "last_step",
           "truncate_after"]


class MetricsError(RuntimeError):
    pass


def _scalar(v):
    if isinstance(v, bool) or isinstance(v, (str, int)):
        return v
    f = float(v)
    # json null instead of bare NaN keeps the stream parseable everywhere
    return f if math.isfinite(f) else None


class MetricsWriter:
    """One JSONL stream with strictly increasing steps.

    Fields logged for a step already pending are merged into that row; the
    row is written once a later step arrives, so an evaluation landing on an
    episode boundary still produces a single line.
    """

    def __init__(self, path, resume: bool = False):
        self.path = Path(path)
        self._floor = last_step(self.path) if resume and self.path.exists() else None
        self._f = open(self.path, "a" if resume else "w")
        self._step: int | None = None
        self._row: dict = {}

    def log(self, step: int, **fields) -> None:
        step = int(step)
        if self._step is not None and step < self._step:
            raise MetricsError(f"step {step} after {self._step}")
        if self._floor is not None and step <= self._floor:
            raise MetricsError(f"step {step} not beyond resumed stream ({self._floor})")
        if self._step is not None and step > self._step:
            self._write_pending()
        self._step = step
        for k, v in fields.items():
            self._row[k] = _scalar(v)

    def _write_pending(self) -> None:
        if self._step is None:
            return
        row = {"step": self._step, **self._row}
        self._f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
        self._f.flush()
        self._step = None
        self._row = {}

    def close(self) -> None:
        self._write_pending()
        self._f.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def last_step(path) -> int | None:
    p = Path(path)
    if not p.exists():
        return None
    steps = [r["step"] for r in read_metrics(p)]
    return max(steps) if steps else None


def truncate_after(path, step: int) -> int:
    """Drop rows beyond step (resume rewinds the stream to its checkpoint)."""
    rows = [r for r in read_metrics(path) if r["step"] <= step]
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")
    return len(rows)
