"""Cache of expensive training artifacts shared by acceptance tests.

Heavy runs (data collection, behavior cloning, fine-tuning) land in a
cache directory keyed by a content hash of their parameters plus a
schema version, so reruns are free and stale artifacts never collide
with current code.  Tests call ensure_* and either find the artifact or
build it inline (slow but correct).
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

__all__ = ["cache_dir", "artifact_path", "have", "mark_done", "params_key", "SCHEMA"]

# bump when any artifact-producing code changes behavior
SCHEMA = 3


def cache_dir() -> Path:
    root = os.environ.get("RESAC_CACHE_DIR")
    if root:
        return Path(root)
    return Path(__file__).resolve().parents[2] / ".cache" / "acceptance"


def params_key(params: dict) -> str:
    blob = json.dumps({"schema": SCHEMA, **params}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def artifact_path(name: str, params: dict) -> Path:
    d = cache_dir() / f"{name}-{params_key(params)}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def have(name: str, params: dict) -> bool:
    return (artifact_path(name, params) / "DONE").exists()


def mark_done(name: str, params: dict, meta: dict | None = None) -> None:
    d = artifact_path(name, params)
    if meta is not None:
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    (d / "DONE").write_text("ok\n")
