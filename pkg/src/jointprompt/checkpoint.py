"""Canonical, atomically written checkpoints of an optimizer run.

The document holds only deterministic data, so two runs with the same seed
against a pure backend produce byte-identical files. Wall-clock timing goes
to a ``<path>.timing.json`` sidecar.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from pathlib import Path
from typing import Mapping

from . import errors
from .search import OptimizerRunState

SCHEMA_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=1, allow_nan=False) + "\n"


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def checkpoint_document(state: OptimizerRunState, gateway_stats: Mapping | None = None,
                        calls_total: int | None = None) -> dict:
    stats = dict(gateway_stats or {})
    if calls_total is None:
        calls_total = sum(int(s.get("backend_calls", 0)) for s in stats.values())
    return {
        "schema_version": SCHEMA_VERSION,
        "state": state.to_dict(),
        "gateway_stats": stats,
        "budget": {"backend_calls": calls_total},
    }


def checkpoint_save(state: OptimizerRunState, path: str | Path, *, gateway_stats: Mapping | None = None,
                    started_at: float | None = None) -> Path:
    path = Path(path)
    atomic_write(path, canonical_json(checkpoint_document(state, gateway_stats)))
    now = time.time()
    timing = {"saved_at": now}
    if started_at is not None:
        timing["elapsed_s"] = now - started_at
    atomic_write(path.with_name(path.name + ".timing.json"), canonical_json(timing))
    return path


def read_checkpoint(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise errors.CorruptCheckpoint(f"checkpoint {path} does not exist") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise errors.CorruptCheckpoint(f"checkpoint {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise errors.CorruptCheckpoint(f"checkpoint {path} has no schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise errors.SchemaVersionMismatch(
            f"checkpoint {path} has schema_version {doc['schema_version']!r}, expected {SCHEMA_VERSION}"
        )
    return doc


def checkpoint_load(path: str | Path) -> OptimizerRunState:
    doc = read_checkpoint(path)
    try:
        return OptimizerRunState.from_dict(doc["state"])
    except (KeyError, TypeError, ValueError) as exc:
        raise errors.CorruptCheckpoint(f"checkpoint {path} is malformed: {exc!r}") from None
