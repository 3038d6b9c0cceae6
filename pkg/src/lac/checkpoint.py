"""Checkpoint container shared by every trainable model.

A checkpoint is a torch-serialized dict::

    {"format_version": 1, "kind": str, "config": dict, "state": state_dict,
     "seed": int, "extra": dict}

Serialization goes through an in-memory buffer so the bytes do not depend on
the destination file name, and the payload is rebuilt first (fresh containers,
interned strings, compact tensor copies) so pickle memoization does not depend
on where the objects came from. A resumed run therefore writes the same bytes
as an uninterrupted one.
"""
from __future__ import annotations

import io
import sys
from pathlib import Path
from typing import Any

import torch

FORMAT_VERSION = 1


class CheckpointMismatchError(ValueError):
    pass


def _canonical(obj):
    if torch.is_tensor(obj):
        return obj.detach().clone()
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    return obj


def save_checkpoint(path: str | Path, kind: str, config: dict, state: dict, seed: int,
                    extra: dict | None = None) -> Path:
    payload = _canonical({
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "state": dict(state),
        "seed": int(seed),
        "extra": extra or {},
    })
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, kind: str | None = None,
                    expected_config: dict | None = None) -> dict[str, Any]:
    payload = torch.load(io.BytesIO(Path(path).read_bytes()), weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatchError(f"{path}: unsupported checkpoint format {payload.get('format_version')!r}")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointMismatchError(f"{path}: expected a {kind!r} checkpoint, found {payload['kind']!r}")
    if expected_config is not None:
        diffs = sorted(k for k in set(expected_config) | set(payload["config"])
                       if expected_config.get(k) != payload["config"].get(k))
        if diffs:
            detail = ", ".join(f"{k}: checkpoint={payload['config'].get(k)!r} expected={expected_config.get(k)!r}"
                               for k in diffs)
            raise CheckpointMismatchError(f"{path}: config mismatch ({detail})")
    return payload
