"""Self-describing checkpoint files shared by the moire net and the MEGC model."""

from __future__ import annotations

import hashlib
import io
from pathlib import Path
from typing import Any

import torch
from torch import nn

FORMAT = "megc-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def layer_index(state: dict[str, torch.Tensor]) -> dict[str, list[int]]:
    return {k: list(v.shape) for k, v in state.items()}


def save_checkpoint(path: str | Path, kind: str, model: nn.Module, config: dict, **extra: Any) -> str:
    """Write a checkpoint and return the sha256 of its bytes."""
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "layers": layer_index(state),
        "state": state,
        **extra,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # torch raises a zoo of unpickling errors
        raise CheckpointError(f"{path} is not a readable checkpoint: {e}") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"{path} holds a {payload['kind']!r} model, expected {kind!r}")
    return payload


def check_compatible(model: nn.Module, payload: dict) -> None:
    """Raise listing every layer whose name or shape differs from the model."""
    want = layer_index(model.state_dict())
    have = payload["layers"]
    problems = []
    for name in sorted(set(want) | set(have)):
        if name not in have:
            problems.append(f"{name}: missing from checkpoint")
        elif name not in want:
            problems.append(f"{name}: unexpected in checkpoint")
        elif want[name] != have[name]:
            problems.append(f"{name}: checkpoint {have[name]} vs model {want[name]}")
    if problems:
        raise CheckpointError("incompatible checkpoint; mismatched layers:\n  " + "\n  ".join(problems))


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
