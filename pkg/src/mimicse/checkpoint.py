"""Shared checkpoint container and parameter fingerprints.

A checkpoint is a ``torch.save`` dict tagged with a format version and a
payload type (``acoustic_model`` or ``enhancer``). It stores the model config,
the state dict, the fingerprint at save time and free-form metadata such as
training logs. Loading recomputes the fingerprint and rejects a mismatch.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .errors import CheckpointError

FORMAT = "mimicse-checkpoint"
VERSION = 1


def _state_dict(model) -> dict:
    if isinstance(model, dict):
        return model
    inner = getattr(model, "_model", None)  # FrozenModel handle
    return (inner if inner is not None else model).state_dict()


def fingerprint(model) -> str:
    """SHA-256 over every tensor in the state dict, visited in sorted name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(_state_dict(model).items()):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(repr(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save(path, payload_type: str, config: dict, model, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in _state_dict(model).items()}
    torch.save({
        "format": FORMAT,
        "version": VERSION,
        "payload_type": payload_type,
        "config": config,
        "state_dict": state,
        "fingerprint": fingerprint(state),
        "meta": meta or {},
    }, path)
    return path


def load(path, payload_type: str | None = None) -> dict:
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}", [str(path)])
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}", [str(path)]) from exc
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file", [str(path)])
    if blob.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    if payload_type is not None and blob["payload_type"] != payload_type:
        raise CheckpointError(
            f"{path} holds a {blob['payload_type']} payload, expected {payload_type}")
    if fingerprint(blob["state_dict"]) != blob["fingerprint"]:
        raise CheckpointError(f"{path}: parameter fingerprint mismatch (corrupt file)")
    return blob
