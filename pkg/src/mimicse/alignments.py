"""Alignment text files: one ``utt_id n_frames id id ...`` record per line."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def format_alignment(utt_id: str, labels) -> str:
    labels = np.asarray(labels, dtype=np.int64)
    return " ".join([utt_id, str(len(labels)), *map(str, labels.tolist())])


def parse_alignment(line: str) -> tuple[str, np.ndarray]:
    parts = line.split()
    if len(parts) < 2:
        raise DataError(f"malformed alignment record: {line[:60]!r}")
    utt_id, n = parts[0], parts[1]
    try:
        n = int(n)
        ids = np.array([int(p) for p in parts[2:]], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{utt_id}: non-integer field in alignment record") from exc
    if len(ids) != n:
        raise DataError(f"{utt_id}: header says {n} frames but record has {len(ids)}", [utt_id])
    return utt_id, ids


def read_alignments(path) -> dict[str, np.ndarray]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            utt_id, ids = parse_alignment(line)
            out[utt_id] = ids
    return out


def write_alignments(path, alignments: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(format_alignment(k, v) + "\n" for k, v in alignments.items()))
    return path
