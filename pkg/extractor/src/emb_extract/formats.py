"""Output file formats.

The embedding format is the consumer's wire contract, restated here so the
two packages share only bytes: ASCII magic "EMB1", then rows and cols as
little-endian uint32, then the matrix as little-endian float32 in row-major
order. Writers go through a temp file and an atomic rename so a crashed run
never leaves a half-written artifact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"EMB1"


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def write_embedding(matrix: np.ndarray, path: str) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"embedding must be a non-empty 2-D matrix, got shape {m.shape}")
    header = MAGIC + struct.pack("<II", m.shape[0], m.shape[1])
    _atomic_write_bytes(path, header + m.tobytes(order="C"))


def manifest_line(
    clip_id: str,
    system_id: str,
    audio_rel: str,
    text_rel: str,
    mi: float | None,
    ta: float | None,
) -> str:
    row: dict = {
        "clip_id": clip_id,
        "system_id": system_id,
        "audio": audio_rel,
        "text": text_rel,
    }
    if mi is not None:
        row["mi"] = mi
    if ta is not None:
        row["ta"] = ta
    return json.dumps(row)
