"""Job configuration and the prompt table.

A job is a small JSON file; every path inside it is resolved relative to
the file's own directory so jobs can be checked in next to their data. The
prompt table is CSV with columns clip_id, system_id, prompt and optional
mi, ta score columns; audio is expected at <audio_dir>/<clip_id>.wav.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field


class JobError(Exception):
    """Invalid job file or prompt table."""


@dataclass(frozen=True)
class PromptRow:
    clip_id: str
    system_id: str
    prompt: str
    mi: float | None = None
    ta: float | None = None


@dataclass(frozen=True)
class ExtractionJob:
    audio_dir: str
    prompt_table: str
    out_dir: str
    audio_encoder: str = "melspec"
    text_encoder: str = "chargram"
    sample_rate: int = 24000
    max_seconds: float = 30.0
    rows: tuple[PromptRow, ...] = field(default=(), repr=False)

    def audio_path(self, clip_id: str) -> str:
        return os.path.join(self.audio_dir, f"{clip_id}.wav")


def _parse_score(raw: str | None, clip_id: str, column: str) -> float | None:
    if raw is None or raw.strip() == "":
        return None
    try:
        value = float(raw)
    except ValueError as exc:
        raise JobError(f"clip {clip_id!r}: {column}={raw!r} is not a number") from exc
    if not (1.0 <= value <= 5.0):
        raise JobError(f"clip {clip_id!r}: {column}={value} outside [1, 5]")
    return value


def read_prompt_table(path: str) -> tuple[PromptRow, ...]:
    rows: list[PromptRow] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        header = set(reader.fieldnames or ())
        missing = {"clip_id", "system_id", "prompt"} - header
        if missing:
            raise JobError(f"{path}: missing columns {sorted(missing)}")
        for lineno, raw in enumerate(reader, start=2):
            clip_id = (raw["clip_id"] or "").strip()
            system_id = (raw["system_id"] or "").strip()
            if not clip_id or not system_id:
                raise JobError(f"{path}:{lineno}: empty clip_id or system_id")
            if clip_id in seen:
                raise JobError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
            seen.add(clip_id)
            rows.append(
                PromptRow(
                    clip_id=clip_id,
                    system_id=system_id,
                    prompt=raw["prompt"] or "",
                    mi=_parse_score(raw.get("mi"), clip_id, "mi"),
                    ta=_parse_score(raw.get("ta"), clip_id, "ta"),
                )
            )
    if not rows:
        raise JobError(f"{path}: no rows")
    return tuple(rows)


def load_job(path: str) -> ExtractionJob:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise JobError(f"{path}: invalid JSON: {exc}") from exc
    for key in ("audio_dir", "prompt_table", "out_dir"):
        if key not in raw:
            raise JobError(f"{path}: missing field {key!r}")
    base = os.path.dirname(os.path.abspath(path))
    resolve = lambda p: p if os.path.isabs(p) else os.path.join(base, p)
    sample_rate = int(raw.get("sample_rate", 24000))
    max_seconds = float(raw.get("max_seconds", 30.0))
    if sample_rate <= 0 or max_seconds <= 0:
        raise JobError(f"{path}: sample_rate and max_seconds must be positive")
    table = resolve(raw["prompt_table"])
    return ExtractionJob(
        audio_dir=resolve(raw["audio_dir"]),
        prompt_table=table,
        out_dir=resolve(raw["out_dir"]),
        audio_encoder=raw.get("audio_encoder", "melspec"),
        text_encoder=raw.get("text_encoder", "chargram"),
        sample_rate=sample_rate,
        max_seconds=max_seconds,
        rows=read_prompt_table(table),
    )
