"""The extraction loop."""

from __future__ import annotations

import logging
import os

import numpy as np

from . import encoders, formats
from .job import ExtractionJob, JobError

log = logging.getLogger("emb_extract")

MAX_SKIP_FRACTION = 0.05


class ExtractionError(Exception):
    """Raised when too many clips fail to extract."""


def _check_matrix(clip_id: str, kind: str, m: np.ndarray, width_seen: dict) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise encoders.EncoderError(f"{clip_id}: {kind} encoder returned shape {m.shape}")
    if not np.isfinite(m).all():
        raise encoders.EncoderError(f"{clip_id}: {kind} embedding has non-finite values")
    width = m.shape[1]
    prior = width_seen.setdefault(kind, width)
    if width != prior:
        # widths are an encoder property; a drift means the encoder is broken,
        # and skipping would hide that
        raise ExtractionError(
            f"{clip_id}: {kind} width {width} differs from earlier clips ({prior})"
        )
    return m


def extract(job: ExtractionJob) -> str:
    """Run the job; returns the manifest path.

    Per-clip decode or encode failures are logged and skipped. The job as a
    whole fails if more than 5% of clips skip, or if any clip in the table
    has no audio file at all (that is a table error, not a decode error).
    """
    missing = [r.clip_id for r in job.rows if not os.path.isfile(job.audio_path(r.clip_id))]
    if missing:
        raise JobError(f"{len(missing)} clip(s) without audio, first: {missing[0]!r}")

    encode_audio = encoders.get_audio_encoder(job.audio_encoder)
    encode_text = encoders.get_text_encoder(job.text_encoder)
    emb_dir = os.path.join(job.out_dir, "emb")
    width_seen: dict = {}
    lines: list[str] = []
    skipped: list[str] = []

    for row in job.rows:
        try:
            samples = encoders.load_wav_mono(
                job.audio_path(row.clip_id), job.sample_rate, job.max_seconds
            )
            audio = _check_matrix(
                row.clip_id, "audio", encode_audio(samples, job.sample_rate), width_seen
            )
            text = _check_matrix(row.clip_id, "text", encode_text(row.prompt), width_seen)
        except (encoders.DecodeError, encoders.EncoderError) as exc:
            log.warning("skipping clip %r: %s", row.clip_id, exc)
            skipped.append(row.clip_id)
            continue
        audio_rel = os.path.join("emb", f"{row.clip_id}.audio.emb")
        text_rel = os.path.join("emb", f"{row.clip_id}.text.emb")
        formats.write_embedding(audio, os.path.join(job.out_dir, audio_rel))
        formats.write_embedding(text, os.path.join(job.out_dir, text_rel))
        lines.append(
            formats.manifest_line(row.clip_id, row.system_id, audio_rel, text_rel, row.mi, row.ta)
        )

    if len(skipped) > MAX_SKIP_FRACTION * len(job.rows):
        raise ExtractionError(
            f"{len(skipped)}/{len(job.rows)} clips skipped "
            f"(limit {MAX_SKIP_FRACTION:.0%}): {skipped[:5]}"
        )
    assert lines, "all clips skipped yet under the limit; table must be empty"
    os.makedirs(emb_dir, exist_ok=True)
    manifest = os.path.join(job.out_dir, "manifest.jsonl")
    formats.atomic_write_text(manifest, "\n".join(lines) + "\n")
    log.info("wrote %d clips (%d skipped) to %s", len(lines), len(skipped), manifest)
    return manifest
