"""Embedding/manifest file formats, dataset loading, stratified splitting,
and the synthetic planted-structure generator used as a desk-scale oracle.

Embedding file layout: magic ``EMB1``, then uint32-LE rows and cols, then
rows*cols float32-LE values in row-major order. No padding, no trailer.
Manifest: one JSON object per line with keys clip_id, system_id, audio,
text, mi, ta; paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataError",
    "EmbeddingFormatError",
    "BadMagicError",
    "TruncatedPayloadError",
    "DimensionOverflowError",
    "ManifestError",
    "ClipRecord",
    "Dataset",
    "SyntheticTruth",
    "read_embedding",
    "write_embedding",
    "load_manifest",
    "save_dataset",
    "stratified_split",
    "generate_synthetic",
    "oracle_predictions",
    "atomic_write_bytes",
    "atomic_write_text",
]

_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")
_MAX_ELEMENTS = 1 << 27  # 512 MiB of float32 per matrix is already absurd here


class DataError(Exception):
    """Base class for data-layer failures."""


class EmbeddingFormatError(DataError):
    pass


class BadMagicError(EmbeddingFormatError):
    pass


class TruncatedPayloadError(EmbeddingFormatError):
    pass


class DimensionOverflowError(EmbeddingFormatError):
    pass


class ManifestError(DataError):
    pass


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory plus rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_embedding(matrix: np.ndarray, path: str) -> None:
    m = np.ascontiguousarray(matrix, dtype=np.float32)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"embedding must be a non-empty 2-D matrix, got shape {m.shape}")
    header = _HEADER.pack(_MAGIC, m.shape[0], m.shape[1])
    atomic_write_bytes(path, header + m.tobytes())


def read_embedding(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if rows < 1 or cols < 1 or rows * cols > _MAX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: unreasonable dimensions {rows}x{cols}")
    expected = rows * cols * 4
    payload = raw[_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise EmbeddingFormatError(f"{path}: {len(payload) - expected} trailing bytes")
    flat = np.frombuffer(payload, dtype="<f4", count=rows * cols)
    return flat.reshape(rows, cols).astype(np.float32)


@dataclass
class ClipRecord:
    """One rated clip: identifiers, embedding references, ground-truth scores."""

    clip_id: str
    system_id: str
    audio_path: str | None = None
    text_path: str | None = None
    mi_score: float | None = None
    ta_score: float | None = None
    audio: np.ndarray | None = field(default=None, repr=False)
    text: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Dataset:
    records: list[ClipRecord]
    d_audio: int
    d_text: int
    split: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def systems(self) -> list[str]:
        return sorted({r.system_id for r in self.records})

    def truths(self) -> dict[str, tuple[float, float]]:
        return {r.clip_id: (r.mi_score, r.ta_score) for r in self.records}

    def system_of(self) -> dict[str, str]:
        return {r.clip_id: r.system_id for r in self.records}


def _validate_score(value, clip_id: str, key: str) -> float | None:
    if value is None:
        return None
    score = float(value)
    if not (1.0 <= score <= 5.0):
        raise ManifestError(f"clip {clip_id!r}: {key}={score} outside [1, 5]")
    return score


def load_manifest(path: str, split: str = "") -> Dataset:
    """Parse a manifest, load every referenced embedding, enforce invariants."""
    base = os.path.dirname(os.path.abspath(path))
    records: list[ClipRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            clip_id = obj.get("clip_id")
            system_id = obj.get("system_id")
            if not clip_id or not system_id:
                raise ManifestError(f"{path}:{lineno}: empty clip_id or system_id")
            if clip_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
            seen.add(clip_id)
            audio_path = os.path.join(base, obj["audio"])
            text_path = os.path.join(base, obj["text"])
            for p in (audio_path, text_path):
                if not os.path.isfile(p):
                    raise ManifestError(f"clip {clip_id!r}: missing embedding file {p}")
            records.append(
                ClipRecord(
                    clip_id=clip_id,
                    system_id=system_id,
                    audio_path=audio_path,
                    text_path=text_path,
                    mi_score=_validate_score(obj.get("mi"), clip_id, "mi"),
                    ta_score=_validate_score(obj.get("ta"), clip_id, "ta"),
                )
            )
    if not records:
        raise ManifestError(f"{path}: no records")

    d_audio = d_text = -1
    for r in records:
        try:
            r.audio = read_embedding(r.audio_path)
            r.text = read_embedding(r.text_path)
        except EmbeddingFormatError as exc:
            raise ManifestError(f"clip {r.clip_id!r}: {exc}") from exc
        if d_audio < 0:
            d_audio, d_text = r.audio.shape[1], r.text.shape[1]
        if r.audio.shape[1] != d_audio:
            raise ManifestError(
                f"clip {r.clip_id!r}: audio width {r.audio.shape[1]} != {d_audio}"
            )
        if r.text.shape[1] != d_text:
            raise ManifestError(f"clip {r.clip_id!r}: text width {r.text.shape[1]} != {d_text}")
    return Dataset(records=records, d_audio=d_audio, d_text=d_text, split=split)


def save_dataset(ds: Dataset, out_dir: str, truth: "SyntheticTruth | None" = None) -> str:
    """Write embeddings + manifest (+ sidecar) under out_dir; returns manifest path.

    Manifest paths are relative to out_dir, so the tree is relocatable and
    byte-identical regardless of where it is generated.
    """
    emb_dir = os.path.join(out_dir, "emb")
    os.makedirs(emb_dir, exist_ok=True)
    lines = []
    for r in ds.records:
        audio_rel = os.path.join("emb", f"{r.clip_id}.audio.emb")
        text_rel = os.path.join("emb", f"{r.clip_id}.text.emb")
        write_embedding(r.audio, os.path.join(out_dir, audio_rel))
        write_embedding(r.text, os.path.join(out_dir, text_rel))
        lines.append(
            json.dumps(
                {
                    "clip_id": r.clip_id,
                    "system_id": r.system_id,
                    "audio": audio_rel,
                    "text": text_rel,
                    "mi": r.mi_score,
                    "ta": r.ta_score,
                }
            )
        )
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    atomic_write_text(manifest_path, "\n".join(lines) + "\n")
    if truth is not None:
        atomic_write_text(os.path.join(out_dir, "synthetic_truth.json"), truth.to_json())
    return manifest_path


def stratified_split(ds: Dataset, dev_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Per-system round-robin split on the MI-score ordering.

    Within each system, clips are sorted by (mi_score, clip_id) and every
    round(1/dev_fraction)-th clip goes to dev, starting at a seeded offset
    (wrapping), so every system lands in both splits and the dev score
    distribution tracks the train distribution.
    """
    if not (0.0 < dev_fraction < 0.5):
        raise ValueError(f"dev_fraction must be in (0, 0.5), got {dev_fraction}")
    by_system: dict[str, list[ClipRecord]] = {}
    for r in ds.records:
        if r.mi_score is None:
            raise DataError(f"clip {r.clip_id!r} has no MI score; cannot stratify")
        by_system.setdefault(r.system_id, []).append(r)
    for sys_id, recs in by_system.items():
        if len(recs) < 2:
            raise DataError(f"system {sys_id!r} has {len(recs)} clip(s); need >= 2")

    period = max(2, round(1.0 / dev_fraction))
    rng = np.random.default_rng(seed)
    dev_ids: set[str] = set()
    for sys_id in sorted(by_system):
        recs = sorted(by_system[sys_id], key=lambda r: (r.mi_score, r.clip_id))
        n = len(recs)
        offset = int(rng.integers(period))
        n_dev = math.ceil(n / period)
        for i in range(n_dev):
            dev_ids.add(recs[(offset + i * period) % n].clip_id)

    train = [r for r in ds.records if r.clip_id not in dev_ids]
    dev = [r for r in ds.records if r.clip_id in dev_ids]
    mk = lambda recs, tag: Dataset(records=recs, d_audio=ds.d_audio, d_text=ds.d_text, split=tag)
    return mk(train, "train"), mk(dev, "dev")


@dataclass
class SyntheticTruth:
    """Hidden maps and latents behind a synthetic dataset, for test use only.

    The MI latent is the projection of the audio time-mean onto
    ``quality_dir``; the TA latent is recovered from the bilinear form
    ``ta_offset + ta_scale * mean_audio @ P @ mean_text`` with
    ``P = outer(pattern_dir, text_dir)``.
    """

    quality_dir: np.ndarray
    pattern_dir: np.ndarray
    text_dir: np.ndarray
    ta_scale: float
    ta_offset: float
    system_latents: dict[str, tuple[float, float]]

    def oracle(self, audio: np.ndarray, text: np.ndarray) -> tuple[float, float]:
        m_audio = np.asarray(audio, dtype=np.float64).mean(axis=0)
        m_text = np.asarray(text, dtype=np.float64).mean(axis=0)
        mi = float(self.quality_dir @ m_audio)
        ta = self.ta_offset + self.ta_scale * float(
            (m_audio @ self.pattern_dir) * (self.text_dir @ m_text)
        )
        return mi, ta

    def to_json(self) -> str:
        return json.dumps(
            {
                "quality_dir": self.quality_dir.tolist(),
                "pattern_dir": self.pattern_dir.tolist(),
                "text_dir": self.text_dir.tolist(),
                "ta_scale": self.ta_scale,
                "ta_offset": self.ta_offset,
                "system_latents": {k: list(v) for k, v in self.system_latents.items()},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticTruth":
        obj = json.loads(text)
        return cls(
            quality_dir=np.asarray(obj["quality_dir"], dtype=np.float64),
            pattern_dir=np.asarray(obj["pattern_dir"], dtype=np.float64),
            text_dir=np.asarray(obj["text_dir"], dtype=np.float64),
            ta_scale=float(obj["ta_scale"]),
            ta_offset=float(obj["ta_offset"]),
            system_latents={k: (float(a), float(b)) for k, (a, b) in obj["system_latents"].items()},
        )


# Generator constants: base row noise, audio pattern contrast, latent ranges.
_BASE_SD = 0.5
_LATENT_LO, _LATENT_HI = 1.4, 4.6
_JITTER = 0.3
_TA_SCALE = 2.0
_TA_OFFSET = 3.0
_TEXT_LEN = (5, 15)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_synthetic(
    n_systems: int = 16,
    clips_per_system: int = 24,
    t_range: tuple[int, int] = (20, 60),
    d_audio: int = 32,
    d_text: int = 16,
    noise_sd: float = 0.3,
    seed: int = 0,
) -> tuple[Dataset, SyntheticTruth]:
    """Planted-structure dataset: per-system quality/alignment latents.

    Each clip's audio time-mean projects onto a hidden direction to give the
    MI latent exactly; audio rows additionally carry a +/- pattern along a
    second hidden direction, and the text time-mean's alignment with that
    pattern (a bilinear form with the audio summary) encodes the TA latent
    exactly. Recorded scores are the latents plus clamped Gaussian noise.
    """
    if n_systems < 2 or clips_per_system < 2:
        raise ValueError("need at least 2 systems and 2 clips per system")
    if not (1 <= t_range[0] <= t_range[1]):
        raise ValueError(f"invalid t_range {t_range}")
    if d_audio < 2 or d_text < 1:
        raise ValueError("d_audio must be >= 2 and d_text >= 1")
    rng = np.random.default_rng(seed)

    w_q = _unit(rng.normal(size=d_audio))
    d_p = rng.normal(size=d_audio)
    d_p = _unit(d_p - (d_p @ w_q) * w_q)  # orthogonal to the quality direction
    u_t = _unit(rng.normal(size=d_text))

    records: list[ClipRecord] = []
    latents: dict[str, tuple[float, float]] = {}
    for si in range(n_systems):
        sys_id = f"sys{si:02d}"
        q_sys = float(rng.uniform(_LATENT_LO, _LATENT_HI))
        a_sys = float(rng.uniform(_LATENT_LO, _LATENT_HI))
        latents[sys_id] = (q_sys, a_sys)
        for ci in range(clips_per_system):
            clip_id = f"{sys_id}_clip{ci:03d}"
            lat_q = q_sys + float(rng.uniform(-_JITTER, _JITTER))
            lat_a = a_sys + float(rng.uniform(-_JITTER, _JITTER))

            t_len = int(rng.integers(t_range[0], t_range[1] + 1))
            audio = rng.normal(0.0, _BASE_SD, size=(t_len, d_audio))
            m = audio.mean(axis=0)
            audio -= np.outer(np.ones(t_len), (m @ w_q) * w_q + (m @ d_p) * d_p)
            # balanced 0/2 contrast pattern: time-mean contribution is exactly 1
            half = t_len // 2
            e = np.concatenate([np.ones(t_len - half), -np.ones(half)])
            rng.shuffle(e)
            s_pat = 1.0 + (e - e.mean())
            audio += np.outer(s_pat, d_p)
            audio += np.outer(np.ones(t_len), lat_q * w_q)

            tt_len = int(rng.integers(_TEXT_LEN[0], _TEXT_LEN[1] + 1))
            text = rng.normal(0.0, _BASE_SD, size=(tt_len, d_text))
            mt = text.mean(axis=0)
            text -= np.outer(np.ones(tt_len), (mt @ u_t) * u_t)
            gamma = (lat_a - _TA_OFFSET) / _TA_SCALE
            text += np.outer(np.ones(tt_len), gamma * u_t)

            mi = float(np.clip(lat_q + rng.normal(0.0, noise_sd), 1.0, 5.0))
            ta = float(np.clip(lat_a + rng.normal(0.0, noise_sd), 1.0, 5.0))
            records.append(
                ClipRecord(
                    clip_id=clip_id,
                    system_id=sys_id,
                    mi_score=mi,
                    ta_score=ta,
                    audio=audio.astype(np.float32),
                    text=text.astype(np.float32),
                )
            )

    truth = SyntheticTruth(
        quality_dir=w_q,
        pattern_dir=d_p,
        text_dir=u_t,
        ta_scale=_TA_SCALE,
        ta_offset=_TA_OFFSET,
        system_latents=latents,
    )
    return Dataset(records=records, d_audio=d_audio, d_text=d_text, split="all"), truth


def oracle_predictions(ds: Dataset, truth: SyntheticTruth) -> dict[str, tuple[float, float]]:
    """Closed-form regressor using the hidden maps; the recoverability oracle."""
    return {r.clip_id: truth.oracle(r.audio, r.text) for r in ds.records}
