"""Built-in deterministic encoders plus optional pretrained wrappers.

The built-ins exist so the pipeline runs end to end with no model downloads:
a log-mel spectrogram for audio and a hashed character n-gram embedding per
token for text. Both are pure functions of their input bytes, which is what
makes re-extraction bit-identical. Names prefixed "hf:" resolve to
huggingface checkpoints and import torch lazily; their widths are checkpoint
properties.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly


class DecodeError(Exception):
    """Audio that cannot be turned into samples."""


class EncoderError(Exception):
    """Encoder could not be built or applied (bad name, missing checkpoint)."""


# ----------------------------------------------------------------- audio io

_INT_SCALE = {
    np.dtype(np.int16): 32768.0,
    np.dtype(np.int32): 2147483648.0,
}


def load_wav_mono(path: str, target_sr: int, max_seconds: float) -> np.ndarray:
    """Decode, downmix, resample, and cap a WAV file; returns float64 samples."""
    try:
        sr, data = wavfile.read(path)
    except Exception as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    if data.size == 0:
        raise DecodeError(f"{path}: no samples")
    x = data.astype(np.float64)
    if data.dtype in _INT_SCALE:
        x /= _INT_SCALE[data.dtype]
    elif data.dtype == np.uint8:
        x = (x - 128.0) / 128.0
    if x.ndim == 2:
        x = x.mean(axis=1)
    if sr != target_sr:
        g = math.gcd(int(sr), int(target_sr))
        x = resample_poly(x, target_sr // g, sr // g)
    cap = int(round(target_sr * max_seconds))
    return x[:cap]


# ----------------------------------------------------------------- melspec

_N_FFT = 1024
_HOP = 512
_N_MELS = 64
_FMIN = 20.0


def _mel_filterbank(sr: int, n_fft: int, n_mels: int) -> np.ndarray:
    def to_mel(hz):
        return 2595.0 * np.log10(1.0 + hz / 700.0)

    def to_hz(mel):
        return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)

    mel_pts = np.linspace(to_mel(_FMIN), to_mel(sr / 2.0), n_mels + 2)
    hz_pts = to_hz(mel_pts)
    bin_idx = np.floor((n_fft + 1) * hz_pts / sr).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        lo, mid, hi = bin_idx[m - 1], bin_idx[m], bin_idx[m + 1]
        for k in range(lo, mid):
            if mid > lo:
                fb[m - 1, k] = (k - lo) / (mid - lo)
        for k in range(mid, hi):
            if hi > mid:
                fb[m - 1, k] = (hi - k) / (hi - mid)
    return fb


def melspec_encode(samples: np.ndarray, sr: int) -> np.ndarray:
    """Log-mel power frames, one row per hop; at least one row always."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < _N_FFT:
        x = np.pad(x, (0, _N_FFT - x.size))
    n_frames = 1 + (x.size - _N_FFT) // _HOP
    window = np.hanning(_N_FFT)
    fb = _mel_filterbank(sr, _N_FFT, _N_MELS)
    rows = np.empty((n_frames, _N_MELS))
    for t in range(n_frames):
        frame = x[t * _HOP : t * _HOP + _N_FFT] * window
        power = np.abs(np.fft.rfft(frame)) ** 2
        rows[t] = np.log(fb @ power + 1e-10)
    return rows


# ----------------------------------------------------------------- chargram

_CHARGRAM_DIM = 32


def _token_vector(token: str, dim: int) -> np.ndarray:
    v = np.zeros(dim)
    padded = f"^{token}$"
    for n in (1, 2, 3):
        for i in range(len(padded) - n + 1):
            digest = hashlib.blake2b(padded[i : i + n].encode("utf-8"), digest_size=8).digest()
            idx = int.from_bytes(digest[:4], "little") % dim
            sign = 1.0 if digest[4] & 1 else -1.0
            v[idx] += sign
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def chargram_encode(prompt: str) -> np.ndarray:
    """One hashed n-gram row per whitespace token; a zero row for empty text."""
    tokens = prompt.split()
    if not tokens:
        return np.zeros((1, _CHARGRAM_DIM))
    return np.stack([_token_vector(t, _CHARGRAM_DIM) for t in tokens])


# ----------------------------------------------------------------- hf wrappers


def _hf_pair(checkpoint: str, front_cls_name: str):
    """Load (front end, model) once, on first use; front end is a processor
    for audio checkpoints and a tokenizer for text ones."""
    try:
        import transformers
    except ImportError as exc:
        raise EncoderError(f"hf:{checkpoint} needs torch and transformers: {exc}") from exc
    try:
        front = getattr(transformers, front_cls_name).from_pretrained(checkpoint)
        model = transformers.AutoModel.from_pretrained(checkpoint).eval()
    except Exception as exc:
        raise EncoderError(f"cannot load checkpoint {checkpoint!r}: {exc}") from exc
    return front, model


def _hf_audio_encoder(checkpoint: str):
    state: dict = {}

    def encode(samples: np.ndarray, sr: int) -> np.ndarray:
        import torch

        if not state:
            state["front"], state["model"] = _hf_pair(checkpoint, "AutoProcessor")
        with torch.no_grad():
            inputs = state["front"](
                np.asarray(samples, dtype=np.float32), sampling_rate=sr, return_tensors="pt"
            )
            out = state["model"](**inputs)
        return out.last_hidden_state.squeeze(0).numpy()

    return encode


def _hf_text_encoder(checkpoint: str):
    state: dict = {}

    def encode(prompt: str) -> np.ndarray:
        import torch

        if not state:
            state["front"], state["model"] = _hf_pair(checkpoint, "AutoTokenizer")
        with torch.no_grad():
            inputs = state["front"](prompt, return_tensors="pt")
            out = state["model"](**inputs)
        return out.last_hidden_state.squeeze(0).numpy()

    return encode


# ----------------------------------------------------------------- registry


def get_audio_encoder(name: str):
    """Returns encode(samples, sr) -> 2-D array for the named encoder."""
    if name == "melspec":
        return melspec_encode
    if name.startswith("hf:"):
        return _hf_audio_encoder(name[3:])
    raise EncoderError(f"unknown audio encoder {name!r}")


def get_text_encoder(name: str):
    """Returns encode(prompt) -> 2-D array for the named encoder."""
    if name == "chargram":
        return chargram_encode
    if name.startswith("hf:"):
        return _hf_text_encoder(name[3:])
    raise EncoderError(f"unknown text encoder {name!r}")
