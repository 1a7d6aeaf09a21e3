"""Ordinal score targets: bin geometry, Gaussian softening, cumulative
targets for the ordinal-sigmoid head, and distribution-to-scalar decoders.

Scores live on a closed [lo, hi] range (MOS units); bins are equal-width.
All functions here are pure and safe for unrestricted concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ScoreBins",
    "SofteningConfig",
    "ScoreRangeError",
    "make_bins",
    "gaussian_soften",
    "hard_label",
    "coral_targets",
    "decode_expected",
    "decode_coral",
]


class ScoreRangeError(ValueError):
    """A score fell outside the configured [lo, hi] range."""


@dataclass(frozen=True)
class ScoreBins:
    """K equal-width bins over [lo, hi] with centers and interior boundaries."""

    K: int
    lo: float
    hi: float
    centers: np.ndarray = field(repr=False)
    boundaries: np.ndarray = field(repr=False)

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.K


@dataclass(frozen=True)
class SofteningConfig:
    """Width of the Gaussian kernel used to soften scalar scores, in MOS units."""

    sigma: float = 0.2

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def make_bins(K: int, lo: float = 1.0, hi: float = 5.0) -> ScoreBins:
    """Build K equal-width bins: centers at lo + (k+0.5)*w, cuts at lo + j*w."""
    if K < 2:
        raise ValueError(f"need at least 2 bins, got {K}")
    if not lo < hi:
        raise ValueError(f"invalid score range [{lo}, {hi}]")
    span = hi - lo
    ks = np.arange(K, dtype=np.float64)
    centers = lo + (ks + 0.5) * span / K
    boundaries = lo + np.arange(1, K, dtype=np.float64) * span / K
    return ScoreBins(K=K, lo=float(lo), hi=float(hi), centers=centers, boundaries=boundaries)


def _check_range(s: float, bins: ScoreBins) -> float:
    s = float(s)
    if not (bins.lo <= s <= bins.hi):
        raise ScoreRangeError(f"score {s} outside [{bins.lo}, {bins.hi}]")
    return s


def gaussian_soften(s: float, bins: ScoreBins, cfg: SofteningConfig) -> np.ndarray:
    """Soft target: normalized Gaussian kernel evaluated at every bin center.

    Probability mass peaks at the center nearest s and decays monotonically
    with center distance; the vector sums to exactly 1 after normalization.
    """
    s = _check_range(s, bins)
    d = s - bins.centers
    expo = -(d * d) / (2.0 * cfg.sigma * cfg.sigma)
    expo -= expo.max()  # keeps exp() well-scaled for tiny sigma
    y = np.exp(expo)
    return y / y.sum()


def hard_label(s: float, bins: ScoreBins) -> int:
    """Index of the bin containing s; boundary values go to the higher bin."""
    s = _check_range(s, bins)
    idx = int(np.searchsorted(bins.boundaries, s, side="right"))
    return min(idx, bins.K - 1)


def coral_targets(s: float, bins: ScoreBins) -> np.ndarray:
    """K-1 binary indicators: levels[j] = 1 iff s exceeds boundary j+1."""
    s = _check_range(s, bins)
    return (s > bins.boundaries).astype(np.float64)


def decode_expected(probs: np.ndarray, bins: ScoreBins, tol: float = 1e-6) -> float:
    """Expectation of the bin centers under a probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (bins.K,):
        raise ValueError(f"expected {bins.K} probabilities, got shape {probs.shape}")
    total = probs.sum()
    if abs(total - 1.0) > tol:
        raise ValueError(f"distribution sums to {total}, not 1")
    return float(probs @ bins.centers)


def decode_coral(cumprobs: np.ndarray, bins: ScoreBins) -> float:
    """Center of the bin indexed by the count of cumulative probs above 0.5."""
    cumprobs = np.asarray(cumprobs, dtype=np.float64)
    if cumprobs.shape != (bins.K - 1,):
        raise ValueError(f"expected {bins.K - 1} cumulative probs, got shape {cumprobs.shape}")
    r = int(np.count_nonzero(cumprobs > 0.5))
    return float(bins.centers[r])
