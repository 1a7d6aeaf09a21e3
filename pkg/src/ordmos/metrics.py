"""Rank-correlation and error metrics at utterance and system level.

Ties get fractional (average) ranks for Spearman and the tau-b correction
for Kendall. Degenerate constant inputs raise instead of silently scoring
0, since a silent zero would corrupt model selection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ConstantInputError",
    "EvalReport",
    "fractional_ranks",
    "pearson",
    "spearman",
    "kendall_tau_b",
    "system_level",
    "evaluate",
]


class ConstantInputError(ValueError):
    """Correlation is undefined because one input has no variation."""


def _as_vec(x: Sequence[float], name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError(f"{name} must be a 1-D sequence of length >= 2")
    return v


def fractional_ranks(x: Sequence[float]) -> np.ndarray:
    """Average ranks (1-based); tied values share the mean of their positions."""
    v = np.asarray(x, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    xv, yv = _as_vec(x, "x"), _as_vec(y, "y")
    if xv.size != yv.size:
        raise ValueError("length mismatch")
    xc = xv - xv.mean()
    yc = yv - yv.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        raise ConstantInputError("correlation undefined for constant input")
    return float(xc @ yc) / np.sqrt(vx * vy)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of fractional ranks."""
    xv, yv = _as_vec(x, "x"), _as_vec(y, "y")
    if xv.size != yv.size:
        raise ValueError("length mismatch")
    return pearson(fractional_ranks(xv), fractional_ranks(yv))


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall's tau with tie correction: (C - D) / sqrt((n0-Tx)(n0-Ty))."""
    xv, yv = _as_vec(x, "x"), _as_vec(y, "y")
    if xv.size != yv.size:
        raise ValueError("length mismatch")
    n = xv.size
    dx = np.sign(xv[:, None] - xv[None, :])
    dy = np.sign(yv[:, None] - yv[None, :])
    iu = np.triu_indices(n, k=1)
    prod = dx[iu] * dy[iu]
    concordant = int(np.count_nonzero(prod > 0))
    discordant = int(np.count_nonzero(prod < 0))
    n0 = n * (n - 1) // 2
    tx = int(np.count_nonzero(dx[iu] == 0))
    ty = int(np.count_nonzero(dy[iu] == 0))
    if n0 == tx or n0 == ty:
        raise ConstantInputError("correlation undefined for constant input")
    return (concordant - discordant) / np.sqrt(float(n0 - tx) * float(n0 - ty))


def system_level(
    preds: Mapping[str, float],
    truths: Mapping[str, float],
    system_of: Mapping[str, str],
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Per-system mean predicted and true scores, ordered by system id.

    Every clip in ``preds``/``truths`` must be mapped to a system.
    """
    if set(preds) != set(truths):
        raise ValueError("prediction/truth clip sets differ")
    groups: dict[str, list[str]] = {}
    for clip_id in preds:
        sys_id = system_of.get(clip_id)
        if sys_id is None:
            raise ValueError(f"clip {clip_id!r} has no system mapping")
        groups.setdefault(sys_id, []).append(clip_id)
    if len(groups) < 2:
        raise ValueError("need at least 2 systems for system-level metrics")
    systems = sorted(groups)
    mean_pred = np.array([np.mean([preds[c] for c in groups[s]]) for s in systems])
    mean_true = np.array([np.mean([truths[c] for c in groups[s]]) for s in systems])
    return mean_pred, mean_true, systems


@dataclass(frozen=True)
class EvalReport:
    """The 16 challenge cells: 2 targets x 2 levels x 4 metrics.

    Cells are None where the metric is undefined (constant input).
    """

    cells: dict[str, float | None]

    _LEVELS = ("utt", "sys")
    _METRICS = ("srcc", "ktau", "mse", "lcc")
    _TARGETS = ("mi", "ta")

    @staticmethod
    def key(level: str, metric: str, target: str) -> str:
        return f"{level}_{metric}_{target}"

    def to_json_dict(self) -> dict[str, float | None]:
        return {
            self.key(lv, m, t): self.cells[self.key(lv, m, t)]
            for t in self._TARGETS
            for lv in self._LEVELS
            for m in self._METRICS
        }


def _metric_row(pred: np.ndarray, true: np.ndarray) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for name, fn in (("srcc", spearman), ("ktau", kendall_tau_b), ("lcc", pearson)):
        try:
            out[name] = float(fn(pred, true))
        except ConstantInputError:
            out[name] = None
    out["mse"] = float(np.mean((pred - true) ** 2))
    return out


def evaluate(predictions: Mapping[str, tuple[float, float]], records) -> EvalReport:
    """Fill all 16 cells from per-clip (mi, ta) predictions and rated records.

    ``records`` is an iterable with ``clip_id``, ``system_id``, ``mi_score``
    and ``ta_score`` attributes; every record must be predicted and rated.
    """
    recs = list(records)
    if not recs:
        raise ValueError("no records to evaluate")
    system_of = {}
    truth_mi, truth_ta, pred_mi, pred_ta = {}, {}, {}, {}
    for r in recs:
        if r.clip_id not in predictions:
            raise ValueError(f"missing prediction for clip {r.clip_id!r}")
        if r.mi_score is None or r.ta_score is None:
            raise ValueError(f"clip {r.clip_id!r} has no ground-truth scores")
        p_mi, p_ta = predictions[r.clip_id]
        system_of[r.clip_id] = r.system_id
        truth_mi[r.clip_id] = float(r.mi_score)
        truth_ta[r.clip_id] = float(r.ta_score)
        pred_mi[r.clip_id] = float(p_mi)
        pred_ta[r.clip_id] = float(p_ta)

    cells: dict[str, float | None] = {}
    for target, preds, truths in (("mi", pred_mi, truth_mi), ("ta", pred_ta, truth_ta)):
        clip_ids = sorted(preds)
        up = np.array([preds[c] for c in clip_ids])
        ut = np.array([truths[c] for c in clip_ids])
        for metric, val in _metric_row(up, ut).items():
            cells[EvalReport.key("utt", metric, target)] = val
        sp, st, _ = system_level(preds, truths, system_of)
        for metric, val in _metric_row(sp, st).items():
            cells[EvalReport.key("sys", metric, target)] = val
    return EvalReport(cells=cells)
