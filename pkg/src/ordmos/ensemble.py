"""Two-level stacking: base models emit per-clip bin distributions, a Ridge
meta-model per target is fit on a 60/40 meta split and its regularization
picked on the validation part's system-level rank correlation.

Cumulative-head (coral) outputs are converted to distributions by decoding
the score and re-softening it with the Gaussian kernel, so every base model
contributes a width-K probability block and rows are model-concatenations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import labels, metrics, network

__all__ = [
    "EnsembleError",
    "MissingPredictionError",
    "SingularMatrixError",
    "PartitionError",
    "RidgeModel",
    "StackedModel",
    "prediction_row",
    "assemble_features",
    "ridge_fit",
    "ridge_predict",
    "meta_split",
    "stack",
    "LAMBDA_GRID",
]

LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)


class EnsembleError(Exception):
    pass


class MissingPredictionError(EnsembleError):
    pass


class SingularMatrixError(EnsembleError):
    pass


class PartitionError(EnsembleError):
    pass


def prediction_row(
    clip_id: str, pred: network.Prediction, cfg: network.ModelConfig, sigma: float
) -> dict:
    """Serialize one Prediction to the interchange row used on disk.

    Classification heads carry their softmax distribution; cumulative heads
    carry the per-level probabilities, plus a distribution for the impression
    head obtained by softening its decoded score (what stacking consumes).
    """
    bins = cfg.bins()
    row: dict = {"clip_id": clip_id, "mi": pred.mi_score, "ta": pred.ta_score}
    if cfg.variant == "coral":
        soft_cfg = labels.SofteningConfig(sigma)
        row["mi_dist"] = labels.gaussian_soften(pred.mi_score, bins, soft_cfg).tolist()
        cum = 1.0 / (1.0 + np.exp(-np.clip(pred.ta_logits.data, -60, 60)))
        row["ta_cum"] = cum.tolist()
    else:
        def _dist(logits: np.ndarray) -> list[float]:
            z = logits - logits.max()
            p = np.exp(z)
            return (p / p.sum()).tolist()

        row["mi_dist"] = _dist(pred.mi_logits.data)
        row["ta_dist"] = _dist(pred.ta_logits.data)
    return row


def _feature_block(row: dict, target: str, bins: labels.ScoreBins, sigma: float) -> np.ndarray:
    if target == "mi":
        block = np.asarray(row["mi_dist"], dtype=np.float64)
    elif "ta_cum" in row:
        score = labels.decode_coral(np.asarray(row["ta_cum"], dtype=np.float64), bins)
        block = labels.gaussian_soften(score, bins, labels.SofteningConfig(sigma))
    else:
        block = np.asarray(row["ta_dist"], dtype=np.float64)
    if block.shape != (bins.K,):
        raise EnsembleError(f"feature block has width {block.shape}, expected ({bins.K},)")
    if abs(block.sum() - 1.0) > 1e-6:
        raise EnsembleError(f"feature block sums to {block.sum()}, not 1")
    return block


def assemble_features(
    model_rows: list[dict[str, dict]],
    clip_ids: list[str],
    target: str,
    bins: labels.ScoreBins,
    sigma: float,
) -> np.ndarray:
    """Rows follow clip_ids; each row concatenates the models' K-blocks in
    the supplied model order."""
    if target not in ("mi", "ta"):
        raise ValueError(f"target must be mi or ta, got {target!r}")
    if len(set(clip_ids)) != len(clip_ids):
        raise EnsembleError("duplicate clip ids in requested ordering")
    out = np.empty((len(clip_ids), len(model_rows) * bins.K))
    for j, rows in enumerate(model_rows):
        for i, cid in enumerate(clip_ids):
            if cid not in rows:
                raise MissingPredictionError(f"model {j} has no prediction for clip {cid!r}")
            out[i, j * bins.K : (j + 1) * bins.K] = _feature_block(rows[cid], target, bins, sigma)
    return out


@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray
    intercept: float
    lam: float


def ridge_fit(X: np.ndarray, y: np.ndarray, lam: float) -> RidgeModel:
    """Closed-form ridge with an unpenalized intercept, solved on centered
    data. Rows are first sorted into a canonical order so the accumulated
    normal equations (and hence the fit) are exactly row-permutation
    invariant."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"shape mismatch: X {X.shape}, y {y.shape}")
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least 2 rows")
    if lam < 0:
        raise ValueError("lambda must be >= 0")

    keys = (y,) + tuple(X[:, j] for j in range(d - 1, -1, -1))
    order = np.lexsort(keys)
    Xs, ys = X[order], y[order]

    x_mean = Xs.mean(axis=0)
    y_mean = ys.mean()
    Xc = Xs - x_mean
    yc = ys - y_mean
    normal = Xc.T @ Xc + lam * np.eye(d)
    rhs = Xc.T @ yc
    if lam == 0.0 and np.linalg.matrix_rank(normal) < d:
        raise SingularMatrixError(
            "normal matrix is singular at lambda=0; use a positive lambda"
        )
    try:
        w = np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"{exc}; use a positive lambda") from exc
    if not np.all(np.isfinite(w)):
        raise SingularMatrixError("non-finite coefficients; use a positive lambda")
    return RidgeModel(weights=w, intercept=float(y_mean - x_mean @ w), lam=float(lam))


def ridge_predict(model: RidgeModel, X: np.ndarray) -> np.ndarray:
    raw = np.asarray(X, dtype=np.float64) @ model.weights + model.intercept
    return np.clip(raw, 1.0, 5.0)


def meta_split(
    clip_ids: list[str], system_of: dict[str, str], seed: int
) -> tuple[list[str], list[str]]:
    """Seeded 60/40 split, stratified per system; singleton systems go to the
    training part so fitting sees every system where possible."""
    by_system: dict[str, list[str]] = {}
    for cid in clip_ids:
        if cid not in system_of:
            raise PartitionError(f"clip {cid!r} has no system id")
        by_system.setdefault(system_of[cid], []).append(cid)
    rng = np.random.default_rng(seed)
    train_ids: list[str] = []
    val_ids: list[str] = []
    for sys_id in sorted(by_system):
        cids = sorted(by_system[sys_id])
        rng.shuffle(cids)
        n = len(cids)
        n_train = n if n == 1 else min(n - 1, max(1, round(0.6 * n)))
        train_ids.extend(cids[:n_train])
        val_ids.extend(cids[n_train:])
    return sorted(train_ids), sorted(val_ids)


def _system_srcc(
    clip_ids: list[str],
    preds: np.ndarray,
    truths: dict[str, float],
    system_of: dict[str, str],
) -> float | None:
    pred_map = {cid: float(p) for cid, p in zip(clip_ids, preds)}
    truth_map = {cid: truths[cid] for cid in clip_ids}
    mp, mt, _ = metrics.system_level(pred_map, truth_map, system_of)
    try:
        return metrics.spearman(mp, mt)
    except metrics.ConstantInputError:
        return None


@dataclass
class StackedModel:
    mi: RidgeModel
    ta: RidgeModel
    n_models: int
    K: int
    lo: float
    hi: float
    sigma: float
    report: dict

    def to_json_dict(self) -> dict:
        def enc(m: RidgeModel) -> dict:
            return {"lambda": m.lam, "weights": m.weights.tolist(), "intercept": m.intercept}

        return {
            "n_models": self.n_models,
            "K": self.K,
            "lo": self.lo,
            "hi": self.hi,
            "sigma": self.sigma,
            "mi": enc(self.mi),
            "ta": enc(self.ta),
            "report": self.report,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "StackedModel":
        def dec(d: dict) -> RidgeModel:
            return RidgeModel(
                weights=np.asarray(d["weights"], dtype=np.float64),
                intercept=float(d["intercept"]),
                lam=float(d["lambda"]),
            )

        return cls(
            mi=dec(obj["mi"]),
            ta=dec(obj["ta"]),
            n_models=int(obj["n_models"]),
            K=int(obj["K"]),
            lo=float(obj["lo"]),
            hi=float(obj["hi"]),
            sigma=float(obj["sigma"]),
            report=obj.get("report", {}),
        )

    def bins(self) -> labels.ScoreBins:
        return labels.make_bins(self.K, self.lo, self.hi)

    def predict(self, model_rows: list[dict[str, dict]], clip_ids: list[str]) -> dict[str, tuple[float, float]]:
        if len(model_rows) != self.n_models:
            raise EnsembleError(
                f"stacked model expects {self.n_models} base models, got {len(model_rows)}"
            )
        bins = self.bins()
        x_mi = assemble_features(model_rows, clip_ids, "mi", bins, self.sigma)
        x_ta = assemble_features(model_rows, clip_ids, "ta", bins, self.sigma)
        p_mi = ridge_predict(self.mi, x_mi)
        p_ta = ridge_predict(self.ta, x_ta)
        return {cid: (float(a), float(b)) for cid, a, b in zip(clip_ids, p_mi, p_ta)}


def stack(
    model_rows: list[dict[str, dict]],
    truths: dict[str, tuple[float, float]],
    system_of: dict[str, str],
    seed: int,
    bins: labels.ScoreBins,
    sigma: float = 0.2,
    lambda_grid: tuple[float, ...] = LAMBDA_GRID,
) -> StackedModel:
    """Fit both targets' meta-models: features assembled over the canonical
    (sorted) clip order, lambda picked per target by meta-validation
    system-level SRCC, then refit on the union at the chosen lambda."""
    clip_ids = sorted(truths)
    train_ids, val_ids = meta_split(clip_ids, system_of, seed)
    for name, part in (("meta-train", train_ids), ("meta-validation", val_ids)):
        if len({system_of[c] for c in part}) < 2:
            raise PartitionError(f"{name} partition covers fewer than 2 systems")

    pos = {cid: i for i, cid in enumerate(clip_ids)}
    tr_idx = np.array([pos[c] for c in train_ids])
    va_idx = np.array([pos[c] for c in val_ids])

    fitted: dict[str, RidgeModel] = {}
    report: dict = {
        "n_meta_train": len(train_ids),
        "n_meta_val": len(val_ids),
        "lambda_grid": list(lambda_grid),
    }
    for t_i, target in enumerate(("mi", "ta")):
        X = assemble_features(model_rows, clip_ids, target, bins, sigma)
        y = np.array([truths[c][t_i] for c in clip_ids])
        truth_map = {c: truths[c][t_i] for c in clip_ids}

        best_lam = None
        best_srcc = -math.inf
        best_train_srcc = None
        for lam in lambda_grid:
            model = ridge_fit(X[tr_idx], y[tr_idx], lam)
            srcc = _system_srcc(val_ids, ridge_predict(model, X[va_idx]), truth_map, system_of)
            if srcc is not None and srcc > best_srcc:
                best_srcc = srcc
                best_lam = lam
                best_train_srcc = _system_srcc(
                    train_ids, ridge_predict(model, X[tr_idx]), truth_map, system_of
                )
        if best_lam is None:
            raise EnsembleError(f"no lambda produced a usable {target} meta-model")
        fitted[target] = ridge_fit(X, y, best_lam)
        report[target] = {
            "lambda": best_lam,
            "meta_val_srcc": best_srcc,
            "meta_train_srcc": best_train_srcc,
        }

    return StackedModel(
        mi=fitted["mi"],
        ta=fitted["ta"],
        n_models=len(model_rows),
        K=bins.K,
        lo=bins.lo,
        hi=bins.hi,
        sigma=sigma,
        report=report,
    )
