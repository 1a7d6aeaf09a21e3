"""Training criteria, the Adam optimizer, and the epoch loop.

Three criteria for the classification heads: L1 on the decoded expectation,
hard cross-entropy on the nearest bin, and cross-entropy against
Gaussian-softened targets. The coral variant always trains its cumulative
heads with binary cross-entropy per level. Early stopping watches the dev
system-level mean of the two rank correlations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import labels, metrics, network
from .dataio import ClipRecord, Dataset
from .tensor import GradTape, Tensor, abs_, logsumexp, mean, softmax, softplus

__all__ = [
    "CRITERIA",
    "TrainConfig",
    "Checkpoint",
    "TrainingDivergedError",
    "expected_score",
    "loss_l1",
    "loss_soft_ce",
    "loss_hard_ce",
    "loss_coral",
    "total_loss",
    "AdamState",
    "adam_init",
    "adam_step",
    "train",
]

CRITERIA = ("l1", "ce", "gaussian")


class TrainingDivergedError(RuntimeError):
    """Raised when a batch produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    criterion: str = "gaussian"
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    w_mi: float = 1.0
    w_ta: float = 1.0
    sigma: float = 0.2
    dropout: float = 0.0

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.w_mi < 0 or self.w_ta < 0 or (self.w_mi == 0 and self.w_ta == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")


@dataclass
class Checkpoint:
    config: network.ModelConfig
    params: dict[str, Tensor]
    best_metric: float | None
    epoch: int
    log_lines: list[str] = field(default_factory=list)

    def save(self, path: str) -> None:
        extra = {
            "best_metric": self.best_metric if self.best_metric is not None and math.isfinite(self.best_metric) else None,
            "epoch": self.epoch,
        }
        network.save_checkpoint(path, self.config, self.params, extra)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        cfg, params, extra = network.load_checkpoint(path)
        return cls(
            config=cfg,
            params=params,
            best_metric=extra.get("best_metric"),
            epoch=int(extra.get("epoch", 0)),
        )


def expected_score(logits: Tensor, bins: labels.ScoreBins) -> Tensor:
    """Differentiable decode: softmax distribution dotted with bin centers."""
    return softmax(logits, axis=0) @ Tensor(bins.centers)


def loss_l1(pred_score: Tensor, s: float) -> Tensor:
    return abs_(pred_score - Tensor(np.float64(s)))


def loss_soft_ce(logits: Tensor, target: np.ndarray) -> Tensor:
    """-sum_k y_k log softmax(logits)_k, computed as logsumexp - y . logits."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {logits.data.shape}")
    return logsumexp(logits) - Tensor(t) @ logits


def loss_hard_ce(logits: Tensor, index: int) -> Tensor:
    k = logits.data.shape[0]
    if not (0 <= index < k):
        raise ValueError(f"index {index} out of range for {k} logits")
    onehot = np.zeros(k)
    onehot[index] = 1.0
    return logsumexp(logits) - Tensor(onehot) @ logits


def loss_coral(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over levels of BCE(sigmoid(z_j), t_j), via softplus(z) - t*z."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ValueError(f"coral target arity {t.shape} != logits arity {logits.data.shape}")
    return mean(softplus(logits) - Tensor(t) * logits)


def _head_loss(
    logits: Tensor, s: float, model_cfg: network.ModelConfig, cfg: TrainConfig
) -> Tensor:
    bins = model_cfg.bins()
    if model_cfg.variant == "coral":
        return loss_coral(logits, labels.coral_targets(s, bins))
    if cfg.criterion == "gaussian":
        target = labels.gaussian_soften(s, bins, labels.SofteningConfig(cfg.sigma))
        return loss_soft_ce(logits, target)
    if cfg.criterion == "ce":
        return loss_hard_ce(logits, labels.hard_label(s, bins))
    return loss_l1(expected_score(logits, bins), s)


def total_loss(
    pred: network.Prediction,
    record: ClipRecord,
    model_cfg: network.ModelConfig,
    cfg: TrainConfig,
) -> Tensor:
    """w_mi * L_mi + w_ta * L_ta over the record's two scores."""
    if record.mi_score is None or record.ta_score is None:
        raise ValueError(f"clip {record.clip_id!r} lacks a score; cannot train on it")
    l_mi = _head_loss(pred.mi_logits, record.mi_score, model_cfg, cfg)
    l_ta = _head_loss(pred.ta_logits, record.ta_score, model_cfg, cfg)
    return Tensor(np.float64(cfg.w_mi)) * l_mi + Tensor(np.float64(cfg.w_ta)) * l_ta


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam; replaces each parameter tensor in place in the store."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for k in params:
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        params[k] = Tensor(params[k].data - lr * m_hat / (np.sqrt(v_hat) + eps))


def _dev_rank_metrics(
    model_cfg: network.ModelConfig,
    params: dict[str, Tensor],
    dev: Dataset,
) -> tuple[float | None, float | None]:
    preds_mi: dict[str, float] = {}
    preds_ta: dict[str, float] = {}
    for r in dev.records:
        p = network.forward(model_cfg, params, r.audio, r.text)
        preds_mi[r.clip_id] = p.mi_score
        preds_ta[r.clip_id] = p.ta_score
    sys_of = dev.system_of()
    truth_mi = {r.clip_id: r.mi_score for r in dev.records}
    truth_ta = {r.clip_id: r.ta_score for r in dev.records}
    out = []
    for preds, truths in ((preds_mi, truth_mi), (preds_ta, truth_ta)):
        mp, mt, _ = metrics.system_level(preds, truths, sys_of)
        try:
            out.append(metrics.spearman(mp, mt))
        except metrics.ConstantInputError:
            out.append(None)
    return out[0], out[1]


def _clone(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy()) for k, v in params.items()}


def train(
    model_cfg: network.ModelConfig,
    train_ds: Dataset,
    dev_ds: Dataset,
    cfg: TrainConfig,
) -> Checkpoint:
    """Seeded mini-batch epochs; keeps the params with the best dev
    system-level (SRCC_MI + SRCC_TA)/2 and stops after `patience` epochs
    without improvement. Log lines: epoch, train loss, dev SRCC_MI, dev
    SRCC_TA, tab-separated."""
    if len(train_ds) == 0 or len(dev_ds) == 0:
        raise ValueError("both splits must be non-empty")
    if len(dev_ds.systems()) < 2:
        raise ValueError("dev set must cover at least 2 systems")

    params = network.init_params(model_cfg, cfg.seed)
    state = adam_init(params)
    shuffler = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 0x5EED) if cfg.dropout > 0 else None
    order = np.arange(len(train_ds.records))

    best_params: dict[str, Tensor] | None = None
    best_metric = -math.inf
    best_epoch = 0
    bad_epochs = 0
    log_lines: list[str] = []

    for epoch in range(1, cfg.max_epochs + 1):
        shuffler.shuffle(order)
        epoch_loss = 0.0
        for b_start in range(0, len(order), cfg.batch_size):
            batch = order[b_start : b_start + cfg.batch_size]
            grad_sum: dict[str, np.ndarray] | None = None
            for idx in batch:
                rec = train_ds.records[int(idx)]
                with GradTape() as tape:
                    pred = network.forward(
                        model_cfg,
                        params,
                        rec.audio,
                        rec.text,
                        dropout_rate=cfg.dropout,
                        dropout_rng=drop_rng,
                    )
                    loss = total_loss(pred, rec, model_cfg, cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch starting at "
                        f"{b_start}, clip {rec.clip_id!r}"
                    )
                grads = tape.gradients(loss, params)
                if grad_sum is None:
                    grad_sum = grads
                else:
                    for k in grad_sum:
                        grad_sum[k] += grads[k]
                epoch_loss += value
            scale = 1.0 / len(batch)
            for k in grad_sum:
                grad_sum[k] *= scale
            adam_step(params, grad_sum, state, cfg.lr)
        train_loss = epoch_loss / len(order)

        srcc_mi, srcc_ta = _dev_rank_metrics(model_cfg, params, dev_ds)
        if srcc_mi is None or srcc_ta is None:
            metric = -math.inf
        else:
            metric = 0.5 * (srcc_mi + srcc_ta)
        log_lines.append(
            f"{epoch}\t{train_loss:.6f}\t"
            f"{'nan' if srcc_mi is None else format(srcc_mi, '.6f')}\t"
            f"{'nan' if srcc_ta is None else format(srcc_ta, '.6f')}"
        )

        if best_params is None or metric > best_metric:
            best_params = _clone(params)
            best_metric = metric
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    return Checkpoint(
        config=model_cfg,
        params=best_params,
        best_metric=None if not math.isfinite(best_metric) else best_metric,
        epoch=best_epoch,
        log_lines=log_lines,
    )
