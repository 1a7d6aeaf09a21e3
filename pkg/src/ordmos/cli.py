"""Command-line surface for batch experiments.

Subcommands cover the whole pipeline: synthesize a dataset, split it, train
a model, predict, evaluate, stack predictions into an ensemble, and run the
criterion/architecture ablation grid. Every artifact is written atomically
and all randomness flows from the --seed flag, so re-runs with identical
flags produce byte-identical outputs.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio, ensemble, labels, metrics, network, training
from .tensor import NonFiniteError

_EXIT_USAGE = 2
_EXIT_DATA = 3
_EXIT_NUMERIC = 4


def _cmd_gen_synth(args) -> int:
    ds, truth = dataio.generate_synthetic(
        n_systems=args.systems,
        clips_per_system=args.clips,
        t_range=(args.t_min, args.t_max),
        d_audio=args.d_audio,
        d_text=args.d_text,
        noise_sd=args.noise_sd,
        seed=args.seed,
    )
    manifest = dataio.save_dataset(ds, args.out_dir, truth=truth)
    print(f"wrote {len(ds)} clips across {args.systems} systems to {manifest}")
    return 0


def _relative_manifest_lines(records, out_path: str) -> str:
    out_dir = os.path.dirname(os.path.abspath(out_path))
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {
                    "clip_id": r.clip_id,
                    "system_id": r.system_id,
                    "audio": os.path.relpath(r.audio_path, out_dir),
                    "text": os.path.relpath(r.text_path, out_dir),
                    "mi": r.mi_score,
                    "ta": r.ta_score,
                }
            )
        )
    return "\n".join(lines) + "\n"


def _cmd_split(args) -> int:
    ds = dataio.load_manifest(args.manifest)
    train_ds, dev_ds = dataio.stratified_split(ds, args.dev_fraction, args.seed)
    train_path, dev_path = args.out
    dataio.atomic_write_text(train_path, _relative_manifest_lines(train_ds.records, train_path))
    dataio.atomic_write_text(dev_path, _relative_manifest_lines(dev_ds.records, dev_path))
    print(f"train: {len(train_ds)} clips -> {train_path}")
    print(f"dev:   {len(dev_ds)} clips -> {dev_path}")
    return 0


def _model_config_from_args(args, d_audio: int, d_text: int) -> network.ModelConfig:
    return network.ModelConfig(
        d_audio=d_audio,
        d_text=d_text,
        variant=args.variant,
        temporal=args.temporal,
        pooling=args.pooling,
        d_common=args.d_common,
        n_heads=args.n_heads,
        d_hidden=args.d_hidden,
        d_bilstm=args.d_bilstm,
        K=args.k_bins,
    )


def _train_config_from_args(args) -> training.TrainConfig:
    return training.TrainConfig(
        criterion=args.criterion,
        lr=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=args.seed,
        w_mi=args.w_mi,
        w_ta=args.w_ta,
        sigma=args.sigma,
        dropout=args.dropout,
    )


def _cmd_train(args) -> int:
    train_ds = dataio.load_manifest(args.train, split="train")
    dev_ds = dataio.load_manifest(args.dev, split="dev")
    model_cfg = _model_config_from_args(args, train_ds.d_audio, train_ds.d_text)
    ckpt = training.train(model_cfg, train_ds, dev_ds, _train_config_from_args(args))
    ckpt.save(args.out)
    dataio.atomic_write_text(args.out + ".log", "\n".join(ckpt.log_lines) + "\n")
    best = "nan" if ckpt.best_metric is None else f"{ckpt.best_metric:.6f}"
    print(f"best dev metric {best} at epoch {ckpt.epoch}; checkpoint -> {args.out}")
    return 0


def _cmd_predict(args) -> int:
    ckpt = training.Checkpoint.load(args.checkpoint)
    ds = dataio.load_manifest(args.manifest)
    if ds.d_audio != ckpt.config.d_audio or ds.d_text != ckpt.config.d_text:
        raise dataio.DataError(
            f"manifest widths ({ds.d_audio}, {ds.d_text}) do not match the "
            f"checkpoint ({ckpt.config.d_audio}, {ckpt.config.d_text})"
        )
    lines = []
    for r in ds.records:
        pred = network.forward(ckpt.config, ckpt.params, r.audio, r.text)
        row = ensemble.prediction_row(r.clip_id, pred, ckpt.config, args.sigma)
        lines.append(json.dumps(row))
    dataio.atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(lines)} predictions -> {args.out}")
    return 0


def _read_predictions(path: str) -> dict[str, dict]:
    rows: dict[str, dict] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise dataio.DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            cid = row.get("clip_id")
            if not cid:
                raise dataio.DataError(f"{path}:{lineno}: missing clip_id")
            if cid in rows:
                raise dataio.DataError(f"{path}:{lineno}: duplicate clip_id {cid!r}")
            rows[cid] = row
    if not rows:
        raise dataio.DataError(f"{path}: no predictions")
    return rows


def _cmd_evaluate(args) -> int:
    rows = _read_predictions(args.predictions)
    ds = dataio.load_manifest(args.manifest)
    preds = {}
    for cid, row in rows.items():
        if "mi" not in row or "ta" not in row:
            raise dataio.DataError(f"prediction for {cid!r} lacks mi/ta scalars")
        preds[cid] = (float(row["mi"]), float(row["ta"]))
    report = metrics.evaluate(preds, ds.records)
    dataio.atomic_write_text(args.out, json.dumps(report.to_json_dict(), indent=2) + "\n")
    for key, value in report.to_json_dict().items():
        print(f"{key}\t{'nan' if value is None else format(value, '.6f')}")
    return 0


def _cmd_ensemble(args) -> int:
    model_rows = [_read_predictions(p) for p in args.predictions]
    ds = dataio.load_manifest(args.manifest)
    truths = {}
    for r in ds.records:
        if r.mi_score is None or r.ta_score is None:
            raise dataio.DataError(f"clip {r.clip_id!r} lacks scores; cannot fit the ensemble")
        truths[r.clip_id] = (r.mi_score, r.ta_score)
    first_dist = next(iter(model_rows[0].values())).get("mi_dist")
    if not first_dist:
        raise dataio.DataError("first predictions file has no mi_dist; cannot infer bin count")
    bins = labels.make_bins(len(first_dist))
    stacked = ensemble.stack(
        model_rows,
        truths,
        ds.system_of(),
        seed=args.seed,
        bins=bins,
        sigma=args.sigma,
    )
    dataio.atomic_write_text(args.out, json.dumps(stacked.to_json_dict(), indent=2) + "\n")
    rep = stacked.report
    print(
        f"stacked {len(model_rows)} models: "
        f"mi lambda {rep['mi']['lambda']} val srcc {rep['mi']['meta_val_srcc']:.4f}; "
        f"ta lambda {rep['ta']['lambda']} val srcc {rep['ta']['meta_val_srcc']:.4f}"
    )
    return 0


def _cmd_ensemble_predict(args) -> int:
    with open(args.stacked, "r", encoding="utf-8") as f:
        stacked = ensemble.StackedModel.from_json_dict(json.load(f))
    model_rows = [_read_predictions(p) for p in args.predictions]
    clip_ids = sorted(model_rows[0])
    scores = stacked.predict(model_rows, clip_ids)
    lines = [
        json.dumps({"clip_id": cid, "mi": scores[cid][0], "ta": scores[cid][1]})
        for cid in clip_ids
    ]
    dataio.atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(lines)} stacked predictions -> {args.out}")
    return 0


_ABLATE_CELLS = (
    ("gaussian", "transformer", "attention"),
    ("ce", "transformer", "attention"),
    ("l1", "transformer", "attention"),
    ("gaussian", "transformer", "mean"),
    ("gaussian", "bilstm", "attention"),
    ("gaussian", "bilstm", "mean"),
)


def _cmd_ablate(args) -> int:
    train_ds = dataio.load_manifest(args.train, split="train")
    dev_ds = dataio.load_manifest(args.dev, split="dev")
    sys_of = dev_ds.system_of()
    truth_mi = {r.clip_id: r.mi_score for r in dev_ds.records}
    truth_ta = {r.clip_id: r.ta_score for r in dev_ds.records}

    results: dict[tuple, dict[str, list[float]]] = {}
    for criterion, temporal, pooling in _ABLATE_CELLS:
        cell: dict[str, list[float]] = {m: [] for m in ("srcc_mi", "ktau_mi", "srcc_ta", "ktau_ta")}
        for seed in range(args.seeds):
            model_cfg = network.ModelConfig(
                d_audio=train_ds.d_audio,
                d_text=train_ds.d_text,
                variant="dora",
                temporal=temporal,
                pooling=pooling,
                d_common=args.d_common,
                n_heads=args.n_heads,
                d_hidden=args.d_hidden,
                d_bilstm=args.d_bilstm,
                K=args.k_bins,
            )
            train_cfg = training.TrainConfig(
                criterion=criterion,
                lr=args.lr,
                batch_size=args.batch_size,
                max_epochs=args.max_epochs,
                patience=args.patience,
                seed=seed,
                sigma=args.sigma,
            )
            ckpt = training.train(model_cfg, train_ds, dev_ds, train_cfg)
            preds_mi, preds_ta = {}, {}
            for r in dev_ds.records:
                p = network.forward(ckpt.config, ckpt.params, r.audio, r.text)
                preds_mi[r.clip_id] = p.mi_score
                preds_ta[r.clip_id] = p.ta_score
            for name, preds, truths in (
                ("mi", preds_mi, truth_mi),
                ("ta", preds_ta, truth_ta),
            ):
                mp, mt, _ = metrics.system_level(preds, truths, sys_of)
                cell[f"srcc_{name}"].append(metrics.spearman(mp, mt))
                cell[f"ktau_{name}"].append(metrics.kendall_tau_b(mp, mt))
        results[(criterion, temporal, pooling)] = cell

    def fmt(values: list[float]) -> str:
        arr = np.asarray(values)
        return f"{arr.mean():.3f} +/- {arr.std(ddof=0):.3f}"

    def print_table(title: str, rows: list[tuple[str, tuple]]) -> None:
        print(title)
        header = f"{'setting':<24}" + "".join(
            f"{c:<18}" for c in ("SRCC_MI", "KTAU_MI", "SRCC_TA", "KTAU_TA")
        )
        print(header)
        for label, key in rows:
            cell = results[key]
            line = f"{label:<24}" + "".join(
                f"{fmt(cell[m]):<18}" for m in ("srcc_mi", "ktau_mi", "srcc_ta", "ktau_ta")
            )
            print(line)
        print()

    print_table(
        f"criterion ablation (transformer + attention pooling, {args.seeds} seeds)",
        [(c, (c, "transformer", "attention")) for c in ("gaussian", "ce", "l1")],
    )
    print_table(
        f"architecture grid (gaussian criterion, {args.seeds} seeds)",
        [
            (f"{t} + {p}", ("gaussian", t, p))
            for t in ("transformer", "bilstm")
            for p in ("attention", "mean")
        ],
    )

    if args.out:
        payload = {
            " / ".join(key): {m: vals for m, vals in cell.items()}
            for key, cell in results.items()
        }
        dataio.atomic_write_text(args.out, json.dumps(payload, indent=2) + "\n")
    return 0


def _add_model_flags(p: argparse.ArgumentParser, d_common: int, d_hidden: int, d_bilstm: int) -> None:
    p.add_argument("--variant", choices=network.VARIANTS, default="dora")
    p.add_argument("--temporal", choices=network.TEMPORALS, default="transformer")
    p.add_argument("--pooling", choices=network.POOLINGS, default="attention")
    p.add_argument("--d-common", type=int, default=d_common)
    p.add_argument("--d-hidden", type=int, default=d_hidden)
    p.add_argument("--d-bilstm", type=int, default=d_bilstm)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--k-bins", type=int, default=20)


def _add_train_flags(p: argparse.ArgumentParser, max_epochs: int, patience: int) -> None:
    p.add_argument("--criterion", choices=training.CRITERIA, default="gaussian")
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-epochs", type=int, default=max_epochs)
    p.add_argument("--patience", type=int, default=patience)
    p.add_argument("--w-mi", type=float, default=1.0)
    p.add_argument("--w-ta", type=float, default=1.0)
    p.add_argument("--dropout", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ordmos",
        description="Dual-branch MOS prediction on precomputed embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic planted-structure dataset")
    p.add_argument("--systems", type=int, default=16)
    p.add_argument("--clips", type=int, default=24)
    p.add_argument("--noise-sd", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-min", type=int, default=20)
    p.add_argument("--t-max", type=int, default=60)
    p.add_argument("--d-audio", type=int, default=32)
    p.add_argument("--d-text", type=int, default=16)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("split", help="stratified train/dev split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dev-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", nargs=2, required=True, metavar=("TRAIN", "DEV"))
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    _add_model_flags(p, d_common=256, d_hidden=128, d_bilstm=128)
    _add_train_flags(p, max_epochs=200, patience=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="write per-clip predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="16-cell report from predictions and truths")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ensemble", help="fit the stacking meta-models")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ensemble)

    p = sub.add_parser("ensemble-predict", help="apply a stacked model")
    p.add_argument("--stacked", required=True)
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ensemble_predict)

    p = sub.add_parser("ablate", help="criterion and architecture grids, desk scale")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--seeds", type=int, default=2)
    p.add_argument("--d-common", type=int, default=64)
    p.add_argument("--d-hidden", type=int, default=64)
    p.add_argument("--d-bilstm", type=int, default=32)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--k-bins", type=int, default=20)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-epochs", type=int, default=60)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (training.TrainingDivergedError, ensemble.SingularMatrixError,
            metrics.ConstantInputError, NonFiniteError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_NUMERIC
    except (dataio.DataError, ensemble.EnsembleError, labels.ScoreRangeError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
