"""Command-line entry point: train, eval, infer, analyze, selftest.

Exit codes: 0 success, 2 configuration problem, 3 data problem (including
unreadable or corrupt checkpoints), 4 numeric failure during training,
5 unexpected internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import pca_fit_project, separability_score, write_projection_csv
from .checkpoint import LoadedCheckpoint, load_checkpoint
from .config import RunConfig, load_run_config
from .data import (
    DEFAULT_MEAN,
    DEFAULT_STD,
    DatasetIndex,
    index_dataset,
    load_and_preprocess,
    load_manifest,
    save_manifest,
)
from .errors import (
    CheckpointError,
    CheckpointIncompatibleError,
    ConfigError,
    DataError,
    NumericError,
)
from .figures import (
    save_confusion_matrix,
    save_pca_scatter,
    save_pr_curves,
    save_roc_curves,
    save_training_curves,
)
from .metrics import (
    compile_report,
    pr_curve_points,
    render_report_text,
    roc_curve_points,
    write_curve_csv,
    write_report_csv,
)
from .model import forward, init_model
from .selftest import run_selftest
from .tensor import Tensor, no_grad
from .train import evaluate, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_INTERNAL = 5

__all__ = ["main"]


def _parse_triple(raw: str, what: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"{what} needs exactly 3 comma-separated values, got {raw!r}")
    try:
        values = tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{what} must be numeric, got {raw!r}") from None
    return values  # type: ignore[return-value]


def _checkpoint_norm(ckpt: LoadedCheckpoint, args) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Normalization constants: explicit flags win, then checkpoint metadata, then defaults."""
    if args.mean is not None:
        mean = _parse_triple(args.mean, "--mean")
    elif "mean" in ckpt.extra:
        mean = _parse_triple(ckpt.extra["mean"], "checkpoint mean metadata")
    else:
        mean = DEFAULT_MEAN
    if args.std is not None:
        std = _parse_triple(args.std, "--std")
    elif "std" in ckpt.extra:
        std = _parse_triple(ckpt.extra["std"], "checkpoint std metadata")
    else:
        std = DEFAULT_STD
    return mean, std


def _checkpoint_classes(ckpt: LoadedCheckpoint) -> list[str]:
    if "classes" in ckpt.extra:
        return ckpt.extra["classes"].split(",")
    return [f"class{i}" for i in range(ckpt.config.num_classes)]


def _load_index(args, ckpt: Optional[LoadedCheckpoint]) -> DatasetIndex:
    if args.data is None:
        raise ConfigError("a dataset root is required (--data)")
    root = Path(args.data)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist")
    if getattr(args, "manifest", None):
        index = load_manifest(args.manifest, root, seed=args.seed)
    else:
        index = index_dataset(root, seed=args.seed)
    if ckpt is not None and len(index.class_names) != ckpt.config.num_classes:
        raise ConfigError(
            f"checkpoint expects {ckpt.config.num_classes} classes but the dataset has "
            f"{len(index.class_names)}"
        )
    return index


def _default_out(checkpoint_path: Path, leaf: str) -> Path:
    """Place outputs inside the run directory when the checkpoint lives in one."""
    parent = checkpoint_path.parent
    if parent.name == "checkpoints":
        return parent.parent / leaf
    return parent / leaf


def _write_eval_artifacts(out_dir: Path, outcome, class_names: Sequence[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    report = compile_report(outcome.confusion, outcome.scored)
    write_report_csv(report, out_dir / "report.csv")
    (out_dir / "report.txt").write_text(render_report_text(report), encoding="utf-8")
    save_confusion_matrix(outcome.confusion, out_dir / "confusion_matrix.png")
    save_roc_curves(outcome.scored, class_names, out_dir / "roc_curves.png")
    save_pr_curves(outcome.scored, class_names, out_dir / "pr_curves.png")
    labels = outcome.scored.labels
    for class_id, name in enumerate(class_names):
        positives = int((labels == class_id).sum())
        if positives == 0 or positives == labels.shape[0]:
            continue
        thr, fpr, tpr = roc_curve_points(outcome.scored, class_id)
        write_curve_csv(out_dir / f"roc_{name}.csv", thr, fpr, tpr, "fpr", "tpr")
        thr, recall, precision = pr_curve_points(outcome.scored, class_id)
        write_curve_csv(out_dir / f"pr_{name}.csv", thr, recall, precision, "recall", "precision")


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.data is not None:
        overrides.append(f"data.root={args.data}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.name is not None:
        overrides.append(f"run.name={args.name}")
    rc: RunConfig = load_run_config(args.config, overrides)

    if rc.data_root is None:
        raise ConfigError("a dataset root is required ([data] root or --data)")
    if not rc.data_root.is_dir():
        raise ConfigError(f"dataset root {rc.data_root} does not exist")
    index = index_dataset(rc.data_root, seed=rc.seed)
    if len(index.class_names) != rc.model.num_classes:
        raise ConfigError(
            f"[model] num_classes={rc.model.num_classes} but the dataset has "
            f"{len(index.class_names)} classes: {', '.join(index.class_names)}"
        )

    run_dir = rc.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(rc.resolved, encoding="utf-8")
    save_manifest(index, run_dir / "manifest.tsv")

    params = init_model(rc.model, seed=rc.seed)
    history_path = run_dir / "history.jsonl"
    extra = {
        "classes": ",".join(index.class_names),
        "mean": ",".join(repr(v) for v in rc.mean),
        "std": ",".join(repr(v) for v in rc.std),
        "seed": str(rc.seed),
    }
    with open(history_path, "w", encoding="utf-8") as history_file:

        def record_epoch(record: dict) -> None:
            history_file.write(json.dumps(record) + "\n")
            history_file.flush()
            print(
                f"epoch {record['epoch']}: lr={record['lr']:.6g} "
                f"train_loss={record['train_loss']:.4f} val_acc={record['val_acc']:.2f} "
                f"val_f1={record['val_f1']:.4f}"
            )

        result = train(
            params,
            rc.model,
            index,
            rc.train,
            policy=rc.augment,
            checkpoint_dir=run_dir / "checkpoints",
            mean=rc.mean,
            std=rc.std,
            on_epoch=record_epoch,
            checkpoint_extra=extra,
        )

    metrics_dir = run_dir / "metrics"
    outcome = evaluate(
        result.best_params, rc.model, index, "test", batch_size=rc.train.batch_size,
        mean=rc.mean, std=rc.std,
    )
    _write_eval_artifacts(metrics_dir, outcome, index.class_names)
    if result.history:
        save_training_curves(result.history, metrics_dir / "training_curves.png")
    print(render_report_text(compile_report(outcome.confusion, outcome.scored)))
    if result.best_epoch is not None:
        print(f"best epoch {result.best_epoch} (val macro F1 {result.best_val_f1:.4f})")
    print(f"run artifacts in {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    index = _load_index(args, ckpt)
    mean, std = _checkpoint_norm(ckpt, args)
    outcome = evaluate(
        ckpt.params, ckpt.config, index, args.split, batch_size=args.batch_size,
        mean=mean, std=std,
    )
    out_dir = Path(args.out) if args.out else _default_out(Path(args.checkpoint), f"eval-{args.split}")
    _write_eval_artifacts(out_dir, outcome, index.class_names)
    print(render_report_text(compile_report(outcome.confusion, outcome.scored)))
    print(f"evaluation artifacts in {out_dir}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    class_names = _checkpoint_classes(ckpt)
    mean, std = _checkpoint_norm(ckpt, args)
    target = ckpt.config.patch.image_h
    successes = 0
    for image_path in args.images:
        try:
            image = load_and_preprocess(image_path, target=target, mean=mean, std=std)
        except DataError as exc:
            print(f"{image_path}\tERROR\t{exc}", file=sys.stderr)
            continue
        with no_grad():
            logits, _ = forward(Tensor(image[None]), ckpt.params, ckpt.config)
        z = logits.data[0].astype(np.float64)
        z -= z.max()
        probs = np.exp(z) / np.exp(z).sum()
        predicted = class_names[int(probs.argmax())]
        rendered = ",".join(f"{p:.6f}" for p in probs)
        print(f"{image_path}\t{predicted}\t{rendered}")
        successes += 1
    if successes == 0:
        raise DataError("no image could be processed")
    return EXIT_OK


def cmd_analyze(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    index = _load_index(args, ckpt)
    mean, std = _checkpoint_norm(ckpt, args)
    outcome = evaluate(
        ckpt.params, ckpt.config, index, args.split, batch_size=args.batch_size,
        mean=mean, std=std, collect_features=True,
    )
    result = pca_fit_project(outcome.features, labels=outcome.labels, k=2)
    score = separability_score(result)

    out_dir = Path(args.out) if args.out else _default_out(Path(args.checkpoint), "analysis")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_projection_csv(result, out_dir / "projection.csv", class_names=index.class_names)
    save_pca_scatter(result, out_dir / "pca_scatter.png", class_names=index.class_names)
    variance = result.explained_variance
    summary = (
        f"split: {args.split}\n"
        f"points: {result.projected.shape[0]}\n"
        f"explained_variance: {variance[0]:.6g}, {variance[1]:.6g}\n"
        f"separability: {score:.6g}\n"
    )
    (out_dir / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    print(f"analysis artifacts in {out_dir}")
    return EXIT_OK


def cmd_selftest(_args) -> int:
    failures = run_selftest(sys.stdout)
    return EXIT_OK if failures == 0 else EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dermswin",
        description="Shifted-window transformer image classifier: training, evaluation, and analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write run artifacts")
    p_train.add_argument("--config", help="INI config file; defaults cover every key")
    p_train.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                         help="override one config key (repeatable)")
    p_train.add_argument("--data", help="dataset root (class-per-folder); shorthand for data.root")
    p_train.add_argument("--epochs", type=int, help="shorthand for train.epochs")
    p_train.add_argument("--seed", type=int, help="shorthand for run.seed")
    p_train.add_argument("--name", help="shorthand for run.name")
    p_train.set_defaults(fn=cmd_train)

    def add_eval_args(p):
        p.add_argument("--checkpoint", required=True, help="checkpoint file to load")
        p.add_argument("--data", help="dataset root (class-per-folder)")
        p.add_argument("--manifest", help="split manifest from a training run; overrides fresh splitting")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--seed", type=int, default=0, help="split seed when indexing without a manifest")
        p.add_argument("--mean", help="per-channel normalization mean, e.g. 0.5,0.5,0.5")
        p.add_argument("--std", help="per-channel normalization std")
        p.add_argument("--out", help="output directory (default: next to the checkpoint)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    add_eval_args(p_eval)
    p_eval.set_defaults(fn=cmd_eval)

    p_infer = sub.add_parser("infer", help="classify individual image files")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--mean", help="per-channel normalization mean")
    p_infer.add_argument("--std", help="per-channel normalization std")
    p_infer.add_argument("images", nargs="+", help="image files to classify")
    p_infer.set_defaults(fn=cmd_infer)

    p_analyze = sub.add_parser("analyze", help="project penultimate features to 2-D")
    add_eval_args(p_analyze)
    p_analyze.set_defaults(fn=cmd_analyze)

    p_selftest = sub.add_parser("selftest", help="run the built-in oracle checks")
    p_selftest.set_defaults(fn=cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CheckpointIncompatibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
