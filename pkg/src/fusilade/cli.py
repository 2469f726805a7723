"""Batch command-line entry point.

Subcommands: preprocess-genes, extract-patches, synth, train, ablate,
metrics. Option precedence: built-in defaults < FUSILADE_SEED env var (seed
only) < config file < --paper-config < explicit flags. Exit codes: 0 success,
1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data_io, histology
from .genomics import GenePrepConfig, fit_gene_pipeline
from .metrics import evaluate_predictions
from .training import TrainConfig, run_ablation, run_cv_experiment

log = logging.getLogger(__name__)

PAPER_DEFAULTS = {
    "learning_rate": 1e-5,
    "max_epochs": 200,
    "batch_size": 16,
    "patience": 10,
    "min_delta": 1e-4,
    "folds": 5,
}

# keys a config file may set, with their parsers
CONFIG_KEYS = {
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "eps_adam": float,
    "max_epochs": int,
    "batch_size": int,
    "patience": int,
    "min_delta": float,
    "folds": int,
    "seed": int,
    "strategy": str,
    "impute": str,
    "iqr_k": float,
    "iqr_axis": str,
    "min_tissue_fraction": float,
    "patch_size": int,
    "stride": int,
}


class CliValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliValidationError(message)


def _read_config_file(path: Path) -> dict:
    """Flat key=value lines; '#' starts a comment; unknown keys rejected."""
    if not path.is_file():
        raise CliValidationError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliValidationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise CliValidationError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except ValueError:
            raise CliValidationError(
                f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return values


def _resolve_options(args, training_flags: list[str], other_flags: list[str]) -> dict:
    """Layer defaults, FUSILADE_SEED, config file, --paper-config and
    explicit flags into one option dict."""
    resolved = {key: getattr(TrainConfig, key) for key in (
        "learning_rate", "beta1", "beta2", "eps_adam", "max_epochs",
        "batch_size", "patience", "min_delta", "folds", "seed")}
    resolved.update({"impute": "mean", "iqr_k": 1.5, "iqr_axis": "gene",
                     "min_tissue_fraction": 0.5, "patch_size": 256, "stride": 256,
                     "strategy": None})
    env_seed = os.environ.get("FUSILADE_SEED")
    if env_seed is not None:
        try:
            resolved["seed"] = int(env_seed)
        except ValueError:
            raise CliValidationError(f"FUSILADE_SEED must be an integer, got {env_seed!r}") from None
    config_path = getattr(args, "config", None)
    if config_path:
        resolved.update(_read_config_file(Path(config_path)))
    if getattr(args, "paper_config", False):
        resolved.update(PAPER_DEFAULTS)
    for name in training_flags + other_flags:
        value = getattr(args, name, None)
        if value is not None:
            resolved[name] = value
    return resolved


def _train_config(opts: dict) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=opts["learning_rate"], beta1=opts["beta1"], beta2=opts["beta2"],
            eps_adam=opts["eps_adam"], max_epochs=opts["max_epochs"],
            batch_size=opts["batch_size"], patience=opts["patience"],
            min_delta=opts["min_delta"], folds=opts["folds"], seed=opts["seed"])
    except ValueError as exc:
        raise CliValidationError(str(exc)) from None


def _prep_config(opts: dict) -> GenePrepConfig:
    if opts["impute"] not in ("mean", "median"):
        raise CliValidationError(f"impute must be mean or median, got {opts['impute']!r}")
    if opts["iqr_axis"] not in ("gene", "patient"):
        raise CliValidationError(f"iqr-axis must be gene or patient, got {opts['iqr_axis']!r}")
    return GenePrepConfig(iqr_k=opts["iqr_k"], impute=opts["impute"], iqr_axis=opts["iqr_axis"])


def _require_dir(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.is_dir():
        raise CliValidationError(f"{what} directory not found: {path}")
    return path


def _require_file(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.is_file():
        raise CliValidationError(f"{what} file not found: {path}")
    return path


TRAINING_FLAGS = ["learning_rate", "beta1", "beta2", "eps_adam", "max_epochs",
                  "batch_size", "patience", "min_delta", "folds", "seed"]
PREP_FLAGS = ["impute", "iqr_k", "iqr_axis"]


def _add_training_flags(sub):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--paper-config", action="store_true",
                     help="load the published training defaults (lr 1e-5, 5 folds, "
                          "batch 16, 200 epochs, patience 10)")
    sub.add_argument("--learning-rate", type=float, dest="learning_rate")
    sub.add_argument("--beta1", type=float)
    sub.add_argument("--beta2", type=float)
    sub.add_argument("--eps-adam", type=float, dest="eps_adam")
    sub.add_argument("--max-epochs", type=int, dest="max_epochs")
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--patience", type=int)
    sub.add_argument("--min-delta", type=float, dest="min_delta")
    sub.add_argument("--folds", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--impute", choices=["mean", "median"])
    sub.add_argument("--iqr-k", type=float, dest="iqr_k")
    sub.add_argument("--iqr-axis", choices=["gene", "patient"], dest="iqr_axis")
    sub.add_argument("--parallel-folds", action="store_true", dest="parallel_folds",
                     help="train folds on a thread pool (results are identical to serial)")


def build_parser() -> _Parser:
    parser = _Parser(prog="fusilade",
                     description="Multimodal gene-expression + histology-feature "
                                 "binary classification pipeline")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = commands.add_parser("preprocess-genes",
                            help="clean a gene expression CSV and emit fitted statistics")
    p.add_argument("--genes", required=True, help="input expression CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--impute", choices=["mean", "median"])
    p.add_argument("--iqr-k", type=float, dest="iqr_k")
    p.add_argument("--iqr-axis", choices=["gene", "patient"], dest="iqr_axis")
    p.add_argument("--config", help="flat key=value config file")

    p = commands.add_parser("extract-patches",
                            help="cut tissue-gated patches out of raster images")
    p.add_argument("--images", required=True, help="directory of PNG/PPM images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--stride", type=int)
    p.add_argument("--min-tissue-fraction", type=float, dest="min_tissue_fraction")
    p.add_argument("--max-patches", type=int, dest="max_patches",
                   help="keep only the top-N patches by tissue fraction")
    p.add_argument("--augment", action="store_true",
                   help="apply color jitter and a random 90-degree rotation per patch")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="flat key=value config file")

    p = commands.add_parser("synth", help="generate a synthetic dataset bundle")
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--patients", type=int, default=200)
    p.add_argument("--genes", type=int, default=50)
    p.add_argument("--patches", type=int, default=35)
    p.add_argument("--feature-dim", type=int, dest="feature_dim", default=64)
    p.add_argument("--gene-snr", type=float, dest="gene_snr", default=2.0)
    p.add_argument("--image-snr", type=float, dest="image_snr", default=0.5)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--config", help="flat key=value config file")

    p = commands.add_parser("train", help="cross-validated training of one strategy")
    p.add_argument("--bundle", required=True, help="dataset bundle directory")
    p.add_argument("--strategy", choices=["gene_only", "image_only", "concat",
                                          "late", "cross_attention"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pooled-metrics", action="store_true", dest="pooled_metrics",
                   help="also report metrics over pooled fold predictions")
    _add_training_flags(p)

    p = commands.add_parser("ablate", help="run all five strategies under identical folds")
    p.add_argument("--bundle", required=True, help="dataset bundle directory")
    p.add_argument("--out", required=True, help="output directory")
    _add_training_flags(p)

    p = commands.add_parser("metrics", help="score a predictions CSV")
    p.add_argument("--pred", required=True,
                   help="CSV with header patient_id,y_true,p_pred")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="write MetricSet JSON here instead of stdout")

    return parser


def _cmd_preprocess_genes(args) -> int:
    opts = _resolve_options(args, [], PREP_FLAGS)
    prep = _prep_config(opts)
    genes_path = _require_file(args.genes, "gene CSV")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    matrix = data_io.read_gene_csv(genes_path)
    cleaned, stats = fit_gene_pipeline(matrix, prep)
    data_io.write_gene_csv(out / "genes_clean.csv", cleaned)
    stats_doc = stats.to_dict()
    stats_doc["source"] = str(genes_path)
    data_io.write_json(stats_doc, out / "prep_stats.json")
    print(f"cleaned {matrix.n_patients} patients x {matrix.n_genes} genes -> {out}")
    return 0


def _cmd_extract_patches(args) -> int:
    opts = _resolve_options(args, [], ["patch_size", "stride", "min_tissue_fraction", "seed"])
    images_dir = _require_dir(args.images, "image")
    out = Path(args.out)
    patches_dir = out / "patches"
    patches_dir.mkdir(parents=True, exist_ok=True)
    image_paths = sorted(p for p in images_dir.iterdir()
                         if p.suffix.lower() in (".png", ".ppm"))
    if not image_paths:
        raise CliValidationError(f"no .png or .ppm images in {images_dir}")
    manifests = []
    patch_counter = 0
    for path in image_paths:
        img = histology.read_image(path)
        manifest = histology.extract_patches(
            img, image_id=path.stem, patch_size=opts["patch_size"],
            stride=opts["stride"], min_tissue_fraction=opts["min_tissue_fraction"])
        selected = manifest.accepted
        if args.max_patches is not None:
            selected = histology.select_top_patches(manifest, args.max_patches)
        for rec in selected:
            patch = histology.crop_patch(img, rec, opts["patch_size"])
            if args.augment:
                patch = histology.augment_patch(
                    patch, histology.patch_rng(opts["seed"], patch_counter))
            histology.write_ppm(
                patches_dir / f"{path.stem}_y{rec.y}_x{rec.x}.ppm", patch)
            patch_counter += 1
        manifests.append(manifest.to_dict())
    doc = {
        "config": {"patch_size": opts["patch_size"], "stride": opts["stride"],
                   "min_tissue_fraction": opts["min_tissue_fraction"],
                   "augment": bool(args.augment), "seed": opts["seed"],
                   "max_patches": args.max_patches},
        "images": manifests,
    }
    data_io.write_json(doc, out / "manifest.json")
    print(f"wrote {patch_counter} patches from {len(image_paths)} images -> {out}")
    return 0


def _cmd_synth(args) -> int:
    opts = _resolve_options(args, ["seed"], [])
    out = Path(args.out)
    bundle = data_io.generate_synthetic(
        n_patients=args.patients, genes=args.genes, patches=args.patches,
        feature_dim=args.feature_dim, gene_snr=args.gene_snr,
        image_snr=args.image_snr, overlap=args.overlap, seed=opts["seed"])
    data_io.save_bundle(bundle, out)
    print(f"synthetic bundle: {args.patients} patients -> {out}")
    return 0


def _run_config_echo(args, opts, command: str) -> dict:
    return {
        "command": command,
        "bundle": str(args.bundle),
        "out": str(args.out),
        "parallel_folds": bool(getattr(args, "parallel_folds", False)),
        "options": {k: opts[k] for k in sorted(opts) if opts[k] is not None},
    }


def _cmd_train(args) -> int:
    opts = _resolve_options(args, TRAINING_FLAGS, PREP_FLAGS + ["strategy"])
    strategy = opts.get("strategy")
    if not strategy:
        raise CliValidationError("--strategy is required (flag or config file)")
    config = _train_config(opts)
    prep = _prep_config(opts)
    bundle_dir = _require_dir(args.bundle, "bundle")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = data_io.load_bundle(bundle_dir)
    report = run_cv_experiment(bundle, strategy, config, prep=prep,
                               parallel=args.parallel_folds,
                               pooled_metrics=args.pooled_metrics)
    report.config["run"] = _run_config_echo(args, opts, "train")
    data_io.write_report(report, out / "report.json", "json")
    data_io.write_report(report, out / "summary.csv", "csv_summary")
    agg = report.aggregate.mean
    print(f"{strategy}: mean f1={agg['f1']:.4f} pr_auc={agg['pr_auc']:.4f} "
          f"accuracy={agg['accuracy']:.4f} ({config.folds} folds) -> {out}")
    return 0


def _cmd_ablate(args) -> int:
    opts = _resolve_options(args, TRAINING_FLAGS, PREP_FLAGS)
    config = _train_config(opts)
    prep = _prep_config(opts)
    bundle_dir = _require_dir(args.bundle, "bundle")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = data_io.load_bundle(bundle_dir)
    report = run_ablation(bundle, config, prep=prep, parallel=args.parallel_folds)
    report.config["run"] = _run_config_echo(args, opts, "ablate")
    data_io.write_report(report, out / "ablation.json", "json")
    for name, rep in report.strategies.items():
        agg = rep.aggregate.mean
        print(f"{name}: f1={agg['f1']:.4f} pr_auc={agg['pr_auc']:.4f} "
              f"accuracy={agg['accuracy']:.4f}")
    return 0


def _cmd_metrics(args) -> int:
    pred_path = _require_file(args.pred, "predictions")
    y, p = _read_predictions_csv(pred_path)
    ms = evaluate_predictions(y, p, threshold=args.threshold)
    text = data_io.canonical_json_dumps(ms.to_dict())
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _read_predictions_csv(path: Path):
    import csv

    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["patient_id", "y_true", "p_pred"]:
            raise data_io.FormatError(
                f"{path}: header must be patient_id,y_true,p_pred")
        ys, ps = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise data_io.FormatError(
                    f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            ys.append(int(row[1]))
            ps.append(float(row[2]))
    if not ys:
        raise data_io.FormatError(f"{path}: no prediction rows")
    return np.array(ys), np.array(ps)


COMMANDS = {
    "preprocess-genes": _cmd_preprocess_genes,
    "extract-patches": _cmd_extract_patches,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "metrics": _cmd_metrics,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
