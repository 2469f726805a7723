"""Adam optimization, early stopping, stratified K-fold CV and the
experiment/ablation grid.

Folds are independent units: each gets its own model, optimizer state and RNG
stream (run seed XOR fold index), so fold-parallel and fold-serial execution
produce bit-identical reports.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .data_io import REPORT_FORMAT_VERSION, DatasetBundle
from .fusion import STRATEGIES, FusionModel, ModelConfig
from .genomics import GenePrepConfig, apply_gene_pipeline, fit_gene_pipeline
from .nn_core import bce_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_epochs: int = 200
    batch_size: int = 16
    patience: int = 10
    min_delta: float = 1e-4
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_adam": self.eps_adam,
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "patience": self.patience,
            "min_delta": self.min_delta,
            "folds": self.folds,
            "seed": self.seed,
        }


class Adam:
    """Standard Adam with bias correction over (value, grad) array pairs."""

    def __init__(self, params, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        for value, grad in self.params:
            if value.shape != grad.shape:
                raise ValueError(f"parameter {value.shape} and gradient {grad.shape} differ")
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(v) for v, _ in self.params]
        self.v = [np.zeros_like(v) for v, _ in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (value, grad), m, v in zip(self.params, self.m, self.v):
            m[...] = self.beta1 * m + (1.0 - self.beta1) * grad
            v[...] = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass(frozen=True)
class FoldPlan:
    """Per fold: (train patient ids, validation patient ids)."""

    folds: list[tuple[list[str], list[str]]]

    def to_dict(self) -> dict:
        return {"folds": [{"train": list(tr), "val": list(va)} for tr, va in self.folds]}


def stratified_kfold(patient_ids, labels, k: int, seed: int,
                     allow_sparse_folds: bool = False) -> FoldPlan:
    """Shuffle within class by seeded RNG, deal round-robin into k folds.

    Every patient validates exactly once and per-fold class counts differ
    from perfect stratification by at most one. A class with fewer than k
    members is an error (some folds would validate without it) unless
    ``allow_sparse_folds`` is set.
    """
    patient_ids = list(patient_ids)
    labels = np.asarray(labels)
    if labels.shape != (len(patient_ids),):
        raise ValueError("labels must match patient_ids in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    rng = np.random.default_rng(seed)
    val_sets: list[list[int]] = [[] for _ in range(k)]
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k and not allow_sparse_folds:
            raise ValueError(f"class {cls} has {idx.size} members, needs at least {k} for {k}-fold")
        for j, i in enumerate(rng.permutation(idx)):
            val_sets[j % k].append(int(i))
    folds = []
    for val_idx in val_sets:
        val = sorted(patient_ids[i] for i in val_idx)
        val_set = set(val)
        train = [p for p in patient_ids if p not in val_set]
        folds.append((train, val))
    return FoldPlan(folds=folds)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss, "val_loss": self.val_loss}


@dataclass
class TrainResult:
    curve: list[EpochStats]
    best_epoch: int
    stopped_epoch: int


def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def train_model(model: FusionModel, train_data, val_data, config: TrainConfig,
                rng: np.random.Generator) -> TrainResult:
    """Mini-batch Adam on BCE with early stopping on validation loss.

    Stops after ``patience`` epochs without an improvement greater than
    ``min_delta``; parameters of the best epoch are restored. ``train_data``
    and ``val_data`` are (gene_x, patch_list, labels) triples.
    """
    gx, patches, y = train_data
    val_gx, val_patches, val_y = val_data
    n = len(y)
    adam = Adam(model.params(), config.learning_rate, config.beta1,
                config.beta2, config.eps_adam)
    best_val = np.inf
    best_epoch = 0
    best_params = model.snapshot()
    wait = 0
    curve: list[EpochStats] = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for batch in _batches(order, config.batch_size):
            model.zero_grad()
            loss, _ = model.training_loss_and_backward(
                gx[batch], [patches[i] for i in batch], y[batch])
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training loss became non-finite at epoch {epoch}; "
                    "lower the learning rate or change the init seed")
            adam.step()
            total += loss * len(batch)
        train_loss = total / n
        val_loss = bce_loss(model.predict_proba(val_gx, val_patches), val_y)
        curve.append(EpochStats(epoch=epoch, train_loss=train_loss, val_loss=val_loss))
        if val_loss < best_val - config.min_delta:
            best_val = val_loss
            best_epoch = epoch
            best_params = model.snapshot()
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    model.restore(best_params)
    return TrainResult(curve=curve, best_epoch=best_epoch, stopped_epoch=len(curve))


@dataclass
class FoldResult:
    fold: int
    train_ids: list[str]
    val_ids: list[str]
    metrics: metrics_mod.MetricSet
    curve: list[EpochStats]
    best_epoch: int
    stopped_epoch: int

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "metrics": self.metrics.to_dict(),
            "curve": [e.to_dict() for e in self.curve],
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }


@dataclass
class EvalReport:
    strategy: str
    seed: int
    config: dict
    fold_plan: FoldPlan
    folds: list[FoldResult]
    aggregate: metrics_mod.FoldAggregate
    mean_curve: dict
    pooled: dict | None = None
    format_version: int = REPORT_FORMAT_VERSION

    def to_dict(self) -> dict:
        out = {
            "format_version": self.format_version,
            "strategy": self.strategy,
            "seed": self.seed,
            "config": self.config,
            "fold_plan": self.fold_plan.to_dict(),
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": self.aggregate.to_dict(),
            "mean_curve": self.mean_curve,
        }
        if self.pooled is not None:
            out["pooled"] = self.pooled
        return out


def _fold_data(bundle: DatasetBundle, ids: list[str], gene_values: np.ndarray,
               gene_index: dict[str, int]):
    rows = [gene_index[p] for p in ids]
    gx = gene_values[rows]
    patches = [bundle.features[p] for p in ids]
    y = np.array([bundle.labels[p] for p in ids], dtype=np.int64)
    return gx, patches, y


def _mean_curve(folds: list[FoldResult]) -> dict:
    """Average the per-fold curves truncated at the shortest early stop."""
    min_len = min(len(f.curve) for f in folds)
    if min_len == 0:
        return {"epochs": 0, "train_loss": [], "val_loss": []}
    train = np.array([[e.train_loss for e in f.curve[:min_len]] for f in folds])
    val = np.array([[e.val_loss for e in f.curve[:min_len]] for f in folds])
    return {
        "epochs": min_len,
        "train_loss": [float(v) for v in train.mean(axis=0)],
        "val_loss": [float(v) for v in val.mean(axis=0)],
    }


def run_cv_experiment(bundle: DatasetBundle, strategy: str, config: TrainConfig,
                      prep: GenePrepConfig = GenePrepConfig(), parallel: bool = False,
                      pooled_metrics: bool = False,
                      model_overrides: dict | None = None) -> EvalReport:
    """Stratified K-fold CV of one strategy.

    Per fold, gene preprocessing statistics are fitted on the training
    patients only and replayed on the validation patients; the model is
    re-initialized from seed XOR fold index.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    ids = bundle.patient_ids
    labels = bundle.label_vector()
    plan = stratified_kfold(ids, labels, config.folds, config.seed)
    gene_dim = bundle.genes.n_genes
    image_dim = bundle.feature_dim()
    model_cfg = ModelConfig(strategy=strategy, gene_dim=gene_dim, image_dim=image_dim,
                            **(model_overrides or {}))

    def run_fold(i: int) -> FoldResult:
        train_ids, val_ids = plan.folds[i]
        clean_train, stats = fit_gene_pipeline(bundle.genes.subset(train_ids), prep)
        clean_val = apply_gene_pipeline(bundle.genes.subset(val_ids), stats)
        gene_index_tr = {p: r for r, p in enumerate(clean_train.patient_ids)}
        gene_index_va = {p: r for r, p in enumerate(clean_val.patient_ids)}
        train_data = _fold_data(bundle, train_ids, clean_train.values, gene_index_tr)
        val_data = _fold_data(bundle, val_ids, clean_val.values, gene_index_va)
        fold_rng = np.random.default_rng(config.seed ^ i)
        model = FusionModel(model_cfg, rng=fold_rng)
        result = train_model(model, train_data, val_data, config, fold_rng)
        probs = model.predict_proba(val_data[0], val_data[1])
        fold_metrics = metrics_mod.evaluate_predictions(val_data[2], probs)
        log.info("strategy=%s fold=%d f1=%.4f pr_auc=%.4f (stopped at epoch %d, best %d)",
                 strategy, i, fold_metrics.f1, fold_metrics.pr_auc,
                 result.stopped_epoch, result.best_epoch)
        return FoldResult(fold=i, train_ids=train_ids, val_ids=val_ids,
                          metrics=fold_metrics, curve=result.curve,
                          best_epoch=result.best_epoch, stopped_epoch=result.stopped_epoch)

    indices = range(config.folds)
    if parallel:
        with ThreadPoolExecutor(max_workers=config.folds) as pool:
            folds = list(pool.map(run_fold, indices))
    else:
        folds = [run_fold(i) for i in indices]
    report_config = dict(config.to_dict())
    report_config.update({
        "strategy": strategy,
        "prep": {"iqr_k": prep.iqr_k, "impute": prep.impute, "iqr_axis": prep.iqr_axis},
        "model": model_cfg.to_dict(),
    })
    pooled = None
    if pooled_metrics:
        pooled = _pooled_metrics(bundle, folds, model_cfg, config, prep)
    return EvalReport(strategy=strategy, seed=config.seed, config=report_config,
                      fold_plan=plan, folds=folds,
                      aggregate=metrics_mod.aggregate_folds([f.metrics for f in folds]),
                      mean_curve=_mean_curve(folds), pooled=pooled)


def _pooled_metrics(bundle, folds, model_cfg, config, prep) -> dict:
    """Alternative aggregation: metrics over per-fold confusion counts pooled
    into one set (means of per-fold PR-AUC cannot be pooled without
    re-predicting, so the pooled block reports threshold metrics only)."""
    counts = metrics_mod.ConfusionCounts(
        tp=sum(f.metrics.counts.tp for f in folds),
        fp=sum(f.metrics.counts.fp for f in folds),
        tn=sum(f.metrics.counts.tn for f in folds),
        fn=sum(f.metrics.counts.fn for f in folds),
    )
    accuracy, f1, mcc = metrics_mod.classification_metrics(counts)
    return {"accuracy": accuracy, "f1": f1, "mcc": mcc,
            "counts": {"tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn}}


ABLATION_METRICS = ("accuracy", "f1", "pr_auc")


@dataclass
class AblationReport:
    seed: int
    config: dict
    strategies: dict  # strategy -> EvalReport
    deltas: dict  # "a_minus_b" -> {metric: mean_a - mean_b}
    format_version: int = REPORT_FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "seed": self.seed,
            "config": self.config,
            "strategies": {name: rep.to_dict() for name, rep in self.strategies.items()},
            "deltas": self.deltas,
        }


def run_ablation(bundle: DatasetBundle, config: TrainConfig,
                 prep: GenePrepConfig = GenePrepConfig(), parallel: bool = False,
                 model_overrides: dict | None = None) -> AblationReport:
    """All five strategies under identical folds and seed, with pairwise
    deltas of accuracy, F1 and PR-AUC (fold means)."""
    reports = {}
    for strategy in STRATEGIES:
        reports[strategy] = run_cv_experiment(bundle, strategy, config, prep=prep,
                                              parallel=parallel,
                                              model_overrides=model_overrides)
    deltas = {}
    for a in STRATEGIES:
        for b in STRATEGIES:
            if a == b:
                continue
            deltas[f"{a}_minus_{b}"] = {
                m: reports[a].aggregate.mean[m] - reports[b].aggregate.mean[m]
                for m in ABLATION_METRICS
            }
    return AblationReport(seed=config.seed, config=config.to_dict(),
                          strategies=reports, deltas=deltas)
