"""Gene-expression cleaning pipeline.

Fixed stage order: shift-log transform -> per-gene z-score -> IQR outlier
masking -> imputation. Every stage is a pure function; ``fit_gene_pipeline``
freezes the statistics of one cohort so ``apply_gene_pipeline`` can replay
them on held-out patients without refitting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# z-score: a gene whose population std falls below this is treated as constant
CONSTANT_STD = 1e-12
# replay floor for log arguments; fitted shifts guarantee >= 1 on the fit cohort
LOG_FLOOR = 1e-12


@dataclass
class GeneMatrix:
    """Patients x genes expression values with a present-value mask."""

    patient_ids: list[str]
    gene_ids: list[str]
    values: np.ndarray
    mask: np.ndarray | None = None  # True where a value is present
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {self.values.shape}")
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        n_p, n_g = self.values.shape
        if len(self.patient_ids) != n_p or len(self.gene_ids) != n_g:
            raise ValueError(
                f"id lengths ({len(self.patient_ids)} patients, {len(self.gene_ids)} genes) "
                f"do not match values shape {self.values.shape}")
        if self.mask.shape != self.values.shape:
            raise ValueError("mask shape does not match values")
        if len(set(self.patient_ids)) != n_p:
            raise ValueError("duplicate patient ids")
        if len(set(self.gene_ids)) != n_g:
            raise ValueError("duplicate gene ids")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("non-finite value marked present")

    @property
    def n_patients(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "GeneMatrix":
        return GeneMatrix(list(self.patient_ids), list(self.gene_ids),
                          self.values.copy(), self.mask.copy(), dict(self.meta))

    def subset(self, patient_ids: list[str]) -> "GeneMatrix":
        index = {p: i for i, p in enumerate(self.patient_ids)}
        missing = [p for p in patient_ids if p not in index]
        if missing:
            raise KeyError(f"patients not in gene matrix: {missing}")
        rows = [index[p] for p in patient_ids]
        return GeneMatrix(list(patient_ids), list(self.gene_ids),
                          self.values[rows].copy(), self.mask[rows].copy(), dict(self.meta))


def shift_log_transform(m: GeneMatrix) -> GeneMatrix:
    """ln(value + s) with s = |global min| + 1 when the minimum is negative, else 1.

    The shift is global over the matrix and recorded in meta["log_shift"].
    """
    if not m.mask.any():
        raise ValueError("gene matrix has no present values")
    vmin = float(m.values[m.mask].min())
    shift = abs(vmin) + 1.0 if vmin < 0 else 1.0
    out = apply_shift_log(m, shift)
    return out


def apply_shift_log(m: GeneMatrix, shift: float) -> GeneMatrix:
    """Replay a fitted shift-log. Arguments <= 0 (possible only on held-out
    data below the fitted minimum) are floored; the count is recorded."""
    values = m.values.copy()
    arg = values[m.mask] + shift
    clamped = int(np.sum(arg < LOG_FLOOR))
    if clamped:
        log.warning("shift-log replay floored %d value(s) below the fitted range", clamped)
    values[m.mask] = np.log(np.maximum(arg, LOG_FLOOR))
    meta = dict(m.meta)
    meta["log_shift"] = shift
    if clamped:
        meta["log_floor_count"] = clamped
    return GeneMatrix(list(m.patient_ids), list(m.gene_ids), values, m.mask.copy(), meta)


@dataclass
class ZscoreStats:
    gene_ids: list[str]
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool per gene: zero variance (output forced to 0)
    insufficient: list[str]  # genes with < 2 present values

    def to_dict(self) -> dict:
        return {
            "gene_ids": list(self.gene_ids),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "constant": [bool(v) for v in self.constant],
            "insufficient": list(self.insufficient),
        }


def zscore_normalize(m: GeneMatrix) -> tuple[GeneMatrix, ZscoreStats]:
    """Per-gene (v - mean) / std over present values, population std.

    Constant genes (std < 1e-12) map to all-zero and are flagged; genes with
    fewer than two present values land in the failure report and are treated
    as constant rather than aborting the run.
    """
    n_present = m.mask.sum(axis=0)
    safe_n = np.maximum(n_present, 1)
    masked = np.where(m.mask, m.values, 0.0)
    mean = masked.sum(axis=0) / safe_n
    var = np.where(m.mask, (m.values - mean) ** 2, 0.0).sum(axis=0) / safe_n
    std = np.sqrt(var)
    constant = (std < CONSTANT_STD) | (n_present < 2)
    insufficient = [g for g, n in zip(m.gene_ids, n_present) if n < 2]
    stats = ZscoreStats(list(m.gene_ids), mean, std, constant, insufficient)
    return apply_zscore(m, stats), stats


def apply_zscore(m: GeneMatrix, stats: ZscoreStats) -> GeneMatrix:
    if list(m.gene_ids) != list(stats.gene_ids):
        raise ValueError("z-score stats were fitted on a different gene set")
    safe_std = np.where(stats.constant, 1.0, stats.std)
    z = (m.values - stats.mean) / safe_std
    z = np.where(stats.constant, 0.0, z)
    values = np.where(m.mask, z, m.values)
    return GeneMatrix(list(m.patient_ids), list(m.gene_ids), values, m.mask.copy(), dict(m.meta))


@dataclass
class OutlierReport:
    axis: str
    k: float
    entries: list[tuple[str, str, float, float, float]]  # patient, gene, value, lo, hi
    lo: np.ndarray  # fences per gene (axis="gene") or per patient (axis="patient")
    hi: np.ndarray

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "k": self.k,
            "entries": [
                {"patient": p, "gene": g, "value": v, "lo": lo, "hi": hi}
                for p, g, v, lo, hi in self.entries
            ],
        }


def _iqr_fences(values: np.ndarray, mask: np.ndarray, k: float) -> tuple[np.ndarray, np.ndarray]:
    """Fences per column of (values, mask): [Q1 - k*IQR, Q3 + k*IQR] with
    linear-interpolation quantiles over present values."""
    n_cols = values.shape[1]
    lo = np.full(n_cols, -np.inf)
    hi = np.full(n_cols, np.inf)
    for j in range(n_cols):
        present = values[mask[:, j], j]
        if present.size == 0:
            continue
        q1, q3 = np.quantile(present, [0.25, 0.75])  # linear interpolation at (n-1)q
        iqr = q3 - q1
        lo[j] = q1 - k * iqr
        hi[j] = q3 + k * iqr
    return lo, hi


def iqr_outlier_filter(m: GeneMatrix, k: float = 1.5,
                       axis: str = "gene") -> tuple[GeneMatrix, OutlierReport]:
    """Mask values outside [Q1 - k*IQR, Q3 + k*IQR]; values are never modified.

    Fences are per gene by default; axis="patient" computes them per row
    instead (kept as a config flag, no fidelity claim either way).
    """
    if axis not in ("gene", "patient"):
        raise ValueError(f"axis must be 'gene' or 'patient', got {axis!r}")
    if axis == "gene":
        lo, hi = _iqr_fences(m.values, m.mask, k)
        outside = (m.values < lo) | (m.values > hi)
    else:
        lo, hi = _iqr_fences(m.values.T, m.mask.T, k)
        outside = (m.values < lo[:, None]) | (m.values > hi[:, None])
    flagged = outside & m.mask
    entries = []
    for i, j in zip(*np.nonzero(flagged)):
        fl, fh = (lo[j], hi[j]) if axis == "gene" else (lo[i], hi[i])
        entries.append((m.patient_ids[i], m.gene_ids[j], float(m.values[i, j]),
                        float(fl), float(fh)))
    out = GeneMatrix(list(m.patient_ids), list(m.gene_ids), m.values.copy(),
                     m.mask & ~flagged, dict(m.meta))
    return out, OutlierReport(axis=axis, k=k, entries=entries, lo=lo, hi=hi)


def apply_iqr_mask(m: GeneMatrix, report: OutlierReport) -> GeneMatrix:
    """Replay fitted fences on new rows (per-gene axis); per-patient fences
    are row-local and are recomputed instead."""
    if report.axis == "patient":
        out, _ = iqr_outlier_filter(m, k=report.k, axis="patient")
        return out
    outside = (m.values < report.lo) | (m.values > report.hi)
    return GeneMatrix(list(m.patient_ids), list(m.gene_ids), m.values.copy(),
                      m.mask & ~(outside & m.mask), dict(m.meta))


def impute_missing(m: GeneMatrix, strategy: str = "mean") -> tuple[GeneMatrix, np.ndarray]:
    """Fill missing entries with the per-gene mean or median of present values."""
    fill = _imputation_values(m, strategy)
    return apply_impute(m, fill), fill


def _imputation_values(m: GeneMatrix, strategy: str) -> np.ndarray:
    if strategy not in ("mean", "median"):
        raise ValueError(f"imputation strategy must be 'mean' or 'median', got {strategy!r}")
    fill = np.zeros(m.n_genes)
    for j in range(m.n_genes):
        present = m.values[m.mask[:, j], j]
        if present.size == 0:
            raise ValueError(f"gene {m.gene_ids[j]!r} has no present values to impute from")
        fill[j] = present.mean() if strategy == "mean" else np.median(present)
    return fill


def apply_impute(m: GeneMatrix, fill: np.ndarray) -> GeneMatrix:
    values = np.where(m.mask, m.values, fill)
    return GeneMatrix(list(m.patient_ids), list(m.gene_ids), values,
                      np.ones(m.values.shape, dtype=bool), dict(m.meta))


@dataclass
class AlignmentLog:
    kept: list[str]
    dropped_no_image: list[str]
    dropped_no_label: list[str]

    def to_dict(self) -> dict:
        return {"kept": self.kept, "dropped_no_image": self.dropped_no_image,
                "dropped_no_label": self.dropped_no_label}


def align_and_label(m: GeneMatrix, image_patient_ids, labels: dict
                    ) -> tuple[GeneMatrix, np.ndarray, AlignmentLog]:
    """Keep patients present in the gene matrix, the image set and the label
    map; rows come back sorted by patient id with a matched label vector."""
    bad = {p: v for p, v in labels.items() if v not in (0, 1)}
    if bad:
        raise ValueError(f"labels must be 0 or 1, got {bad}")
    image_ids = set(image_patient_ids)
    kept = sorted(set(m.patient_ids) & image_ids & set(labels))
    if not kept:
        raise ValueError("no aligned patients: gene, image and label sets do not intersect")
    logrec = AlignmentLog(
        kept=kept,
        dropped_no_image=sorted(p for p in m.patient_ids if p not in image_ids),
        dropped_no_label=sorted(p for p in m.patient_ids if p in image_ids and p not in labels),
    )
    for p in logrec.dropped_no_image:
        log.info("dropping patient %s: no image features", p)
    for p in logrec.dropped_no_label:
        log.info("dropping patient %s: no label", p)
    y = np.array([labels[p] for p in kept], dtype=np.int64)
    return m.subset(kept), y, logrec


@dataclass(frozen=True)
class GenePrepConfig:
    iqr_k: float = 1.5
    impute: str = "mean"
    iqr_axis: str = "gene"


@dataclass
class GenePrepStats:
    """Everything needed to replay one cohort's preprocessing on new rows."""

    config: GenePrepConfig
    shift: float
    zscore: ZscoreStats
    outliers: OutlierReport
    fill: np.ndarray

    def to_dict(self) -> dict:
        return {
            "config": {"iqr_k": self.config.iqr_k, "impute": self.config.impute,
                       "iqr_axis": self.config.iqr_axis},
            "shift": self.shift,
            "zscore": self.zscore.to_dict(),
            "outliers": self.outliers.to_dict(),
            "fill": [float(v) for v in self.fill],
        }


def fit_gene_pipeline(m: GeneMatrix, config: GenePrepConfig = GenePrepConfig()
                      ) -> tuple[GeneMatrix, GenePrepStats]:
    logged = shift_log_transform(m)
    normalized, zstats = zscore_normalize(logged)
    filtered, outliers = iqr_outlier_filter(normalized, k=config.iqr_k, axis=config.iqr_axis)
    imputed, fill = impute_missing(filtered, strategy=config.impute)
    stats = GenePrepStats(config=config, shift=logged.meta["log_shift"],
                          zscore=zstats, outliers=outliers, fill=fill)
    return imputed, stats


def apply_gene_pipeline(m: GeneMatrix, stats: GenePrepStats) -> GeneMatrix:
    logged = apply_shift_log(m, stats.shift)
    normalized = apply_zscore(logged, stats.zscore)
    filtered = apply_iqr_mask(normalized, stats.outliers)
    return apply_impute(filtered, stats.fill)
