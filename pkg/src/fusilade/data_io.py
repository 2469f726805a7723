"""File formats, dataset assembly, synthetic data and report serialization.

Readers reject malformed input rather than repairing it. Feature matrices are
stored as PFM1 binaries (f32 on disk, f64 in memory); reports are canonical
JSON (sorted keys, 9-significant-digit floats) so byte-level determinism is
testable.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .genomics import GeneMatrix

PFM_MAGIC = b"PFM1"
REPORT_FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed input file."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class NonFiniteDataError(FormatError):
    pass


# ---------------------------------------------------------------------------
# canonical JSON

def _canon(obj, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise ValueError(f"cannot serialize non-finite float {x}")
        out.append(format(x, ".9g"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be strings, got {key!r}")
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _canon(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _canon(item, out)
        out.append("]")
    elif hasattr(obj, "to_dict"):
        _canon(obj.to_dict(), out)
    else:
        raise TypeError(f"cannot canonicalize {type(obj).__name__}")


def canonical_json_dumps(obj) -> str:
    """Canonical form: sorted keys, compact separators, floats at 9
    significant digits. write -> read -> write is byte-stable."""
    out: list[str] = []
    _canon(obj, out)
    return "".join(out)


def write_json(obj, path) -> None:
    Path(path).write_text(canonical_json_dumps(obj) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# gene expression CSV

def read_gene_csv(path) -> GeneMatrix:
    """Header row: patient_id, <gene ids...>; empty cells mean missing."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if not header or header[0] != "patient_id":
            raise FormatError(f"{path}: first header field must be 'patient_id'")
        gene_ids = header[1:]
        if not gene_ids:
            raise FormatError(f"{path}: no gene columns")
        if len(set(gene_ids)) != len(gene_ids):
            raise FormatError(f"{path}: duplicate gene ids in header")
        patient_ids: list[str] = []
        rows: list[list[float]] = []
        mask_rows: list[list[bool]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            patient_ids.append(row[0])
            vals, present = [], []
            for cell in row[1:]:
                cell = cell.strip()
                if cell == "":
                    vals.append(0.0)
                    present.append(False)
                else:
                    try:
                        v = float(cell)
                    except ValueError:
                        raise FormatError(
                            f"{path}: line {lineno}: not a number: {cell!r}") from None
                    if not np.isfinite(v):
                        raise NonFiniteDataError(
                            f"{path}: line {lineno}: non-finite value {cell!r}")
                    vals.append(v)
                    present.append(True)
            rows.append(vals)
            mask_rows.append(present)
    if not patient_ids:
        raise FormatError(f"{path}: no patient rows")
    if len(set(patient_ids)) != len(patient_ids):
        raise FormatError(f"{path}: duplicate patient ids")
    return GeneMatrix(patient_ids, gene_ids, np.array(rows, dtype=np.float64),
                      np.array(mask_rows, dtype=bool))


def write_gene_csv(path, m: GeneMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["patient_id"] + list(m.gene_ids))
        for i, pid in enumerate(m.patient_ids):
            row = [pid] + [str(float(v)) if present else ""
                           for v, present in zip(m.values[i], m.mask[i])]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# label CSV

def read_labels_csv(path) -> dict[str, int]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["patient_id", "label"]:
            raise FormatError(f"{path}: header must be patient_id,label")
        labels: dict[str, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise FormatError(f"{path}: line {lineno}: expected 2 fields, got {len(row)}")
            pid, lab = row
            if lab not in ("0", "1"):
                raise FormatError(f"{path}: line {lineno}: label must be 0 or 1, got {lab!r}")
            if pid in labels:
                raise FormatError(f"{path}: line {lineno}: duplicate patient id {pid!r}")
            labels[pid] = int(lab)
    if not labels:
        raise FormatError(f"{path}: no label rows")
    return labels


def write_labels_csv(path, labels: dict[str, int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["patient_id", "label"])
        for pid in sorted(labels):
            writer.writerow([pid, str(int(labels[pid]))])


# ---------------------------------------------------------------------------
# PFM1 patch-feature binary

@dataclass
class PatchFeatures:
    patient_id: str
    features: np.ndarray  # [patches, dims] float64 in memory

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be [P >= 1, D], got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise NonFiniteDataError(f"patient {self.patient_id}: non-finite feature values")


def write_feature_matrix(path, pf: PatchFeatures) -> None:
    """PFM1: magic, u16 id length + UTF-8 id, u32 rows, u32 cols, then
    rows*cols little-endian f32 row-major."""
    ident = pf.patient_id.encode("utf-8")
    if len(ident) > 0xFFFF:
        raise ValueError("patient id too long for PFM1 header")
    rows, cols = pf.features.shape
    with open(path, "wb") as f:
        f.write(PFM_MAGIC)
        f.write(struct.pack("<H", len(ident)))
        f.write(ident)
        f.write(struct.pack("<II", rows, cols))
        f.write(pf.features.astype("<f4").tobytes())


def read_feature_matrix(path) -> PatchFeatures:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != PFM_MAGIC:
        raise BadMagicError(f"{path}: not a PFM1 file (magic {data[:4]!r})")
    pos = 4
    if len(data) < pos + 2:
        raise TruncatedFileError(f"{path}: truncated header")
    (id_len,) = struct.unpack_from("<H", data, pos)
    pos += 2
    if len(data) < pos + id_len + 8:
        raise TruncatedFileError(f"{path}: truncated header")
    patient_id = data[pos:pos + id_len].decode("utf-8")
    pos += id_len
    rows, cols = struct.unpack_from("<II", data, pos)
    pos += 8
    expected = rows * cols
    payload = data[pos:]
    if len(payload) != expected * 4:
        raise TruncatedFileError(
            f"{path}: expected {expected} floats, got {len(payload) // 4}")
    feats = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(feats)):
        raise NonFiniteDataError(f"{path}: non-finite feature values")
    return PatchFeatures(patient_id=patient_id, features=feats)


# ---------------------------------------------------------------------------
# dataset bundle

@dataclass
class DatasetBundle:
    """Aligned gene matrix, per-patient patch features and labels."""

    genes: GeneMatrix
    features: dict[str, np.ndarray]  # patient id -> [P, D]
    labels: dict[str, int]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        gene_ids = set(self.genes.patient_ids)
        if gene_ids != set(self.features) or gene_ids != set(self.labels):
            raise ValueError("bundle members must cover identical patient id sets")
        bad = {p: v for p, v in self.labels.items() if v not in (0, 1)}
        if bad:
            raise ValueError(f"labels must be 0 or 1: {bad}")

    @property
    def patient_ids(self) -> list[str]:
        return list(self.genes.patient_ids)

    def label_vector(self) -> np.ndarray:
        return np.array([self.labels[p] for p in self.genes.patient_ids], dtype=np.int64)

    def feature_dim(self) -> int:
        first = self.features[self.genes.patient_ids[0]]
        return first.shape[1]


def save_bundle(bundle: DatasetBundle, out_dir) -> None:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    write_gene_csv(out / "genes.csv", bundle.genes)
    write_labels_csv(out / "labels.csv", bundle.labels)
    for pid in sorted(bundle.features):
        write_feature_matrix(out / "features" / f"{pid}.pfm",
                             PatchFeatures(pid, bundle.features[pid]))
    write_json(bundle.provenance, out / "provenance.json")


def load_bundle(bundle_dir) -> DatasetBundle:
    root = Path(bundle_dir)
    if not root.is_dir():
        raise FormatError(f"{root}: not a bundle directory")
    genes = read_gene_csv(root / "genes.csv")
    labels = read_labels_csv(root / "labels.csv")
    features: dict[str, np.ndarray] = {}
    for path in sorted((root / "features").glob("*.pfm")):
        pf = read_feature_matrix(path)
        if pf.patient_id in features:
            raise FormatError(f"{path}: duplicate patient id {pf.patient_id!r}")
        features[pf.patient_id] = pf.features
    provenance = read_json(root / "provenance.json") if (root / "provenance.json").exists() else {}
    return DatasetBundle(genes=genes, features=features, labels=labels, provenance=provenance)


# ---------------------------------------------------------------------------
# synthetic data

def generate_synthetic(n_patients: int = 200, genes: int = 50, patches: int = 35,
                       feature_dim: int = 64, gene_snr: float = 2.0,
                       image_snr: float = 0.5, overlap: float = 0.5,
                       seed: int = 0, latent_noise: float = 0.65,
                       informative_fraction: float = 0.11,
                       blend_fraction: float = 0.09, blend_scale: float = 0.5,
                       marker_strength: float = 6.0,
                       patch_noise: float = 0.5) -> DatasetBundle:
    """Desk-scale synthetic cohort with complementary modality signal.

    Each patient gets a class sign s = 2y - 1 observed through two noisy
    per-patient latents: the gene vector carries the shared latent along a
    fixed direction, and the patch rows carry image-side signal in two kinds
    of informative patches (the rest are pure noise, mimicking tissue
    heterogeneity):

    - shared-channel patches carry the shared latent at amplitude
      ``image_snr * 2 * overlap * blend_scale``;
    - independent-channel patches carry the independent latent at amplitude
      ``image_snr * 2 * (1 - overlap)`` plus a class-independent marker offset
      (informative tissue looks different regardless of class).

    ``overlap`` therefore sets the proportion of shared versus independent
    signal, neutral at 0.5. Mean pooling dilutes both channels by their patch
    fractions; patch-level attention can key on the markers and read the
    independent channel with far less dilution, which is what separates the
    fusion strategies on this data.
    """
    if n_patients < 20:
        raise ValueError("need at least 20 patients")
    if genes < 1 or patches < 1 or feature_dim < 1:
        raise ValueError("genes, patches and feature_dim must be positive")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must be in [0, 1]")
    n_latent = max(1, round(informative_fraction * patches))
    n_blend = max(1, round(blend_fraction * patches))
    if n_latent + n_blend > patches:
        raise ValueError("informative and blend fractions exceed the patch budget")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n_patients)
    if min(int(y.sum()), int(n_patients - y.sum())) < 2:
        raise ValueError(f"seed {seed} produced a degenerate class balance; pick another")
    sign = 2.0 * y - 1.0
    gene_dir = rng.normal(size=genes)
    gene_dir /= np.linalg.norm(gene_dir)
    blend_dir = rng.normal(size=feature_dim)
    blend_dir /= np.linalg.norm(blend_dir)
    latent_dir = rng.normal(size=feature_dim)
    latent_dir /= np.linalg.norm(latent_dir)
    marker_dir = rng.normal(size=feature_dim)
    marker_dir /= np.linalg.norm(marker_dir)
    u_shared = sign + latent_noise * rng.normal(size=n_patients)
    u_indep = sign + latent_noise * rng.normal(size=n_patients)
    gene_values = (gene_snr * u_shared[:, None] * gene_dir
                   + rng.normal(size=(n_patients, genes)))
    patient_ids = [f"P{i:04d}" for i in range(n_patients)]
    features: dict[str, np.ndarray] = {}
    amp_shared = image_snr * 2.0 * overlap * blend_scale
    amp_indep = image_snr * 2.0 * (1.0 - overlap)
    for i, pid in enumerate(patient_ids):
        rows = patch_noise * rng.normal(size=(patches, feature_dim))
        slots = rng.permutation(patches)
        blend = slots[:n_blend]
        latent = slots[n_blend:n_blend + n_latent]
        rows[blend] += amp_shared * u_shared[i] * blend_dir
        rows[latent] += (amp_indep * u_indep[i] * latent_dir
                         + marker_strength * marker_dir)
        # f32 round-trip now so in-memory data matches a saved+loaded bundle
        features[pid] = rows.astype(np.float32).astype(np.float64)
    gene_matrix = GeneMatrix(patient_ids, [f"G{j:03d}" for j in range(genes)], gene_values)
    labels = {pid: int(lab) for pid, lab in zip(patient_ids, y)}
    provenance = {
        "generator": "synthetic",
        "format_version": 1,
        "n_patients": n_patients,
        "genes": genes,
        "patches": patches,
        "feature_dim": feature_dim,
        "gene_snr": gene_snr,
        "image_snr": image_snr,
        "overlap": overlap,
        "latent_noise": latent_noise,
        "informative_fraction": informative_fraction,
        "blend_fraction": blend_fraction,
        "blend_scale": blend_scale,
        "marker_strength": marker_strength,
        "patch_noise": patch_noise,
        "seed": seed,
    }
    return DatasetBundle(genes=gene_matrix, features=features, labels=labels,
                         provenance=provenance)


# ---------------------------------------------------------------------------
# report files

def write_report(report, path, fmt: str = "json") -> None:
    """Serialize an evaluation/ablation report as canonical JSON or a
    (fold, metric, value) CSV summary."""
    obj = report.to_dict() if hasattr(report, "to_dict") else report
    if fmt == "json":
        write_json(obj, path)
    elif fmt == "csv_summary":
        _write_csv_summary(obj, path)
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def _write_csv_summary(obj: dict, path) -> None:
    folds = obj.get("folds", [])
    aggregate = obj.get("aggregate", {})
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["section", "fold", "metric", "value"])
        for fold in folds:
            for name in ("accuracy", "f1", "mcc", "pr_auc"):
                writer.writerow(["fold", fold["fold"], name,
                                 format(fold["metrics"][name], ".9g")])
        for name, value in sorted(aggregate.get("mean", {}).items()):
            writer.writerow(["aggregate", "", f"mean_{name}", format(value, ".9g")])
        for name, value in sorted(aggregate.get("std", {}).items()):
            writer.writerow(["aggregate", "", f"std_{name}", format(value, ".9g")])
        for name, value in sorted(aggregate.get("counts", {}).items()):
            writer.writerow(["aggregate", "", f"total_{name}", str(value)])
