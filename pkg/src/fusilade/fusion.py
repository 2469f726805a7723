"""Two-pathway classifier with concat, late and cross-attention fusion.

The gene pathway encodes an expression vector, the image pathway encodes
per-patient patch-feature rows (mean-pooled except under cross-attention,
which attends over the un-pooled patch sequence with the gene embedding as
query). All strategies end in a sigmoid over one logit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn_core import (Dense, MultiHeadCrossAttention, Relu, ShapeError,
                      Sigmoid, bce_grad, bce_loss)

STRATEGIES = ("gene_only", "image_only", "concat", "late", "cross_attention")

CHECKPOINT_MAGIC = b"FUSM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    strategy: str
    gene_dim: int
    image_dim: int
    hidden_dim: int = 512
    embed_dim: int = 128
    num_heads: int = 4
    head_dim: int = 32
    attend_both_ways: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        for name in ("gene_dim", "image_dim", "hidden_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.strategy == "cross_attention":
            if self.num_heads < 1 or self.head_dim < 1:
                raise ValueError("num_heads and head_dim must be positive")
            if self.num_heads * self.head_dim != self.embed_dim:
                raise ValueError(
                    f"num_heads * head_dim ({self.num_heads}x{self.head_dim}) must equal "
                    f"embed_dim {self.embed_dim}")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "gene_dim": self.gene_dim,
            "image_dim": self.image_dim,
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "attend_both_ways": self.attend_both_ways,
        }


class Encoder:
    """dense -> relu -> dense -> relu."""

    def __init__(self, in_dim, hidden_dim, out_dim, rng):
        self.fc1 = Dense(in_dim, hidden_dim, rng)
        self.act1 = Relu()
        self.fc2 = Dense(hidden_dim, out_dim, rng)
        self.act2 = Relu()
        self._layers = (self.fc1, self.act1, self.fc2, self.act2)

    def forward(self, x):
        for layer in self._layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self._layers):
            grad = layer.backward(grad)
        return grad

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def reset(self):
        for layer in self._layers:
            layer.reset()


def _check_patches(patches, image_dim):
    out = []
    for i, f in enumerate(patches):
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ShapeError(f"patch features #{i} must be [P >= 1, D], got {f.shape}")
        if f.shape[1] != image_dim:
            raise ShapeError(f"patch features #{i} have dim {f.shape[1]}, model expects {image_dim}")
        out.append(f)
    return out


def _pool(patches):
    return np.stack([f.mean(axis=0) for f in patches])


class FusionModel:
    """One strategy's full parameter set and forward/backward passes.

    ``forward`` caches intermediates for one backward pass; ``predict_proba``
    is the inference entry point (no caches retained). After a
    cross-attention forward, ``last_attention`` holds one [heads, 1, P] weight
    array per patient.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        c = config
        # construction order fixes the parameter/checkpoint layout
        self._components: list = []
        self.gene_encoder = self.image_encoder = None
        self.gene_head = self.image_head = self.head = None
        self.attention = self.attention_rev = None
        if c.strategy in ("gene_only", "concat", "late", "cross_attention"):
            self.gene_encoder = self._add(Encoder(c.gene_dim, c.hidden_dim, c.embed_dim, rng))
        if c.strategy in ("gene_only", "late"):
            self.gene_head = self._add(Dense(c.embed_dim, 1, rng))
        if c.strategy in ("image_only", "concat", "late", "cross_attention"):
            self.image_encoder = self._add(Encoder(c.image_dim, c.hidden_dim, c.embed_dim, rng))
        if c.strategy in ("image_only", "late"):
            self.image_head = self._add(Dense(c.embed_dim, 1, rng))
        if c.strategy == "cross_attention":
            self.attention = self._add(MultiHeadCrossAttention(
                c.embed_dim, c.embed_dim, c.num_heads, c.head_dim, rng))
            if c.attend_both_ways:
                self.attention_rev = self._add(MultiHeadCrossAttention(
                    c.embed_dim, c.embed_dim, c.num_heads, c.head_dim, rng))
        if c.strategy in ("concat", "cross_attention"):
            self.head = self._add(Dense(2 * c.embed_dim, 1, rng))
        if c.strategy in ("gene_only", "image_only"):
            self.head = self.gene_head if c.strategy == "gene_only" else self.image_head
        self._sig = Sigmoid()
        self._sig_gene = Sigmoid()
        self._sig_image = Sigmoid()
        self.last_attention: list[np.ndarray] | None = None
        self._fwd = None  # per-forward cache for backward()

    def _add(self, component):
        self._components.append(component)
        return component

    def params(self):
        out = []
        for comp in self._components:
            out.extend(comp.params())
        return out

    def zero_grad(self):
        for _, g in self.params():
            g[...] = 0.0

    def reset(self):
        for comp in self._components:
            comp.reset()
        for sig in (self._sig, self._sig_gene, self._sig_image):
            sig.reset()
        self._fwd = None

    def snapshot(self) -> list[np.ndarray]:
        return [v.copy() for v, _ in self.params()]

    def restore(self, snapshot: list[np.ndarray]) -> None:
        for (v, _), saved in zip(self.params(), snapshot):
            v[...] = saved

    # -- pathways ----------------------------------------------------------

    def gene_embedding(self, gene_x) -> np.ndarray:
        if self.gene_encoder is None:
            raise ShapeError(f"strategy {self.config.strategy!r} has no gene pathway")
        return self.gene_encoder.forward(gene_x)

    def image_embedding(self, patches) -> np.ndarray:
        """Mean-pool patch rows per patient, then encode."""
        if self.image_encoder is None:
            raise ShapeError(f"strategy {self.config.strategy!r} has no image pathway")
        patches = _check_patches(patches, self.config.image_dim)
        return self.image_encoder.forward(_pool(patches))

    # -- forward / backward ------------------------------------------------

    def forward(self, gene_x, patches) -> np.ndarray:
        """Probabilities for a batch; caches everything one backward needs."""
        s = self.config.strategy
        if s == "gene_only":
            z = self.gene_head.forward(self.gene_embedding(gene_x))
            p = self._sig.forward(z)[:, 0]
            self._fwd = {}
        elif s == "image_only":
            z = self.image_head.forward(self.image_embedding(patches))
            p = self._sig.forward(z)[:, 0]
            self._fwd = {}
        elif s == "concat":
            e_gene = self.gene_embedding(gene_x)
            e_img = self.image_embedding(patches)
            fused = np.hstack([e_img, e_gene])
            p = self._sig.forward(self.head.forward(fused))[:, 0]
            self._fwd = {}
        elif s == "late":
            p_gene = self._sig_gene.forward(self.gene_head.forward(self.gene_embedding(gene_x)))[:, 0]
            p_image = self._sig_image.forward(self.image_head.forward(self.image_embedding(patches)))[:, 0]
            p = 0.5 * (p_gene + p_image)
            self._fwd = {"p_gene": p_gene, "p_image": p_image}
        elif s == "cross_attention":
            p = self._forward_cross(gene_x, patches)
        else:  # pragma: no cover
            raise AssertionError(s)
        return p

    def _forward_cross(self, gene_x, patches) -> np.ndarray:
        patches = _check_patches(patches, self.config.image_dim)
        e_gene = self.gene_embedding(gene_x)
        if e_gene.shape[0] != len(patches):
            raise ShapeError(f"{e_gene.shape[0]} gene rows vs {len(patches)} patch matrices")
        counts = [f.shape[0] for f in patches]
        ctx_all = self.image_encoder.forward(np.vstack(patches))
        offsets = np.concatenate(([0], np.cumsum(counts)))
        batched = len(set(counts)) == 1  # uniform patch counts take the fused path
        rev_rows = []
        if batched:
            n, p = len(patches), counts[0]
            ctx_3d = ctx_all.reshape(n, p, -1)
            attended = self.attention.forward_single_query_batch(e_gene, ctx_3d)
            weights = self.attention.last_weights  # [heads, n, p]
            self.last_attention = [weights[:, i:i + 1, :].copy() for i in range(n)]
            if self.attention_rev is not None:
                pooled = ctx_3d.mean(axis=1)
                rev = self.attention_rev.forward_single_query_batch(
                    pooled, e_gene[:, None, :])
        else:
            attended = np.empty_like(e_gene)
            self.last_attention = []
            for i in range(len(patches)):
                ctx = ctx_all[offsets[i]:offsets[i + 1]]
                attended[i] = self.attention.forward(e_gene[i:i + 1], ctx)[0]
                self.last_attention.append(self.attention.last_weights.copy())
                if self.attention_rev is not None:
                    pooled = ctx.mean(axis=0, keepdims=True)
                    rev_rows.append(self.attention_rev.forward(pooled, e_gene[i:i + 1])[0])
            if self.attention_rev is not None:
                rev = np.stack(rev_rows)
        if self.attention_rev is not None:
            fused = np.hstack([attended, rev])
        else:
            fused = np.hstack([attended, e_gene])
        p = self._sig.forward(self.head.forward(fused))[:, 0]
        self._fwd = {"counts": counts, "offsets": offsets,
                     "n_ctx_rows": int(offsets[-1]), "batched": batched}
        return p

    def backward(self, dprob) -> None:
        """Backprop d(loss)/d(probability) into parameter gradients."""
        if self._fwd is None:
            raise RuntimeError("backward called before forward")
        s = self.config.strategy
        dprob = np.asarray(dprob, dtype=np.float64)
        if s == "gene_only":
            g = self.gene_head.backward(self._sig.backward(dprob[:, None]))
            self.gene_encoder.backward(g)
        elif s == "image_only":
            g = self.image_head.backward(self._sig.backward(dprob[:, None]))
            self.image_encoder.backward(g)
        elif s == "concat":
            g = self.head.backward(self._sig.backward(dprob[:, None]))
            e = self.config.embed_dim
            # forward order was gene then image; unwind in reverse
            self.image_encoder.backward(g[:, :e])
            self.gene_encoder.backward(g[:, e:])
        elif s == "late":
            self._backward_late(0.5 * dprob, 0.5 * dprob)
        elif s == "cross_attention":
            self._backward_cross(dprob)
        self._fwd = None

    def _backward_late(self, dp_gene, dp_image) -> None:
        g_img = self.image_head.backward(self._sig_image.backward(dp_image[:, None]))
        self.image_encoder.backward(g_img)
        g_gene = self.gene_head.backward(self._sig_gene.backward(dp_gene[:, None]))
        self.gene_encoder.backward(g_gene)

    def _backward_cross(self, dprob) -> None:
        cache = self._fwd
        g_fused = self.head.backward(self._sig.backward(dprob[:, None]))
        e = self.config.embed_dim
        g_att, g_right = g_fused[:, :e], g_fused[:, e:]
        n = len(cache["counts"])
        offsets = cache["offsets"]
        if cache["batched"]:
            p = cache["counts"][0]
            g_gene = np.zeros((n, e))
            if self.attention_rev is not None:
                g_pooled, g_gene_ctx = self.attention_rev.backward_single_query_batch(g_right)
                g_gene += g_gene_ctx[:, 0, :]
                g_ctx_3d = np.broadcast_to(g_pooled[:, None, :] / p, (n, p, e)).copy()
            else:
                g_ctx_3d = np.zeros((n, p, e))
            g_q, g_ctx = self.attention.backward_single_query_batch(g_att)
            g_gene += g_q
            g_ctx_3d += g_ctx
            g_ctx_all = g_ctx_3d.reshape(n * p, e)
        else:
            g_ctx_all = np.zeros((cache["n_ctx_rows"], e))
            g_gene = np.zeros((n, e))
            for i in reversed(range(n)):
                if self.attention_rev is not None:
                    g_pooled, g_gene_ctx = self.attention_rev.backward(g_right[i:i + 1])
                    g_gene[i] += g_gene_ctx[0]
                    lo, hi = offsets[i], offsets[i + 1]
                    g_ctx_all[lo:hi] += g_pooled[0] / cache["counts"][i]
                g_q, g_ctx = self.attention.backward(g_att[i:i + 1])
                g_gene[i] += g_q[0]
                g_ctx_all[offsets[i]:offsets[i + 1]] += g_ctx
        if self.attention_rev is None:
            g_gene += g_right
        self.image_encoder.backward(g_ctx_all)
        self.gene_encoder.backward(g_gene)

    # -- training / inference helpers --------------------------------------

    def training_loss_and_backward(self, gene_x, patches, y) -> tuple[float, np.ndarray]:
        """Forward + backward of the training objective; returns (loss, probs).

        Late fusion trains its two unimodal heads on their own losses
        (decision-level fusion: the decoupled sum is exactly separate
        unimodal training); every other strategy trains BCE on its fused
        probability.
        """
        p = self.forward(gene_x, patches)
        if self.config.strategy == "late":
            p_gene, p_image = self._fwd["p_gene"], self._fwd["p_image"]
            loss = bce_loss(p_gene, y) + bce_loss(p_image, y)
            self._backward_late(bce_grad(p_gene, y), bce_grad(p_image, y))
            self._fwd = None
        else:
            loss = bce_loss(p, y)
            self.backward(bce_grad(p, y))
        return loss, p

    def predict_proba(self, gene_x, patches) -> np.ndarray:
        p = self.forward(gene_x, patches)
        self.reset()
        return p


def predict(model: FusionModel, genes, features: dict, patient_ids=None
            ) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Batched inference over named patients.

    Returns (probabilities, attention weights or None). Raises when a patient
    is missing either modality, naming patient and modality.
    """
    if patient_ids is None:
        patient_ids = list(genes.patient_ids)
    gene_index = {p: i for i, p in enumerate(genes.patient_ids)}
    for pid in patient_ids:
        if pid not in gene_index:
            raise ValueError(f"patient {pid!r} missing gene expression")
        if pid not in features:
            raise ValueError(f"patient {pid!r} missing image features")
    gene_x = genes.values[[gene_index[p] for p in patient_ids]]
    patches = [features[p] for p in patient_ids]
    probs = model.predict_proba(gene_x, patches)
    attention = model.last_attention if model.config.strategy == "cross_attention" else None
    return probs, attention


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, strategy tag, dims, then parameters as
# little-endian f64 in declaration order. Round-trips byte-exactly.

def save_model(model: FusionModel, path) -> None:
    c = model.config
    tag = c.strategy.encode("ascii")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<H", len(tag)))
        f.write(tag)
        f.write(struct.pack("<6I", c.gene_dim, c.image_dim, c.hidden_dim,
                            c.embed_dim, c.num_heads, c.head_dim))
        f.write(struct.pack("<B", int(c.attend_both_ways)))
        for value, _ in model.params():
            f.write(value.astype("<f8").tobytes())


def load_model(path) -> FusionModel:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a FUSM checkpoint (magic {data[:4]!r})")
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (tag_len,) = struct.unpack_from("<H", data, pos)
    pos += 2
    strategy = data[pos:pos + tag_len].decode("ascii")
    pos += tag_len
    gene_dim, image_dim, hidden_dim, embed_dim, num_heads, head_dim = \
        struct.unpack_from("<6I", data, pos)
    pos += 24
    (both_ways,) = struct.unpack_from("<B", data, pos)
    pos += 1
    config = ModelConfig(strategy=strategy, gene_dim=gene_dim, image_dim=image_dim,
                         hidden_dim=hidden_dim, embed_dim=embed_dim,
                         num_heads=num_heads, head_dim=head_dim,
                         attend_both_ways=bool(both_ways))
    model = FusionModel(config, rng=None)
    for value, _ in model.params():
        end = pos + value.size * 8
        if end > len(data):
            raise ValueError(f"{path}: checkpoint truncated")
        value[...] = np.frombuffer(data[pos:end], dtype="<f8").reshape(value.shape)
        pos = end
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes after parameters")
    return model
