"""Dense neural-network kernel: forward and analytic backward passes.

Everything runs in float64. Layers cache their forward intermediates on an
internal stack, so a layer may be applied several times before the matching
backward calls (which must come in reverse order). ``numeric_gradient``
provides the central finite-difference oracle the gradient-check tests
compare against.
"""

from __future__ import annotations

import math

import numpy as np

# Clamp applied to probabilities inside the binary cross-entropy.
BCE_EPS = 1e-7


class ShapeError(ValueError):
    """An operand's shape does not match the layer's contract."""


class StateError(RuntimeError):
    """Backward was called without a matching forward pass."""


def as_matrix(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def glorot_uniform(rng: np.random.Generator, in_dim: int, out_dim: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(in_dim, out_dim))


class Layer:
    """Base class: a cache stack plus parameter bookkeeping."""

    def __init__(self):
        self._cache: list = []

    def _push(self, item) -> None:
        self._cache.append(item)

    def _pop(self):
        if not self._cache:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache.pop()

    def reset(self) -> None:
        """Drop cached intermediates (after inference-only forwards)."""
        self._cache.clear()

    def params(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(value, gradient) array pairs, in declaration order."""
        return []

    def zero_grad(self) -> None:
        for _, g in self.params():
            g[...] = 0.0


class Dense(Layer):
    """Fully connected layer: y = x @ w + b.

    Weights are Glorot-uniform when an rng is given, zeros otherwise
    (checkpoint loading fills them in). Biases start at zero.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            self.w = np.zeros((in_dim, out_dim))
        else:
            self.w = glorot_uniform(rng, in_dim, out_dim)
        self.b = np.zeros(out_dim)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(
                f"dense layer expects {self.in_dim} input columns, "
                f"got input {x.shape} against weights {self.w.shape}"
            )
        self._push(x)
        return x @ self.w + self.b

    def backward(self, grad_out) -> np.ndarray:
        grad_out = as_matrix(grad_out, "grad_out")
        x = self._pop()
        self.gw += x.T @ grad_out
        self.gb += grad_out.sum(axis=0)
        return grad_out @ self.w.T

    def params(self):
        return [(self.w, self.gw), (self.b, self.gb)]


class Relu(Layer):
    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        mask = x > 0.0  # gradient defined as 0 at exactly 0
        self._push(mask)
        return np.where(mask, x, 0.0)

    def backward(self, grad_out) -> np.ndarray:
        mask = self._pop()
        return np.where(mask, grad_out, 0.0)


class Sigmoid(Layer):
    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        y = sigmoid(x)
        self._push(y)
        return y

    def backward(self, grad_out) -> np.ndarray:
        y = self._pop()
        return grad_out * y * (1.0 - y)


class SoftmaxRows(Layer):
    def forward(self, x) -> np.ndarray:
        y = softmax_rows(x)
        self._push(y)
        return y

    def backward(self, grad_out) -> np.ndarray:
        y = self._pop()
        return y * (grad_out - np.sum(grad_out * y, axis=-1, keepdims=True))


def relu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, 0.0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1 and stay positive."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ShapeError("softmax_rows needs at least one column")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def activation_forward(x, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_rows":
        return softmax_rows(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def scaled_dot_attention(q, k, v) -> tuple[np.ndarray, np.ndarray]:
    """Single-head attention core: softmax(q k^T / sqrt(d)) v.

    Returns (output [m x dv], weights [m x n]).
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if k.shape[0] == 0:
        raise ShapeError("attention needs at least one context row (no keys to attend over)")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key rows {k.shape} do not match value rows {v.shape}")
    scores = q @ k.T / math.sqrt(q.shape[1])
    weights = softmax_rows(scores)
    return weights @ v, weights


class MultiHeadCrossAttention(Layer):
    """Multi-head attention of a query sequence over a context sequence.

    Query/key/value/output projections are Dense layers; heads are slices of
    the projected model dimension. The most recent forward's attention
    weights are kept on ``last_weights`` ([heads, m, n]) for inspection.
    """

    def __init__(self, query_dim: int, context_dim: int, num_heads: int,
                 head_dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.model_dim = num_heads * head_dim
        self.w_query = Dense(query_dim, self.model_dim, rng)
        self.w_key = Dense(context_dim, self.model_dim, rng)
        self.w_value = Dense(context_dim, self.model_dim, rng)
        self.w_output = Dense(self.model_dim, self.model_dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        # [rows, model_dim] -> [heads, rows, head_dim]
        return x.reshape(x.shape[0], self.num_heads, self.head_dim).transpose(1, 0, 2)

    def _merge_heads(self, x: np.ndarray) -> np.ndarray:
        return x.transpose(1, 0, 2).reshape(x.shape[1], self.model_dim)

    def forward(self, query_seq, context_seq) -> np.ndarray:
        query_seq = as_matrix(query_seq, "query_seq")
        context_seq = as_matrix(context_seq, "context_seq")
        if context_seq.shape[0] == 0:
            raise ShapeError("attention needs at least one context row (no keys to attend over)")
        q = self._split_heads(self.w_query.forward(query_seq))
        k = self._split_heads(self.w_key.forward(context_seq))
        v = self._split_heads(self.w_value.forward(context_seq))
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(self.head_dim)
        weights = softmax_rows(scores)
        heads = weights @ v
        self._push(("seq", q, k, v, weights))
        self.last_weights = weights
        return self.w_output.forward(self._merge_heads(heads))

    def backward(self, grad_out) -> tuple[np.ndarray, np.ndarray]:
        """Returns (grad wrt query_seq, grad wrt context_seq)."""
        grad_out = as_matrix(grad_out, "grad_out")
        cache = self._pop()
        if cache[0] != "seq":
            raise StateError("cached forward was not a sequence forward")
        _, q, k, v, weights = cache
        g_heads = self._split_heads(self.w_output.backward(grad_out))
        g_weights = g_heads @ v.transpose(0, 2, 1)
        g_v = weights.transpose(0, 2, 1) @ g_heads
        g_scores = weights * (g_weights - np.sum(g_weights * weights, axis=-1, keepdims=True))
        scale = 1.0 / math.sqrt(self.head_dim)
        g_q = g_scores @ k * scale
        g_k = g_scores.transpose(0, 2, 1) @ q * scale
        g_query = self.w_query.backward(self._merge_heads(g_q))
        g_context = self.w_key.backward(self._merge_heads(g_k))
        g_context = g_context + self.w_value.backward(self._merge_heads(g_v))
        return g_query, g_context

    def forward_single_query_batch(self, queries, contexts) -> np.ndarray:
        """Batched attention for the one-query-per-sample case.

        ``queries`` is [n x dq] (one query row per sample), ``contexts`` is
        [n x p x dc]; sample i attends only over its own context rows. Same
        math as n separate forward() calls, fused into whole-batch einsums.
        """
        queries = as_matrix(queries, "queries")
        contexts = np.asarray(contexts, dtype=np.float64)
        if contexts.ndim != 3 or contexts.shape[0] != queries.shape[0]:
            raise ShapeError(f"contexts must be [n x p x dc] matching queries, "
                             f"got {contexts.shape} vs {queries.shape}")
        n, p, dc = contexts.shape
        if p == 0:
            raise ShapeError("attention needs at least one context row (no keys to attend over)")
        h, d = self.num_heads, self.head_dim
        q = self.w_query.forward(queries).reshape(n, h, d).transpose(1, 0, 2)
        k = self.w_key.forward(contexts.reshape(n * p, dc))
        v = self.w_value.forward(contexts.reshape(n * p, dc))
        k = k.reshape(n, p, h, d).transpose(2, 0, 1, 3)  # [h, n, p, d]
        v = v.reshape(n, p, h, d).transpose(2, 0, 1, 3)
        scores = np.einsum("hnd,hnpd->hnp", q, k) / math.sqrt(d)
        weights = softmax_rows(scores)
        heads = np.einsum("hnp,hnpd->hnd", weights, v)
        self._push(("batch", q, k, v, weights, (n, p, dc)))
        self.last_weights = weights
        return self.w_output.forward(heads.transpose(1, 0, 2).reshape(n, self.model_dim))

    def backward_single_query_batch(self, grad_out) -> tuple[np.ndarray, np.ndarray]:
        """Returns (grad wrt queries [n x dq], grad wrt contexts [n x p x dc])."""
        grad_out = as_matrix(grad_out, "grad_out")
        cache = self._pop()
        if cache[0] != "batch":
            raise StateError("cached forward was not a single-query batch")
        _, q, k, v, weights, (n, p, dc) = cache
        h, d = self.num_heads, self.head_dim
        g_heads = self.w_output.backward(grad_out).reshape(n, h, d).transpose(1, 0, 2)
        g_weights = np.einsum("hnd,hnpd->hnp", g_heads, v)
        g_v = np.einsum("hnp,hnd->hnpd", weights, g_heads)
        g_scores = weights * (g_weights - np.sum(g_weights * weights, axis=-1, keepdims=True))
        scale = 1.0 / math.sqrt(d)
        g_q = np.einsum("hnp,hnpd->hnd", g_scores, k) * scale
        g_k = np.einsum("hnp,hnd->hnpd", g_scores, q) * scale
        g_queries = self.w_query.backward(g_q.transpose(1, 0, 2).reshape(n, self.model_dim))
        g_k_flat = g_k.transpose(1, 2, 0, 3).reshape(n * p, self.model_dim)
        g_v_flat = g_v.transpose(1, 2, 0, 3).reshape(n * p, self.model_dim)
        g_contexts = self.w_key.backward(g_k_flat) + self.w_value.backward(g_v_flat)
        return g_queries, g_contexts.reshape(n, p, dc)

    def reset(self):
        super().reset()
        for layer in (self.w_query, self.w_key, self.w_value, self.w_output):
            layer.reset()

    def params(self):
        out = []
        for layer in (self.w_query, self.w_key, self.w_value, self.w_output):
            out.extend(layer.params())
        return out


def bce_loss(p, y) -> float:
    """Mean binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    if p.size == 0:
        raise ShapeError("bce_loss needs at least one sample")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))


def bce_grad(p, y) -> np.ndarray:
    """d(mean BCE)/dp; zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    g = (pc - y) / (pc * (1.0 - pc)) / p.size
    return np.where(inside, g, 0.0)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() wrt x, perturbing x in place."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic, numeric) -> float:
    """Max elementwise relative error, floored at 1e-3 in the denominator so
    finite-difference noise on true-zero gradients does not register."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
    return float(np.max(np.abs(a - n) / denom))
