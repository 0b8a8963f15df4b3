"""Baseline attention variants and the dense masked oracle.

The oracle computes attention under an arbitrary {0, -inf} additive mask by
materializing the full L x L score matrix. It is O(L^2) on purpose: every
sparse variant in this package is checked against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .ops import masked_softmax, rope_embed
from .tensor import Tensor, concat, matmul, narrow, scale, transpose

NEG_INF = float("-inf")


@dataclass
class AttentionParams:
    """Projection matrices and layout for one attention layer.

    Shapes follow the right-multiplication convention: ``q = x @ w_q`` with
    ``x`` of shape (L, d) and ``w_q`` of shape (d, d_model).
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    head_count: int
    d_model: int
    d: int
    rope_base: float = 10000.0
    rope_pos_scale: float = 1.0
    use_rope: bool = True

    def __post_init__(self):
        if self.d_model % self.head_count != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by head count {self.head_count}")
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.shape != (self.d, self.d_model):
                raise ShapeError(f"{name} must be ({self.d}, {self.d_model}), got {w.shape}")
        if self.w_o.shape != (self.d_model, self.d):
            raise ShapeError(f"w_o must be ({self.d_model}, {self.d}), got {self.w_o.shape}")

    @property
    def head_dim(self):
        return self.d_model // self.head_count

    def matrices(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}

    @classmethod
    def random(cls, d, d_model, head_count=1, seed=0, dtype=np.float32, requires_grad=False, **kw):
        rng = np.random.default_rng(seed)

        def init(rows, cols):
            data = rng.standard_normal((rows, cols)) / math.sqrt(rows)
            return Tensor(data.astype(dtype), requires_grad=requires_grad)

        return cls(
            w_q=init(d, d_model),
            w_k=init(d, d_model),
            w_v=init(d, d_model),
            w_o=init(d_model, d),
            head_count=head_count,
            d_model=d_model,
            d=d,
            **kw,
        )


class AdditiveMask:
    """Per-(query, key) additive bias with entries restricted to {0, -inf}."""

    def __init__(self, bias):
        bias = np.asarray(bias)
        ok = (bias == 0.0) | np.isneginf(bias)
        if not ok.all():
            raise ConfigError("mask entries must be 0 or -inf")
        self.bias = bias

    @property
    def shape(self):
        return self.bias.shape

    def fully_masked_rows(self):
        return np.isneginf(self.bias).all(axis=-1)

    def visible(self):
        return self.bias == 0.0

    @classmethod
    def causal(cls, n, dtype=np.float32):
        bias = np.zeros((n, n), dtype=dtype)
        bias[np.triu_indices(n, 1)] = NEG_INF
        return cls(bias)

    @classmethod
    def sliding_window(cls, n, window, dtype=np.float32):
        if window < 1:
            raise ConfigError("window must be >= 1")
        idx = np.arange(n)
        visible = (idx[None, :] <= idx[:, None]) & (idx[None, :] > idx[:, None] - window)
        bias = np.where(visible, 0.0, NEG_INF).astype(dtype)
        return cls(bias)

    @classmethod
    def block_diagonal_causal(cls, n, chunk, dtype=np.float32):
        if chunk < 1:
            raise ConfigError("chunk size must be >= 1")
        idx = np.arange(n)
        same_chunk = idx[None, :] // chunk == idx[:, None] // chunk
        visible = same_chunk & (idx[None, :] <= idx[:, None])
        bias = np.where(visible, 0.0, NEG_INF).astype(dtype)
        return cls(bias)


def project_qkv(x, p):
    """Project the input and rotate queries/keys at their absolute positions."""
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    v = matmul(x, p.w_v)
    if p.use_rope:
        positions = np.arange(x.shape[0], dtype=np.float64)
        q = rope_embed(q, positions, base=p.rope_base, pos_scale=p.rope_pos_scale)
        k = rope_embed(k, positions, base=p.rope_base, pos_scale=p.rope_pos_scale)
    return q, k, v


def multi_head_attention(q, k, v, bias, p):
    """Softmax attention per head on already-projected tensors; heads are
    column slices of width d_model/head_count, concatenated afterwards."""
    dh = p.head_dim
    inv = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(p.head_count):
        lo, hi = h * dh, (h + 1) * dh
        qh = narrow(q, 1, lo, hi)
        kh = narrow(k, 1, lo, hi)
        vh = narrow(v, 1, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), inv)
        probs = masked_softmax(scores, bias)
        outs.append(matmul(probs, vh))
    merged = outs[0] if len(outs) == 1 else concat(outs, axis=1)
    return merged


def full_attention(x, p, causal=True):
    """Exact dense softmax attention over the whole sequence."""
    q, k, v = project_qkv(x, p)
    bias = AdditiveMask.causal(x.shape[0], dtype=x.dtype).bias if causal else None
    return matmul(multi_head_attention(q, k, v, bias, p), p.w_o)


def masked_oracle_attention(x, p, mask):
    """Dense attention under an arbitrary additive mask (the verification oracle)."""
    n = x.shape[0]
    if mask.shape != (n, n):
        raise ShapeError(f"mask must be ({n}, {n}), got {mask.shape}")
    if mask.fully_masked_rows().any():
        raise UsageError("oracle attention requires every query row to see at least one key")
    q, k, v = project_qkv(x, p)
    return matmul(multi_head_attention(q, k, v, mask.bias.astype(x.dtype), p), p.w_o)


def sliding_window_attention(x, p, window):
    """Causal attention where query t sees keys max(0, t-window+1)..t."""
    mask = AdditiveMask.sliding_window(x.shape[0], window, dtype=x.dtype)
    q, k, v = project_qkv(x, p)
    return matmul(multi_head_attention(q, k, v, mask.bias, p), p.w_o)


def block_diagonal_attention(x, p, chunk):
    """Causal attention computed independently inside each chunk (no memory).

    The final chunk may be shorter when the chunk size does not divide L;
    no padding tokens ever enter a softmax.
    """
    n = x.shape[0]
    q, k, v = project_qkv(x, p)
    outs = []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        qc = narrow(q, 0, start, stop)
        kc = narrow(k, 0, start, stop)
        vc = narrow(v, 0, start, stop)
        bias = AdditiveMask.causal(stop - start, dtype=x.dtype).bias
        outs.append(multi_head_attention(qc, kc, vc, bias, p))
    merged = outs[0] if len(outs) == 1 else concat(outs, axis=0)
    return matmul(merged, p.w_o)
