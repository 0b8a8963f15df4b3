"""Neural-network primitives built on the autodiff tensor core.

Argument conventions:
  * sequence tensors are (L, d) with time along axis 0,
  * additive masks are plain ndarrays with entries in {0, -inf}; they are
    constants and never receive gradients,
  * positions are floats so tests can exercise fractional rotation angles.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, InputError, ShapeError, UsageError
from .tensor import Tensor, _accum, _node


def masked_softmax(scores, bias=None):
    """Row softmax of ``scores + bias`` along the last axis.

    Rows whose bias is -inf everywhere come back as all zeros instead of NaN;
    callers that need to know which rows those are inspect the mask
    (``AdditiveMask.fully_masked_rows``).
    """
    z = scores.data if bias is None else scores.data + np.asarray(bias, dtype=scores.dtype)
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    safe = np.where(s > 0.0, s, 1.0)
    p = e / safe

    def grad_fn(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(scores, p * (g - dot))

    return _node(p, (scores,), grad_fn, "masked_softmax")


def rope_embed(t, positions, base=10000.0, pos_scale=1.0):
    """Rotate consecutive scalar pairs of each row by position-dependent angles.

    Pair i of a width-d row turns by angle ``position * base**(-2i/d)``.
    ``pos_scale`` > 1 compresses positions (linear interpolation for context
    extension); the default leaves them untouched.
    """
    d = t.data.shape[-1]
    if d % 2 != 0:
        raise ConfigError(f"rotary embedding needs an even width, got {d}")
    pos = np.asarray(positions, dtype=np.float64) / float(pos_scale)
    if pos.shape[0] != t.data.shape[0]:
        raise ShapeError("positions length must match the sequence length")
    if np.any(pos < 0):
        raise ConfigError("positions must be nonnegative")
    half = d // 2
    freqs = float(base) ** (-2.0 * np.arange(half, dtype=np.float64) / d)
    ang = np.outer(pos, freqs)
    cos = np.cos(ang).astype(t.dtype)
    sin = np.sin(ang).astype(t.dtype)

    x0 = t.data[:, 0::2]
    x1 = t.data[:, 1::2]
    out = np.empty_like(t.data)
    out[:, 0::2] = x0 * cos - x1 * sin
    out[:, 1::2] = x0 * sin + x1 * cos

    def grad_fn(g):
        g0 = g[:, 0::2]
        g1 = g[:, 1::2]
        gt = np.empty_like(t.data)
        gt[:, 0::2] = g0 * cos + g1 * sin
        gt[:, 1::2] = -g0 * sin + g1 * cos
        _accum(t, gt)

    return _node(out, (t,), grad_fn, "rope_embed")


def causal_conv1d(x, kernel, bias, max_width=None):
    """Depthwise causal FIR filter: out[t, c] = sum_tau kernel[tau, c] * x[t-tau, c] + bias[c].

    Tap 0 multiplies the current token; the sequence is left-padded with
    zeros so the output has the same length as the input.
    """
    w, d = kernel.data.shape
    if max_width is not None and w > max_width:
        raise ConfigError(f"conv kernel width {w} exceeds configured maximum {max_width}")
    if x.data.shape[1] != d:
        raise ShapeError("conv kernel channel count must match the input width")
    length = x.data.shape[0]
    xp = np.vstack([np.zeros((w - 1, d), dtype=x.dtype), x.data]) if w > 1 else x.data
    out = np.zeros_like(x.data)
    for tau in range(w):
        out += kernel.data[tau] * xp[w - 1 - tau : w - 1 - tau + length]
    out = out + bias.data

    def grad_fn(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for tau in range(w):
                gxp[w - 1 - tau : w - 1 - tau + length] += kernel.data[tau] * g
            _accum(x, gxp[w - 1 :] if w > 1 else gxp)
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for tau in range(w):
                gk[tau] = (g * xp[w - 1 - tau : w - 1 - tau + length]).sum(axis=0)
            _accum(kernel, gk)
        _accum(bias, g.sum(axis=0))

    return _node(out, (x, kernel, bias), grad_fn, "causal_conv1d")


def linear_recurrence(u, a, b):
    """Per-channel scan h_t = a * h_{t-1} + b * u_t with h_0 = 0.

    ``a`` and ``b`` are per-channel vectors; a single graph node hides the
    sequential loop so the tape stays short on long sequences.
    """
    length, d = u.data.shape
    if a.data.shape != (d,) or b.data.shape != (d,):
        raise ShapeError("recurrence coefficients must be per-channel vectors")
    hs = np.empty_like(u.data)
    h = np.zeros(d, dtype=u.dtype)
    ad = a.data
    bd = b.data
    for t in range(length):
        h = ad * h + bd * u.data[t]
        hs[t] = h

    def grad_fn(g):
        lam = np.zeros(d, dtype=u.dtype)
        gu = np.empty_like(u.data) if u.requires_grad else None
        ga = np.zeros(d, dtype=u.dtype)
        gb = np.zeros(d, dtype=u.dtype)
        for t in range(length - 1, -1, -1):
            lam = g[t] + ad * lam
            if gu is not None:
                gu[t] = bd * lam
            gb += lam * u.data[t]
            if t > 0:
                ga += lam * hs[t - 1]
        if gu is not None:
            _accum(u, gu)
        _accum(a, ga)
        _accum(b, gb)

    return _node(hs, (u, a, b), grad_fn, "linear_recurrence")


def rms_norm(x, weight, eps=1e-6):
    """Row-wise RMS normalization with a learned per-channel gain."""
    d = x.data.shape[-1]
    if weight.data.shape != (d,):
        raise ShapeError("norm weight must match the channel width")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    xn = x.data / r
    out = xn * weight.data

    def grad_fn(g):
        if weight.requires_grad:
            _accum(weight, (g * xn).sum(axis=0))
        if x.requires_grad:
            gw = g * weight.data
            inner = (gw * x.data).sum(axis=-1, keepdims=True)
            _accum(x, gw / r - x.data * inner / (d * r**3))

    return _node(out, (x, weight), grad_fn, "rms_norm")


def sigmoid(x):
    xd = x.data
    out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))), np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    out = out.astype(x.dtype)

    def grad_fn(g):
        _accum(x, g * out * (1.0 - out))

    return _node(out, (x,), grad_fn, "sigmoid")


def embedding_lookup(table, ids):
    """Gather rows of an embedding table; grads scatter-add back into it."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ShapeError("token ids must be a 1-d sequence")
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"token id out of range for vocab of size {vocab}")
    out = table.data[ids].copy()

    def grad_fn(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _node(out, (table,), grad_fn, "embedding_lookup")


def cross_entropy_logits(logits, targets, ignore_index=None):
    """Mean next-token cross entropy over non-ignored targets."""
    targets = np.asarray(targets)
    if targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeError("targets must be a 1-d sequence aligned with the logit rows")
    keep = np.ones(targets.shape[0], dtype=bool) if ignore_index is None else targets != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise UsageError("cross entropy over zero valid targets")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(targets.shape[0])
    safe_targets = np.where(keep, targets, 0)
    nll = -(logp[rows, safe_targets] * keep)
    out = np.asarray(nll.sum() / n, dtype=logits.dtype)

    def grad_fn(g):
        if logits.requires_grad:
            soft = np.exp(logp)
            soft[rows, safe_targets] -= 1.0
            soft *= (keep[:, None] * np.asarray(g).reshape(-1)[0]) / n
            _accum(logits, soft.astype(logits.dtype))

    return _node(out, (logits,), grad_fn, "cross_entropy")
