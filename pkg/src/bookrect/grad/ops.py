"""Neural-network operators on top of the tensor primitives.

Convolution uses an im2col buffer and a slice-based col2im adjoint, so both
directions reduce to one large matrix product. Attention is composed from the
primitives and differentiates through the tape like everything else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    bias_add,
    concat,
    matmul,
    mul,
    record_op,
    reshape,
    transpose,
)

__all__ = [
    "relu",
    "softmax",
    "layer_norm",
    "instance_norm",
    "linear",
    "conv2d",
    "AttentionParams",
    "multi_head_attention",
]


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return record_op("relu", np.where(mask, x.data, 0.0), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis if -x.ndim <= axis < x.ndim else None
    if ax is None:
        raise ShapeError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            x.accumulate_grad(y * (g - inner))

    return record_op("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing channel axis, then apply per-channel affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} != ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gain.data + bias.data
    red = tuple(range(x.ndim - 1))

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=red))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))

    return record_op("layer_norm", y, (x, gain, bias), backward)


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize a (C, H, W) map over its spatial extent, per channel."""
    if x.ndim != 3:
        raise ShapeError(f"instance_norm: expected (C, H, W), got {x.shape}")
    c = x.shape[0]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"instance_norm: affine shapes {gain.shape}/{bias.shape} != ({c},)")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    var = x.data.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g3 = gain.data[:, None, None]
    y = xhat * g3 + bias.data[:, None, None]

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=(1, 2)))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(1, 2)))
        if x.requires_grad:
            dxhat = g * g3
            m1 = dxhat.mean(axis=(1, 2), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(1, 2), keepdims=True)
            x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))

    return record_op("instance_norm", y, (x, gain, bias), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w with optional bias on the last axis. x: (..., C), w: (C, D)."""
    if x.ndim == 2:
        y = matmul(x, w)
    else:
        lead = x.shape[:-1]
        flat = reshape(x, (int(np.prod(lead)), x.shape[-1]))
        y = reshape(matmul(flat, w), lead + (w.shape[-1],))
    if b is not None:
        y = bias_add(y, b, axis=-1)
    return y


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, ki : ki + s * ho : s, kj : kj + s * wo : s]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, shape, k: int, s: int, p: int, ho: int, wo: int) -> np.ndarray:
    c, h, w = shape
    dxp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    dc = dcols.reshape(c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            dxp[:, ki : ki + s * ho : s, kj : kj + s * wo : s] += dc[:, ki, kj]
    if p:
        return dxp[:, p:-p, p:-p]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of a (C_in, H, W) map with (C_out, C_in, k, k) filters."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: ranks {x.shape} / {w.shape}")
    cin, h, wid = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != filter channels {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - k) // s + 1
    wo = (wid + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {h + 2 * p}x{wid + 2 * p}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, s, ho, wo)
    wmat = w.data.reshape(cout, cin * k * k)
    out = (wmat @ cols).reshape(cout, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]

    def backward(g):
        gmat = g.reshape(cout, ho * wo)
        if b is not None and b.requires_grad:
            b.accumulate_grad(gmat.sum(axis=1))
        if w.requires_grad:
            w.accumulate_grad((gmat @ cols.T).reshape(w.shape))
        if x.requires_grad:
            dcols = wmat.T @ gmat
            x.accumulate_grad(_col2im(dcols, x.shape, k, s, p, ho, wo))

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv2d", out, inputs, backward)


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention block."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, heads: int) -> Tensor:
    """Scaled dot-product attention over token matrices.

    q: (L_q, C); k, v: (L_k, C). Per-head scale is 1/sqrt(C/heads); head
    outputs are concatenated and passed through the output projection.
    """
    lq, c = q.shape
    lk, ck = k.shape
    if ck != c or v.shape != (lk, c):
        raise ShapeError(f"attention: inconsistent token widths {q.shape}, {k.shape}, {v.shape}")
    if c % heads != 0:
        raise ConfigError(f"attention: width {c} not divisible by {heads} heads")
    d = c // heads

    qp = linear(q, params.wq, params.bq)
    kp = linear(k, params.wk, params.bk)
    vp = linear(v, params.wv, params.bv)

    qh = transpose(reshape(qp, (lq, heads, d)), (1, 0, 2))  # (h, Lq, d)
    kh = transpose(reshape(kp, (lk, heads, d)), (1, 2, 0))  # (h, d, Lk)
    vh = transpose(reshape(vp, (lk, heads, d)), (1, 0, 2))  # (h, Lk, d)

    att = softmax(mul(matmul(qh, kh), 1.0 / math.sqrt(d)), axis=-1)
    mixed = matmul(att, vh)  # (h, Lq, d)
    merged = reshape(transpose(mixed, (1, 0, 2)), (lq, c))
    return linear(merged, params.wo, params.bo)
