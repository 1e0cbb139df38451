"""Warping flows and differentiable resampling.

A flow assigns every target pixel a backward sampling coordinate into some
source image. Coordinates are stored normalized to [-1, 1] where -1 is the
center of the first source pixel and +1 the center of the last (align-corners
convention), so flows are resolution-free: the same flow rectifies a source
of any size, and resizing a flow is pure interpolation of its two channels.

Numpy-level utilities operate on :class:`WarpFlow`; the differentiable ops
(:func:`bilinear_sample`, :func:`convex_upsample`) run on grad tensors and
participate in the tape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .grad.tensor import ShapeError, Tensor, record_op

__all__ = [
    "WarpFlow",
    "UpsampleWeights",
    "InversionError",
    "identity_coords",
    "bilinear_sample",
    "convex_upsample",
    "convex_upsample_flow",
    "resize_flow",
    "split_full_flow",
    "stitch_pages",
    "invert_flow",
    "bilinear_resize",
    "save_flow",
    "load_flow",
    "UPSAMPLE_FACTOR",
]

UPSAMPLE_FACTOR = 8

_FLOW_MAGIC = b"BKFL"
_FLOW_VERSION = 1


class InversionError(RuntimeError):
    """Raised when numeric flow inversion fails to converge."""


def identity_coords(height: int, width: int, dtype=np.float64) -> np.ndarray:
    """(H, W, 2) grid of normalized coordinates; channel 0 is u (width axis)."""
    if height < 1 or width < 1:
        raise ShapeError(f"identity_coords: bad extents {height}x{width}")
    u = np.linspace(-1.0, 1.0, width, dtype=dtype)
    v = np.linspace(-1.0, 1.0, height, dtype=dtype)
    out = np.empty((height, width, 2), dtype=dtype)
    out[..., 0] = u[None, :]
    out[..., 1] = v[:, None]
    return out


@dataclass
class WarpFlow:
    """Dense backward sampling field, shape (H, W, 2), u before v."""

    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords)
        if c.ndim != 3 or c.shape[2] != 2:
            raise ShapeError(f"WarpFlow coords must be (H, W, 2), got {c.shape}")
        self.coords = c

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    @classmethod
    def identity(cls, height: int, width: int, dtype=np.float64) -> "WarpFlow":
        return cls(identity_coords(height, width, dtype))

    @classmethod
    def from_tensor(cls, t: Tensor) -> "WarpFlow":
        """Convert a (2, H, W) flow tensor to the (H, W, 2) numpy layout."""
        if t.ndim != 3 or t.shape[0] != 2:
            raise ShapeError(f"flow tensor must be (2, H, W), got {t.shape}")
        return cls(np.ascontiguousarray(t.data.transpose(1, 2, 0)))

    def to_tensor(self, requires_grad: bool = False, dtype=None) -> Tensor:
        return Tensor(np.ascontiguousarray(self.coords.transpose(2, 0, 1)), requires_grad=requires_grad, dtype=dtype)

    def out_of_range_fraction(self) -> float:
        """Fraction of pixels sampling outside [-1, 1] in either channel."""
        off = np.abs(self.coords) > 1.0
        return float(np.mean(off.any(axis=2)))

    def copy(self) -> "WarpFlow":
        return WarpFlow(self.coords.copy())


@dataclass
class UpsampleWeights:
    """Per-coarse-cell mixture logits: shape (h, w, 8, 8, 9).

    Entry [i, j, dy, dx, n] is the logit for fine pixel (dy, dx) of coarse
    block (i, j) and neighborhood slot n (row-major over the 3x3 stencil,
    n == 4 at the center).
    """

    logits: np.ndarray

    def __post_init__(self):
        lg = np.asarray(self.logits)
        f = UPSAMPLE_FACTOR
        if lg.ndim != 5 or lg.shape[2:] != (f, f, 9):
            raise ShapeError(f"UpsampleWeights logits must be (h, w, {f}, {f}, 9), got {lg.shape}")
        self.logits = lg

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.logits.shape[0], self.logits.shape[1]

    def normalized(self) -> np.ndarray:
        """Softmax over the 9 mixture entries."""
        m = self.logits.max(axis=-1, keepdims=True)
        e = np.exp(self.logits - m)
        return e / e.sum(axis=-1, keepdims=True)

    def to_channels(self) -> np.ndarray:
        """Repack to the conv-head channel layout (8*8*9, h, w)."""
        h, w = self.grid_shape
        f = UPSAMPLE_FACTOR
        return np.ascontiguousarray(self.logits.transpose(2, 3, 4, 0, 1).reshape(f * f * 9, h, w))

    @classmethod
    def from_channels(cls, ch: np.ndarray) -> "UpsampleWeights":
        f = UPSAMPLE_FACTOR
        if ch.ndim != 3 or ch.shape[0] != f * f * 9:
            raise ShapeError(f"expected ({f * f * 9}, h, w) channels, got {ch.shape}")
        h, w = ch.shape[1], ch.shape[2]
        return cls(np.ascontiguousarray(ch.reshape(f, f, 9, h, w).transpose(3, 4, 0, 1, 2)))


# ---------------------------------------------------------------------------
# bilinear sampling


def _snap_near_integers(p: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Round positions within ``eps`` of a pixel center onto it.

    Normalize/denormalize round trips land one ulp off integer pixel
    positions; snapping keeps grid-aligned flows exact (identity flow
    reproduces the source bit for bit) without affecting real deformations.
    """
    r = np.rint(p)
    return np.where(np.abs(p - r) < eps, r, p)


def _corner_indices(px, py, hs, ws):
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    np.clip(x0, 0, max(ws - 2, 0), out=x0)
    np.clip(y0, 0, max(hs - 2, 0), out=y0)
    x1 = np.minimum(x0 + 1, ws - 1)
    y1 = np.minimum(y0 + 1, hs - 1)
    return x0, y0, x1, y1


def bilinear_sample(source: Tensor, flow: Union[Tensor, WarpFlow]) -> Tensor:
    """Resample a (C, H_s, W_s) image at normalized flow coordinates.

    ``flow`` is a (2, H, W) tensor (or a WarpFlow, treated as constant).
    Out-of-range positions clamp to the border. Differentiable with respect
    to both source values and flow coordinates; the coordinate gradient is
    zero where the clamp saturates.
    """
    if isinstance(flow, WarpFlow):
        flow = flow.to_tensor(dtype=source.dtype)
    if source.ndim != 3:
        raise ShapeError(f"bilinear_sample: source must be (C, H, W), got {source.shape}")
    cs, hs, ws = source.shape
    if hs < 1 or ws < 1 or cs < 1:
        raise ShapeError(f"bilinear_sample: zero-sized source {source.shape}")
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"bilinear_sample: flow must be (2, H, W), got {flow.shape}")

    u, v = flow.data[0], flow.data[1]
    px = _snap_near_integers((u + 1.0) * 0.5 * (ws - 1))
    py = _snap_near_integers((v + 1.0) * 0.5 * (hs - 1))
    inside_x = (px >= 0.0) & (px <= ws - 1)
    inside_y = (py >= 0.0) & (py <= hs - 1)
    pxc = np.clip(px, 0.0, float(ws - 1))
    pyc = np.clip(py, 0.0, float(hs - 1))
    x0, y0, x1, y1 = _corner_indices(pxc, pyc, hs, ws)
    fx = pxc - x0
    fy = pyc - y0

    src = source.data
    ia = src[:, y0, x0]
    ib = src[:, y0, x1]
    ic = src[:, y1, x0]
    id_ = src[:, y1, x1]
    wa = (1 - fx) * (1 - fy)
    wb = fx * (1 - fy)
    wc = (1 - fx) * fy
    wd = fx * fy
    out = wa * ia + wb * ib + wc * ic + wd * id_

    def backward(g):
        if source.requires_grad:
            dsrc = np.zeros((cs, hs * ws), dtype=src.dtype)
            for wgt, yy, xx in ((wa, y0, x0), (wb, y0, x1), (wc, y1, x0), (wd, y1, x1)):
                flat = (yy * ws + xx).ravel()
                contrib = g * wgt
                for ch in range(cs):
                    dsrc[ch] += np.bincount(flat, weights=contrib[ch].ravel(), minlength=hs * ws)
            source.accumulate_grad(dsrc.reshape(source.shape))
        if flow.requires_grad:
            dpx = ((1 - fy) * (ib - ia) + fy * (id_ - ic)) * g
            dpy = ((1 - fx) * (ic - ia) + fx * (id_ - ib)) * g
            du = dpx.sum(axis=0) * (0.5 * (ws - 1)) * inside_x
            dv = dpy.sum(axis=0) * (0.5 * (hs - 1)) * inside_y
            flow.accumulate_grad(np.stack([du, dv], axis=0))

    return record_op("bilinear_sample", out, (source, flow), backward)


# ---------------------------------------------------------------------------
# convex upsampling


def _neighborhoods(coarse: np.ndarray) -> np.ndarray:
    """(C, h, w) -> (C, 9, h, w) of replicate-padded 3x3 shifts."""
    c, h, w = coarse.shape
    padded = np.pad(coarse, ((0, 0), (1, 1), (1, 1)), mode="edge")
    nb = np.empty((c, 9, h, w), dtype=coarse.dtype)
    for n in range(9):
        di, dj = divmod(n, 3)
        nb[:, n] = padded[:, di : di + h, dj : dj + w]
    return nb


def _fold_replicate_pad(dpad: np.ndarray) -> np.ndarray:
    """Adjoint of replicate padding by one ring."""
    core = dpad[:, 1:-1, 1:-1].copy()
    core[:, 0, :] += dpad[:, 0, 1:-1]
    core[:, -1, :] += dpad[:, -1, 1:-1]
    core[:, :, 0] += dpad[:, 1:-1, 0]
    core[:, :, -1] += dpad[:, 1:-1, -1]
    core[:, 0, 0] += dpad[:, 0, 0]
    core[:, 0, -1] += dpad[:, 0, -1]
    core[:, -1, 0] += dpad[:, -1, 0]
    core[:, -1, -1] += dpad[:, -1, -1]
    return core


def convex_upsample(coarse: Tensor, logits: Tensor) -> Tensor:
    """Upsample a (2, h, w) flow tensor by 8x via convex neighbor mixtures.

    ``logits`` has 8*8*9 channels: for each fine pixel of an 8x8 block, nine
    mixture logits over the 3x3 coarse neighborhood (softmax-normalized, so
    every fine value is a convex combination of nearby coarse values; no
    magnitude rescaling, coordinates being normalized).
    """
    f = UPSAMPLE_FACTOR
    if coarse.ndim != 3 or coarse.shape[0] != 2:
        raise ShapeError(f"convex_upsample: coarse must be (2, h, w), got {coarse.shape}")
    _, h, w = coarse.shape
    if logits.shape != (f * f * 9, h, w):
        raise ShapeError(f"convex_upsample: logits {logits.shape} do not match grid ({f * f * 9}, {h}, {w})")

    lg = logits.data.reshape(f, f, 9, h, w)
    m = lg.max(axis=2, keepdims=True)
    e = np.exp(lg - m)
    wts = e / e.sum(axis=2, keepdims=True)  # (f, f, 9, h, w)
    nb = _neighborhoods(coarse.data)  # (2, 9, h, w)
    blocks = np.einsum("yxnij,cnij->cyxij", wts, nb)
    out = blocks.transpose(0, 3, 1, 4, 2).reshape(2, f * h, f * w)

    def backward(g):
        gb = g.reshape(2, h, f, w, f).transpose(0, 2, 4, 1, 3)  # (2, f, f, h, w)
        if coarse.requires_grad:
            dnb = np.einsum("yxnij,cyxij->cnij", wts, gb)
            dpad = np.zeros((2, h + 2, w + 2), dtype=g.dtype)
            for n in range(9):
                di, dj = divmod(n, 3)
                dpad[:, di : di + h, dj : dj + w] += dnb[:, n]
            coarse.accumulate_grad(_fold_replicate_pad(dpad))
        if logits.requires_grad:
            dwts = np.einsum("cnij,cyxij->yxnij", nb, gb)
            inner = (dwts * wts).sum(axis=2, keepdims=True)
            dlg = wts * (dwts - inner)
            logits.accumulate_grad(dlg.reshape(logits.shape))

    return record_op("convex_upsample", out, (coarse, logits), backward)


def convex_upsample_flow(coarse: WarpFlow, weights: UpsampleWeights) -> WarpFlow:
    """Numpy convenience wrapper over :func:`convex_upsample`."""
    if weights.grid_shape != (coarse.height, coarse.width):
        raise ShapeError(f"upsample weights grid {weights.grid_shape} != coarse grid {(coarse.height, coarse.width)}")
    out = convex_upsample(coarse.to_tensor(), Tensor(weights.to_channels()))
    return WarpFlow.from_tensor(out)


# ---------------------------------------------------------------------------
# numpy resampling helpers


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of an (..., H, W) array."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: bad target extents {out_h}x{out_w}")
    h, w = img.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError(f"bilinear_resize: empty source {img.shape}")
    ys = np.linspace(0.0, h - 1, out_h)
    xs = np.linspace(0.0, w - 1, out_w)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[..., y0[:, None], x0[None, :]]
    b = img[..., y0[:, None], x1[None, :]]
    c = img[..., y1[:, None], x0[None, :]]
    d = img[..., y1[:, None], x1[None, :]]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def resize_flow(flow: WarpFlow, out_h: int, out_w: int) -> WarpFlow:
    """Interpolate the coordinate channels onto a new target grid.

    Normalized coordinates keep their meaning, so no rescaling is involved.
    """
    planes = flow.coords.transpose(2, 0, 1)
    resized = bilinear_resize(planes, out_h, out_w)
    return WarpFlow(np.ascontiguousarray(resized.transpose(1, 2, 0)))


def split_full_flow(full: WarpFlow) -> tuple[WarpFlow, WarpFlow]:
    """Column halves of a full-spread flow: (left, right)."""
    if full.width % 2 != 0:
        raise ShapeError(f"split_full_flow: width {full.width} is odd")
    half = full.width // 2
    return WarpFlow(full.coords[:, :half].copy()), WarpFlow(full.coords[:, half:].copy())


def stitch_pages(left: WarpFlow, right: WarpFlow) -> WarpFlow:
    if left.height != right.height or left.width != right.width:
        raise ShapeError(f"stitch_pages: halves {left.coords.shape} vs {right.coords.shape}")
    return WarpFlow(np.concatenate([left.coords, right.coords], axis=1))


# ---------------------------------------------------------------------------
# numeric inversion


def _sample_field(field: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a (C, H, W) field at normalized positions.

    Positions beyond the grid extrapolate linearly from the nearest cell,
    which keeps smooth maps invertible right up to (and slightly past) the
    border.
    """
    c, h, w = field.shape
    px = (u + 1.0) * 0.5 * (w - 1)
    py = (v + 1.0) * 0.5 * (h - 1)
    x0, y0, x1, y1 = _corner_indices(px, py, h, w)
    fx = px - x0
    fy = py - y0
    a = field[:, y0, x0]
    b = field[:, y0, x1]
    cc = field[:, y1, x0]
    d = field[:, y1, x1]
    return (1 - fx) * (1 - fy) * a + fx * (1 - fy) * b + (1 - fx) * fy * cc + fx * fy * d


def invert_flow(forward: WarpFlow, iterations: int = 40, tol: float = 1e-6, max_bad_fraction: float = 0.005):
    """Numerically invert a flow interpreted as a map on [-1, 1]^2.

    The input assigns position g(p) to each grid point p; the result h
    satisfies g(h(p)) ~= p. Newton steps with a grid-sampled Jacobian, with a
    damped fixed-point fallback where the Jacobian is near-singular. Returns
    (inverse flow, stats); raises :class:`InversionError` when more than
    ``max_bad_fraction`` of pixels end beyond ``tol`` (normalized units).
    """
    h, w = forward.height, forward.width
    field = np.ascontiguousarray(forward.coords.transpose(2, 0, 1)).astype(np.float64)
    grid = identity_coords(h, w)
    pu, pv = grid[..., 0], grid[..., 1]

    # Grid-spacing derivatives of both channels, in normalized units.
    du_ax = 2.0 / (w - 1) if w > 1 else 1.0
    dv_ax = 2.0 / (h - 1) if h > 1 else 1.0
    jac = np.empty((4, h, w))
    jac[0] = np.gradient(field[0], axis=1) / du_ax  # d g_u / d u
    jac[1] = np.gradient(field[0], axis=0) / dv_ax  # d g_u / d v
    jac[2] = np.gradient(field[1], axis=1) / du_ax  # d g_v / d u
    jac[3] = np.gradient(field[1], axis=0) / dv_ax  # d g_v / d v

    qu = pu.copy()
    qv = pv.copy()
    for _ in range(iterations):
        gq = _sample_field(field, qu, qv)
        ru = gq[0] - pu
        rv = gq[1] - pv
        if max(np.abs(ru).max(), np.abs(rv).max()) < tol:
            break
        jq = _sample_field(jac, qu, qv)
        det = jq[0] * jq[3] - jq[1] * jq[2]
        ok = np.abs(det) > 1e-6
        safe = np.where(ok, det, 1.0)
        su = (jq[3] * ru - jq[1] * rv) / safe
        sv = (-jq[2] * ru + jq[0] * rv) / safe
        # Damped fixed-point step where the local Jacobian is unusable.
        su = np.where(ok, su, 0.5 * ru)
        sv = np.where(ok, sv, 0.5 * rv)
        qu -= su
        qv -= sv

    gq = _sample_field(field, qu, qv)
    res = np.hypot(gq[0] - pu, gq[1] - pv)
    bad = float(np.mean(res > tol))
    stats = {
        "max_residual": float(res.max()),
        "mean_residual": float(res.mean()),
        "bad_fraction": bad,
        "tol": tol,
    }
    if bad > max_bad_fraction:
        raise InversionError(
            f"flow inversion failed: {bad * 100:.2f}% of pixels above tol {tol:g} "
            f"(max residual {stats['max_residual']:.3g})"
        )
    return WarpFlow(np.stack([qu, qv], axis=-1)), stats


# ---------------------------------------------------------------------------
# flow files


def save_flow(path: Union[str, Path], flow: WarpFlow) -> None:
    """Write the BKFL binary format (row-major f32, u before v)."""
    with open(path, "wb") as fh:
        fh.write(_FLOW_MAGIC)
        fh.write(struct.pack("<III", _FLOW_VERSION, flow.height, flow.width))
        fh.write(np.ascontiguousarray(flow.coords, dtype="<f4").tobytes())


def load_flow(path: Union[str, Path]) -> WarpFlow:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FLOW_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, h, w = struct.unpack("<III", fh.read(12))
        if version != _FLOW_VERSION:
            raise ValueError(f"{path}: unsupported flow version {version}")
        buf = fh.read(4 * h * w * 2)
        if len(buf) != 4 * h * w * 2:
            raise ValueError(f"{path}: truncated flow data")
        return WarpFlow(np.frombuffer(buf, dtype="<f4").reshape(h, w, 2).copy())
