"""Evaluation suite: perceptual similarity, geometric distortion, text error.

- multiscale SSIM over 5 dyadic levels (contrast/structure at every level,
  luminance at the coarsest), 11x11 Gaussian windows, optional mask
  weighting;
- dense correspondence by coarse-to-fine block matching with normalized
  cross-correlation, from which local distortion (LD) and similarity-aligned
  distortion (AD) are derived;
- Levenshtein edit distance and character error rate for externally produced
  transcripts.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import bilinear_resize

__all__ = [
    "PYRAMID_WEIGHTS",
    "mssim",
    "Correspondence",
    "compute_correspondence",
    "ld",
    "ad",
    "edit_distance",
    "cer",
    "MetricReport",
    "SetReport",
    "evaluate_set",
    "to_grayscale",
    "MIN_MSSIM_EXTENT",
]

# exponent weights for the five pyramid levels (sum 1.0001, used as-is)
PYRAMID_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5
MIN_MSSIM_EXTENT = _WINDOW_SIZE * 2 ** (len(PYRAMID_WEIGHTS) - 1)  # 176


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """(3, H, W) or (H, W) -> luminance (H, W)."""
    if img.ndim == 2:
        return np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        r, g, b = img[0], img[1], img[2]
        return 0.299 * r + 0.587 * g + 0.114 * b
    raise ValueError(f"expected (3, H, W) or (H, W), got {img.shape}")


def _gaussian_1d(size: int = _WINDOW_SIZE, sigma: float = _WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1-d window along both axes."""
    n = k.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=1) @ k
    return (np.lib.stride_tricks.sliding_window_view(rows, n, axis=0) @ k).astype(np.float64, copy=False)


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - (h % 2), : w - (w % 2)]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _ssim_components(a, b, c1, c2, k):
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def mssim(
    a: np.ndarray,
    b: np.ndarray,
    weights: Sequence[float] = PYRAMID_WEIGHTS,
    mask: Optional[np.ndarray] = None,
    data_range: float = 1.0,
) -> float:
    """Multiscale structural similarity of two grayscale images in [0, 1].

    Contrast/structure terms enter at every level, luminance only at the
    coarsest; each term is clamped at zero before exponentiation so strongly
    anti-correlated content scores ~0 rather than producing complex powers.
    With a mask, per-window scores are averaged under Gaussian-filtered mask
    weights instead of uniformly.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"mssim needs equal 2-d extents, got {a.shape} vs {b.shape}")
    if min(a.shape) < MIN_MSSIM_EXTENT:
        raise ValueError(f"mssim needs at least {MIN_MSSIM_EXTENT} px on the short side, got {a.shape}")
    levels = len(weights)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    k = _gaussian_1d()
    m = None if mask is None else np.asarray(mask, dtype=np.float64)

    score = 1.0
    for lvl in range(levels):
        lum, cs = _ssim_components(a, b, c1, c2, k)
        if m is not None:
            wm = _filter_valid(m, k)
            total = wm.sum()
            if total <= 0:
                raise ValueError("mssim: mask excludes every window")
            cs_mean = float((cs * wm).sum() / total)
            lum_mean = float((lum * wm).sum() / total)
        else:
            cs_mean = float(cs.mean())
            lum_mean = float(lum.mean())
        cs_mean = max(cs_mean, 0.0)
        lum_mean = max(lum_mean, 0.0)
        score *= cs_mean ** weights[lvl]
        if lvl == levels - 1:
            score *= lum_mean ** weights[lvl]
        else:
            a = _downsample2(a)
            b = _downsample2(b)
            if m is not None:
                m = _downsample2(m)
    return float(score)


# ---------------------------------------------------------------------------
# dense correspondence by block matching


@dataclass
class Correspondence:
    """Per-pixel displacement (H, W, 2; dx before dy) with a validity mask."""

    displacement: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.displacement.ndim != 3 or self.displacement.shape[2] != 2:
            raise ValueError(f"displacement must be (H, W, 2), got {self.displacement.shape}")
        if self.valid.shape != self.displacement.shape[:2]:
            raise ValueError("validity mask shape mismatch")


_BLOCK = 16
_SEARCH = 12
_LEVELS = 4
_NCC_THRESHOLD = 0.3


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    k = _gaussian_1d(5, 1.0)
    pyr = [img]
    for _ in range(levels - 1):
        padded = np.pad(pyr[-1], 2, mode="edge")
        pyr.append(_downsample2(_filter_valid(padded, k)))
    return pyr


def _match_block(template: np.ndarray, ref: np.ndarray, cy: int, cx: int, init_dy: float, init_dx: float):
    """NCC search of one block around an initial displacement.

    Returns (dy, dx, peak) with subpixel parabola refinement, or None when
    the block is textureless or the search window degenerates.
    """
    bs = template.shape[0]
    t = template - template.mean()
    t_norm = np.sqrt((t * t).sum())
    if t_norm < 1e-8:
        return None
    h, w = ref.shape
    base_y = cy + int(round(init_dy)) - _SEARCH
    base_x = cx + int(round(init_dx)) - _SEARCH
    y0 = max(0, base_y)
    x0 = max(0, base_x)
    y1 = min(h - bs, base_y + 2 * _SEARCH)
    x1 = min(w - bs, base_x + 2 * _SEARCH)
    if y1 < y0 or x1 < x0:
        return None
    region = ref[y0 : y1 + bs, x0 : x1 + bs]
    win = np.lib.stride_tricks.sliding_window_view(region, (bs, bs))
    mu = win.mean(axis=(2, 3))
    cross = np.einsum("ijkl,kl->ij", win, t)
    sq = np.einsum("ijkl,ijkl->ij", win, win)
    var = sq - win.shape[2] * win.shape[3] * mu * mu
    denom = np.sqrt(np.maximum(var, 0.0)) * t_norm
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.where(denom > 1e-8, cross / denom, -1.0)
    iy, ix = np.unravel_index(np.argmax(ncc), ncc.shape)
    peak = float(ncc[iy, ix])
    if peak < _NCC_THRESHOLD:
        return None

    def _parabola(vals3):
        d = vals3[0] - 2 * vals3[1] + vals3[2]
        return 0.0 if abs(d) < 1e-12 else float(np.clip(0.5 * (vals3[0] - vals3[2]) / d, -0.5, 0.5))

    sub_y = _parabola(ncc[iy - 1 : iy + 2, ix]) if 0 < iy < ncc.shape[0] - 1 else 0.0
    sub_x = _parabola(ncc[iy, ix - 1 : ix + 2]) if 0 < ix < ncc.shape[1] - 1 else 0.0
    dy = (y0 + iy) - cy + sub_y
    dx = (x0 + ix) - cx + sub_x
    return dy, dx, peak


def compute_correspondence(rectified: np.ndarray, reference: np.ndarray) -> Correspondence:
    """Coarse-to-fine block registration of equal-extent grayscale images.

    The displacement at pixel p points from p's position in ``rectified`` to
    the matching content in ``reference``. Textureless or low-correlation
    blocks are marked invalid; a fully invalid result flags degenerate input.
    """
    rectified = np.asarray(rectified, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rectified.shape != reference.shape or rectified.ndim != 2:
        raise ValueError(f"correspondence needs equal 2-d extents, got {rectified.shape} vs {reference.shape}")
    levels = _LEVELS
    while min(rectified.shape) // 2 ** (levels - 1) < _BLOCK and levels > 1:
        levels -= 1
    pyr_a = _pyramid(rectified, levels)
    pyr_b = _pyramid(reference, levels)

    grid_d: Optional[np.ndarray] = None
    grid_v: Optional[np.ndarray] = None
    for lvl in range(levels - 1, -1, -1):
        a, b = pyr_a[lvl], pyr_b[lvl]
        h, w = a.shape
        nby, nbx = h // _BLOCK, w // _BLOCK
        d = np.zeros((nby, nbx, 2))
        v = np.zeros((nby, nbx), dtype=bool)
        if grid_d is None:
            init = np.zeros((nby, nbx, 2))
        else:
            init = 2.0 * bilinear_resize(grid_d.transpose(2, 0, 1), nby, nbx).transpose(1, 2, 0)
        for by in range(nby):
            for bx in range(nbx):
                y, x = by * _BLOCK, bx * _BLOCK
                res = _match_block(a[y : y + _BLOCK, x : x + _BLOCK], b, y, x, init[by, bx, 1], init[by, bx, 0])
                if res is None:
                    d[by, bx] = init[by, bx]
                else:
                    d[by, bx] = (res[1], res[0])  # dx, dy
                    v[by, bx] = True
        grid_d, grid_v = d, v

    h, w = rectified.shape
    dense = bilinear_resize(grid_d.transpose(2, 0, 1), h, w).transpose(1, 2, 0)
    # nearest-neighbor expansion of per-block validity
    ys = np.clip((np.arange(h) // _BLOCK), 0, grid_v.shape[0] - 1)
    xs = np.clip((np.arange(w) // _BLOCK), 0, grid_v.shape[1] - 1)
    valid = grid_v[ys[:, None], xs[None, :]]
    return Correspondence(dense, valid)


def ld(corr: Correspondence) -> float:
    """Mean displacement magnitude in pixels over valid pixels."""
    if not corr.valid.any():
        raise ValueError("ld: empty validity mask")
    d = corr.displacement[corr.valid]
    return float(np.hypot(d[:, 0], d[:, 1]).mean())


def _sobel_magnitude(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    gx = (
        p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
        - p[:-2, :-2] - 2 * p[1:-1, :-2] - p[2:, :-2]
    )
    gy = (
        p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
        - p[:-2, :-2] - 2 * p[:-2, 1:-1] - p[:-2, 2:]
    )
    return np.hypot(gx, gy)


def ad(corr: Correspondence, reference: np.ndarray) -> float:
    """Residual distortion after removing the best-fit global similarity.

    Fits x' = a*x - b*y + tx, y' = b*x + a*y + ty over valid pixels (plain
    least squares), subtracts it from the displacement field, and averages
    the residual magnitude under reference-gradient weights normalized to
    sum 1.
    """
    if not corr.valid.any():
        raise ValueError("ad: empty validity mask")
    h, w = corr.valid.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    vx = xx[corr.valid]
    vy = yy[corr.valid]
    dx = corr.displacement[..., 0][corr.valid]
    dy = corr.displacement[..., 1][corr.valid]
    tx_target = vx + dx
    ty_target = vy + dy

    n = vx.size
    rows = np.zeros((2 * n, 4))
    rows[:n, 0] = vx
    rows[:n, 1] = -vy
    rows[:n, 2] = 1.0
    rows[n:, 0] = vy
    rows[n:, 1] = vx
    rows[n:, 3] = 1.0
    rhs = np.concatenate([tx_target, ty_target])
    try:
        sol, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
        a_, b_, tx_, ty_ = sol
        if not np.all(np.isfinite(sol)) or abs(a_) + abs(b_) < 1e-12:
            raise np.linalg.LinAlgError
        fit_x = a_ * vx - b_ * vy + tx_
        fit_y = b_ * vx + a_ * vy + ty_
    except np.linalg.LinAlgError:
        warnings.warn("ad: rank-deficient similarity fit, falling back to translation-only alignment")
        fit_x = vx + dx.mean()
        fit_y = vy + dy.mean()

    res = np.hypot(tx_target - fit_x, ty_target - fit_y)
    wgt = _sobel_magnitude(np.asarray(reference, dtype=np.float64))[corr.valid]
    total = wgt.sum()
    if total <= 0:
        wgt = np.ones_like(wgt)
        total = wgt.sum()
    return float((res * wgt).sum() / total)


# ---------------------------------------------------------------------------
# text metrics


def edit_distance(hyp: str, ref: str) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if hyp == ref:
        return 0
    m, n = len(hyp), len(ref)
    if m == 0:
        return n
    if n == 0:
        return m
    prev = list(range(n + 1))
    cur = [0] * (n + 1)
    for i in range(1, m + 1):
        cur[0] = i
        hi = hyp[i - 1]
        for j in range(1, n + 1):
            cost = 0 if hi == ref[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev, cur = cur, prev
    return prev[n]


def cer(hyp: str, ref: str) -> float:
    """Character error rate: edit distance over reference length."""
    if len(ref) == 0:
        raise ValueError("cer: empty reference")
    return edit_distance(hyp, ref) / len(ref)


# ---------------------------------------------------------------------------
# set evaluation


@dataclass
class MetricReport:
    mssim: float
    ld: float
    ad: float
    ed: Optional[float] = None
    cer: Optional[float] = None

    def as_dict(self) -> dict:
        out = {"mssim": self.mssim, "ld": self.ld, "ad": self.ad}
        if self.ed is not None:
            out["ed"] = self.ed
        if self.cer is not None:
            out["cer"] = self.cer
        return out


@dataclass
class SetReport:
    per_image: list[tuple[str, MetricReport]]
    aggregate: MetricReport
    skipped: list[str]

    def as_dict(self) -> dict:
        return {
            "per_image": [{"id": i, **r.as_dict()} for i, r in self.per_image],
            "aggregate": self.aggregate.as_dict(),
            "skipped": self.skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        """Aligned text table, columns ordered MSSIM LD AD CER ED."""
        header = f"{'id':<12}{'MSSIM':>8}{'LD':>9}{'AD':>8}{'CER':>9}{'ED':>10}"
        lines = [header, "-" * len(header)]

        def fmt(i, r):
            cer_s = f"{r.cer:.4f}" if r.cer is not None else "-"
            ed_s = f"{r.ed:.2f}" if r.ed is not None else "-"
            return f"{i:<12}{r.mssim:>8.4f}{r.ld:>9.3f}{r.ad:>8.4f}{cer_s:>9}{ed_s:>10}"

        for i, r in self.per_image:
            lines.append(fmt(i, r))
        lines.append("-" * len(header))
        lines.append(fmt("mean", self.aggregate))
        if self.skipped:
            lines.append(f"skipped: {', '.join(self.skipped)}")
        return "\n".join(lines)


def _load_image_gray(path: Union[str, Path]) -> np.ndarray:
    from .imageio import load_image

    return to_grayscale(load_image(path))


def evaluate_set(pairs: Sequence[dict]) -> SetReport:
    """Evaluate a pairs manifest.

    Each entry: {id, rectified_path, reference_path, transcript_ref?,
    transcript_hyp?}. Rectified images are resized to reference extents
    first. Entries with unreadable files are skipped and listed.
    """
    per_image: list[tuple[str, MetricReport]] = []
    skipped: list[str] = []
    for entry in pairs:
        eid = str(entry.get("id", len(per_image)))
        try:
            rect = _load_image_gray(entry["rectified_path"])
            ref = _load_image_gray(entry["reference_path"])
        except (OSError, KeyError) as exc:
            skipped.append(f"{eid}: {exc}")
            continue
        if rect.shape != ref.shape:
            rect = bilinear_resize(rect, *ref.shape)
        corr = compute_correspondence(rect, ref)
        report = MetricReport(
            mssim=mssim(rect, ref),
            ld=ld(corr),
            ad=ad(corr, ref),
        )
        if "transcript_ref" in entry and "transcript_hyp" in entry:
            try:
                t_ref = Path(entry["transcript_ref"]).read_text(encoding="utf-8")
                t_hyp = Path(entry["transcript_hyp"]).read_text(encoding="utf-8")
                report.ed = float(edit_distance(t_hyp, t_ref))
                report.cer = cer(t_hyp, t_ref)
            except OSError as exc:
                skipped.append(f"{eid} transcripts: {exc}")
        per_image.append((eid, report))

    if per_image:
        eds = [r.ed for _, r in per_image if r.ed is not None]
        cers = [r.cer for _, r in per_image if r.cer is not None]
        aggregate = MetricReport(
            mssim=float(np.mean([r.mssim for _, r in per_image])),
            ld=float(np.mean([r.ld for _, r in per_image])),
            ad=float(np.mean([r.ad for _, r in per_image])),
            ed=float(np.mean(eds)) if eds else None,
            cer=float(np.mean(cers)) if cers else None,
        )
    else:
        aggregate = MetricReport(mssim=float("nan"), ld=float("nan"), ad=float("nan"))
    return SetReport(per_image, aggregate, skipped)
