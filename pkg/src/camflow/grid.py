"""Dense-grid numeric kernels shared by the flow, alignment and fusion code.

Grids are plain 2-D ``float64`` arrays of shape ``(H, W)``; feature maps are
3-D arrays of shape ``(C, H, W)``.  Sampling outside the grid uses zero
padding, upsampling uses the align-corners convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


def as_feature_map(values) -> np.ndarray:
    """Return ``values`` as a validated ``(C, H, W)`` float64 array.

    A 2-D input is promoted to a single-channel map.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3:
        raise ValueError(f"feature map must be 2-D or 3-D, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"feature map must be nonempty, got shape {arr.shape}")
    return arr


def _check_channel(fmap: np.ndarray, channel: int) -> None:
    if not 0 <= channel < fmap.shape[0]:
        raise ValueError(f"channel {channel} out of range for {fmap.shape[0]} channels")


# ---------------------------------------------------------------------------
# Bilinear sampling (scalar reference versions)
# ---------------------------------------------------------------------------

def bilinear_sample(fmap, y: float, x: float, channel: int = 0) -> float:
    """Sample one channel of ``fmap`` at the real coordinate ``(y, x)``.

    Neighbours falling outside the grid contribute zero.
    """
    fmap = as_feature_map(fmap)
    _check_channel(fmap, channel)
    grid = fmap[channel]
    h, w = grid.shape
    y0 = math.floor(y)
    x0 = math.floor(x)
    fy = y - y0
    fx = x - x0
    total = 0.0
    for yy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        if not 0 <= yy < h or wy == 0.0:
            continue
        for xx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if not 0 <= xx < w or wx == 0.0:
                continue
            total += wy * wx * grid[yy, xx]
    return float(total)


def bilinear_sample_backward(fmap, y: float, x: float, channel: int = 0,
                             upstream: float = 1.0):
    """Gradients of ``upstream * bilinear_sample(fmap, y, x, channel)``.

    Returns ``(grad_map, grad_y, grad_x)``; ``grad_map`` has the shape of
    ``fmap`` and is nonzero on at most four cells.  At integer coordinates the
    one-sided derivative towards increasing coordinates is returned.
    """
    fmap = as_feature_map(fmap)
    _check_channel(fmap, channel)
    grid = fmap[channel]
    h, w = grid.shape
    y0 = math.floor(y)
    x0 = math.floor(x)
    fy = y - y0
    fx = x - x0

    def value(yy, xx):
        if 0 <= yy < h and 0 <= xx < w:
            return grid[yy, xx]
        return 0.0

    v00 = value(y0, x0)
    v01 = value(y0, x0 + 1)
    v10 = value(y0 + 1, x0)
    v11 = value(y0 + 1, x0 + 1)

    grad_map = np.zeros_like(fmap)
    for yy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if 0 <= yy < h and 0 <= xx < w:
                grad_map[channel, yy, xx] += upstream * wy * wx
    grad_y = upstream * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
    grad_x = upstream * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
    return grad_map, float(grad_y), float(grad_x)


# ---------------------------------------------------------------------------
# Vectorized sampling
# ---------------------------------------------------------------------------

def _corner_terms(h: int, w: int, ys: np.ndarray, xs: np.ndarray):
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            out.append((np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1),
                        np.where(valid, wy * wx, 0.0), valid))
    return out, fy, fx


def sample_map(fmap: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinearly sample every channel of ``fmap`` at coordinate arrays.

    ``ys`` and ``xs`` share a shape ``S``; the result has shape ``(C, *S)``.
    """
    fmap = as_feature_map(fmap)
    c, h, w = fmap.shape
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    corners, _, _ = _corner_terms(h, w, ys, xs)
    out = np.zeros((c,) + ys.shape)
    for yy, xx, wgt, _ in corners:
        out += wgt * fmap[:, yy, xx]
    return out


def sample_map_backward(fmap: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                        upstream: np.ndarray):
    """Backward pass of :func:`sample_map`.

    ``upstream`` has shape ``(C, *S)``.  Returns ``(grad_map, grad_ys, grad_xs)``
    where the coordinate gradients are summed over channels.
    """
    fmap = as_feature_map(fmap)
    c, h, w = fmap.shape
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    corners, fy, fx = _corner_terms(h, w, ys, xs)
    (y00, x00, _, m00), (y01, x01, _, m01), (y10, x10, _, m10), (y11, x11, _, m11) = corners
    v00 = np.where(m00, fmap[:, y00, x00], 0.0)
    v01 = np.where(m01, fmap[:, y01, x01], 0.0)
    v10 = np.where(m10, fmap[:, y10, x10], 0.0)
    v11 = np.where(m11, fmap[:, y11, x11], 0.0)
    d_dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    d_dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    grad_ys = np.sum(upstream * d_dy, axis=0)
    grad_xs = np.sum(upstream * d_dx, axis=0)

    grad_map = np.zeros_like(fmap)
    flat = grad_map.reshape(c, h * w)
    for yy, xx, wgt, _ in corners:
        idx = (yy * w + xx).ravel()
        contrib = (upstream * wgt).reshape(c, -1)
        for ch in range(c):
            # bincount sums in index order, so the result is schedule-independent
            flat[ch] += np.bincount(idx, weights=contrib[ch], minlength=h * w)
    return grad_map, grad_ys, grad_xs


def bilinear_upsample(fmap, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear upsampling of every channel to ``(out_h, out_w)``."""
    fmap = as_feature_map(fmap)
    _, h, w = fmap.shape
    if out_h < h or out_w < w:
        raise ValueError(f"cannot upsample {h}x{w} to smaller {out_h}x{out_w}")
    # integer numerator keeps the last target index exactly on the last source cell
    ys = np.arange(out_h) * (h - 1) / (out_h - 1) if out_h > 1 else np.zeros(1)
    xs = np.arange(out_w) * (w - 1) / (out_w - 1) if out_w > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return sample_map(fmap, yy, xx)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _check_kernel(fmap: np.ndarray, weight: np.ndarray, bias) -> tuple:
    if weight.ndim != 4:
        raise ValueError(f"kernel must be [out, in, kh, kw], got shape {weight.shape}")
    out_ch, in_ch, kh, kw = weight.shape
    if in_ch != fmap.shape[0]:
        raise ValueError(f"kernel expects {in_ch} input channels, map has {fmap.shape[0]}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}x{kw}")
    if bias is not None and np.shape(bias) != (out_ch,):
        raise ValueError(f"bias must have shape ({out_ch},), got {np.shape(bias)}")
    return out_ch, in_ch, kh, kw


def conv2d(fmap, weight, bias=None) -> np.ndarray:
    """Stride-1 cross-correlation with zero "same" padding.

    ``weight`` has shape ``(out_ch, in_ch, kh, kw)`` with odd kernel sizes.
    """
    fmap = as_feature_map(fmap)
    weight = np.asarray(weight, dtype=np.float64)
    out_ch, _, kh, kw = _check_kernel(fmap, weight, bias)
    _, h, w = fmap.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(fmap, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((out_ch, h, w))
    for a in range(kh):
        for b in range(kw):
            out += np.einsum("oi,ihw->ohw", weight[:, :, a, b],
                             padded[:, a:a + h, b:b + w])
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None]
    return out


def conv2d_backward(fmap, weight, upstream):
    """Gradients of ``sum(upstream * conv2d(fmap, weight, bias))``.

    Returns ``(grad_input, grad_weight, grad_bias)``.
    """
    fmap = as_feature_map(fmap)
    weight = np.asarray(weight, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _, _, kh, kw = _check_kernel(fmap, weight, None)
    _, h, w = fmap.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(fmap, ((0, 0), (ph, ph), (pw, pw)))
    grad_padded = np.zeros_like(padded)
    grad_weight = np.zeros_like(weight)
    for a in range(kh):
        for b in range(kw):
            window = padded[:, a:a + h, b:b + w]
            grad_weight[:, :, a, b] = np.einsum("ohw,ihw->oi", upstream, window)
            grad_padded[:, a:a + h, b:b + w] += np.einsum("oi,ohw->ihw", weight[:, :, a, b], upstream)
    grad_input = grad_padded[:, ph:ph + h, pw:pw + w]
    grad_bias = upstream.sum(axis=(1, 2))
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# Softmax and pooling
# ---------------------------------------------------------------------------

def softmax_pair(a, b):
    """Two-way softmax per cell: returns ``(wa, wb)`` with ``wa + wb == 1``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    m = np.maximum(a, b)
    ea = np.exp(a - m)
    eb = np.exp(b - m)
    wa = ea / (ea + eb)
    return wa, 1.0 - wa


def global_avg_pool(fmap) -> np.ndarray:
    """Per-channel spatial mean, shaped ``(C, 1, 1)`` so it broadcasts back."""
    fmap = as_feature_map(fmap)
    return fmap.mean(axis=(1, 2), keepdims=True)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(f: Callable[[np.ndarray], float], analytic_grad, params,
                      h: float = 1e-4) -> GradCheckReport:
    """Compare ``analytic_grad`` against central differences of ``f`` at ``params``.

    ``f`` maps a flat parameter vector to a scalar.  ``analytic_grad`` is the
    claimed gradient at ``params`` (same length).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    p = np.array(params, dtype=np.float64).ravel()
    g = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if g.shape != p.shape:
        raise ValueError(f"gradient has {g.size} entries, parameters have {p.size}")
    worst = GradCheckReport(0.0, -1, 0.0, 0.0)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        fp = f(p.copy())
        p[i] = orig - h
        fm = f(p.copy())
        p[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value probing parameter {i}")
        numeric = (fp - fm) / (2.0 * h)
        err = relative_error(g[i], numeric)
        if worst.worst_index < 0 or err > worst.max_rel_error:
            worst = GradCheckReport(err, i, float(g[i]), float(numeric))
    return worst
