"""Dense and sparse optical flow.

The dense solver is a coarse-to-fine Horn-Schunck scheme: quadratic data and
smoothness terms, one linearisation per pyramid level, the next frame warped
by the upsampled coarse estimate before refining.  The sparse stack (Shi-Tomasi
corners tracked with pyramidal Lucas-Kanade, then a rigid fit) feeds the
stabilization-style ranking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import bilinear_upsample

__all__ = [
    "FlowField",
    "FlowParams",
    "Corner",
    "Track",
    "FrameTransform",
    "InsufficientDataError",
    "dense_flow",
    "shi_tomasi_corners",
    "lk_track",
    "estimate_transform",
]

# Squared gradient energy below this counts as a textureless frame.
_DEGENERATE_ENERGY = 1e-12


class InsufficientDataError(ValueError):
    """Too few matches to fit the requested transform model."""


@dataclass
class FlowField:
    """Per-pixel displacement ``(dy, dx)`` from one frame to the next."""

    dy: np.ndarray
    dx: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.dy = np.asarray(self.dy, dtype=np.float64)
        self.dx = np.asarray(self.dx, dtype=np.float64)
        if self.dy.shape != self.dx.shape or self.dy.ndim != 2:
            raise ValueError(f"flow components must be matching 2-D arrays, "
                             f"got {self.dy.shape} and {self.dx.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.dy.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dy, self.dx)

    @classmethod
    def zeros(cls, shape, degenerate: bool = False) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape), degenerate)


@dataclass(frozen=True)
class FlowParams:
    levels: int = 4
    iterations: int = 100
    alpha: float = 10.0
    # 1 = warp only between levels
    warps: int = 1


# ---------------------------------------------------------------------------
# Dense flow
# ---------------------------------------------------------------------------

def _downsample(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, 1.0, mode="nearest")[::2, ::2]


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 8:
            break
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _neumann_laplacian(f: np.ndarray) -> np.ndarray:
    """Positive semi-definite graph Laplacian with reflecting borders."""
    out = np.zeros_like(f)
    d = f[1:, :] - f[:-1, :]
    out[:-1, :] -= d
    out[1:, :] += d
    d = f[:, 1:] - f[:, :-1]
    out[:, :-1] -= d
    out[:, 1:] += d
    return out


def _cg_solve(ixx, ixy, iyy, bu, bv, a2, u, v, iterations, tol=1e-10):
    """Conjugate gradients on the Horn-Schunck normal equations."""

    def apply(pu, pv):
        return (ixx * pu + ixy * pv + a2 * _neumann_laplacian(pu),
                ixy * pu + iyy * pv + a2 * _neumann_laplacian(pv))

    u = u.copy()
    v = v.copy()
    au, av = apply(u, v)
    ru = bu - au
    rv = bv - av
    rr = np.vdot(ru, ru) + np.vdot(rv, rv)
    bb = np.vdot(bu, bu) + np.vdot(bv, bv)
    if rr <= tol * tol * bb or rr == 0.0:
        return u, v
    pu = ru.copy()
    pv = rv.copy()
    for _ in range(iterations):
        qu, qv = apply(pu, pv)
        step = rr / (np.vdot(pu, qu) + np.vdot(pv, qv))
        u += step * pu
        v += step * pv
        ru -= step * qu
        rv -= step * qv
        rn = np.vdot(ru, ru) + np.vdot(rv, rv)
        if rn <= tol * tol * bb:
            break
        pu = ru + (rn / rr) * pu
        pv = rv + (rn / rr) * pv
        rr = rn
    return u, v


def _warp(img: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [yy + dy, xx + dx], order=1, mode="nearest")


def _refine_level(prev, nxt, dy, dx, params: FlowParams):
    a2 = params.alpha ** 2
    for _ in range(params.warps):
        warped = _warp(nxt, dy, dx)
        gy1, gx1 = np.gradient(prev)
        gy2, gx2 = np.gradient(warped)
        iy = 0.5 * (gy1 + gy2)
        ix = 0.5 * (gx1 + gx2)
        # linearised residual about the current estimate
        r = warped - prev - ix * dx - iy * dy
        dx, dy = _cg_solve(ix * ix, ix * iy, iy * iy, -ix * r, -iy * r, a2,
                           dx, dy, params.iterations)
    return dy, dx


def dense_flow(prev, nxt, params: FlowParams | None = None) -> FlowField:
    """Dense flow from ``prev`` to ``nxt`` (both 2-D, intensities in [0, 1]).

    ``nxt(y + dy, x + dx) ~= prev(y, x)`` for the returned field.  Frames without
    any intensity gradient yield a zero field flagged ``degenerate``.
    """
    params = params or FlowParams()
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape or prev.ndim != 2:
        raise ValueError(f"frames must be matching 2-D arrays, got {prev.shape} and {nxt.shape}")
    if params.levels < 1 or params.iterations < 0 or params.alpha < 0:
        raise ValueError(f"invalid flow parameters {params}")

    energy = sum(float(np.sum(g * g)) for img in (prev, nxt) for g in np.gradient(img)) \
        if min(prev.shape) > 1 else 0.0
    if energy < _DEGENERATE_ENERGY:
        return FlowField.zeros(prev.shape, degenerate=True)

    pyr_prev = _pyramid(prev, params.levels)
    pyr_next = _pyramid(nxt, params.levels)
    dy = np.zeros(pyr_prev[-1].shape)
    dx = np.zeros_like(dy)
    for level in range(len(pyr_prev) - 1, -1, -1):
        h, w = pyr_prev[level].shape
        if dy.shape != (h, w):
            sy = h / dy.shape[0]
            sx = w / dy.shape[1]
            dy = bilinear_upsample(dy, h, w)[0] * sy
            dx = bilinear_upsample(dx, h, w)[0] * sx
        dy, dx = _refine_level(pyr_prev[level], pyr_next[level], dy, dx, params)
    return FlowField(dy, dx)


# ---------------------------------------------------------------------------
# Corners and sparse tracking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Corner:
    y: int
    x: int
    score: float


def _min_eigen_response(frame: np.ndarray, block: int = 3) -> np.ndarray:
    gy = ndimage.sobel(frame, axis=0, mode="reflect") / 8.0
    gx = ndimage.sobel(frame, axis=1, mode="reflect") / 8.0
    a = ndimage.uniform_filter(gx * gx, block, mode="reflect")
    b = ndimage.uniform_filter(gx * gy, block, mode="reflect")
    c = ndimage.uniform_filter(gy * gy, block, mode="reflect")
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return np.maximum(half_tr - disc, 0.0)


def shi_tomasi_corners(frame, max_corners: int = 200, quality_level: float = 0.01,
                       min_distance: float = 5.0, block: int = 3) -> list[Corner]:
    """Good-features-to-track: minimum-eigenvalue corners, strongest first.

    ``max_corners <= 0`` returns every corner passing the threshold.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or min(frame.shape) < 3:
        raise ValueError(f"frame must be 2-D and at least 3x3, got {frame.shape}")
    resp = _min_eigen_response(frame, block)
    peak = float(resp.max())
    if peak <= _DEGENERATE_ENERGY:
        return []
    local_max = resp == ndimage.maximum_filter(resp, size=3, mode="constant")
    cand = local_max & (resp >= quality_level * peak) & (resp > 0)
    cand[0, :] = cand[-1, :] = cand[:, 0] = cand[:, -1] = False
    ys, xs = np.nonzero(cand)
    scores = resp[ys, xs]
    order = np.lexsort((xs, ys, -scores))

    chosen: list[Corner] = []
    min_d2 = min_distance * min_distance
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        if any((c.y - y) ** 2 + (c.x - x) ** 2 < min_d2 for c in chosen):
            continue
        chosen.append(Corner(y, x, float(scores[i])))
        if 0 < max_corners <= len(chosen):
            break
    return chosen


@dataclass(frozen=True)
class Track:
    y: float
    x: float
    dy: float
    dx: float
    converged: bool


def lk_track(prev, nxt, points, levels: int = 3, window: int = 15,
             iterations: int = 20, epsilon: float = 0.01,
             min_eigen: float = 1e-6) -> list[Track]:
    """Pyramidal Lucas-Kanade tracking of ``points`` from ``prev`` to ``nxt``.

    ``points`` is a sequence of :class:`Corner` or ``(y, x)`` pairs.  A point is
    flagged unconverged when its window lacks two-dimensional texture at any
    level, the window at either end pokes out of the frame, or the final
    level does not settle below ``epsilon`` pixels.
    """
    if window % 2 != 1:
        raise ValueError(f"window must be odd, got {window}")
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape or prev.ndim != 2:
        raise ValueError(f"frames must be matching 2-D arrays, got {prev.shape} and {nxt.shape}")
    pts = np.array([(p.y, p.x) if isinstance(p, Corner) else tuple(p) for p in points],
                   dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return []

    pyr_prev = _pyramid(prev, levels)
    pyr_next = _pyramid(nxt, levels)
    half = window // 2
    oy, ox = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    n = len(pts)
    guess = np.zeros((n, 2))
    ok = np.ones(n, dtype=bool)
    settled = np.zeros(n, dtype=bool)

    for level in range(len(pyr_prev) - 1, -1, -1):
        scale = 2.0 ** level
        img0 = pyr_prev[level]
        img1 = pyr_next[level]
        gy = ndimage.sobel(img0, axis=0, mode="nearest") / 8.0
        gx = ndimage.sobel(img0, axis=1, mode="nearest") / 8.0
        py = pts[:, 0, None, None] / scale + oy
        px = pts[:, 1, None, None] / scale + ox
        coords = [py.ravel(), px.ravel()]
        shape = py.shape
        t0 = ndimage.map_coordinates(img0, coords, order=1, mode="nearest").reshape(shape)
        wy = ndimage.map_coordinates(gy, coords, order=1, mode="nearest").reshape(shape)
        wx = ndimage.map_coordinates(gx, coords, order=1, mode="nearest").reshape(shape)
        gyy = np.sum(wy * wy, axis=(1, 2))
        gxy = np.sum(wx * wy, axis=(1, 2))
        gxx = np.sum(wx * wx, axis=(1, 2))
        det = gyy * gxx - gxy * gxy
        lam_min = 0.5 * (gyy + gxx) - np.sqrt(0.25 * (gyy - gxx) ** 2 + gxy ** 2)
        ok &= lam_min / (window * window) >= min_eigen
        safe_det = np.where(ok, det, 1.0)

        nu = np.zeros((n, 2))
        settled[:] = False
        for _ in range(iterations):
            active = ok & ~settled
            if not active.any():
                break
            qy = py + (guess[:, 0] + nu[:, 0])[:, None, None]
            qx = px + (guess[:, 1] + nu[:, 1])[:, None, None]
            t1 = ndimage.map_coordinates(img1, [qy.ravel(), qx.ravel()], order=1,
                                         mode="nearest").reshape(shape)
            diff = t0 - t1
            by = np.sum(diff * wy, axis=(1, 2))
            bx = np.sum(diff * wx, axis=(1, 2))
            eta_y = (gxx * by - gxy * bx) / safe_det
            eta_x = (gyy * bx - gxy * by) / safe_det
            eta_y = np.where(active, eta_y, 0.0)
            eta_x = np.where(active, eta_x, 0.0)
            nu[:, 0] += eta_y
            nu[:, 1] += eta_x
            settled |= active & (np.hypot(eta_y, eta_x) < epsilon)
        total = guess + nu
        guess = total * 2.0 if level > 0 else total

    h, w = prev.shape
    end_y = pts[:, 0] + guess[:, 0]
    end_x = pts[:, 1] + guess[:, 1]
    # the full window must stay inside both frames
    inside = np.ones(n, dtype=bool)
    for yy, xx in ((pts[:, 0], pts[:, 1]), (end_y, end_x)):
        inside &= (yy >= half) & (yy <= h - 1 - half) & (xx >= half) & (xx <= w - 1 - half)
    conv = ok & settled & inside & np.all(np.isfinite(guess), axis=1)
    return [Track(float(pts[i, 0]), float(pts[i, 1]),
                  float(guess[i, 0]) if conv[i] else 0.0,
                  float(guess[i, 1]) if conv[i] else 0.0,
                  bool(conv[i]))
            for i in range(n)]


# ---------------------------------------------------------------------------
# Rigid transform fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameTransform:
    """Rigid motion between two frames.

    The rotation is about the centroid of the matched points, so ``(ty, tx)``
    is the displacement of that centroid.
    """

    ty: float = 0.0
    tx: float = 0.0
    angle: float = 0.0
    center: tuple[float, float] = field(default=(0.0, 0.0), compare=False)

    def magnitude(self, rotation_scale: float = 0.0) -> float:
        return math.hypot(self.ty, self.tx) + rotation_scale * abs(self.angle)

    def apply(self, y, x):
        cy, cx = self.center
        c, s = math.cos(self.angle), math.sin(self.angle)
        ry = np.asarray(y, dtype=np.float64) - cy
        rx = np.asarray(x, dtype=np.float64) - cx
        return (cy + s * rx + c * ry + self.ty,
                cx + c * rx - s * ry + self.tx)


def _fit(src: np.ndarray, dst: np.ndarray, rotation: bool) -> FrameTransform:
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    angle = 0.0
    if rotation:
        a = src - cs
        b = dst - cd
        # columns are (y, x); angle measured from +x towards +y
        cross = np.sum(a[:, 1] * b[:, 0] - a[:, 0] * b[:, 1])
        dot = np.sum(a[:, 1] * b[:, 1] + a[:, 0] * b[:, 0])
        angle = math.atan2(cross, dot) if (cross or dot) else 0.0
    t = cd - cs
    return FrameTransform(float(t[0]), float(t[1]), float(angle), (float(cs[0]), float(cs[1])))


def _residuals(tf: FrameTransform, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    py, px = tf.apply(src[:, 0], src[:, 1])
    return np.hypot(py - dst[:, 0], px - dst[:, 1])


def estimate_transform(matches, rotation: bool = True) -> FrameTransform:
    """Least-squares rigid fit to ``(point, displacement)`` matches.

    Points and displacements are ``(y, x)`` pairs; :class:`Track` objects are
    accepted directly (unconverged tracks are skipped).  After the first fit,
    matches with residual above three times the median are dropped and the
    model is refit once.
    """
    src, disp = [], []
    for m in matches:
        if isinstance(m, Track):
            if not m.converged:
                continue
            src.append((m.y, m.x))
            disp.append((m.dy, m.dx))
        else:
            p, d = m
            src.append(tuple(p))
            disp.append(tuple(d))
    need = 3 if rotation else 1
    if len(src) < need:
        raise InsufficientDataError(f"need at least {need} matches, got {len(src)}")
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = src + np.asarray(disp, dtype=np.float64).reshape(-1, 2)

    tf = _fit(src, dst, rotation)
    res = _residuals(tf, src, dst)
    cutoff = max(3.0 * float(np.median(res)), 1e-9)
    keep = res <= cutoff
    if not keep.all() and keep.sum() >= need:
        tf = _fit(src[keep], dst[keep], rotation)
    return tf
