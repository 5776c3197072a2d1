"""Multi-scale deformable feature alignment for a clip of frames.

Features of the frames ``N-K .. N`` are concatenated along channels, a 3x3
convolution per scale predicts one displacement per cell and timestep, the
displacements are refined coarse-to-fine (coarse offsets upsampled and added
to finer ones) and every non-reference frame is resampled at the displaced
kernel taps so its features line up with frame ``N``.

Conventions: scale 0 is the finest; offsets are stored per scale as arrays of
shape ``(T, 2, H, W)`` holding ``(dy, dx)`` in that scale's cell units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import as_feature_map, bilinear_upsample, conv2d, sample_map, sample_map_backward

DEFAULT_SCALES = (38, 19, 10, 5, 3, 1)

IDENTITY_KERNEL = np.array([[0.0, 0.0, 0.0],
                            [0.0, 1.0, 0.0],
                            [0.0, 0.0, 0.0]])

_TAPS = [(a - 1, b - 1) for a in range(3) for b in range(3)]


@dataclass
class ClipFeatureStack:
    """``scales[s][t]`` is the ``(C, H, W)`` feature map of timestep ``t`` at scale ``s``.

    The reference timestep is the last one.
    """

    scales: list[list[np.ndarray]]

    def __post_init__(self):
        if not self.scales or not self.scales[0]:
            raise ValueError("clip stack needs at least one scale and one timestep")
        self.scales = [[as_feature_map(m) for m in maps] for maps in self.scales]
        steps = len(self.scales[0])
        prev_size = None
        for s, maps in enumerate(self.scales):
            if len(maps) != steps:
                raise ValueError(f"scale {s} has {len(maps)} timesteps, expected {steps}")
            shape = maps[0].shape
            if any(m.shape != shape for m in maps):
                raise ValueError(f"timesteps at scale {s} differ in shape")
            size = shape[1] * shape[2]
            if prev_size is not None and size >= prev_size:
                raise ValueError("scales must strictly shrink from scale 0 onwards")
            prev_size = size

    @property
    def timesteps(self) -> int:
        return len(self.scales[0])

    @property
    def reference(self) -> int:
        return self.timesteps - 1

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    def shape(self, scale: int) -> tuple[int, int, int]:
        return self.scales[scale][0].shape


@dataclass
class OffsetPredictor:
    """Per-scale 3x3 conv mapping the stacked channels to ``2 * T`` offset channels."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros(cls, channels_per_scale, timesteps: int) -> "OffsetPredictor":
        """Zero-initialised predictor; ``channels_per_scale`` lists per-frame channel counts."""
        ws = [np.zeros((2 * timesteps, c * timesteps, 3, 3)) for c in channels_per_scale]
        bs = [np.zeros(2 * timesteps) for _ in channels_per_scale]
        return cls(ws, bs)

    @classmethod
    def for_stack(cls, stack: ClipFeatureStack) -> "OffsetPredictor":
        return cls.zeros([stack.shape(s)[0] for s in range(stack.num_scales)], stack.timesteps)

    def set_bias(self, scale: int, timestep: int, dy: float, dx: float) -> None:
        self.biases[scale][2 * timestep] = dy
        self.biases[scale][2 * timestep + 1] = dx


def stack_features(maps) -> np.ndarray:
    """Concatenate feature maps along channels in temporal order."""
    maps = [as_feature_map(m) for m in maps]
    if not maps:
        raise ValueError("nothing to stack")
    hw = maps[0].shape[1:]
    for m in maps:
        if m.shape[1:] != hw:
            raise ValueError(f"spatial size mismatch: {m.shape[1:]} vs {hw}")
    return np.concatenate(maps, axis=0)


def predict_offsets(stack: ClipFeatureStack, predictor: OffsetPredictor) -> list[np.ndarray]:
    """Raw per-scale offsets, each of shape ``(T, 2, H, W)``."""
    if len(predictor.weights) != stack.num_scales or len(predictor.biases) != stack.num_scales:
        raise ValueError(f"predictor has {len(predictor.weights)} scales, "
                         f"stack has {stack.num_scales}")
    steps = stack.timesteps
    out = []
    for s in range(stack.num_scales):
        w = np.asarray(predictor.weights[s], dtype=np.float64)
        if w.shape[0] != 2 * steps or w.shape[2:] != (3, 3):
            raise ValueError(f"scale {s}: predictor weight shape {w.shape} does not give "
                             f"{2 * steps} offset channels from a 3x3 kernel")
        pred = conv2d(stack_features(stack.scales[s]), w, predictor.biases[s])
        _, h, wd = pred.shape
        out.append(pred.reshape(steps, 2, h, wd))
    return out


def upsample_offsets(field_: np.ndarray, out_h: int, out_w: int, rescale: bool = True) -> np.ndarray:
    """Upsample a ``(T, 2, h, w)`` offset field, optionally rescaling to the finer cell units.

    The align-corners factor is ``(fine - 1) / (coarse - 1)`` per axis; a
    single-cell axis uses ``fine``.
    """
    steps, _, h, w = field_.shape
    up = bilinear_upsample(field_.reshape(steps * 2, h, w), out_h, out_w).reshape(steps, 2, out_h, out_w)
    if rescale:
        ry = out_h if h == 1 else (out_h - 1) / (h - 1)
        rx = out_w if w == 1 else (out_w - 1) / (w - 1)
        up[:, 0] *= ry
        up[:, 1] *= rx
    return up


def refine_offsets(raw: list[np.ndarray], rescale: bool = True) -> list[np.ndarray]:
    """Coarse-to-fine refinement: each scale adds the upsampled refined coarser scale."""
    refined = [None] * len(raw)
    refined[-1] = np.array(raw[-1], dtype=np.float64)
    for s in range(len(raw) - 2, -1, -1):
        _, _, h, w = raw[s].shape
        refined[s] = raw[s] + upsample_offsets(refined[s + 1], h, w, rescale)
    return refined


def deform_map(fmap: np.ndarray, offsets: np.ndarray, kernel=IDENTITY_KERNEL) -> np.ndarray:
    """Deformable 3x3 sampling of one ``(C, H, W)`` map with a ``(2, H, W)`` offset field.

    The same displacement applies to all nine taps and every channel; taps are
    weighted by ``kernel`` (shared across channels).
    """
    fmap = as_feature_map(fmap)
    c, h, w = fmap.shape
    kernel = np.asarray(kernel, dtype=np.float64)
    if offsets.shape != (2, h, w):
        raise ValueError(f"offset field {offsets.shape} does not match map {fmap.shape}")
    if kernel.shape != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {kernel.shape}")
    out = np.zeros_like(fmap)
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    for a, b in _TAPS:
        wk = kernel[a + 1, b + 1]
        if wk == 0.0:
            continue
        out += wk * sample_map(fmap, ii + a + offsets[0], jj + b + offsets[1])
    return out


def deform_map_backward(fmap: np.ndarray, offsets: np.ndarray, upstream: np.ndarray,
                        kernel=IDENTITY_KERNEL):
    """Gradients of ``sum(upstream * deform_map(fmap, offsets, kernel))``.

    Returns ``(grad_map, grad_offsets, grad_kernel)``.
    """
    fmap = as_feature_map(fmap)
    c, h, w = fmap.shape
    kernel = np.asarray(kernel, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    grad_map = np.zeros_like(fmap)
    grad_off = np.zeros((2, h, w))
    grad_kernel = np.zeros((3, 3))
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    # fixed tap order keeps the accumulation deterministic
    for a, b in _TAPS:
        ys = ii + a + offsets[0]
        xs = jj + b + offsets[1]
        grad_kernel[a + 1, b + 1] = np.sum(upstream * sample_map(fmap, ys, xs))
        wk = kernel[a + 1, b + 1]
        if wk == 0.0:
            continue
        gm, gy, gx = sample_map_backward(fmap, ys, xs, wk * upstream)
        grad_map += gm
        grad_off[0] += gy
        grad_off[1] += gx
    return grad_map, grad_off, grad_kernel


def deformable_sample(stack: ClipFeatureStack, offsets: list[np.ndarray], scale: int,
                      kernel=IDENTITY_KERNEL) -> list[np.ndarray]:
    """Deform every timestep of ``stack`` at ``scale`` by its offset field."""
    field_ = offsets[scale]
    c, h, w = stack.shape(scale)
    if field_.shape != (stack.timesteps, 2, h, w):
        raise ValueError(f"offsets at scale {scale} have shape {field_.shape}, "
                         f"expected {(stack.timesteps, 2, h, w)}")
    return [deform_map(stack.scales[scale][t], field_[t], kernel) for t in range(stack.timesteps)]


def deformable_sample_backward(stack: ClipFeatureStack, offsets: list[np.ndarray], scale: int,
                               upstream: list[np.ndarray], kernel=IDENTITY_KERNEL):
    """Per-timestep gradients wrt features and offsets at one scale.

    Returns ``(grad_features, grad_offsets)``; ``grad_features[t]`` matches the
    feature map and ``grad_offsets`` has the shape of ``offsets[scale]``.
    """
    field_ = offsets[scale]
    grad_feat = []
    grad_off = np.zeros_like(field_, dtype=np.float64)
    for t in range(stack.timesteps):
        gm, go, _ = deform_map_backward(stack.scales[scale][t], field_[t], upstream[t], kernel)
        grad_feat.append(gm)
        grad_off[t] = go
    return grad_feat, grad_off


@dataclass
class AlignResult:
    stack: ClipFeatureStack
    raw: list[np.ndarray]
    refined: list[np.ndarray] = field(repr=False)


def align_clip(stack: ClipFeatureStack, predictor: OffsetPredictor, kernel=IDENTITY_KERNEL,
               rescale: bool = True, sample_reference: bool = False) -> AlignResult:
    """Predict, refine and apply offsets at every scale.

    The reference frame passes through untouched unless ``sample_reference``.
    """
    raw = predict_offsets(stack, predictor)
    refined = refine_offsets(raw, rescale)
    ref = stack.reference
    aligned = []
    for s in range(stack.num_scales):
        field_ = refined[s]
        maps = []
        for t in range(stack.timesteps):
            if t == ref and not sample_reference:
                maps.append(stack.scales[s][t].copy())
            else:
                maps.append(deform_map(stack.scales[s][t], field_[t], kernel))
        aligned.append(maps)
    return AlignResult(ClipFeatureStack(aligned), raw, refined)


def random_stack(rng: np.random.Generator, channels: int = 2, timesteps: int = 2,
                 sizes=DEFAULT_SCALES) -> ClipFeatureStack:
    """Stack of standard-normal features, handy for checks and experiments."""
    return ClipFeatureStack([[rng.standard_normal((channels, s, s)) for _ in range(timesteps)]
                             for s in sizes])
