"""Fusing per-location actor features with a pooled scene feature.

Three strategies: channel concatenation, plain averaging (or summation), and
weighted averaging where a small shared embedding network scores the local and
the broadcast global map at every location and a two-way softmax turns the
scores into mixing weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import as_feature_map, conv2d, conv2d_backward, global_avg_pool, softmax_pair

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class GlobalFeature:
    values: np.ndarray  # (C,)
    height: int
    width: int

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def broadcast(self) -> np.ndarray:
        return np.broadcast_to(self.values[:, None, None],
                               (self.channels, self.height, self.width)).copy()


@dataclass
class FusionWeights:
    local: np.ndarray   # (H, W)
    global_: np.ndarray  # (H, W)


@dataclass
class EmbedNet:
    """1x1 conv C->C/2, ReLU, 3x3 conv C/2->C/2, ReLU, 1x1 conv C/2->1."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @staticmethod
    def hidden_width(channels: int) -> int:
        return max(1, channels // 2)

    @classmethod
    def zeros(cls, channels: int) -> "EmbedNet":
        m = cls.hidden_width(channels)
        return cls(np.zeros((m, channels, 1, 1)), np.zeros(m),
                   np.zeros((m, m, 3, 3)), np.zeros(m),
                   np.zeros((1, m, 1, 1)), np.zeros(1))

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, scale: float = 0.5) -> "EmbedNet":
        m = cls.hidden_width(channels)
        return cls(rng.normal(0, scale, (m, channels, 1, 1)), rng.normal(0, scale, m),
                   rng.normal(0, scale, (m, m, 3, 3)), rng.normal(0, scale, m),
                   rng.normal(0, scale, (1, m, 1, 1)), rng.normal(0, scale, 1))

    def params(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def with_flat(self, vec) -> "EmbedNet":
        vec = np.asarray(vec, dtype=np.float64)
        parts, pos = {}, 0
        for name, p in zip(PARAM_NAMES, self.params()):
            parts[name] = vec[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        return EmbedNet(**parts)

    def forward(self, x: np.ndarray):
        """Return the one-channel embedding ``(H, W)`` and a cache for :meth:`backward`."""
        x = as_feature_map(x)
        if x.shape[0] != self.channels:
            raise ValueError(f"EmbedNet expects {self.channels} channels, got {x.shape[0]}")
        z1 = conv2d(x, self.w1, self.b1)
        a1 = np.maximum(z1, 0.0)
        z2 = conv2d(a1, self.w2, self.b2)
        a2 = np.maximum(z2, 0.0)
        out = conv2d(a2, self.w3, self.b3)
        return out[0], (x, z1, a1, z2, a2)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, upstream: np.ndarray):
        """Return ``(grad_input, {param name: grad})`` for an ``(H, W)`` upstream."""
        x, z1, a1, z2, a2 = cache
        g_a2, g_w3, g_b3 = conv2d_backward(a2, self.w3, upstream[None])
        g_z2 = g_a2 * (z2 > 0)
        g_a1, g_w2, g_b2 = conv2d_backward(a1, self.w2, g_z2)
        g_z1 = g_a1 * (z1 > 0)
        g_x, g_w1, g_b1 = conv2d_backward(x, self.w1, g_z1)
        return g_x, dict(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2, w3=g_w3, b3=g_b3)


def _check_pair(local: np.ndarray, glob: GlobalFeature) -> None:
    if glob.channels != local.shape[0]:
        raise ValueError(f"local has {local.shape[0]} channels, global has {glob.channels}")
    if (glob.height, glob.width) != local.shape[1:]:
        raise ValueError(f"global broadcast size {(glob.height, glob.width)} does not match "
                         f"local {local.shape[1:]}")


def make_global(local) -> GlobalFeature:
    local = as_feature_map(local)
    _, h, w = local.shape
    return GlobalFeature(global_avg_pool(local)[:, 0, 0], h, w)


def fuse_concat(local, glob: GlobalFeature) -> np.ndarray:
    """``2C`` channels: the local map followed by the broadcast global map."""
    local = as_feature_map(local)
    _check_pair(local, glob)
    return np.concatenate([local, glob.broadcast()], axis=0)


def fuse_average(local, glob: GlobalFeature, mode: str = "mean") -> np.ndarray:
    local = as_feature_map(local)
    _check_pair(local, glob)
    total = local + glob.broadcast()
    if mode == "mean":
        return total / 2.0
    if mode == "sum":
        return total
    raise ValueError(f"unknown averaging mode {mode!r}")


def fuse_weighted(local, glob: GlobalFeature, embed: EmbedNet):
    """Softmax-weighted mix of local and global features; returns ``(fused, weights)``."""
    local = as_feature_map(local)
    _check_pair(local, glob)
    gmap = glob.broadcast()
    w_l, w_g = softmax_pair(embed(local), embed(gmap))
    return local * w_l + gmap * w_g, FusionWeights(w_l, w_g)


@dataclass
class FusionGrads:
    local: np.ndarray
    global_: np.ndarray
    embed: dict[str, np.ndarray]

    def embed_flat(self) -> np.ndarray:
        return np.concatenate([self.embed[n].ravel() for n in PARAM_NAMES])


def fuse_weighted_backward(local, glob: GlobalFeature, embed: EmbedNet, upstream) -> FusionGrads:
    """Gradients of ``sum(upstream * fuse_weighted(local, glob, embed)[0])``."""
    local = as_feature_map(local)
    _check_pair(local, glob)
    upstream = np.asarray(upstream, dtype=np.float64)
    gmap = glob.broadcast()
    e_l, cache_l = embed.forward(local)
    e_g, cache_g = embed.forward(gmap)
    w_l, w_g = softmax_pair(e_l, e_g)

    # d p / d e_l = (local - global) * w_l * w_g, and the opposite for e_g
    g_el = np.sum(upstream * (local - gmap), axis=0) * w_l * w_g
    gx_l, gp_l = embed.backward(cache_l, g_el)
    gx_g, gp_g = embed.backward(cache_g, -g_el)

    grad_local = upstream * w_l + gx_l
    grad_gmap = upstream * w_g + gx_g
    grads = {n: gp_l[n] + gp_g[n] for n in PARAM_NAMES}
    return FusionGrads(grad_local, grad_gmap.sum(axis=(1, 2)), grads)
