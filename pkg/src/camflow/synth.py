"""Synthetic moving-camera sequences with closed-form ground truth.

A seeded band-limited texture is viewed through a camera that follows one of
a few simple paths.  Image content at frame ``t`` is the texture shifted by
the camera offset ``p_t`` (content moves by ``+p_t``), so the true flow for the
pair ``(t, t+1)`` is ``p_{t+1} - p_t`` everywhere outside the sprite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import sample_map

CAMERA_PATHS = ("static", "pan", "jitter", "mixed")

# cycle of camera offsets for jitter, in units of the amplitude, as (dy, dx)
_JITTER_CYCLE = ((0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0))


class SynthSpecError(ValueError):
    pass


@dataclass
class Sprite:
    """Textured box moving with its own constant velocity (pixels/frame)."""

    y: float
    x: float
    height: int
    width: int
    vy: float = 0.0
    vx: float = 0.0
    seed: int = 1


@dataclass
class SynthSpec:
    seed: int = 0
    height: int = 128
    width: int = 128
    nframes: int = 30
    path: str = "static"
    # pan speed (dy, dx) in px/frame, used by "pan" and "mixed"
    velocity: tuple[float, float] = (0.0, 2.0)
    # jitter amplitude in px, used by "jitter" and "mixed"
    amplitude: float = 0.0
    sprite: Sprite | None = None
    video_id: str = "synth"
    box_width: int = 5

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        sprite = d.pop("sprite", None)
        if "velocity" in d:
            d["velocity"] = tuple(float(v) for v in d["velocity"])
        spec = cls(**d)
        if sprite is not None:
            spec.sprite = Sprite(**sprite)
        return spec

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("seed", "height", "width", "nframes", "path",
                                             "amplitude", "video_id", "box_width")}
        out["velocity"] = list(self.velocity)
        if self.sprite is not None:
            out["sprite"] = dict(self.sprite.__dict__)
        return out


@dataclass
class SynthResult:
    frames: list[np.ndarray]
    boxes: dict[int, list[tuple[int, int, int, int]]]
    offsets: list[tuple[float, float]]
    displacements: list[tuple[float, float]] = field(default_factory=list)

    @property
    def true_magnitudes(self) -> list[float]:
        return [math.hypot(dy, dx) for dy, dx in self.displacements]


def band_limited_texture(seed: int, height: int, width: int, box_width: int = 5) -> np.ndarray:
    """White noise smoothed by three box-filter passes, rescaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    tex = rng.random((height, width))
    for _ in range(3):
        tex = ndimage.uniform_filter(tex, box_width, mode="wrap")
    lo, hi = tex.min(), tex.max()
    return (tex - lo) / (hi - lo)


def camera_offsets(spec: SynthSpec) -> list[tuple[float, float]]:
    """Camera offset ``(dy, dx)`` for every frame."""
    if spec.path not in CAMERA_PATHS:
        raise SynthSpecError(f"unknown camera path {spec.path!r}; expected one of {CAMERA_PATHS}")
    out = []
    for t in range(spec.nframes):
        oy = ox = 0.0
        if spec.path in ("pan", "mixed"):
            oy += spec.velocity[0] * t
            ox += spec.velocity[1] * t
        if spec.path in ("jitter", "mixed"):
            cy, cx = _JITTER_CYCLE[t % len(_JITTER_CYCLE)]
            oy += spec.amplitude * cy
            ox += spec.amplitude * cx
        out.append((oy, ox))
    return out


def _sprite_box(sp: Sprite, t: int) -> tuple[int, int, int, int]:
    y = sp.y + sp.vy * t
    x = sp.x + sp.vx * t
    return (int(math.floor(x)), int(math.floor(y)),
            int(math.ceil(x + sp.width)), int(math.ceil(y + sp.height)))


def generate_synth(spec: SynthSpec) -> SynthResult:
    """Render ``spec`` into frames, sprite boxes and ground-truth camera motion."""
    if spec.nframes < 1 or spec.height < 1 or spec.width < 1:
        raise SynthSpecError("frame size and count must be positive")
    offsets = camera_offsets(spec)
    margin = int(math.ceil(max((max(abs(a), abs(b)) for a, b in offsets), default=0.0))) + 2
    tex = band_limited_texture(spec.seed, spec.height + 2 * margin,
                               spec.width + 2 * margin, spec.box_width)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)

    sprite_tex = None
    if spec.sprite is not None:
        sp = spec.sprite
        sprite_tex = band_limited_texture(sp.seed, sp.height, sp.width, spec.box_width)

    frames = []
    boxes: dict[int, list[tuple[int, int, int, int]]] = {}
    for t, (oy, ox) in enumerate(offsets):
        frame = sample_map(tex, yy + margin - oy, xx + margin - ox)[0]
        if sprite_tex is not None:
            x1, y1, x2, y2 = _sprite_box(spec.sprite, t)
            if x1 < 0 or y1 < 0 or x2 > spec.width or y2 > spec.height:
                raise SynthSpecError(f"sprite leaves the frame at frame {t}")
            sy = spec.sprite.y + spec.sprite.vy * t
            sx = spec.sprite.x + spec.sprite.vx * t
            iy0, ix0 = int(math.floor(sy)), int(math.floor(sx))
            # integer placement keeps the sprite texture crisp
            frame[iy0:iy0 + spec.sprite.height, ix0:ix0 + spec.sprite.width] = sprite_tex
            boxes.setdefault(t, []).append((x1, y1, x2, y2))
        frames.append(np.clip(frame, 0.0, 1.0))

    disp = [(offsets[t + 1][0] - offsets[t][0], offsets[t + 1][1] - offsets[t][1])
            for t in range(len(offsets) - 1)]
    return SynthResult(frames, boxes, offsets, disp)
