"""Camera-motion ranking of videos.

Per consecutive frame pair the dense flow is computed, flow inside actor boxes
is zeroed, and the mean flow magnitude over the whole frame is recorded.  The
rank of a video is the total variation of that series divided by the number
of frames: smooth pans score near zero, jittery cameras score high.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .flow import (FlowField, FlowParams, InsufficientDataError, dense_flow,
                   estimate_transform, lk_track, shi_tomasi_corners)

METHODS = ("flow", "stabilize")


@dataclass
class MotionProfile:
    video_id: str
    flow: np.ndarray
    nframes: int
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if np.any(self.flow < 0):
            raise ValueError("flow magnitudes must be nonnegative")


@dataclass(frozen=True)
class RankedVideo:
    video: str
    rank: float
    nframes: int
    method: str
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"video": self.video, "rank": self.rank, "nframes": self.nframes,
                "method": self.method, "flags": list(self.flags)}


@dataclass
class RankingReport:
    rows: list[RankedVideo]
    # (bin_lo, bin_hi, count)
    histogram: list[tuple[float, float, int]]

    def to_json_rows(self) -> list[dict]:
        return [r.to_dict() for r in self.rows]


# ---------------------------------------------------------------------------
# Per-frame pieces
# ---------------------------------------------------------------------------

def box_mask(shape: tuple[int, int], boxes) -> np.ndarray:
    """Boolean mask of pixels whose centre lies inside any ``(x1, y1, x2, y2)`` box."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    for x1, y1, x2, y2 in boxes or ():
        x1, x2 = max(0, int(x1)), min(w, int(x2))
        y1, y2 = max(0, int(y1)), min(h, int(y2))
        if x1 < x2 and y1 < y2:
            mask[y1:y2, x1:x2] = True
    return mask


def mask_flow(flow: FlowField, boxes) -> FlowField:
    """Zero the flow at every pixel inside an actor box."""
    mask = box_mask(flow.shape, boxes)
    return FlowField(np.where(mask, 0.0, flow.dy), np.where(mask, 0.0, flow.dx),
                     flow.degenerate)


def frame_flow_magnitude(masked: FlowField, mask=None, normalize: str = "all") -> float:
    """Mean flow magnitude of a frame pair.

    ``normalize="all"`` divides by every pixel, masked ones included.  With
    ``normalize="unmasked"`` the denominator is the number of pixels outside
    ``mask`` (the sum is the same; masked pixels already carry zero flow).
    """
    total = float(np.sum(masked.magnitude()))
    h, w = masked.shape
    if normalize == "all":
        return total / (h * w)
    if normalize == "unmasked":
        n = h * w - (int(np.count_nonzero(mask)) if mask is not None else 0)
        return total / n if n > 0 else 0.0
    raise ValueError(f"unknown normalization {normalize!r}")


def compute_rank(profile: MotionProfile) -> float:
    """Sum of absolute successive differences of the flow series over ``nframes``."""
    flow = profile.flow
    if len(flow) < 2 or profile.nframes <= 0:
        return 0.0
    return float(np.sum(np.abs(np.diff(flow)))) / profile.nframes


# ---------------------------------------------------------------------------
# Whole-video ranking
# ---------------------------------------------------------------------------

def _frames_of(frames) -> list[np.ndarray]:
    return list(getattr(frames, "frames", frames))


def rank_video_flow(frames, boxes: dict[int, list] | None = None,
                    params: FlowParams | None = None, video_id: str | None = None,
                    normalize: str = "all", executor=None):
    """Rank a video by its dense-flow profile; returns ``(profile, rank)``.

    Boxes annotated on frame ``t`` mask the flow of pair ``(t, t+1)``.  An
    ``executor`` with an ordered ``map`` may be supplied to compute frame
    pairs concurrently.
    """
    seq = _frames_of(frames)
    if len(seq) < 2:
        raise ValueError("ranking needs at least two frames")
    video_id = video_id or getattr(frames, "video_id", "video")
    boxes = boxes or {}

    def one_pair(t):
        field_ = dense_flow(seq[t], seq[t + 1], params)
        b = boxes.get(t, [])
        masked = mask_flow(field_, b)
        return frame_flow_magnitude(masked, box_mask(field_.shape, b), normalize), field_.degenerate

    pairs = range(len(seq) - 1)
    results = list(executor.map(one_pair, pairs)) if executor else [one_pair(t) for t in pairs]
    flags = [f"pair {t}: degenerate input" for t, (_, deg) in enumerate(results) if deg]
    profile = MotionProfile(video_id, [m for m, _ in results], len(seq), flags)
    return profile, compute_rank(profile)


@dataclass(frozen=True)
class StabilizeParams:
    max_corners: int = 200
    quality_level: float = 0.01
    min_distance: float = 5.0
    levels: int = 3
    window: int = 15
    iterations: int = 20
    rotation: bool = True


def rank_video_stabilize(frames, params: StabilizeParams | None = None,
                         video_id: str | None = None):
    """Rank a video by the summed size of its frame-to-frame rigid transforms.

    Returns ``(rank, transforms, flags)``.  Rotation is weighted by the frame
    diagonal over pi so it is measured in pixels; pairs without enough
    tracked corners contribute zero and are flagged.
    """
    params = params or StabilizeParams()
    seq = _frames_of(frames)
    if len(seq) < 2:
        raise ValueError("ranking needs at least two frames")
    h, w = seq[0].shape
    rot_scale = math.hypot(h, w) / math.pi
    total = 0.0
    flags = []
    transforms = []
    for t in range(len(seq) - 1):
        corners = shi_tomasi_corners(seq[t], params.max_corners, params.quality_level,
                                     params.min_distance)
        tracks = lk_track(seq[t], seq[t + 1], corners, params.levels, params.window,
                          params.iterations)
        try:
            tf = estimate_transform(tracks, rotation=params.rotation)
        except InsufficientDataError:
            flags.append(f"pair {t}: insufficient matches")
            transforms.append(None)
            continue
        transforms.append(tf)
        total += tf.magnitude(rot_scale)
    return total / len(seq), transforms, flags


def build_report(rankings: Sequence[RankedVideo], bins: int = 20) -> RankingReport:
    """Sort videos by descending rank (ties by id) and histogram the ranks."""
    if not rankings:
        raise ValueError("cannot build a report from no videos")
    rows = sorted(rankings, key=lambda r: (-r.rank, r.video))
    ranks = np.array([r.rank for r in rows])
    top = float(ranks.max())
    counts, edges = np.histogram(ranks, bins=bins, range=(0.0, top if top > 0 else 1.0))
    hist = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    return RankingReport(rows, hist)
