"""Camera-motion ranking, deformable feature alignment and feature fusion."""

from .flow import FlowField, FlowParams, dense_flow, estimate_transform, lk_track, shi_tomasi_corners
from .rank import MotionProfile, RankingReport, build_report, compute_rank, rank_video_flow, rank_video_stabilize
from .synth import SynthSpec, generate_synth

__version__ = "0.1.0"

__all__ = [
    "FlowField",
    "FlowParams",
    "MotionProfile",
    "RankingReport",
    "SynthSpec",
    "build_report",
    "compute_rank",
    "dense_flow",
    "estimate_transform",
    "generate_synth",
    "lk_track",
    "rank_video_flow",
    "rank_video_stabilize",
    "shi_tomasi_corners",
]
