"""Frame, annotation and flow-file I/O.

Frames are binary netpbm images (P5 grayscale, P6 RGB), 8- or 16-bit.
Annotations are CSV rows ``frame,x1,y1,x2,y2``.  Flow files hold a 4-byte
magic tag, height and width as little-endian int32, then row-major
``(dy, dx)`` float32 pairs.
"""

from __future__ import annotations

import csv
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import FlowField

log = logging.getLogger(__name__)

FLOW_MAGIC = b"CAMF"
FRAME_SUFFIXES = (".pgm", ".ppm", ".pnm")
LUMA = np.array([0.299, 0.587, 0.114])


class FrameFormatError(ValueError):
    pass


class AnnotationFormatError(ValueError):
    pass


@dataclass
class FrameSequence:
    video_id: str
    frames: list[np.ndarray]
    fps: float | None = None
    source: list[Path] = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise FrameFormatError(f"{self.video_id}: sequence has no frames")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise FrameFormatError(
                    f"{self.video_id}: frame {i} is {f.shape}, expected {shape}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(data: bytes, count: int):
    pos = 0
    out = []
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FrameFormatError("truncated netpbm header")
        out.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def read_netpbm(path) -> np.ndarray:
    """Read a binary PGM/PPM as float64 in [0, 1]; RGB is converted to luma."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read frame {path}: {exc}") from exc
    try:
        (magic, w, h, maxval), start = _header_tokens(data, 4)
        width, height, maxval = int(w), int(h), int(maxval)
    except (ValueError, FrameFormatError) as exc:
        raise FrameFormatError(f"{path}: bad netpbm header ({exc})") from exc
    if magic not in (b"P5", b"P6"):
        raise FrameFormatError(f"{path}: unsupported netpbm type {magic!r}")
    if not 0 < maxval < 65536:
        raise FrameFormatError(f"{path}: invalid maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = np.frombuffer(data, dtype=dtype, count=-1, offset=start)
    if raster.size < count:
        raise FrameFormatError(f"{path}: raster truncated ({raster.size} of {count} samples)")
    img = raster[:count].astype(np.float64).reshape(height, width, channels) / maxval
    if channels == 3:
        return img @ LUMA
    return img[:, :, 0]


def write_pgm(path, frame, bits: int = 8) -> None:
    """Write a [0, 1] grayscale frame as binary PGM with 8 or 16 bits per sample."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    frame = np.asarray(frame, dtype=np.float64)
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(frame, 0.0, 1.0) * maxval)
    raster = q.astype(">u2" if bits == 16 else "u1").tobytes()
    h, w = frame.shape
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + raster)


def write_ppm(path, rgb, bits: int = 8) -> None:
    rgb = np.asarray(rgb, dtype=np.float64)
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(rgb, 0.0, 1.0) * maxval)
    raster = q.astype(">u2" if bits == 16 else "u1").tobytes()
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n%d\n" % (w, h, maxval) + raster)


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------

_INDEX = re.compile(r"(\d+)(?!.*\d)")


def load_frames(path, video_id: str | None = None) -> FrameSequence:
    """Load a directory of numbered PGM/PPM frames in numeric order."""
    root = Path(path)
    if not root.is_dir():
        raise OSError(f"frame directory not found: {root}")
    indexed = []
    for p in root.iterdir():
        if p.suffix.lower() not in FRAME_SUFFIXES:
            continue
        m = _INDEX.search(p.stem)
        if m is None:
            log.warning("skipping unnumbered frame file %s", p.name)
            continue
        indexed.append((int(m.group(1)), p.name, p))
    if not indexed:
        raise FrameFormatError(f"no numbered frame files in {root}")
    indexed.sort()
    idx = [i for i, _, _ in indexed]
    if idx != list(range(idx[0], idx[0] + len(idx))):
        log.warning("%s: gap in frame numbering (%d..%d, %d files)",
                    root, idx[0], idx[-1], len(idx))
    frames = [read_netpbm(p) for _, _, p in indexed]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise FrameFormatError(f"{root}: inconsistent frame dimensions {sorted(shapes)}")
    return FrameSequence(video_id or root.name, frames, source=[p for _, _, p in indexed])


def save_frames(path, frames, bits: int = 8, digits: int = 3) -> list[Path]:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for i, f in enumerate(frames):
        p = root / f"{i:0{digits}d}.pgm"
        write_pgm(p, f, bits)
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

Box = tuple  # (x1, y1, x2, y2), inclusive-exclusive


def clip_box(box, height: int, width: int):
    x1, y1, x2, y2 = box
    return (max(0, min(x1, width)), max(0, min(y1, height)),
            max(0, min(x2, width)), max(0, min(y2, height)))


def load_annotations(path, frame_shape: tuple[int, int] | None = None) -> dict[int, list[Box]]:
    """Read ``frame,x1,y1,x2,y2`` rows into per-frame box lists.

    A header row is tolerated.  With ``frame_shape`` given as ``(H, W)``,
    boxes are clipped to the frame and a warning is logged for each clip.
    """
    boxes: dict[int, list[Box]] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() == "frame":
                continue
            if len(row) != 5:
                raise AnnotationFormatError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                frame, x1, y1, x2, y2 = (int(c) for c in row)
            except ValueError as exc:
                raise AnnotationFormatError(f"{path}:{lineno}: non-integer field") from exc
            if frame < 0:
                raise AnnotationFormatError(f"{path}:{lineno}: negative frame index")
            if x1 >= x2 or y1 >= y2:
                raise AnnotationFormatError(f"{path}:{lineno}: empty box ({x1},{y1},{x2},{y2})")
            box = (x1, y1, x2, y2)
            if frame_shape is not None:
                clipped = clip_box(box, *frame_shape)
                if clipped != box:
                    log.warning("%s:%d: box %s clipped to %s", path, lineno, box, clipped)
                    box = clipped
                if box[0] >= box[2] or box[1] >= box[3]:
                    continue
            boxes.setdefault(frame, []).append(box)
    return boxes


def write_annotations(path, boxes: dict[int, list[Box]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for frame in sorted(boxes):
            for box in boxes[frame]:
                writer.writerow([frame, *box])


# ---------------------------------------------------------------------------
# Flow files
# ---------------------------------------------------------------------------

def write_flow(path, flow: FlowField) -> None:
    h, w = flow.shape
    data = np.stack([flow.dy, flow.dx], axis=-1).astype("<f4")
    Path(path).write_bytes(FLOW_MAGIC + struct.pack("<ii", h, w) + data.tobytes())


def read_flow(path) -> FlowField:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise FrameFormatError(f"{path}: not a flow file")
    h, w = struct.unpack("<ii", data[4:12])
    arr = np.frombuffer(data, dtype="<f4", offset=12)
    if arr.size != h * w * 2:
        raise FrameFormatError(f"{path}: expected {h * w * 2} floats, found {arr.size}")
    arr = arr.reshape(h, w, 2).astype(np.float64)
    return FlowField(arr[:, :, 0], arr[:, :, 1])
