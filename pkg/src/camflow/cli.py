"""Command-line entry point: ``camflow <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import checks
from .flow import FlowParams, dense_flow
from .io import (load_annotations, load_frames, save_frames, write_annotations, write_flow)
from .rank import (METHODS, RankedVideo, StabilizeParams, build_report, rank_video_flow,
                   rank_video_stabilize)
from .synth import SynthSpec, generate_synth

log = logging.getLogger("camflow")


def worker_count() -> int:
    """Worker threads from ``CAMFLOW_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("CAMFLOW_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        log.warning("ignoring non-integer CAMFLOW_THREADS=%r", raw)
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _flow_params(args) -> FlowParams:
    return FlowParams(levels=args.levels, iterations=args.iterations, alpha=args.alpha)


def _rank_one(frames_dir, boxes_csv, args) -> RankedVideo:
    seq = load_frames(frames_dir)
    if len(seq) < 2:
        raise ValueError(f"{frames_dir}: ranking needs at least two frames")
    if args.method == "flow":
        boxes = load_annotations(boxes_csv, seq.shape) if boxes_csv else {}
        profile, rank = rank_video_flow(seq, boxes, _flow_params(args), normalize=args.normalize)
        flags = profile.flags
    else:
        rank, _, flags = rank_video_stabilize(seq, StabilizeParams())
    return RankedVideo(seq.video_id, rank, len(seq), args.method, tuple(flags))


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _write_histogram(report, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, count in report.histogram:
            writer.writerow([f"{lo:.6g}", f"{hi:.6g}", count])


def cmd_rank(args) -> int:
    row = _rank_one(args.frames, args.boxes, args)
    report = build_report([row], bins=args.bins)
    _write_json(report.to_json_rows(), args.out)
    if args.hist:
        _write_histogram(report, args.hist)
    return 0


def _read_corpus_list(path) -> list[tuple[str, str | None]]:
    base = Path(path).parent
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        frames = base / parts[0]
        boxes = base / parts[1] if len(parts) > 1 else None
        entries.append((str(frames), str(boxes) if boxes else None))
    return entries


def cmd_rank_corpus(args) -> int:
    entries = _read_corpus_list(args.list)
    if not entries:
        log.error("corpus list %s is empty", args.list)
        return 1
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = list(pool.map(lambda e: _rank_one(e[0], e[1], args), entries))
    report = build_report(rows, bins=args.bins)
    _write_json(report.to_json_rows(), args.out)
    hist = args.hist or (str(Path(args.out).with_suffix(".csv")) if args.out not in (None, "-")
                         else None)
    if hist:
        _write_histogram(report, hist)
    return 0


def cmd_flow(args) -> int:
    seq = load_frames(args.frames)
    if not 0 <= args.pair < len(seq) - 1:
        log.error("pair %d out of range for %d frames", args.pair, len(seq))
        return 1
    field_ = dense_flow(seq.frames[args.pair], seq.frames[args.pair + 1], _flow_params(args))
    if field_.degenerate:
        log.warning("pair %d: degenerate (textureless) input, flow is zero", args.pair)
    write_flow(args.out, field_)
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text()))
    result = generate_synth(spec)
    out = Path(args.out)
    save_frames(out, result.frames, bits=args.bits)
    write_annotations(out / "boxes.csv", result.boxes)
    truth = {
        "spec": spec.to_dict(),
        "offsets": [list(o) for o in result.offsets],
        "displacements": [list(d) for d in result.displacements],
        "magnitudes": result.true_magnitudes,
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    return 0


def _run_suite(report, out) -> int:
    _write_json(report.to_dict(), out)
    failed = report.failures()
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_align_check(args) -> int:
    return _run_suite(checks.align_suite(args.seed), args.out)


def cmd_fuse_check(args) -> int:
    return _run_suite(checks.fusion_suite(args.seed), args.out)


def _add_flow_options(p) -> None:
    d = FlowParams()
    p.add_argument("--levels", type=int, default=d.levels, help="pyramid levels")
    p.add_argument("--iterations", type=int, default=d.iterations, help="solver iterations per level")
    p.add_argument("--alpha", type=float, default=d.alpha, help="smoothness weight")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rank", help="rank one video by camera motion")
    p.add_argument("--frames", required=True, help="directory of numbered PGM/PPM frames")
    p.add_argument("--boxes", help="actor box CSV (frame,x1,y1,x2,y2)")
    p.add_argument("--method", choices=METHODS, default="flow")
    p.add_argument("--normalize", choices=("all", "unmasked"), default="all",
                   help="per-frame denominator: every pixel, or unmasked pixels only")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", help="report JSON (default: stdout)")
    p.add_argument("--hist", help="histogram CSV")
    _add_flow_options(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("rank-corpus", help="rank many videos and histogram the ranks")
    p.add_argument("--list", required=True,
                   help="text file, one 'FRAMES_DIR [BOXES_CSV]' per line")
    p.add_argument("--method", choices=METHODS, default="flow")
    p.add_argument("--normalize", choices=("all", "unmasked"), default="all")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", help="report JSON (default: stdout)")
    p.add_argument("--hist", help="histogram CSV (default: report path with .csv)")
    _add_flow_options(p)
    p.set_defaults(func=cmd_rank_corpus)

    p = sub.add_parser("flow", help="write the dense flow of one frame pair")
    p.add_argument("--frames", required=True)
    p.add_argument("--pair", type=int, required=True, help="pair index i, flow from i to i+1")
    p.add_argument("--out", required=True, help="flow file to write")
    _add_flow_options(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("synth", help="render a synthetic sequence from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in (("align-check", cmd_align_check, "alignment self-checks"),
                              ("fuse-check", cmd_fuse_check, "fusion self-checks")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="check report JSON (default: stdout)")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
