"""Acceptance gate: one test and one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""

import time

import numpy as np
from scipy.stats import spearmanr

from camflow import align
from camflow.checks import brute_refine, cumulative_ratio, fractional_offsets, alignment_recovery_error
from camflow.flow import FlowField, dense_flow
from camflow.fusion import EmbedNet, GlobalFeature, fuse_average, fuse_weighted, fuse_weighted_backward
from camflow.grid import finite_diff_check, sample_map, sample_map_backward
from camflow.rank import (MotionProfile, box_mask, compute_rank, frame_flow_magnitude, mask_flow,
                          rank_video_flow, rank_video_stabilize)
from camflow.synth import SynthSpec, generate_synth

GRAD_TOL = 1e-3
FD_STEP = 1e-4
SEEDS = range(10)


def flow_rank(**kw):
    return rank_video_flow(generate_synth(SynthSpec(**kw)).frames)[1]


def test_01_ranking_monotonicity(criterion):
    amps = [0, 1, 2, 4]
    start = time.perf_counter()
    ranks = [flow_rank(path="jitter", amplitude=a, height=128, width=128, nframes=30) for a in amps]
    elapsed = time.perf_counter() - start
    rho = spearmanr(amps, ranks).statistic
    increasing = all(a < b for a, b in zip(ranks, ranks[1:]))
    detail = "ranks " + ", ".join(f"{r:.4f}" for r in ranks) + f"; rho {rho:.3f}; {elapsed:.1f}s"
    criterion(1, "ranking monotonicity", increasing and rho == 1.0 and elapsed < 30, detail)


def test_02_pan_vs_jitter(criterion):
    common = dict(height=128, width=128, nframes=30)
    pan = flow_rank(path="pan", velocity=(0, 2), **common)
    jitter = flow_rank(path="jitter", amplitude=2, **common)
    criterion(2, "smooth pan vs jitter", pan < 0.1 * jitter,
              f"pan {pan:.4f}, jitter {jitter:.4f}, ratio {pan / jitter:.4f}")


def test_03_static_video(criterion):
    rank = flow_rank(path="static", height=128, width=128, nframes=30)
    criterion(3, "static video", abs(rank) <= 1e-6, f"rank {rank:.3g}")


def test_04_dense_flow_accuracy(criterion):
    a, b = generate_synth(SynthSpec(seed=0, height=128, width=128, nframes=2,
                                    path="pan", velocity=(0, 2))).frames
    field = dense_flow(a, b)
    inner = (slice(5, -5), slice(5, -5))
    epe = float(np.mean(np.hypot(field.dy[inner] - 0.0, field.dx[inner] - 2.0)))
    criterion(4, "dense flow accuracy", epe <= 0.5, f"interior EPE {epe:.4f} px")


def test_05_masking_exactness(criterion):
    rng = np.random.default_rng(0)
    worst_inside = 0.0
    sum_err = 0.0
    for _ in range(20):
        h, w = rng.integers(8, 40, 2)
        flow = FlowField(rng.standard_normal((h, w)), rng.standard_normal((h, w)))
        boxes = []
        for _ in range(rng.integers(1, 4)):
            x1, y1 = rng.integers(0, w - 1), rng.integers(0, h - 1)
            boxes.append((x1, y1, rng.integers(x1 + 1, w + 1), rng.integers(y1 + 1, h + 1)))
        inside = box_mask((h, w), boxes)
        mag = mask_flow(flow, boxes).magnitude()
        worst_inside = max(worst_inside, float(np.abs(mag[inside]).max()))
        expected = float(np.hypot(flow.dy, flow.dx)[~inside].sum()) / (h * w)
        sum_err = max(sum_err, abs(frame_flow_magnitude(mask_flow(flow, boxes)) - expected))
    example = frame_flow_magnitude(mask_flow(FlowField(np.zeros((10, 10)), np.full((10, 10), 2.0)),
                                             [(0, 0, 5, 5)]))
    ok = worst_inside == 0.0 and sum_err <= 1e-12 and example == 1.5
    criterion(5, "masking exactness", ok,
              f"max masked contribution {worst_inside}, sum error {sum_err:.2g}, example {example}")


def test_06_rank_unit_fidelity(criterion):
    r = compute_rank(MotionProfile("v", [1.0, 3.0, 2.0], 3))
    c = compute_rank(MotionProfile("v", [2.5] * 6, 7))
    criterion(6, "rank unit fidelity", r == 1.0 and c == 0.0, f"[1,3,2] -> {r}, constant -> {c}")


def test_07_zero_offset_identity(criterion):
    exact = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        stack = align.random_stack(rng, channels=int(rng.integers(1, 5)),
                                   timesteps=int(rng.integers(1, 4)), sizes=(9, 5, 3, 1))
        ok = True
        for s in range(stack.num_scales):
            zeros = [np.zeros((stack.timesteps, 2, *stack.shape(k)[1:])) for k in range(stack.num_scales)]
            out = align.deformable_sample(stack, zeros, s)
            ok &= all(np.array_equal(o, x) for o, x in zip(out, stack.scales[s]))
        exact += ok
    criterion(7, "zero-offset identity", exact == 20, f"{exact}/20 instances bit-exact")


def test_08_pyramid_refinement(criterion):
    sizes = align.DEFAULT_SCALES
    raw = [np.zeros((1, 2, s, s)) for s in sizes]
    raw[-1][0, 0], raw[-1][0, 1] = 0.75, -1.5
    refined = align.refine_offsets(raw)
    oracle = brute_refine(raw)
    ratios = cumulative_ratio(sizes)
    prop_err = max(max(float(np.abs(r - o).max()) for r, o in zip(refined, oracle)),
                   max(float(np.abs(r[0, 0] - 0.75 * k).max()) for r, k in zip(refined, ratios)),
                   max(float(np.abs(r[0, 1] + 1.5 * k).max()) for r, k in zip(refined, ratios)))
    lin_err = 0.0
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = [rng.standard_normal((2, 2, s, s)) for s in sizes]
        y = [rng.standard_normal((2, 2, s, s)) for s in sizes]
        a, b = rng.uniform(-3, 3, 2)
        lhs = align.refine_offsets([a * p + b * q for p, q in zip(x, y)])
        rx, ry = align.refine_offsets(x), align.refine_offsets(y)
        lin_err = max(lin_err, max(float(np.abs(l - (a * p + b * q)).max())
                                   for l, p, q in zip(lhs, rx, ry)))
    criterion(8, "pyramid refinement", prop_err <= 1e-9 and lin_err <= 1e-9,
              f"propagation error {prop_err:.2g}, linearity error {lin_err:.2g}")


def _bilinear_errors(rng):
    fmap = rng.standard_normal((2, 6, 6))
    shape = (4, 4)
    ys = rng.integers(-1, 6, shape) + rng.uniform(0.1, 0.9, shape)
    xs = rng.integers(-1, 6, shape) + rng.uniform(0.1, 0.9, shape)
    up = rng.standard_normal((2, *shape))
    g_map, g_y, g_x = sample_map_backward(fmap, ys, xs, up)
    loss = lambda m, yy, xx: float(np.sum(up * sample_map(m, yy, xx)))
    e_val = finite_diff_check(lambda p: loss(p.reshape(fmap.shape), ys, xs), g_map, fmap, FD_STEP)
    e_y = finite_diff_check(lambda p: loss(fmap, p.reshape(shape), xs), g_y, ys, FD_STEP)
    e_x = finite_diff_check(lambda p: loss(fmap, ys, p.reshape(shape)), g_x, xs, FD_STEP)
    return e_val.max_rel_error, max(e_y.max_rel_error, e_x.max_rel_error)


def _deform_error(rng):
    fmap = rng.standard_normal((2, 5, 5))
    off = fractional_offsets(rng, (2, 5, 5))
    up = rng.standard_normal((2, 5, 5))
    kernel = rng.standard_normal((3, 3))
    _, g_off, _ = align.deform_map_backward(fmap, off, up, kernel)
    f = lambda p: float(np.sum(up * align.deform_map(fmap, p.reshape(off.shape), kernel)))
    return finite_diff_check(f, g_off, off, FD_STEP).max_rel_error


def _fusion_errors(rng):
    local = rng.standard_normal((3, 4, 4))
    glob = GlobalFeature(rng.standard_normal(3), 4, 4)
    net = EmbedNet.random(3, rng)
    up = rng.standard_normal(local.shape) / local.size
    g = fuse_weighted_backward(local, glob, net, up)
    loss = lambda l, gl, n: float(np.sum(up * fuse_weighted(l, gl, n)[0]))
    e_l = finite_diff_check(lambda p: loss(p.reshape(local.shape), glob, net), g.local, local, FD_STEP)
    e_g = finite_diff_check(lambda p: loss(local, GlobalFeature(p, 4, 4), net), g.global_,
                            glob.values, FD_STEP)
    e_n = finite_diff_check(lambda p: loss(local, glob, net.with_flat(p)), g.embed_flat(),
                            net.flat(), FD_STEP)
    return e_l.max_rel_error, e_g.max_rel_error, e_n.max_rel_error


def test_09_gradient_suite(criterion):
    start = time.perf_counter()
    worst = dict.fromkeys(("bilinear values", "bilinear coords", "deform offsets",
                           "fusion local", "fusion global", "fusion embed"), 0.0)
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        vals = (*_bilinear_errors(rng), _deform_error(rng), *_fusion_errors(rng))
        for key, v in zip(worst, vals):
            worst[key] = max(worst[key], v)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < GRAD_TOL and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    criterion(9, "gradient suite", ok, detail)


def test_10_fusion_contracts(criterion):
    sum_err = avg_err = convex = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 6))
        local = rng.standard_normal((c, 5, 7)) * 3
        glob = GlobalFeature(rng.standard_normal(c) * 3, 5, 7)
        fused, w = fuse_weighted(local, glob, EmbedNet.random(c, rng, scale=1.0))
        sum_err = max(sum_err, float(np.abs(w.local + w.global_ - 1).max()))
        g = glob.broadcast()
        convex = max(convex, float(np.max(np.minimum(local, g) - fused)),
                     float(np.max(fused - np.maximum(local, g))))
        zero_fused, _ = fuse_weighted(local, glob, EmbedNet.zeros(c))
        avg_err = max(avg_err, float(np.abs(zero_fused - fuse_average(local, glob)).max()))
    ok = sum_err <= 1e-12 and avg_err <= 1e-12 and convex <= 1e-12
    criterion(10, "fusion contracts", ok,
              f"weight sum error {sum_err:.2g}, zero-net vs average {avg_err:.2g}, "
              f"convex overshoot {max(convex, 0.0):.2g}")


def test_11_alignment_recovery(criterion):
    errs = [alignment_recovery_error(np.random.default_rng(s), shift=shift)
            for s, shift in enumerate([(2, -1), (1, 3), (-2, 0), (0, -2)])]
    criterion(11, "alignment recovery", max(errs) <= 1e-9, f"max interior error {max(errs):.2g}")


def test_12_method_agreement(criterion):
    amps = [0, 0.5, 1, 1.5, 2, 3, 4, 6]
    flow_ranks, stab_ranks = [], []
    for i, a in enumerate(amps):
        frames = generate_synth(SynthSpec(seed=3 + i, height=96, width=96, nframes=12,
                                          path="jitter", amplitude=a)).frames
        flow_ranks.append(rank_video_flow(frames)[1])
        stab_ranks.append(rank_video_stabilize(frames)[0])
    rho = spearmanr(flow_ranks, stab_ranks).statistic
    criterion(12, "ranking method agreement", rho >= 0.9, f"Spearman rho {rho:.3f} over 8 videos")
