"""Self-check suites for the alignment and fusion code.

Each suite runs seeded random instances against independent oracles (scalar
bilinear sampling, brute-force upsampling, central finite differences) and
records one named check per property.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import align, fusion
from .grid import bilinear_sample, finite_diff_check

GRAD_TOL = 1e-3
FD_STEP = 1e-4


@dataclass
class Check:
    passed: bool
    value: float
    tolerance: float

    def to_dict(self) -> dict:
        return {"pass": self.passed, "value": self.value, "tolerance": self.tolerance}


@dataclass
class CheckReport:
    suite: str
    checks: dict[str, Check] = field(default_factory=dict)

    def below(self, name: str, value: float, tolerance: float, strict: bool = False) -> Check:
        """Record ``value < tolerance`` (strict) or ``value <= tolerance``."""
        ok = bool(value < tolerance) if strict else bool(value <= tolerance)
        check = Check(ok, float(value), float(tolerance))
        self.checks[name] = check
        return check

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failures(self) -> list[str]:
        return [n for n, c in self.checks.items() if not c.passed]

    def to_dict(self) -> dict:
        return {"suite": self.suite, "passed": self.passed,
                "checks": {n: c.to_dict() for n, c in self.checks.items()}}


# ---------------------------------------------------------------------------
# Oracles shared with the test-suite
# ---------------------------------------------------------------------------

def fractional_offsets(rng: np.random.Generator, shape, span: int = 2) -> np.ndarray:
    """Offsets with fractional parts kept away from the bilinear kinks at integers."""
    whole = rng.integers(-span, span, size=shape)
    return whole + rng.uniform(0.1, 0.9, size=shape)


def brute_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners upsampling of a 2-D grid by explicit per-cell interpolation."""
    h, w = grid.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        sy = 0.0 if h == 1 else i * (h - 1) / (out_h - 1)
        for j in range(out_w):
            sx = 0.0 if w == 1 else j * (w - 1) / (out_w - 1)
            out[i, j] = bilinear_sample(grid, sy, sx)
    return out


def brute_refine(raw: list[np.ndarray]) -> list[np.ndarray]:
    """Reference refinement built from :func:`brute_upsample` and explicit ratios."""
    refined = [None] * len(raw)
    refined[-1] = raw[-1].copy()
    for s in range(len(raw) - 2, -1, -1):
        steps, _, h, w = raw[s].shape
        _, _, ch, cw = refined[s + 1].shape
        ry = h if ch == 1 else (h - 1) / (ch - 1)
        rx = w if cw == 1 else (w - 1) / (cw - 1)
        cur = raw[s].copy()
        for t in range(steps):
            cur[t, 0] += ry * brute_upsample(refined[s + 1][t, 0], h, w)
            cur[t, 1] += rx * brute_upsample(refined[s + 1][t, 1], h, w)
        refined[s] = cur
    return refined


def cumulative_ratio(sizes) -> list[float]:
    """Displacement scale factor from the coarsest scale to each scale."""
    ratios = [1.0] * len(sizes)
    for s in range(len(sizes) - 2, -1, -1):
        fine, coarse = sizes[s], sizes[s + 1]
        step = fine if coarse == 1 else (fine - 1) / (coarse - 1)
        ratios[s] = ratios[s + 1] * step
    return ratios


def _deform_loss_check(rng: np.random.Generator, size: int = 5, channels: int = 2):
    fmap = rng.standard_normal((channels, size, size))
    offsets = fractional_offsets(rng, (2, size, size))
    upstream = rng.standard_normal((channels, size, size))
    kernel = rng.standard_normal((3, 3))
    g_map, g_off, _ = align.deform_map_backward(fmap, offsets, upstream, kernel)

    def loss_off(p):
        return float(np.sum(upstream * align.deform_map(fmap, p.reshape(offsets.shape), kernel)))

    def loss_map(p):
        return float(np.sum(upstream * align.deform_map(p.reshape(fmap.shape), offsets, kernel)))

    r_off = finite_diff_check(loss_off, g_off, offsets, FD_STEP)
    r_map = finite_diff_check(loss_map, g_map, fmap, FD_STEP)
    return r_off, r_map


def _fusion_grad_check(rng: np.random.Generator, channels: int = 3, size: int = 4):
    local = rng.standard_normal((channels, size, size))
    glob = fusion.GlobalFeature(rng.standard_normal(channels), size, size)
    net = fusion.EmbedNet.random(channels, rng)
    # mean-normalised probe loss keeps FD rounding noise well under the 1e-8 floor,
    # which matters for the last bias whose true gradient is exactly zero
    upstream = rng.standard_normal((channels, size, size)) / local.size
    grads = fusion.fuse_weighted_backward(local, glob, net, upstream)

    def loss(l, g, n):
        return float(np.sum(upstream * fusion.fuse_weighted(l, g, n)[0]))

    r_local = finite_diff_check(lambda p: loss(p.reshape(local.shape), glob, net),
                                grads.local, local, FD_STEP)
    r_global = finite_diff_check(
        lambda p: loss(local, fusion.GlobalFeature(p, size, size), net),
        grads.global_, glob.values, FD_STEP)
    r_embed = finite_diff_check(lambda p: loss(local, glob, net.with_flat(p)),
                                grads.embed_flat(), net.flat(), FD_STEP)
    return r_local, r_global, r_embed


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def align_suite(seed: int = 0, instances: int = 10) -> CheckReport:
    rng = np.random.default_rng(seed)
    report = CheckReport("align")

    worst = 0.0
    for _ in range(2 * instances):
        fmap = rng.standard_normal((3, 6, 7))
        out = align.deform_map(fmap, np.zeros((2, 6, 7)))
        worst = max(worst, float(np.max(np.abs(out - fmap))))
    report.below("zero_offset_identity", worst, 0.0)

    worst = 0.0
    for _ in range(instances):
        fmap = rng.standard_normal((2, 6, 6))
        offsets = rng.uniform(-2.5, 2.5, (2, 6, 6))
        out = align.deform_map(fmap, offsets)
        for c in range(2):
            for i in range(6):
                for j in range(6):
                    ref = bilinear_sample(fmap, i + offsets[0, i, j], j + offsets[1, i, j], c)
                    worst = max(worst, abs(out[c, i, j] - ref))
    report.below("deform_matches_bilinear_oracle", worst, 1e-12)

    sizes = align.DEFAULT_SCALES
    raw = [np.zeros((2, 2, s, s)) for s in sizes]
    raw[-1][0, 0] = 2.0
    raw[-1][0, 1] = -1.0
    refined = align.refine_offsets(raw)
    ratios = cumulative_ratio(sizes)
    worst = max(max(float(np.max(np.abs(refined[s][0, 0] - 2.0 * ratios[s]))),
                    float(np.max(np.abs(refined[s][0, 1] + 1.0 * ratios[s]))))
                for s in range(len(sizes)))
    report.below("constant_coarse_propagation", worst, 1e-9)

    worst = 0.0
    for _ in range(instances):
        raw = [rng.standard_normal((2, 2, s, s)) for s in sizes]
        fast = align.refine_offsets(raw)
        slow = brute_refine(raw)
        worst = max(worst, max(float(np.max(np.abs(f - b))) for f, b in zip(fast, slow)))
    report.below("refinement_matches_brute_oracle", worst, 1e-9)

    worst = 0.0
    for _ in range(instances):
        a = [rng.standard_normal((2, 2, s, s)) for s in sizes]
        b = [rng.standard_normal((2, 2, s, s)) for s in sizes]
        al, be = rng.standard_normal(2)
        lhs = align.refine_offsets([al * x + be * y for x, y in zip(a, b)])
        ra, rb = align.refine_offsets(a), align.refine_offsets(b)
        worst = max(worst, max(float(np.max(np.abs(l - (al * x + be * y))))
                               for l, x, y in zip(lhs, ra, rb)))
    report.below("refinement_linearity", worst, 1e-9)

    off_err = map_err = 0.0
    for _ in range(instances):
        r_off, r_map = _deform_loss_check(rng)
        off_err = max(off_err, r_off.max_rel_error)
        map_err = max(map_err, r_map.max_rel_error)
    report.below("grad_deform_offsets", off_err, GRAD_TOL, strict=True)
    report.below("grad_deform_features", map_err, GRAD_TOL, strict=True)

    stack = align.random_stack(rng, channels=2, timesteps=3)
    result = align.align_clip(stack, align.OffsetPredictor.for_stack(stack))
    worst = max(float(np.max(np.abs(x - y)))
                for sa, sb in zip(result.stack.scales, stack.scales) for x, y in zip(sa, sb))
    report.below("zero_predictor_identity", worst, 0.0)

    report.below("alignment_recovery", alignment_recovery_error(rng), 1e-9)
    return report


def alignment_recovery_error(rng: np.random.Generator, size: int = 16, shift=(2, -1),
                             channels: int = 3) -> float:
    """Interior error after aligning a translated copy of the reference features.

    Frame ``N-1`` holds the reference content moved by ``shift``, and the
    predictor bias for ``N-1`` is set to that shift.
    """
    dy, dx = shift
    big = rng.standard_normal((channels, size + 2 * abs(dy) + 2, size + 2 * abs(dx) + 2))
    m = abs(dy) + 1, abs(dx) + 1
    ref = big[:, m[0]:m[0] + size, m[1]:m[1] + size]
    moved = big[:, m[0] - dy:m[0] - dy + size, m[1] - dx:m[1] - dx + size]
    stack = align.ClipFeatureStack([[moved, ref]])
    predictor = align.OffsetPredictor.for_stack(stack)
    predictor.set_bias(0, 0, dy, dx)
    out = align.align_clip(stack, predictor).stack.scales[0][0]
    by, bx = abs(dy), abs(dx)
    interior = (slice(None), slice(by, size - by), slice(bx, size - bx))
    return float(np.max(np.abs(out[interior] - ref[interior])))


def fusion_suite(seed: int = 0, instances: int = 10) -> CheckReport:
    rng = np.random.default_rng(seed)
    report = CheckReport("fusion")

    sum_err = 0.0
    range_violation = 0.0
    convex_violation = 0.0
    zero_net_err = 0.0
    shift_err = 0.0
    for _ in range(instances):
        c = int(rng.integers(2, 7))
        h, w = rng.integers(3, 9, size=2)
        local = rng.standard_normal((c, h, w)) * 3
        glob = fusion.GlobalFeature(rng.standard_normal(c) * 3, h, w)
        net = fusion.EmbedNet.random(c, rng, scale=1.0)
        out, wts = fusion.fuse_weighted(local, glob, net)
        sum_err = max(sum_err, float(np.max(np.abs(wts.local + wts.global_ - 1.0))))
        range_violation = max(range_violation, float(np.max(np.maximum(
            np.maximum(-wts.local, wts.local - 1.0),
            np.maximum(-wts.global_, wts.global_ - 1.0)))), 0.0)
        gmap = glob.broadcast()
        lo = np.minimum(local, gmap)
        hi = np.maximum(local, gmap)
        convex_violation = max(convex_violation,
                               float(np.max(np.maximum(lo - out, out - hi))), 0.0)

        zero_out, _ = fusion.fuse_weighted(local, glob, fusion.EmbedNet.zeros(c))
        zero_net_err = max(zero_net_err,
                           float(np.max(np.abs(zero_out - fusion.fuse_average(local, glob)))))

        shifted = fusion.EmbedNet(net.w1, net.b1, net.w2, net.b2, net.w3, net.b3 + 5.0)
        shift_out, _ = fusion.fuse_weighted(local, glob, shifted)
        shift_err = max(shift_err, float(np.max(np.abs(shift_out - out))))

    report.below("weights_sum_to_one", sum_err, 1e-12)
    report.below("weights_in_unit_range", range_violation, 0.0)
    report.below("convex_combination_bound", convex_violation, 1e-12)
    report.below("zero_embed_equals_average", zero_net_err, 1e-12)
    report.below("embedding_shift_invariance", shift_err, 1e-12)

    local = rng.standard_normal((4, 5, 6))
    glob = fusion.make_global(local)
    cat = fusion.fuse_concat(local, glob)
    lossless = max(float(np.max(np.abs(cat[:4] - local))),
                   float(np.max(np.abs(cat[4:] - glob.broadcast()))))
    report.below("concat_lossless", lossless, 0.0)

    errs = np.zeros(3)
    for _ in range(instances):
        errs = np.maximum(errs, [r.max_rel_error for r in _fusion_grad_check(rng)])
    report.below("grad_fusion_local", errs[0], GRAD_TOL, strict=True)
    report.below("grad_fusion_global", errs[1], GRAD_TOL, strict=True)
    report.below("grad_fusion_embed", errs[2], GRAD_TOL, strict=True)
    return report
