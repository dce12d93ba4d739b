"""Self-check suites: finite-difference gradients, metric oracles, sampler law.

Each check yields one :class:`CheckResult`; a suite passes when all of its
checks do. The metric oracle here recounts everything from expanded sample
lists so it shares no code with :mod:`simtriplet.evaluation`.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import stats as sstats

from . import autodiff as ad
from . import evaluation as ev
from . import losses
from .patch_sampler import NEIGHBOR_OFFSETS, TileGrid, chebyshev, sample_adjacent_pair

SUITES = ("gradcheck", "metrics", "sampler")

# 32-bit and 64-bit gradient tolerances on max relative error
TOL_32 = 1e-2
TOL_64 = 1e-5


@dataclass
class CheckResult:
    suite: str
    name: str
    max_abs_error: float
    max_rel_error: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag}  {self.suite:<9} {self.name:<34} max_abs={self.max_abs_error:.3e} "
                f"max_rel={self.max_rel_error:.3e} tol={self.tol:.0e} {self.detail}").rstrip()


@dataclass
class VerifyReport:
    checks: list
    seconds: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def text(self):
        lines = [c.line() for c in self.checks]
        n_fail = sum(not c.passed for c in self.checks)
        lines.append(f"{len(self.checks) - n_fail}/{len(self.checks)} checks passed in {self.seconds:.1f}s")
        return "\n".join(lines)


# ---------------------------------------------------------------- gradients

def _arr(rng, *shape, lo=None):
    x = rng.standard_normal(shape)
    if lo is not None:
        # keep clear of kinks
        x = np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo + x, x)
    return x.astype(ad.default_dtype())


def _proj(out, r):
    return ad.tsum(ad.mul(out, ad.Tensor(r.astype(out.data.dtype), dtype=out.data.dtype)))


def _gradient_cases(rng):
    """(name, f, point) triples; constants are drawn at the current default dtype."""
    cases = []
    b = _arr(rng, 3, 4)
    r34 = _arr(rng, 3, 4)
    cases.append(("add", lambda x: _proj(ad.add(x, b), r34), _arr(rng, 3, 4)))
    cases.append(("sub", lambda x: _proj(ad.sub(b, x), r34), _arr(rng, 3, 4)))
    cases.append(("neg", lambda x: _proj(ad.neg(x), r34), _arr(rng, 3, 4)))
    cases.append(("scalar_mul", lambda x: _proj(ad.scalar_mul(x, 2.5), r34), _arr(rng, 3, 4)))
    cases.append(("mul", lambda x: _proj(ad.mul(x, b), r34), _arr(rng, 3, 4)))
    cases.append(("mul_self", lambda x: _proj(ad.mul(x, x), r34), _arr(rng, 3, 4)))
    r4 = _arr(rng, 4)
    cases.append(("sum_axis0", lambda x: _proj(ad.tsum(x, axis=0), r4), _arr(rng, 3, 4)))
    cases.append(("mean", lambda x: ad.mean(ad.mul(x, x)), _arr(rng, 3, 4)))
    r62 = _arr(rng, 6, 2)
    cases.append(("reshape", lambda x: _proj(ad.reshape(x, (6, 2)), r62), _arr(rng, 3, 4)))
    m45 = _arr(rng, 4, 5)
    r35 = _arr(rng, 3, 5)
    cases.append(("matmul_left", lambda x: _proj(ad.matmul(x, m45), r35), _arr(rng, 3, 4)))
    a34 = _arr(rng, 3, 4)
    cases.append(("matmul_right", lambda w: _proj(ad.matmul(a34, w), r35), _arr(rng, 4, 5)))
    bias5 = _arr(rng, 5)
    cases.append(("affine_input", lambda x: _proj(ad.affine(x, m45, bias5), r35), _arr(rng, 3, 4)))
    cases.append(("affine_weight", lambda w: _proj(ad.affine(a34, w, bias5), r35), _arr(rng, 4, 5)))
    cases.append(("affine_bias", lambda c: _proj(ad.affine(a34, m45, c), r35), _arr(rng, 5)))
    k = _arr(rng, 4, 3, 3, 3)
    x = _arr(rng, 2, 3, 6, 6)
    r_s2 = _arr(rng, 2, 4, 3, 3)
    r_s1 = _arr(rng, 2, 4, 4, 4)
    cases.append(("conv2d_input_s2p1", lambda t: _proj(ad.conv2d(t, k, 2, 1), r_s2), x))
    cases.append(("conv2d_kernel_s2p1", lambda t: _proj(ad.conv2d(x, t, 2, 1), r_s2), k))
    cases.append(("conv2d_input_s1p0", lambda t: _proj(ad.conv2d(t, k, 1, 0), r_s1), x))
    cases.append(("relu", lambda t: _proj(ad.relu(t), r34), _arr(rng, 3, 4, lo=0.05)))
    gamma, beta = _arr(rng, 4), _arr(rng, 4)
    r_bn4 = _arr(rng, 3, 4, 2, 2)
    cases.append(("batch_norm_2d", lambda t: _proj(ad.batch_norm(t, gamma, beta), r34), _arr(rng, 3, 4)))
    cases.append(("batch_norm_4d", lambda t: _proj(ad.batch_norm(t, gamma, beta), r_bn4), _arr(rng, 3, 4, 2, 2)))
    xb = _arr(rng, 3, 4)
    cases.append(("batch_norm_gamma", lambda g: _proj(ad.batch_norm(xb, g, beta), r34), _arr(rng, 4)))
    stats = ad.RunningStats(_arr(rng, 4), np.abs(_arr(rng, 4)) + 0.5)
    cases.append(("batch_norm_eval", lambda t: _proj(ad.batch_norm(t, gamma, beta, stats, "eval"), r34),
                  _arr(rng, 3, 4)))
    r24 = _arr(rng, 2, 4)
    cases.append(("global_average_pool", lambda t: _proj(ad.global_average_pool(t), r24), _arr(rng, 2, 4, 3, 3)))
    cases.append(("l2_normalize", lambda t: _proj(ad.l2_normalize(t), r34), _arr(rng, 3, 4)))
    labels = np.array([0, 3, 1])
    cases.append(("softmax_cross_entropy", lambda t: ad.softmax_cross_entropy(t, labels), _arr(rng, 3, 4)))
    # composite losses, differentiated with respect to predictor outputs
    ys = [_arr(rng, 4, 6) for _ in range(3)]
    zs = [_arr(rng, 4, 6) for _ in range(3)]

    def triplet(which, part):
        def f(t):
            z = list(zs)
            z[which] = t
            br = losses.simtriplet_loss(losses.TripletBatch(*ys, *z))
            return getattr(br, part)
        return f

    cases.append(("neg_cosine", lambda t: losses.neg_cosine(ys[0], t), _arr(rng, 4, 6)))
    cases.append(("intra_loss_z1", triplet(0, "intra"), zs[0]))
    cases.append(("intra_loss_z2", triplet(1, "intra"), zs[1]))
    cases.append(("inter_loss_z2", triplet(1, "inter"), zs[1]))
    cases.append(("inter_loss_z3", triplet(2, "inter"), zs[2]))
    for i in range(3):
        cases.append((f"simtriplet_loss_z{i + 1}", triplet(i, "total"), zs[i]))
    cases.append(("simsiam_loss_z1", lambda t: losses.simsiam_loss(ys[0], ys[1], t, zs[1]), zs[0]))
    return cases


def gradcheck_suite(seed=0):
    out = []
    for label, ctx, eps, tol in (("f32", contextlib.nullcontext, 1e-3, TOL_32),
                                 ("f64", ad.verification_mode, 1e-5, TOL_64)):
        with ctx():
            for name, f, point in _gradient_cases(np.random.default_rng(seed)):
                rep = ad.grad_check(f, point, eps=eps)
                ok = bool(np.isfinite(rep.max_rel_error)) and rep.max_rel_error < tol
                out.append(CheckResult("gradcheck", f"{name}[{label}]", rep.max_abs_error,
                                       rep.max_rel_error, tol, ok))
    return out


# ---------------------------------------------------------------- metrics

def brute_force_metrics(counts):
    """Balanced accuracy and macro-F1 recounted from an expanded list of (true, pred) samples."""
    counts = np.asarray(counts)
    samples = [(t, p) for t in range(counts.shape[0]) for p in range(counts.shape[1])
               for _ in range(int(counts[t, p]))]
    present = sorted({t for t, _ in samples})
    recalls, f1s = [], []
    for c in present:
        tp = sum(1 for t, p in samples if t == c and p == c)
        fn = sum(1 for t, p in samples if t == c and p != c)
        fp = sum(1 for t, p in samples if t != c and p == c)
        recalls.append(Fraction(tp, tp + fn))
        # F1 = 2TP / (2TP + FP + FN), 0 when TP = 0
        f1s.append(Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0))
    n = len(present)
    return float(sum(recalls) / n), float(sum(f1s) / n)


def metrics_suite(seed=0):
    out = []
    cm = ev.ConfusionMatrix([[1, 1], [0, 2]])
    ba, mf = ev.balanced_accuracy(cm), ev.macro_f1(cm)
    err = max(abs(ba - 0.75), abs(mf - float(Fraction(11, 15))))
    out.append(CheckResult("metrics", "worked_example", err, err, 0.0, err == 0.0,
                           f"balanced={ba!r} macro_f1={mf!r}"))
    rng = np.random.default_rng(seed)
    mismatches = 0
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 7))
        counts = rng.integers(0, 12, (k, k))
        if rng.random() < 0.3:
            counts[rng.integers(k)] = 0
        if counts.sum(axis=1).max() == 0:
            counts[0, 0] = 1
        want = brute_force_metrics(counts)
        got = (ev.balanced_accuracy(counts), ev.macro_f1(counts))
        worst = max(worst, abs(want[0] - got[0]), abs(want[1] - got[1]))
        mismatches += want != got
    out.append(CheckResult("metrics", "brute_force_100", worst, worst, 0.0, mismatches == 0,
                           f"mismatches={mismatches}"))
    base = rng.integers(0, 9, (4, 4))
    padded = np.zeros((5, 5), np.int64)
    padded[:4, :4] = base
    base[0, 0] += 1
    padded[0, 0] += 1
    d = max(abs(ev.balanced_accuracy(base) - ev.balanced_accuracy(padded)),
            abs(ev.macro_f1(base) - ev.macro_f1(padded)))
    out.append(CheckResult("metrics", "zero_support_class", d, d, 0.0, d == 0.0))
    k, n = 4, 10_000
    y = np.repeat(np.arange(k), n // k)
    pred = rng.integers(0, k, n)
    ba = ev.balanced_accuracy(ev.ConfusionMatrix.from_predictions(y, pred, k))
    sigma = np.sqrt((1 / k) * (1 - 1 / k) / (n // k)) / np.sqrt(k)
    dev = abs(ba - 1 / k)
    out.append(CheckResult("metrics", "uniform_random_1_over_k", dev, dev / sigma, 3.0, dev <= 3 * sigma,
                           f"balanced={ba:.4f} sigma={sigma:.4f}"))
    return out


# ---------------------------------------------------------------- sampler

def sampler_suite(seed=0, draws=100_000):
    out = []
    grid = TileGrid("verify", 12 * 8, 12 * 8, 8, 12, 12)
    rng = np.random.default_rng(seed)
    offsets = {o: i for i, o in enumerate(NEIGHBOR_OFFSETS)}
    interior = np.zeros(8, np.int64)
    bad = 0
    for _ in range(draws):
        p = sample_adjacent_pair(grid, rng)
        if chebyshev(p.anchor, p.neighbor) != 1 or not grid.in_bounds(*p.neighbor):
            bad += 1
        r, c = p.anchor
        if 0 < r < grid.rows - 1 and 0 < c < grid.cols - 1:
            interior[offsets[(p.neighbor[0] - r, p.neighbor[1] - c)]] += 1
    out.append(CheckResult("sampler", "chebyshev_distance_1", float(bad), float(bad), 0.0, bad == 0,
                           f"draws={draws}"))
    chi2, pval = sstats.chisquare(interior)
    out.append(CheckResult("sampler", "neighbor_uniformity_chi2", float(chi2), float(pval), 0.01, pval > 0.01,
                           f"p={pval:.4f} interior={int(interior.sum())}"))
    return out


def run(suite="all", seed=0) -> VerifyReport:
    if suite not in SUITES + ("all",):
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES + ('all',))}")
    t0 = time.perf_counter()
    checks = []
    for name, fn in (("gradcheck", gradcheck_suite), ("metrics", metrics_suite), ("sampler", sampler_suite)):
        if suite in (name, "all"):
            checks.extend(fn(seed))
    return VerifyReport(checks, time.perf_counter() - t0)
