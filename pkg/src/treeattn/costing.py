"""Multiply-add cost accounting and wall-clock latency benchmarks.

Three views of cost, kept deliberately separate: closed-form counts from
the published complexity expressions (analytic_cost), exact counts
recomputed from actual bucket occupancies (counted_cost), and measured
single-thread latency (bench_latency). The count convention everywhere is
one multiply-add = one unit; softmax exponentials and comparisons are not
counted.
"""

from __future__ import annotations

import csv
import dataclasses
import time

import numpy as np

from . import tree as trlib
from .tensor import ShapeError

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - dependency is declared, belt only
    threadpool_limits = None

ANALYTIC_VARIANTS = ("transformer", "linformer", "bigbird", "performer", "tf", "tc")


def _require_positive(**kw):
    for name, val in kw.items():
        if val is None or val <= 0:
            raise ShapeError(f"analytic_cost: {name} must be positive, got {val}")


def _tree_shape(h, branching):
    """(scores per token path, total node count) for a binary or k-ary tree."""
    br = [2] * h if branching is None else list(branching)
    if len(br) != h:
        raise ShapeError(f"analytic_cost: {len(br)} branching factors for height {h}")
    scores = sum(1 if b == 2 else b for b in br)
    nodes = 1
    width = 1
    for b in br:
        width *= b
        nodes += width
    return scores, nodes


def analytic_cost(variant, n, d, h=None, branching=None, k_lin=None, s=None, r=None):
    """Closed-form multiply-add counts per variant, as labeled terms.

    Every entry returns a dict of named terms plus "total". The tf entry
    carries two published readings side by side: the "table1" pair (path
    plus node storage, matching the tc structure) and the "amortized" pair
    (per-leaf score work plus projection work); "total" follows table1.
    """
    if variant not in ANALYTIC_VARIANTS:
        raise ShapeError(
            f"analytic_cost: unknown variant {variant!r}, "
            f"expected one of {ANALYTIC_VARIANTS}"
        )
    _require_positive(n=n, d=d)
    if variant == "transformer":
        terms = {"scores": n * n * d, "normalize": n * n}
    elif variant == "linformer":
        _require_positive(k_lin=k_lin)
        terms = {"projected_scores": k_lin * n * d, "normalize": k_lin * n}
    elif variant == "bigbird":
        _require_positive(s=s)
        terms = {"sparse_scores": s * n * d, "normalize": s * n}
    elif variant == "performer":
        _require_positive(r=r)
        terms = {"feature_scores": r * n * d, "combine": n * (r + d)}
    elif variant == "tf":
        _require_positive(h=h)
        scores, nodes = _tree_shape(h, branching)
        leaves = int(np.prod([2] * h if branching is None else branching))
        terms = {
            "table1_path": scores * n * d,
            "table1_storage": nodes * d,
            "amortized_scores": n * n * d // leaves,
            "amortized_projections": 2 * d * d * n,
        }
        terms["table1"] = terms["table1_path"] + terms["table1_storage"]
        terms["amortized"] = terms["amortized_scores"] + terms["amortized_projections"]
        terms["total"] = terms["table1"]
        return terms
    else:
        _require_positive(h=h)
        scores, nodes = _tree_shape(h, branching)
        terms = {"path": scores * n * d, "storage": nodes * d}
    terms["total"] = sum(terms.values())
    return terms


def counted_cost(buckets, variant, d, h=None, q_buckets=None):
    """Exact multiply-add counts from real bucket occupancies.

    buckets holds the routed keys; q_buckets the routed queries (defaults
    to the key buckets, the self-attention-with-shared-routing case). tf
    work is per-leaf block score and value products; tc work is the path
    scores, per-node sums, means, and path combination, independent of how
    keys spread across leaves.
    """
    if q_buckets is None:
        q_buckets = buckets
    tree = buckets.tree
    if h is None:
        h = tree.height
    if variant == "full":
        nq = q_buckets.paths.shape[0]
        nk = buckets.paths.shape[0]
        terms = {"scores": nq * nk * d, "values": nq * nk * d}
    elif variant in ("tf", "kary_tf"):
        kc = buckets.leaf_counts()
        qc = q_buckets.leaf_counts()
        pairs = int(np.sum(qc * kc))
        terms = {"scores": pairs * d, "values": pairs * d}
    elif variant == "tc":
        nq = q_buckets.paths.shape[0]
        nk = buckets.paths.shape[0]
        scores, nodes = _tree_shape(h, tree.branching)
        terms = {
            "path": nq * scores * d,
            "average": nk * (h + 1) * d,
            "combine": nq * (h + 1) * d,
            "normalize": nodes * d,
        }
    else:
        raise ShapeError(f"counted_cost: unknown variant {variant!r}")
    terms["total"] = sum(terms.values())
    return terms


def occupancy_skew(counts):
    """max/mean leaf occupancy; exactly 1.0 iff the partition is uniform."""
    counts = np.asarray(counts)
    if counts.sum() == 0:
        return float("nan")
    return float(counts.max() / counts.mean())


@dataclasses.dataclass
class CostReport:
    variant: str
    n: int
    d: int
    h: int | None = None
    branching: list | None = None
    analytic: int | None = None
    counted: int | None = None
    hist: list | None = None
    skew: float | None = None
    median_ms: float | None = None
    iqr_ms: float | None = None


CSV_HEADER = ["variant", "n", "d", "h", "analytic", "counted",
              "median_ms", "iqr_ms", "skew"]


def write_cost_csv(path, reports):
    """The documented cost/latency table; empty cells for absent fields."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_HEADER)
        for r in reports:
            wr.writerow([
                r.variant, r.n, r.d,
                "" if r.h is None else r.h,
                "" if r.analytic is None else r.analytic,
                "" if r.counted is None else r.counted,
                "" if r.median_ms is None else f"{r.median_ms:.3f}",
                "" if r.iqr_ms is None else f"{r.iqr_ms:.3f}",
                "" if r.skew is None else f"{r.skew:.4f}",
            ])


# ---------------------------------------------------------------------------
# latency benchmark (raw float32 numpy, no tape)


def _softmax_rows(s):
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


class _BenchSetup:
    """Everything built outside the timed region: data, weights, trees."""

    def __init__(self, variant, n, d, heads, h, seed, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.variant = variant
        self.n, self.d, self.heads = n, d, heads
        self.dh = d // heads
        self.dtype = np.dtype(dtype)
        self.x = rng.normal(size=(n, d)).astype(dtype)
        self.wq = (rng.normal(size=(d, d)) / np.sqrt(d)).astype(dtype)
        self.wk = (rng.normal(size=(d, d)) / np.sqrt(d)).astype(dtype)
        self.wv = (rng.normal(size=(d, d)) / np.sqrt(d)).astype(dtype)
        self.trees = None
        self.alpha = None
        if variant in ("tf", "tc"):
            kp = self.x.astype(np.float64) @ self.wk.astype(np.float64)
            self.trees = []
            self.tree_params = []
            for head in range(heads):
                sl = kp[:, head * self.dh:(head + 1) * self.dh]
                tree = trlib.balanced_tree(sl, h, rng)
                self.tree_params.append(tree)
                self.trees.append([
                    (lev.w.data.astype(dtype), lev.b.data.astype(dtype))
                    for lev in tree.levels
                ])
            if variant == "tc":
                self.alpha = [float(1.0 / (h + 1))] * (h + 1)
        self.h = h

    def route(self, xh, levels):
        n = xh.shape[0]
        lab = np.zeros(n, dtype=np.int64)
        for w32, b32 in levels:
            f = xh @ w32.T + b32
            lab = 2 * lab + (f[np.arange(n), lab] >= 0)
        return lab


def _forward_full(su):
    qp, kp, vp = su.x @ su.wq, su.x @ su.wk, su.x @ su.wv
    scale = float(1.0 / np.sqrt(su.dh))
    out = np.empty_like(qp)
    for head in range(su.heads):
        a, b = head * su.dh, (head + 1) * su.dh
        att = _softmax_rows(qp[:, a:b] @ kp[:, a:b].T * scale)
        out[:, a:b] = att @ vp[:, a:b]
    return out


def _forward_tf(su):
    qp, kp, vp = su.x @ su.wq, su.x @ su.wk, su.x @ su.wv
    scale = float(1.0 / np.sqrt(su.dh))
    out = np.zeros_like(qp)
    leaves = 2 ** su.h
    for head in range(su.heads):
        a, b = head * su.dh, (head + 1) * su.dh
        qh, kh, vh = qp[:, a:b], kp[:, a:b], vp[:, a:b]
        qlab = su.route(qh, su.trees[head])
        klab = su.route(kh, su.trees[head])
        for leaf in range(leaves):
            qs = np.flatnonzero(qlab == leaf)
            if qs.size == 0:
                continue
            ks = np.flatnonzero(klab == leaf)
            if ks.size == 0:
                continue
            att = _softmax_rows(qh[qs] @ kh[ks].T * scale)
            out[qs, a:b] = att @ vh[ks]
    return out


def _forward_tc(su):
    qp, kp, vp = su.x @ su.wq, su.x @ su.wk, su.x @ su.wv
    out = np.zeros_like(qp)
    for head in range(su.heads):
        a, b = head * su.dh, (head + 1) * su.dh
        qh, kh, vh = qp[:, a:b], kp[:, a:b], vp[:, a:b]
        qlab = np.zeros(su.n, dtype=np.int64)
        klab = np.zeros(su.n, dtype=np.int64)
        acc = np.zeros((su.n, su.dh), dtype=su.dtype)
        for l in range(su.h + 1):
            nodes = 2 ** l
            sums = np.zeros((nodes, su.dh), dtype=su.dtype)
            np.add.at(sums, klab, vh)
            counts = np.bincount(klab, minlength=nodes)
            means = sums / np.maximum(counts, 1)[:, None]
            acc += su.alpha[l] * means[qlab]
            if l < su.h:
                w32, b32 = su.trees[head][l]
                fq = qh @ w32.T + b32
                fk = kh @ w32.T + b32
                qlab = 2 * qlab + (fq[np.arange(su.n), qlab] >= 0)
                klab = 2 * klab + (fk[np.arange(su.n), klab] >= 0)
        out[:, a:b] = acc
    return out


_FORWARDS = {"full": _forward_full, "tf": _forward_tf, "tc": _forward_tc}


def bench_latency(variant, n, d, heads, h, repetitions, seed=0, warmup=3,
                  dtype=np.float32):
    """Median/IQR wall time of one attention layer pass, single-threaded.

    One thread, batch 1, float32 by default, fresh timer per repetition
    after warmup passes. Tree construction and weight generation happen
    outside the timed region; routing happens inside it (it is part of
    the layer).
    """
    if repetitions < 3:
        raise ShapeError(f"bench_latency: need at least 3 repetitions, got {repetitions}")
    if variant not in _FORWARDS:
        raise ShapeError(f"bench_latency: unknown variant {variant!r}")
    if d % heads != 0:
        raise ShapeError(f"bench_latency: width {d} not divisible by {heads} heads")
    su = _BenchSetup(variant, n, d, heads, h, seed, dtype=dtype)
    fwd = _FORWARDS[variant]
    times = []

    def measured():
        for _ in range(warmup):
            fwd(su)
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fwd(su)
            times.append((time.perf_counter() - t0) * 1000.0)

    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            measured()
    else:  # pragma: no cover
        measured()
    arr = np.array(times)
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return {"variant": variant, "n": n, "d": d, "heads": heads, "h": h,
            "median_ms": float(med), "iqr_ms": float(q3 - q1),
            "times_ms": [float(t) for t in times]}


def bench_report(variant, n, d, heads, h, repetitions, seed=0, dtype=np.float32):
    """CostReport row combining analytic, counted, and measured numbers.

    The analytic column reports the per-leaf (amortized) reading for tf so
    the column stays comparable with the counted block work.
    """
    lat = bench_latency(variant, n, d, heads, h, repetitions, seed=seed, dtype=dtype)
    su = _BenchSetup(variant, n, d, heads, h, seed, dtype=dtype)
    if variant == "full":
        analytic = analytic_cost("transformer", n, d)["total"]
        counted = 2 * n * n * d
        hist = None
        skew = None
    else:
        kp = su.x @ su.wk
        qp = su.x @ su.wq
        dh = d // heads
        counted = 0
        hist = np.zeros(2 ** h, dtype=np.int64)
        for head in range(heads):
            a, b = head * dh, (head + 1) * dh
            klab = su.route(kp[:, a:b], su.trees[head])
            qlab = su.route(qp[:, a:b], su.trees[head])
            kc = np.bincount(klab, minlength=2 ** h)
            qc = np.bincount(qlab, minlength=2 ** h)
            hist += kc
            if variant == "tf":
                counted += 2 * int(np.sum(qc * kc)) * dh
            else:
                scores, nodes = _tree_shape(h, [2] * h)
                counted += (n * scores * dh + n * (h + 1) * dh * 2 + nodes * dh)
        key = "amortized" if variant == "tf" else "total"
        analytic = analytic_cost(variant, n, d, h)[key]
        skew = occupancy_skew(hist)
    return CostReport(variant=variant, n=n, d=d, h=h if variant != "full" else None,
                      analytic=int(analytic), counted=int(counted),
                      hist=None if hist is None else hist.tolist(), skew=skew,
                      median_ms=lat["median_ms"], iqr_ms=lat["iqr_ms"])
