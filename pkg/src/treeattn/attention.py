"""Attention variants: dense, leaf-restricted (binary and k-ary), path-averaged.

All variants share the projection step Q·W^Q, K·W^K, V·W^V and split the
projected width into per-head column slices, each head owning its own tree
of dimension d/heads. Softmax scaling is 1/sqrt(head dim).

Routing modes:
  "hard": forward routes tokens hard (what training and inference use);
          gradients reach the tree parameters through a smooth surrogate
          spliced in with straight_through.
  "soft": every discrete choice replaced by its surrogate; the result is
          a smooth function of all parameters, which is what the
          finite-difference checks differentiate.

The leaf-restricted surrogate replaces the same-leaf indicator M(q, k) with
M~(q, k) = <leaf distribution of q', leaf distribution of k'>, built in log
space so saturated distributions stay finite. The path-averaged surrogate
walks the query's soft path; key bucket membership is a constant in the
hard mode's backward, and soft-occupancy-averaged in the all-soft mode.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import tree as tr
from .tensor import ShapeError, Tensor
from .tree import TreeParams

VARIANTS = ("full", "tf", "tc", "kary_tf")


class DiagSink:
    """Collector for forward-pass diagnostics.

    Accumulates across calls so one sink can aggregate a whole batch:
    empty-leaf events, per-head leaf occupancy histograms, and modeled
    multiply-add counts for the score and value stages.
    """

    def __init__(self):
        self.empty_leaf = 0
        self.hists = {}
        self.score_macs = 0
        self.value_macs = 0
        self.path_macs = 0
        self.average_macs = 0
        self.combine_macs = 0
        self.normalize_macs = 0

    def add_hist(self, head, counts):
        if head in self.hists:
            self.hists[head] = self.hists[head] + counts
        else:
            self.hists[head] = counts.astype(np.int64)

    def total_macs(self):
        return (self.score_macs + self.value_macs + self.path_macs
                + self.average_macs + self.combine_macs + self.normalize_macs)


class NodeValues:
    """Per-node mean of projected values plus occupancy counts.

    nu[l] is an array [nodes_at(l) x d_head]; empty nodes hold zero rows.
    """

    def __init__(self, nu, counts):
        self.nu = nu
        self.counts = counts

    def value(self, l, j):
        return self.nu[l][j]

    def count(self, l, j):
        return int(self.counts[l][j])


class AttentionLayerSpec:
    """Variant selector plus the parameters one attention layer owns."""

    def __init__(self, variant, d, heads, wq, wk, wv, trees=None, alpha=None,
                 tau=1.0, trees_frozen=False):
        if variant not in VARIANTS:
            raise ShapeError(f"attention: unknown variant {variant!r}")
        if d % heads != 0:
            raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
        for name, w in (("wq", wq), ("wk", wk), ("wv", wv)):
            if w.data.shape != (d, d):
                raise ShapeError(f"attention: {name} must be [{d}x{d}], got {w.data.shape}")
        if variant != "full":
            if trees is None or len(trees) != heads:
                raise ShapeError(f"attention: variant {variant} needs one tree per head")
            for t in trees:
                if t.d != d // heads:
                    raise ShapeError(
                        f"attention: per-head trees must have dim {d // heads}, got {t.d}"
                    )
        if variant == "tc":
            if alpha is None or len(alpha) != heads:
                raise ShapeError("attention: tc variant needs per-head level weights")
            for a, t in zip(alpha, trees):
                if a.data.shape != (t.height + 1,):
                    raise ShapeError(
                        f"attention: level weights must have length {t.height + 1}, "
                        f"got {a.data.shape}"
                    )
        if tau <= 0:
            raise ShapeError(f"attention: tau must be positive, got {tau}")
        self.variant = variant
        self.d = d
        self.heads = heads
        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.trees = trees
        self.alpha = alpha
        self.tau = float(tau)
        self.trees_frozen = bool(trees_frozen)

    @property
    def head_dim(self):
        return self.d // self.heads

    def head_slice(self, h):
        dh = self.head_dim
        return h * dh, (h + 1) * dh


def uniform_alpha(height):
    return T.param(np.full(height + 1, 1.0 / (height + 1)))


def _project(q, k, v, spec):
    if q.data.shape[1] != spec.d or k.data.shape[1] != spec.d or v.data.shape[1] != spec.d:
        raise ShapeError(
            f"attention: inputs must have width {spec.d}, got "
            f"{q.data.shape}/{k.data.shape}/{v.data.shape}"
        )
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError("attention: keys and values must have matching row counts")
    return T.matmul(q, spec.wq), T.matmul(k, spec.wk), T.matmul(v, spec.wv)


# ---------------------------------------------------------------------------
# dense attention


def full_attention(q, k, v, spec, diag=None):
    """softmax(q W^Q (k W^K)^T / sqrt(d_head)) · v W^V, per head, concatenated."""
    qp, kp, vp = _project(q, k, v, spec)
    nq, nk = q.data.shape[0], k.data.shape[0]
    dh = spec.head_dim
    scale = 1.0 / np.sqrt(dh)
    outs = []
    for h in range(spec.heads):
        a, b = spec.head_slice(h)
        qh, kh, vh = T.col_slice(qp, a, b), T.col_slice(kp, a, b), T.col_slice(vp, a, b)
        att = T.softmax_rows(T.matmul(qh, T.transpose(kh)), scale)
        outs.append(T.matmul(att, vh))
        if diag is not None:
            diag.score_macs += nq * nk * dh
            diag.value_macs += nq * nk * dh
    return outs[0] if spec.heads == 1 else T.concat_cols(outs)


# ---------------------------------------------------------------------------
# leaf-restricted attention


def _hard_leaf_matrix(qp, kp, tree, scale, diag, head):
    """Dense row-stochastic-by-leaf attention matrix from hard routing.

    Queries whose leaf holds no keys get an exact zero row (and bump the
    empty_leaf counter). Returns the matrix and both leaf label vectors.
    """
    qlab = tr.route_matrix(tree, qp)[:, -1]
    klab = tr.route_matrix(tree, kp)[:, -1]
    nq, nk = qp.shape[0], kp.shape[0]
    a = np.zeros((nq, nk), dtype=np.float64)
    counts = np.bincount(klab, minlength=tree.leaf_count)
    for leaf in range(tree.leaf_count):
        qs = np.flatnonzero(qlab == leaf)
        if qs.size == 0:
            continue
        ks = np.flatnonzero(klab == leaf)
        if ks.size == 0:
            if diag is not None:
                diag.empty_leaf += qs.size
            continue
        block = T._softmax_np(qp[qs] @ kp[ks].T, scale)
        a[np.ix_(qs, ks)] = block
        if diag is not None:
            diag.score_macs += qs.size * ks.size * tree.d
            diag.value_macs += qs.size * ks.size * tree.d
    if diag is not None:
        diag.add_hist(head, counts)
    return a, qlab, klab


def tf_attention(q, k, v, spec, diag=None, routing="hard"):
    """Attention restricted to keys sharing the query's leaf.

    Works for both binary and k-ary trees (the k-ary variant is the same
    computation with wider branching). Hard mode: exact leaf-block softmax
    forward, surrogate co-leaf affinity in backward. Soft mode: smooth
    everywhere, used by gradient checks.
    """
    if spec.variant not in ("tf", "kary_tf"):
        raise ShapeError(f"tf_attention: wrong variant {spec.variant!r}")
    if routing not in ("hard", "soft"):
        raise ShapeError(f"tf_attention: unknown routing mode {routing!r}")
    qp, kp, vp = _project(q, k, v, spec)
    dh = spec.head_dim
    scale = 1.0 / np.sqrt(dh)
    tape_on = T.active_tape() is not None
    outs = []
    for h in range(spec.heads):
        a, b = spec.head_slice(h)
        tree = spec.trees[h]
        qh, kh, vh = T.col_slice(qp, a, b), T.col_slice(kp, a, b), T.col_slice(vp, a, b)
        if routing == "soft":
            att = _soft_leaf_attention(qh, kh, tree, spec.tau, scale)
        else:
            hard, _, _ = _hard_leaf_matrix(qh.data, kh.data, tree, scale, diag, h)
            if tape_on:
                soft = _soft_leaf_attention(qh, kh, tree, spec.tau, scale)
                att = T.straight_through(soft, hard)
            else:
                att = Tensor(hard)
        outs.append(T.matmul(att, vh))
    return outs[0] if spec.heads == 1 else T.concat_cols(outs)


def _soft_leaf_attention(qh, kh, tree, tau, scale):
    """softmax over scale*scores + log M~, with M~ the soft co-leaf affinity."""
    lq = tr.leaf_log_probs(qh, tree, tau)
    lk = tr.leaf_log_probs(kh, tree, tau)
    logm = T.log_matmul_exp(lq, lk)
    scores = T.smul(T.matmul(qh, T.transpose(kh)), scale)
    return T.softmax_rows(T.add(scores, logm), 1.0)


def kary_tf_attention(q, k, v, spec, diag=None, routing="hard"):
    """Alias: the k-ary leaf-restricted variant shares the tf computation."""
    return tf_attention(q, k, v, spec, diag=diag, routing=routing)


def tf_attention_weights(q, k, spec, head=0):
    """The implicit hard attention matrix of one head (no tape, no values).

    Exposed for inspection and the sparsity/row-sum checks; rows of queries
    landing in an empty leaf are zero.
    """
    qp = q.data @ spec.wq.data
    kp = k.data @ spec.wk.data
    a, b = spec.head_slice(head)
    tree = spec.trees[head]
    m, _, _ = _hard_leaf_matrix(qp[:, a:b], kp[:, a:b], tree,
                                1.0 / np.sqrt(spec.head_dim), None, head)
    return m


# ---------------------------------------------------------------------------
# node values and path-averaged attention


def compute_node_values(kp, vp, tree):
    """Per-node occupancy counts and mean projected values.

    kp and vp are already-projected per-head matrices [n x d_head]; buckets
    come from routing kp, values averaged from vp. Empty nodes get zeros.
    """
    kp = kp.data if isinstance(kp, Tensor) else np.asarray(kp, dtype=np.float64)
    vp = vp.data if isinstance(vp, Tensor) else np.asarray(vp, dtype=np.float64)
    if kp.shape[0] != vp.shape[0]:
        raise ShapeError("compute_node_values: key/value row counts differ")
    if kp.shape[1] != tree.d:
        raise ShapeError(
            f"compute_node_values: keys have dim {kp.shape[1]}, tree dim is {tree.d}"
        )
    paths = tr.route_matrix(tree, kp)
    nu, counts = [], []
    for l in range(tree.height + 1):
        m = tree.nodes_at(l)
        mean, cnt = T._segment_mean_np(vp, paths[:, l], m)
        nu.append(mean)
        counts.append(cnt)
    return NodeValues(nu, counts)


def tc_attention(q, k, v, spec, diag=None, routing="hard"):
    """Per-level averaged values along the query's path, weighted by alpha.

    Hard mode: the forward gathers exact per-node means along hard paths;
    alpha and value gradients are exact, tree gradients flow through the
    query-side soft path. Soft mode: query path and key bucket membership
    are both soft (occupancy-weighted averages), smooth everywhere.
    """
    if spec.variant != "tc":
        raise ShapeError(f"tc_attention: wrong variant {spec.variant!r}")
    if routing not in ("hard", "soft"):
        raise ShapeError(f"tc_attention: unknown routing mode {routing!r}")
    qp, kp, vp = _project(q, k, v, spec)
    n = q.data.shape[0]
    nk = k.data.shape[0]
    outs = []
    for h in range(spec.heads):
        a, b = spec.head_slice(h)
        tree = spec.trees[h]
        alpha = spec.alpha[h]
        qh, kh, vh = T.col_slice(qp, a, b), T.col_slice(kp, a, b), T.col_slice(vp, a, b)
        if routing == "soft":
            out_h = _soft_tc_head(qh, kh, vh, tree, alpha, spec.tau)
        else:
            out_h = _hard_tc_head(qh, kh, vh, tree, alpha, spec.tau, diag, h, n, nk)
        outs.append(out_h)
    return outs[0] if spec.heads == 1 else T.concat_cols(outs)


def _hard_tc_head(qh, kh, vh, tree, alpha, tau, diag, head, n, nk):
    qpaths = tr.route_matrix(tree, qh.data)
    kpaths = tr.route_matrix(tree, kh.data)
    tape_on = T.active_tape() is not None
    soft_levels = tr.soft_level_probs(qh, tree, tau) if tape_on else None
    out_h = None
    for l in range(tree.height + 1):
        m = tree.nodes_at(l)
        nu_l = T.segment_mean_rows(vh, kpaths[:, l], m)
        onehot = np.zeros((n, m), dtype=np.float64)
        onehot[np.arange(n), qpaths[:, l]] = 1.0
        if tape_on:
            sel = T.straight_through(soft_levels[l], onehot)
        else:
            sel = Tensor(onehot)
        term = T.scale_by_entry(T.matmul(sel, nu_l), alpha, l)
        out_h = term if out_h is None else T.add(out_h, term)
    if diag is not None:
        diag.add_hist(head, np.bincount(kpaths[:, -1], minlength=tree.leaf_count))
        dh = tree.d
        spn = sum(tree.scores_per_node(l) for l in range(tree.height))
        diag.path_macs += n * spn * dh
        diag.average_macs += nk * (tree.height + 1) * dh
        diag.combine_macs += n * (tree.height + 1) * dh
        diag.normalize_macs += sum(tree.nodes_at(l) for l in range(tree.height + 1)) * dh
    return out_h


def _soft_tc_head(qh, kh, vh, tree, alpha, tau):
    q_levels = tr.soft_level_probs(qh, tree, tau)
    k_levels = tr.soft_level_probs(kh, tree, tau)
    out_h = None
    for l in range(tree.height + 1):
        occupancy = T.col_sums(k_levels[l])
        nu_l = T.row_div(T.matmul(T.transpose(k_levels[l]), vh), occupancy)
        term = T.scale_by_entry(T.matmul(q_levels[l], nu_l), alpha, l)
        out_h = term if out_h is None else T.add(out_h, term)
    return out_h


# ---------------------------------------------------------------------------
# dispatch


def multi_head(q, k, v, spec, diag=None, routing="hard"):
    """Apply the configured variant; all variants are head-aware already."""
    if spec.variant == "full":
        return full_attention(q, k, v, spec, diag=diag)
    if spec.variant in ("tf", "kary_tf"):
        return tf_attention(q, k, v, spec, diag=diag, routing=routing)
    return tc_attention(q, k, v, spec, diag=diag, routing=routing)
