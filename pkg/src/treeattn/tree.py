"""Oblique decision trees: storage, hard routing, bucketing, soft paths.

Nodes are indexed level-order: level l has prod(branching[:l]) nodes and
child c of node (l, j) is (l+1, j*b_l + c). A node splits on linear scores
of the input; binary nodes hold a single hyperplane (score f, children
left/right with f >= 0 going right), k-ary nodes hold b_l hyperplanes and
route to the argmax score with ties to the highest child index. The binary
rule is the same argmax with implicit scores (0, f).
"""

from __future__ import annotations

import base64
import json
import math

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor


class TreeFormatError(ValueError):
    """A serialized tree record is malformed or violates a tree invariant."""


SERIAL_FORMAT = "oblique-tree"
SERIAL_VERSION = 1
INDEXING = "level-order; child c of (l, j) is (l+1, j*b_l + c)"


class TreeLevel:
    """Parameters for one level: weights [(J*s) x d] and biases [J*s].

    J is the node count at the level and s the scores per node (1 for
    binary nodes, b_l for k-ary ones). Row j*s + t is hyperplane t of
    node (l, j).
    """

    __slots__ = ("w", "b")

    def __init__(self, w, b):
        self.w = w if isinstance(w, Tensor) else Tensor(w)
        self.b = b if isinstance(b, Tensor) else Tensor(b)


class TreeParams:
    def __init__(self, height, branching, d, levels):
        if height != len(branching) or height != len(levels):
            raise ShapeError(
                f"tree: height {height} inconsistent with {len(branching)} branching "
                f"factors and {len(levels)} parameter levels"
            )
        if any(b < 2 for b in branching):
            raise ShapeError(f"tree: branching factors must be >= 2, got {branching}")
        self.height = height
        self.branching = list(int(b) for b in branching)
        self.d = int(d)
        self.levels = levels
        self._validate()

    def _validate(self):
        for l, lev in enumerate(self.levels):
            j = self.nodes_at(l)
            s = self.scores_per_node(l)
            if lev.w.data.shape != (j * s, self.d) or lev.b.data.shape != (j * s,):
                raise ShapeError(
                    f"tree: level {l} expects weights ({j * s}, {self.d}) and "
                    f"biases ({j * s},), got {lev.w.data.shape} / {lev.b.data.shape}"
                )
            if not (np.isfinite(lev.w.data).all() and np.isfinite(lev.b.data).all()):
                raise TreeFormatError(f"tree: non-finite parameter at level {l}")

    def nodes_at(self, l):
        return int(math.prod(self.branching[:l]))

    def scores_per_node(self, l):
        b = self.branching[l]
        return 1 if b == 2 else b

    @property
    def leaf_count(self):
        return self.nodes_at(self.height)

    def named_params(self, prefix=""):
        for l, lev in enumerate(self.levels):
            yield f"{prefix}L{l}.w", lev.w
            yield f"{prefix}L{l}.b", lev.b

    def copy(self):
        return TreeParams(
            self.height,
            list(self.branching),
            self.d,
            [TreeLevel(lev.w.data.copy(), lev.b.data.copy()) for lev in self.levels],
        )

    def __repr__(self):
        return f"TreeParams(h={self.height}, branching={self.branching}, d={self.d})"


class RoutingPath:
    """Node index per level, root first; nodes[l+1] is a child of nodes[l]."""

    __slots__ = ("nodes",)

    def __init__(self, nodes):
        self.nodes = [int(x) for x in nodes]

    def __eq__(self, other):
        return isinstance(other, RoutingPath) and self.nodes == other.nodes

    def __repr__(self):
        return f"RoutingPath({self.nodes})"


class NodeBuckets:
    """Token index sets per node, backed by the full path matrix.

    paths[i, l] is the node index of token i at level l, so the bucket of
    node (l, j) is where(paths[:, l] == j), ascending by construction.
    """

    def __init__(self, paths, tree):
        self.paths = paths
        self.tree = tree
        self.n = paths.shape[0]

    def bucket(self, l, j):
        return np.flatnonzero(self.paths[:, l] == j)

    def level_labels(self, l):
        return self.paths[:, l]

    def leaf_labels(self):
        return self.paths[:, self.tree.height]

    def counts(self, l):
        return np.bincount(self.paths[:, l], minlength=self.tree.nodes_at(l))

    def leaf_counts(self):
        return self.counts(self.tree.height)


class SoftPath:
    """Per-level probability vectors over nodes, plus the temperature used."""

    __slots__ = ("levels", "tau")

    def __init__(self, levels, tau):
        self.levels = levels
        self.tau = tau


# ---------------------------------------------------------------------------
# hard routing


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _argmax_last(scores):
    """Argmax along the last axis with ties going to the highest index."""
    flipped = scores[..., ::-1]
    return scores.shape[-1] - 1 - np.argmax(flipped, axis=-1)


def decide(tree, l, j, q):
    """Child index in [0, b_l) for query q at internal node (l, j)."""
    if not (0 <= l < tree.height and 0 <= j < tree.nodes_at(l)):
        raise ShapeError(f"decide: ({l}, {j}) is not an internal node")
    q = _as_array(q)
    if q.shape != (tree.d,):
        raise ShapeError(f"decide: query has shape {q.shape}, tree dim is {tree.d}")
    lev = tree.levels[l]
    s = tree.scores_per_node(l)
    w = lev.w.data[j * s:(j + 1) * s]
    b = lev.b.data[j * s:(j + 1) * s]
    f = w @ q + b
    if s == 1:
        return 1 if f[0] >= 0 else 0
    return int(_argmax_last(f))


def route(tree, q):
    """Root-to-leaf path for one query, via iterated decide."""
    q = _as_array(q)
    if q.shape != (tree.d,):
        raise ShapeError(f"route: query has shape {q.shape}, tree dim is {tree.d}")
    nodes = [0]
    j = 0
    for l in range(tree.height):
        c = decide(tree, l, j, q)
        j = j * tree.branching[l] + c
        nodes.append(j)
    return RoutingPath(nodes)


def route_matrix(tree, x):
    """Paths for every row of x at once: int array [n, height+1]."""
    x = _as_array(x)
    if x.ndim != 2 or x.shape[1] != tree.d:
        raise ShapeError(f"route_matrix: rows must have dim {tree.d}, got {x.shape}")
    n = x.shape[0]
    paths = np.zeros((n, tree.height + 1), dtype=np.int64)
    nodes = np.zeros(n, dtype=np.int64)
    for l in range(tree.height):
        lev = tree.levels[l]
        s = tree.scores_per_node(l)
        f = x @ lev.w.data.T + lev.b.data          # [n, J*s]
        if s == 1:
            mine = f[np.arange(n), nodes]
            c = (mine >= 0).astype(np.int64)
        else:
            jcount = tree.nodes_at(l)
            grouped = f.reshape(n, jcount, s)
            mine = np.take_along_axis(grouped, nodes[:, None, None], axis=1)[:, 0, :]
            c = _argmax_last(mine)
        nodes = nodes * tree.branching[l] + c
        paths[:, l + 1] = nodes
    return paths


def bucketize(tree, k):
    """Token buckets per node from projected key rows."""
    return NodeBuckets(route_matrix(tree, k), tree)


# ---------------------------------------------------------------------------
# soft routing


def soft_path(tree, q, tau):
    """Differentiable path distribution for one query (plain arrays out).

    Binary nodes: p(right) = sigmoid(f/tau). k-ary nodes: softmax of the
    scores at temperature tau. A level's distribution is the product of
    edge probabilities down from the root.
    """
    if tau <= 0:
        raise NumericError(f"soft_path: tau must be positive, got {tau}")
    q = _as_array(q).reshape(1, -1)
    if q.shape[1] != tree.d:
        raise ShapeError(f"soft_path: query dim {q.shape[1]} != tree dim {tree.d}")
    probs = soft_level_probs(Tensor(q), tree, tau)
    return SoftPath([p.data[0] for p in probs], tau)


def soft_level_probs(x, tree, tau):
    """Tape-op chain of per-level node probabilities for rows of x.

    Returns height+1 Tensors; entry l has shape [n, nodes_at(l)]. Level 0 is
    the constant all-ones column. Gradients flow into the tree parameters.
    """
    n = x.data.shape[0]
    out = [Tensor(np.ones((n, 1), dtype=np.float64))]
    prev = out[0]
    for l in range(tree.height):
        lev = tree.levels[l]
        s = tree.scores_per_node(l)
        f = T.add_bias(T.matmul(x, T.transpose(lev.w)), lev.b)
        if s == 1:
            edges = T.binary_edge_probs(f, tau)
        else:
            edges = T.group_softmax(f, s, tau)
        prev = T.expand_mul(prev, edges, tree.branching[l])
        out.append(prev)
    return out


def leaf_log_probs(x, tree, tau):
    """Tape-op chain of leaf log-probabilities for rows of x: [n, leaves]."""
    n = x.data.shape[0]
    prev = Tensor(np.zeros((n, 1), dtype=np.float64))
    for l in range(tree.height):
        lev = tree.levels[l]
        s = tree.scores_per_node(l)
        f = T.add_bias(T.matmul(x, T.transpose(lev.w)), lev.b)
        if s == 1:
            edges = T.binary_edge_logprobs(f, tau)
        else:
            edges = T.group_log_softmax(f, s, tau)
        prev = T.expand_sum(prev, edges, tree.branching[l])
    return prev


# ---------------------------------------------------------------------------
# constructors


def lemma1_tree(h, d, eps):
    """All-zero weights with bias eps > 0: every input follows the rightmost path."""
    if eps <= 0:
        raise NumericError(f"lemma1_tree: eps must be positive, got {eps}")
    levels = []
    for l in range(h):
        j = 2 ** l
        levels.append(TreeLevel(np.zeros((j, d)), np.full(j, float(eps))))
    return TreeParams(h, [2] * h, d, levels)


def random_tree(h, d, rng, branching=None):
    """Gaussian weights with std 1/sqrt(d), zero biases (balanced in expectation)."""
    branching = [2] * h if branching is None else list(branching)
    if len(branching) != h:
        raise ShapeError(f"random_tree: {len(branching)} branching factors for height {h}")
    levels = []
    nodes = 1
    for l in range(h):
        s = 1 if branching[l] == 2 else branching[l]
        w = rng.normal(scale=1.0 / np.sqrt(d), size=(nodes * s, d))
        levels.append(TreeLevel(w, np.zeros(nodes * s)))
        nodes *= branching[l]
    return TreeParams(h, branching, d, levels)


def grow(tree, h_new, rng_seed, branching_new=None):
    """Deepen a tree: existing levels copied verbatim, new ones random.

    New levels use the standard random initializer seeded by rng_seed, so
    two grows with the same seed agree bitwise.
    """
    if h_new <= tree.height:
        raise ShapeError(
            f"grow: new height {h_new} must exceed current height {tree.height}"
        )
    extra = h_new - tree.height
    if branching_new is None:
        branching_new = [2] * extra
    if len(branching_new) != extra:
        raise ShapeError(f"grow: need {extra} new branching factors")
    rng = np.random.default_rng(rng_seed)
    levels = [TreeLevel(lev.w.data.copy(), lev.b.data.copy()) for lev in tree.levels]
    branching = list(tree.branching) + list(branching_new)
    nodes = tree.leaf_count
    for l in range(tree.height, h_new):
        s = 1 if branching[l] == 2 else branching[l]
        w = rng.normal(scale=1.0 / np.sqrt(tree.d), size=(nodes * s, tree.d))
        levels.append(TreeLevel(w, np.zeros(nodes * s)))
        nodes *= branching[l]
    return TreeParams(h_new, branching, tree.d, levels)


def balanced_tree(k, h, rng):
    """Median-split tree over actual rows of k: leaf sizes differ by at most 1.

    Each node draws a random direction, projects its token subset, and puts
    the bias at the midpoint of the two middle order statistics, so the
    subset splits in half exactly. Binary only.
    """
    k = _as_array(k)
    n, d = k.shape
    if 2 ** h > n:
        raise ShapeError(f"balanced_tree: 2^{h} leaves exceed {n} rows")
    levels = [TreeLevel(np.zeros((2 ** l, d)), np.zeros(2 ** l)) for l in range(h)]
    tokens_at = {0: np.arange(n)}
    for l in range(h):
        nxt = {}
        for j in range(2 ** l):
            idx = tokens_at[j]
            w = rng.normal(size=d)
            w /= np.linalg.norm(w)
            proj = k[idx] @ w
            order = np.sort(proj)
            mid = len(idx) // 2
            # bias strictly between the two middle projections
            b = -(order[mid - 1] + order[mid]) / 2.0
            levels[l].w.data[j] = w
            levels[l].b.data[j] = b
            side = (proj + b) >= 0
            nxt[2 * j] = idx[~side]
            nxt[2 * j + 1] = idx[side]
        tokens_at = nxt
    return TreeParams(h, [2] * h, d, levels)


# ---------------------------------------------------------------------------
# serialization (bit-exact at 64-bit)


def _b64(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).decode()


def _unb64(s, shape):
    try:
        raw = base64.b64decode(s, validate=True)
    except Exception as e:
        raise TreeFormatError(f"tree record: bad base64 payload ({e})")
    if len(raw) % 8 != 0:
        raise TreeFormatError(
            f"tree record: payload length {len(raw)} is not a whole number of floats"
        )
    arr = np.frombuffer(raw, dtype=np.float64)
    if arr.size != math.prod(shape):
        raise TreeFormatError(
            f"tree record: payload holds {arr.size} values, shape {shape} needs "
            f"{math.prod(shape)}"
        )
    return arr.reshape(shape).copy()


def to_record(tree):
    return {
        "format": SERIAL_FORMAT,
        "version": SERIAL_VERSION,
        "indexing": INDEXING,
        "height": tree.height,
        "branching": tree.branching,
        "dim": tree.d,
        "levels": [
            {"w": _b64(lev.w.data), "b": _b64(lev.b.data)} for lev in tree.levels
        ],
    }


def from_record(rec):
    if not isinstance(rec, dict):
        raise TreeFormatError("tree record: not a mapping")
    if rec.get("format") != SERIAL_FORMAT:
        raise TreeFormatError(f"tree record: unknown format {rec.get('format')!r}")
    if rec.get("version") != SERIAL_VERSION:
        raise TreeFormatError(f"tree record: unsupported version {rec.get('version')!r}")
    for key in ("height", "branching", "dim", "levels"):
        if key not in rec:
            raise TreeFormatError(f"tree record: missing field {key!r}")
    h = rec["height"]
    branching = rec["branching"]
    d = rec["dim"]
    if len(rec["levels"]) != h:
        raise TreeFormatError(
            f"tree record: {len(rec['levels'])} levels for height {h}"
        )
    levels = []
    nodes = 1
    for l, lev in enumerate(rec["levels"]):
        b = branching[l]
        s = 1 if b == 2 else b
        w = _unb64(lev["w"], (nodes * s, d))
        bias = _unb64(lev["b"], (nodes * s,))
        levels.append(TreeLevel(w, bias))
        nodes *= b
    try:
        return TreeParams(h, branching, d, levels)
    except (ShapeError, TreeFormatError) as e:
        raise TreeFormatError(f"tree record: {e}")


def save_tree(tree, path):
    with open(path, "w") as fh:
        json.dump(to_record(tree), fh)


def load_tree(path):
    with open(path) as fh:
        try:
            rec = json.load(fh)
        except json.JSONDecodeError as e:
            raise TreeFormatError(f"tree record: invalid JSON ({e})")
    return from_record(rec)
