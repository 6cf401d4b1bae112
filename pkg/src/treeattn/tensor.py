"""Dense tensors with reverse-mode gradients on an explicit tape.

Everything is numpy underneath. Ops record themselves on the currently
active ComputeTape (a context manager); with no tape active they are plain
numpy computations, which is what inference and benchmarks use. Shapes are
always explicit: the only broadcast allowed anywhere is the row-wise bias
add in `add_bias`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit


class ShapeError(ValueError):
    """An operation was handed inputs whose shapes don't fit its contract."""


class NumericError(ValueError):
    """A numeric contract was violated (non-scalar loss, non-finite value...)."""


_TAPE_STACK: list["ComputeTape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense array plus an optional gradient slot.

    data is float64 by default; float32 is allowed but nothing in the
    training/correctness paths uses it (benchmarks run raw numpy anyway).
    """

    __slots__ = ("data", "grad", "grad_tracked", "name")

    def __init__(self, data, grad_tracked=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.grad_tracked = bool(grad_tracked)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, tracked={self.grad_tracked})"


def param(data, name=None, dtype=np.float64):
    """Convenience: a gradient-tracked Tensor."""
    return Tensor(np.asarray(data, dtype=dtype), grad_tracked=True, name=name)


class _Record:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class ComputeTape:
    """Ordered record of operations; append order is a valid topological order.

    Use as a context manager. backward() replays the records once, in
    reverse, accumulating into .grad of every tensor it touches.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False


def _emit(op, inputs, out_data, bwd):
    """Create the output tensor and record the op if a tape is listening."""
    tape = active_tape()
    tracked = tape is not None and any(t.grad_tracked for t in inputs)
    out = Tensor(out_data, grad_tracked=tracked)
    if tracked:
        tape.records.append(_Record(op, inputs, out, bwd))
    return out


def backward(tape, loss):
    """Chain-rule sweep over the tape seeding d(loss)/d(loss) = 1.

    Every tensor appearing on the tape ends up with a .grad; tensors the
    loss never reaches get zeros rather than None.
    """
    if not isinstance(loss, Tensor):
        raise NumericError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise NumericError(
            f"backward: loss must be scalar, got shape {loss.data.shape}"
        )
    seen = []
    for rec in tape.records:
        for t in rec.inputs:
            if t.grad_tracked:
                seen.append(t)
        seen.append(rec.out)
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        grads = rec.bwd(g)
        for t, dt in zip(rec.inputs, grads):
            if dt is None or not t.grad_tracked:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += dt
    for t in seen:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a, b):
    """C = A @ B for 2-D tensors; dA = dC·Bᵀ, dB = Aᵀ·dC."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul: expected 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner extents differ, {a.data.shape} @ {b.data.shape}"
        )
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.data.shape}")
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.T), lambda g: (g.T,))


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes differ, {a.data.shape} vs {b.data.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes differ, {a.data.shape} vs {b.data.shape}")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    """Elementwise product, same shapes (used for dropout masks)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes differ, {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def smul(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    return _emit("smul", (a,), a.data * c, lambda g: (g * c,))


def add_bias(x, b):
    """x[m×d] + b[d], the single permitted broadcast."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"add_bias: need [m×d] + [d], got {x.data.shape} and {b.data.shape}"
        )
    return _emit("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)))


def sum_all(x):
    return _emit("sum_all", (x,), np.asarray(x.data.sum()),
                 lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def row_gather(x, idx):
    """Rows of x at positions idx; backward scatter-adds (duplicates accumulate)."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_gather: expected 2-D source, got {x.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(
            f"row_gather: index out of range for {n} rows "
            f"(min {idx.min()}, max {idx.max()})"
        )

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _emit("row_gather", (x,), x.data[idx], bwd)


def _softmax_np(z, scale):
    """Row softmax of scale*z, max-shifted. Shared by the op and the hard paths."""
    s = z * scale
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x, scale=1.0):
    """softmax(scale * x) per row; caller supplies the 1/sqrt(d) factor as scale."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D, got {x.data.shape}")
    if x.data.shape[1] < 1:
        raise ShapeError("softmax_rows: empty row dimension")
    scale = float(scale)
    if scale <= 0:
        raise NumericError(f"softmax_rows: scale must be positive, got {scale}")
    p = _softmax_np(x.data, scale)

    def bwd(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (scale * p * (g - inner),)

    return _emit("softmax_rows", (x,), p, bwd)


def gelu(x):
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return _emit("gelu", (x,), xd * phi, lambda g: (g * (phi + xd * pdf),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Row-wise layer normalization with learned scale/shift."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: expected 2-D, got {x.data.shape}")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("layer_norm: gamma/beta must have shape [d]")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _emit("layer_norm", (x, gamma, beta), out, bwd)


def cross_entropy_rows(logits, targets):
    """Mean cross-entropy of integer targets against rows of logits.

    Fused log-softmax + NLL; backward is (softmax - onehot)/m. Rejects an
    empty target set because the mean is undefined there.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_rows: expected 2-D logits, got {logits.data.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    m, v = logits.data.shape
    if targets.shape != (m,):
        raise ShapeError(
            f"cross_entropy_rows: targets shape {targets.shape} does not match {m} rows"
        )
    if m == 0:
        raise NumericError("cross_entropy_rows: no rows to average over")
    if targets.min() < 0 or targets.max() >= v:
        raise ShapeError("cross_entropy_rows: target id outside vocabulary")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(m), targets].mean()
    p = np.exp(logp)

    def bwd(g):
        dl = p.copy()
        dl[np.arange(m), targets] -= 1.0
        return (dl * (float(g) / m),)

    return _emit("cross_entropy_rows", (logits,), np.asarray(loss), bwd)


def row_slice(x, start, stop):
    if x.data.ndim != 2:
        raise ShapeError(f"row_slice: expected 2-D, got {x.data.shape}")
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"row_slice: [{start}:{stop}] out of range for {n} rows")

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return _emit("row_slice", (x,), x.data[start:stop].copy(), bwd)


def concat_rows(parts):
    if not parts:
        raise ShapeError("concat_rows: empty input list")
    widths = {p.data.shape[1] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(widths) != 1:
        raise ShapeError("concat_rows: parts must be 2-D with equal widths")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit("concat_rows", tuple(parts),
                 np.concatenate([p.data for p in parts], axis=0), bwd)


def col_slice(x, start, stop):
    if x.data.ndim != 2:
        raise ShapeError(f"col_slice: expected 2-D, got {x.data.shape}")
    d = x.data.shape[1]
    if not (0 <= start <= stop <= d):
        raise ShapeError(f"col_slice: [{start}:{stop}] out of range for {d} columns")

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return _emit("col_slice", (x,), x.data[:, start:stop].copy(), bwd)


def concat_cols(parts):
    if not parts:
        raise ShapeError("concat_cols: empty input list")
    heights = {p.data.shape[0] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(heights) != 1:
        raise ShapeError("concat_cols: parts must be 2-D with equal heights")
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", tuple(parts),
                 np.concatenate([p.data for p in parts], axis=1), bwd)


def scale_by_entry(x, s, idx):
    """x * s[idx] where s is a 1-D tensor of learnable scalars."""
    if s.data.ndim != 1:
        raise ShapeError(f"scale_by_entry: scale vector must be 1-D, got {s.data.shape}")
    idx = int(idx)
    if not (0 <= idx < s.data.shape[0]):
        raise ShapeError(f"scale_by_entry: index {idx} out of range")
    c = s.data[idx]

    def bwd(g):
        ds = np.zeros_like(s.data)
        ds[idx] = (g * x.data).sum()
        return (g * c, ds)

    return _emit("scale_by_entry", (x, s), x.data * c, bwd)


def segment_mean_rows(x, labels, m):
    """Per-segment mean of rows: out[j] = mean of x rows with labels == j.

    Segments with no members get a zero row. Backward routes dOut[j]/count(j)
    back to each member row; labels themselves are data, never differentiated.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"segment_mean_rows: expected 2-D, got {x.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.data.shape[0],):
        raise ShapeError("segment_mean_rows: one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ShapeError(f"segment_mean_rows: label outside [0, {m})")
    out, counts = _segment_mean_np(x.data, labels, m)

    def bwd(g):
        return (g[labels] / counts[labels][:, None],)

    return _emit("segment_mean_rows", (x,), out, bwd)


def _segment_mean_np(x, labels, m):
    """Shared forward for segment means, so every caller gets bitwise-equal values."""
    counts = np.bincount(labels, minlength=m).astype(np.int64)
    sums = np.zeros((m, x.shape[1]), dtype=x.dtype)
    np.add.at(sums, labels, x)
    out = sums / np.maximum(counts, 1)[:, None]
    return out, counts


def row_div(num, den):
    """out[j, :] = num[j, :] / den[j] for a strictly positive 1-D denominator."""
    if num.data.ndim != 2 or den.data.ndim != 1 or num.data.shape[0] != den.data.shape[0]:
        raise ShapeError(
            f"row_div: need [m x d] / [m], got {num.data.shape} and {den.data.shape}"
        )
    if np.any(den.data <= 0):
        raise NumericError("row_div: denominator entries must be strictly positive")
    d = den.data[:, None]
    out = num.data / d

    def bwd(g):
        dnum = g / d
        dden = -(g * num.data).sum(axis=1) / (den.data * den.data)
        return (dnum, dden)

    return _emit("row_div", (num, den), out, bwd)


def col_sums(x):
    """Column sums of a 2-D tensor: out[j] = sum_i x[i, j]."""
    if x.data.ndim != 2:
        raise ShapeError(f"col_sums: expected 2-D, got {x.data.shape}")
    n = x.data.shape[0]
    return _emit("col_sums", (x,), x.data.sum(axis=0),
                 lambda g: (np.broadcast_to(g, (n, g.shape[0])).copy(),))


def straight_through(soft, hard):
    """Forward: exactly `hard` (a raw array); backward: identity into `soft`.

    The splice point for hard-routing forwards with surrogate gradients. The
    forward value is the hard array bit-for-bit, so exact-zero rows and
    one-hot picks survive untouched.
    """
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if hard.shape != soft.data.shape:
        raise ShapeError(
            f"straight_through: hard shape {hard.shape} != soft shape {soft.data.shape}"
        )
    return _emit("straight_through", (soft,), hard.copy(), lambda g: (g,))


# ---------------------------------------------------------------------------
# soft routing chains: per-level edge probabilities and their log-domain twins


def binary_edge_probs(f, tau):
    """Turn per-node scores f[n×J] into child probabilities [n×2J].

    Columns interleave (left, right) per node: left = sigmoid(-f/tau),
    right = sigmoid(f/tau).
    """
    if f.data.ndim != 2:
        raise ShapeError(f"binary_edge_probs: expected 2-D, got {f.data.shape}")
    tau = float(tau)
    if tau <= 0:
        raise NumericError(f"binary_edge_probs: tau must be positive, got {tau}")
    n, j = f.data.shape
    right = expit(f.data / tau)
    out = np.empty((n, 2 * j), dtype=f.data.dtype)
    out[:, 0::2] = 1.0 - right
    out[:, 1::2] = right

    def bwd(g):
        dright = right * (1.0 - right) / tau
        return ((g[:, 1::2] - g[:, 0::2]) * dright,)

    return _emit("binary_edge_probs", (f,), out, bwd)


def binary_edge_logprobs(f, tau):
    """log of binary_edge_probs, computed stably via softplus."""
    if f.data.ndim != 2:
        raise ShapeError(f"binary_edge_logprobs: expected 2-D, got {f.data.shape}")
    tau = float(tau)
    if tau <= 0:
        raise NumericError(f"binary_edge_logprobs: tau must be positive, got {tau}")
    n, j = f.data.shape
    z = f.data / tau
    out = np.empty((n, 2 * j), dtype=f.data.dtype)
    out[:, 0::2] = -np.logaddexp(0.0, z)     # log sigmoid(-f/tau)
    out[:, 1::2] = -np.logaddexp(0.0, -z)    # log sigmoid(f/tau)

    def bwd(g):
        sig = expit(z)
        return ((g[:, 1::2] * (1.0 - sig) - g[:, 0::2] * sig) / tau,)

    return _emit("binary_edge_logprobs", (f,), out, bwd)


def group_softmax(f, group, tau):
    """Softmax at temperature tau over consecutive groups of `group` columns."""
    if f.data.ndim != 2 or f.data.shape[1] % group != 0:
        raise ShapeError(
            f"group_softmax: width {f.data.shape} not divisible into groups of {group}"
        )
    tau = float(tau)
    if tau <= 0:
        raise NumericError(f"group_softmax: tau must be positive, got {tau}")
    n, w = f.data.shape
    z = (f.data / tau).reshape(n, w // group, group)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=2, keepdims=True)

    def bwd(g):
        gg = g.reshape(n, w // group, group)
        inner = (gg * p).sum(axis=2, keepdims=True)
        return ((p * (gg - inner) / tau).reshape(n, w),)

    return _emit("group_softmax", (f,), p.reshape(n, w), bwd)


def group_log_softmax(f, group, tau):
    if f.data.ndim != 2 or f.data.shape[1] % group != 0:
        raise ShapeError(
            f"group_log_softmax: width {f.data.shape} not divisible into groups of {group}"
        )
    tau = float(tau)
    if tau <= 0:
        raise NumericError(f"group_log_softmax: tau must be positive, got {tau}")
    n, w = f.data.shape
    z = (f.data / tau).reshape(n, w // group, group)
    zs = z - z.max(axis=2, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=2, keepdims=True))
    logp = zs - lse

    def bwd(g):
        gg = g.reshape(n, w // group, group)
        p = np.exp(logp)
        dz = gg - p * gg.sum(axis=2, keepdims=True)
        return ((dz / tau).reshape(n, w),)

    return _emit("group_log_softmax", (f,), logp.reshape(n, w), bwd)


def expand_mul(prev, edges, b):
    """Child probabilities: out[:, j*b+c] = prev[:, j] * edges[:, j*b+c]."""
    n, j = prev.data.shape
    if edges.data.shape != (n, j * b):
        raise ShapeError(
            f"expand_mul: edges shape {edges.data.shape} != ({n}, {j * b})"
        )
    pd = prev.data
    ed = edges.data
    out = (pd[:, :, None] * ed.reshape(n, j, b)).reshape(n, j * b)

    def bwd(g):
        gr = g.reshape(n, j, b)
        dprev = (gr * ed.reshape(n, j, b)).sum(axis=2)
        dedges = (gr * pd[:, :, None]).reshape(n, j * b)
        return (dprev, dedges)

    return _emit("expand_mul", (prev, edges), out, bwd)


def expand_sum(prev, edges, b):
    """Log-domain twin of expand_mul: out[:, j*b+c] = prev[:, j] + edges[:, j*b+c]."""
    n, j = prev.data.shape
    if edges.data.shape != (n, j * b):
        raise ShapeError(
            f"expand_sum: edges shape {edges.data.shape} != ({n}, {j * b})"
        )
    out = (prev.data[:, :, None] + edges.data.reshape(n, j, b)).reshape(n, j * b)

    def bwd(g):
        return (g.reshape(n, j, b).sum(axis=2), g)

    return _emit("expand_sum", (prev, edges), out, bwd)


def log_matmul_exp(a, b):
    """out[i, k] = logsumexp_l(a[i, l] + b[k, l]) without leaving log space.

    Used to build the pairwise soft co-leaf affinity from per-token leaf
    log-distributions; stays finite even when the distributions saturate.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(
            f"log_matmul_exp: incompatible shapes {a.data.shape}, {b.data.shape}"
        )
    m1 = a.data.max(axis=1, keepdims=True)
    m2 = b.data.max(axis=1, keepdims=True)
    ea = np.exp(a.data - m1)
    eb = np.exp(b.data - m2)
    prod = np.maximum(ea @ eb.T, 1e-300)
    out = np.log(prod) + m1 + m2.T

    def bwd(g):
        g2 = g / prod
        da = ea * (g2 @ eb)
        db = eb * (g2.T @ ea)
        return (da, db)

    return _emit("log_matmul_exp", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# finite differences


def fd_check(f, params, step=1e-4):
    """Max relative disagreement between tape gradients and central differences.

    f is a zero-argument callable returning a scalar Tensor, evaluated fresh
    on each call against the current contents of `params` (a name -> Tensor
    mapping). Relative error per entry is |a - fd| / (|a| + |fd| + 1e-12);
    the max over all entries of all parameters is returned. A non-finite
    evaluation raises NumericError naming the parameter being perturbed.
    """
    for p in params.values():
        p.grad = None
    with ComputeTape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise NumericError("fd_check: f must return a scalar Tensor")
    backward(tape, loss)
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            analytic[name] = np.zeros_like(p.data)
        else:
            analytic[name] = p.grad.copy()

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            dn = float(f().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(dn)):
                raise NumericError(
                    f"fd_check: non-finite evaluation while perturbing {name}[{i}]"
                )
            fd = (up - dn) / (2.0 * step)
            a = aflat[i]
            err = abs(a - fd) / (abs(a) + abs(fd) + 1e-12)
            if err > worst:
                worst = err
    return worst
