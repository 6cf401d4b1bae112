"""Small pre-norm transformer encoder with swappable attention variants.

A model is a config plus a flat name -> Tensor parameter dict; attention
layers own their trees through AttentionLayerSpec. Training is masked-token
prediction with an adaptive-moment optimizer (decoupled weight decay),
warmup-then-linear-decay learning rate, and per-group gradient-norm logging.
Checkpoints restore training bitwise.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from . import attention as att
from . import tensor as T
from . import tree as trlib
from .rng import substream
from .tensor import ComputeTape, NumericError, ShapeError, Tensor, backward


class TrainAbort(RuntimeError):
    """A training step found non-finite gradients; .group names the culprit."""

    def __init__(self, group):
        super().__init__(f"non-finite gradient in parameter group {group}")
        self.group = group


@dataclasses.dataclass
class LayerPlan:
    """What kind of attention one layer runs, before parameters exist."""

    variant: str = "full"
    height: int = 0
    branching: list | None = None
    tau: float = 1.0
    trees_frozen: bool = False

    def tree_branching(self):
        if self.branching is not None:
            return list(self.branching)
        return [2] * self.height


@dataclasses.dataclass
class EncoderConfig:
    d: int = 64
    heads: int = 2
    ffn: int = 128
    vocab: int = 64
    n: int = 128
    dropout: float = 0.0
    seed: int = 0
    layers: list = dataclasses.field(default_factory=list)

    @property
    def L(self):
        return len(self.layers)

    def validate(self):
        if self.d % self.heads != 0:
            raise ShapeError(f"config: width {self.d} not divisible by {self.heads} heads")
        if not (0.0 <= self.dropout < 1.0):
            raise ShapeError(f"config: dropout must lie in [0, 1), got {self.dropout}")
        for i, plan in enumerate(self.layers):
            if plan.variant not in att.VARIANTS:
                raise ShapeError(f"config: layer {i} has unknown variant {plan.variant!r}")
            if plan.variant != "full":
                leaves = int(np.prod(plan.tree_branching())) if plan.height else 1
                if plan.variant in ("tf", "kary_tf") and leaves > self.n:
                    raise ShapeError(
                        f"config: layer {i} has {leaves} leaves for sequences of "
                        f"length {self.n}"
                    )
        return self


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    d["layers"] = [dataclasses.asdict(p) for p in cfg.layers]
    return d


def config_from_dict(d):
    layers = [LayerPlan(**p) for p in d.get("layers", [])]
    rest = {k: v for k, v in d.items() if k != "layers"}
    return EncoderConfig(layers=layers, **rest).validate()


@dataclasses.dataclass
class Batch:
    """Token ids [b x n], mask positions [b x m], targets [b x m]."""

    ids: np.ndarray
    mask_pos: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask_pos = np.asarray(self.mask_pos, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.ids.ndim != 2 or self.mask_pos.shape != self.targets.shape \
                or self.mask_pos.ndim != 2 or self.mask_pos.shape[0] != self.ids.shape[0]:
            raise ShapeError("batch: ids [b x n] with aligned mask/target [b x m] required")


class Model:
    """EncoderConfig + parameter tensors + per-layer attention specs."""

    def __init__(self, config, params, specs):
        self.config = config
        self.params = params
        self.specs = specs

    def named(self, name):
        return self.params[name]


def _reg(params, name, data, rng=None, std=None, tracked=True):
    if std is not None:
        data = rng.normal(0.0, std, data)
    t = Tensor(np.asarray(data, dtype=np.float64), grad_tracked=tracked, name=name)
    params[name] = t
    return t


def build_model(config):
    """Materialize parameters for a config, all streams keyed by config.seed.

    Non-tree parameters depend only on (seed, shape plan), never on the
    attention variants, so two configs differing only in variants share them
    bitwise. Trees draw from their own (layer, head)-indexed stream.
    """
    config.validate()
    rng = substream(config.seed, "init")
    d, H, V, n, F = config.d, config.heads, config.vocab, config.n, config.ffn
    params = {}
    _reg(params, "embed.tok", (V, d), rng, 0.1)
    _reg(params, "embed.pos", (n, d), rng, 0.1)
    specs = []
    for i, plan in enumerate(config.layers):
        _reg(params, f"layer{i}.ln1.g", np.ones(d))
        _reg(params, f"layer{i}.ln1.b", np.zeros(d))
        wq = _reg(params, f"layer{i}.wq", (d, d), rng, 1.0 / np.sqrt(d))
        wk = _reg(params, f"layer{i}.wk", (d, d), rng, 1.0 / np.sqrt(d))
        wv = _reg(params, f"layer{i}.wv", (d, d), rng, 1.0 / np.sqrt(d))
        _reg(params, f"layer{i}.wo", (d, d), rng, 1.0 / np.sqrt(d))
        _reg(params, f"layer{i}.ln2.g", np.ones(d))
        _reg(params, f"layer{i}.ln2.b", np.zeros(d))
        _reg(params, f"layer{i}.ffn.w1", (d, F), rng, 1.0 / np.sqrt(d))
        _reg(params, f"layer{i}.ffn.b1", np.zeros(F))
        _reg(params, f"layer{i}.ffn.w2", (F, d), rng, 1.0 / np.sqrt(F))
        _reg(params, f"layer{i}.ffn.b2", np.zeros(d))
        trees = None
        alpha = None
        if plan.variant != "full":
            trees = []
            for h in range(H):
                t = trlib.random_tree(plan.height, d // H,
                                      substream(config.seed, "tree-init", i, h),
                                      plan.tree_branching())
                _register_tree(params, i, h, t, frozen=plan.trees_frozen)
                trees.append(t)
            if plan.variant == "tc":
                alpha = [
                    _reg(params, f"layer{i}.alpha{h}",
                         np.full(plan.height + 1, 1.0 / (plan.height + 1)),
                         tracked=not plan.trees_frozen)
                    for h in range(H)
                ]
        specs.append(att.AttentionLayerSpec(
            plan.variant, d, H, wq, wk, wv, trees, alpha,
            tau=plan.tau, trees_frozen=plan.trees_frozen))
    _reg(params, "final.ln.g", np.ones(d))
    _reg(params, "final.ln.b", np.zeros(d))
    _reg(params, "head.w", (d, V), rng, 1.0 / np.sqrt(d))
    _reg(params, "head.b", np.zeros(V))
    return Model(config, params, specs)


def _register_tree(params, layer, head, tree, frozen=False):
    for name, p in tree.named_params(f"layer{layer}.tree{head}."):
        p.grad_tracked = not frozen
        p.name = name
        params[name] = p


def tree_param_names(model):
    out = set()
    for i, plan in enumerate(model.config.layers):
        if plan.variant == "full":
            continue
        for h in range(model.config.heads):
            for name, _ in model.specs[i].trees[h].named_params(f"layer{i}.tree{h}."):
                out.add(name)
            if plan.variant == "tc":
                out.add(f"layer{i}.alpha{h}")
    return out


def frozen_param_names(model):
    out = set()
    for i, plan in enumerate(model.config.layers):
        if plan.variant != "full" and plan.trees_frozen:
            for h in range(model.config.heads):
                for name, _ in model.specs[i].trees[h].named_params(f"layer{i}.tree{h}."):
                    out.add(name)
                if plan.variant == "tc":
                    out.add(f"layer{i}.alpha{h}")
    return out


def param_groups(model):
    """Ordered name groups for gradient-norm logging, one bundle per layer."""
    groups = {"embed": ["embed.tok", "embed.pos"]}
    for i, plan in enumerate(model.config.layers):
        groups[f"layer{i}.attn"] = [f"layer{i}.{w}" for w in ("wq", "wk", "wv", "wo")]
        if plan.variant != "full":
            names = []
            for h in range(model.config.heads):
                names.extend(n for n, _ in
                             model.specs[i].trees[h].named_params(f"layer{i}.tree{h}."))
                if plan.variant == "tc":
                    names.append(f"layer{i}.alpha{h}")
            groups[f"layer{i}.tree"] = names
        groups[f"layer{i}.norm"] = [f"layer{i}.ln1.g", f"layer{i}.ln1.b",
                                    f"layer{i}.ln2.g", f"layer{i}.ln2.b"]
        groups[f"layer{i}.ffn"] = [f"layer{i}.ffn.{w}" for w in ("w1", "b1", "w2", "b2")]
    groups["head"] = ["final.ln.g", "final.ln.b", "head.w", "head.b"]
    return groups


def _dropout(x, p, rng):
    keep = (rng.random(x.data.shape) >= p).astype(np.float64) / (1.0 - p)
    return T.mul(x, Tensor(keep))


def forward(model, batch, dropout_rng=None, diags=None):
    """Masked-position logits for a batch; optionally fills per-layer DiagSinks.

    dropout_rng None means evaluation mode (no dropout). diags, when given,
    must be one DiagSink per layer; tree layers record occupancy histograms
    and empty-leaf counts into them.
    """
    cfg = model.config
    b, nseq = batch.ids.shape
    if nseq > cfg.n:
        raise ShapeError(f"forward: sequence length {nseq} exceeds maximum {cfg.n}")
    if batch.ids.min() < 0 or batch.ids.max() >= cfg.vocab:
        raise ShapeError(f"forward: token ids must lie in [0, {cfg.vocab})")
    if batch.mask_pos.size and (batch.mask_pos.min() < 0 or batch.mask_pos.max() >= nseq):
        raise ShapeError("forward: mask positions out of range")
    p = model.params
    use_drop = dropout_rng is not None and cfg.dropout > 0.0
    x = T.add(T.row_gather(p["embed.tok"], batch.ids.reshape(-1)),
              T.row_gather(p["embed.pos"], np.tile(np.arange(nseq), b)))
    for i in range(cfg.L):
        normed = T.layer_norm(x, p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
        diag = diags[i] if diags is not None else None
        parts = []
        for s in range(b):
            sl = T.row_slice(normed, s * nseq, (s + 1) * nseq) if b > 1 else normed
            parts.append(att.multi_head(sl, sl, sl, model.specs[i], diag=diag))
        a = parts[0] if b == 1 else T.concat_rows(parts)
        a = T.matmul(a, p[f"layer{i}.wo"])
        if use_drop:
            a = _dropout(a, cfg.dropout, dropout_rng)
        x = T.add(x, a)
        normed = T.layer_norm(x, p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])
        hmid = T.gelu(T.add_bias(T.matmul(normed, p[f"layer{i}.ffn.w1"]),
                                 p[f"layer{i}.ffn.b1"]))
        y = T.add_bias(T.matmul(hmid, p[f"layer{i}.ffn.w2"]), p[f"layer{i}.ffn.b2"])
        if use_drop:
            y = _dropout(y, cfg.dropout, dropout_rng)
        x = T.add(x, y)
    x = T.layer_norm(x, p["final.ln.g"], p["final.ln.b"])
    flat_pos = (np.arange(b)[:, None] * nseq + batch.mask_pos).reshape(-1)
    gathered = T.row_gather(x, flat_pos)
    return T.add_bias(T.matmul(gathered, p["head.w"]), p["head.b"])


def mlm_loss(logits, targets):
    """Mean masked cross-entropy plus masked-prediction accuracy."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size == 0:
        raise NumericError("mlm_loss: no masked positions")
    loss = T.cross_entropy_rows(logits, targets)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == targets))
    return loss, acc


# ---------------------------------------------------------------------------
# optimizer


@dataclasses.dataclass
class AdamSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup: int = 100
    total: int = 3000
    clip: float = 0.0


def lr_at(step, s):
    """Linear warmup to s.lr, then linear decay to zero at s.total."""
    if s.warmup > 0 and step < s.warmup:
        return s.lr * (step + 1) / s.warmup
    if s.total > s.warmup:
        return s.lr * max(0.0, (s.total - step) / (s.total - s.warmup))
    return s.lr


def adamw_update(params, m, v, t, s, lr_t, skip=frozenset()):
    """One decoupled-weight-decay adaptive-moment step over a name -> Tensor dict.

    Weight decay applies to matrices only (biases, gains, level weights are
    1-D). Parameters in `skip` or without gradients are left untouched.
    """
    b1c = 1.0 - s.beta1 ** t
    b2c = 1.0 - s.beta2 ** t
    for name, pt in params.items():
        if name in skip or pt.grad is None or not pt.grad_tracked:
            continue
        g = pt.grad
        if name not in m:
            m[name] = np.zeros_like(pt.data)
            v[name] = np.zeros_like(pt.data)
        m[name] = s.beta1 * m[name] + (1.0 - s.beta1) * g
        v[name] = s.beta2 * v[name] + (1.0 - s.beta2) * g * g
        mhat = m[name] / b1c
        vhat = v[name] / b2c
        if s.weight_decay > 0.0 and pt.data.ndim == 2:
            pt.data -= lr_t * s.weight_decay * pt.data
        pt.data -= lr_t * mhat / (np.sqrt(vhat) + s.eps)


@dataclasses.dataclass
class TrainState:
    model: Model
    opt: AdamSettings
    step: int = 0
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)


def _grad_norm(names, params):
    total = 0.0
    for n in names:
        g = params[n].grad
        if g is not None:
            total += float(np.sum(g * g))
    return float(np.sqrt(total))


def train_step(state, batch, collect_hists=False):
    """One optimization step; returns a flat metrics record.

    Aborts (TrainAbort) before touching any parameter if a group's gradient
    is non-finite. Frozen trees receive no updates and keep their bits.
    """
    model = state.model
    cfg = model.config
    diags = [att.DiagSink() for _ in range(cfg.L)] if collect_hists else None
    drng = substream(cfg.seed, "dropout", state.step) if cfg.dropout > 0 else None
    for pt in model.params.values():
        pt.grad = None
    with ComputeTape() as tape:
        logits = forward(model, batch, dropout_rng=drng, diags=diags)
        loss, acc = mlm_loss(logits, batch.targets)
    backward(tape, loss)
    groups = param_groups(model)
    norms = {}
    for gname, names in groups.items():
        gn = _grad_norm(names, model.params)
        if not np.isfinite(gn):
            raise TrainAbort(gname)
        norms[gname] = gn
    if state.opt.clip > 0.0:
        total = float(np.sqrt(sum(n * n for n in norms.values())))
        if total > state.opt.clip:
            factor = state.opt.clip / total
            for pt in model.params.values():
                if pt.grad is not None:
                    pt.grad *= factor
    lr_t = lr_at(state.step, state.opt)
    adamw_update(model.params, state.m, state.v, state.step + 1, state.opt, lr_t,
                 skip=frozen_param_names(model))
    state.step += 1
    rec = {"step": state.step, "loss": float(loss.data), "acc": acc, "lr": lr_t,
           "grad_norms": norms}
    if collect_hists:
        rec["hists"] = [
            {head: d.hists[head].tolist() for head in sorted(d.hists)}
            for d in diags
        ]
        rec["empty_leaf"] = int(sum(d.empty_leaf for d in diags))
    return rec


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state):
    """Everything needed to resume bitwise: params, moments, step, config, trees."""
    model = state.model
    arrays = {}
    for name, pt in model.params.items():
        arrays["param/" + name] = pt.data
    for name, arr in state.m.items():
        arrays["adam_m/" + name] = arr
    for name, arr in state.v.items():
        arrays["adam_v/" + name] = arr
    trees = {}
    for i, plan in enumerate(model.config.layers):
        if plan.variant == "full":
            continue
        for h in range(model.config.heads):
            trees[f"layer{i}.tree{h}"] = trlib.to_record(model.specs[i].trees[h])
    meta = {
        "config": config_to_dict(model.config),
        "step": state.step,
        "opt": dataclasses.asdict(state.opt),
        "trees": trees,
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path):
    """Rebuild a TrainState; tree records are cross-checked against the arrays."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]))
        cfg = config_from_dict(meta["config"])
        model = build_model(cfg)
        for name, pt in model.params.items():
            key = "param/" + name
            if key not in z:
                raise ShapeError(f"checkpoint: missing parameter {name}")
            pt.data = z[key].copy()
        m = {k[len("adam_m/"):]: z[k].copy() for k in z.files if k.startswith("adam_m/")}
        v = {k[len("adam_v/"):]: z[k].copy() for k in z.files if k.startswith("adam_v/")}
    for i, plan in enumerate(cfg.layers):
        if plan.variant == "full":
            continue
        for h in range(cfg.heads):
            rec = meta["trees"][f"layer{i}.tree{h}"]
            stored = trlib.from_record(rec)
            live = model.specs[i].trees[h]
            for (_, a), (_, b) in zip(stored.named_params(), live.named_params()):
                if not np.array_equal(a.data, b.data):
                    raise trlib.TreeFormatError(
                        f"checkpoint: tree record for layer {i} head {h} "
                        f"disagrees with stored arrays"
                    )
    state = TrainState(model, AdamSettings(**meta["opt"]), step=int(meta["step"]),
                       m=m, v=v)
    return state
