"""Self-checks behind the verify command.

Each check exercises one contract the package promises, under a stable
name, and either returns a short detail string or raises. The report is
machine readable: {"passed": bool, "checks": [{name, passed, detail}]}.
Two checks are deliberately negative: they corrupt serialized state and
demand a rejection.
"""

from __future__ import annotations

import dataclasses
import os
import tempfile

import numpy as np

from . import attention as att
from . import bootstrap as bs
from . import config as cfglib
from . import costing
from . import data as dlib
from . import model as M
from . import tree as trlib
from .rng import substream
from .tensor import Tensor
from .tree import TreeFormatError

CHECKS = {}


def check(name):
    def deco(fn):
        CHECKS[name] = fn
        return fn
    return deco


def run_checks(names=None):
    selected = sorted(CHECKS) if names is None else list(names)
    results = []
    for name in selected:
        if name not in CHECKS:
            results.append({"name": name, "passed": False,
                            "detail": f"unknown check {name!r}"})
            continue
        try:
            detail = CHECKS[name]()
            results.append({"name": name, "passed": True, "detail": detail or "ok"})
        except Exception as e:
            results.append({"name": name, "passed": False,
                            "detail": f"{type(e).__name__}: {e}"})
    return {"passed": all(r["passed"] for r in results), "checks": results}


def _demand(cond, msg):
    if not cond:
        raise AssertionError(msg)


@check("tree.partition-disjoint-union")
def _tree_partition():
    rng = np.random.default_rng(11)
    tree = trlib.random_tree(3, 6, rng, branching=[2, 3, 2])
    buckets = trlib.bucketize(tree, rng.normal(size=(40, 6)))
    for l in range(tree.height + 1):
        seen = np.concatenate([buckets.bucket(l, j) for j in range(tree.nodes_at(l))])
        _demand(np.array_equal(np.sort(seen), np.arange(40)),
                f"level {l} buckets do not partition the tokens")
    return "buckets at every level partition all 40 tokens"


@check("tree.parent-prefix")
def _tree_parent_prefix():
    rng = np.random.default_rng(12)
    tree = trlib.random_tree(4, 5, rng)
    buckets = trlib.bucketize(tree, rng.normal(size=(32, 5)))
    for l in range(tree.height):
        child = buckets.paths[:, l + 1]
        _demand(np.array_equal(child // tree.branching[l], buckets.paths[:, l]),
                f"level {l + 1} nodes do not refine their parents")
    return "every bucket refines its parent bucket"


@check("tree.record-round-trip")
def _tree_round_trip():
    rng = np.random.default_rng(13)
    for branching in (None, [3, 2]):
        tree = trlib.random_tree(2, 4, rng, branching=branching)
        back = trlib.from_record(trlib.to_record(tree))
        for a, b in zip(tree.levels, back.levels):
            _demand(np.array_equal(a.w.data, b.w.data) and np.array_equal(a.b.data, b.b.data),
                    "level parameters changed across serialization")
    return "binary and k-ary trees survive a record round trip bitwise"


@check("tree.record-rejects-corruption")
def _tree_corrupt():
    rng = np.random.default_rng(14)
    rec = trlib.to_record(trlib.random_tree(2, 4, rng))
    payload = rec["levels"][1]["w"]
    rec["levels"][1]["w"] = payload[:-8]
    try:
        trlib.from_record(rec)
    except TreeFormatError:
        return "truncated level payload is rejected"
    raise AssertionError("corrupted record was accepted")


@check("attention.single-leaf-matches-full")
def _lemma1():
    rng = np.random.default_rng(15)
    d = 8
    eye = lambda: Tensor(np.eye(d))
    q = Tensor(rng.normal(size=(12, d)))
    k = Tensor(rng.normal(size=(16, d)))
    v = Tensor(rng.normal(size=(16, d)))
    full = att.multi_head(q, k, v, att.AttentionLayerSpec("full", d, 1, eye(), eye(), eye()))
    tree = trlib.lemma1_tree(3, d, 1.0)
    spec = att.AttentionLayerSpec("tf", d, 1, eye(), eye(), eye(), trees=[tree])
    restricted = att.multi_head(q, k, v, spec)
    err = float(np.abs(full.data - restricted.data).max())
    _demand(err < 1e-12, f"single-leaf routing deviates from dense attention by {err}")
    return f"max deviation {err:.2e}"


@check("attention.rows-stochastic-or-empty")
def _rows_stochastic():
    rng = np.random.default_rng(16)
    d = 6
    tree = trlib.random_tree(2, d, rng)
    spec = att.AttentionLayerSpec(
        "tf", d, 1, Tensor(np.eye(d)), Tensor(np.eye(d)), Tensor(np.eye(d)), trees=[tree])
    w = att.tf_attention_weights(Tensor(rng.normal(size=(20, d))),
                                 Tensor(rng.normal(size=(9, d))), spec, 0)
    sums = w.sum(axis=1)
    ok = np.isclose(sums, 1.0, atol=1e-12) | (sums == 0.0)
    _demand(bool(ok.all()), "a weight row is neither stochastic nor exactly empty")
    return "every weight row sums to 1 or is exactly zero"


@check("attention.rescale-invariant")
def _rescale():
    rng = np.random.default_rng(17)
    d = 6
    tree = trlib.random_tree(2, d, rng)
    x = rng.normal(size=(14, d))
    before = trlib.bucketize(tree, x).paths.copy()
    for lev in tree.levels:
        lev.w.data *= 3.5
        lev.b.data *= 3.5
    after = trlib.bucketize(tree, x).paths
    _demand(np.array_equal(before, after), "positive rescale moved a token")
    return "routing is bitwise invariant under positive parameter rescale"


@check("nodevalues.parent-mean-consistency")
def _node_values():
    rng = np.random.default_rng(18)
    d = 5
    tree = trlib.random_tree(3, d, rng)
    k = Tensor(rng.normal(size=(30, d)))
    v = Tensor(rng.normal(size=(30, d)))
    nv = att.compute_node_values(k, v, tree)
    for l in range(tree.height):
        for j in range(tree.nodes_at(l)):
            total = np.zeros(d)
            count = 0
            for c in range(tree.branching[l]):
                cj = j * tree.branching[l] + c
                total += nv.value(l + 1, cj) * nv.count(l + 1, cj)
                count += nv.count(l + 1, cj)
            if count:
                err = float(np.abs(nv.value(l, j) - total / count).max())
                _demand(err < 1e-12, f"node ({l},{j}) disagrees with its children by {err}")
    return "every node average equals the count-weighted child average"


@check("bootstrap.schedule-budget-and-order")
def _schedule():
    sched = bs.make_schedule(L=12, w=3, h_s=3, h_f=7, N=2000)
    _demand(sum(s.budget for s in sched.stages) == 2000, "budgets do not sum to N")
    idxs = [s.idx for s in sched.stages]
    _demand(idxs == sorted(idxs, reverse=True), "start index increased between stages")
    _demand(idxs[0] == 10 and idxs[-1] == 1, f"index sweep {idxs[0]}..{idxs[-1]} is wrong")
    heights = [s.h for s in sched.stages[:5]]
    _demand(heights == [4, 5, 6, 7, 4], f"height sweep starts {heights}")
    return f"{len(sched.stages)} stages, budgets sum to 2000, indices {idxs[0]}..{idxs[-1]}"


@check("costing.counted-within-full-bound")
def _counted_bound():
    rng = np.random.default_rng(19)
    d = 8
    tree = trlib.random_tree(3, d, rng)
    kb = trlib.bucketize(tree, rng.normal(size=(50, d)))
    qb = trlib.bucketize(tree, rng.normal(size=(50, d)))
    tf = costing.counted_cost(kb, "tf", d, q_buckets=qb)["total"]
    full = costing.counted_cost(kb, "full", d, q_buckets=qb)["total"]
    _demand(tf <= full, f"leaf-restricted count {tf} exceeds dense count {full}")
    return f"counted {tf} <= dense bound {full}"


@check("costing.histogram-accounts-all-keys")
def _histogram():
    rng = np.random.default_rng(20)
    d = 6
    tree = trlib.random_tree(2, d, rng)
    spec = att.AttentionLayerSpec(
        "tf", d, 1, Tensor(np.eye(d)), Tensor(np.eye(d)), Tensor(np.eye(d)), trees=[tree])
    x = Tensor(rng.normal(size=(25, d)))
    diag = att.DiagSink()
    att.multi_head(x, x, x, spec, diag=diag)
    total = int(diag.hists[0].sum())
    _demand(total == 25, f"histogram accounts for {total} of 25 keys")
    return "leaf histogram sums to the number of routed keys"


@check("checkpoint.round-trip-bitwise")
def _checkpoint():
    cfg = M.EncoderConfig(d=8, heads=2, ffn=16, vocab=10, n=8, seed=3, layers=[
        M.LayerPlan("tf", height=1)]).validate()
    state = M.TrainState(model=M.build_model(cfg), opt=M.AdamSettings(total=10))
    rng = substream(3, "data", 0)
    batch = dlib.make_batch("masked-copy", rng, 2, 8, 10)
    M.train_step(state, batch)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "state.npz")
        M.save_checkpoint(path, state)
        loaded = M.load_checkpoint(path)
        for name, pt in state.model.params.items():
            _demand(np.array_equal(pt.data, loaded.model.params[name].data),
                    f"parameter {name} changed across the round trip")
        _demand(loaded.step == state.step, "step changed across the round trip")
    return "all parameters and the step counter survive bitwise"


@check("checkpoint.rejects-tampering")
def _checkpoint_tamper():
    cfg = M.EncoderConfig(d=8, heads=2, ffn=16, vocab=10, n=8, seed=4, layers=[
        M.LayerPlan("tf", height=1)]).validate()
    state = M.TrainState(model=M.build_model(cfg), opt=M.AdamSettings(total=10))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "state.npz")
        M.save_checkpoint(path, state)
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        victim = next(k for k in arrays if ".tree" in k and k.endswith(".w"))
        arrays[victim] = arrays[victim] + 1.0
        np.savez(path, **arrays)
        try:
            M.load_checkpoint(path)
        except TreeFormatError:
            return "tampered tree parameters are rejected"
    raise AssertionError("tampered checkpoint was accepted")


@check("rng.substreams-stable-and-distinct")
def _substreams():
    a = substream(7, "data", 0).normal(size=4)
    b = substream(7, "data", 0).normal(size=4)
    c = substream(7, "init").normal(size=4)
    _demand(np.array_equal(a, b), "same substream replayed differently")
    _demand(not np.allclose(a, c), "distinct substreams collide")
    return "named substreams replay exactly and do not collide"


@check("config.round-trip-strict")
def _config():
    cfg = cfglib.RunConfig(
        task="masked-copy", seed=9,
        model=M.EncoderConfig(d=16, heads=2, ffn=32, vocab=12, n=16,
                              layers=[M.LayerPlan("tf", height=2)]),
        bootstrap=cfglib.BootstrapSettings(w=1, h_s=1, h_f=3, budget=300))
    back = cfglib.run_config_from_dict(cfglib.run_config_to_dict(cfg))
    _demand(back == cfg, "config changed across a dict round trip")
    try:
        cfglib.run_config_from_dict({"task": "masked-copy", "sede": 1})
        raise AssertionError("unknown field was accepted")
    except Exception as e:
        _demand("sede" in str(e), f"error does not name the bad field: {e}")
    return "round trip is identity; unknown fields are named in the error"
