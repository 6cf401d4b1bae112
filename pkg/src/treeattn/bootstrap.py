"""Staged conversion of a trained dense-attention encoder to tree attention.

The schedule walks two axes at once: an outer sweep converts layer groups
from the top of the stack downward, and an inner sweep deepens trees one
level at a time. Each stage warm-starts from the previous model: untouched
parameters transfer verbatim, existing trees grow by one level keeping
their prefix, and newly converted layers get fresh random trees at the
stage height. Optimizer moments ride along for every parameter that
survives the transition.
"""

from __future__ import annotations

import dataclasses
import math
import os

import numpy as np

from . import model as M
from . import tree as trlib
from .model import TrainAbort, TrainState
from .tensor import ShapeError


@dataclasses.dataclass
class BootstrapStage:
    """First tree layer (1-based), tree height, and step budget of one stage."""

    idx: int
    h: int
    budget: int


@dataclasses.dataclass
class BootstrapSchedule:
    stages: list
    L: int
    w: int
    h_s: int
    h_f: int
    N: int


def make_schedule(L, w, h_s, h_f, N):
    """Stage list for the 2-D sweep over layer groups and tree heights.

    Outer iteration i = 1..ceil(L/w) sets idx = 1 + max(0, L - w*i); inner
    heights run h_s+1..h_f. The step budget divides N evenly with the
    remainder assigned to the final stage so budgets sum to N exactly.
    """
    if not (1 <= w <= L):
        raise ShapeError(f"make_schedule: need 1 <= w <= L, got w={w}, L={L}")
    if not (0 <= h_s < h_f):
        raise ShapeError(f"make_schedule: need 0 <= h_s < h_f, got ({h_s}, {h_f})")
    outer = math.ceil(L / w)
    count = outer * (h_f - h_s)
    if N < count:
        raise ShapeError(
            f"make_schedule: budget {N} cannot cover {count} stages with at "
            f"least one step each"
        )
    base = N // count
    stages = []
    for i in range(1, outer + 1):
        idx = 1 + max(0, L - w * i)
        for h in range(h_s + 1, h_f + 1):
            stages.append(BootstrapStage(idx, h, base))
    stages[-1].budget += N - base * count
    return BootstrapSchedule(stages, L, w, h_s, h_f, N)


def schedule_table(schedule):
    """Human-readable stage table, one line per stage."""
    lines = [f"{'stage':>5}  {'layers':>8}  {'height':>6}  {'budget':>7}"]
    for k, st in enumerate(schedule.stages, start=1):
        lines.append(f"{k:>5}  {st.idx:>3}..{schedule.L:<3}  {st.h:>6}  {st.budget:>7}")
    return "\n".join(lines)


def _stage_seed(rng_seed, *key):
    return int(np.random.SeedSequence(int(rng_seed), spawn_key=tuple(key))
               .generate_state(1)[0])


def _carry_moment(old, new_shape):
    """Transfer rule for one optimizer moment across a stage transition."""
    if old.shape == new_shape:
        return old.copy()
    if len(old.shape) == 1 and len(new_shape) == 1 and old.shape[0] < new_shape[0]:
        out = np.zeros(new_shape)
        out[:old.shape[0]] = old
        return out
    return None


def apply_stage(source, stage, rng_seed, variant="tf", branching=None, tau=1.0,
                moments=None):
    """Warm-started model for one stage, plus transferred optimizer moments.

    Layers below stage.idx (1-based) stay as they are and must still be
    dense. Layers from stage.idx up are tree-routed at stage.h: a dense
    source layer gets a fresh random tree, a tree of height stage.h - 1
    grows one level keeping its prefix, and a tree already at stage.h or
    taller transfers verbatim.
    """
    cfg = source.config
    L = cfg.L
    if not (1 <= stage.idx <= L):
        raise ShapeError(f"apply_stage: stage idx {stage.idx} outside [1, {L}]")
    if stage.h < 1:
        raise ShapeError(f"apply_stage: stage height {stage.h} must be >= 1")
    start = stage.idx - 1
    plans = []
    actions = []
    for j, plan in enumerate(cfg.layers):
        if j < start:
            if plan.variant != "full":
                raise ShapeError(
                    f"apply_stage: layer {j + 1} is already tree-routed but the "
                    f"stage starts at layer {stage.idx}"
                )
            plans.append(dataclasses.replace(plan))
            actions.append("keep")
        else:
            if plan.variant == "full":
                actions.append("fresh")
            elif plan.variant != variant:
                raise ShapeError(
                    f"apply_stage: layer {j + 1} is {plan.variant} but the stage "
                    f"targets {variant}"
                )
            elif plan.height >= stage.h:
                actions.append("copy")
            elif plan.height == stage.h - 1:
                actions.append("grow")
            else:
                raise ShapeError(
                    f"apply_stage: layer {j + 1} has height {plan.height}, "
                    f"cannot reach {stage.h} in one stage"
                )
            height = plan.height if actions[-1] == "copy" else stage.h
            br = list(plan.branching) if actions[-1] == "copy" and plan.branching \
                else (list(branching) if branching else None)
            plans.append(M.LayerPlan(variant=variant, height=height, branching=br,
                                     tau=plan.tau if actions[-1] != "fresh" else tau))
    new_cfg = dataclasses.replace(cfg, layers=plans)
    target = M.build_model(new_cfg)
    for name, pt in target.params.items():
        src = source.params.get(name)
        if src is not None and src.data.shape == pt.data.shape:
            pt.data[...] = src.data
    H = cfg.heads
    for j, action in enumerate(actions):
        if action in ("keep", "copy"):
            continue
        for h in range(H):
            if action == "fresh":
                t = trlib.random_tree(
                    stage.h, cfg.d // H,
                    np.random.default_rng(_stage_seed(rng_seed, j, h)),
                    plans[j].tree_branching())
                alpha = None
            else:
                old = source.specs[j].trees[h]
                t = trlib.grow(old, stage.h, _stage_seed(rng_seed, j, h),
                               plans[j].tree_branching()[old.height:])
                if variant == "tc":
                    old_a = source.params[f"layer{j}.alpha{h}"].data
                    alpha = np.concatenate([old_a, [1.0 / (stage.h + 1)]])
                else:
                    alpha = None
            for (_, dst), (_, val) in zip(
                    target.specs[j].trees[h].named_params(),
                    t.named_params()):
                dst.data[...] = val.data
            if variant == "tc" and action == "grow":
                target.params[f"layer{j}.alpha{h}"].data[...] = alpha
    new_m, new_v = {}, {}
    if moments is not None:
        old_m, old_v = moments
        for name, pt in target.params.items():
            for old, new in ((old_m, new_m), (old_v, new_v)):
                if name in old:
                    carried = _carry_moment(old[name], pt.data.shape)
                    if carried is not None:
                        new[name] = carried
    return target, (new_m, new_v)


def run_schedule(state, schedule, data_fn, variant="tf", branching=None, tau=1.0,
                 rng_seed=0, out_dir=None, collect_hists=False):
    """Train through every stage, warm-starting each from the last.

    state holds the pretrained dense model plus optimizer settings and the
    global step counter; the learning-rate schedule continues across stage
    boundaries without restarting. Returns the final TrainState and the
    metric records, each tagged with its 1-based stage number. Stage-end
    checkpoints land in out_dir when given.
    """
    if schedule.L != state.model.config.L:
        raise ShapeError(
            f"run_schedule: schedule is for {schedule.L} layers, model has "
            f"{state.model.config.L}"
        )
    records = []
    for k, stage in enumerate(schedule.stages, start=1):
        if stage.budget <= 0:
            raise ShapeError(f"run_schedule: stage {k} has budget {stage.budget}")
        model, (m, v) = apply_stage(state.model, stage, _stage_seed(rng_seed, k),
                                    variant=variant, branching=branching, tau=tau,
                                    moments=(state.m, state.v))
        state = TrainState(model, state.opt, step=state.step, m=m, v=v)
        for _ in range(stage.budget):
            batch = data_fn(state.step)
            try:
                rec = M.train_step(state, batch, collect_hists=collect_hists)
            except TrainAbort as err:
                raise TrainAbort(f"stage{k}.{err.group}") from err
            rec["stage"] = k
            records.append(rec)
        if out_dir is not None:
            M.save_checkpoint(os.path.join(out_dir, f"stage{k:02d}.npz"), state)
    return state, records
