"""Command line entry points: train, bench, verify, inspect.

Every command takes --config/--seed/--out/--precision. Training and
benchmarking hold a lock file inside the output directory so two runs
cannot interleave their artifacts. Training and verification always run
in float64; the latency benchmark defaults to float32 kernels.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
from filelock import FileLock, Timeout

from . import attention as att
from . import bootstrap as bs
from . import costing
from . import data as dlib
from . import model as M
from . import verify as vlib
from .config import BenchSettings, load_run_config
from .rng import substream
from .tensor import NumericError, ShapeError
from .tree import TreeFormatError

LOCK_NAME = "run.lock"


@dataclasses.dataclass
class LeafHistogramRecord:
    """One routing histogram snapshot: which leaves held the keys."""

    layer: int
    head: int
    step: int
    counts: list

    def validate(self, seq_len, batch_size):
        total = sum(self.counts)
        if total != seq_len * batch_size:
            raise ShapeError(
                f"histogram record: counts sum to {total}, expected "
                f"{seq_len}x{batch_size}={seq_len * batch_size}"
            )
        return self


def build_parser():
    parser = argparse.ArgumentParser(
        prog="treeattn",
        description="Train, benchmark, and inspect tree-routed attention models.")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "train": "Run one training job described by a config file.",
        "bench": "Measure attention latency and write the cost table.",
        "verify": "Run the named self-checks and report pass/fail as JSON.",
        "inspect": "Dump tree and routing state from a checkpoint.",
    }
    parsers = {}
    for name, help_text in specs.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", metavar="PATH", default=None,
                        help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the root seed from the config")
        sp.add_argument("--out", metavar="DIR", default=None,
                        help="directory for run artifacts")
        sp.add_argument("--precision", type=int, choices=(32, 64), default=None,
                        help="floating point width (bench only accepts 32)")
        parsers[name] = sp
    parsers["inspect"].add_argument("checkpoint", nargs="?", default=None,
                                    help="checkpoint file (default: OUT/final.npz)")
    parsers["verify"].add_argument("--check", action="append", default=None,
                                   metavar="NAME", help="run only this named check")
    return parser


def _fail(msg, code=2):
    print(f"error: {msg}", file=sys.stderr)
    return code


def _require_f64(args):
    if args.precision == 32:
        raise ShapeError(f"{args.command} runs in float64; --precision 32 is only for bench")


def _locked(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lock = FileLock(os.path.join(out_dir, LOCK_NAME))
    lock.acquire(timeout=0)
    return lock


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _hist_records(rec, step):
    out = []
    for layer, heads in enumerate(rec["hists"]):
        for head, counts in heads.items():
            out.append(LeafHistogramRecord(layer=layer, head=int(head),
                                           step=step, counts=counts))
    return out


def cmd_train(args):
    if args.config is None or args.out is None:
        raise ShapeError("train needs --config and --out")
    _require_f64(args)
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.model.seed = cfg.seed
    ts = cfg.train

    def settings(total):
        return M.AdamSettings(lr=ts.lr, beta1=ts.beta1, beta2=ts.beta2, eps=ts.eps,
                              weight_decay=ts.weight_decay, warmup=ts.warmup,
                              total=total, clip=ts.clip)

    def data_fn(step):
        rng = substream(cfg.seed, "data", step)
        return dlib.make_batch(cfg.task, rng, ts.batch_size, cfg.model.n,
                               cfg.model.vocab, mask_rate=ts.mask_rate)

    lock = _locked(args.out)
    try:
        state = M.TrainState(model=M.build_model(cfg.model), opt=settings(ts.steps))
        records = []
        for step in range(ts.steps):
            want_hists = step % ts.log_every == 0 or step == ts.steps - 1
            records.append(M.train_step(state, data_fn(step),
                                        collect_hists=want_hists))
        if cfg.bootstrap is not None:
            b = cfg.bootstrap
            schedule = bs.make_schedule(cfg.model.L, b.w, b.h_s, b.h_f, b.budget)
            with open(os.path.join(args.out, "schedule.txt"), "w") as fh:
                fh.write(bs.schedule_table(schedule) + "\n")
            # flat LR for the conversion phase: a decay-to-zero tail would
            # starve exactly the stages that have the most left to learn
            state = M.TrainState(model=state.model, opt=settings(ts.warmup))
            state, boot_records = bs.run_schedule(state, schedule, data_fn,
                                                  variant=b.variant,
                                                  branching=b.branching, tau=b.tau,
                                                  rng_seed=cfg.seed,
                                                  out_dir=args.out,
                                                  collect_hists=True)
            records.extend(boot_records)
        hist_rows = []
        for gi, rec in enumerate(records, start=1):
            rec["index"] = gi
            if "hists" not in rec:
                continue
            if (gi - 1) % ts.log_every != 0 and gi != len(records):
                continue
            for hr in _hist_records(rec, gi):
                hr.validate(cfg.model.n, ts.batch_size)
                hist_rows.append(dataclasses.asdict(hr))
        _write_jsonl(os.path.join(args.out, "metrics.jsonl"),
                     [{k: v for k, v in rec.items() if k != "hists"}
                      for rec in records])
        _write_jsonl(os.path.join(args.out, "leaf_hists.jsonl"), hist_rows)
        M.save_checkpoint(os.path.join(args.out, "final.npz"), state)
        summary = {"steps": len(records), "out": args.out,
                   "final_loss": records[-1]["loss"], "final_acc": records[-1]["acc"]}
        print(json.dumps(summary))
        return 0
    except M.TrainAbort as e:
        print(json.dumps({"aborted": str(e), "group": e.group}))
        return 2
    finally:
        lock.release()


def cmd_bench(args):
    if args.out is None:
        raise ShapeError("bench needs --out")
    settings = BenchSettings()
    if args.config is not None:
        cfg = load_run_config(args.config)
        if cfg.bench is None:
            raise ShapeError("bench: config has no bench section")
        settings = cfg.bench
    if args.seed is not None:
        settings.seed = args.seed
    dtype = np.float64 if args.precision == 64 else np.float32
    lock = _locked(args.out)
    try:
        rows = []
        for n in settings.ns:
            for variant in settings.variants:
                rep = costing.bench_report(variant, n, settings.d, settings.heads,
                                           settings.h, settings.repetitions,
                                           seed=settings.seed, dtype=dtype)
                rows.append(rep)
                print(f"{variant:>5}  n={n:<6} median {rep.median_ms:9.3f} ms  "
                      f"iqr {rep.iqr_ms:.3f} ms")
        path = os.path.join(args.out, "costs.csv")
        costing.write_cost_csv(path, rows)
        print(f"wrote {path}")
        return 0
    finally:
        lock.release()


def cmd_verify(args):
    _require_f64(args)
    report = vlib.run_checks(args.check)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verify.json"), "w") as fh:
            fh.write(text + "\n")
    return 0 if report["passed"] else 1


def cmd_inspect(args):
    _require_f64(args)
    path = args.checkpoint
    if path is None:
        if args.out is None:
            raise ShapeError("inspect needs a checkpoint path or --out")
        path = os.path.join(args.out, "final.npz")
    state = M.load_checkpoint(path)
    cfg = state.model.config
    rng = substream(cfg.seed if args.seed is None else args.seed, "data", 0)
    batch = dlib.make_batch("masked-copy", rng, 1, cfg.n, cfg.vocab)
    diags = [att.DiagSink() for _ in range(cfg.L)]
    M.forward(state.model, batch, diags=diags)
    layers = []
    for i, spec in enumerate(state.model.specs):
        entry = {"variant": spec.variant}
        if spec.variant != "full":
            entry["heads"] = []
            for head, tree in enumerate(spec.trees):
                info = {"height": tree.height, "branching": tree.branching,
                        "leaf_counts": diags[i].hists[head].tolist()}
                if spec.alpha is not None:
                    info["level_weights"] = spec.alpha[head].data.tolist()
                entry["heads"].append(info)
            entry["frozen"] = spec.trees_frozen
            entry["empty_leaf_queries"] = diags[i].empty_leaf
        layers.append(entry)
    print(json.dumps({"checkpoint": path, "step": state.step,
                      "model": M.config_to_dict(cfg), "layers": layers}, indent=2))
    return 0


COMMANDS = {"train": cmd_train, "bench": cmd_bench,
            "verify": cmd_verify, "inspect": cmd_inspect}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Timeout:
        return _fail(f"another run holds the lock in {args.out}", code=3)
    except (ShapeError, NumericError, TreeFormatError, FileNotFoundError) as e:
        return _fail(e)


if __name__ == "__main__":
    sys.exit(main())
