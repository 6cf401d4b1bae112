import json
import os

import numpy as np
import pytest
from filelock import FileLock

import treeattn.cli as cli
import treeattn.config as cfglib
import treeattn.model as M
import treeattn.verify as vlib
from treeattn.tensor import ShapeError


def tiny_run_config(**over):
    doc = {
        "task": "masked-copy",
        "seed": 0,
        "model": {
            "d": 16, "heads": 2, "ffn": 32, "vocab": 12, "n": 16,
            "layers": [
                {"variant": "full"},
                {"variant": "tf", "height": 2},
            ],
        },
        "train": {"batch_size": 2, "steps": 6, "lr": 1e-3, "warmup": 1,
                  "log_every": 2},
    }
    doc.update(over)
    return doc


def write_config(tmp_path, doc):
    path = os.path.join(tmp_path, "run.json")
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


class TestRunConfig:
    def test_round_trip_is_identity(self):
        cfg = cfglib.run_config_from_dict(tiny_run_config(
            bootstrap={"w": 1, "h_s": 0, "h_f": 2, "budget": 40},
            bench={"variants": ["full"], "ns": [64], "d": 16, "heads": 2,
                   "h": 2, "repetitions": 3}))
        back = cfglib.run_config_from_dict(cfglib.run_config_to_dict(cfg))
        assert back == cfg

    def test_unknown_top_level_field_is_named(self):
        with pytest.raises(ShapeError, match="unknown field sede"):
            cfglib.run_config_from_dict({"sede": 1})

    def test_unknown_model_field_is_named(self):
        doc = tiny_run_config()
        doc["model"]["head_count"] = 4
        with pytest.raises(ShapeError, match="unknown field model.head_count"):
            cfglib.run_config_from_dict(doc)

    def test_unknown_layer_field_is_named(self):
        doc = tiny_run_config()
        doc["model"]["layers"][1]["hieght"] = 3
        with pytest.raises(ShapeError, match=r"model.layers\[1\].hieght"):
            cfglib.run_config_from_dict(doc)

    def test_unknown_bootstrap_field_is_named(self):
        doc = tiny_run_config(bootstrap={"w": 1, "h_s": 0, "h_f": 2,
                                         "budget": 10, "hs": 1})
        with pytest.raises(ShapeError, match="bootstrap.hs"):
            cfglib.run_config_from_dict(doc)

    def test_unknown_task_rejected(self):
        with pytest.raises(ShapeError, match="unknown task"):
            cfglib.run_config_from_dict(tiny_run_config(task="span-corrupt"))

    def test_file_round_trip(self, tmp_path):
        cfg = cfglib.run_config_from_dict(tiny_run_config())
        path = os.path.join(tmp_path, "cfg.json")
        cfglib.save_run_config(path, cfg)
        assert cfglib.load_run_config(path) == cfg

    def test_malformed_json_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "bad.json")
        with open(path, "w") as fh:
            fh.write("{not json")
        with pytest.raises(ShapeError, match="not valid JSON"):
            cfglib.load_run_config(path)


class TestVerifyRegistry:
    def test_all_checks_pass(self):
        report = vlib.run_checks()
        failed = [c["name"] for c in report["checks"] if not c["passed"]]
        assert report["passed"], f"failing checks: {failed}"
        assert len(report["checks"]) == len(vlib.CHECKS)

    def test_single_check_selection(self):
        report = vlib.run_checks(["tree.partition-disjoint-union"])
        assert report["passed"]
        assert [c["name"] for c in report["checks"]] == ["tree.partition-disjoint-union"]

    def test_unknown_check_fails_the_report(self):
        report = vlib.run_checks(["no.such.check"])
        assert not report["passed"]

    def test_injected_failure_reaches_the_report(self):
        def broken():
            raise AssertionError("intentional")
        vlib.CHECKS["tmp.broken"] = broken
        try:
            report = vlib.run_checks(["tmp.broken"])
            assert not report["passed"]
            assert "intentional" in report["checks"][0]["detail"]
        finally:
            del vlib.CHECKS["tmp.broken"]


class TestHistogramRecord:
    def test_valid_record_passes(self):
        rec = cli.LeafHistogramRecord(layer=0, head=1, step=5, counts=[20, 12])
        assert rec.validate(16, 2) is rec

    def test_wrong_total_rejected(self):
        rec = cli.LeafHistogramRecord(layer=0, head=0, step=1, counts=[3, 4])
        with pytest.raises(ShapeError, match="counts sum to 7"):
            rec.validate(16, 2)


class TestCliTrain:
    def test_train_writes_all_artifacts(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_run_config())
        out = os.path.join(tmp_path, "run")
        assert cli.main(["train", "--config", cfg_path, "--out", out]) == 0
        with open(os.path.join(out, "metrics.jsonl")) as fh:
            metrics = [json.loads(line) for line in fh]
        assert [m["step"] for m in metrics] == [1, 2, 3, 4, 5, 6]
        assert all(np.isfinite(m["loss"]) for m in metrics)
        with open(os.path.join(out, "leaf_hists.jsonl")) as fh:
            hists = [json.loads(line) for line in fh]
        assert sorted({h["step"] for h in hists}) == [1, 3, 5, 6]
        assert all(h["layer"] == 1 for h in hists)
        assert all(sum(h["counts"]) == 16 * 2 for h in hists)
        state = M.load_checkpoint(os.path.join(out, "final.npz"))
        assert state.step == 6

    def test_train_is_deterministic(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_run_config())
        out1 = os.path.join(tmp_path, "a")
        out2 = os.path.join(tmp_path, "b")
        assert cli.main(["train", "--config", cfg_path, "--out", out1]) == 0
        assert cli.main(["train", "--config", cfg_path, "--out", out2]) == 0
        with open(os.path.join(out1, "metrics.jsonl")) as fh:
            first = fh.read()
        with open(os.path.join(out2, "metrics.jsonl")) as fh:
            second = fh.read()
        assert first == second

    def test_seed_flag_changes_the_run(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_run_config())
        out1 = os.path.join(tmp_path, "a")
        out2 = os.path.join(tmp_path, "b")
        assert cli.main(["train", "--config", cfg_path, "--out", out1]) == 0
        assert cli.main(["train", "--config", cfg_path, "--out", out2,
                         "--seed", "7"]) == 0
        with open(os.path.join(out1, "metrics.jsonl")) as fh:
            first = [json.loads(line)["loss"] for line in fh]
        with open(os.path.join(out2, "metrics.jsonl")) as fh:
            second = [json.loads(line)["loss"] for line in fh]
        assert first != second

    def test_bootstrap_train_run(self, tmp_path):
        doc = tiny_run_config(bootstrap={"w": 1, "h_s": 0, "h_f": 1, "budget": 4})
        doc["model"]["layers"] = [{"variant": "full"}]
        doc["train"]["steps"] = 2
        cfg_path = write_config(tmp_path, doc)
        out = os.path.join(tmp_path, "run")
        assert cli.main(["train", "--config", cfg_path, "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "schedule.txt"))
        assert os.path.exists(os.path.join(out, "stage01.npz"))
        with open(os.path.join(out, "metrics.jsonl")) as fh:
            metrics = [json.loads(line) for line in fh]
        assert [m["index"] for m in metrics] == [1, 2, 3, 4, 5, 6]
        assert [m.get("stage") for m in metrics] == [None, None, 1, 1, 1, 1]
        state = M.load_checkpoint(os.path.join(out, "final.npz"))
        assert state.model.specs[0].variant == "tf"
        assert state.model.specs[0].trees[0].height == 1

    def test_float32_training_rejected(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_run_config())
        out = os.path.join(tmp_path, "run")
        assert cli.main(["train", "--config", cfg_path, "--out", out,
                         "--precision", "32"]) == 2
        assert "float64" in capsys.readouterr().err

    def test_missing_flags_rejected(self, capsys):
        assert cli.main(["train"]) == 2
        assert "needs --config" in capsys.readouterr().err

    def test_lock_excludes_second_run(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_run_config())
        out = os.path.join(tmp_path, "run")
        os.makedirs(out)
        lock = FileLock(os.path.join(out, cli.LOCK_NAME))
        with lock:
            assert cli.main(["train", "--config", cfg_path, "--out", out]) == 3
        assert "lock" in capsys.readouterr().err


class TestCliBench:
    def test_bench_writes_cost_table(self, tmp_path):
        doc = tiny_run_config(bench={"variants": ["full", "tf"], "ns": [64, 128],
                                     "d": 16, "heads": 2, "h": 2,
                                     "repetitions": 3})
        cfg_path = write_config(tmp_path, doc)
        out = os.path.join(tmp_path, "bench")
        assert cli.main(["bench", "--config", cfg_path, "--out", out]) == 0
        with open(os.path.join(out, "costs.csv")) as fh:
            lines = fh.read().strip().splitlines()
        assert lines[0] == "variant,n,d,h,analytic,counted,median_ms,iqr_ms,skew"
        assert len(lines) == 5

    def test_bench_without_section_rejected(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_run_config())
        out = os.path.join(tmp_path, "bench")
        assert cli.main(["bench", "--config", cfg_path, "--out", out]) == 2
        assert "no bench section" in capsys.readouterr().err


class TestCliVerify:
    def test_verify_passes_and_writes_report(self, tmp_path, capsys):
        out = os.path.join(tmp_path, "v")
        assert cli.main(["verify", "--out", out]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["passed"]
        with open(os.path.join(out, "verify.json")) as fh:
            assert json.load(fh) == report

    def test_verify_nonzero_exit_on_failure(self, capsys):
        def broken():
            raise AssertionError("intentional")
        vlib.CHECKS["tmp.broken"] = broken
        try:
            assert cli.main(["verify", "--check", "tmp.broken"]) == 1
        finally:
            del vlib.CHECKS["tmp.broken"]
        report = json.loads(capsys.readouterr().out)
        assert not report["passed"]


class TestCliInspect:
    def test_inspect_reports_tree_state(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_run_config())
        out = os.path.join(tmp_path, "run")
        assert cli.main(["train", "--config", cfg_path, "--out", out]) == 0
        capsys.readouterr()
        assert cli.main(["inspect", os.path.join(out, "final.npz")]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["step"] == 6
        assert doc["layers"][0] == {"variant": "full"}
        head = doc["layers"][1]["heads"][0]
        assert head["height"] == 2
        assert sum(head["leaf_counts"]) == 16
        assert cli.main(["inspect", "--out", out]) == 0

    def test_missing_checkpoint_fails_cleanly(self, tmp_path, capsys):
        missing = os.path.join(tmp_path, "none.npz")
        assert cli.main(["inspect", missing]) == 2
        assert capsys.readouterr().err.startswith("error:")
