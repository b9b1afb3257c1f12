"""End-to-end command-line runs: artifacts, determinism, exit codes."""

import json
import os

import numpy as np
import pytest

from balancerec.cli import main


def base_config(**over):
    cfg = {
        "schema_version": 1,
        "data": {"synth": {"num_users": 30, "num_items": 10, "list_len": 3,
                           "uniform_test_len": 3, "seed": 0}},
        "model": {"embed_dim": 4, "conf_dim": 2},
        "train": {"epochs": 2, "batch_size": 32, "patience": 99},
        "methods": ["base"],
        "seeds": [0],
    }
    cfg.update(over)
    return cfg


def write_config(tmp_path, name="config.json", **over):
    path = tmp_path / name
    path.write_text(json.dumps(base_config(**over)))
    return str(path)


class TestTrain:
    def test_artifacts_and_byte_identical_rerun(self, tmp_path):
        cfg = write_config(tmp_path, methods=["base", "cbr_adv"], seeds=[0, 1])
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["train", "--config", cfg, "--out", out1]) == 0
        assert main(["train", "--config", cfg, "--out", out2]) == 0
        for stem in ("base_seed0", "base_seed1", "cbr_adv_seed0", "cbr_adv_seed1"):
            for suffix in ("_log.csv", "_report.json", "_checkpoint.json"):
                assert os.path.exists(os.path.join(out1, stem + suffix))
        assert os.path.exists(os.path.join(out1, "config.json"))
        assert os.path.exists(os.path.join(out1, "training_curves.png"))
        with open(os.path.join(out1, "aggregate.json"), "rb") as fh:
            first = fh.read()
        with open(os.path.join(out2, "aggregate.json"), "rb") as fh:
            assert fh.read() == first

    def test_aggregate_shape(self, tmp_path):
        cfg = write_config(tmp_path, methods=["base", "ips"], seeds=[0, 1, 2])
        out = str(tmp_path / "out")
        assert main(["train", "--config", cfg, "--out", out]) == 0
        agg = json.load(open(os.path.join(out, "aggregate.json")))
        assert agg["num_seeds"] == 3
        assert set(agg["metrics"]) == {"base", "ips"}
        for stats in agg["metrics"].values():
            for key in ("acc", "auc", "ndcg_at_10", "recall_at_10"):
                assert np.isfinite(stats[key]["mean"])
                assert np.isfinite(stats[key]["stderr"])

    def test_seed_override(self, tmp_path):
        cfg = write_config(tmp_path, seeds=[0, 1, 2])
        out = str(tmp_path / "out")
        assert main(["train", "--config", cfg, "--out", out, "--seeds", "5"]) == 0
        assert os.path.exists(os.path.join(out, "base_seed5_report.json"))
        assert not os.path.exists(os.path.join(out, "base_seed0_report.json"))
        agg = json.load(open(os.path.join(out, "aggregate.json")))
        assert agg["num_seeds"] == 1

    def test_paths_data_source(self, tmp_path):
        cfg_synth = write_config(tmp_path, "synth_config.json")
        data_dir = str(tmp_path / "data")
        assert main(["synth", "--config", cfg_synth, "--out", data_dir]) == 0
        paths = {k: os.path.join(data_dir, f"synth.{k}")
                 for k in ("train", "val", "test")}
        cfg = write_config(tmp_path, "paths_config.json",
                           data={"paths": paths}, methods=["cbr_conf"])
        out = str(tmp_path / "out")
        assert main(["train", "--config", cfg, "--out", out]) == 0
        rep = json.load(open(os.path.join(out, "cbr_conf_seed0_report.json")))
        assert 0.0 <= rep["auc"] <= 1.0


class TestSweep:
    def test_curves_rows_sorted_and_parsable(self, tmp_path):
        cfg = write_config(tmp_path, methods=["cbr_clip", "base"], seeds=[0, 1],
                           sweep={"parameter": "gamma", "values": [0.0, 0.1]})
        out = str(tmp_path / "out")
        assert main(["sweep", "--config", cfg, "--out", out]) == 0
        lines = open(os.path.join(out, "curves.csv")).read().splitlines()
        assert lines[0] == "param_value,method,metric,mean,stderr"
        rows = [ln.split(",") for ln in lines[1:]]
        assert len(rows) == 2 * 2 * 4  # values x methods x metrics
        keys = [(float(r[0]), r[1], r[2]) for r in rows]
        assert keys == sorted(keys)
        for r in rows:
            float(r[3]), float(r[4])
        for metric in ("acc", "auc", "ndcg_at_10", "recall_at_10"):
            assert os.path.exists(os.path.join(out, f"curves_{metric}.png"))


class TestGrid:
    def test_best_json_and_tiebreak(self, tmp_path):
        # k2 is inert for the plain method, so both points tie and the
        # first one in enumeration order must win
        cfg = write_config(tmp_path, grids={"loss.k2": [7, 9]})
        out = str(tmp_path / "out")
        assert main(["grid", "--config", cfg, "--out", out]) == 0
        lines = open(os.path.join(out, "grid_results.csv")).read().splitlines()
        assert lines[0] == "loss.k2,val_score"
        assert len(lines) == 3
        best = json.load(open(os.path.join(out, "best.json")))
        assert best["grid_point"] == {"loss.k2": 7}
        assert best["config"]["loss"]["k2"] == 7
        assert set(best["test_metrics"]) == {"acc", "auc", "ndcg_at_10", "recall_at_10"}
        assert np.isfinite(best["validation_score"])


class TestSynthEval:
    def test_synth_exports_and_eval_scores(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        data_dir = str(tmp_path / "data")
        assert main(["synth", "--config", cfg, "--out", data_dir]) == 0
        for suffix in ("train", "val", "test"):
            assert os.path.exists(os.path.join(data_dir, f"synth.{suffix}"))
        meta = json.load(open(os.path.join(data_dir, "meta.json")))
        assert meta["num_users"] == 30 and meta["num_items"] == 10

        train_out = str(tmp_path / "run")
        assert main(["train", "--config", cfg, "--out", train_out]) == 0
        capsys.readouterr()
        rc = main(["eval",
                   "--checkpoint", os.path.join(train_out, "base_seed0_checkpoint.json"),
                   "--test", os.path.join(data_dir, "synth.test"),
                   "--train", os.path.join(data_dir, "synth.train"),
                   "--out", str(tmp_path / "eval")])
        assert rc == 0
        printed = json.loads(capsys.readouterr().out)
        on_disk = json.load(open(tmp_path / "eval" / "report.json"))
        assert printed == on_disk
        assert 0.0 <= printed["auc"] <= 1.0

    def test_eval_with_confounder_flag(self, tmp_path, capsys):
        cfg = write_config(tmp_path, methods=["cbr_conf"])
        out = str(tmp_path / "run")
        data_dir = str(tmp_path / "data")
        assert main(["synth", "--config", cfg, "--out", data_dir]) == 0
        assert main(["train", "--config", cfg, "--out", out]) == 0
        capsys.readouterr()
        rc = main(["eval",
                   "--checkpoint", os.path.join(out, "cbr_conf_seed0_checkpoint.json"),
                   "--test", os.path.join(data_dir, "synth.test"),
                   "--train", os.path.join(data_dir, "synth.train"),
                   "--use-confounder"])
        assert rc == 0
        assert "auc" in json.loads(capsys.readouterr().out)


class TestExitCodes:
    def test_missing_config_is_config_error(self, tmp_path, capsys):
        rc = main(["train", "--config", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "out")])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(dict(base_config(), extra_block=1)))
        rc = main(["train", "--config", str(path), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "extra_block" in capsys.readouterr().err

    def test_malformed_seed_override(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        rc = main(["train", "--config", cfg, "--out", str(tmp_path / "o"),
                   "--seeds", "1,x"])
        assert rc == 2
        assert "seeds" in capsys.readouterr().err

    def test_divergence_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path,
                           train={"epochs": 4, "batch_size": 32, "patience": 99,
                                  "optimizer": "sgd", "lr_gen": 1e12,
                                  "grad_clip": 1e300},
                           loss={"lambda_f": 10.0})
        with np.errstate(over="ignore", invalid="ignore"):
            rc = main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 3
        assert "runtime failure" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()
