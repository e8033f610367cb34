"""End-to-end command-line runs against tiny trainings."""

import json

import numpy as np
import pytest

from protolab.agent import load_checkpoint
from protolab.cli import (ExperimentConfig, SweepSpec, _agent_seed,
                          experiment_config_from_dict, main)
from protolab.errors import TrainingDivergedError
from protolab.training import TrainConfig

TINY = {"epochs": 2, "steps_per_epoch": 2, "batch_size": 8, "eval_games": 16}


def write_config(path, **overrides):
    payload = {"name": "tiny", "n_agents": 2, "master_seed": 5,
               "train": dict(TINY)}
    payload.update(overrides)
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    cfg = write_config(out / "cfg.json")
    assert main(["train", "--config", str(cfg), "--out", str(out / "run")]) == 0
    return out / "run"


class TestTrain:
    def test_artifacts(self, trained_dir):
        for name in ("config.json", "agent_00.ckpt", "agent_01.ckpt",
                     "history_00.csv", "history_01.csv", "manifest.json"):
            assert (trained_dir / name).exists()
        manifest = json.loads((trained_dir / "manifest.json").read_text())
        paths = {a["path"] for a in manifest["artifacts"]}
        assert {"config.json", "agent_00.ckpt", "history_00.csv"} <= paths
        assert "config_digest" in manifest

    def test_checkpoint_metadata(self, trained_dir):
        params, meta = load_checkpoint(trained_dir / "agent_00.ckpt")
        assert meta["seed"] == _agent_seed(5, 0, 0)
        assert meta["train"]["epochs"] == 2
        assert params.config.vocab == 5

    def test_history_rows(self, trained_dir):
        lines = (trained_dir / "history_00.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # header + one row per epoch

    def test_flag_overrides(self, tmp_path):
        out = tmp_path / "run"
        cfg = write_config(tmp_path / "cfg.json")
        assert main(["train", "--config", str(cfg), "--out", str(out),
                     "--agents", "1", "--epochs", "1",
                     "--loss-set", "sic_tm_pd", "--master-seed", "9"]) == 0
        saved = json.loads((out / "config.json").read_text())
        assert saved["n_agents"] == 1
        assert saved["master_seed"] == 9
        assert saved["train"]["epochs"] == 1
        assert saved["train"]["loss_set"] == "sic_tm_pd"
        assert not (out / "agent_01.ckpt").exists()

    def test_sweep_layout(self, tmp_path):
        out = tmp_path / "sweep"
        cfg = write_config(tmp_path / "cfg.json",
                           sweep={"parameter": "mutation_probability",
                                  "values": [0.0, 0.5], "agents_per_value": 1})
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "value_0" / "agent_00.ckpt").exists()
        assert (out / "value_0.5" / "agent_00.ckpt").exists()
        _, meta = load_checkpoint(out / "value_0.5" / "agent_00.ckpt")
        assert meta["train"]["mutation_probability"] == 0.5
        assert meta["train"]["mutation"] == "kind"

    def test_exit_2_on_bad_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        assert main(["train", "--config", str(bad),
                     "--out", str(tmp_path / "x")]) == 2

    def test_exit_2_on_unknown_keys(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", bogus=1)
        assert main(["train", "--config", str(cfg),
                     "--out", str(tmp_path / "x")]) == 2
        cfg2 = write_config(tmp_path / "cfg2.json", train={"nope": 3})
        assert main(["train", "--config", str(cfg2),
                     "--out", str(tmp_path / "x")]) == 2

    def test_exit_2_on_bad_sweep(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json",
                           sweep={"parameter": "learning_rate", "values": [1]})
        assert main(["train", "--config", str(cfg),
                     "--out", str(tmp_path / "x")]) == 2

    def test_exit_3_on_divergence(self, tmp_path, monkeypatch):
        def explode(cfg, progress=None):
            raise TrainingDivergedError("loss went non-finite", epoch=0, step=1,
                                        history=[])

        monkeypatch.setattr("protolab.cli.train", explode)
        cfg = write_config(tmp_path / "cfg.json")
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 3
        assert (out / "history_00.partial.csv").exists()

    def test_exit_4_on_unwritable_out(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("", encoding="utf-8")
        cfg = write_config(tmp_path / "cfg.json")
        assert main(["train", "--config", str(cfg), "--out", str(blocker)]) == 4


class TestEval:
    def test_zcp(self, trained_dir, tmp_path):
        out = tmp_path / "eval"
        argv = ["eval", "--checkpoints", str(trained_dir), "--metric", "zcp",
                "--out", str(out), "--games", "10"]
        assert main(argv) == 0
        summary = json.loads((out / "zcp_summary.json").read_text())
        assert 0.0 <= summary["mean"] <= 1.0
        assert summary["n_agents"] == 2
        assert (out / "zcp.csv").exists()
        # a second run must not duplicate manifest entries
        assert main(argv) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["artifacts"]) == 2

    def test_responsiveness_and_diversity(self, trained_dir, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoints", str(trained_dir),
                     "--metric", "responsiveness", "--out", str(out),
                     "--episodes", "20"]) == 0
        lines = (out / "responsiveness.csv").read_text().strip().splitlines()
        assert lines[0] == "agent_id,R_S,mean_sic,R_T,mean_tm"
        assert len(lines) == 3
        assert main(["eval", "--checkpoints", str(trained_dir),
                     "--metric", "diversity", "--out", str(out),
                     "--episodes", "20"]) == 0
        assert (out / "diversity.csv").exists()

    def test_selfplay_uses_saved_train_config(self, trained_dir, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoints", str(trained_dir),
                     "--metric", "selfplay", "--out", str(out),
                     "--episodes", "20"]) == 0
        lines = (out / "selfplay.csv").read_text().strip().splitlines()
        assert len(lines) == 3

    def test_heatmap(self, trained_dir, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoints", str(trained_dir),
                     "--metric", "heatmap", "--out", str(out),
                     "--episodes", "15"]) == 0
        for name in ("heatmap_class_00.csv", "heatmap_timestep_00.csv",
                     "heatmap_class_01.csv"):
            assert (out / name).exists()

    def test_exit_2_on_empty_population(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["eval", "--checkpoints", str(empty), "--metric", "zcp",
                     "--out", str(tmp_path / "out")]) == 2


class TestCapacity:
    def test_report(self, tmp_path, capsys):
        out = tmp_path / "cap.json"
        assert main(["capacity", "--vocab", "5", "--classes", "3",
                     "--weights", "14", "--out", str(out)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["protocol_count"] == 60
        assert json.loads(out.read_text()) == printed

    def test_from_checkpoint(self, trained_dir, capsys):
        ckpt = trained_dir / "agent_00.ckpt"
        assert main(["capacity", "--vocab", "5", "--classes", "3",
                     "--checkpoint", str(ckpt)]) == 0
        printed = json.loads(capsys.readouterr().out)
        params, _ = load_checkpoint(ckpt)
        assert printed["network_bits"] == 32 * params.n_weights()

    def test_exit_2_without_weights(self):
        assert main(["capacity", "--vocab", "5", "--classes", "3"]) == 2


class TestAnalyze:
    def test_reports(self, trained_dir, tmp_path):
        out = tmp_path / "an"
        assert main(["analyze", "--checkpoints", str(trained_dir),
                     "--out", str(out), "--episodes", "100"]) == 0
        report = json.loads((out / "analysis_00.json").read_text())
        assert report["establishment"]["verdict"] in ("intra", "inter", "none")
        assert report["capacity"]["protocol_count"] == 60
        assert "class_symbol_mi" in report["signalling"]
        assert isinstance(report["listening"]["any_listening"], bool)
        assert (out / "trace_00.jsonl").exists()
        assert (out / "analysis_01.json").exists()


class TestFigures:
    def test_sweep_summaries_and_table(self, tmp_path):
        base_cfg = write_config(tmp_path / "base.json")
        assert main(["train", "--config", str(base_cfg),
                     "--out", str(tmp_path / "base")]) == 0
        mut_cfg = write_config(
            tmp_path / "mut.json",
            sweep={"parameter": "mutation_probability", "values": [0.3, 1.0],
                   "agents_per_value": 2})
        assert main(["train", "--config", str(mut_cfg),
                     "--out", str(tmp_path / "mut")]) == 0
        perm_cfg = write_config(
            tmp_path / "perm.json",
            sweep={"parameter": "permutation_subset", "values": [2, 5],
                   "agents_per_value": 2})
        assert main(["train", "--config", str(perm_cfg),
                     "--out", str(tmp_path / "perm")]) == 0

        out = tmp_path / "figs"
        assert main(["figures", "--baseline", str(tmp_path / "base"),
                     "--mutation-sweep", str(tmp_path / "mut"),
                     "--permutation-sweep", str(tmp_path / "perm"),
                     "--out", str(out), "--games", "8",
                     "--episodes", "20"]) == 0
        for name in ("figure-3a.csv", "figure-3b.csv", "figure-3c.csv",
                     "figure-3d.csv", "table1.csv"):
            assert (out / name).exists()
        lines = (out / "figure-3b.csv").read_text().strip().splitlines()
        assert lines[0] == ("x,zcp_mean,zcp_std,selfplay_mean,selfplay_std,"
                            "R_S,R_T,P_D,baseline")
        xs = [float(line.split(",")[0]) for line in lines[1:]]
        assert xs == [0.3, 1.0]
        table = (out / "table1.csv").read_text().strip().splitlines()
        assert table[0] == "setting,R_T,R_S,P_D,ZCP"
        assert [r.split(",")[0] for r in table[1:]] == [
            "baseline", "permutation_full", "mutation_0.3", "mutation_1"]


class TestConfigRoundTrip:
    def test_identity(self):
        cfg = ExperimentConfig(
            name="round", n_agents=4, master_seed=11,
            train=TrainConfig(loss_set="sic_tm_pd", mutation="kind",
                              mutation_probability=0.3, epochs=7),
            sweep=SweepSpec(parameter="permutation_subset", values=[2, 3],
                            agents_per_value=2))
        assert experiment_config_from_dict(cfg.to_dict()) == cfg

    def test_seed_splitting_is_stable_and_distinct(self):
        grid = {(vi, ai): _agent_seed(42, vi, ai)
                for vi in range(3) for ai in range(4)}
        assert len(set(grid.values())) == 12
        assert all(_agent_seed(42, vi, ai) == s for (vi, ai), s in grid.items())
        assert _agent_seed(43, 0, 0) != grid[(0, 0)]
