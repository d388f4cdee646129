"""CLI surface: exit codes, file outputs, config handling, determinism."""

import json
import os

import numpy as np
import pytest

from condflow.cli import main
from condflow.config import load_run_config
from condflow.errors import ConfigError
from condflow.training import load_checkpoint


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    """One small trained synth model shared by the read-only CLI tests."""
    out = tmp_path_factory.mktemp("synth_run")
    code = main(["train", "--preset", "synth", "--out", str(out),
                 "--max-steps", "250", "--seed", "11"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def shapes_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("shapes_run")
    cfg = {
        "task": "toyshapes",
        "model": {"size": 16, "blocks_per_stage": [1, 1], "hidden_ch": 4,
                  "cond_ch": 2, "encoder_ch": 4, "seed": 1},
        "train": {"max_steps": 10, "batch_size": 4, "seed": 1},
        "data": {"n_pool": 16, "pool_seed": 5},
    }
    cfg_path = out / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    code = main(["train", "--config", str(cfg_path), "--out", str(out)])
    assert code == 0
    return out


class TestTrain:
    def test_outputs_present(self, synth_run):
        for name in ("config.json", "loss.csv", "loss.png", "checkpoint.cinn"):
            assert os.path.exists(synth_run / name), name

    def test_effective_config_echoed(self, synth_run):
        cfg = json.loads((synth_run / "config.json").read_text())
        assert cfg["task"] == "synth"
        assert cfg["train"]["max_steps"] == 250
        assert cfg["train"]["seed"] == 11

    def test_invalid_key_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"task": "synth", "bogus": 1}))
        assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2

    def test_unknown_preset_exit_2(self, tmp_path):
        assert main(["train", "--preset", "synth", "--out", str(tmp_path),
                     "--max-steps", "-5"]) == 2

    def test_missing_data_exit_3(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "task": "mnist",
            "train": {"max_steps": 1},
            "data": {"allow_synthetic": False},
        }))
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"),
                     "--data-dir", str(tmp_path / "nodata")])
        assert code == 3

    def test_no_clamp_recorded_in_checkpoint(self, tmp_path):
        out = tmp_path / "run"
        code = main(["train", "--preset", "synth", "--out", str(out),
                     "--max-steps", "5", "--no-clamp"])
        assert code == 0
        state = load_checkpoint(str(out / "checkpoint.cinn"))
        assert state.config.clamp is False
        run = state.model.meta["run"]
        assert run["train"]["clamp"] is False
        assert all(not b.clamp for b in state.model.graph.coupling_blocks)


class TestSample:
    def test_synth_samples_csv(self, synth_run, tmp_path):
        out = tmp_path / "samples"
        code = main(["sample", str(synth_run / "checkpoint.cinn"),
                     "--out", str(out), "--n", "3", "--seed", "4"])
        assert code == 0
        rows = open(out / "samples.csv").read().strip().splitlines()
        assert rows[0] == "condition,x0,x1"
        assert len(rows) == 1 + 3 * 4

    def test_n_zero_success_no_samples(self, synth_run, tmp_path):
        out = tmp_path / "empty"
        code = main(["sample", str(synth_run / "checkpoint.cinn"),
                     "--out", str(out), "--n", "0"])
        assert code == 0
        assert not os.path.exists(out / "samples.npy")

    def test_beta_zero_seed_invariant(self, synth_run, tmp_path):
        outs = []
        for seed in (1, 2):
            out = tmp_path / f"b{seed}"
            assert main(["sample", str(synth_run / "checkpoint.cinn"),
                         "--out", str(out), "--n", "2", "--beta", "0",
                         "--seed", str(seed)]) == 0
            outs.append(np.load(out / "samples.npy"))
        assert np.allclose(outs[0], outs[1])

    def test_shared_z_rows(self, synth_run, tmp_path):
        out = tmp_path / "shared"
        assert main(["sample", str(synth_run / "checkpoint.cinn"),
                     "--out", str(out), "--n", "2", "--shared-z"]) == 0
        samples = np.load(out / "samples.npy")
        assert samples.shape[:2] == (2, 4)

    def test_bad_condition_exit_2(self, synth_run, tmp_path):
        assert main(["sample", str(synth_run / "checkpoint.cinn"),
                     "--out", str(tmp_path / "x"), "--conditions", "9"]) == 2

    def test_missing_checkpoint_exit_5(self, tmp_path):
        assert main(["sample", str(tmp_path / "nope.cinn"),
                     "--out", str(tmp_path / "o")]) == 5

    def test_toyshapes_sheet(self, shapes_run, tmp_path):
        out = tmp_path / "sheet"
        code = main(["sample", str(shapes_run / "checkpoint.cinn"),
                     "--out", str(out), "--n", "2", "--conditions", "0,1"])
        assert code == 0
        assert os.path.exists(out / "samples.png")
        assert os.path.exists(out / "samples.npy")


class TestEncodeTransferEvalPca:
    def test_encode_writes_latents(self, synth_run, tmp_path):
        out = tmp_path / "enc"
        assert main(["encode", str(synth_run / "checkpoint.cinn"),
                     "--out", str(out), "--n", "64"]) == 0
        z = np.load(out / "latents.npy")
        assert z.shape == (64, 2)

    def test_transfer_runs(self, synth_run, tmp_path):
        out = tmp_path / "tr"
        assert main(["transfer", str(synth_run / "checkpoint.cinn"),
                     "--out", str(out), "--index", "1"]) == 0
        t = np.load(out / "transfer.npy")
        assert t.shape == (4, 2)

    def test_eval_json_deterministic(self, synth_run, tmp_path):
        reports = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert main(["eval", str(synth_run / "checkpoint.cinn"),
                         "--out", str(out), "--n", "32", "--seed", "7"]) == 0
            reports.append((out / "report.json").read_text())
        assert reports[0] == reports[1]
        body = json.loads(reports[0])
        assert body["task"] == "synth"
        assert body["k"] == 8
        assert body["nll_per_dim"] is not None

    def test_eval_metric_mismatch_exit_2(self, synth_run, tmp_path):
        assert main(["eval", str(synth_run / "checkpoint.cinn"),
                     "--out", str(tmp_path / "m"), "--metric", "mse"]) == 2

    def test_eval_toyshapes_diversity(self, shapes_run, tmp_path):
        out = tmp_path / "ev"
        assert main(["eval", str(shapes_run / "checkpoint.cinn"),
                     "--out", str(out), "--n", "4", "--k", "3"]) == 0
        body = json.loads((out / "report.json").read_text())
        assert body["best_of_k_mse"] is not None
        assert body["pixel_variance"] is not None
        assert os.path.exists(out / "diversity.png")

    def test_pca_outputs(self, synth_run, tmp_path):
        out = tmp_path / "pca"
        assert main(["pca", str(synth_run / "checkpoint.cinn"),
                     "--out", str(out), "--n", "128", "--axes", "2"]) == 0
        comps = np.load(out / "components.npy")
        assert comps.shape == (2, 2)
        lines = open(out / "explained_variance.csv").read().strip().splitlines()
        assert lines[0] == "component,variance,fraction"
        assert os.path.exists(out / "explained_variance.png")


class TestConfigLayer:
    def test_preset_plus_overrides(self):
        run = load_run_config("synth", None, {"train": {"max_steps": 7}})
        assert run.train.max_steps == 7
        assert run.model["dim"] == 2

    def test_mnist_preset_matches_reference_setup(self):
        # 24 fully connected blocks, one-hot conditions, sigma = 0.02
        from condflow.cli import model_from_run

        run = load_run_config("mnist", None, None)
        assert run.model["n_blocks"] == 24
        assert run.train.sigma_noise == 0.02
        model = model_from_run(run)
        assert len(model.graph.coupling_blocks) == 24
        assert model.stack.encoder is None
        assert model.stack.output_specs[0] == (10,)
        assert model.meta["run"]["train"]["sigma_noise"] == 0.02

    def test_toyshapes_preset_noise(self):
        run = load_run_config("toyshapes", None, None)
        assert run.train.sigma_noise == 0.05

    def test_echoed_config_reloads(self, synth_run):
        run = load_run_config(None, str(synth_run / "config.json"), None)
        assert run.task == "synth"
        assert run.train.max_steps == 250

    def test_unknown_train_key(self):
        with pytest.raises(ConfigError):
            load_run_config("synth", None, {"train": {"warp_speed": 9}})

    def test_unknown_model_key(self):
        with pytest.raises(ConfigError):
            load_run_config("synth", None, {"model": {"n_heads": 2}})

    def test_requires_task(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"max_steps": 1}}))
        with pytest.raises(ConfigError):
            load_run_config(None, str(cfg), None)

    def test_ablation_switch_reaches_model_section(self):
        run = load_run_config("toyshapes", None, {"train": {"haar": False}})
        assert run.model["use_haar"] is False
