"""Config parsing, the experiment runner, plots, suite and CLI."""

import json

import numpy as np
import pytest
import yaml

from mmfedsim.cli import main as cli_main
from mmfedsim.client import TrainConfig
from mmfedsim.datagen import DatasetSpec
from mmfedsim.harness import (
    ExperimentConfig,
    apply_ablation,
    config_hash,
    emit_plots,
    parse_config,
    read_metrics,
    run_ablation_suite,
    run_experiment,
)
from mmfedsim.harness_errors import ConfigError
from mmfedsim.model import ModelConfig, load_flat_params


def _fast_cfg(out_dir, **kw):
    defaults = dict(
        n_clients=3, rounds=2, beta=0.4, partition="iid", n_train=90, n_test=30,
        out_dir=str(out_dir), master_seed=5,
        dataset=DatasetSpec(num_classes=3, latent_dim=4, grid_side=4, bins_per_dim=4),
        model=ModelConfig(d_enc=8, d_com=8, d_latent=8, self_heads=2, patch_side=2),
        train=TrainConfig(local_epochs=1, batch_size=8),
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "empty.yaml"
        p.write_text("")
        cfg = parse_config(p)
        assert cfg == ExperimentConfig()

    def test_no_file_gives_defaults(self):
        assert parse_config() == ExperimentConfig()

    def test_file_values_and_nested(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({
            "beta": 0.3,
            "rounds": 7,
            "dataset": {"num_classes": 4},
            "train": {"local_epochs": 2},
        }))
        cfg = parse_config(p)
        assert cfg.beta == 0.3 and cfg.rounds == 7
        assert cfg.dataset.num_classes == 4
        assert cfg.train.local_epochs == 2

    def test_flag_overrides_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("beta: 0.3\n")
        cfg = parse_config(p, overrides={"beta": 0.5})
        assert cfg.beta == 0.5

    def test_none_override_ignored(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("beta: 0.3\n")
        assert parse_config(p, overrides={"beta": None}).beta == 0.3

    def test_unknown_key_named(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("betaa: 0.3\n")
        with pytest.raises(ConfigError, match="betaa"):
            parse_config(p)

    def test_unknown_nested_key_named(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("dataset: {num_classe: 3}\n")
        with pytest.raises(ConfigError, match="num_classe"):
            parse_config(p)

    def test_out_of_range_names_key(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("beta: 1.5\n")
        with pytest.raises(ConfigError, match="beta"):
            parse_config(p)

    def test_non_mapping_root_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            parse_config(p)


class TestConfigHash:
    def test_out_dir_excluded(self, tmp_path):
        a = _fast_cfg(tmp_path / "a")
        b = _fast_cfg(tmp_path / "b")
        assert config_hash(a) == config_hash(b)

    def test_semantic_fields_included(self, tmp_path):
        a = _fast_cfg(tmp_path / "a")
        b = _fast_cfg(tmp_path / "a", beta=0.7)
        assert config_hash(a) != config_hash(b)

    def test_ablation_transform(self):
        cfg = ExperimentConfig(ablation="wo_mcm")
        assert apply_ablation(cfg).loss.mcm_scale == 0.0
        cfg = ExperimentConfig(ablation="wo_ram")
        assert apply_ablation(cfg).loss.ram_scale == 0.0


class TestRunExperiment:
    def test_outputs_and_round_count(self, tmp_path):
        res = run_experiment(_fast_cfg(tmp_path / "run"))
        rows = read_metrics(res.metrics_path)
        assert len(rows) == 2
        assert rows[0]["round"] == 0 and rows[1]["round"] == 1
        flat, h = load_flat_params(res.params_path)
        assert h == res.config_hash
        assert np.all(np.isfinite(flat))
        manifest = json.loads((res.metrics_path.parent / "manifest.json").read_text())
        assert manifest["config_hash"] == res.config_hash

    def test_equal_hash_identical_metrics(self, tmp_path):
        r1 = run_experiment(_fast_cfg(tmp_path / "r1"))
        r2 = run_experiment(_fast_cfg(tmp_path / "r2"))
        assert r1.config_hash == r2.config_hash
        assert r1.metrics_path.read_bytes() == r2.metrics_path.read_bytes()

    def test_zero_rounds(self, tmp_path):
        res = run_experiment(_fast_cfg(tmp_path / "zero", rounds=0))
        assert read_metrics(res.metrics_path) == []
        flat, _ = load_flat_params(res.params_path)
        from mmfedsim.model import flatten_params, init_params
        from mmfedsim.seeding import derive_seed
        import copy

        cfg = apply_ablation(_fast_cfg(tmp_path / "zero", rounds=0))
        spec = copy.deepcopy(cfg.dataset)
        spec.dataset_seed = derive_seed(cfg.master_seed, "dataset")
        expected = flatten_params(*init_params(spec, cfg.model, derive_seed(cfg.master_seed, "model")))
        np.testing.assert_array_equal(flat, expected)

    def test_wo_cka_gamma_exactly_uniform(self, tmp_path):
        res = run_experiment(_fast_cfg(tmp_path / "wocka", ablation="wo_cka"))
        for row in read_metrics(res.metrics_path):
            k = len(row["gamma"])
            assert row["gamma"] == [1.0 / k] * k

    def test_wo_mcm_zero_component(self, tmp_path):
        res = run_experiment(_fast_cfg(tmp_path / "womcm", ablation="wo_mcm"))
        for row in read_metrics(res.metrics_path):
            assert row["mean_losses"]["mcm"] == 0.0
            assert all(v["mcm"] == 0.0 for v in row["client_losses"].values())

    def test_per_client_losses_in_stream(self, tmp_path):
        res = run_experiment(_fast_cfg(tmp_path / "percl"))
        for row in read_metrics(res.metrics_path):
            assert set(row["client_losses"]) == {str(c) for c in row["sampled_clients"]}
            for v in row["client_losses"].values():
                assert set(v) == {"sup", "mcm", "ram", "total"}

    def test_wo_ram_zero_component(self, tmp_path):
        res = run_experiment(_fast_cfg(tmp_path / "woram", ablation="wo_ram"))
        for row in read_metrics(res.metrics_path):
            assert row["mean_losses"]["ram"] == 0.0

    def test_noniid_requires_enough_classes(self, tmp_path):
        cfg = _fast_cfg(tmp_path / "bad", partition="noniid", n_clients=5)
        with pytest.raises(ConfigError, match="num_classes"):
            run_experiment(cfg)

    def test_out_root_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MMFEDSIM_OUT_ROOT", str(tmp_path / "root"))
        res = run_experiment(_fast_cfg("rel_dir"))
        assert str(tmp_path / "root") in str(res.metrics_path)


class TestPlots:
    def test_emit_plots(self, tmp_path):
        res = run_experiment(_fast_cfg(tmp_path / "plotrun"))
        files = emit_plots(res.metrics_path, tmp_path / "figs")
        assert [f.name for f in files] == ["accuracy_vs_round.png", "gamma_heatmap.png"]
        assert all(f.exists() and f.stat().st_size > 0 for f in files)
        rows = read_metrics(res.metrics_path)
        gamma = np.array([r["gamma"] for r in rows])
        assert gamma.shape == (2, 3)  # rounds x K

    def test_single_round_plot(self, tmp_path):
        res = run_experiment(_fast_cfg(tmp_path / "single", rounds=1))
        files = emit_plots(res.metrics_path, tmp_path / "figs1")
        assert all(f.exists() for f in files)

    def test_malformed_metrics_line_number(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"round": 0}\nnot json\n')
        with pytest.raises(ValueError, match="line 2"):
            read_metrics(p)

    def test_empty_metrics_rejected(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        with pytest.raises(ValueError, match="no metrics rows"):
            emit_plots(p, tmp_path / "figs2")


class TestSuite:
    def test_rows_and_shared_upstream_hashes(self, tmp_path):
        base = _fast_cfg(tmp_path / "suitebase", rounds=1, n_train=60, n_test=20)
        summary = run_ablation_suite(base, seeds=[11, 12], out_dir=tmp_path / "suite")
        import csv

        with open(summary) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 5 * 2 + 5  # cells + per-ablation means
        assert sum(r["seed"] == "mean" for r in rows) == 5
        # same seed across ablations shares dataset and partition
        manifests = {}
        for ablation in ("none", "wo_cka"):
            m = json.loads(
                (tmp_path / "suite" / ablation / "seed_11" / "manifest.json").read_text()
            )
            manifests[ablation] = (m["dataset_hash"], m["partition_hash"])
        assert manifests["none"] == manifests["wo_cka"]

    def test_requires_seeds(self, tmp_path):
        with pytest.raises(ConfigError, match="seed"):
            run_ablation_suite(_fast_cfg(tmp_path / "x"), seeds=[], out_dir=tmp_path / "s")


class TestCli:
    def test_run_and_plot_and_exit_codes(self, tmp_path, capsys):
        cfg_file = tmp_path / "cfg.yaml"
        cfg_file.write_text(yaml.safe_dump({
            "n_clients": 3, "rounds": 1, "partition": "iid", "n_train": 60, "n_test": 20,
            "dataset": {"num_classes": 3, "latent_dim": 4, "grid_side": 4, "bins_per_dim": 4},
            "model": {"d_enc": 8, "d_com": 8, "d_latent": 8, "self_heads": 2, "patch_side": 2},
            "train": {"local_epochs": 1, "batch_size": 8},
            "out_dir": str(tmp_path / "cli_run"),
        }))
        assert cli_main(["run", "--config", str(cfg_file)]) == 0
        out = capsys.readouterr().out
        assert "final complete accuracy" in out
        metrics = tmp_path / "cli_run" / "metrics.jsonl"
        assert cli_main(["plot", "--metrics", str(metrics), "--out", str(tmp_path / "figs")]) == 0

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("beta: 2.0\n")
        assert cli_main(["run", "--config", str(bad)]) == 1
        assert "beta" in capsys.readouterr().err

    def test_missing_file_exit_code(self, tmp_path):
        assert cli_main(["run", "--config", str(tmp_path / "nope.yaml")]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_failure_exit_code(self, tmp_path, capsys):
        cfg_file = tmp_path / "blowup.yaml"
        cfg_file.write_text(yaml.safe_dump({
            "n_clients": 2, "rounds": 2, "partition": "iid", "n_train": 40, "n_test": 10,
            "dataset": {"num_classes": 2, "latent_dim": 4, "grid_side": 4, "bins_per_dim": 4},
            "model": {"d_enc": 8, "d_com": 8, "d_latent": 8, "self_heads": 2, "patch_side": 2},
            "train": {"local_epochs": 2, "batch_size": 8, "learning_rate": 1e30,
                      "scheduler": "none"},
            "out_dir": str(tmp_path / "blowup_out"),
        }))
        assert cli_main(["run", "--config", str(cfg_file)]) == 2
        assert "numerical failure" in capsys.readouterr().err

    def test_flag_override(self, tmp_path, capsys):
        cfg_file = tmp_path / "cfg.yaml"
        cfg_file.write_text(yaml.safe_dump({
            "n_clients": 3, "rounds": 1, "partition": "iid", "n_train": 60, "n_test": 20,
            "beta": 0.3,
            "dataset": {"num_classes": 3, "latent_dim": 4, "grid_side": 4, "bins_per_dim": 4},
            "model": {"d_enc": 8, "d_com": 8, "d_latent": 8, "self_heads": 2, "patch_side": 2},
            "train": {"local_epochs": 1, "batch_size": 8},
        }))
        out_dir = tmp_path / "ovr"
        assert cli_main(["run", "--config", str(cfg_file), "--beta", "0.5",
                         "--out", str(out_dir), "--rounds", "1"]) == 0
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["master_seed"] == 7
