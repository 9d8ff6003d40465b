"""Tests for experiment orchestration, reports and diagnostics."""

import json

import pytest

from tools import numcore as nc
from tools.config import ConfigError, SessionConfig
from tools.datasets import gen_synthetic
from tools.harness import (
    ExperimentReport,
    dcor_profile,
    dump_activation_images,
    linear_probe_accuracy,
    make_dataset,
    render_summary,
    run_experiment,
    split_holdout,
    sweep_alpha,
    train_unsplit,
)
from tools.model import SplitModel, default_layer_specs, image_layer_specs


def _cfg(**overrides):
    values = {
        "epochs": 2, "batch_size": 16, "hidden": (16, 8, 8), "lr": 1e-2, "seed": 1,
        "n_samples": 80, "attack_epochs": 3, "attack_batch": 8,
    }
    return SessionConfig(**{**values, **overrides})


class TestRunExperiment:
    def test_rows_per_epoch(self, tmp_path):
        report = run_experiment(_cfg())
        assert [row["epoch"] for row in report.rows] == [0, 1]
        assert report.columns == ["epoch", "train_loss", "acc_class", "dcor_xz", "dcor_yz"]
        csv_path, json_path = report.write(tmp_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,acc_class,dcor_xz,dcor_yz"
        assert len(lines) == 3
        data = json.loads(json_path.read_text())
        assert data["seed"] == 1
        assert "attacker_mse" in data["summary"]

    def test_same_config_same_bytes(self, tmp_path):
        a = run_experiment(_cfg()).write(tmp_path / "a")
        b = run_experiment(_cfg()).write(tmp_path / "b")
        assert a[0].read_bytes() == b[0].read_bytes()
        assert a[1].read_bytes() == b[1].read_bytes()

    def test_without_attack(self):
        report = run_experiment(_cfg(epochs=1), attack=False)
        assert report.attack is None
        assert "attacker_mse" not in report.summary

    def test_checkpoint_written(self, tmp_path):
        run_experiment(_cfg(epochs=1), attack=False, checkpoint=tmp_path / "m.npkm")
        assert (tmp_path / "m.npkm").read_bytes()[:4] == b"NPKM"

    @pytest.mark.parametrize("seed", range(6))
    def test_protected_attribute_with_short_tail_batches(self, seed):
        cfg = _cfg(seed=seed, n_samples=163, batch_size=64, epochs=4, alpha1=0.5,
                   protect="quadrant")
        report = run_experiment(cfg, attack=False)
        assert len(report.rows) == 4
        assert set(report.probes) == {"quadrant", "class"}

    def test_protected_attribute_probes(self):
        cfg = _cfg(epochs=1, protect="parity", alpha1=1.0)
        report = run_experiment(cfg, attack=False)
        assert set(report.probes) == {"parity", "class"}
        assert "dcor_sz" in report.columns
        assert all(0.0 <= v <= 1.0 for v in report.probes.values())

    def test_cifar_needs_a_path(self):
        with pytest.raises(ConfigError) as exc:
            make_dataset(_cfg(dataset="cifar10"))
        assert exc.value.key == "data_path"


class TestUnsplit:
    def test_alpha1_adds_leakage_term(self):
        ds = gen_synthetic("blobs", 48, 0).standardized()
        plain = train_unsplit(_cfg(epochs=1, alpha1=0.0), ds)
        penalized = train_unsplit(_cfg(epochs=1, alpha1=1.0), ds)
        assert penalized.batch_losses[0] > plain.batch_losses[0]
        assert len(plain.epochs) == 1

    def test_holdout_is_disjoint(self):
        ds = gen_synthetic("blobs", 50, 0)
        train, held = split_holdout(ds, 0)
        assert (train.n, held.n) == (40, 10)


class TestSweep:
    def test_one_report_per_alpha(self, tmp_path):
        sweep = sweep_alpha(_cfg(epochs=1), [0.0, 1.0], out_dir=tmp_path)
        rows = sweep.rows()
        assert [r["alpha"] for r in rows] == [0.0, 1.0]
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "alpha,accuracy,dcor_xz,attacker_mse"
        assert len(lines) == 3
        assert (tmp_path / "report_alpha1.json").exists()

    def test_empty_sweep(self):
        with pytest.raises(ConfigError):
            sweep_alpha(_cfg(), [])

    def test_render_summary(self, tmp_path):
        sweep_alpha(_cfg(epochs=1), [0.0, 0.5], out_dir=tmp_path)
        table = render_summary(sorted(tmp_path.glob("report_alpha*.json")))
        lines = table.splitlines()
        assert "alpha1" in lines[0] and "attacker_mse" in lines[0]
        assert len(lines) == 3
        assert any(line.lstrip().startswith("report_alpha0.5") for line in lines[1:])


class TestDiagnostics:
    def test_probe_separates_blobs(self):
        ds = gen_synthetic("blobs", 200, 0)
        assert linear_probe_accuracy(ds.X, ds.labels["class"]) > 0.99

    def test_probe_on_held_out(self):
        ds = gen_synthetic("blobs", 200, 0)
        acc = linear_probe_accuracy(ds.X[:150], ds.labels["class"][:150],
                                    ds.X[150:], ds.labels["class"][150:])
        assert acc > 0.95

    def test_dcor_profile_covers_client_layers(self):
        specs, split = default_layer_specs(8, (16, 8, 8))
        model = SplitModel.build(specs, split, {"class": 4}, nc.Rng(0))
        X = gen_synthetic("blobs", 40, 0).X
        profile = dcor_profile(model, X)
        assert [(i, kind) for i, kind, _ in profile] == [
            (0, "flatten"), (1, "dense"), (2, "relu"), (3, "dense"), (4, "relu"),
        ]
        assert profile[0][2] > 0.99
        assert all(0.0 <= v <= 1.0 + 1e-9 for _, _, v in profile)


class TestActivationImages:
    def _patch_model(self):
        specs, split = image_layer_specs((16, 16, 1), (0, 8, 4), kernel=3, out_channels=2)
        return SplitModel.build(specs, split, {"class": 4}, nc.Rng(0))

    def test_default_layer_is_patch_output(self, tmp_path):
        ds = gen_synthetic("stripes-image", 5, 0)
        paths = dump_activation_images(self._patch_model(), ds, tmp_path, limit=3)
        assert [p.name for p in paths] == [f"act_l1_000{i}.ppm" for i in range(3)]
        assert paths[0].read_bytes().startswith(b"P6\n14 14\n255\n")

    def test_input_layer_uses_dataset_shape(self, tmp_path):
        ds = gen_synthetic("stripes-image", 4, 0)
        paths = dump_activation_images(self._patch_model(), ds, tmp_path, layer=0)
        assert len(paths) == 4
        assert paths[0].read_bytes().startswith(b"P6\n16 16\n255\n")

    def test_dense_layer_has_no_image_shape(self, tmp_path):
        ds = gen_synthetic("stripes-image", 4, 0)
        with pytest.raises(ConfigError):
            dump_activation_images(self._patch_model(), ds, tmp_path, layer=3)

    def test_layer_must_be_on_client(self, tmp_path):
        ds = gen_synthetic("stripes-image", 4, 0)
        with pytest.raises(ConfigError):
            dump_activation_images(self._patch_model(), ds, tmp_path, layer=6)


class TestReport:
    def test_summary_uses_last_row(self):
        report = ExperimentReport(rows=[{"epoch": 0, "train_loss": 2.0},
                                        {"epoch": 1, "train_loss": 1.0}],
                                  attack={"mse": 0.5, "median": 0.7})
        assert report.summary == {"train_loss": 1.0, "attacker_mse": 0.5,
                                  "attacker_l2_median": 0.7}

    def test_csv_floats_round_trip(self):
        value = 1.0 / 3.0
        report = ExperimentReport(rows=[{"epoch": 0, "x": value}])
        assert float(report.to_csv().splitlines()[1].split(",")[1]) == value
