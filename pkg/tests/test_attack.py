"""Tests for the reconstruction attacker and its outputs."""

import numpy as np
import pytest

from tools import numcore as nc
from tools.attack import (
    AttackReport,
    Decoder,
    LeakedPairSet,
    decoder_widths,
    dump_reconstructions,
    evaluate_attack,
    harvest_pairs,
    load_pairs,
    save_pairs,
    to_uint8,
    train_attacker,
    write_ppm,
)
from tools.datasets import gen_synthetic
from tools.model import SplitModel, default_layer_specs


def _pairs(Z, X, **kwargs):
    return LeakedPairSet.from_arrays(Z, X, seed=0, **kwargs)


class TestPairs:
    def test_split_sizes(self):
        X = nc.Rng(0).normal(100, 3)
        pairs = _pairs(X, X)
        assert pairs.Z_train.shape == (90, 3)
        assert pairs.Z_test.shape == (10, 3)

    def test_leak_fraction_keeps_test_set(self):
        X = nc.Rng(1).normal(100, 3)
        full, half = _pairs(X, X), _pairs(X, X, leak_fraction=0.5)
        assert np.array_equal(full.X_test, half.X_test)
        assert half.X_train.shape[0] == 45
        assert np.array_equal(half.X_train, full.X_train[:45])

    def test_rows_stay_paired(self):
        X = nc.Rng(2).normal(30, 2)
        pairs = _pairs(2.0 * X, X)
        assert np.array_equal(pairs.Z_train, 2.0 * pairs.X_train)
        assert np.array_equal(pairs.Z_test, 2.0 * pairs.X_test)

    def test_bad_leak_fraction(self):
        with pytest.raises(ValueError):
            _pairs(np.zeros((4, 1)), np.zeros((4, 1)), leak_fraction=0.0)

    def test_row_mismatch(self):
        with pytest.raises(nc.DimensionError):
            _pairs(np.zeros((4, 1)), np.zeros((5, 1)))

    def test_harvest_uses_client_output(self):
        specs, split = default_layer_specs(8, (16, 4, 4), seed=0)
        model = SplitModel.build(specs, split, {"class": 4}, nc.Rng(0))
        X = gen_synthetic("blobs", 20, 0).X
        pairs = harvest_pairs(model, X)
        assert pairs.dz == 4 and pairs.d == 8

    def test_npkp_roundtrip(self, tmp_path):
        Z, X = nc.Rng(3).normal(5, 2), nc.Rng(4).normal(5, 7)
        path = save_pairs(Z, X, tmp_path / "pairs.npkp")
        assert path.read_bytes()[:4] == b"NPKP"
        Z2, X2 = load_pairs(path)
        assert np.array_equal(Z, Z2) and np.array_equal(X, X2)

    def test_npkp_rejects_corruption(self, tmp_path):
        path = save_pairs(np.ones((2, 2)), np.ones((2, 3)), tmp_path / "p.npkp")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ValueError):
            load_pairs(path)
        path.write_bytes(b"JUNK\x00\x00\x00\x00")
        with pytest.raises(ValueError):
            load_pairs(path)


class TestDecoder:
    def test_widths_double_until_target(self):
        assert decoder_widths(8, 256) == [8, 16, 32, 64, 128]
        assert decoder_widths(4, 4) == [4]

    def test_output_shape(self):
        dec = Decoder(4, 20, nc.Rng(0))
        assert dec.reconstruct(np.zeros((3, 4))).shape == (3, 20)

    def test_recovers_identity_leak(self):
        X = nc.Rng(5).normal(200, 4)
        pairs = _pairs(X, X)
        dec = train_attacker(pairs, epochs=300, lr=0.05, batch_size=32, decay=0.98)
        assert evaluate_attack(dec, pairs).mse < 1e-3
        assert dec.loss_history[-1] < dec.loss_history[0]

    def test_independent_noise_leak_is_no_better_than_the_mean(self):
        rng = nc.Rng(6)
        X, Z = rng.normal(400, 4), rng.substream("z").normal(400, 4)
        pairs = _pairs(Z, X)
        dec = train_attacker(pairs, epochs=30, lr=1e-2, decay=0.95)
        assert evaluate_attack(dec, pairs).mse > 0.6

    def test_deterministic(self):
        X = nc.Rng(7).normal(40, 3)
        pairs = _pairs(X, X)
        a = train_attacker(pairs, epochs=3, seed=1)
        b = train_attacker(pairs, epochs=3, seed=1)
        assert a.loss_history == b.loss_history


class TestReport:
    def test_perfect_reconstruction(self):
        X = nc.Rng(8).normal(6, 3)
        report = AttackReport.from_reconstruction(X, X)
        assert report.mse == 0.0 and report.mean == 0.0
        assert report.errors == [0.0] * 6

    def test_mean_predictor(self):
        X = np.array([[1.0, 0.0], [-1.0, 0.0]])
        report = AttackReport.from_reconstruction(X, np.zeros_like(X))
        assert report.errors == [1.0, 1.0]
        assert report.mse == pytest.approx(0.5)
        assert report.median == 1.0

    def test_quartiles(self):
        X = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]])
        report = AttackReport.from_reconstruction(X, np.zeros_like(X))
        assert (report.q1, report.median, report.q3) == (2.0, 3.0, 4.0)

    def test_shape_mismatch(self):
        with pytest.raises(nc.DimensionError):
            AttackReport.from_reconstruction(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_writes_csv_and_json(self, tmp_path):
        report = AttackReport.from_reconstruction(np.ones((3, 2)), np.zeros((3, 2)))
        lines = report.write_csv(tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == "sample_id,l2_error"
        assert len(lines) == 4
        assert '"n": 3' in report.write_json(tmp_path / "a.json").read_text()


class TestImages:
    def test_to_uint8_constant_is_mid_grey(self):
        assert (to_uint8(np.full((2, 2), 7.0)) == 128).all()

    def test_to_uint8_spans_full_range(self):
        out = to_uint8(np.array([[-1.0, 0.0, 1.0]]))
        assert out.tolist() == [[0, 128, 255]]

    def test_ppm_header(self, tmp_path):
        img = np.zeros((3, 2), dtype=np.uint8)
        blob = write_ppm(tmp_path / "x.ppm", img).read_bytes()
        header = b"P6\n2 3\n255\n"
        assert blob.startswith(header)
        assert len(blob) == len(header) + 3 * 2 * 3

    def test_ppm_rejects_four_channels(self, tmp_path):
        with pytest.raises(nc.DimensionError):
            write_ppm(tmp_path / "x.ppm", np.zeros((2, 2, 4), dtype=np.uint8))

    def test_dump_reconstructions_side_by_side(self, tmp_path):
        ds = gen_synthetic("stripes-image", 30, 0)
        pairs = _pairs(ds.X[:, :8], ds.X)
        dec = Decoder(8, 256, nc.Rng(0))
        paths = dump_reconstructions(dec, pairs, ds, tmp_path, limit=2)
        assert [p.name for p in paths] == ["recon_0000.ppm", "recon_0001.ppm"]
        assert paths[0].read_bytes().startswith(b"P6\n32 16\n255\n")
