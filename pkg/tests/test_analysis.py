"""Analysis battery tests against closed-form oracles and contracts."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dafr2.analysis import (
    MineConfig,
    MineInstabilityError,
    energy_distance,
    estimate_mi,
    export_features_2d,
    frechet_distance,
    local_lipschitz,
    scatter_report,
)
from dafr2.datasets import LabeledDataset, synth_shapes
from dafr2.nn import ArchConfig, ModelBundle, build_bundle, copy_module_state
from dafr2.oracles import fd_diagonal_oracle, gaussian_mi_oracle, linear_lipschitz_oracle

TINY = ArchConfig(stem_channels=4, block_channels=(4, 8), block_strides=(1, 2), embedding_dim=8)


def gaussian_pair(rho, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = rho * x + math.sqrt(1 - rho * rho) * rng.standard_normal(n)
    return x[:, None].astype(np.float32), y[:, None].astype(np.float32)


class TestEstimateMi:
    def test_independent_pairs_near_zero(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((12_000, 1)).astype(np.float32)
        b = rng.standard_normal((12_000, 1)).astype(np.float32)
        mi = estimate_mi(a, b, MineConfig(steps=600, batch=512, seed=1))
        assert mi <= 0.05

    def test_correlated_gaussian_matches_closed_form(self):
        a, b = gaussian_pair(0.9, 20_000, seed=2)
        expected = gaussian_mi_oracle(0.9)
        mi = estimate_mi(a, b, MineConfig(steps=1500, batch=512, seed=3))
        assert abs(mi - expected) <= 0.15 * expected

    def test_affine_invariance_within_noise(self):
        # MI is invariant to invertible per-variable affine maps; the
        # estimator must agree with itself within ~10% under one.
        a, b = gaussian_pair(0.8, 20_000, seed=4)
        cfg = MineConfig(steps=1200, batch=512, seed=5)
        mi_raw = estimate_mi(a, b, cfg)
        mi_mapped = estimate_mi(3.0 * a - 1.0, -0.5 * b + 2.0, cfg)
        assert abs(mi_mapped - mi_raw) <= 0.10 * max(mi_raw, mi_mapped)

    def test_rows_must_align(self):
        with pytest.raises(ValueError, match="row-aligned"):
            estimate_mi(np.zeros((10, 1)), np.zeros((9, 1)))

    def test_instability_raises_helpful_error(self):
        a, b = gaussian_pair(0.5, 2_000, seed=6)
        with pytest.raises(MineInstabilityError, match="smaller lr"):
            estimate_mi(a, b, MineConfig(steps=400, batch=256, lr=1e4, seed=7))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MineConfig(steps=0)
        with pytest.raises(ValueError):
            MineConfig(ema_decay=1.0)


class TestFrechetDistance:
    def test_zero_on_self(self):
        x = np.random.default_rng(0).standard_normal((500, 3))
        assert frechet_distance(x, x) <= 1e-6

    def test_mean_shift_case(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((100_000, 2))
        b = rng.standard_normal((100_000, 2)) + np.array([3.0, 4.0])
        assert frechet_distance(a, b) == pytest.approx(25.0, abs=0.5)

    def test_diagonal_variance_case(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((100_000, 2)) * np.sqrt([1.0, 4.0])
        b = rng.standard_normal((100_000, 2)) * np.sqrt([4.0, 1.0])
        expected = fd_diagonal_oracle([0, 0], [1, 4], [0, 0], [4, 1])
        assert frechet_distance(a, b) == pytest.approx(expected, abs=0.2)

    def test_symmetry_tight(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((400, 6)) @ rng.standard_normal((6, 6))
        b = rng.standard_normal((300, 6)) @ rng.standard_normal((6, 6)) + 1.0
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-8

    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative_and_symmetric_property(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((40, 3))
        b = rng.standard_normal((50, 3)) * rng.uniform(0.5, 2.0) + rng.standard_normal(3)
        fd_ab = frechet_distance(a, b)
        assert fd_ab >= 0.0
        assert fd_ab == pytest.approx(frechet_distance(b, a), abs=1e-8)

    def test_few_samples_ridge_keeps_it_finite(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 8))  # m <= d: singular covariance
        b = rng.standard_normal((5, 8))
        assert math.isfinite(frechet_distance(a, b))

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dims differ"):
            frechet_distance(np.zeros((10, 2)), np.zeros((10, 3)))


class TestLocalLipschitz:
    def test_scalar_doubling_map_is_exactly_two(self):
        est = local_lipschitz(lambda x: 2.0 * x, n_samples=100, input_shape=(1,), seed=0)
        assert est == pytest.approx(2.0, abs=1e-5)

    def test_linear_map_bounded_by_sigma_max(self):
        w = np.random.default_rng(5).standard_normal((8, 8)).astype(np.float32)
        wt = torch.from_numpy(w)
        sigma_max = linear_lipschitz_oracle(w)
        est = local_lipschitz(lambda x: x @ wt.T, n_samples=5_000, input_shape=(8,), seed=1)
        assert est <= sigma_max * (1 + 1e-5)
        assert est >= 0.9 * sigma_max

    def test_monotone_in_sample_count(self):
        w = torch.from_numpy(np.random.default_rng(6).standard_normal((4, 4)).astype(np.float32))
        fn = lambda x: x @ w.T
        estimates = [
            local_lipschitz(fn, n_samples=n, input_shape=(4,), seed=2)
            for n in (50, 200, 1_000, 5_000)
        ]
        assert all(b >= a for a, b in zip(estimates, estimates[1:]))

    def test_rejects_bad_sample_count(self):
        with pytest.raises(ValueError):
            local_lipschitz(lambda x: x, n_samples=0, input_shape=(1,), seed=0)


class TestEnergyDistance:
    def test_same_distribution_near_zero_and_shift_positive(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((800, 2))
        b = rng.standard_normal((800, 2))
        c = rng.standard_normal((800, 2)) + 4.0
        assert abs(energy_distance(a, b)) < 0.1
        assert energy_distance(a, c) > 1.0


class TestExportFeatures2d:
    def test_empty_dataset_gives_empty_table(self):
        bundle = build_bundle(
            ArchConfig(stem_channels=4, block_channels=(4,), block_strides=(1,), embedding_dim=2),
            num_classes=4,
        )
        ds = synth_shapes(4, seed=1)
        empty = LabeledDataset(ds.images[:0], ds.labels[:0], "empty", ds.normalization, 4)
        rows, mode = export_features_2d(bundle, {"source": empty})
        assert rows == []
        assert mode == "native-2d"

    def test_native_mode_row_schema(self):
        bundle = build_bundle(
            ArchConfig(stem_channels=4, block_channels=(4,), block_strides=(1,), embedding_dim=2),
            num_classes=4,
        )
        ds = synth_shapes(6, seed=2)
        rows, mode = export_features_2d(bundle, {"source": ds, "target": ds})
        assert mode == "native-2d"
        assert len(rows) == 6 * 2 * 2  # samples x domains x routes
        assert {r["route"] for r in rows} == {"baseline", "adapted"}
        assert {r["domain"] for r in rows} == {"source", "target"}
        assert all(isinstance(r["x"], float) and isinstance(r["y"], float) for r in rows)

    def test_linear_probe_mode_for_wide_embeddings(self):
        bundle = build_bundle(TINY, num_classes=4)
        ds = synth_shapes(10, seed=3)
        rows, mode = export_features_2d(bundle, {"source": ds})
        assert mode == "linear-probe"
        assert len(rows) == 20


class TestScatterReport:
    @pytest.fixture(scope="class")
    def setup(self):
        ds = synth_shapes(80, seed=9)
        bundle = build_bundle(TINY, num_classes=4, seed=1, normalization=ds.normalization)
        copy_module_state(bundle.f_s, bundle.f_t)  # identical routes
        return bundle, ds

    def test_identical_models_put_all_points_on_diagonal(self, setup):
        bundle, ds = setup
        for kind in ("ce_loss", "nn_feature_distance"):
            report = scatter_report(bundle, bundle, ds, kind)
            for row in report.rows:
                if not row.flagged:
                    assert row.baseline_value == pytest.approx(row.adapted_value, abs=1e-5)

    def test_row_count_matches_target_subset_exactly(self, setup):
        bundle, ds = setup
        from dafr2.trainer import infer

        preds_a, _ = infer(bundle, ds.images, route="adapted")
        preds_b, _ = infer(bundle, ds.images, route="baseline")
        ce_rows = scatter_report(bundle, bundle, ds, "ce_loss").rows
        nn_rows = scatter_report(bundle, bundle, ds, "nn_feature_distance").rows
        assert len(ce_rows) == int((preds_a == ds.labels).sum())
        assert len(nn_rows) == int((preds_b != ds.labels).sum())

    def test_corrected_flag_contract(self, setup):
        bundle, ds = setup
        report = scatter_report(bundle, bundle, ds, "ce_loss")
        for row in report.rows:
            assert row.corrected == (not row.baseline_correct and row.adapted_correct)

    def test_singleton_class_rows_are_flagged_not_fabricated(self):
        ds = synth_shapes(40, seed=11)
        # make class 3 a singleton
        keep = np.concatenate([np.flatnonzero(ds.labels != 3), np.flatnonzero(ds.labels == 3)[:1]])
        subset = LabeledDataset(ds.images[keep], ds.labels[keep], "s", ds.normalization, 4)
        bundle = build_bundle(TINY, num_classes=4, seed=2, normalization=ds.normalization)
        copy_module_state(bundle.f_s, bundle.f_t)
        report = scatter_report(bundle, bundle, subset, "nn_feature_distance")
        singleton_rows = [
            r for r in report.rows if subset.labels[r.index] == 3
        ]
        for row in singleton_rows:
            assert row.flagged
            assert math.isnan(row.baseline_value)

    def test_unknown_kind_rejected(self, setup):
        bundle, ds = setup
        with pytest.raises(ValueError, match="unknown scatter kind"):
            scatter_report(bundle, bundle, ds, "nope")

    def test_needs_labels(self, setup):
        bundle, ds = setup
        from dafr2.datasets import UnlabeledDataset

        with pytest.raises(ValueError, match="labels"):
            scatter_report(bundle, bundle, UnlabeledDataset(ds.images, "u"), "ce_loss")
