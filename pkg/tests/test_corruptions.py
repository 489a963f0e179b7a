"""Corruption determinism, severity tables and per-kind behavior."""

import numpy as np
import pytest

from dafr2.corruptions import (
    ALL_KINDS,
    IMPLEMENTED_KINDS,
    CorruptionSpec,
    apply_gaussian_noise,
    apply_impulse_noise,
    apply_translate,
    corrupt,
    parse_provenance,
    primary_intensity,
    severity_table,
)
from dafr2.datasets import LabeledDataset, UnlabeledDataset, synth_shapes


@pytest.fixture(scope="module")
def small_ds():
    ds = synth_shapes(24, seed=42)
    return LabeledDataset(ds.images, ds.labels, "small", ds.normalization, 4)


class TestSeverityTables:
    def test_gaussian_noise_sigmas_are_pinned(self):
        sigmas = [row["sigma"] for row in severity_table("gaussian_noise")]
        assert sigmas == [0.04, 0.06, 0.08, 0.09, 0.10]

    @pytest.mark.parametrize("kind", IMPLEMENTED_KINDS)
    def test_five_rows_with_strictly_increasing_intensity(self, kind):
        table = severity_table(kind)
        assert len(table) == 5
        intensities = [primary_intensity(kind, row) for row in table]
        assert all(b > a for a, b in zip(intensities, intensities[1:]))

    def test_rotate_angle_bounds_increase(self):
        angles = [row["max_angle"] for row in severity_table("rotate")]
        assert angles == sorted(angles) and len(set(angles)) == 5

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown corruption kind"):
            severity_table("vortex")

    def test_taxonomy_kind_without_implementation(self):
        assert "snow" in ALL_KINDS
        with pytest.raises(NotImplementedError):
            severity_table("snow")
        with pytest.raises(NotImplementedError, match="not *implemented|not impl"):
            CorruptionSpec("snow", 3)


class TestCorruptionSpec:
    def test_severity_range_enforced(self):
        for bad in (0, 6, -1):
            with pytest.raises(ValueError):
                CorruptionSpec("gaussian_noise", bad)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            CorruptionSpec("not_a_kind", 3)

    def test_provenance_round_trip(self):
        spec = CorruptionSpec("stripe", 4, seed=99)
        parsed = parse_provenance(spec.provenance_string())
        assert parsed == {"kind": "stripe", "severity": 4, "seed": 99}
        assert parse_provenance("natural") is None


class TestCorruptDeterminismAndContracts:
    @pytest.mark.parametrize("kind", IMPLEMENTED_KINDS)
    def test_pure_function_of_input_and_spec(self, small_ds, kind):
        spec = CorruptionSpec(kind, 3, seed=11)
        out1 = corrupt(small_ds, spec)
        out2 = corrupt(small_ds, spec)
        assert np.array_equal(out1.images, out2.images)
        assert out1.images.min() >= 0.0 and out1.images.max() <= 1.0
        assert out1.images.shape == small_ds.images.shape

    def test_labels_ride_along_index_aligned(self, small_ds):
        out = corrupt(small_ds, CorruptionSpec("rotate", 2, seed=3))
        assert isinstance(out, UnlabeledDataset)
        assert np.array_equal(out.eval_labels, small_ds.labels)

    def test_different_seed_changes_output(self, small_ds):
        a = corrupt(small_ds, CorruptionSpec("gaussian_noise", 3, seed=1))
        b = corrupt(small_ds, CorruptionSpec("gaussian_noise", 3, seed=2))
        assert not np.array_equal(a.images, b.images)

    def test_per_image_streams_are_independent_of_neighbors(self, small_ds):
        # Corrupting a subset must reproduce the same images: per-image RNG
        # depends only on (seed, index within dataset order).
        spec = CorruptionSpec("gaussian_noise", 3, seed=5)
        full = corrupt(small_ds, spec)
        half = corrupt(
            LabeledDataset(
                small_ds.images[:12], small_ds.labels[:12], "half",
                small_ds.normalization, 4,
            ),
            spec,
        )
        assert np.array_equal(full.images[:12], half.images)

    def test_input_dataset_is_not_mutated(self, small_ds):
        before = small_ds.images.copy()
        corrupt(small_ds, CorruptionSpec("impulse_noise", 5, seed=0))
        assert np.array_equal(small_ds.images, before)


class TestKernelEdgeCases:
    def test_zero_sigma_gaussian_noise_is_identity(self, small_ds):
        img = small_ds.images[0].astype(np.float64)
        out = apply_gaussian_noise(img, {"sigma": 0.0}, np.random.default_rng(0))
        assert np.array_equal(out, img)

    def test_zero_offset_translate_is_identity(self, small_ds):
        img = small_ds.images[0].astype(np.float64)
        out = apply_translate(img, {"max_shift": 0.0}, np.random.default_rng(0))
        assert np.allclose(out, img, atol=1e-12)

    def test_impulse_probability_one_saturates_every_pixel(self, small_ds):
        img = small_ds.images[0].astype(np.float64)
        out = apply_impulse_noise(img, {"amount": 1.0}, np.random.default_rng(0))
        assert np.all((out == 0.0) | (out == 1.0))

    def test_brightness_shifts_mean_by_table_delta(self):
        # Keep pixels far from 1 so clipping cannot bite: mean shift then
        # equals the severity table's delta exactly.
        rng = np.random.default_rng(7)
        images = (rng.random((100, 1, 16, 16)) * 0.5).astype(np.float32)
        ds = UnlabeledDataset(images, "flat")
        for severity, row in enumerate(severity_table("brightness"), start=1):
            out = corrupt(ds, CorruptionSpec("brightness", severity, seed=1))
            shift = float(out.images.mean() - images.mean())
            assert shift == pytest.approx(row["delta"], abs=1e-5)


class TestSeverityMonotonicityStatistical:
    def test_accuracy_non_increasing_in_severity(self, small_trained_baseline):
        # Statistical contract on a fixed trained classifier with paired
        # evaluation images: corruption never gets *less* destructive as
        # severity rises, up to small paired-sample noise.
        from dafr2.trainer import evaluate

        bundle, _ = small_trained_baseline
        eval_ds = synth_shapes(400, seed=201)
        failures = []
        for kind in IMPLEMENTED_KINDS:
            accs = []
            for severity in range(1, 6):
                out = corrupt(eval_ds, CorruptionSpec(kind, severity, seed=77))
                accs.append(evaluate(bundle, out, route="baseline").accuracy)
            for s in range(4):
                if accs[s + 1] > accs[s] + 0.025:
                    failures.append((kind, s + 1, accs))
            if accs[4] > accs[0] + 0.015:
                failures.append((kind, "end-vs-start", accs))
        assert not failures, failures
