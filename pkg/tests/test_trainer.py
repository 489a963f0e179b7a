"""Training-loop contracts: step isolation, loss bookkeeping, hypothesis
transfer, determinism."""

import math

import numpy as np
import pytest
import torch

from dafr2.corruptions import CorruptionSpec, corrupt
from dafr2.datasets import LabeledDataset, synth_shapes
from dafr2.nn import (
    ArchConfig,
    bn_statistics_checksum,
    build_bundle,
    copy_module_state,
    parameter_checksum,
)
from dafr2.trainer import (
    DivergenceError,
    LossRecord,
    OptimizerSpec,
    ScheduleSpec,
    TrainConfig,
    distill_step,
    evaluate,
    infer,
    train_baseline,
    train_dafr2,
    train_source_step,
)

TINY = ArchConfig(stem_channels=4, block_channels=(4, 8), block_strides=(1, 2), embedding_dim=8)


def tiny_cfg(**kw):
    base = dict(
        epochs=1,
        batch_size=32,
        seed=0,
        arch=TINY,
        schedule=ScheduleSpec(t_max=1),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def shapes():
    return synth_shapes(256, seed=21)


@pytest.fixture
def bundle(shapes):
    return build_bundle(TINY, num_classes=4, seed=3, normalization=shapes.normalization)


def source_opt(bundle, lr=0.05):
    return torch.optim.SGD(
        list(bundle.f_s.parameters()) + list(bundle.g_s.parameters()), lr=lr, momentum=0.9
    )


class TestLossRecord:
    def test_recombination_invariant_enforced(self):
        LossRecord(step=0, l_regression=0.5, l_reg_source=0.4, l_reg_target=0.6)
        with pytest.raises(ValueError, match="recombination"):
            LossRecord(step=0, l_regression=0.51, l_reg_source=0.4, l_reg_target=0.6)


class TestTrainSourceStep:
    def test_uniform_logits_give_ln_k(self, bundle, shapes):
        with torch.no_grad():
            bundle.g_s.linear.weight.zero_()
            bundle.g_s.linear.bias.zero_()
        opt = source_opt(bundle, lr=0.0)
        rec = train_source_step(bundle, shapes.images[:32], shapes.labels[:32], opt)
        assert rec.l_ce == pytest.approx(math.log(4), abs=1e-6)

    def test_f_t_untouched(self, bundle, shapes):
        before = parameter_checksum(bundle.f_t)
        opt = source_opt(bundle)
        train_source_step(bundle, shapes.images[:32], shapes.labels[:32], opt)
        assert parameter_checksum(bundle.f_t) == before

    def test_separable_batch_trains_to_near_zero_ce(self, bundle):
        # Two blatantly separable classes; a plain logistic regression on raw
        # pixels is the oracle showing CE -> 0 is attainable on this batch.
        images = np.concatenate(
            [
                np.full((16, 1, 12, 12), 0.1, dtype=np.float32),
                np.full((16, 1, 12, 12), 0.9, dtype=np.float32),
            ]
        )
        labels = np.array([0] * 16 + [1] * 16, dtype=np.int64)

        def logistic_oracle_ce():
            x = images.reshape(32, -1).astype(np.float64)
            y = labels.astype(np.float64)
            w, b = np.zeros(x.shape[1]), 0.0
            for _ in range(3000):
                p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
                g = p - y
                w -= 0.5 * x.T @ g / len(y)
                b -= 0.5 * g.mean()
            p = np.clip(1.0 / (1.0 + np.exp(-(x @ w + b))), 1e-12, 1 - 1e-12)
            return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))

        assert logistic_oracle_ce() < 0.01  # the data really is separable

        opt = source_opt(bundle, lr=0.05)
        rec = None
        for step in range(150):
            rec = train_source_step(bundle, images, labels, opt, step=step)
            if rec.l_ce < 0.01:
                break
        assert rec.l_ce < 0.01

    def test_divergence_raises_with_record(self, bundle, shapes):
        opt = source_opt(bundle, lr=1e12)
        with pytest.raises(DivergenceError) as err:
            for step in range(60):
                train_source_step(bundle, shapes.images[:64], shapes.labels[:64], opt, step=step)
        assert isinstance(err.value.record, LossRecord)


class TestDistillStep:
    def test_isolation_contracts(self, bundle, shapes):
        x, z = shapes.images[:32], shapes.images[32:64]
        g_before = parameter_checksum(bundle.g_s)
        fs_params_before = parameter_checksum(bundle.f_s)
        fs_bn_before = bn_statistics_checksum(bundle.f_s)
        ft_before = parameter_checksum(bundle.f_t)
        opt = torch.optim.AdamW(bundle.f_t.parameters(), lr=1e-3)
        rec = distill_step(bundle, x, z, opt)
        assert parameter_checksum(bundle.g_s) == g_before
        assert parameter_checksum(bundle.f_s) == fs_params_before
        assert bn_statistics_checksum(bundle.f_s) != fs_bn_before
        assert parameter_checksum(bundle.f_t) != ft_before
        assert rec.l_regression == pytest.approx(
            0.5 * rec.l_reg_source + 0.5 * rec.l_reg_target, abs=1e-12
        )

    def test_bn_stats_move_when_target_domain_is_shifted(self, bundle, shapes):
        ds = LabeledDataset(shapes.images[:64], shapes.labels[:64], "s", shapes.normalization, 4)
        shifted = corrupt(ds, CorruptionSpec("brightness", 5, seed=1))
        opt = torch.optim.AdamW(bundle.f_t.parameters(), lr=1e-3)
        before = bn_statistics_checksum(bundle.f_s)
        distill_step(bundle, ds.images[:32], shifted.images[:32], opt)
        assert bn_statistics_checksum(bundle.f_s) != before

    def test_copy_of_source_gives_exactly_zero_loss(self, bundle, shapes):
        copy_module_state(bundle.f_s, bundle.f_t)
        opt = torch.optim.AdamW(bundle.f_t.parameters(), lr=0.0)
        rec = distill_step(bundle, shapes.images[:32], shapes.images[32:64], opt)
        assert rec.l_regression == 0.0
        assert rec.l_reg_source == 0.0 and rec.l_reg_target == 0.0

    def test_hypothesis_transfer_invariance_over_phase(self, bundle, shapes):
        # g_s stays bit-identical across an entire distillation phase.
        g_before = parameter_checksum(bundle.g_s)
        fs_before = parameter_checksum(bundle.f_s)
        opt = torch.optim.AdamW(bundle.f_t.parameters(), lr=1e-3)
        for step in range(8):
            i = (step * 32) % 224
            distill_step(bundle, shapes.images[i : i + 32], shapes.images[i + 16 : i + 48], opt, step)
        assert parameter_checksum(bundle.g_s) == g_before
        assert parameter_checksum(bundle.f_s) == fs_before


class TestTrainLoops:
    def test_baseline_runs_and_learns_something(self, shapes):
        bundle, recs = train_baseline(shapes, tiny_cfg(epochs=2, schedule=ScheduleSpec(t_max=2)))
        ce = [r.value for r in recs if r.name == "train/l_ce"]
        assert len(ce) == 2
        assert ce[-1] < ce[0]

    def test_dafr2_interleaves_and_checkpoints(self, shapes, tmp_path):
        target = corrupt(shapes, CorruptionSpec("gaussian_noise", 2, seed=4))
        cfg = tiny_cfg(epochs=2, schedule=ScheduleSpec(t_max=2), checkpoint_every=1)
        bundle, recs = train_dafr2(shapes, target, cfg, out_dir=tmp_path)
        assert (tmp_path / "checkpoints" / "final" / "f_t" / "manifest.json").exists()
        assert (tmp_path / "checkpoints" / "epoch-0000").exists()
        names = {r.name for r in recs}
        assert "train/l_ce" in names and "train/l_regression" in names

    def test_geometry_mismatch_rejected(self, shapes):
        target = synth_shapes(64, seed=5, image_size=16)
        from dafr2.datasets import UnlabeledDataset

        with pytest.raises(ValueError, match="geometry"):
            train_dafr2(shapes, UnlabeledDataset(target.images, "t"), tiny_cfg())

    def test_single_thread_determinism(self, shapes):
        torch.set_num_threads(1)
        try:
            target = corrupt(shapes, CorruptionSpec("gaussian_noise", 2, seed=4))
            cfg = tiny_cfg(epochs=1)
            b1, _ = train_dafr2(shapes, target, cfg)
            b2, _ = train_dafr2(shapes, target, cfg)
            for part in ("f_s", "g_s", "f_t"):
                assert parameter_checksum(getattr(b1, part)) == parameter_checksum(
                    getattr(b2, part)
                ), part
            assert bn_statistics_checksum(b1.f_s) == bn_statistics_checksum(b2.f_s)
            assert bn_statistics_checksum(b1.f_t) == bn_statistics_checksum(b2.f_t)
        finally:
            torch.set_num_threads(2)

    def test_regression_loss_trends_down_over_first_epochs(self):
        # Statistical contract, seed-averaged: the epoch-mean distillation
        # loss must not increase over the first epochs once averaged.
        curves = []
        for seed in (0, 1, 2):
            ds = synth_shapes(384, seed=30 + seed)
            target = corrupt(ds, CorruptionSpec("gaussian_noise", 3, seed=seed))
            cfg = tiny_cfg(
                epochs=5,
                seed=seed,
                batch_size=64,
                schedule=ScheduleSpec(t_max=5),
                target_opt=OptimizerSpec("adamw", 3e-3, 1e-4),
            )
            _, recs = train_dafr2(ds, target, cfg)
            curves.append([r.value for r in recs if r.name == "train/l_regression"])
        mean_curve = np.mean(curves, axis=0)
        assert len(mean_curve) == 5
        # allow tiny wiggle; the averaged trend must be downward
        assert mean_curve[-1] < mean_curve[0]
        assert np.all(np.diff(mean_curve) <= 0.1 * mean_curve[0] + 1e-9)


class TestInferAndEvaluate:
    def test_infer_is_pure_and_argmax(self, bundle, shapes):
        preds1, logits1 = infer(bundle, shapes.images[:16])
        preds2, logits2 = infer(bundle, shapes.images[:16])
        assert np.array_equal(preds1, preds2)
        assert np.array_equal(logits1, logits2)
        assert np.array_equal(preds1, logits1.argmax(axis=1))

    def test_infer_leaves_bn_untouched(self, bundle, shapes):
        before_t = bn_statistics_checksum(bundle.f_t)
        before_s = bn_statistics_checksum(bundle.f_s)
        infer(bundle, shapes.images[:16], route="adapted")
        infer(bundle, shapes.images[:16], route="baseline")
        assert bn_statistics_checksum(bundle.f_t) == before_t
        assert bn_statistics_checksum(bundle.f_s) == before_s

    def test_fixed_logits_argmax(self, bundle, shapes):
        with torch.no_grad():
            bundle.g_s.linear.weight.zero_()
            bundle.g_s.linear.bias.copy_(torch.tensor([3.1, -0.2, -1.0, -1.0]))
        preds, _ = infer(bundle, shapes.images[:8])
        assert np.all(preds == 0)

    def test_untrained_model_is_at_chance_on_shuffled_labels(self, bundle, shapes):
        shuffled = LabeledDataset(
            shapes.images,
            np.random.default_rng(9).permutation(shapes.labels),
            "shuffled",
            shapes.normalization,
            4,
        )
        res = evaluate(bundle, shuffled, route="baseline")
        p = 0.25
        sigma = math.sqrt(p * (1 - p) / len(shuffled))
        assert abs(res.accuracy - p) <= 3 * sigma + 0.02

    def test_constant_predictor_accuracy_equals_class_prior(self, bundle, shapes):
        with torch.no_grad():
            bundle.g_s.linear.weight.zero_()
            bundle.g_s.linear.bias.copy_(torch.tensor([0.0, 5.0, 0.0, 0.0]))
        res = evaluate(bundle, shapes, route="baseline")
        prior = float(np.mean(shapes.labels == 1))
        assert res.accuracy == pytest.approx(prior, abs=1e-9)

    def test_confusion_rows_sum_to_class_counts(self, bundle, shapes):
        res = evaluate(bundle, shapes, route="adapted")
        counts = np.bincount(shapes.labels, minlength=4)
        assert np.array_equal(res.confusion.sum(axis=1), counts)
        assert res.confusion.sum() == len(shapes)

    def test_routes_reported_separately(self, bundle, shapes):
        r_base = evaluate(bundle, shapes, route="baseline")
        r_adapt = evaluate(bundle, shapes, route="adapted")
        recs = r_base.records(run_id="x") + r_adapt.records(run_id="x")
        routes = {r.tags["route"] for r in recs}
        assert routes == {"baseline", "adapted"}

    def test_missing_labels_rejected(self, bundle, shapes):
        from dafr2.datasets import UnlabeledDataset

        ds = UnlabeledDataset(shapes.images[:8], "u")
        with pytest.raises(ValueError, match="labels"):
            evaluate(bundle, ds)


class TestConfigValidation:
    def test_rates_must_be_positive(self):
        with pytest.raises(ValueError):
            OptimizerSpec("sgd", lr=0.0)
        with pytest.raises(ValueError):
            OptimizerSpec("sgd", lr=0.1, weight_decay=-1.0)

    def test_epochs_at_least_one(self):
        with pytest.raises(ValueError):
            tiny_cfg(epochs=0)
