"""Two-step adaptation training loop, source-only baseline, hypothesis-transfer
inference and evaluation.

Each training epoch interleaves (1) supervised cross-entropy steps on the
source model with (2) distillation steps that regress the target extractor
onto the source extractor's embeddings for both domains.  During step 2 the
source model's parameters are frozen but its BN layers keep updating their
running statistics, which is what adapts normalization to the target domain.
The classifier head is never touched after step 1, so inference reuses it on
top of the target extractor unchanged.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import BatchPlan, LabeledDataset, UnlabeledDataset, iter_batches
from .metrics import MetricRecord
from .nn import ArchConfig, ModelBundle, build_bundle, copy_module_state, save_bundle

__all__ = [
    "OptimizerSpec",
    "ScheduleSpec",
    "AugmentSpec",
    "TrainConfig",
    "LossRecord",
    "DivergenceError",
    "EvalResult",
    "seed_everything",
    "train_source_step",
    "distill_step",
    "train_baseline",
    "train_dafr2",
    "infer",
    "evaluate",
]


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd"  # "sgd" | "adamw"
    lr: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive, weight decay nonnegative")
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "cosine"
    t_max: int = 300  # in epochs
    eta_min: float = 1e-4


@dataclass(frozen=True)
class AugmentSpec:
    crop_pad: int = 4
    hflip_p: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    source_opt: OptimizerSpec = field(
        default_factory=lambda: OptimizerSpec("sgd", 0.1, 1e-4, 0.9)
    )
    target_opt: OptimizerSpec = field(
        default_factory=lambda: OptimizerSpec("adamw", 1e-3, 1e-4)
    )
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    augmentation: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    # Initialize f_t as an exact copy of f_s instead of randomly.  Off by
    # default so distillation demonstrably does real work.
    init_target_from_source: bool = False
    # Ablation: run extra adaptation-only forward passes through f_s in step 2
    # (the default already adapts BN stats inside the distillation forwards).
    extra_bn_pass: bool = False
    # Forward the concatenated [x; z] batch in step 2 instead of two separate
    # per-domain passes.  Batch statistics then match the blended running
    # statistics used at inference, which matters a lot at short schedules.
    distill_mixed_batch: bool = True
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (BN needs batches)")


@dataclass
class LossRecord:
    """Losses of one optimization step; the regression total is always the
    equal-weight average of its source and target halves."""

    step: int
    l_ce: float = 0.0
    l_regression: float = 0.0
    l_reg_source: float = 0.0
    l_reg_target: float = 0.0

    def __post_init__(self):
        recombined = 0.5 * self.l_reg_source + 0.5 * self.l_reg_target
        if abs(self.l_regression - recombined) > 1e-9:
            raise ValueError("l_regression must equal the half/half recombination")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the offending record."""

    def __init__(self, message: str, record: LossRecord):
        super().__init__(message)
        self.record = record


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).float()


def _augment(images: np.ndarray, aug: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random crop (reflect-padded) + horizontal flip, per sample."""
    if aug.crop_pad <= 0 and aug.hflip_p <= 0:
        return images
    n, _, h, w = images.shape
    out = images
    if aug.crop_pad > 0:
        p = aug.crop_pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
        ys = rng.integers(0, 2 * p + 1, n)
        xs = rng.integers(0, 2 * p + 1, n)
        out = np.stack(
            [padded[i, :, ys[i] : ys[i] + h, xs[i] : xs[i] + w] for i in range(n)]
        )
    if aug.hflip_p > 0:
        flip = rng.random(n) < aug.hflip_p
        out = out.copy()
        out[flip] = out[flip][..., ::-1]
    return out


def _build_optimizer(params, spec: OptimizerSpec) -> torch.optim.Optimizer:
    if spec.kind == "sgd":
        return torch.optim.SGD(
            params, lr=spec.lr, momentum=spec.momentum, weight_decay=spec.weight_decay
        )
    return torch.optim.AdamW(params, lr=spec.lr, weight_decay=spec.weight_decay)


def _build_scheduler(opt, spec: ScheduleSpec):
    if spec.kind != "cosine":
        raise ValueError(f"unknown schedule kind {spec.kind!r}")
    return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=spec.t_max, eta_min=spec.eta_min)


def _check_finite(loss: torch.Tensor, record: LossRecord):
    if not torch.isfinite(loss):
        raise DivergenceError("non-finite training loss", record)


def train_source_step(bundle: ModelBundle, images, labels, opt, step: int = 0) -> LossRecord:
    """One supervised CE step on (f_s, g_s); f_t is untouched."""
    bundle.f_s.train()
    bundle.g_s.train()
    x = _to_tensor(images)
    y = torch.from_numpy(np.ascontiguousarray(labels)).long()
    logits = bundle.g_s(bundle.f_s(x))
    loss = F.cross_entropy(logits, y)
    record = LossRecord(step=step, l_ce=float(loss.detach()))
    _check_finite(loss, record)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return record


def distill_step(
    bundle: ModelBundle,
    source_images,
    target_images,
    opt,
    step: int = 0,
    mixed_batch: bool = True,
) -> LossRecord:
    """One distillation step: f_t regresses f_s's embeddings on both domains.

    f_s runs in train mode under no_grad, so its parameters stay fixed while
    its BN running statistics absorb both batches.  Only f_t is updated.
    With mixed_batch the two domains share one concatenated forward, so batch
    statistics equal the blend the models will run with at inference.
    """
    bundle.f_s.train()
    bundle.f_t.train()
    x = _to_tensor(source_images)
    z = _to_tensor(target_images)
    if mixed_batch:
        xz = torch.cat([x, z])
        with torch.no_grad():
            e_s = bundle.f_s(xz)  # BN stats update happens here
        e_t = bundle.f_t(xz)
        e_sx, e_sz = e_s[: len(x)], e_s[len(x) :]
        e_tx, e_tz = e_t[: len(x)], e_t[len(x) :]
    else:
        with torch.no_grad():
            e_sx = bundle.f_s(x)  # BN stats update happens here
            e_sz = bundle.f_s(z)
        e_tx = bundle.f_t(x)
        e_tz = bundle.f_t(z)
    l_src = F.mse_loss(e_tx, e_sx)  # mean over batch and feature axes
    l_tgt = F.mse_loss(e_tz, e_sz)
    loss = 0.5 * l_src + 0.5 * l_tgt
    record = LossRecord(
        step=step,
        l_regression=float(0.5 * float(l_src.detach()) + 0.5 * float(l_tgt.detach())),
        l_reg_source=float(l_src.detach()),
        l_reg_target=float(l_tgt.detach()),
    )
    _check_finite(loss, record)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return record


def _epoch_records_to_metrics(records, epoch: int, run_id: str):
    if not records:
        return []
    out = []
    for name, attr in (
        ("train/l_ce", "l_ce"),
        ("train/l_regression", "l_regression"),
        ("train/l_reg_source", "l_reg_source"),
        ("train/l_reg_target", "l_reg_target"),
    ):
        vals = [getattr(r, attr) for r in records]
        out.append(
            MetricRecord(name=name, value=float(np.mean(vals)), tags={"epoch": epoch}, run_id=run_id)
        )
    return out


def train_baseline(
    source_ds: LabeledDataset,
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    run_id: str = "baseline",
) -> tuple:
    """Supervised source-only training of (f_s, g_s).

    Returns (bundle, metric records).  The returned bundle's f_t is left at
    its random initialization and plays no role in the baseline route.
    """
    seed_everything(cfg.seed)
    bundle = build_bundle(
        cfg.arch, source_ds.num_classes, seed=cfg.seed, normalization=source_ds.normalization
    )
    opt = _build_optimizer(
        list(bundle.f_s.parameters()) + list(bundle.g_s.parameters()), cfg.source_opt
    )
    sched = _build_scheduler(opt, cfg.schedule)
    aug_rng = np.random.default_rng([cfg.seed, 0xA06])
    plan = BatchPlan(cfg.batch_size, shuffle_seed=cfg.seed)

    metrics, step = [], 0
    try:
        for epoch in range(cfg.epochs):
            epoch_records = []
            for idx in iter_batches(len(source_ds), plan, epoch=epoch):
                images = _augment(source_ds.images[idx], cfg.augmentation, aug_rng)
                epoch_records.append(
                    train_source_step(bundle, images, source_ds.labels[idx], opt, step=step)
                )
                step += 1
            sched.step()
            metrics.extend(_epoch_records_to_metrics(epoch_records, epoch, run_id))
            _maybe_checkpoint(bundle, cfg, out_dir, epoch, step)
    except DivergenceError:
        _maybe_checkpoint(bundle, cfg, out_dir, -1, step, force=True)
        raise
    if out_dir is not None:
        save_bundle(bundle, Path(out_dir) / "checkpoints" / "final", step=step)
    return bundle, metrics


def _maybe_checkpoint(bundle, cfg, out_dir, epoch, step, force=False):
    if out_dir is None:
        return
    if force:
        save_bundle(bundle, Path(out_dir) / "checkpoints" / "last", step=step)
        return
    if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
        save_bundle(bundle, Path(out_dir) / "checkpoints" / f"epoch-{epoch:04d}", step=step)


def train_dafr2(
    source_ds: LabeledDataset,
    target_ds: UnlabeledDataset,
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    run_id: str = "dafr2",
) -> tuple:
    """Full two-step adaptation loop over a labeled source and unlabeled target.

    Per epoch, supervised source steps are interleaved one-for-one with
    distillation steps on freshly sampled source/target batch pairs; the
    target stream recycles when shorter.  Returns (bundle, metric records).
    """
    if source_ds.image_shape != target_ds.image_shape:
        raise ValueError(
            f"domains disagree on image geometry: {source_ds.image_shape} vs {target_ds.image_shape}"
        )
    seed_everything(cfg.seed)
    bundle = build_bundle(
        cfg.arch, source_ds.num_classes, seed=cfg.seed, normalization=source_ds.normalization
    )
    if cfg.init_target_from_source:
        copy_module_state(bundle.f_s, bundle.f_t)

    opt_s = _build_optimizer(
        list(bundle.f_s.parameters()) + list(bundle.g_s.parameters()), cfg.source_opt
    )
    opt_t = _build_optimizer(bundle.f_t.parameters(), cfg.target_opt)
    sched_s = _build_scheduler(opt_s, cfg.schedule)
    sched_t = _build_scheduler(opt_t, cfg.schedule)
    aug_rng = np.random.default_rng([cfg.seed, 0xA06])

    n_s, n_t = len(source_ds), len(target_ds)
    plan = BatchPlan(cfg.batch_size, shuffle_seed=cfg.seed)
    # Step 2 resamples x independently of step 1 and pairs it with a target
    # stream that cycles independently.
    plan_x = BatchPlan(cfg.batch_size, shuffle_seed=cfg.seed + 1)
    plan_z = BatchPlan(cfg.batch_size, shuffle_seed=cfg.seed + 2)

    metrics, step = [], 0
    try:
        for epoch in range(cfg.epochs):
            epoch_records = []
            z_batches = _cycling_batches(n_t, plan_z, epoch)
            step1 = iter_batches(n_s, plan, epoch=epoch)
            step2 = iter_batches(n_s, plan_x, epoch=epoch)
            for idx_ce, idx_x in zip(step1, step2):
                # Step 1: supervised CE on the source model.
                images = _augment(source_ds.images[idx_ce], cfg.augmentation, aug_rng)
                epoch_records.append(
                    train_source_step(bundle, images, source_ds.labels[idx_ce], opt_s, step=step)
                )
                step += 1
                # Step 2: distillation with BN-statistics adaptation.
                idx_z = next(z_batches)
                x = _augment(source_ds.images[idx_x], cfg.augmentation, aug_rng)
                z = _augment(target_ds.images[idx_z], cfg.augmentation, aug_rng)
                if cfg.extra_bn_pass:
                    bundle.f_s.train()
                    with torch.no_grad():
                        bundle.f_s(_to_tensor(z))
                epoch_records.append(
                    distill_step(
                        bundle, x, z, opt_t, step=step, mixed_batch=cfg.distill_mixed_batch
                    )
                )
                step += 1
            sched_s.step()
            sched_t.step()
            metrics.extend(_epoch_records_to_metrics(epoch_records, epoch, run_id))
            _maybe_checkpoint(bundle, cfg, out_dir, epoch, step)
    except DivergenceError:
        _maybe_checkpoint(bundle, cfg, out_dir, -1, step, force=True)
        raise
    if out_dir is not None:
        save_bundle(bundle, Path(out_dir) / "checkpoints" / "final", step=step)
    return bundle, metrics


def _cycling_batches(n: int, plan: BatchPlan, epoch: int):
    """Endless batch stream that reshuffles each pass (deterministically)."""
    cycle = 0
    while True:
        for idx in iter_batches(n, plan, epoch=epoch * 1000 + cycle):
            yield idx
        cycle += 1


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def infer(bundle: ModelBundle, images, route: str = "adapted") -> tuple:
    """Predict labels by feeding images through the chosen route in eval mode.

    The adapted route is the hypothesis transfer: the frozen source classifier
    applied to target-extractor features.
    """
    f = bundle.f_t if route == "adapted" else bundle.f_s
    f.eval()
    bundle.g_s.eval()
    with torch.no_grad():
        logits = bundle.g_s(f(_to_tensor(images)))
    logits = logits.numpy()
    return logits.argmax(axis=1), logits


@dataclass
class EvalResult:
    accuracy: float
    mean_ce: float
    confusion: np.ndarray  # [K, K], rows = true class
    n: int
    route: str
    dataset: str
    provenance: str = "natural"

    def records(self, run_id: str = "", extra_tags: Optional[dict] = None) -> list:
        tags = {"route": self.route, "dataset": self.dataset, "provenance": self.provenance}
        tags.update(extra_tags or {})
        return [
            MetricRecord(name="accuracy", value=self.accuracy, tags=dict(tags), run_id=run_id),
            MetricRecord(name="mean_ce", value=self.mean_ce, tags=dict(tags), run_id=run_id),
        ]


def evaluate(bundle: ModelBundle, ds, route: str = "baseline", batch_size: int = 512) -> EvalResult:
    """Accuracy and mean CE of one route over a labeled (or eval-labeled) set."""
    if isinstance(ds, LabeledDataset):
        labels = ds.labels
        provenance = "natural"
    else:
        if ds.eval_labels is None:
            raise ValueError("dataset has no labels to evaluate against")
        labels = ds.eval_labels
        provenance = ds.provenance
    if route not in ("baseline", "adapted"):
        raise ValueError(f"route must be 'baseline' or 'adapted', got {route!r}")

    num_classes = bundle.g_s.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    ce_sum, correct = 0.0, 0
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        preds, logits = infer(bundle, ds.images[sl], route=route)
        y = labels[sl]
        t = torch.from_numpy(logits)
        ce_sum += float(
            F.cross_entropy(t, torch.from_numpy(y).long(), reduction="sum")
        )
        correct += int((preds == y).sum())
        np.add.at(confusion, (y, preds), 1)
    n = len(ds)
    return EvalResult(
        accuracy=correct / n,
        mean_ce=ce_sum / n,
        confusion=confusion,
        n=n,
        route=route,
        dataset=ds.name,
        provenance=provenance,
    )
