"""Command-line entry point: dataset corruption, training, evaluation,
analysis, oracles, full experiment runs and reporting.

Configs are flat ``key = value`` text with dotted keys; every run echoes its
fully resolved config so results are auditable.  Exit codes: 0 ok, 2 config
error, 3 divergence, 4 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import (
    MineConfig,
    energy_distance,
    estimate_mi,
    export_features_2d,
    frechet_distance,
    local_lipschitz,
    scatter_report,
)
from .corruptions import IMPLEMENTED_KINDS, CorruptionSpec, corrupt, parse_provenance
from .datasets import (
    LabeledDataset,
    load_dataset,
    load_idx,
    save_dataset,
    split,
    synth_shapes,
)
from .metrics import MetricRecord, MetricsWriter, read_metrics
from .nn import ArchConfig, ModelBundle, forward_features, load_bundle
from .oracles import (
    DecompositionSpec,
    fd_diagonal_oracle,
    gaussian_mi_oracle,
    linear_lipschitz_oracle,
    regression_recovery_oracle,
    whitening_oracle,
)
from .trainer import (
    AugmentSpec,
    DivergenceError,
    OptimizerSpec,
    ScheduleSpec,
    TrainConfig,
    evaluate,
    train_baseline,
    train_dafr2,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_STAGE = 4


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad value, or missing input."""


# ---------------------------------------------------------------------------
# Flat key=value configuration
# ---------------------------------------------------------------------------

# Registry of every configurable key: dotted name -> (type tag, default).
CONFIG_KEYS = {
    "seed": ("int", 0),
    "dataset.kind": ("str", "synthetic"),  # synthetic | idx | native
    "dataset.path": ("str", ""),
    "dataset.labels_path": ("str", ""),
    "dataset.n_train": ("int", 4000),
    "dataset.n_test": ("int", 1500),
    "dataset.image_size": ("int", 28),
    "dataset.seed": ("int", 100),
    "dataset.test_fraction": ("float", 0.25),
    "corruptions": ("str", "gaussian_noise:3"),
    "corruption.seed": ("int", 1234),
    "trainer.epochs": ("int", 20),
    "trainer.batch_size": ("int", 128),
    "trainer.source_opt.kind": ("str", "sgd"),
    "trainer.source_opt.lr": ("float", 0.1),
    "trainer.source_opt.weight_decay": ("float", 1e-4),
    "trainer.source_opt.momentum": ("float", 0.9),
    "trainer.target_opt.kind": ("str", "adamw"),
    "trainer.target_opt.lr": ("float", 1e-3),
    "trainer.target_opt.weight_decay": ("float", 1e-4),
    "trainer.schedule.kind": ("str", "cosine"),
    "trainer.schedule.t_max": ("int", 300),
    "trainer.schedule.eta_min": ("float", 1e-4),
    "trainer.augmentation.crop_pad": ("int", 4),
    "trainer.augmentation.hflip_p": ("float", 0.5),
    "trainer.init_target_from_source": ("bool", False),
    "trainer.extra_bn_pass": ("bool", False),
    "trainer.distill_mixed_batch": ("bool", True),
    "trainer.checkpoint_every": ("int", 0),
    "trainer.arch.in_channels": ("int", 1),
    "trainer.arch.stem_channels": ("int", 16),
    "trainer.arch.block_channels": ("ints", (16, 32, 64, 128)),
    "trainer.arch.block_strides": ("ints", (1, 2, 2, 2)),
    "trainer.arch.embedding_dim": ("int", 128),
    "trainer.arch.bn_momentum": ("float", 0.1),
    "trainer.arch.bn_eps": ("float", 1e-5),
    "analysis.mi": ("bool", False),
    "analysis.fd": ("bool", False),
    "analysis.llc": ("bool", False),
    "analysis.features2d": ("bool", False),
    "analysis.scatter": ("bool", False),
    "analysis.mine.steps": ("int", 1500),
    "analysis.mine.batch": ("int", 512),
    "analysis.mine.hidden_width": ("int", 256),
    "analysis.mine.lr": ("float", 1e-3),
    "analysis.llc.samples": ("int", 20_000),
    "analysis.llc.paper_scale": ("bool", False),
}


def _coerce(key: str, raw: str):
    tag, _ = CONFIG_KEYS[key]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tag == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {tag})") from exc


def parse_flat_config(text: str) -> dict:
    """Parse ``key = value`` lines (# comments, blank lines allowed)."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def _parse_corruption_list(raw: str) -> list:
    pairs = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ConfigError(f"corruption entry {item!r} must be kind:severity")
        kind, sev = item.split(":", 1)
        try:
            severity = int(sev)
        except ValueError as exc:
            raise ConfigError(f"bad severity in {item!r}") from exc
        if kind not in IMPLEMENTED_KINDS:
            raise ConfigError(f"corruption kind {kind!r} is not implemented")
        if severity not in (1, 2, 3, 4, 5):
            raise ConfigError(f"severity must be 1..5 in {item!r}")
        pairs.append((kind, severity))
    return pairs


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment: every key of CONFIG_KEYS materialized."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def corruption_pairs(self) -> list:
        return _parse_corruption_list(self.values["corruptions"])

    def trainer_config(self, seed: int) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["trainer.epochs"],
            batch_size=v["trainer.batch_size"],
            source_opt=OptimizerSpec(
                v["trainer.source_opt.kind"],
                v["trainer.source_opt.lr"],
                v["trainer.source_opt.weight_decay"],
                v["trainer.source_opt.momentum"],
            ),
            target_opt=OptimizerSpec(
                v["trainer.target_opt.kind"],
                v["trainer.target_opt.lr"],
                v["trainer.target_opt.weight_decay"],
            ),
            schedule=ScheduleSpec(
                v["trainer.schedule.kind"],
                v["trainer.schedule.t_max"],
                v["trainer.schedule.eta_min"],
            ),
            augmentation=AugmentSpec(
                v["trainer.augmentation.crop_pad"], v["trainer.augmentation.hflip_p"]
            ),
            seed=seed,
            arch=ArchConfig(
                in_channels=v["trainer.arch.in_channels"],
                stem_channels=v["trainer.arch.stem_channels"],
                block_channels=v["trainer.arch.block_channels"],
                block_strides=v["trainer.arch.block_strides"],
                embedding_dim=v["trainer.arch.embedding_dim"],
                bn_momentum=v["trainer.arch.bn_momentum"],
                bn_eps=v["trainer.arch.bn_eps"],
            ),
            init_target_from_source=v["trainer.init_target_from_source"],
            extra_bn_pass=v["trainer.extra_bn_pass"],
            distill_mixed_batch=v["trainer.distill_mixed_batch"],
            checkpoint_every=v["trainer.checkpoint_every"],
        )

    def mine_config(self, seed: int = 0) -> MineConfig:
        v = self.values
        return MineConfig(
            hidden_width=v["analysis.mine.hidden_width"],
            steps=v["analysis.mine.steps"],
            batch=v["analysis.mine.batch"],
            lr=v["analysis.mine.lr"],
            seed=seed,
        )

    def resolved_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def build_experiment_config(config_path=None, overrides=()) -> ExperimentConfig:
    values = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for key, raw in parse_flat_config(path.read_text()).items():
            values[key] = _coerce(key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    cfg = ExperimentConfig(values)
    cfg.corruption_pairs  # validate eagerly
    return cfg


# ---------------------------------------------------------------------------
# Dataset materialization
# ---------------------------------------------------------------------------


def materialize_datasets(cfg: ExperimentConfig) -> tuple:
    """Resolve the dataset spec into (train, test) labeled datasets."""
    kind = cfg["dataset.kind"]
    if kind == "synthetic":
        train = synth_shapes(cfg["dataset.n_train"], cfg["dataset.seed"], cfg["dataset.image_size"])
        test = synth_shapes(cfg["dataset.n_test"], cfg["dataset.seed"] + 1, cfg["dataset.image_size"])
        return train, test

    path = cfg["dataset.path"]
    if not path or not Path(path).exists():
        raise ConfigError(f"dataset path missing or nonexistent: {path!r}")
    if kind == "idx":
        labels = cfg["dataset.labels_path"]
        if not labels or not Path(labels).exists():
            raise ConfigError(f"labels path missing or nonexistent: {labels!r}")
        ds = load_idx(path, labels)
    elif kind == "native":
        ds = load_dataset(path)
        if not isinstance(ds, LabeledDataset):
            raise ConfigError("native dataset must be labeled for training")
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    frac = cfg["dataset.test_fraction"]
    train, test = split(ds, [1.0 - frac, frac], seed=cfg["dataset.seed"])
    if cfg["dataset.n_train"] and cfg["dataset.n_train"] < len(train):
        n = cfg["dataset.n_train"]
        train = LabeledDataset(
            train.images[:n], train.labels[:n], train.name, train.normalization, train.num_classes
        )
    if cfg["dataset.n_test"] and cfg["dataset.n_test"] < len(test):
        n = cfg["dataset.n_test"]
        test = LabeledDataset(
            test.images[:n], test.labels[:n], test.name, test.normalization, test.num_classes
        )
    return train, test


# ---------------------------------------------------------------------------
# Experiment orchestration
# ---------------------------------------------------------------------------


def _embed_all(extractor, images, batch=512):
    chunks = [
        forward_features(extractor, images[s : s + batch]).embeddings
        for s in range(0, len(images), batch)
    ]
    return np.concatenate(chunks)


def _route_fn(extractor, head):
    """Logits as a function of points in normalized input space.

    Probes are de-normalized before the forward pass, which exactly cancels
    the model-side input normalization, so gradients are taken in the
    normalized space.
    """
    import torch

    extractor.eval()
    head.eval()
    mean = extractor.input_mean.detach()
    std = extractor.input_std.detach()

    def fn(x):
        return head(extractor(x * std + mean))

    return fn


def _run_analyses(cfg, writer, run_id, seed_idx, kind, severity, baseline, adapted, test, test_corr, out_dir):
    tags = {"corruption": kind, "severity": severity, "seed": seed_idx}
    if cfg["analysis.mi"] or cfg["analysis.fd"]:
        emb = {
            "baseline": (_embed_all(baseline.f_s, test.images), _embed_all(baseline.f_s, test_corr.images)),
            "adapted": (_embed_all(adapted.f_t, test.images), _embed_all(adapted.f_t, test_corr.images)),
        }
        if cfg["analysis.mi"]:
            for route, (clean_e, corr_e) in emb.items():
                mi = estimate_mi(clean_e, corr_e, cfg.mine_config(seed=seed_idx))
                writer.write(
                    MetricRecord("mi", mi, {**tags, "route": route}, run_id=run_id)
                )
        if cfg["analysis.fd"]:
            for route, (clean_e, corr_e) in emb.items():
                fd = frechet_distance(clean_e, corr_e)
                writer.write(
                    MetricRecord("fd", fd, {**tags, "route": route}, run_id=run_id)
                )
    if cfg["analysis.llc"]:
        n_probes = 200_000 if cfg["analysis.llc.paper_scale"] else cfg["analysis.llc.samples"]
        shape = tuple(test.images.shape[1:])
        for route, bundle_, extractor in (
            ("baseline", baseline, baseline.f_s),
            ("adapted", adapted, adapted.f_t),
        ):
            llc = local_lipschitz(
                _route_fn(extractor, bundle_.g_s), n_probes, shape, seed=seed_idx
            )
            writer.write(MetricRecord("llc", llc, {**tags, "route": route}, run_id=run_id))
    if cfg["analysis.features2d"]:
        rows, mode = export_features_2d(
            adapted, {"source": test, "target": test_corr}, baseline_bundle=baseline
        )
        out_csv = out_dir / f"features2d-{kind}-s{severity}-seed{seed_idx}.csv"
        with open(out_csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["x", "y", "label", "domain", "route"])
            w.writeheader()
            w.writerows(rows)
        writer.write(
            MetricRecord("features2d_mode", mode, {**tags}, run_id=run_id)
        )
        for route in ("baseline", "adapted"):
            src = np.array([[r["x"], r["y"]] for r in rows if r["route"] == route and r["domain"] == "source"])
            tgt = np.array([[r["x"], r["y"]] for r in rows if r["route"] == route and r["domain"] == "target"])
            if len(src) and len(tgt):
                writer.write(
                    MetricRecord(
                        "features2d_energy_distance",
                        energy_distance(src, tgt),
                        {**tags, "route": route},
                        run_id=run_id,
                    )
                )
    if cfg["analysis.scatter"]:
        for value_kind in ("ce_loss", "nn_feature_distance"):
            report_obj = scatter_report(adapted, baseline, test_corr, value_kind)
            out_csv = out_dir / f"scatter-{value_kind}-{kind}-s{severity}-seed{seed_idx}.csv"
            with open(out_csv, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(
                    ["index", "baseline_value", "adapted_value", "baseline_correct",
                     "adapted_correct", "corrected", "flagged"]
                )
                for r in report_obj.rows:
                    w.writerow(
                        [r.index, r.baseline_value, r.adapted_value, r.baseline_correct,
                         r.adapted_correct, r.corrected, r.flagged]
                    )
            med_b, med_a = report_obj.medians()
            writer.write(
                MetricRecord(
                    "scatter_median",
                    [med_b, med_a],
                    {**tags, "kind": value_kind},
                    run_id=run_id,
                )
            )


def run_experiment(cfg: ExperimentConfig, out_dir, seeds: int = 1) -> Path:
    """Execute baseline training, corruption, adaptation, evaluation and the
    requested analyses; everything lands under out_dir."""
    train, test = materialize_datasets(cfg)  # validate inputs before artifacts
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.resolved_text())
    writer = MetricsWriter(out / "metrics.jsonl")

    for seed_idx in range(seeds):
        run_id = f"seed-{seed_idx}"
        tcfg = cfg.trainer_config(seed=cfg["seed"] + seed_idx)
        baseline, train_recs = train_baseline(
            train, tcfg, out_dir=out / run_id / "baseline", run_id=run_id
        )
        writer.write_all(train_recs)
        res = evaluate(baseline, test, route="baseline")
        writer.write_all(res.records(run_id, {"seed": seed_idx}))

        for kind, severity in cfg.corruption_pairs:
            test_corr = corrupt(test, CorruptionSpec(kind, severity, seed=cfg["corruption.seed"]))
            target = corrupt(train, CorruptionSpec(kind, severity, seed=cfg["corruption.seed"] + 1))
            adapted, adapt_recs = train_dafr2(
                train,
                target,
                tcfg,
                out_dir=out / run_id / f"dafr2-{kind}-s{severity}",
                run_id=f"{run_id}/{kind}-s{severity}",
            )
            writer.write_all(adapt_recs)
            extra = {"corruption": kind, "severity": severity, "seed": seed_idx}
            writer.write_all(evaluate(baseline, test_corr, route="baseline").records(run_id, extra))
            writer.write_all(evaluate(adapted, test_corr, route="adapted").records(run_id, extra))
            writer.write_all(evaluate(adapted, test, route="adapted").records(run_id, extra))
            _run_analyses(
                cfg, writer, run_id, seed_idx, kind, severity, baseline, adapted, test, test_corr, out
            )

    if seeds > 1:
        _write_seed_aggregates(out / "metrics.jsonl", writer, seeds)
    return out


def _write_seed_aggregates(metrics_path, writer, seeds: int):
    records, _ = read_metrics(metrics_path)
    groups = {}
    for r in records:
        if "seed" not in r.tags or not isinstance(r.value, (int, float)):
            continue
        tags = {k: v for k, v in r.tags.items() if k != "seed"}
        groups.setdefault((r.name, tuple(sorted(tags.items()))), []).append(float(r.value))
    for (name, tag_items), values in groups.items():
        if len(values) < 2:
            continue
        tags = dict(tag_items)
        tags.update({"stat": "mean_std", "n_seeds": len(values)})
        writer.write(
            MetricRecord(name, [float(np.mean(values)), float(np.std(values))], tags, run_id="aggregate")
        )


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def build_report(run_dir) -> dict:
    """Summaries recomputed purely from metrics.jsonl."""
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.jsonl"
    if not metrics_path.exists():
        raise ConfigError(f"no metrics.jsonl under {run_dir}")
    records, skipped = read_metrics(metrics_path)

    def acc_values(route, corruption=None, severity=None, clean=False):
        vals = []
        for r in records:
            if r.name != "accuracy" or r.run_id == "aggregate":
                continue
            if r.tags.get("route") != route:
                continue
            prov = parse_provenance(r.tags.get("provenance", "natural"))
            if clean and prov is not None:
                continue
            if corruption is not None:
                if prov is None or prov["kind"] != corruption or prov["severity"] != severity:
                    continue
                if r.tags.get("corruption") != corruption:
                    continue
            vals.append(float(r.value))
        return vals

    pairs = sorted(
        {
            (r.tags["corruption"], r.tags["severity"])
            for r in records
            if r.name == "accuracy" and "corruption" in r.tags and r.run_id != "aggregate"
        }
    )
    corruption_rows = []
    for kind, severity in pairs:
        base = acc_values("baseline", kind, severity)
        adapt = acc_values("adapted", kind, severity)
        if not base or not adapt:
            continue
        corruption_rows.append(
            {
                "corruption": kind,
                "severity": severity,
                "baseline_acc": float(np.mean(base)),
                "baseline_std": float(np.std(base)),
                "adapted_acc": float(np.mean(adapt)),
                "adapted_std": float(np.std(adapt)),
                "improvement": float(np.mean(adapt) - np.mean(base)),
                "n_seeds": len(base),
            }
        )

    clean_base = acc_values("baseline", clean=True)
    clean_adapt = acc_values("adapted", clean=True)
    summary = {
        "clean_baseline_acc": float(np.mean(clean_base)) if clean_base else None,
        "clean_adapted_acc": float(np.mean(clean_adapt)) if clean_adapt else None,
        "corruptions": corruption_rows,
        "skipped_log_lines": skipped,
    }
    return summary


def write_report_files(run_dir) -> dict:
    run_dir = Path(run_dir)
    summary = build_report(run_dir)
    rows = summary["corruptions"]

    with open(run_dir / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["corruption", "severity", "baseline_acc", "baseline_std",
             "adapted_acc", "adapted_std", "improvement", "n_seeds"]
        )
        for r in rows:
            w.writerow(
                [r["corruption"], r["severity"], f"{r['baseline_acc']:.6f}", f"{r['baseline_std']:.6f}",
                 f"{r['adapted_acc']:.6f}", f"{r['adapted_std']:.6f}", f"{r['improvement']:.6f}", r["n_seeds"]]
            )

    lines = []
    if summary["clean_baseline_acc"] is not None:
        lines.append(f"clean accuracy (baseline route): {summary['clean_baseline_acc']:.4f}")
    if summary["clean_adapted_acc"] is not None:
        lines.append(f"clean accuracy (adapted route):  {summary['clean_adapted_acc']:.4f}")
    if rows:
        lines.append("")
        lines.append(f"{'corruption':<18}{'sev':>4}{'baseline':>10}{'adapted':>10}{'improve':>10}")
        for r in rows:
            lines.append(
                f"{r['corruption']:<18}{r['severity']:>4}{r['baseline_acc']:>10.4f}"
                f"{r['adapted_acc']:>10.4f}{r['improvement']:>+10.4f}"
            )
    (run_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def render_plots(run_dir) -> list:
    from .plots import plot_corruption_bars, plot_feature_clouds, plot_scatter_45

    run_dir = Path(run_dir)
    produced = []
    summary = build_report(run_dir)
    if summary["corruptions"]:
        produced.append(
            plot_corruption_bars(summary["corruptions"], run_dir / "corruption_accuracy.png")
        )
    for csv_path in sorted(run_dir.glob("scatter-*.csv")):
        label = "CE loss" if "ce_loss" in csv_path.name else "NN feature distance"
        produced.append(plot_scatter_45(csv_path, csv_path.with_suffix(".png"), label))
    for csv_path in sorted(run_dir.glob("features2d-*.csv")):
        produced.append(plot_feature_clouds(csv_path, csv_path.with_suffix(".png")))
    return produced


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _default_out(args_out) -> Path:
    if args_out:
        return Path(args_out)
    return Path(os.environ.get("DAFR2_OUT", "runs")) / "latest"


def cmd_corrupt(args) -> int:
    ds = load_dataset(args.in_dir)
    spec = CorruptionSpec(args.kind, args.severity, seed=args.seed)
    out = corrupt(ds, spec)
    save_dataset(out, args.out)
    print(f"wrote {args.out} ({len(out)} images, provenance {out.provenance})")
    return EXIT_OK


def cmd_train(args, adapt: bool) -> int:
    cfg = build_experiment_config(args.config, args.overrides)
    out = _default_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.resolved_text())
    train, test = materialize_datasets(cfg)
    tcfg = cfg.trainer_config(seed=cfg["seed"])
    writer = MetricsWriter(out / "metrics.jsonl")
    if adapt:
        pairs = cfg.corruption_pairs
        if len(pairs) != 1:
            raise ConfigError("train-dafr2 needs exactly one corruption entry")
        kind, severity = pairs[0]
        target = corrupt(train, CorruptionSpec(kind, severity, seed=cfg["corruption.seed"] + 1))
        bundle, recs = train_dafr2(train, target, tcfg, out_dir=out, run_id="train")
        writer.write_all(recs)
        test_corr = corrupt(test, CorruptionSpec(kind, severity, seed=cfg["corruption.seed"]))
        extra = {"corruption": kind, "severity": severity}
        writer.write_all(evaluate(bundle, test_corr, route="adapted").records("train", extra))
        writer.write_all(evaluate(bundle, test, route="adapted").records("train", extra))
    else:
        bundle, recs = train_baseline(train, tcfg, out_dir=out, run_id="train")
        writer.write_all(recs)
        writer.write_all(evaluate(bundle, test, route="baseline").records("train"))
    print(f"checkpoints and metrics under {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle = load_bundle(args.bundle)
    ds = load_dataset(args.data)
    res = evaluate(bundle, ds, route=args.route)
    payload = {
        "accuracy": res.accuracy,
        "mean_ce": res.mean_ce,
        "n": res.n,
        "route": res.route,
        "dataset": res.dataset,
        "provenance": res.provenance,
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        MetricsWriter(args.out).write_all(res.records("evaluate"))
    return EXIT_OK


def cmd_analyze(args) -> int:
    bundle = load_bundle(args.bundle)
    baseline = load_bundle(args.baseline) if args.baseline else bundle
    results = {}
    if args.what in ("mi", "fd"):
        if not args.data or not args.data2:
            raise ConfigError(f"analyze {args.what} needs --data (clean) and --data2 (shifted)")
        clean = load_dataset(args.data)
        shifted = load_dataset(args.data2)
        for route, extractor in (("baseline", baseline.f_s), ("adapted", bundle.f_t)):
            e_clean = _embed_all(extractor, clean.images)
            e_shift = _embed_all(extractor, shifted.images)
            if args.what == "mi":
                results[route] = estimate_mi(
                    e_clean, e_shift, MineConfig(steps=args.mine_steps, seed=args.seed)
                )
            else:
                results[route] = frechet_distance(e_clean, e_shift)
    elif args.what == "llc":
        if not args.data:
            raise ConfigError("analyze llc needs --data for the input shape")
        ds = load_dataset(args.data)
        shape = tuple(ds.images.shape[1:])
        n = 200_000 if args.paper_scale else args.samples
        results["baseline"] = local_lipschitz(_route_fn(baseline.f_s, baseline.g_s), n, shape, seed=args.seed)
        results["adapted"] = local_lipschitz(_route_fn(bundle.f_t, bundle.g_s), n, shape, seed=args.seed)
    elif args.what == "features2d":
        if not args.data or not args.data2:
            raise ConfigError("analyze features2d needs --data and --data2")
        rows, mode = export_features_2d(
            bundle,
            {"source": load_dataset(args.data), "target": load_dataset(args.data2)},
            baseline_bundle=baseline,
        )
        out = Path(args.out or "features2d.csv")
        with open(out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["x", "y", "label", "domain", "route"])
            w.writeheader()
            w.writerows(rows)
        print(json.dumps({"rows": len(rows), "mode": mode, "out": str(out)}))
        return EXIT_OK
    elif args.what == "scatter":
        if not args.data:
            raise ConfigError("analyze scatter needs --data (corrupted, labeled)")
        ds = load_dataset(args.data)
        kind = args.kind or "ce_loss"
        report_obj = scatter_report(bundle, baseline, ds, kind)
        out = Path(args.out or f"scatter-{kind}.csv")
        with open(out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "baseline_value", "adapted_value", "baseline_correct",
                        "adapted_correct", "corrected", "flagged"])
            for r in report_obj.rows:
                w.writerow([r.index, r.baseline_value, r.adapted_value, r.baseline_correct,
                            r.adapted_correct, r.corrected, r.flagged])
        med_b, med_a = report_obj.medians()
        print(json.dumps({"rows": len(report_obj.rows), "median_baseline": med_b,
                          "median_adapted": med_a, "out": str(out)}))
        return EXIT_OK
    print(json.dumps(results, indent=2, sort_keys=True))
    if args.out:
        writer = MetricsWriter(args.out)
        for route, value in results.items():
            writer.write(MetricRecord(args.what, value, {"route": route}, run_id="analyze"))
    return EXIT_OK


def _kv_args(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"oracle parameter {item!r} must be key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_oracle(args) -> int:
    kv = _kv_args(args.params)
    name = args.name
    if name == "whitening":
        out = whitening_oracle(
            int(kv.get("d", 4)),
            int(kv.get("m", 10_000)),
            kv.get("structure", "identity"),
            int(kv.get("seed", 0)),
        )
        payload = {"gap": out["gap"], "sigma_bn": np.asarray(out["sigma_bn"]).tolist()}
    elif name == "regression_recovery":
        spec = DecompositionSpec(
            h=kv.get("h", "sin"),
            noise=kv.get("noise", "gaussian:0.3"),
            n_train=int(kv.get("n_train", 20_000)),
            n_test=int(kv.get("n_test", 5_000)),
        )
        payload = regression_recovery_oracle(spec, int(kv.get("capacity", 128)), int(kv.get("seed", 0)))
    elif name == "gaussian_mi":
        payload = {"mi_nats": gaussian_mi_oracle(float(kv["rho"]))}
    elif name == "fd_diagonal":
        parse = lambda s: [float(v) for v in s.split(",")]
        payload = {
            "fd": fd_diagonal_oracle(
                parse(kv["mu1"]), parse(kv["var1"]), parse(kv["mu2"]), parse(kv["var2"])
            )
        }
    elif name == "linear_lipschitz":
        d = int(kv.get("d", 8))
        w = np.random.default_rng(int(kv.get("seed", 0))).standard_normal((d, d))
        payload = {"sigma_max": linear_lipschitz_oracle(w)}
    else:
        raise ConfigError(f"unknown oracle {name!r}")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = build_experiment_config(args.config, args.overrides)
    out = _default_out(args.out)
    try:
        run_experiment(cfg, out, seeds=args.seeds)
    except Exception as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    write_report_files(out)
    print(f"run complete: {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    summary = write_report_files(args.run_dir)
    if summary["skipped_log_lines"]:
        print(f"warning: skipped {summary['skipped_log_lines']} corrupted log lines", file=sys.stderr)
    print((Path(args.run_dir) / "summary.txt").read_text(), end="")
    return EXIT_OK


def cmd_plots(args) -> int:
    produced = render_plots(args.run_dir)
    for p in produced:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dafr2", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corrupt", help="corrupt a saved dataset")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--severity", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for name in ("train-baseline", "train-dafr2"):
        p = sub.add_parser(name, help=f"{name} from a config file")
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("overrides", nargs="*", help="key=value overrides")

    p = sub.add_parser("evaluate", help="evaluate a bundle on a dataset")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--route", choices=("baseline", "adapted"), default="baseline")
    p.add_argument("--out", default=None)

    p = sub.add_parser("analyze", help="run one analysis on saved artifacts")
    p.add_argument("what", choices=("mi", "fd", "llc", "features2d", "scatter"))
    p.add_argument("--bundle", required=True)
    p.add_argument("--baseline", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--data2", default=None)
    p.add_argument("--kind", default=None, help="scatter kind: ce_loss | nn_feature_distance")
    p.add_argument("--samples", type=int, default=20_000)
    p.add_argument("--mine-steps", type=int, default=2_000)
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("oracle", help="print a derivation oracle's output as JSON")
    p.add_argument("name")
    p.add_argument("params", nargs="*", help="key=value parameters")

    p = sub.add_parser("run", help="full experiment pipeline")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("overrides", nargs="*", help="key=value overrides")

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir")

    p = sub.add_parser("plots", help="render plot files for a run directory")
    p.add_argument("run_dir")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "corrupt":
            return cmd_corrupt(args)
        if args.command == "train-baseline":
            return cmd_train(args, adapt=False)
        if args.command == "train-dafr2":
            return cmd_train(args, adapt=True)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        if args.command == "oracle":
            return cmd_oracle(args)
        if args.command == "run":
            return cmd_run(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "plots":
            return cmd_plots(args)
        parser.error(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotImplementedError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc} (last record: {exc.record})", file=sys.stderr)
        return EXIT_DIVERGENCE
    except Exception as exc:  # stage failure
        print(f"stage failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
