"""Analysis battery: neural MI estimation, Fréchet distance between feature
distributions, empirical local Lipschitz constants, 2-D feature export and
the per-sample loss / feature-distance scatter reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn as torch_nn

from .nn import FeatureBatch, ModelBundle, forward_features
from .trainer import infer

__all__ = [
    "MineConfig",
    "MineInstabilityError",
    "estimate_mi",
    "frechet_distance",
    "local_lipschitz",
    "export_features_2d",
    "ScatterReport",
    "ScatterRow",
    "scatter_report",
    "energy_distance",
]


# ---------------------------------------------------------------------------
# Mutual information via the Donsker-Varadhan bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MineConfig:
    """Statistics-network training recipe for the DV-bound MI estimator."""

    hidden_width: int = 256
    steps: int = 2000
    batch: int = 512
    lr: float = 1e-3
    ema_decay: float = 0.99  # log-partition smoothing for the gradient
    seed: int = 0
    eval_every: int = 20

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")


class MineInstabilityError(RuntimeError):
    """The DV objective went non-finite; try a smaller learning rate."""


def _as_matrix(x) -> np.ndarray:
    arr = x.embeddings if isinstance(x, FeatureBatch) else np.asarray(x)
    if arr.ndim == 1:
        arr = arr[:, None]
    return np.ascontiguousarray(arr, dtype=np.float32)


class _StatisticsNet(torch_nn.Module):
    def __init__(self, in_dim: int, width: int):
        super().__init__()
        self.net = torch_nn.Sequential(
            torch_nn.Linear(in_dim, width),
            torch_nn.ReLU(),
            torch_nn.Linear(width, width),
            torch_nn.ReLU(),
            torch_nn.Linear(width, 1),
        )

    def forward(self, a, b):
        return self.net(torch.cat([a, b], dim=1)).squeeze(-1)


def _dv_objective(net, a, b, perm) -> float:
    with torch.no_grad():
        t_joint = net(a, b)
        t_marg = net(a, b[perm])
        return float(t_joint.mean() - torch.logsumexp(t_marg, 0) + math.log(len(t_marg)))


def estimate_mi(a, b, cfg: MineConfig = MineConfig()) -> float:
    """Estimate I(a; b) in nats from row-aligned joint samples.

    Trains a statistics network on the Donsker-Varadhan objective
    E_joint[T] - log E_marginal[e^T], with marginal pairs formed by in-batch
    permutation and an EMA-smoothed log-partition in the gradient.  The
    returned estimate is the median of the full-data objective over the last
    10% of training, which suppresses per-step optimization noise.
    """
    a_np, b_np = _as_matrix(a), _as_matrix(b)
    if len(a_np) != len(b_np):
        raise ValueError("a and b must be row-aligned joint samples")
    m = len(a_np)
    torch.manual_seed(cfg.seed)
    net = _StatisticsNet(a_np.shape[1] + b_np.shape[1], cfg.hidden_width)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    a_t = torch.from_numpy(a_np)
    b_t = torch.from_numpy(b_np)
    eval_perm = torch.from_numpy(rng.permutation(m))

    ema = None
    evals: list[tuple[int, float]] = []
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.integers(0, m, min(cfg.batch, m)))
        sub = torch.from_numpy(rng.permutation(len(idx)))
        aa, bb = a_t[idx], b_t[idx]
        t_joint = net(aa, bb)
        t_marg = net(aa, bb[sub])
        z = torch.exp(t_marg).mean()
        ema = z.detach() if ema is None else cfg.ema_decay * ema + (1 - cfg.ema_decay) * z.detach()
        loss = -(t_joint.mean() - z / ema)
        if not torch.isfinite(loss):
            raise MineInstabilityError(
                f"DV objective became non-finite at step {step}; try a smaller lr"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.steps - 1:
            value = _dv_objective(net, a_t, b_t, eval_perm)
            if not math.isfinite(value):
                raise MineInstabilityError(
                    f"DV objective became non-finite at step {step}; try a smaller lr"
                )
            evals.append((step, value))

    tail_start = cfg.steps * 9 // 10
    tail = [v for s, v in evals if s >= tail_start] or [evals[-1][1]]
    return float(np.median(tail))


# ---------------------------------------------------------------------------
# Fréchet distance between Gaussian fits of two feature sets
# ---------------------------------------------------------------------------


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)  # tiny negatives are numerical noise
    return (vecs * np.sqrt(vals)) @ vecs.T


def _mean_cov(x: np.ndarray) -> tuple:
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    if x.shape[1] == 1:
        cov = cov.reshape(1, 1)
    if x.shape[0] <= x.shape[1]:
        cov = cov + (1e-6 * np.trace(cov) / x.shape[1]) * np.eye(x.shape[1])
    return mu, cov


def frechet_distance(a, b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term is computed as Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}) on the
    symmetrized product, with tiny negative eigenvalues clamped to zero.
    Covariances get a small ridge when there are fewer samples than features.
    """
    x, y = _as_matrix(a).astype(np.float64), _as_matrix(b).astype(np.float64)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    mu_a, cov_a = _mean_cov(x)
    mu_b, cov_b = _mean_cov(y)
    root_a = _psd_sqrt(cov_a)
    cross = (root_a @ cov_b) @ root_a
    cross_vals = np.clip(np.linalg.eigvalsh((cross + cross.T) / 2.0), 0.0, None)
    fd = (
        float(np.sum((mu_a - mu_b) ** 2))
        + float(np.trace(cov_a) + np.trace(cov_b))
        - 2.0 * float(np.sum(np.sqrt(cross_vals)))
    )
    return max(fd, 0.0)


# ---------------------------------------------------------------------------
# Local Lipschitz constant
# ---------------------------------------------------------------------------


def local_lipschitz(
    model_fn: Callable,
    n_samples: int,
    input_shape: tuple,
    seed: int = 0,
    batch: int = 256,
) -> float:
    """Max over Gaussian probes of || grad_x ||model_fn(x)||_2 ||_2.

    Probes are drawn i.i.d. standard normal in the model's (normalized) input
    space from a single sequential stream, so for a fixed seed the estimate is
    monotone non-decreasing in n_samples.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    best = 0.0
    done = 0
    while done < n_samples:
        take = min(batch, n_samples - done)
        x = torch.from_numpy(
            rng.standard_normal((take, *input_shape)).astype(np.float32)
        ).requires_grad_(True)
        out = model_fn(x)
        if out.ndim == 1:
            out = out[:, None]
        norms = torch.sqrt((out**2).sum(dim=1) + 1e-24)
        norms.sum().backward()
        grad = x.grad.reshape(take, -1)
        gnorm = torch.sqrt((grad**2).sum(dim=1))
        if not torch.all(torch.isfinite(gnorm)):
            bad = int(torch.nonzero(~torch.isfinite(gnorm))[0])
            raise ValueError(f"non-finite input gradient at probe index {done + bad}")
        best = max(best, float(gnorm.max()))
        done += take
    return best


# ---------------------------------------------------------------------------
# 2-D feature export
# ---------------------------------------------------------------------------


def _dataset_labels(ds) -> np.ndarray:
    labels = getattr(ds, "labels", None)
    if labels is None:
        labels = getattr(ds, "eval_labels", None)
    return labels if labels is not None else np.full(len(ds), -1, dtype=np.int64)


def _embed(extractor, images, batch=512) -> np.ndarray:
    chunks = [
        forward_features(extractor, images[s : s + batch]).embeddings
        for s in range(0, len(images), batch)
    ]
    return np.concatenate(chunks) if chunks else np.zeros((0, extractor.embedding_dim))


def export_features_2d(bundle: ModelBundle, datasets: dict, baseline_bundle=None) -> tuple:
    """Rows of (x, y, label, domain, route) for feature-cloud plots.

    ``datasets`` maps domain name ("source"/"target") to a dataset.  With a
    2-D embedding dimension the coordinates are the embeddings themselves
    (mode "native-2d"); otherwise a linear 2-D probe (principal components of
    the baseline-route source features) projects them (mode "linear-probe").
    Returns (rows, mode).
    """
    base = baseline_bundle.f_s if baseline_bundle is not None else bundle.f_s
    routes = {"baseline": base, "adapted": bundle.f_t}
    native = bundle.f_t.embedding_dim == 2
    mode = "native-2d" if native else "linear-probe"

    projector = None
    if not native:
        ref_ds = datasets.get("source") or next(iter(datasets.values()))
        ref = _embed(base, ref_ds.images)
        center = ref.mean(axis=0)
        _, _, vt = np.linalg.svd(ref - center, full_matrices=False)
        projector = (center, vt[:2].T)

    rows = []
    for domain, ds in datasets.items():
        labels = _dataset_labels(ds)
        for route, extractor in routes.items():
            emb = _embed(extractor, ds.images)
            if projector is not None:
                emb = (emb - projector[0]) @ projector[1]
            for i in range(len(ds)):
                rows.append(
                    {
                        "x": float(emb[i, 0]),
                        "y": float(emb[i, 1]),
                        "label": int(labels[i]),
                        "domain": domain,
                        "route": route,
                    }
                )
    return rows, mode


def energy_distance(a, b, max_samples: int = 2000, seed: int = 0) -> float:
    """Two-sample energy distance 2 E||X-Y|| - E||X-X'|| - E||Y-Y'||."""
    x, y = _as_matrix(a).astype(np.float64), _as_matrix(b).astype(np.float64)
    rng = np.random.default_rng(seed)
    if len(x) > max_samples:
        x = x[rng.choice(len(x), max_samples, replace=False)]
    if len(y) > max_samples:
        y = y[rng.choice(len(y), max_samples, replace=False)]

    def mean_pdist(u, v):
        return float(np.mean(np.linalg.norm(u[:, None, :] - v[None, :, :], axis=2)))

    return 2.0 * mean_pdist(x, y) - mean_pdist(x, x) - mean_pdist(y, y)


# ---------------------------------------------------------------------------
# Scatter reports (per-sample CE and nearest-same-class feature distance)
# ---------------------------------------------------------------------------


@dataclass
class ScatterRow:
    index: int
    baseline_value: float
    adapted_value: float
    baseline_correct: bool
    adapted_correct: bool
    corrected: bool
    flagged: bool = False  # value undefined (e.g. singleton class)


@dataclass
class ScatterReport:
    value_kind: str  # "ce_loss" | "nn_feature_distance"
    rows: list = field(default_factory=list)

    def medians(self) -> tuple:
        ok = [r for r in self.rows if not r.flagged]
        if not ok:
            return (math.nan, math.nan)
        return (
            float(np.median([r.baseline_value for r in ok])),
            float(np.median([r.adapted_value for r in ok])),
        )


def _route_outputs(extractor, head, ds) -> tuple:
    emb = _embed(extractor, ds.images)
    with torch.no_grad():
        logits = head(torch.from_numpy(emb).float()).numpy()
    labels = _dataset_labels(ds)
    ce = F.cross_entropy(
        torch.from_numpy(logits), torch.from_numpy(labels).long(), reduction="none"
    ).numpy()
    preds = logits.argmax(axis=1)
    return emb, preds, ce


def _nearest_same_class(emb: np.ndarray, labels: np.ndarray, index: int) -> float:
    same = np.flatnonzero(labels == labels[index])
    same = same[same != index]
    if len(same) == 0:
        return math.nan
    d = np.linalg.norm(emb[same] - emb[index], axis=1)
    return float(d.min())  # argmin takes the lowest index on ties


def scatter_report(bundle: ModelBundle, baseline_bundle: ModelBundle, corrupted, kind: str) -> ScatterReport:
    """Per-sample comparison of the two routes on a corrupted, labeled set.

    kind="ce_loss" analyzes samples the adapted route classifies correctly;
    kind="nn_feature_distance" analyzes samples the baseline route
    misclassifies, measuring the Euclidean distance to the nearest same-class
    embedding (excluding self) in each route's own feature space.  Rows whose
    value is undefined (class with a single sample) are flagged, never
    fabricated.
    """
    if kind not in ("ce_loss", "nn_feature_distance"):
        raise ValueError(f"unknown scatter kind {kind!r}")
    labels = _dataset_labels(corrupted)
    if np.any(labels < 0):
        raise ValueError("scatter_report needs labels (or eval labels)")

    emb_b, preds_b, ce_b = _route_outputs(baseline_bundle.f_s, baseline_bundle.g_s, corrupted)
    emb_a, preds_a, ce_a = _route_outputs(bundle.f_t, bundle.g_s, corrupted)

    if kind == "ce_loss":
        target = np.flatnonzero(preds_a == labels)
    else:
        target = np.flatnonzero(preds_b != labels)

    report = ScatterReport(value_kind=kind)
    for i in target:
        if kind == "ce_loss":
            bval, aval = float(ce_b[i]), float(ce_a[i])
            flagged = False
        else:
            bval = _nearest_same_class(emb_b, labels, int(i))
            aval = _nearest_same_class(emb_a, labels, int(i))
            flagged = math.isnan(bval) or math.isnan(aval)
        report.rows.append(
            ScatterRow(
                index=int(i),
                baseline_value=bval,
                adapted_value=aval,
                baseline_correct=bool(preds_b[i] == labels[i]),
                adapted_correct=bool(preds_a[i] == labels[i]),
                corrected=bool(preds_b[i] != labels[i] and preds_a[i] == labels[i]),
                flagged=flagged,
            )
        )
    return report
