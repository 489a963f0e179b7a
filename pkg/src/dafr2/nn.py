"""Model stack: a BN-heavy convolutional feature extractor with an explicit
BN-state API, a linear classifier head, and the post-pooling linear embedding
head used for feature distillation.

Input normalization (per-channel mean/std) is a model-side transform: all
forward entry points take raw [0, 1] pixels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

__all__ = [
    "ArchConfig",
    "FeatureExtractor",
    "ClassifierHead",
    "ModelBundle",
    "FeatureBatch",
    "BNState",
    "CovarianceReport",
    "build_bundle",
    "forward_features",
    "forward_logits",
    "bn_covariance_report",
    "bn_states",
    "set_bn_states",
    "parameter_checksum",
    "bn_statistics_checksum",
    "copy_module_state",
    "save_model",
    "load_model",
    "save_bundle",
    "load_bundle",
]


@dataclass(frozen=True)
class ArchConfig:
    """Feature-extractor architecture knobs (ResNet-style, BN everywhere)."""

    in_channels: int = 1
    stem_channels: int = 16
    block_channels: tuple = (16, 32, 64, 128)
    block_strides: tuple = (1, 2, 2, 2)
    embedding_dim: int = 128
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if len(self.block_channels) != len(self.block_strides):
            raise ValueError("block_channels and block_strides must have equal length")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        d["block_strides"] = list(self.block_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["block_channels"] = tuple(d["block_channels"])
        d["block_strides"] = tuple(d["block_strides"])
        return cls(**d)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, momentum: float, eps: float):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out, eps=eps, momentum=momentum)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out, eps=eps, momentum=momentum)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out, eps=eps, momentum=momentum),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class FeatureExtractor(nn.Module):
    """Conv backbone -> global average pool -> linear embedding head.

    The trailing linear layer is the distillation head: its output is the
    embedding the target model learns to match.
    """

    def __init__(self, config: ArchConfig, normalization: Optional[tuple] = None):
        super().__init__()
        self.config = config
        c = config.stem_channels
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c, eps=config.bn_eps, momentum=config.bn_momentum),
            nn.ReLU(inplace=True),
        )
        blocks = []
        for c_out, stride in zip(config.block_channels, config.block_strides):
            blocks.append(ResidualBlock(c, c_out, stride, config.bn_momentum, config.bn_eps))
            c = c_out
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embed = nn.Linear(c, config.embedding_dim)

        mean, std = normalization if normalization is not None else ((0.0,), (1.0,))
        self.register_buffer("input_mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("input_std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def set_normalization(self, normalization: tuple):
        mean, std = normalization
        self.input_mean.copy_(torch.tensor(mean, dtype=self.input_mean.dtype).view(1, -1, 1, 1))
        self.input_std.copy_(torch.tensor(std, dtype=self.input_std.dtype).view(1, -1, 1, 1))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected [m, {self.config.in_channels}, h, w] input, got {tuple(x.shape)}"
            )
        if self.training and x.shape[0] < 2:
            raise ValueError("train-mode forward needs a batch of at least 2 (BN variance)")
        x = (x - self.input_mean) / self.input_std
        x = self.stem(x)
        x = self.blocks(x)
        x = self.pool(x).flatten(1)
        return self.embed(x)


class ClassifierHead(nn.Module):
    """Affine map from embeddings to class logits (no softmax)."""

    def __init__(self, embedding_dim: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(embedding_dim, num_classes)

    @property
    def embedding_dim(self) -> int:
        return self.linear.in_features

    @property
    def num_classes(self) -> int:
        return self.linear.out_features

    def forward(self, feats):
        if feats.ndim != 2 or feats.shape[1] != self.embedding_dim:
            raise ValueError(
                f"expected [m, {self.embedding_dim}] features, got {tuple(feats.shape)}"
            )
        return self.linear(feats)


@dataclass
class ModelBundle:
    """The three networks of the method: source extractor, shared classifier,
    target extractor.  All share one embedding dimension."""

    f_s: FeatureExtractor
    g_s: ClassifierHead
    f_t: FeatureExtractor

    def __post_init__(self):
        dims = {self.f_s.embedding_dim, self.f_t.embedding_dim, self.g_s.embedding_dim}
        if len(dims) != 1:
            raise ValueError(f"embedding dims disagree: {dims}")


@dataclass
class FeatureBatch:
    """A matrix of embeddings (rows = samples) with extractor/domain tags."""

    embeddings: np.ndarray  # [m, d]
    source_tag: str = "f_s"  # which extractor produced it
    domain_tag: str = "source"  # which domain the inputs came from

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be [m, d]")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite entries")

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_bundle(
    config: ArchConfig,
    num_classes: int,
    seed: int = 0,
    normalization: Optional[tuple] = None,
) -> ModelBundle:
    """Construct f_s, g_s and f_t with independent seeded initializations."""
    gen_seed = torch.Generator().manual_seed(seed)  # decouple from global RNG
    states = torch.random.get_rng_state()
    try:
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen_seed)))
        f_s = FeatureExtractor(config, normalization)
        g_s = ClassifierHead(config.embedding_dim, num_classes)
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen_seed)))
        f_t = FeatureExtractor(config, normalization)
    finally:
        torch.random.set_rng_state(states)
    return ModelBundle(f_s=f_s, g_s=g_s, f_t=f_t)


def copy_module_state(src: nn.Module, dst: nn.Module):
    """Copy all parameters and buffers (BN stats included) from src to dst."""
    dst.load_state_dict(src.state_dict())


def _as_tensor(batch) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch.float()
    return torch.from_numpy(np.ascontiguousarray(batch)).float()


def forward_features(
    model: FeatureExtractor,
    batch,
    mode: str = "eval",
    source_tag: str = "f_s",
    domain_tag: str = "source",
) -> FeatureBatch:
    """Run the extractor on raw [0,1] images and return embeddings.

    mode="train" updates BN running statistics (even though no gradients are
    tracked here); mode="eval" leaves all state untouched.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = model.training
    model.train(mode == "train")
    try:
        with torch.no_grad():
            emb = model(_as_tensor(batch))
    finally:
        model.train(was_training)
    return FeatureBatch(emb.numpy(), source_tag=source_tag, domain_tag=domain_tag)


def forward_logits(head: ClassifierHead, feats) -> np.ndarray:
    """Affine logits for a FeatureBatch (or raw [m, d] array)."""
    arr = feats.embeddings if isinstance(feats, FeatureBatch) else np.asarray(feats)
    with torch.no_grad():
        logits = head(torch.from_numpy(np.ascontiguousarray(arr)).float())
    return logits.numpy()


# ---------------------------------------------------------------------------
# BN state access
# ---------------------------------------------------------------------------


@dataclass
class BNState:
    """Snapshot of one BN layer's statistics and affine parameters."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float
    eps: float
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be nonnegative")


def _bn_modules(module: nn.Module) -> list:
    return [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


def bn_states(module: nn.Module) -> list:
    """Snapshot every BN layer of a module, in traversal order."""
    out = []
    for m in _bn_modules(module):
        out.append(
            BNState(
                running_mean=m.running_mean.detach().numpy().copy(),
                running_var=m.running_var.detach().numpy().copy(),
                momentum=float(m.momentum),
                eps=float(m.eps),
                gamma=m.weight.detach().numpy().copy(),
                beta=m.bias.detach().numpy().copy(),
            )
        )
    return out


def set_bn_states(module: nn.Module, states: Sequence[BNState]):
    """Write BN snapshots back into a module (inverse of bn_states)."""
    mods = _bn_modules(module)
    if len(mods) != len(states):
        raise ValueError(f"module has {len(mods)} BN layers, got {len(states)} states")
    with torch.no_grad():
        for m, s in zip(mods, states):
            m.running_mean.copy_(torch.from_numpy(np.asarray(s.running_mean)).float())
            m.running_var.copy_(torch.from_numpy(np.asarray(s.running_var)).float())
            m.weight.copy_(torch.from_numpy(np.asarray(s.gamma)).float())
            m.bias.copy_(torch.from_numpy(np.asarray(s.beta)).float())
            m.momentum = s.momentum
            m.eps = s.eps


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over all named parameters; changes iff any weight bit changes."""
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def bn_statistics_checksum(module: nn.Module) -> str:
    """SHA-256 over BN running means/vars only (not the affine parameters)."""
    digest = hashlib.sha256()
    for i, m in enumerate(_bn_modules(module)):
        digest.update(str(i).encode())
        digest.update(m.running_mean.detach().cpu().numpy().tobytes())
        digest.update(m.running_var.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Covariance / whitening diagnostics
# ---------------------------------------------------------------------------


@dataclass
class CovarianceReport:
    """Covariance before/after per-feature standardization plus spectrum."""

    sigma: np.ndarray  # [d, d], mean-centered X^T X / m
    sigma_bn: np.ndarray  # [d, d], same on standardized activations
    eigvecs: np.ndarray  # [d, d], columns sorted by descending eigenvalue
    eigvals: np.ndarray  # [d]
    feature_vars: np.ndarray  # [d], diag of sigma
    identity_gap: float  # ||sigma_bn - I||_F


def bn_covariance_report(feats_pre, bn: Optional[BNState] = None) -> CovarianceReport:
    """Covariance analysis of pre-BN activations.

    Standardization uses batch statistics exactly (epsilon only if a BNState
    supplies one), mirroring what a BN layer does to a training batch before
    its affine transform.  Eigenvectors are ordered by descending eigenvalue
    with the largest-magnitude component of each made positive, so reports
    are deterministic.
    """
    x = np.asarray(feats_pre, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("feats_pre must be [m, d] with m >= 2")
    m = x.shape[0]
    centered = x - x.mean(axis=0)
    sigma = centered.T @ centered / m

    eigvals, eigvecs = np.linalg.eigh(sigma)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    flip = eigvecs[np.abs(eigvecs).argmax(axis=0), np.arange(eigvecs.shape[1])] < 0
    eigvecs[:, flip] *= -1.0

    feature_vars = np.diag(sigma).copy()
    eps = bn.eps if bn is not None else 0.0
    denom = np.sqrt(feature_vars + eps)
    if np.any(denom == 0.0):
        raise ValueError("zero-variance feature; cannot standardize")
    xhat = centered / denom
    sigma_bn = xhat.T @ xhat / m
    gap = float(np.linalg.norm(sigma_bn - np.eye(x.shape[1]), ord="fro"))
    return CovarianceReport(
        sigma=sigma,
        sigma_bn=sigma_bn,
        eigvecs=eigvecs,
        eigvals=eigvals,
        feature_vars=feature_vars,
        identity_gap=gap,
    )


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + one raw little-endian file per tensor.
# Identical state always serializes to identical bytes.
# ---------------------------------------------------------------------------

_DTYPES = {torch.float32: "<f4", torch.int64: "<i8"}
_SUFFIX = {"<f4": ".f32", "<i8": ".i64"}


def save_model(model: nn.Module, out_dir, step: int = 0, mode: str = "eval") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in sorted(model.state_dict().items()):
        dtype = _DTYPES.get(t.dtype)
        if dtype is None:
            raise ValueError(f"unsupported tensor dtype {t.dtype} for {name}")
        fname = name + _SUFFIX[dtype]
        t.detach().cpu().numpy().astype(dtype).tofile(out_dir / fname)
        tensors[name] = {"dtype": dtype, "shape": list(t.shape), "file": fname}

    if isinstance(model, FeatureExtractor):
        manifest = {"kind": "feature_extractor", "arch": model.config.to_dict()}
    elif isinstance(model, ClassifierHead):
        manifest = {
            "kind": "classifier_head",
            "arch": {"embedding_dim": model.embedding_dim, "num_classes": model.num_classes},
        }
    else:
        raise ValueError(f"cannot checkpoint module of type {type(model).__name__}")
    manifest.update({"format_version": 1, "step": step, "mode": mode, "tensors": tensors})
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return out_dir


def load_model(in_dir) -> nn.Module:
    in_dir = Path(in_dir)
    with open(in_dir / "manifest.json") as f:
        manifest = json.load(f)
    if manifest["kind"] == "feature_extractor":
        model: nn.Module = FeatureExtractor(ArchConfig.from_dict(manifest["arch"]))
    elif manifest["kind"] == "classifier_head":
        model = ClassifierHead(**manifest["arch"])
    else:
        raise ValueError(f"unknown checkpoint kind {manifest['kind']!r}")
    state = {}
    for name, meta in manifest["tensors"].items():
        arr = np.fromfile(in_dir / meta["file"], dtype=meta["dtype"]).reshape(meta["shape"])
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model


def save_bundle(bundle: ModelBundle, out_dir, step: int = 0) -> Path:
    out_dir = Path(out_dir)
    save_model(bundle.f_s, out_dir / "f_s", step=step)
    save_model(bundle.g_s, out_dir / "g_s", step=step)
    save_model(bundle.f_t, out_dir / "f_t", step=step)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump({"format_version": 1, "kind": "bundle", "step": step}, f, indent=2, sort_keys=True)
        f.write("\n")
    return out_dir


def load_bundle(in_dir) -> ModelBundle:
    in_dir = Path(in_dir)
    return ModelBundle(
        f_s=load_model(in_dir / "f_s"),
        g_s=load_model(in_dir / "g_s"),
        f_t=load_model(in_dir / "f_t"),
    )
