"""Dataset loading, synthesis, splitting, batching and the on-disk format.

All images are float32 [n, c, h, w] with pixel values in [0, 1]; model-input
normalization is applied inside the models, never baked into stored data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

__all__ = [
    "FormatError",
    "ConsistencyError",
    "LabeledDataset",
    "UnlabeledDataset",
    "BatchPlan",
    "load_idx",
    "synth_shapes",
    "split",
    "iter_batches",
    "save_dataset",
    "load_dataset",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Keeps normalization stats independent of any particular draw of the
# synthetic generator; recomputing per-dataset would leak split information.
SYNTH_SHAPES_NORMALIZATION = ((0.45,), (0.18,))
MNIST_NORMALIZATION = ((0.1307,), (0.3081,))


class FormatError(ValueError):
    """A binary file does not match its declared format."""


class ConsistencyError(ValueError):
    """Two files or fields that must agree do not."""


def _check_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValueError(f"images must be [n, c, h, w], got shape {images.shape}")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return images


@dataclass
class LabeledDataset:
    """Images plus integer class labels for one domain."""

    images: np.ndarray  # [n, c, h, w] float32 in [0, 1]
    labels: np.ndarray  # [n] int64 in [0, num_classes)
    name: str
    normalization: tuple = SYNTH_SHAPES_NORMALIZATION  # per-channel (mean, std)
    num_classes: int = 0

    def __post_init__(self):
        self.images = _check_images(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.num_classes <= 0:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range [0, num_classes)")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


@dataclass
class UnlabeledDataset:
    """Images without labels; carries the corruption recipe that produced it.

    ``eval_labels`` preserves index-aligned labels for evaluation only; the
    trainer must never read them.
    """

    images: np.ndarray
    name: str
    provenance: str = "natural"
    eval_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = _check_images(self.images)
        if self.eval_labels is not None:
            self.eval_labels = np.asarray(self.eval_labels, dtype=np.int64)
            if len(self.eval_labels) != len(self.images):
                raise ConsistencyError("eval_labels length does not match images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


Dataset = Union[LabeledDataset, UnlabeledDataset]


@dataclass(frozen=True)
class BatchPlan:
    """Deterministic batching recipe: same seed + dataset => same order."""

    batch_size: int
    shuffle_seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


def iter_batches(n: int, plan: BatchPlan, epoch: int = 0) -> Iterator[np.ndarray]:
    """Yield index arrays covering every index exactly once per epoch.

    The permutation depends only on (shuffle_seed, epoch), so iteration is
    bit-identical across runs.  With drop_last=True a trailing partial batch
    is skipped.
    """
    perm = np.random.default_rng([plan.shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, plan.batch_size):
        batch = perm[start : start + plan.batch_size]
        if plan.drop_last and len(batch) < plan.batch_size:
            return
        yield batch


# ---------------------------------------------------------------------------
# IDX ingestion (big-endian, standard magic numbers)
# ---------------------------------------------------------------------------


def _read_exact(f, count: int, path, offset: int) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise FormatError(
            f"{path}: truncated at byte offset {offset + len(data)}, "
            f"expected {count} more bytes"
        )
    return data


def load_idx(path_images, path_labels=None) -> Dataset:
    """Load an IDX image file (optionally with an IDX label file).

    Images come back as float32 [n, 1, rows, cols] scaled to [0, 1].  Without
    a label path the result is an UnlabeledDataset.
    """
    path_images = Path(path_images)
    with open(path_images, "rb") as f:
        header = _read_exact(f, 16, path_images, 0)
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{path_images}: bad image magic 0x{magic:08x} at byte offset 0, "
                f"expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        raw = _read_exact(f, n * rows * cols, path_images, 16)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    images = images.astype(np.float32) / 255.0

    if path_labels is None:
        return UnlabeledDataset(images=images, name=path_images.stem, provenance="natural")

    path_labels = Path(path_labels)
    with open(path_labels, "rb") as f:
        header = _read_exact(f, 8, path_labels, 0)
        magic, n_labels = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{path_labels}: bad label magic 0x{magic:08x} at byte offset 0, "
                f"expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        raw = _read_exact(f, n_labels, path_labels, 8)
    if n_labels != n:
        raise ConsistencyError(f"{n} images but {n_labels} labels")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(
        images=images,
        labels=labels,
        name=path_images.stem,
        normalization=MNIST_NORMALIZATION,
    )


# ---------------------------------------------------------------------------
# Synthetic shapes (fast deterministic data for CI)
# ---------------------------------------------------------------------------

SHAPE_CLASSES = ("square", "circle", "cross", "triangle")


def _render_shape(canvas: np.ndarray, cls: int, cy: float, cx: float, r: float, value: float):
    size = canvas.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if cls == 0:  # filled square
        mask = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif cls == 1:  # filled circle
        mask = dy**2 + dx**2 <= r**2
    elif cls == 2:  # cross of two bars
        bar = max(1.0, r / 2.5)
        mask = ((np.abs(dy) <= bar) & (np.abs(dx) <= r)) | (
            (np.abs(dx) <= bar) & (np.abs(dy) <= r)
        )
    else:  # filled upward triangle
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    canvas[mask] = value


def synth_shapes(n: int, seed: int, image_size: int = 28) -> LabeledDataset:
    """Render n single-channel images of 4 shape classes at random positions.

    Contrast between shape and background is deliberately modest and of
    random sign, so classifiers trained on clean renders are genuinely
    sensitive to corruption noise.  Deterministic for a given seed.
    """
    if n <= 0:
        raise ValueError("n must be > 0")
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    rng = np.random.default_rng(seed)
    images = np.empty((n, 1, image_size, image_size), dtype=np.float32)
    labels = rng.integers(0, len(SHAPE_CLASSES), size=n).astype(np.int64)

    r_min, r_max = image_size * 0.14, image_size * 0.26
    for i in range(n):
        background = rng.uniform(0.35, 0.55)
        contrast = rng.uniform(0.25, 0.45) * rng.choice((-1.0, 1.0))
        r = rng.uniform(r_min, r_max)
        margin = r + 1.0
        cy = rng.uniform(margin, image_size - 1 - margin)
        cx = rng.uniform(margin, image_size - 1 - margin)
        canvas = np.full((image_size, image_size), background, dtype=np.float64)
        _render_shape(canvas, int(labels[i]), cy, cx, r, background + contrast)
        canvas += rng.normal(0.0, 0.01, canvas.shape)  # faint sensor texture
        images[i, 0] = np.clip(canvas, 0.0, 1.0)

    return LabeledDataset(
        images=images,
        labels=labels,
        name=f"synth-shapes-{seed}",
        normalization=SYNTH_SHAPES_NORMALIZATION,
        num_classes=len(SHAPE_CLASSES),
    )


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split(ds: Dataset, fractions: Sequence[float], seed: int) -> list:
    """Partition a dataset into disjoint parts with the given fractions.

    Fractions must sum to 1 (within 1e-9); the shuffle is deterministic under
    the seed and every part must be non-empty.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    counts = [int(round(f * n)) for f in fractions]
    counts[-1] = n - sum(counts[:-1])
    if any(c <= 0 for c in counts):
        raise ValueError(f"split produces an empty part: sizes {counts}")

    parts = []
    start = 0
    for i, count in enumerate(counts):
        idx = np.sort(perm[start : start + count])
        start += count
        if isinstance(ds, LabeledDataset):
            parts.append(
                LabeledDataset(
                    images=ds.images[idx],
                    labels=ds.labels[idx],
                    name=f"{ds.name}/part{i}",
                    normalization=ds.normalization,
                    num_classes=ds.num_classes,
                )
            )
        else:
            parts.append(
                UnlabeledDataset(
                    images=ds.images[idx],
                    name=f"{ds.name}/part{i}",
                    provenance=ds.provenance,
                    eval_labels=None if ds.eval_labels is None else ds.eval_labels[idx],
                )
            )
    return parts


# ---------------------------------------------------------------------------
# Repo-native on-disk format: manifest.json + raw little-endian tensors
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write a dataset directory: manifest.json + images.bin (+ labels.bin)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images_path = out_dir / "images.bin"
    ds.images.astype("<f4").tofile(images_path)

    manifest = {
        "format_version": 1,
        "name": ds.name,
        "shape": list(ds.images.shape),
        "dtype": "<f4",
        "checksum": {"images.bin": _sha256(images_path)},
    }
    labeled = isinstance(ds, LabeledDataset)
    if labeled:
        labels_path = out_dir / "labels.bin"
        ds.labels.astype("<i8").tofile(labels_path)
        manifest["labels_dtype"] = "<i8"
        manifest["num_classes"] = ds.num_classes
        manifest["normalization"] = [list(ds.normalization[0]), list(ds.normalization[1])]
        manifest["checksum"]["labels.bin"] = _sha256(labels_path)
        manifest["provenance"] = "natural"
    else:
        manifest["provenance"] = ds.provenance
        if ds.eval_labels is not None:
            labels_path = out_dir / "labels.bin"
            ds.eval_labels.astype("<i8").tofile(labels_path)
            manifest["labels_dtype"] = "<i8"
            manifest["labels_role"] = "eval_only"
            manifest["checksum"]["labels.bin"] = _sha256(labels_path)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return out_dir


def load_dataset(in_dir) -> Dataset:
    """Load a dataset directory written by save_dataset, verifying checksums."""
    in_dir = Path(in_dir)
    with open(in_dir / "manifest.json") as f:
        manifest = json.load(f)
    for fname, expected in manifest["checksum"].items():
        actual = _sha256(in_dir / fname)
        if actual != expected:
            raise FormatError(f"{in_dir / fname}: checksum mismatch")
    shape = tuple(manifest["shape"])
    images = np.fromfile(in_dir / "images.bin", dtype="<f4").reshape(shape)
    has_labels = "labels.bin" in manifest["checksum"]
    labels = (
        np.fromfile(in_dir / "labels.bin", dtype="<i8") if has_labels else None
    )
    if has_labels and manifest.get("labels_role") != "eval_only":
        norm = manifest.get("normalization")
        normalization = (
            (tuple(norm[0]), tuple(norm[1])) if norm else SYNTH_SHAPES_NORMALIZATION
        )
        return LabeledDataset(
            images=images,
            labels=labels,
            name=manifest["name"],
            normalization=normalization,
            num_classes=manifest.get("num_classes", 0),
        )
    return UnlabeledDataset(
        images=images,
        name=manifest["name"],
        provenance=manifest.get("provenance", "natural"),
        eval_labels=labels,
    )
