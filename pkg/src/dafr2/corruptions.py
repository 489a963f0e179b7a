"""Deterministic image corruptions at severities 1-5.

Every corruption is a pure function of (input, spec): per-image RNG streams
are derived from (spec.seed, image index), so parallel application cannot
change results and sample order is never permuted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datasets import LabeledDataset, UnlabeledDataset
from .severity_tables import PRIMARY_INTENSITY, SEVERITY_TABLES, TABLE_VERSION

__all__ = [
    "CorruptionSpec",
    "ALL_KINDS",
    "IMPLEMENTED_KINDS",
    "severity_table",
    "primary_intensity",
    "corrupt",
    "parse_provenance",
]

# Full corruption taxonomy; kinds without an implementation raise a clear
# NotImplementedError when requested.
ALL_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "speckle_noise",
    "defocus_blur",
    "glass_blur",
    "gaussian_blur",
    "motion_blur",
    "zoom_blur",
    "snow",
    "frost",
    "fog",
    "brightness",
    "contrast",
    "elastic",
    "jpeg_compression",
    "pixelate",
    "spatter",
    "saturate",
    "canny_edges",
    "zigzag",
    "dotted_line",
    "rotate",
    "scale",
    "shear",
    "stripe",
    "translate",
)

IMPLEMENTED_KINDS = tuple(sorted(SEVERITY_TABLES))


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption recipe; identical (kind, severity, seed, input) gives
    bit-identical output."""

    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown corruption kind: {self.kind!r}")
        if self.kind not in SEVERITY_TABLES:
            raise NotImplementedError(
                f"corruption kind {self.kind!r} is listed in the taxonomy but not "
                f"implemented; available kinds: {', '.join(IMPLEMENTED_KINDS)}"
            )
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def params(self) -> dict:
        return dict(SEVERITY_TABLES[self.kind][self.severity - 1])

    def provenance_string(self) -> str:
        return f"{self.kind}/severity-{self.severity}/seed-{self.seed}/v{TABLE_VERSION}"


def severity_table(kind: str) -> list:
    """Return the five per-severity parameter sets for a kind."""
    if kind not in ALL_KINDS:
        raise ValueError(f"unknown corruption kind: {kind!r}")
    if kind not in SEVERITY_TABLES:
        raise NotImplementedError(f"corruption kind {kind!r} is not implemented")
    return [dict(p) for p in SEVERITY_TABLES[kind]]


def primary_intensity(kind: str, params: dict) -> float:
    """Scalar destructiveness of a parameter set; strictly increasing in severity."""
    return float(PRIMARY_INTENSITY[kind](params))


def parse_provenance(provenance: str):
    """Invert CorruptionSpec.provenance_string; returns None for 'natural'."""
    if provenance == "natural" or "/" not in provenance:
        return None
    kind, sev, seed = provenance.split("/")[:3]
    return {
        "kind": kind,
        "severity": int(sev.removeprefix("severity-")),
        "seed": int(seed.removeprefix("seed-")),
    }


# ---------------------------------------------------------------------------
# Kernels.  Each operates on one image [c, h, w] in [0, 1] with its own rng
# and returns an un-clipped float64 image; corrupt() does the final clip.
# ---------------------------------------------------------------------------


def _per_channel(img, fn):
    return np.stack([fn(img[c]) for c in range(img.shape[0])])


def apply_gaussian_noise(img, params, rng):
    return img + params["sigma"] * rng.standard_normal(img.shape)


def apply_shot_noise(img, params, rng):
    rate = params["rate"]
    return rng.poisson(np.clip(img, 0.0, 1.0) * rate) / rate


def apply_impulse_noise(img, params, rng):
    amount = params["amount"]
    out = img.copy()
    hit = rng.random(img.shape) < amount
    salt = rng.random(img.shape) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def apply_speckle_noise(img, params, rng):
    return img + img * params["scale"] * rng.standard_normal(img.shape)


def apply_brightness(img, params, rng):
    return img + params["delta"]


def apply_contrast(img, params, rng):
    mean = img.mean(axis=(-2, -1), keepdims=True)
    return mean + (img - mean) * params["factor"]


def _plasma_fractal(size: int, wibble_decay: float, rng) -> np.ndarray:
    """Diamond-square heightmap in [0, 1] on a (2^k + 1) grid covering size."""
    mapsize = 1 << max(int(math.ceil(math.log2(max(size - 1, 1)))), 1)
    grid = np.zeros((mapsize + 1, mapsize + 1))
    grid[0, 0] = grid[0, -1] = grid[-1, 0] = grid[-1, -1] = rng.random(4).mean()
    step, wibble = mapsize, 1.0
    while step > 1:
        half = step // 2
        # diamond step
        blocks = grid[0:-1:step, 0:-1:step]
        avg = (
            blocks
            + grid[step::step, 0:-1:step]
            + grid[0:-1:step, step::step]
            + grid[step::step, step::step]
        ) / 4.0
        grid[half::step, half::step] = avg + wibble * (rng.random(avg.shape) - 0.5)
        # square step (with wraparound neighbors treated as zero-padded average)
        for dy, dx in ((half, 0), (0, half)):
            ys = np.arange(dy, mapsize + 1, step)
            xs = np.arange(dx, mapsize + 1, step)
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            total = np.zeros(yy.shape)
            count = np.zeros(yy.shape)
            for oy, ox in ((half, 0), (-half, 0), (0, half), (0, -half)):
                ny, nx = yy + oy, xx + ox
                valid = (ny >= 0) & (ny <= mapsize) & (nx >= 0) & (nx <= mapsize)
                total[valid] += grid[ny[valid], nx[valid]]
                count[valid] += 1
            grid[yy, xx] = total / count + wibble * (rng.random(yy.shape) - 0.5)
        step = half
        wibble /= wibble_decay
    grid -= grid.min()
    peak = grid.max()
    if peak > 0:
        grid /= peak
    return grid[:size, :size]


def apply_fog(img, params, rng):
    amount = params["amount"]
    size = max(img.shape[-2], img.shape[-1])
    plasma = _plasma_fractal(size, params["wibble_decay"], rng)
    plasma = plasma[: img.shape[-2], : img.shape[-1]]
    peak = max(img.max(), 1e-6)
    return (img + amount * plasma) * peak / (peak + amount)


def apply_glass_blur(img, params, rng):
    sigma, max_delta, iters = params["sigma"], params["max_delta"], params["iterations"]

    def one(ch):
        out = ndimage.gaussian_filter(ch, sigma, truncate=4.0, mode="reflect")
        h, w = out.shape
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(iters):
            dy = rng.integers(-max_delta, max_delta + 1, (h, w))
            dx = rng.integers(-max_delta, max_delta + 1, (h, w))
            out = out[np.clip(yy + dy, 0, h - 1), np.clip(xx + dx, 0, w - 1)]
        return ndimage.gaussian_filter(out, sigma, truncate=4.0, mode="reflect")

    return _per_channel(img, one)


def apply_gaussian_blur(img, params, rng):
    sigma = params["sigma"]
    return _per_channel(
        img, lambda ch: ndimage.gaussian_filter(ch, sigma, truncate=4.0, mode="reflect")
    )


def apply_motion_blur(img, params, rng):
    length = int(params["length"])
    angle = rng.uniform(0.0, math.pi)
    ts = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, length)
    k = length + (length + 1) % 2
    kernel = np.zeros((k, k))
    cy = cx = k // 2
    ys = np.clip(np.round(cy + ts * math.sin(angle)).astype(int), 0, k - 1)
    xs = np.clip(np.round(cx + ts * math.cos(angle)).astype(int), 0, k - 1)
    kernel[ys, xs] = 1.0
    kernel /= kernel.sum()
    return _per_channel(img, lambda ch: ndimage.convolve(ch, kernel, mode="reflect"))


def _zoom_about_center(ch, factor):
    h, w = ch.shape
    matrix = np.array([[1.0 / factor, 0.0], [0.0, 1.0 / factor]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    return ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="nearest")


def apply_zoom_blur(img, params, rng):
    zooms = np.linspace(1.0, params["max_zoom"], 6)

    def one(ch):
        acc = np.zeros_like(ch)
        for z in zooms:
            acc += _zoom_about_center(ch, z)
        return acc / len(zooms)

    return _per_channel(img, one)


def apply_translate(img, params, rng):
    size = max(img.shape[-2], img.shape[-1])
    limit = params["max_shift"] * size
    dy, dx = rng.uniform(-limit, limit, 2) if limit > 0 else (0.0, 0.0)
    return _per_channel(
        img, lambda ch: ndimage.shift(ch, (dy, dx), order=1, mode="nearest")
    )


def apply_rotate(img, params, rng):
    bound = params["max_angle"]
    angle = rng.uniform(-bound, bound)
    return _per_channel(
        img,
        lambda ch: ndimage.rotate(ch, angle, reshape=False, order=1, mode="nearest"),
    )


def apply_scale(img, params, rng):
    factor = math.exp(rng.uniform(-params["log_range"], params["log_range"]))
    return _per_channel(img, lambda ch: _zoom_about_center(ch, factor))


def apply_shear(img, params, rng):
    s = rng.uniform(-params["max_shear"], params["max_shear"])
    matrix = np.array([[1.0, s], [0.0, 1.0]])

    def one(ch):
        h, w = ch.shape
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = center - matrix @ center
        return ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="nearest")

    return _per_channel(img, one)


def apply_stripe(img, params, rng):
    w = img.shape[-1]
    n_cols = max(1, int(round(params["coverage"] * w)))
    n_bands = min(3, n_cols)
    widths = [n_cols // n_bands + (1 if i < n_cols % n_bands else 0) for i in range(n_bands)]
    out = img.copy()
    for width in widths:
        start = int(rng.integers(0, max(w - width, 1)))
        out[..., start : start + width] = 1.0 - out[..., start : start + width]
    return out


def _draw_segment(mask, p0, p1, dotted=False):
    length = max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))
    n = max(int(length) * 2, 2)
    ts = np.linspace(0.0, 1.0, n)
    ys = np.round(p0[0] + ts * (p1[0] - p0[0])).astype(int)
    xs = np.round(p0[1] + ts * (p1[1] - p0[1])).astype(int)
    if dotted:
        keep = (np.arange(n) // 3) % 2 == 0
        ys, xs = ys[keep], xs[keep]
    h, w = mask.shape
    inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    mask[ys[inside], xs[inside]] = True


def apply_zigzag(img, params, rng):
    h, w = img.shape[-2], img.shape[-1]
    mask = np.zeros((h, w), dtype=bool)
    amplitude = max(2, h // 7)
    for _ in range(int(params["count"])):
        y = rng.uniform(amplitude, h - amplitude)
        x = rng.uniform(0, w * 0.3)
        direction = 1.0
        while x < w:
            p0 = (y, x)
            x2 = min(x + amplitude, w - 1 + 1e-9)
            y2 = y + direction * amplitude
            _draw_segment(mask, p0, (y2, x2))
            y, x, direction = y2, x2, -direction
            if x >= w - 1:
                break
    out = img.copy()
    out[..., mask] = 1.0
    return out


def apply_dotted_line(img, params, rng):
    h, w = img.shape[-2], img.shape[-1]
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(params["count"])):
        p0 = (rng.uniform(0, h - 1), rng.uniform(0, w - 1))
        angle = rng.uniform(0, math.pi)
        reach = max(h, w)
        p1 = (p0[0] + reach * math.sin(angle), p0[1] + reach * math.cos(angle))
        _draw_segment(mask, p0, p1, dotted=True)
    out = img.copy()
    out[..., mask] = 1.0
    return out


def apply_spatter(img, params, rng):
    h, w = img.shape[-2], img.shape[-1]
    field = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.5, mode="reflect")
    threshold = np.quantile(field, 1.0 - params["coverage"])
    mask = field >= threshold
    out = img.copy()
    out[..., mask] = 0.9
    return out


def apply_pixelate(img, params, rng):
    keep = params["keep"]

    def one(ch):
        h, w = ch.shape
        small = ndimage.zoom(ch, keep, order=1, mode="nearest")
        return ndimage.zoom(small, (h / small.shape[0], w / small.shape[1]), order=0, mode="nearest")

    return _per_channel(img, one)


def apply_elastic(img, params, rng):
    alpha, sigma = params["alpha"], params["sigma"]
    h, w = img.shape[-2], img.shape[-1]
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="reflect")
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="reflect")
    norm = max(np.abs(dy).max(), np.abs(dx).max(), 1e-9)
    dy, dx = dy / norm * alpha, dx / norm * alpha
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + dy, xx + dx])
    return _per_channel(
        img, lambda ch: ndimage.map_coordinates(ch, coords, order=1, mode="reflect")
    )


KERNELS = {
    "gaussian_noise": apply_gaussian_noise,
    "shot_noise": apply_shot_noise,
    "impulse_noise": apply_impulse_noise,
    "speckle_noise": apply_speckle_noise,
    "brightness": apply_brightness,
    "contrast": apply_contrast,
    "fog": apply_fog,
    "glass_blur": apply_glass_blur,
    "gaussian_blur": apply_gaussian_blur,
    "motion_blur": apply_motion_blur,
    "zoom_blur": apply_zoom_blur,
    "translate": apply_translate,
    "rotate": apply_rotate,
    "scale": apply_scale,
    "shear": apply_shear,
    "stripe": apply_stripe,
    "zigzag": apply_zigzag,
    "dotted_line": apply_dotted_line,
    "spatter": apply_spatter,
    "pixelate": apply_pixelate,
    "elastic": apply_elastic,
}


def corrupt(ds, spec: CorruptionSpec) -> UnlabeledDataset:
    """Apply one corruption to every image of a dataset.

    Output pixels are clipped to [0, 1]; sample order is preserved and any
    input labels ride along as eval-only labels.  The result presents as
    unlabeled to the trainer.
    """
    kernel = KERNELS[spec.kind]
    params = spec.params
    out = np.empty_like(ds.images)
    for i in range(len(ds)):
        rng = np.random.default_rng([spec.seed, i])
        img = ds.images[i].astype(np.float64)
        out[i] = np.clip(kernel(img, params, rng), 0.0, 1.0).astype(np.float32)
    labels = ds.labels if isinstance(ds, LabeledDataset) else ds.eval_labels
    return UnlabeledDataset(
        images=out,
        name=f"{ds.name}/{spec.kind}-s{spec.severity}",
        provenance=spec.provenance_string(),
        eval_labels=None if labels is None else labels.copy(),
    )
