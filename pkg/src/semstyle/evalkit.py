"""Procedural street scenes with exact labels, and quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from semstyle.adain import ClassStatsTable
from semstyle.errors import InvalidInputError
from semstyle.tensor_core import SegmentationMask, as_feature_map, channel_stats, masked_class_stats

SKY, ROAD, BUILDING, VEGETATION, VEHICLE = 0, 1, 2, 3, 4
CLASS_NAMES = {SKY: "sky", ROAD: "road", BUILDING: "building", VEGETATION: "vegetation", VEHICLE: "vehicle"}
OBJECT_CLASSES = (BUILDING, VEGETATION, VEHICLE)

PSNR_CAP = 99.0


@dataclass(frozen=True)
class ScenePalette:
    name: str
    colors: dict[int, tuple[float, float, float]]
    texture: dict[int, float]

    def __post_init__(self):
        if set(self.colors) != set(self.texture):
            raise InvalidInputError("every palette class needs both a colour and a texture amplitude")
        for c, rgb in self.colors.items():
            amp = self.texture[c]
            # texture never needs clipping, so class means stay within `amp` of the base
            if amp < 0 or any(v - amp < 0 or v + amp > 1 for v in rgb):
                raise InvalidInputError(f"class {c}: colour {rgb} +/- {amp} leaves [0, 1]")


def _palette(name, colors, amp):
    return ScenePalette(name, colors, {c: amp for c in colors})


PALETTES = {
    "day": _palette(
        "day",
        {SKY: (0.45, 0.65, 0.90), ROAD: (0.40, 0.40, 0.42), BUILDING: (0.62, 0.52, 0.45),
         VEGETATION: (0.25, 0.50, 0.20), VEHICLE: (0.70, 0.15, 0.15)},
        0.06,
    ),
    "snow": _palette(
        "snow",
        {SKY: (0.55, 0.68, 0.82), ROAD: (0.50, 0.50, 0.53), BUILDING: (0.68, 0.62, 0.58),
         VEGETATION: (0.33, 0.55, 0.32), VEHICLE: (0.72, 0.25, 0.26)},
        0.05,
    ),
    "night": _palette(
        "night",
        {SKY: (0.08, 0.10, 0.20), ROAD: (0.16, 0.15, 0.14), BUILDING: (0.25, 0.20, 0.14),
         VEGETATION: (0.08, 0.14, 0.08), VEHICLE: (0.35, 0.10, 0.08)},
        0.05,
    ),
    "fog": _palette(
        "fog",
        {SKY: (0.75, 0.76, 0.77), ROAD: (0.55, 0.55, 0.56), BUILDING: (0.64, 0.62, 0.60),
         VEGETATION: (0.50, 0.58, 0.50), VEHICLE: (0.66, 0.48, 0.48)},
        0.03,
    ),
}


def get_palette(palette) -> ScenePalette:
    if isinstance(palette, ScenePalette):
        return palette
    try:
        return PALETTES[palette]
    except KeyError:
        raise InvalidInputError(f"unknown palette {palette!r}; choose from {sorted(PALETTES)}") from None


def gen_scene(
    seed: int,
    palette="day",
    h: int = 64,
    w: int = 128,
    n_objects: int = 4,
    ensure_classes=(),
):
    """Sky band over a road band with ``n_objects`` rectangles or discs on top.

    Returns ``(image, mask)`` where ``image`` is a ``(3, h, w)`` float32 map in
    ``[0, 1]``. Row 0 is always sky and the last row always road. Object classes
    are drawn from the palette's non-sky, non-road classes. Any class in
    ``ensure_classes`` still missing afterwards gets one extra small rectangle,
    which is how a style reference is made to cover a content scene's classes.
    """
    if h < 8 or w < 8:
        raise InvalidInputError(f"scene must be at least 8x8, got {h}x{w}")
    palette = get_palette(palette)
    rng = np.random.default_rng(seed)

    labels = np.full((h, w), ROAD, dtype=np.int64)
    horizon = int(rng.integers(h // 3, h // 2 + 1))
    labels[:horizon] = SKY

    objects = [c for c in OBJECT_CLASSES if c in palette.colors]
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_objects if objects else 0):
        cls = objects[int(rng.integers(len(objects)))]
        oh = int(rng.integers(max(2, h // 8), max(3, h // 3) + 1))
        ow = int(rng.integers(max(2, w // 10), max(3, w // 4) + 1))
        top = int(rng.integers(max(1, horizon - oh), max(2, min(h - 1 - oh, horizon + h // 6)) + 1))
        top = min(max(top, 1), h - 1 - oh)
        left = int(rng.integers(0, w - ow + 1))
        if rng.random() < 0.5:
            labels[top : top + oh, left : left + ow] = cls
        else:
            cy, cx = top + (oh - 1) / 2, left + (ow - 1) / 2
            inside = ((yy - cy) / (oh / 2)) ** 2 + ((xx - cx) / (ow / 2)) ** 2 <= 1.0
            labels[inside] = cls
    for cls in ensure_classes:
        if cls not in palette.colors:
            raise InvalidInputError(f"palette {palette.name!r} has no class {cls}")
        if (labels == cls).any():
            continue
        oh, ow = max(2, h // 8), max(2, w // 10)
        top = int(rng.integers(1, h - oh))
        left = int(rng.integers(0, w - ow + 1))
        labels[top : top + oh, left : left + ow] = cls

    image = np.empty((3, h, w), dtype=np.float64)
    texture = rng.uniform(-1.0, 1.0, size=(3, h, w))
    for c in np.unique(labels):
        sel = labels == c
        base = np.asarray(palette.colors[int(c)], dtype=np.float64)
        image[:, sel] = base[:, None] + palette.texture[int(c)] * texture[:, sel]
    return np.clip(image, 0.0, 1.0).astype(np.float32), SegmentationMask(labels)


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def per_class_stat_error(img, ref_stats: ClassStatsTable, mask: SegmentationMask) -> float:
    """Mean over valid classes of ``||(mu, sigma)_img - (mu, sigma)_ref||``.

    The reference for each class is the style side of ``ref_stats``.
    """
    img = as_feature_map(img)
    errs = []
    for c, entry in sorted(ref_stats.items()):
        if not entry.valid:
            continue
        got = masked_class_stats(img, mask, c)
        if not got.valid:
            continue
        diff = np.concatenate([got.mean - entry.style.mean, got.std - entry.style.std])
        errs.append(float(np.sqrt(diff @ diff)))
    if not errs:
        raise InvalidInputError("no class is valid in both the image and the reference table")
    return float(np.mean(errs))


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        k = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (k, k):
            raise InvalidInputError(f"mean {mean.shape} and cov {cov.shape} are inconsistent")
        if not np.allclose(cov, cov.T, atol=1e-8, rtol=0):
            raise InvalidInputError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-8:
            raise InvalidInputError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def fit(cls, samples) -> "GaussianStats":
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise InvalidInputError("need at least two samples of shape (n, k)")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        return cls(x.mean(axis=0), (cov + cov.T) / 2)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_gaussian(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise InvalidInputError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    cross = _psd_sqrt(root_a @ b.cov @ root_a)
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def image_features(img) -> np.ndarray:
    """Per-channel mean and std, concatenated: the feature vector fed to the Fréchet distance."""
    s = channel_stats(img)
    return np.concatenate([s.mean, s.std])


def frechet_distance_sets(images_a, images_b) -> float:
    fa = np.stack([image_features(x) for x in images_a])
    fb = np.stack([image_features(x) for x in images_b])
    return frechet_gaussian(GaussianStats.fit(fa), GaussianStats.fit(fb))
