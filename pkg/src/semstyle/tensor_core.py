"""Numeric substrate shared by every kernel.

Feature maps are plain ``float32`` numpy arrays of shape ``(C, H, W)``.
Reductions accumulate in ``float64`` with a fixed (row-major) order so results
are reproducible run-to-run.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from semstyle.errors import InvalidInputError

IGNORE_ID = 255

FeatureMap = np.ndarray


def as_feature_map(x, *, name: str = "feature map") -> FeatureMap:
    """Coerce ``x`` to a contiguous float32 ``(C, H, W)`` array and validate it."""
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    if arr.ndim != 3:
        raise InvalidInputError(f"{name} must have shape (C, H, W), got {arr.shape}")
    if arr.size == 0:
        raise InvalidInputError(f"{name} is empty")
    check_finite(arr, name=name)
    return arr


def check_finite(x: np.ndarray, *, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return x


@dataclass(frozen=True)
class SegmentationMask:
    labels: np.ndarray
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise InvalidInputError(f"mask labels must be 2-D, got shape {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise InvalidInputError("mask labels must be integers")
        labels = labels.astype(np.int64)
        if labels.size and labels.min() < 0:
            raise InvalidInputError("mask labels must be non-negative")
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def classes(self) -> list[int]:
        """Sorted class ids present in the mask, ``ignore_id`` excluded."""
        ids = np.unique(self.labels)
        return [int(c) for c in ids if c != self.ignore_id]

    def binary(self, c: int) -> np.ndarray:
        if c == self.ignore_id:
            return np.zeros(self.shape, dtype=bool)
        return self.labels == c


@dataclass(frozen=True)
class ChannelStatistics:
    """Per-channel population mean/std over the contributing pixels.

    ``count == 0`` marks an absent class; mean and std are then zeros and must
    not be used.
    """

    mean: np.ndarray
    std: np.ndarray
    count: int = field(default=0)

    @property
    def valid(self) -> bool:
        return self.count > 0

    @classmethod
    def absent(cls, channels: int) -> "ChannelStatistics":
        return cls(np.zeros(channels), np.zeros(channels), 0)


def _stats_of(values: np.ndarray) -> ChannelStatistics:
    # values: (C, N) float64
    n = values.shape[1]
    mean = values.sum(axis=1) / n
    var = ((values - mean[:, None]) ** 2).sum(axis=1) / n
    return ChannelStatistics(mean, np.sqrt(var), n)


def channel_stats(f) -> ChannelStatistics:
    f = as_feature_map(f)
    c = f.shape[0]
    return _stats_of(f.reshape(c, -1).astype(np.float64))


def masked_class_stats(f, m: SegmentationMask, c: int) -> ChannelStatistics:
    f = as_feature_map(f)
    if m.shape != f.shape[1:]:
        raise InvalidInputError(f"mask shape {m.shape} does not match feature map {f.shape[1:]}")
    sel = m.binary(c)
    if not sel.any():
        return ChannelStatistics.absent(f.shape[0])
    return _stats_of(f[:, sel].astype(np.float64))


def resize_mask_nearest(m: SegmentationMask, out_h: int, out_w: int) -> SegmentationMask:
    """Nearest-neighbour resize sampling input ``(floor(i*H/out_h), floor(j*W/out_w))``."""
    if out_h < 1 or out_w < 1:
        raise InvalidInputError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = m.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return SegmentationMask(m.labels[np.ix_(rows, cols)], m.ignore_id)


def softmax_rows(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def cosine(u, v, eps: float = 1e-8) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise InvalidInputError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    s = float(u @ v) / ((np.linalg.norm(u) + eps) * (np.linalg.norm(v) + eps))
    return min(1.0, max(-1.0, s))
