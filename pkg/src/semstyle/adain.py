"""Global and class-wise adaptive instance normalization."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from semstyle.errors import InvalidInputError
from semstyle.tensor_core import (
    ChannelStatistics,
    SegmentationMask,
    as_feature_map,
    channel_stats,
    masked_class_stats,
)

EPS = 1e-5


class FallbackPolicy(str, Enum):
    """What to do with content pixels whose class has no style counterpart."""

    GLOBAL_STYLE_STATS = "global-style-stats"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, value) -> "FallbackPolicy":
        if isinstance(value, cls):
            return value
        aliases = {"global": cls.GLOBAL_STYLE_STATS, "identity": cls.IDENTITY}
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            raise InvalidInputError(f"unknown fallback policy {value!r}") from None


@dataclass(frozen=True)
class ClassStats:
    content: ChannelStatistics
    style: ChannelStatistics

    @property
    def valid(self) -> bool:
        return self.content.valid and self.style.valid


ClassStatsTable = dict[int, ClassStats]


def _check_channels(content: np.ndarray, style: np.ndarray) -> None:
    if content.shape[0] != style.shape[0]:
        raise InvalidInputError(
            f"channel mismatch: content has {content.shape[0]}, style has {style.shape[0]}"
        )


def _renormalize(x: np.ndarray, src: ChannelStatistics, dst: ChannelStatistics) -> np.ndarray:
    # x: (C, N) float64
    scale = dst.std / (src.std + EPS)
    return (x - src.mean[:, None]) * scale[:, None] + dst.mean[:, None]


def adain(content, style) -> np.ndarray:
    content = as_feature_map(content, name="content")
    style = as_feature_map(style, name="style")
    _check_channels(content, style)
    c = content.shape[0]
    flat = content.reshape(c, -1).astype(np.float64)
    out = _renormalize(flat, channel_stats(content), channel_stats(style))
    return out.reshape(content.shape).astype(np.float32)


def class_stats_table(
    content, content_mask: SegmentationMask, style, style_mask: SegmentationMask
) -> ClassStatsTable:
    """Stats for every class seen in either mask; ``valid`` only when present in both."""
    classes = sorted(set(content_mask.classes()) | set(style_mask.classes()))
    return {
        c: ClassStats(
            masked_class_stats(content, content_mask, c),
            masked_class_stats(style, style_mask, c),
        )
        for c in classes
    }


def _global_style_stats(style: np.ndarray, style_mask: SegmentationMask) -> ChannelStatistics:
    labelled = style_mask.labels != style_mask.ignore_id
    if not labelled.any():
        return ChannelStatistics.absent(style.shape[0])
    vals = style[:, labelled].astype(np.float64)
    n = vals.shape[1]
    mean = vals.sum(axis=1) / n
    std = np.sqrt(((vals - mean[:, None]) ** 2).sum(axis=1) / n)
    return ChannelStatistics(mean, std, n)


def class_adain(
    content,
    style,
    content_mask: SegmentationMask,
    style_mask: SegmentationMask,
    fallback: FallbackPolicy | str = FallbackPolicy.GLOBAL_STYLE_STATS,
) -> np.ndarray:
    """Match each content class's statistics to the same class in the style map.

    Classes missing from the style map follow ``fallback``: either they are left
    untouched or they are renormalized toward the style's global statistics
    (ignored style pixels excluded). Pixels labelled ``ignore_id`` are never
    modified.
    """
    content = as_feature_map(content, name="content")
    style = as_feature_map(style, name="style")
    _check_channels(content, style)
    fallback = FallbackPolicy.parse(fallback)
    if content_mask.shape != content.shape[1:]:
        raise InvalidInputError(
            f"content mask {content_mask.shape} does not match content {content.shape[1:]}"
        )
    if style_mask.shape != style.shape[1:]:
        raise InvalidInputError(
            f"style mask {style_mask.shape} does not match style {style.shape[1:]}"
        )

    out = content.astype(np.float64)
    global_style = None
    for c in content_mask.classes():
        sel = content_mask.binary(c)
        src = masked_class_stats(content, content_mask, c)
        dst = masked_class_stats(style, style_mask, c)
        if not dst.valid:
            if fallback is FallbackPolicy.IDENTITY:
                continue
            if global_style is None:
                global_style = _global_style_stats(style, style_mask)
            if not global_style.valid:
                continue
            dst = global_style
        out[:, sel] = _renormalize(out[:, sel], src, dst)
    return out.astype(np.float32)


def class_adain_step(
    z_out,
    z_style,
    masks: tuple[SegmentationMask, SegmentationMask],
    fallback: FallbackPolicy | str = FallbackPolicy.GLOBAL_STYLE_STATS,
) -> np.ndarray:
    """One in-loop application: ``masks`` is ``(output/content mask, style mask)`` at latent size."""
    content_mask, style_mask = masks
    return class_adain(z_out, z_style, content_mask, style_mask, fallback)
