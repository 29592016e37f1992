"""Class-aware style transfer between feature maps inside a small diffusion harness."""

__version__ = "0.1.0"

from semstyle.errors import (
    ConfigurationError,
    InvalidInputError,
    InvalidStateError,
    SemstyleError,
    UnsupportedOperationError,
)
from semstyle.tensor_core import (
    ChannelStatistics,
    SegmentationMask,
    as_feature_map,
    channel_stats,
    cosine,
    masked_class_stats,
    resize_mask_nearest,
    softmax_rows,
)
from semstyle.adain import FallbackPolicy, adain, class_adain, class_adain_step
from semstyle.attention import AttentionProjections, filtered_cross_attention
from semstyle.diffusion import analytic_denoiser, invert, make_schedule, toy_attention_denoiser
from semstyle.pipeline import TransferConfig, TransferMode, transfer
from semstyle.evalkit import frechet_gaussian, gen_scene, psnr

__all__ = [
    "AttentionProjections",
    "ChannelStatistics",
    "ConfigurationError",
    "FallbackPolicy",
    "InvalidInputError",
    "InvalidStateError",
    "SegmentationMask",
    "SemstyleError",
    "TransferConfig",
    "TransferMode",
    "UnsupportedOperationError",
    "adain",
    "analytic_denoiser",
    "as_feature_map",
    "channel_stats",
    "class_adain",
    "class_adain_step",
    "cosine",
    "filtered_cross_attention",
    "frechet_gaussian",
    "gen_scene",
    "invert",
    "make_schedule",
    "masked_class_stats",
    "psnr",
    "resize_mask_nearest",
    "softmax_rows",
    "toy_attention_denoiser",
    "transfer",
]
