"""Three-stream transfer: content replay, style replay and the stylised output stream.

Per executed step ``t`` (from ``T - skip`` down to 1):

1. content and style projections at step ``t`` are read from their inversion
   caches;
2. the output stream is denoised with every hooked site replaced by
   (filtered) cross-image attention;
3. the new output latent is renormalized against the style latent at ``t - 1``
   (class-wise or global, depending on mode).

The output stream starts from the content's inverted latent at ``T - skip`` and
reuses the content's stored residuals.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from semstyle.adain import FallbackPolicy, adain, class_adain_step
from semstyle.attention import AttentionProjections, filtered_cross_attention, n_filtered
from semstyle.diffusion import Denoiser, InversionTrajectory, invert, make_schedule, sample_step
from semstyle.errors import ConfigurationError, InvalidInputError
from semstyle.tensor_core import SegmentationMask, as_feature_map, resize_mask_nearest


class TransferMode(str, Enum):
    GLOBAL_ADAIN_DIFFUSION = "global-adain-diffusion"
    CROSS_IMAGE_ATTENTION = "cross-image-attention"
    CACTI = "cacti"
    CACTIF = "cactif"

    @classmethod
    def parse(cls, value) -> "TransferMode":
        if isinstance(value, cls):
            return value
        aliases = {"adain": cls.GLOBAL_ADAIN_DIFFUSION, "cross": cls.CROSS_IMAGE_ATTENTION}
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            raise ConfigurationError(f"unknown transfer mode {value!r}") from None

    @property
    def uses_attention(self) -> bool:
        return self is not TransferMode.GLOBAL_ADAIN_DIFFUSION

    @property
    def default_adain_scope(self) -> str:
        return "class-wise" if self in (TransferMode.CACTI, TransferMode.CACTIF) else "global"


ADAIN_SCOPES = ("class-wise", "global")
QUERY_SOURCES = ("output-stream", "content-replay")


@dataclass(frozen=True)
class TransferConfig:
    mode: TransferMode = TransferMode.CACTIF
    p: float = 0.25
    T: int = 50
    skip: int = 30
    sites: Optional[tuple[str, ...]] = None
    adain_scope: Optional[str] = None
    fallback: FallbackPolicy = FallbackPolicy.GLOBAL_STYLE_STATS
    seed: int = 0
    query_source: str = "output-stream"
    adain_steps: Optional[tuple[int, int]] = None
    similarity_reading: str = "prose"

    def __post_init__(self):
        object.__setattr__(self, "mode", TransferMode.parse(self.mode))
        object.__setattr__(self, "fallback", FallbackPolicy.parse(self.fallback))
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"p must lie in [0, 1], got {self.p}")
        if self.T < 1 or not 0 <= self.skip < self.T:
            raise ConfigurationError(f"need T >= 1 and 0 <= skip < T, got T={self.T}, skip={self.skip}")
        if self.adain_scope is not None and self.adain_scope not in ADAIN_SCOPES:
            raise ConfigurationError(f"adain_scope must be one of {ADAIN_SCOPES}")
        if self.query_source not in QUERY_SOURCES:
            raise ConfigurationError(f"query_source must be one of {QUERY_SOURCES}")
        if self.sites is not None:
            object.__setattr__(self, "sites", tuple(self.sites))
        if self.adain_steps is not None:
            lo, hi = self.adain_steps
            object.__setattr__(self, "adain_steps", (int(lo), int(hi)))

    @property
    def effective_p(self) -> float:
        """Filtering fraction actually used; only the filtered mode filters."""
        return self.p if self.mode is TransferMode.CACTIF else 0.0

    @property
    def effective_adain_scope(self) -> str:
        return self.adain_scope or self.mode.default_adain_scope

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        d["fallback"] = self.fallback.value
        d["sites"] = list(self.sites) if self.sites is not None else None
        d["adain_steps"] = list(self.adain_steps) if self.adain_steps is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransferConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if d.get("sites") is not None:
            d["sites"] = tuple(d["sites"])
        if d.get("adain_steps") is not None:
            d["adain_steps"] = tuple(d["adain_steps"])
        return cls(**d)


@dataclass
class StepRecord:
    t: int
    filtered: dict[str, int] = field(default_factory=dict)


def _resolve_sites(cfg: TransferConfig, denoiser: Denoiser) -> tuple[str, ...]:
    if not cfg.mode.uses_attention:
        return ()
    available = denoiser.attention_sites
    sites = cfg.sites if cfg.sites is not None else tuple(available)
    missing = [s for s in sites if s not in available]
    if missing:
        raise ConfigurationError(f"site(s) {missing} not present in denoiser; available: {list(available)}")
    if not sites:
        raise ConfigurationError(f"mode {cfg.mode.value} needs at least one attention site")
    return sites


def _injection_hook(
    site: str,
    content: InversionTrajectory,
    style: InversionTrajectory,
    cfg: TransferConfig,
    log: Optional[StepRecord],
):
    p = cfg.effective_p

    def hook(out_proj: AttentionProjections, t: int) -> np.ndarray:
        c = content.projections_cache[(site, t)]
        s = style.projections_cache[(site, t)]
        q = out_proj.q if cfg.query_source == "output-stream" else c.q
        query_side = AttentionProjections(q, c.k, c.v, site, "content")
        out = filtered_cross_attention(query_side, s, p, cfg.similarity_reading)
        if log is not None:
            log.filtered[site] = n_filtered(p, query_side.n)
        return out

    return hook


def _normalize(z_out, z_style, masks, cfg: TransferConfig) -> np.ndarray:
    if cfg.effective_adain_scope == "global" or masks is None:
        return adain(z_out, z_style)
    return class_adain_step(z_out, z_style, masks, cfg.fallback)


def _latent_masks(content_mask, style_mask, content_shape, style_shape):
    return (
        resize_mask_nearest(content_mask, *content_shape),
        resize_mask_nearest(style_mask, *style_shape),
    )


def _run(
    content_img,
    style_img,
    content_mask: Optional[SegmentationMask],
    style_mask: Optional[SegmentationMask],
    cfg: TransferConfig,
    denoiser: Denoiser,
    trace: Optional[list] = None,
) -> np.ndarray:
    content_img = as_feature_map(content_img, name="content image")
    style_img = as_feature_map(style_img, name="style image")
    if content_img.shape[0] != style_img.shape[0]:
        raise InvalidInputError(
            f"channel mismatch: content {content_img.shape[0]} vs style {style_img.shape[0]}"
        )
    scope = cfg.effective_adain_scope
    if scope == "class-wise" and (content_mask is None or style_mask is None):
        raise InvalidInputError("class-wise AdaIN needs both content and style masks")
    sites = _resolve_sites(cfg, denoiser)
    sched = make_schedule(cfg.T, cfg.skip)

    content = invert(content_img, denoiser, sched, cfg.seed, sched.start_step)
    style = invert(style_img, denoiser, sched, cfg.seed, sched.start_step)
    masks = _latent_masks(content_mask, style_mask, content_img.shape[1:], style_img.shape[1:]) if scope == "class-wise" else None

    z = content.latents[sched.start_step]
    for t in range(sched.start_step, 0, -1):
        record = StepRecord(t) if trace is not None else None
        hooks = {s: _injection_hook(s, content, style, cfg, record) for s in sites}
        z = sample_step(z, t, denoiser, content.noise_residuals[t], sched, hooks)
        if cfg.adain_steps is None or cfg.adain_steps[0] <= t <= cfg.adain_steps[1]:
            z = _normalize(z, style.latents[t - 1], masks, cfg)
        if trace is not None:
            trace.append(record)
    return z


def transfer(
    content_img,
    style_img,
    content_mask: Optional[SegmentationMask],
    style_mask: Optional[SegmentationMask],
    cfg: TransferConfig,
    denoiser: Denoiser,
    trace: Optional[list] = None,
) -> np.ndarray:
    """Stylise ``content_img`` toward ``style_img`` according to ``cfg.mode``.

    Masks are required for class-wise modes and ignored by the global baselines.
    Pass a list as ``trace`` to collect one :class:`StepRecord` per executed step.
    """
    return _run(content_img, style_img, content_mask, style_mask, cfg, denoiser, trace)


def baseline_adain_diffusion(content_img, style_img, cfg: TransferConfig, denoiser: Denoiser) -> np.ndarray:
    cfg = dataclasses.replace(cfg, mode=TransferMode.GLOBAL_ADAIN_DIFFUSION, adain_scope="global")
    return _run(content_img, style_img, None, None, cfg, denoiser)


def baseline_cross_image(content_img, style_img, cfg: TransferConfig, denoiser: Denoiser) -> np.ndarray:
    cfg = dataclasses.replace(cfg, mode=TransferMode.CROSS_IMAGE_ATTENTION, adain_scope="global")
    return _run(content_img, style_img, None, None, cfg, denoiser)
