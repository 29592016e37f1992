"""Small-scale DDPM harness with residual-storing inversion and attention hooks.

Steps are indexed ``t = 1..T``; ``latents[t]`` is the latent at step ``t`` and
``latents[0]`` the clean input. Reverse updates use the epsilon-parameterised
posterior mean with ``sigma_t = sqrt(beta_t)``, which is non-zero at every
step so each stored residual is exactly recoverable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from semstyle.attention import AttentionProjections, self_attention
from semstyle.errors import InvalidInputError, InvalidStateError, UnsupportedOperationError
from semstyle.tensor_core import as_feature_map, check_finite

Hook = Callable[[AttentionProjections, int], Optional[np.ndarray]]

BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    skip: int = 0

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at step ``t``; ``alpha_bar(0) == 1``."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        return math.sqrt(self.beta(t))

    @property
    def start_step(self) -> int:
        """First executed reverse step once ``skip`` steps are dropped."""
        return self.T - self.skip


def make_schedule(T: int = 50, skip: int = 30) -> DiffusionSchedule:
    if T < 1:
        raise InvalidInputError(f"T must be >= 1, got {T}")
    if not 0 <= skip < T:
        raise InvalidInputError(f"skip must satisfy 0 <= skip < T, got skip={skip}, T={T}")
    betas = np.linspace(BETA_START, BETA_END, T) if T > 1 else np.array([BETA_START])
    alpha_bars = np.cumprod(1.0 - betas)
    return DiffusionSchedule(T, betas, alpha_bars, skip)


def _check_step(sched: DiffusionSchedule, t: int) -> None:
    if not 1 <= t <= sched.T:
        raise InvalidInputError(f"step {t} outside 1..{sched.T}")


def add_noise(z0, t: int, noise, sched: DiffusionSchedule) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float32)
    noise = np.asarray(noise, dtype=np.float32)
    if z0.shape != noise.shape:
        raise InvalidInputError(f"shape mismatch: {z0.shape} vs {noise.shape}")
    ab = sched.alpha_bar(t)
    out = math.sqrt(ab) * z0.astype(np.float64) + math.sqrt(1.0 - ab) * noise.astype(np.float64)
    return out.astype(np.float32)


# --------------------------------------------------------------------------- denoisers


class Denoiser:
    """Noise predictor with named self-attention sites that accept hooks.

    A hook receives the site's projections (tagged ``output``) and the step
    index and returns either ``None`` (keep vanilla attention) or an ``(n, d)``
    matrix replacing the attention output. Hooks may be registered on the
    instance or passed per call; per-call hooks take precedence and keep the
    instance free of shared state.
    """

    def __init__(self):
        self._hooks: dict[str, Hook] = {}

    @property
    def attention_sites(self) -> dict[str, tuple[int, int]]:
        return {}

    def _validate_sites(self, names) -> None:
        sites = self.attention_sites
        if not sites:
            raise UnsupportedOperationError(f"{type(self).__name__} has no attention sites")
        unknown = [n for n in names if n not in sites]
        if unknown:
            raise InvalidInputError(f"unknown attention site(s) {unknown}; available: {list(sites)}")

    def register_hook(self, site: str, hook: Hook) -> None:
        self._validate_sites([site])
        self._hooks[site] = hook

    def remove_hooks(self) -> None:
        self._hooks.clear()

    def predict(self, z, t: int, hooks: Mapping[str, Hook] | None = None) -> np.ndarray:
        raise NotImplementedError


class AnalyticDenoiser(Denoiser):
    """Predicts zero noise everywhere; reverse steps become closed-form affine maps."""

    def predict(self, z, t: int, hooks: Mapping[str, Hook] | None = None) -> np.ndarray:
        if hooks:
            self._validate_sites(hooks)
        return np.zeros_like(as_feature_map(z))


def analytic_denoiser() -> AnalyticDenoiser:
    return AnalyticDenoiser()


def _resample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Block-mean down / repeat up per axis; each axis ratio must be integral."""
    _, h, w = x.shape
    for size, target in ((h, out_h), (w, out_w)):
        if size % target and target % size:
            raise InvalidInputError(f"cannot resample {h}x{w} to {out_h}x{out_w}")
    if out_h <= h:
        f = h // out_h
        x = x.reshape(x.shape[0], out_h, f, x.shape[2]).mean(axis=2)
    else:
        x = np.repeat(x, out_h // h, axis=1)
    if out_w <= w:
        f = w // out_w
        x = x.reshape(x.shape[0], x.shape[1], out_w, f).mean(axis=3)
    else:
        x = np.repeat(x, out_w // w, axis=2)
    return x


def _conv3x3(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # x: (C_in, H, W), weight: (C_out, C_in, 3, 3); zero padding
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)], axis=1)
    out = weight.reshape(weight.shape[0], c * 9) @ cols.reshape(c * 9, h * w)
    return out.reshape(-1, h, w)


def _pointwise(weight: np.ndarray, x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    return (weight @ x.reshape(c, h * w)).reshape(-1, h, w)


def _time_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    return np.pad(emb, (0, dim - emb.size)).astype(np.float32)


class ToyAttentionDenoiser(Denoiser):
    """Untrained seeded network: conv block, one attention site per resolution, conv block."""

    def __init__(
        self,
        seed: int = 0,
        sites: Mapping[str, tuple[int, int]] | None = None,
        channels: int = 3,
        hidden: int = 16,
        head_dim: int = 8,
    ):
        super().__init__()
        if sites is None:
            sites = {"dec16": (16, 16), "dec32": (32, 32)}
        self._sites = {str(k): (int(v[0]), int(v[1])) for k, v in sites.items()}
        self.seed = seed
        self.channels = channels
        self.hidden = hidden
        self.head_dim = head_dim

        rng = np.random.default_rng(seed)

        def w(*shape, fan_in, gain=1.0):
            return (rng.standard_normal(shape) * gain / math.sqrt(fan_in)).astype(np.float32)

        self.w_in = w(hidden, channels, fan_in=channels)
        self.b_in = w(hidden, fan_in=hidden, gain=0.1)
        self.conv1 = w(hidden, hidden, 3, 3, fan_in=9 * hidden, gain=0.5)
        self.conv2 = w(hidden, hidden, 3, 3, fan_in=9 * hidden, gain=0.5)
        self.attn = {
            name: {
                "q": w(hidden, head_dim, fan_in=hidden),
                "k": w(hidden, head_dim, fan_in=hidden),
                "v": w(hidden, head_dim, fan_in=hidden),
                "o": w(head_dim, hidden, fan_in=head_dim, gain=0.5),
            }
            for name in self._sites
        }
        self.w_out = w(channels, hidden, fan_in=hidden, gain=0.5)

    @property
    def attention_sites(self) -> dict[str, tuple[int, int]]:
        return dict(self._sites)

    def predict(self, z, t: int, hooks: Mapping[str, Hook] | None = None) -> np.ndarray:
        z = as_feature_map(z)
        if z.shape[0] != self.channels:
            raise InvalidInputError(f"expected {self.channels} channels, got {z.shape[0]}")
        if hooks is None:
            hooks = self._hooks
        elif hooks:
            self._validate_sites(hooks)
        _, h, w = z.shape

        x = _pointwise(self.w_in, z) + (self.b_in + _time_embedding(t, self.hidden))[:, None, None]
        x = x + np.tanh(_conv3x3(x, self.conv1))
        for name, (sh, sw) in self._sites.items():
            p = self.attn[name]
            feats = _resample(x, sh, sw).reshape(self.hidden, -1).T  # (n, hidden)
            proj = AttentionProjections(feats @ p["q"], feats @ p["k"], feats @ p["v"], name, "output")
            out = None
            hook = hooks.get(name)
            if hook is not None:
                out = hook(proj, t)
            if out is None:
                out = self_attention(proj)
            out = np.asarray(out, dtype=np.float32)
            if out.shape != (proj.n, proj.d):
                raise InvalidInputError(f"hook at {name} returned shape {out.shape}, expected {(proj.n, proj.d)}")
            mixed = (out @ p["o"]).T.reshape(self.hidden, sh, sw)
            x = x + _resample(mixed, h, w)
        x = x + np.tanh(_conv3x3(x, self.conv2))
        eps = _pointwise(self.w_out, x)
        return check_finite(eps.astype(np.float32), name="predicted noise")


def toy_attention_denoiser(seed: int = 0, sites=None, channels: int = 3) -> ToyAttentionDenoiser:
    """``sites`` may be a mapping name -> (h, w) or a sequence of square sizes / (h, w) pairs."""
    if sites is not None and not isinstance(sites, Mapping):
        named = {}
        for s in sites:
            hw = (s, s) if isinstance(s, int) else tuple(s)
            named[f"dec{hw[0]}x{hw[1]}" if hw[0] != hw[1] else f"dec{hw[0]}"] = hw
        sites = named
    return ToyAttentionDenoiser(seed, sites, channels)


# --------------------------------------------------------------------------- sampling


def _posterior_mean(z_t: np.ndarray, eps: np.ndarray, t: int, sched: DiffusionSchedule) -> np.ndarray:
    beta = sched.beta(t)
    ab = sched.alpha_bar(t)
    return (z_t.astype(np.float64) - beta / math.sqrt(1.0 - ab) * eps.astype(np.float64)) / math.sqrt(1.0 - beta)


def sample_step(
    z_t,
    t: int,
    d: Denoiser,
    residual,
    sched: DiffusionSchedule,
    hooks: Mapping[str, Hook] | None = None,
) -> np.ndarray:
    """One reverse update ``z_{t-1} = mean(z_t, eps) + sigma_t * residual``."""
    _check_step(sched, t)
    if residual is None:
        raise InvalidStateError(f"no residual supplied for step {t}")
    z_t = as_feature_map(z_t)
    residual = np.asarray(residual, dtype=np.float32)
    if residual.shape != z_t.shape:
        raise InvalidInputError(f"residual shape {residual.shape} != latent shape {z_t.shape}")
    eps = d.predict(z_t, t, hooks)
    out = _posterior_mean(z_t, eps, t, sched) + sched.sigma(t) * residual.astype(np.float64)
    return check_finite(out.astype(np.float32), name=f"latent at step {t - 1}")


@dataclass
class InversionTrajectory:
    latents: list[np.ndarray]
    noise_residuals: dict[int, np.ndarray]
    projections_cache: dict[tuple[str, int], AttentionProjections] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.latents) - 1


def invert(
    z0, d: Denoiser, sched: DiffusionSchedule, seed: int = 0, upto: int | None = None
) -> InversionTrajectory:
    """Edit-friendly DDPM inversion.

    Latents at every step are drawn independently from the forward marginal;
    each residual is then solved for so that the reverse step from ``latents[t]``
    lands exactly on ``latents[t-1]``. Projections seen at every attention site
    during that pass are cached per ``(site, t)``.

    ``upto`` limits residuals and projections to steps ``<= upto`` (steps a
    skipped sampler never executes); latents are always drawn for every step
    so the noise stream does not depend on it.
    """
    z0 = as_feature_map(z0)
    rng = np.random.default_rng(seed)
    latents = [z0]
    for t in range(1, sched.T + 1):
        noise = rng.standard_normal(z0.shape).astype(np.float32)
        latents.append(add_noise(z0, t, noise, sched))

    residuals: dict[int, np.ndarray] = {}
    cache: dict[tuple[str, int], AttentionProjections] = {}
    upto = sched.T if upto is None else upto
    for t in range(upto, 0, -1):
        recorder = {}
        if d.attention_sites:
            recorder = {name: _recorder(cache, name, "content") for name in d.attention_sites}
        eps = d.predict(latents[t], t, recorder)
        mean = _posterior_mean(latents[t], eps, t, sched)
        residuals[t] = ((latents[t - 1].astype(np.float64) - mean) / sched.sigma(t)).astype(np.float32)
    return InversionTrajectory(latents, residuals, cache)


def _recorder(cache, name: str, tag: str) -> Hook:
    def hook(proj: AttentionProjections, t: int):
        cache[(name, t)] = AttentionProjections(proj.q, proj.k, proj.v, name, tag)
        return None

    return hook


def replay(
    traj: InversionTrajectory,
    d: Denoiser,
    sched: DiffusionSchedule,
    start: int | None = None,
    hooks: Mapping[str, Hook] | None = None,
) -> np.ndarray:
    """Run the reverse chain from ``latents[start]`` using the stored residuals."""
    start = sched.T if start is None else start
    z = traj.latents[start]
    for t in range(start, 0, -1):
        z = sample_step(z, t, d, traj.noise_residuals.get(t), sched, hooks)
    return z
