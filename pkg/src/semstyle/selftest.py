"""Fast in-process invariant checks behind ``semstyle selftest``."""
from __future__ import annotations

import numpy as np

from semstyle.adain import class_adain
from semstyle.attention import (
    AttentionProjections,
    cross_image_attention,
    filtered_cross_attention,
    n_filtered,
    percentile_filter,
    self_attention,
)
from semstyle.diffusion import analytic_denoiser, invert, make_schedule, replay, toy_attention_denoiser
from semstyle.evalkit import GaussianStats, frechet_gaussian, gen_scene
from semstyle.pipeline import TransferConfig, transfer
from semstyle.tensor_core import masked_class_stats, softmax_rows


def _softmax(rng):
    x = rng.normal(size=(16, 9)) * 5
    a, b = softmax_rows(x), softmax_rows(x + 3.7)
    return np.abs(a.sum(axis=1) - 1).max() <= 1e-6 and np.abs(a - b).max() <= 1e-6


def _projections(rng, n, d, tag):
    return AttentionProjections(*(rng.normal(size=(n, d)) for _ in range(3)), source_tag=tag)


def _lattice(rng):
    for _ in range(50):
        d = int(rng.integers(1, 17))
        c = _projections(rng, int(rng.integers(1, 33)), d, "content")
        s = _projections(rng, int(rng.integers(1, 33)), d, "style")
        if np.abs(filtered_cross_attention(c, s, 0.0) - cross_image_attention(c, s)).max() > 1e-6:
            return False
        if np.abs(filtered_cross_attention(c, s, 1.0) - self_attention(c)).max() > 1e-6:
            return False
    return True


def _counting(rng):
    for n in range(1, 65):
        s = np.round(rng.normal(size=n), 1)
        for p in (0.0, 0.1, 0.25, 0.3, 0.5, 1.0):
            if percentile_filter(s, p).n_filtered != n_filtered(p, n):
                return False
    return True


def _class_stats(rng):
    c, cm = gen_scene(int(rng.integers(1 << 30)), "day", 32, 64, 3)
    s, sm = gen_scene(int(rng.integers(1 << 30)), "snow", 32, 64, 3, ensure_classes=cm.classes())
    out = class_adain(c, s, cm, sm)
    for k in cm.classes():
        got, want = masked_class_stats(out, cm, k), masked_class_stats(s, sm, k)
        if np.abs(got.mean - want.mean).max() > 1e-3 or np.abs(got.std - want.std).max() > 1e-3:
            return False
    return True


def _roundtrip(rng):
    z0 = rng.random((3, 16, 16)).astype(np.float32)
    sched = make_schedule(10, 0)
    a = analytic_denoiser()
    if np.abs(replay(invert(z0, a, sched, 1), a, sched) - z0).max() > 1e-6:
        return False
    d = toy_attention_denoiser(0, sites={"s8": (8, 8), "s16": (16, 16)})
    return np.abs(replay(invert(z0, d, sched, 1), d, sched) - z0).max() <= 1e-3


def _frechet(rng):
    v = frechet_gaussian(GaussianStats([0.0], [[1.0]]), GaussianStats([3.0], [[4.0]]))
    return abs(v - 10.0) <= 1e-6


def _content_limit(rng):
    c, cm = gen_scene(3, "day", 32, 32, 2)
    d = toy_attention_denoiser(0, sites={"s8": (8, 8), "s16": (16, 16)})
    out = transfer(c, c, cm, cm, TransferConfig(mode="cactif", p=1.0, T=10, skip=4), d)
    return np.abs(out - c).max() <= 1e-3


CHECKS = [
    ("softmax rows normalised and shift invariant", _softmax),
    ("filter reduction lattice p=0 / p=1", _lattice),
    ("filter count equals floor(p*n)", _counting),
    ("class-wise stats match style", _class_stats),
    ("inversion round trip", _roundtrip),
    ("frechet 1-D closed form", _frechet),
    ("content preservation at p=1", _content_limit),
]


def run_selftest(seed: int = 0) -> list[tuple[str, bool]]:
    rng = np.random.default_rng(seed)
    return [(name, bool(fn(rng))) for name, fn in CHECKS]
