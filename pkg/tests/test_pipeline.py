import dataclasses

import numpy as np
import pytest

from semstyle.adain import class_adain
from semstyle.diffusion import analytic_denoiser, toy_attention_denoiser
from semstyle.errors import ConfigurationError, InvalidInputError
from semstyle.evalkit import gen_scene
from semstyle.pipeline import (
    TransferConfig,
    TransferMode,
    baseline_adain_diffusion,
    baseline_cross_image,
    transfer,
)
from semstyle.tensor_core import SegmentationMask, channel_stats, masked_class_stats

SMALL = dict(T=10, skip=4)


@pytest.fixture(scope="module")
def denoiser():
    return toy_attention_denoiser(0, sites={"s8": (8, 8), "s16": (16, 16)})


@pytest.fixture(scope="module")
def scenes():
    c, cm = gen_scene(1, "day", 32, 32, 3)
    s, sm = gen_scene(2, "snow", 32, 32, 3, ensure_classes=cm.classes())
    return c, cm, s, sm


def test_config_defaults_and_validation():
    cfg = TransferConfig()
    assert (cfg.p, cfg.T, cfg.skip) == (0.25, 50, 30)
    assert cfg.mode is TransferMode.CACTIF and cfg.effective_adain_scope == "class-wise"
    assert TransferConfig(mode="cacti", p=0.4).effective_p == 0.0
    assert TransferConfig(mode="adain").mode is TransferMode.GLOBAL_ADAIN_DIFFUSION
    for bad in (dict(p=1.5), dict(skip=50), dict(mode="nope"), dict(query_source="x")):
        with pytest.raises(ConfigurationError):
            TransferConfig(**bad)
    assert TransferConfig.from_dict(cfg.to_dict()) == cfg


def test_content_preservation_limit(denoiser, scenes):
    c, cm, _, _ = scenes
    out = transfer(c, c, cm, cm, TransferConfig(mode="cactif", p=1.0, **SMALL), denoiser)
    assert np.abs(out - c).max() <= 1e-3


def test_cactif_p0_equals_cacti(denoiser, scenes):
    c, cm, s, sm = scenes
    a = transfer(c, s, cm, sm, TransferConfig(mode="cacti", **SMALL), denoiser)
    b = transfer(c, s, cm, sm, TransferConfig(mode="cactif", p=0.0, **SMALL), denoiser)
    np.testing.assert_array_equal(a, b)


def test_filtering_changes_output(denoiser, scenes):
    c, cm, s, sm = scenes
    a = transfer(c, s, cm, sm, TransferConfig(mode="cactif", p=0.0, **SMALL), denoiser)
    b = transfer(c, s, cm, sm, TransferConfig(mode="cactif", p=0.5, **SMALL), denoiser)
    assert np.abs(a - b).max() > 0


def test_single_class_cacti_equals_cross_baseline(denoiser, scenes):
    c, _, s, _ = scenes
    one = SegmentationMask(np.zeros((32, 32), int))
    a = transfer(c, s, one, one, TransferConfig(mode="cacti", **SMALL), denoiser)
    b = baseline_cross_image(c, s, TransferConfig(**SMALL), denoiser)
    assert np.abs(a - b).max() <= 1e-6


def test_cacti_differs_from_cross_on_two_class_scenes(denoiser, scenes):
    c, cm, s, sm = scenes
    a = transfer(c, s, cm, sm, TransferConfig(mode="cacti", **SMALL), denoiser)
    b = baseline_cross_image(c, s, TransferConfig(**SMALL), denoiser)
    assert np.abs(a - b).max() > 0


def test_baseline_routing(denoiser, scenes):
    c, cm, s, sm = scenes
    cfg = TransferConfig(**SMALL)
    np.testing.assert_array_equal(
        baseline_adain_diffusion(c, s, cfg, denoiser),
        transfer(c, s, None, None, dataclasses.replace(cfg, mode="global-adain-diffusion"), denoiser),
    )
    np.testing.assert_array_equal(
        baseline_cross_image(c, s, cfg, denoiser),
        transfer(c, s, cm, sm, dataclasses.replace(cfg, mode="cross-image-attention"), denoiser),
    )


def test_adain_baseline_properties(denoiser, scenes):
    c, _, s, _ = scenes
    assert np.abs(baseline_adain_diffusion(c, c, TransferConfig(**SMALL), denoiser) - c).max() <= 1e-3
    out = baseline_adain_diffusion(c, s, TransferConfig(**SMALL), denoiser)
    got, want = channel_stats(out), channel_stats(s)
    assert np.abs(got.mean - want.mean).max() <= 1e-2
    assert np.abs(got.std - want.std).max() <= 1e-2


def test_directional_per_class_fidelity(denoiser, scenes):
    c, cm, s, sm = scenes
    out = transfer(c, s, cm, sm, TransferConfig(mode="cacti", **SMALL), denoiser)
    for k in set(cm.classes()) & set(sm.classes()):
        target = masked_class_stats(s, sm, k).mean
        before = np.linalg.norm(masked_class_stats(c, cm, k).mean - target)
        after = np.linalg.norm(masked_class_stats(out, cm, k).mean - target)
        assert after < before


def test_final_latent_matches_class_stats(denoiser, scenes):
    c, cm, s, sm = scenes
    out = transfer(c, s, cm, sm, TransferConfig(mode="cactif", **SMALL), denoiser)
    ref = class_adain(out, s, cm, sm)
    assert np.abs(out - ref).max() <= 1e-3


def test_determinism(denoiser, scenes):
    c, cm, s, sm = scenes
    cfg = TransferConfig(mode="cactif", seed=9, **SMALL)
    np.testing.assert_array_equal(transfer(c, s, cm, sm, cfg, denoiser), transfer(c, s, cm, sm, cfg, denoiser))


def test_trace_counts_filtered_rows(denoiser, scenes):
    c, cm, s, sm = scenes
    trace = []
    transfer(c, s, cm, sm, TransferConfig(mode="cactif", p=0.25, **SMALL), denoiser, trace=trace)
    assert [r.t for r in trace] == list(range(6, 0, -1))
    assert trace[0].filtered == {"s8": 16, "s16": 64}


def test_query_source_content_replay(denoiser, scenes):
    c, cm, s, sm = scenes
    a = transfer(c, s, cm, sm, TransferConfig(mode="cacti", **SMALL), denoiser)
    b = transfer(c, s, cm, sm, TransferConfig(mode="cacti", query_source="content-replay", **SMALL), denoiser)
    assert a.shape == b.shape and np.all(np.isfinite(b))


def test_configuration_errors(denoiser, scenes):
    c, cm, s, sm = scenes
    with pytest.raises(ConfigurationError):
        transfer(c, s, cm, sm, TransferConfig(mode="cacti", sites=("nope",), **SMALL), denoiser)
    with pytest.raises(ConfigurationError):
        transfer(c, s, cm, sm, TransferConfig(mode="cacti", **SMALL), analytic_denoiser())
    with pytest.raises(InvalidInputError):
        transfer(c, s, None, None, TransferConfig(mode="cacti", **SMALL), denoiser)
    with pytest.raises(InvalidInputError):
        transfer(c, s[:1], cm, sm, TransferConfig(mode="cacti", **SMALL), denoiser)


def test_adain_mode_runs_with_analytic_denoiser(scenes):
    c, _, s, _ = scenes
    out = baseline_adain_diffusion(c, s, TransferConfig(**SMALL), analytic_denoiser())
    assert out.shape == c.shape


def test_masks_resized_to_latent(denoiser, scenes):
    c, cm, s, sm = scenes
    big = SegmentationMask(np.repeat(np.repeat(cm.labels, 2, axis=0), 2, axis=1))
    a = transfer(c, s, cm, sm, TransferConfig(mode="cacti", **SMALL), denoiser)
    b = transfer(c, s, big, sm, TransferConfig(mode="cacti", **SMALL), denoiser)
    np.testing.assert_array_equal(a, b)
