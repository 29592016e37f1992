"""Self-attention, cross-image (KV-injected) attention and similarity-based filtering.

Logits are kept unscaled; the ``1/sqrt(d)`` factor is applied only where a
softmax consumes them, so argmax correspondences do not depend on it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from semstyle.errors import InvalidInputError
from semstyle.tensor_core import softmax_rows

COSINE_EPS = 1e-8

SOURCE_TAGS = ("content", "style", "output")


@dataclass(frozen=True)
class AttentionProjections:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    site_id: str = ""
    source_tag: str = "content"

    def __post_init__(self):
        mats = [np.asarray(m, dtype=np.float32) for m in (self.q, self.k, self.v)]
        if any(m.ndim != 2 for m in mats):
            raise InvalidInputError("q, k and v must be 2-D (n, d) matrices")
        if not (mats[0].shape == mats[1].shape == mats[2].shape):
            raise InvalidInputError(
                f"q, k, v shapes disagree: {[m.shape for m in mats]}"
            )
        if mats[0].shape[0] == 0:
            raise InvalidInputError("projections have no positions")
        if self.source_tag not in SOURCE_TAGS:
            raise InvalidInputError(f"unknown source tag {self.source_tag!r}")
        for name, m in zip("qkv", mats):
            object.__setattr__(self, name, m)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]


@dataclass(frozen=True)
class FilterDecision:
    tau: float
    keep: np.ndarray
    p: float

    @property
    def n_filtered(self) -> int:
        return int((~self.keep).sum())


def _check_d(a: AttentionProjections, b: AttentionProjections) -> None:
    if a.d != b.d:
        raise InvalidInputError(f"head dimension mismatch: {a.d} vs {b.d}")


def attention_logits(q_proj: AttentionProjections, k_proj: AttentionProjections) -> np.ndarray:
    """Raw ``Q @ K.T`` in float64, shape ``(n_query, n_key)``."""
    _check_d(q_proj, k_proj)
    return q_proj.q.astype(np.float64) @ k_proj.k.astype(np.float64).T


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    d = q.shape[1]
    logits = q.astype(np.float64) @ k.astype(np.float64).T
    weights = softmax_rows(logits / math.sqrt(d))
    return (weights @ v.astype(np.float64)).astype(np.float32)


def self_attention(p: AttentionProjections) -> np.ndarray:
    return _attend(p.q, p.k, p.v)


def cross_image_attention(q_content: AttentionProjections, kv_style: AttentionProjections) -> np.ndarray:
    """Content queries attend over style keys/values."""
    _check_d(q_content, kv_style)
    return _attend(q_content.q, kv_style.k, kv_style.v)


def max_correspondence(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.size == 0:
        raise InvalidInputError("attention map must be a non-empty 2-D matrix")
    # np.argmax returns the first maximum, i.e. the smallest key index on ties
    return np.argmax(logits, axis=1)


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt((x * x).sum(axis=1))


def value_similarity(
    v_content: np.ndarray,
    v_style: np.ndarray,
    m: np.ndarray,
    reading: str = "prose",
) -> np.ndarray:
    """Cosine similarity between each content value and its matched style value.

    ``reading="literal"`` instead puts the style value at the *same* index in
    the numerator (``V_s(i) . V_s(m_i)``) while keeping the content norm in the
    denominator; it is kept only for comparison.
    """
    vc = np.asarray(v_content, dtype=np.float64)
    vs = np.asarray(v_style, dtype=np.float64)
    m = np.asarray(m)
    if vc.ndim != 2 or vs.ndim != 2 or vc.shape[1] != vs.shape[1]:
        raise InvalidInputError("value matrices must be 2-D with equal width")
    if m.shape != (vc.shape[0],):
        raise InvalidInputError(f"correspondence length {m.shape} != n_query {vc.shape[0]}")
    if m.size and (m.min() < 0 or m.max() >= vs.shape[0]):
        raise InvalidInputError("correspondence index out of range")
    matched = vs[m]
    if reading == "prose":
        num = (vc * matched).sum(axis=1)
    elif reading == "literal":
        if vs.shape[0] < vc.shape[0]:
            raise InvalidInputError("literal reading needs at least n_query style positions")
        num = (vs[: vc.shape[0]] * matched).sum(axis=1)
    else:
        raise InvalidInputError(f"unknown similarity reading {reading!r}")
    den = (_row_norms(vc) + COSINE_EPS) * (_row_norms(matched) + COSINE_EPS)
    return np.clip(num / den, -1.0, 1.0)


def n_filtered(p: float, n: int) -> int:
    """``floor(p * n)`` evaluated on the decimal value of ``p`` (0.3 * 10 is 3, not 2)."""
    return math.floor(Fraction(repr(float(p))) * n)


def percentile_filter(s, p: float) -> FilterDecision:
    """Mark exactly ``floor(p*n)`` lowest-similarity positions as filtered.

    Ties are broken toward the smaller index being filtered first.
    """
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"p must lie in [0, 1], got {p}")
    s = np.asarray(s, dtype=np.float64).ravel()
    k = n_filtered(p, s.size)
    keep = np.ones(s.size, dtype=bool)
    if k == 0:
        return FilterDecision(-math.inf, keep, p)
    order = np.lexsort((np.arange(s.size), s))
    keep[order[:k]] = False
    return FilterDecision(float(s[order[k - 1]]), keep, p)


def filter_decision(
    content: AttentionProjections,
    style: AttentionProjections,
    p: float,
    reading: str = "prose",
) -> FilterDecision:
    m = max_correspondence(attention_logits(content, style))
    return percentile_filter(value_similarity(content.v, style.v, m, reading), p)


def filtered_cross_attention(
    content: AttentionProjections,
    style: AttentionProjections,
    p: float,
    reading: str = "prose",
) -> np.ndarray:
    """Cross-image attention, falling back to content self-attention on weak matches.

    Rows whose matched value similarity lands in the lowest ``p`` fraction use
    ``softmax(Q_c K_c^T) V_c``; all other rows use ``softmax(Q_c K_s^T) V_s``.
    """
    _check_d(content, style)
    decision = filter_decision(content, style, p, reading)
    cross = cross_image_attention(content, style)
    if decision.keep.all():
        return cross
    own = self_attention(content)
    if not decision.keep.any():
        return own
    return np.where(decision.keep[:, None], cross, own)
