"""Pair-quality assessment and softmax weight normalization.

A good image-image pair keeps the foreground consistent while varying the
background; a good image-text pair keeps the caption aligned while varying
the visual context. Both reduce to a primary similarity minus a background
similarity, normalized over the batch into loss weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .core_math import avg_pool, cosine_similarity, softmax
from .exceptions import DegenerateInputError, ShapeMismatchError
from .saliency import (
    DEFAULT_MAX_TOKENS,
    ForegroundDirection,
    decouple_features,
    fit_foreground_direction,
)
from .validation import check_feature_map, check_vector

KIND_IMAGE_IMAGE = "image_image"
KIND_IMAGE_TEXT = "image_text"

# The frozen assessor's native token grid; any grid works downstream.
DEFAULT_QUALITY_GRID = (7, 7)


def toy_feature_extractor(vec, grid=DEFAULT_QUALITY_GRID, k=None, seed=0):
    """Deterministic stand-in feature extractor for tests and toy pipelines.

    Expands a flat embedding into an (h, w, k) dense map via seeded random
    projections, so generated payload vectors can flow into pair scoring
    without a real encoder. Pure function of (vec, grid, k, seed).
    """
    vec = check_vector(vec, "embedding")
    h, w = grid
    k = vec.shape[0] if k is None else int(k)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((h * w, k, vec.shape[0])) / np.sqrt(vec.shape[0])
    return (proj @ vec).reshape(h, w, k)


@dataclass(frozen=True)
class PairQuality:
    """Quality components of one positive pair: q = s_primary - s_background."""

    kind: str
    s_primary: float
    s_background: float

    def __post_init__(self):
        if self.kind not in (KIND_IMAGE_IMAGE, KIND_IMAGE_TEXT):
            raise ValueError(f"unknown pair kind {self.kind!r}")
        for name in ("s_primary", "s_background"):
            v = getattr(self, name)
            if not (-1.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [-1, 1], got {v}")

    @property
    def q(self) -> float:
        return self.s_primary - self.s_background


@dataclass(frozen=True)
class WeightedEntry:
    pair_id: str
    quality: PairQuality | None
    weight: float


@dataclass(frozen=True)
class WeightedBatch:
    entries: tuple

    def weights(self) -> np.ndarray:
        return np.asarray([e.weight for e in self.entries])


def _pair_direction(feature_map, shared: ForegroundDirection, per_map_pca: bool):
    if not per_map_pca:
        return shared
    tokens = check_feature_map(feature_map).reshape(-1, feature_map.shape[2])
    return fit_foreground_direction([feature_map], max_tokens=tokens.shape[0])


def image_pair_quality(
    f1,
    f2,
    direction: ForegroundDirection,
    per_map_pca: bool = False,
) -> PairQuality:
    """Score an image-image pair: foreground consistency minus background redundancy.

    Each map is decoupled into pooled foreground/background vectors along the
    given direction (or a per-map refit when ``per_map_pca``); the score
    rewards similar foregrounds and dissimilar backgrounds.
    """
    f1 = check_feature_map(f1, "f1")
    f2 = check_feature_map(f2, "f2")
    if f1.shape[2] != f2.shape[2]:
        raise ShapeMismatchError("pair maps disagree on feature dim")
    zf1, zb1 = decouple_features(f1, _pair_direction(f1, direction, per_map_pca))
    zf2, zb2 = decouple_features(f2, _pair_direction(f2, direction, per_map_pca))
    return PairQuality(
        kind=KIND_IMAGE_IMAGE,
        s_primary=cosine_similarity(zf1, zf2),
        s_background=cosine_similarity(zb1, zb2),
    )


def image_text_quality(
    f_raw,
    f_view,
    text_embedding,
    direction: ForegroundDirection,
    per_map_pca: bool = False,
) -> PairQuality:
    """Score an image-text pair: cross-modal alignment minus background redundancy.

    Alignment is the cosine between the text embedding and the view's
    average-pooled global feature; redundancy is the cosine between the raw
    and view background poolings.
    """
    f_raw = check_feature_map(f_raw, "f_raw")
    f_view = check_feature_map(f_view, "f_view")
    e_text = check_vector(text_embedding, "text_embedding")
    if f_view.shape[2] != e_text.shape[0]:
        raise ShapeMismatchError("text embedding dim does not match feature dim")
    s_vl = cosine_similarity(e_text, avg_pool(f_view))
    _, zb_raw = decouple_features(f_raw, _pair_direction(f_raw, direction, per_map_pca))
    _, zb_view = decouple_features(
        f_view, _pair_direction(f_view, direction, per_map_pca)
    )
    return PairQuality(
        kind=KIND_IMAGE_TEXT,
        s_primary=s_vl,
        s_background=cosine_similarity(zb_raw, zb_view),
    )


def normalize_weights(scores) -> np.ndarray:
    """Softmax over a flat list of quality scores; positive, sums to 1."""
    return softmax(scores)


def weighted_batch(pair_ids, qualities) -> WeightedBatch:
    """Assemble a batch of scored pairs with normalized weights.

    A pair whose quality could not be computed (None, from degenerate pooled
    features) is downgraded to the batch-minimum q instead of aborting.
    """
    qualities = list(qualities)
    pair_ids = list(pair_ids)
    if len(pair_ids) != len(qualities):
        raise ShapeMismatchError("pair_ids and qualities disagree on length")
    if not qualities:
        raise DegenerateInputError("empty batch")
    known = [pq.q for pq in qualities if pq is not None]
    floor_q = min(known) if known else 0.0
    qs = np.asarray([pq.q if pq is not None else floor_q for pq in qualities])
    ws = normalize_weights(qs)
    return WeightedBatch(
        entries=tuple(
            WeightedEntry(pair_id=pid, quality=pq, weight=float(w))
            for pid, pq, w in zip(pair_ids, qualities, ws)
        )
    )


def score_image_pairs(
    pairs,
    direction: ForegroundDirection,
    per_map_pca: bool = False,
) -> WeightedBatch:
    """Score and weight a batch of (pair_id, f1, f2) image-image pairs.

    Degenerate pairs are kept in the batch at the minimum quality rather
    than raised, so one bad sample cannot stall a training step.
    """
    ids, quals = [], []
    for pair_id, f1, f2 in pairs:
        ids.append(pair_id)
        try:
            quals.append(image_pair_quality(f1, f2, direction, per_map_pca))
        except DegenerateInputError:
            quals.append(None)
    return weighted_batch(ids, quals)


def score_image_text_pairs(
    pairs,
    direction: ForegroundDirection,
    per_map_pca: bool = False,
) -> WeightedBatch:
    """Score and weight a batch of (pair_id, f_raw, f_view, text_embedding)."""
    ids, quals = [], []
    for pair_id, f_raw, f_view, e_text in pairs:
        ids.append(pair_id)
        try:
            quals.append(
                image_text_quality(f_raw, f_view, e_text, direction, per_map_pca)
            )
        except DegenerateInputError:
            quals.append(None)
    return weighted_batch(ids, quals)


class PairQualityScorer(BaseEstimator):
    """Estimator wrapper around pair scoring.

    ``fit`` learns the shared foreground direction from a corpus of feature
    maps; ``transform`` scores batches of pairs into a
    :class:`WeightedBatch`. With ``per_map_pca=True`` the direction is refit
    for every map and the fitted corpus direction is bypassed.
    """

    def __init__(
        self,
        per_map_pca: bool = False,
        max_tokens: int = DEFAULT_MAX_TOKENS,
        random_state: int = 0,
    ):
        self.per_map_pca = per_map_pca
        self.max_tokens = max_tokens
        self.random_state = random_state

    def fit(self, X, y=None):
        self.direction_ = fit_foreground_direction(
            list(X), max_tokens=self.max_tokens, seed=self.random_state
        )
        return self

    def transform(self, pairs) -> WeightedBatch:
        if not hasattr(self, "direction_"):
            raise RuntimeError("PairQualityScorer is not fitted yet")
        pairs = list(pairs)
        if pairs and len(pairs[0]) == 4:
            return score_image_text_pairs(pairs, self.direction_, self.per_map_pca)
        return score_image_pairs(pairs, self.direction_, self.per_map_pca)
