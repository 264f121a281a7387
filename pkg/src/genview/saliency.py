"""Foreground/background estimation on dense feature maps.

A single direction in feature space, fitted once over a corpus of token
features, separates salient (foreground) tokens from context. Everything
downstream — foreground proportion, attention masks, feature decoupling —
is a projection onto that direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core_math import (
    first_principal_component,
    min_max_normalize,
    weighted_pool,
)
from .exceptions import DegenerateInputError, ShapeMismatchError
from .validation import check_feature_map, check_scalar_map

DIRECTION_FILE_VERSION = 1
DEFAULT_MAX_TOKENS = 100_000
DEFAULT_TARGET_FG_FRACTION = 0.4


@dataclass(frozen=True)
class ForegroundDirection:
    """Global foreground direction in token-feature space.

    ``direction`` is unit norm; ``center`` is the mean of the tokens the fit
    saw, subtracted before projecting.
    """

    direction: np.ndarray
    center: np.ndarray
    source_sample_count: int

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64)
        if d.shape != c.shape or d.ndim != 1:
            raise ShapeMismatchError("direction and center must be 1-D and share dim")
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("direction must be unit norm")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "center", c)

    @property
    def dim(self) -> int:
        return self.direction.shape[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": DIRECTION_FILE_VERSION,
                "k": self.dim,
                "center": self.center.tolist(),
                "direction": self.direction.tolist(),
                "sample_count": self.source_sample_count,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ForegroundDirection":
        obj = json.loads(text)
        if obj.get("version") != DIRECTION_FILE_VERSION:
            raise ValueError(f"unsupported direction file version {obj.get('version')}")
        return cls(
            direction=np.asarray(obj["direction"], dtype=np.float64),
            center=np.asarray(obj["center"], dtype=np.float64),
            source_sample_count=int(obj["sample_count"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ForegroundDirection":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class SaliencyResult:
    """Per-map saliency products: normalized activation, proportion, masks."""

    activation: np.ndarray
    foreground_proportion: float
    fg_mask: np.ndarray
    bg_mask: np.ndarray


def _flatten_tokens(maps) -> np.ndarray:
    rows = []
    k = None
    for f in maps:
        f = check_feature_map(f)
        if k is None:
            k = f.shape[2]
        elif f.shape[2] != k:
            raise ShapeMismatchError(
                f"feature maps disagree on dim: {k} vs {f.shape[2]}"
            )
        rows.append(f.reshape(-1, k))
    if not rows:
        raise DegenerateInputError("no feature maps given")
    return np.concatenate(rows, axis=0)


def fit_foreground_direction(
    maps, max_tokens: int = DEFAULT_MAX_TOKENS, seed: int = 0
) -> ForegroundDirection:
    """Fit the global foreground direction over pooled tokens.

    Tokens are flattened across maps in order; if there are more than
    ``max_tokens`` a seeded RNG subsamples without replacement, keeping the
    fit deterministic for a fixed seed and input order.
    """
    tokens = _flatten_tokens(maps)
    if tokens.shape[0] < 2:
        raise DegenerateInputError("need at least 2 tokens to fit a direction")
    if tokens.shape[0] > max_tokens:
        rng = np.random.default_rng(seed)
        idx = rng.choice(tokens.shape[0], size=max_tokens, replace=False)
        idx.sort()
        tokens = tokens[idx]
    direction = first_principal_component(tokens)
    return ForegroundDirection(
        direction=direction,
        center=tokens.mean(axis=0),
        source_sample_count=tokens.shape[0],
    )


def activation_map(feature_map, direction: ForegroundDirection) -> np.ndarray:
    """Per-token projection of the centered feature onto the direction."""
    f = check_feature_map(feature_map)
    if f.shape[2] != direction.dim:
        raise ShapeMismatchError(
            f"feature dim {f.shape[2]} != direction dim {direction.dim}"
        )
    return np.einsum("hwk,k->hw", f - direction.center, direction.direction)


def foreground_proportion(norm_map, alpha: float) -> float:
    """Fraction of tokens whose normalized activation strictly exceeds alpha.

    Boundary values count as background (strict inequality).
    """
    m = check_scalar_map(norm_map)
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("norm_map must already be normalized to [0, 1]")
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return float(np.count_nonzero(m > alpha)) / m.size


def calibrate_threshold(
    norm_maps, target_fg_fraction: float = DEFAULT_TARGET_FG_FRACTION
) -> float:
    """Pick alpha so roughly ``target_fg_fraction`` of pooled tokens land above it.

    Alpha is the (1 - target) linear-interpolated quantile of the pooled
    normalized activations.
    """
    target = float(target_fg_fraction)
    if not (0.0 < target < 1.0):
        raise ValueError(f"target_fg_fraction must be in (0, 1), got {target}")
    pool = np.concatenate([check_scalar_map(m).ravel() for m in norm_maps])
    if pool.size == 0:
        raise DegenerateInputError("empty calibration pool")
    if pool.max() - pool.min() < 1e-12:
        raise DegenerateInputError("calibration pool has no spread")
    return float(np.quantile(pool, 1.0 - target))


def attention_maps(feature_map, direction: ForegroundDirection):
    """Foreground and background attention maps, complementary by construction."""
    fg = min_max_normalize(activation_map(feature_map, direction))
    return fg, 1.0 - fg


def decouple_features(feature_map, direction: ForegroundDirection):
    """Split a map into mask-pooled foreground and background vectors."""
    f = check_feature_map(feature_map)
    fg_mask, bg_mask = attention_maps(f, direction)
    return weighted_pool(fg_mask, f), weighted_pool(bg_mask, f)


class ForegroundSaliency(BaseEstimator, TransformerMixin):
    """Estimator wrapper: fit the direction and threshold, then score maps.

    ``fit`` learns the foreground direction from a corpus of feature maps and
    calibrates the activation threshold so the requested fraction of tokens
    counts as foreground. ``transform`` returns a :class:`SaliencyResult` per
    map. Fitted state is immutable and safe to share across threads.
    """

    def __init__(
        self,
        max_tokens: int = DEFAULT_MAX_TOKENS,
        target_fg_fraction: float = DEFAULT_TARGET_FG_FRACTION,
        random_state: int = 0,
    ):
        self.max_tokens = max_tokens
        self.target_fg_fraction = target_fg_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        maps = [check_feature_map(f) for f in X]
        self.direction_ = fit_foreground_direction(
            maps, max_tokens=self.max_tokens, seed=self.random_state
        )
        norm_maps = [
            min_max_normalize(activation_map(f, self.direction_)) for f in maps
        ]
        self.alpha_ = calibrate_threshold(norm_maps, self.target_fg_fraction)
        return self

    def score_map(self, feature_map) -> SaliencyResult:
        self._check_fitted()
        fg, bg = attention_maps(feature_map, self.direction_)
        return SaliencyResult(
            activation=fg,
            foreground_proportion=foreground_proportion(fg, self.alpha_),
            fg_mask=fg,
            bg_mask=bg,
        )

    def transform(self, X):
        return [self.score_map(f) for f in X]

    def _check_fitted(self):
        if not hasattr(self, "direction_"):
            raise RuntimeError("ForegroundSaliency is not fitted yet")
