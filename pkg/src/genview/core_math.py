"""Pure numerical kernels shared by every other module.

Feature maps are plain ``(H, W, K)`` float64 arrays, scalar maps are
``(H, W)``, vectors are ``(K,)``. All functions here are pure and reentrant;
nothing mutates its inputs.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DegenerateInputError, ShapeMismatchError
from .validation import check_feature_map, check_scalar_map, check_vector

# Below this spread, min-max normalization is considered degenerate and the
# map collapses to the neutral value 0.5.
MINMAX_DEGENERATE_SPAN = 1e-12

POWER_ITER_MAX = 500
POWER_ITER_TOL = 1e-10


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, in [-1, 1]."""
    a = check_vector(a, "a")
    b = check_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"dims differ: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity undefined for zero-norm input")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def softmax(values, temperature: float = 1.0) -> np.ndarray:
    """Stable softmax over a flat list of scores.

    Uses max-subtraction, so the result is invariant to additive shifts and
    never overflows for finite input.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    v = check_vector(values, "values") / float(temperature)
    e = np.exp(v - np.max(v))
    return e / np.sum(e)


def first_principal_component(samples) -> np.ndarray:
    """Unit direction of maximum variance, by power iteration.

    Samples are centered before the covariance is formed. The sign is fixed
    so the mean raw sample projects nonnegatively onto the direction (ties
    broken by making the largest-magnitude coordinate positive).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError(f"samples must be a 2-D (n, k) array, got {x.shape}")
    n, k = x.shape
    if n < 2:
        raise DegenerateInputError("need at least 2 samples for a principal component")
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("samples contain non-finite entries")

    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    total_var = np.trace(cov)
    if total_var <= MINMAX_DEGENERATE_SPAN:
        raise DegenerateInputError("samples have zero variance after centering")

    # Deterministic start: normalized all-ones.
    v = np.ones(k) / np.sqrt(k)
    for _ in range(POWER_ITER_MAX):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm <= MINMAX_DEGENERATE_SPAN:
            # Start vector landed in the null space; restart off-axis.
            v = np.zeros(k)
            v[int(np.argmax(np.diag(cov)))] = 1.0
            continue
        w /= norm
        if 1.0 - abs(np.dot(w, v)) < POWER_ITER_TOL:
            v = w
            break
        v = w

    proj = float(np.dot(mean, v))
    if proj < 0.0:
        v = -v
    elif proj == 0.0 and v[int(np.argmax(np.abs(v)))] < 0.0:
        v = -v
    return v


def min_max_normalize(scalar_map) -> np.ndarray:
    """Affine rescale of a scalar map to [0, 1].

    A (near-)constant map has no usable spread; it maps to the neutral 0.5
    everywhere rather than dividing by zero.
    """
    m = check_scalar_map(scalar_map)
    lo = m.min()
    span = m.max() - lo
    if span < MINMAX_DEGENERATE_SPAN:
        return np.full_like(m, 0.5)
    return (m - lo) / span


def weighted_pool(mask, feature_map) -> np.ndarray:
    """Mask-weighted SUM of token features: z = sum_{h,w} M[h,w] * F[h,w,:]."""
    m = check_scalar_map(mask, "mask")
    f = check_feature_map(feature_map)
    if m.shape != f.shape[:2]:
        raise ShapeMismatchError(f"mask {m.shape} does not match feature grid {f.shape[:2]}")
    return np.einsum("hw,hwk->k", m, f)


def avg_pool(feature_map) -> np.ndarray:
    """Arithmetic mean of token features over the spatial grid."""
    f = check_feature_map(feature_map)
    return f.mean(axis=(0, 1))
