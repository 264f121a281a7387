"""Contrastive objectives with hand-derived gradients.

No autodiff: every loss returns its value together with analytic gradients
for the inputs that are supposed to receive gradient, and a central
finite-difference suite cross-checks all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import softmax
from .exceptions import DegenerateInputError, ShapeMismatchError
from .validation import check_vector

LOG_CLAMP = 1e-12
DEFAULT_TAU = 0.2
DEFAULT_SK_EPSILON = 0.05
DEFAULT_SK_ITERS = 3


@dataclass
class LossValue:
    """Scalar loss plus per-input gradient arrays keyed by argument name."""

    value: float
    grads: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Assignment:
    """Sinkhorn output: nonnegative N x K matrix with prescribed marginals.

    After convergence rows sum to 1/N and columns to 1/K (total mass 1).
    """

    matrix: np.ndarray

    def marginal_errors(self):
        n, k = self.matrix.shape
        row_err = float(np.abs(self.matrix.sum(axis=1) - 1.0 / n).max())
        col_err = float(np.abs(self.matrix.sum(axis=0) - 1.0 / k).max())
        return row_err, col_err


def _stack_candidates(first, rest):
    cands = [check_vector(first, "candidate")]
    for i, r in enumerate(rest):
        r = check_vector(r, f"candidate {i + 1}")
        if r.shape != cands[0].shape:
            raise ShapeMismatchError("all candidate vectors must share dim")
        cands.append(r)
    return np.stack(cands)


def nce_loss(v1, v2, negatives, tau: float = DEFAULT_TAU) -> LossValue:
    """InfoNCE over dot-product similarities.

    The candidate set is {v2} union negatives; the positive logit is
    v1.v2/tau. Gradients flow to v1, v2, and every negative.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    v1 = check_vector(v1, "v1")
    cands = _stack_candidates(v2, negatives)
    if cands.shape[1] != v1.shape[0]:
        raise ShapeMismatchError("v1 dim does not match candidates")

    logits = cands @ v1 / tau
    p = softmax(logits)
    value = float(-np.log(max(p[0], LOG_CLAMP)))

    d_logits = p.copy()
    d_logits[0] -= 1.0
    grad_v1 = (d_logits @ cands) / tau
    grad_cands = np.outer(d_logits, v1) / tau
    return LossValue(
        value=value,
        grads={"v1": grad_v1, "v2": grad_cands[0], "negatives": grad_cands[1:]},
    )


def cosine_loss(p1, v2) -> LossValue:
    """Negative cosine between a prediction and a stop-gradient target.

    Only p1 receives gradient; v2 is treated as a constant, matching the
    asymmetric prediction-head setup this loss belongs to.
    """
    p1 = check_vector(p1, "p1")
    v2 = check_vector(v2, "v2")
    if p1.shape != v2.shape:
        raise ShapeMismatchError("p1 and v2 must share dim")
    n1 = np.linalg.norm(p1)
    n2 = np.linalg.norm(v2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateInputError("cosine loss undefined for zero-norm input")
    p1_hat = p1 / n1
    v2_hat = v2 / n2
    cos = float(np.dot(p1_hat, v2_hat))
    grad_p1 = -(v2_hat - cos * p1_hat) / n1
    return LossValue(value=-cos, grads={"p1": grad_p1})


def sinkhorn_knopp(scores, epsilon: float, iters: int) -> Assignment:
    """Entropic assignment via alternating row/column renormalization.

    Scores are exponentiated at temperature epsilon (max-subtracted for
    stability), then each sweep rescales rows to mass 1/N and columns to
    mass 1/K.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if iters < 0:
        raise ValueError("iters must be nonnegative")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeMismatchError(f"scores must be 2-D, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise DegenerateInputError("scores contain non-finite entries")

    n, k = s.shape
    q = np.exp((s - s.max()) / epsilon)
    q /= q.sum()
    for _ in range(iters):
        q /= np.maximum(q.sum(axis=1, keepdims=True), LOG_CLAMP) * n
        q /= np.maximum(q.sum(axis=0, keepdims=True), LOG_CLAMP) * k
    return Assignment(matrix=q)


def _as_distributions(p, name):
    arr = np.asarray(p, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 1-D or 2-D, got {arr.shape}")
    if np.any(arr < 0) or not np.allclose(arr.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError(f"{name} rows must be valid probability distributions")
    return arr, squeeze


def swav_targets(
    probs2,
    epsilon: float = DEFAULT_SK_EPSILON,
    iters: int = DEFAULT_SK_ITERS,
) -> np.ndarray:
    """Row-normalized Sinkhorn assignments used as swapped-prediction targets."""
    p2, squeeze = _as_distributions(probs2, "probs2")
    q = sinkhorn_knopp(np.log(np.maximum(p2, LOG_CLAMP)), epsilon, iters).matrix
    targets = q / q.sum(axis=1, keepdims=True)
    return targets[0] if squeeze else targets


def swav_loss(
    probs1,
    probs2,
    epsilon: float = DEFAULT_SK_EPSILON,
    iters: int = DEFAULT_SK_ITERS,
) -> LossValue:
    """Swapped-prediction cross-entropy against Sinkhorn targets.

    One view's assignment distribution (probs2, run through Sinkhorn and
    row-normalized) supervises the other view's prediction (probs1):
    mean_i of -sum_k T_ik log probs1_ik. The gradient is reported with
    respect to probs1's logits; targets are stop-gradient.
    """
    p1, squeeze = _as_distributions(probs1, "probs1")
    p2, _ = _as_distributions(probs2, "probs2")
    if p1.shape != p2.shape:
        raise ShapeMismatchError("probs1 and probs2 must share shape")

    n = p1.shape[0]
    targets = np.atleast_2d(swav_targets(p2, epsilon, iters))
    logp1 = np.log(np.maximum(p1, LOG_CLAMP))
    value = float(-(targets * logp1).sum(axis=1).mean())
    grad_logits = (p1 - targets) / n
    if squeeze:
        grad_logits = grad_logits[0]
    return LossValue(value=value, grads={"logits1": grad_logits})


def _cosine_contrastive(anchor, candidates, positive_index, tau):
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    a = check_vector(anchor, "anchor")
    cands = _stack_candidates(candidates[0], candidates[1:])
    if cands.shape[1] != a.shape[0]:
        raise ShapeMismatchError("anchor dim does not match candidates")
    m = cands.shape[0]
    if not (0 <= positive_index < m):
        raise IndexError(f"positive_index {positive_index} out of range [0, {m})")

    na = np.linalg.norm(a)
    nc = np.linalg.norm(cands, axis=1)
    if na == 0.0 or np.any(nc == 0.0):
        raise DegenerateInputError("zero-norm vector in cosine contrastive loss")
    a_hat = a / na
    c_hat = cands / nc[:, None]
    cos = c_hat @ a_hat

    p = softmax(cos / tau)
    value = float(-np.log(max(p[positive_index], LOG_CLAMP)))

    d_cos = p.copy()
    d_cos[positive_index] -= 1.0
    d_cos /= tau
    # d cos_j / d anchor = (c_hat_j - cos_j * a_hat) / ||a||
    grad_anchor = (d_cos @ (c_hat - np.outer(cos, a_hat))) / na
    # d cos_j / d cand_j = (a_hat - cos_j * c_hat_j) / ||c_j||
    grad_cands = d_cos[:, None] * (a_hat[None, :] - cos[:, None] * c_hat) / nc[:, None]
    return value, grad_anchor, grad_cands


def i2t_loss(v, texts, positive_index: int, tau: float = DEFAULT_TAU) -> LossValue:
    """Image-to-text contrastive loss on cosine similarities."""
    value, grad_v, grad_texts = _cosine_contrastive(v, list(texts), positive_index, tau)
    return LossValue(value=value, grads={"v": grad_v, "texts": grad_texts})


def t2i_loss(t, images, positive_index: int, tau: float = DEFAULT_TAU) -> LossValue:
    """Text-to-image contrastive loss; mirror image of :func:`i2t_loss`."""
    value, grad_t, grad_images = _cosine_contrastive(
        t, list(images), positive_index, tau
    )
    return LossValue(value=value, grads={"t": grad_t, "images": grad_images})


def reweight(losses, weights) -> LossValue:
    """Weighted sum of per-pair losses with gradients scaled per pair.

    Weights are non-differentiable constants (the quality assessor is
    frozen); each pair's gradient arrays are scaled by its weight and keyed
    as "<pair index>:<input name>".
    """
    ws = np.asarray(
        [e.weight for e in weights.entries] if hasattr(weights, "entries") else weights,
        dtype=np.float64,
    )
    losses = list(losses)
    if ws.shape[0] != len(losses):
        raise ShapeMismatchError(
            f"{len(losses)} losses but {ws.shape[0]} weights"
        )
    value = float(sum(w * lv.value for w, lv in zip(ws, losses)))
    grads = {
        f"{i}:{name}": w * g
        for i, (w, lv) in enumerate(zip(ws, losses))
        for name, g in lv.grads.items()
    }
    return LossValue(value=value, grads=grads)


# -- finite-difference machinery -------------------------------------------

FD_STEP = 1e-5
FD_TOLERANCE = 1e-5


def finite_difference_gradient(func, x, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function, coordinatewise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        flat[i] = (func(xp) - func(xm)) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def run_gradient_suite(instances: int = 100, seed: int = 0, h: float = FD_STEP) -> dict:
    """Cross-check every loss's analytic gradient against central differences.

    Returns the max relative error per loss over random instances; the suite
    passes when every entry is below :data:`FD_TOLERANCE`.
    """
    rng = np.random.default_rng(seed)
    worst = {"nce": 0.0, "cosine": 0.0, "swav": 0.0, "i2t": 0.0, "t2i": 0.0}

    def bump(name, analytic, func, x):
        err = max_relative_error(analytic, finite_difference_gradient(func, x, h))
        worst[name] = max(worst[name], err)

    for _ in range(instances):
        dim = int(rng.integers(3, 9))
        tau = float(rng.uniform(0.2, 1.5))

        # nce: gradients for v1, v2, and each negative
        v1 = rng.standard_normal(dim)
        v2 = rng.standard_normal(dim)
        negs = rng.standard_normal((int(rng.integers(1, 5)), dim))
        lv = nce_loss(v1, v2, list(negs), tau)
        bump("nce", lv.grads["v1"], lambda x: nce_loss(x, v2, list(negs), tau).value, v1)
        bump("nce", lv.grads["v2"], lambda x: nce_loss(v1, x, list(negs), tau).value, v2)
        bump(
            "nce",
            lv.grads["negatives"],
            lambda x: nce_loss(v1, v2, list(x.reshape(negs.shape)), tau).value,
            negs,
        )

        # cosine: gradient for p1 only (v2 stop-gradient)
        p1 = rng.standard_normal(dim) + 0.1
        t2 = rng.standard_normal(dim) + 0.1
        lv = cosine_loss(p1, t2)
        bump("cosine", lv.grads["p1"], lambda x: cosine_loss(x, t2).value, p1)

        # swav: gradient w.r.t. probs1's logits
        n_rows = int(rng.integers(2, 5))
        k_proto = int(rng.integers(3, 7))
        z1 = rng.standard_normal((n_rows, k_proto))
        probs2 = _softmax_rows(rng.standard_normal((n_rows, k_proto)))
        lv = swav_loss(_softmax_rows(z1), probs2, epsilon=0.5, iters=3)
        bump(
            "swav",
            lv.grads["logits1"],
            lambda z: swav_loss(_softmax_rows(z), probs2, epsilon=0.5, iters=3).value,
            z1,
        )

        # i2t / t2i: gradients for the anchor and all candidates
        m = int(rng.integers(2, 6))
        pos = int(rng.integers(0, m))
        anchor = rng.standard_normal(dim)
        cands = rng.standard_normal((m, dim))
        lv = i2t_loss(anchor, list(cands), pos, tau)
        bump("i2t", lv.grads["v"], lambda x: i2t_loss(x, list(cands), pos, tau).value, anchor)
        bump(
            "i2t",
            lv.grads["texts"],
            lambda x: i2t_loss(anchor, list(x.reshape(cands.shape)), pos, tau).value,
            cands,
        )
        lv = t2i_loss(anchor, list(cands), pos, tau)
        bump("t2i", lv.grads["t"], lambda x: t2i_loss(x, list(cands), pos, tau).value, anchor)
        bump(
            "t2i",
            lv.grads["images"],
            lambda x: t2i_loss(anchor, list(x.reshape(cands.shape)), pos, tau).value,
            cands,
        )

    return worst
