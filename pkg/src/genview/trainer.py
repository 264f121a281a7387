"""Desk-scale training harness.

A synthetic dataset with controllable false-positive corruption, tiny
hand-backpropagated encoders, a training loop that optionally reweights
pairs by quality, and a linear probe for measuring what survived.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core_math import avg_pool
from .exceptions import DegenerateInputError, TrainingDivergedError
from .generation import derive_seed
from .losses import (
    LossValue,
    cosine_loss,
    i2t_loss,
    nce_loss,
    reweight,
    swav_targets,
    t2i_loss,
)
from .quality import score_image_pairs, score_image_text_pairs
from .saliency import fit_foreground_direction

LOSS_KINDS = ("nce", "cosine", "swav", "i2t_t2i")
VIEW_SOURCES = ("ori", "IC", "TC", "ITC")

# Extra bg-resampling jitter per view source, mimicking the fidelity/diversity
# ladder of the generation modes.
_SOURCE_DIVERSITY = {"ori": 1.0, "IC": 1.4, "TC": 1.4, "ITC": 1.8}


@dataclass(frozen=True)
class DatasetConfig:
    n_classes: int = 4
    n_per_class: int = 32
    dim: int = 16
    grid: tuple = (4, 4)
    fg_fraction: float = 0.4
    corruption_rate: float = 0.0
    seed: int = 0
    fg_strength: float = 3.0      # shared "objectness" component of fg tokens
    class_strength: float = 3.0   # class-center component of fg tokens
    fg_noise: float = 0.25
    bg_noise: float = 0.25
    bg_pool_size: int = 12
    bg_scale: float = 1.0
    caption_noise: float = 0.1


@dataclass(frozen=True)
class Sample:
    sample_id: str
    label: int
    dense_map: np.ndarray
    caption_embedding: np.ndarray
    corrupted: bool
    corrupt_label: int


@dataclass(frozen=True)
class SyntheticDataset:
    config: DatasetConfig
    objectness: np.ndarray          # direction all fg tokens share
    class_centers: np.ndarray       # (n_classes, dim), orthogonal to objectness
    bg_pool: np.ndarray             # (pool, dim), shared across classes
    samples: tuple

    @property
    def n(self) -> int:
        return len(self.samples)

    def corrupted_count(self) -> int:
        return sum(1 for s in self.samples if s.corrupted)


def _orthogonalize(rows: np.ndarray, against: np.ndarray) -> np.ndarray:
    rows = rows - np.outer(rows @ against, against)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _build_map(cfg: DatasetConfig, objectness, centers, bg_pool, label, rng,
               fg_rows=None, bg_rows=None, diversity: float = 1.0):
    h, w = cfg.grid
    hw = h * w
    n_fg = max(1, int(round(cfg.fg_fraction * hw)))
    tokens = np.empty((hw, cfg.dim))
    positions = rng.permutation(hw)
    fg_pos, bg_pos = positions[:n_fg], positions[n_fg:]
    if fg_rows is None:
        fg_rows = (
            cfg.fg_strength * objectness
            + cfg.class_strength * centers[label]
            + cfg.fg_noise * rng.standard_normal((n_fg, cfg.dim))
        )
    if bg_rows is None:
        picks = rng.integers(0, bg_pool.shape[0], size=hw - n_fg)
        bg_rows = (
            cfg.bg_scale * bg_pool[picks]
            + diversity * cfg.bg_noise * rng.standard_normal((hw - n_fg, cfg.dim))
        )
    tokens[fg_pos] = fg_rows
    tokens[bg_pos] = bg_rows
    return tokens.reshape(h, w, cfg.dim), fg_rows, bg_rows


def make_synthetic_dataset(config: DatasetConfig) -> SyntheticDataset:
    """Build a deterministic dataset of dense maps with planted fg/bg structure.

    Foreground tokens carry a shared objectness direction plus a class
    center; background tokens come from a pool common to all classes.
    Exactly floor(corruption_rate * N) samples are flagged as corrupted.
    """
    if config.n_classes < 2:
        raise ValueError("need at least 2 classes")
    if not (0.0 <= config.corruption_rate <= 1.0):
        raise ValueError("corruption_rate must be in [0, 1]")
    rng = np.random.default_rng(config.seed)

    objectness = rng.standard_normal(config.dim)
    objectness /= np.linalg.norm(objectness)
    centers = _orthogonalize(
        rng.standard_normal((config.n_classes, config.dim)), objectness
    )
    bg_pool = _orthogonalize(
        rng.standard_normal((config.bg_pool_size, config.dim)), objectness
    )

    n_total = config.n_classes * config.n_per_class
    n_corrupt = int(math.floor(config.corruption_rate * n_total))
    corrupt_ids = set(rng.permutation(n_total)[:n_corrupt].tolist())

    samples = []
    for i in range(n_total):
        label = i % config.n_classes
        dense_map, _, _ = _build_map(
            config, objectness, centers, bg_pool, label, rng
        )
        caption = centers[label] + config.caption_noise * rng.standard_normal(config.dim)
        corrupt_label = (label + 1 + int(rng.integers(config.n_classes - 1))) % config.n_classes
        samples.append(
            Sample(
                sample_id=f"s{i:04d}",
                label=label,
                dense_map=dense_map,
                caption_embedding=caption,
                corrupted=i in corrupt_ids,
                corrupt_label=corrupt_label,
            )
        )
    return SyntheticDataset(
        config=config,
        objectness=objectness,
        class_centers=centers,
        bg_pool=bg_pool,
        samples=tuple(samples),
    )


def partner_map(dataset: SyntheticDataset, sample: Sample, rng,
                diversity: float = 1.0) -> np.ndarray:
    """Build the positive-partner map for one sample.

    Clean partners share the sample's foreground tokens in a freshly
    resampled background. Corrupted partners are false positives: foreground
    drawn from a different class while the background context is kept.
    """
    cfg = dataset.config
    h, w = cfg.grid
    hw = h * w
    n_fg = max(1, int(round(cfg.fg_fraction * hw)))
    own = sample.dense_map.reshape(hw, cfg.dim)
    # Recover the sample's own fg/bg rows by objectness projection.
    order = np.argsort(own @ dataset.objectness)[::-1]
    own_fg, own_bg = own[order[:n_fg]], own[order[n_fg:]]
    if sample.corrupted:
        m, _, _ = _build_map(
            cfg, dataset.objectness, dataset.class_centers, dataset.bg_pool,
            sample.corrupt_label, rng, bg_rows=own_bg.copy(),
        )
    else:
        m, _, _ = _build_map(
            cfg, dataset.objectness, dataset.class_centers, dataset.bg_pool,
            sample.label, rng, fg_rows=own_fg.copy(), diversity=diversity,
        )
    return m


def augment_map(dense_map: np.ndarray, rng, jitter: float = 0.05,
                dropout: float = 0.05) -> np.ndarray:
    """Feature-space stand-in for the standard augmentation pipeline."""
    h, w, k = dense_map.shape
    out = dense_map + jitter * rng.standard_normal(dense_map.shape)
    if dropout > 0:
        keep = rng.random(h * w) >= dropout
        out = out.reshape(h * w, k)
        out[~keep] = 0.0
        out = out.reshape(h, w, k)
    return out


class ToyEncoder:
    """Linear encoder, optionally with one tanh hidden layer.

    Gradients are hand-derived; ``forward`` returns a cache that ``backward``
    consumes to produce parameter gradients.
    """

    def __init__(self, dim_in: int, dim_out: int, hidden: int | None = None,
                 seed: int = 0, identity: bool = False):
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        if identity:
            if dim_in != dim_out or hidden is not None:
                raise ValueError("identity init needs dim_in == dim_out, no hidden")
            self.w1 = np.eye(dim_out)
            self.w2 = None
        elif hidden is None:
            self.w1 = rng.standard_normal((dim_out, dim_in)) / np.sqrt(dim_in)
            self.w2 = None
        else:
            self.w1 = rng.standard_normal((hidden, dim_in)) / np.sqrt(dim_in)
            self.w2 = rng.standard_normal((dim_out, hidden)) / np.sqrt(hidden)

    def forward(self, x: np.ndarray):
        if self.w2 is None:
            return x @ self.w1.T, (x,)
        h = np.tanh(x @ self.w1.T)
        return h @ self.w2.T, (x, h)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.forward(np.atleast_2d(x))[0]

    def zero_grads(self) -> dict:
        grads = {"w1": np.zeros_like(self.w1)}
        if self.w2 is not None:
            grads["w2"] = np.zeros_like(self.w2)
        return grads

    def backward(self, d_out: np.ndarray, cache, grads: dict) -> None:
        if self.w2 is None:
            (x,) = cache
            grads["w1"] += d_out.T @ x
        else:
            x, h = cache
            grads["w2"] += d_out.T @ h
            dh = (d_out @ self.w2) * (1.0 - h * h)
            grads["w1"] += dh.T @ x

    def step(self, grads: dict, lr: float) -> None:
        self.w1 -= lr * grads["w1"]
        if self.w2 is not None:
            self.w2 -= lr * grads["w2"]


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "nce"
    use_quality_weights: bool = False
    epochs: int = 12
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    view_sources: tuple = ("ori",)
    tau: float = 0.2
    dim_out: int = 8
    hidden: int | None = None
    n_prototypes: int = 8
    sk_epsilon: float = 0.05
    sk_iters: int = 3
    jitter: float = 0.05
    dropout: float = 0.05
    rescale_by_batch: bool = False

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        bad = set(self.view_sources) - set(VIEW_SOURCES)
        if bad or not self.view_sources:
            raise ValueError(f"view_sources must be a nonempty subset of {VIEW_SOURCES}")


@dataclass
class TrainResult:
    encoder: ToyEncoder
    metrics: list
    config: TrainConfig
    text_encoder: ToyEncoder | None = None
    extras: dict = field(default_factory=dict)

    def final_weight_stats(self):
        last = self.metrics[-1]
        return last["mean_clean_weight"], last["mean_corrupted_weight"]


def _normalize_rows(v: np.ndarray):
    norms = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return v / norms, norms


def _denormalize_grad(d_hat: np.ndarray, v_hat: np.ndarray, norms: np.ndarray):
    # Jacobian of row normalization: (I - v_hat v_hat^T) / ||v||.
    return (d_hat - (d_hat * v_hat).sum(axis=1, keepdims=True) * v_hat) / norms


def _batch_weights(cfg, dataset, direction, batch, views1, views2):
    n = len(batch)
    if not cfg.use_quality_weights:
        return np.full(n, 1.0 / n)
    if cfg.loss == "i2t_t2i":
        triples = [
            (s.sample_id, s.dense_map, v2, s.caption_embedding)
            for s, v2 in zip(batch, views2)
        ]
        return score_image_text_pairs(triples, direction).weights()
    pairs = [(s.sample_id, v1, v2) for s, v1, v2 in zip(batch, views1, views2)]
    return score_image_pairs(pairs, direction).weights()


def train(dataset: SyntheticDataset, config: TrainConfig) -> TrainResult:
    """Gradient-descent training with uniform or quality-driven pair weights.

    Deterministic for a fixed config seed. Raises
    :class:`TrainingDivergedError` (with the trace so far) if the loss goes
    non-finite.
    """
    cfg = config
    dim_in = dataset.config.dim
    encoder = ToyEncoder(dim_in, cfg.dim_out, hidden=cfg.hidden,
                         seed=derive_seed(cfg.seed, "encoder"))
    text_encoder = None
    predictor = None
    prototypes = None
    init_rng = np.random.default_rng(derive_seed(cfg.seed, "heads"))
    if cfg.loss == "cosine":
        predictor = np.eye(cfg.dim_out) + 0.01 * init_rng.standard_normal(
            (cfg.dim_out, cfg.dim_out)
        )
    elif cfg.loss == "swav":
        prototypes = init_rng.standard_normal((cfg.n_prototypes, cfg.dim_out))
        prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    elif cfg.loss == "i2t_t2i":
        text_encoder = ToyEncoder(dim_in, cfg.dim_out,
                                  seed=derive_seed(cfg.seed, "text"))

    # Frozen quality assessor: direction fitted once on the raw corpus.
    direction = fit_foreground_direction(
        [s.dense_map for s in dataset.samples], seed=derive_seed(cfg.seed, "assessor")
    )

    samples = list(dataset.samples)

    def batch_views(batch, tag, epoch, source):
        views1, views2 = [], []
        for s in batch:
            vr = np.random.default_rng(derive_seed(cfg.seed, tag, epoch, s.sample_id))
            views1.append(augment_map(s.dense_map, vr, cfg.jitter, cfg.dropout))
            partner = partner_map(dataset, s, vr,
                                  diversity=_SOURCE_DIVERSITY[source])
            views2.append(augment_map(partner, vr, cfg.jitter, cfg.dropout))
        return views1, views2

    def eval_loss() -> float:
        # Fixed evaluation views and uniform weights: measures optimization
        # progress without per-epoch sampling noise.
        total, batches = 0.0, 0
        for start in range(0, len(samples), cfg.batch_size):
            batch = samples[start:start + cfg.batch_size]
            if len(batch) < 2:
                continue
            views1, views2 = batch_views(batch, "eval", 0, cfg.view_sources[0])
            x1 = np.stack([avg_pool(v) for v in views1])
            x2 = np.stack([avg_pool(v) for v in views2])
            value, _ = _batch_step(
                cfg, encoder, text_encoder, predictor, prototypes,
                batch, x1, x2, np.full(len(batch), 1.0 / len(batch)),
            )
            total += value
            batches += 1
        return total / max(batches, 1)

    metrics = []
    for epoch in range(cfg.epochs):
        ep_rng = np.random.default_rng(derive_seed(cfg.seed, "epoch", epoch))
        order = ep_rng.permutation(len(samples))
        ep_batches = 0
        w_clean_sum = w_clean_n = w_corr_sum = w_corr_n = 0.0

        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = [samples[i] for i in idx]
            source = cfg.view_sources[ep_batches % len(cfg.view_sources)]
            views1, views2 = batch_views(batch, "view", epoch, source)
            weights = _batch_weights(cfg, dataset, direction, batch, views1, views2)
            x1 = np.stack([avg_pool(v) for v in views1])
            x2 = np.stack([avg_pool(v) for v in views2])

            value, grads = _batch_step(
                cfg, encoder, text_encoder, predictor, prototypes,
                batch, x1, x2, weights,
            )
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}", metrics
                )
            scale = len(batch) if cfg.rescale_by_batch else 1.0
            encoder.step({k: v * scale for k, v in grads["encoder"].items()}, cfg.lr)
            if text_encoder is not None:
                text_encoder.step(
                    {k: v * scale for k, v in grads["text"].items()}, cfg.lr
                )
            if predictor is not None:
                predictor -= cfg.lr * scale * grads["predictor"]
            if prototypes is not None:
                prototypes -= cfg.lr * scale * grads["prototypes"]

            ep_batches += 1
            flags = np.array([s.corrupted for s in batch])
            w_clean_sum += weights[~flags].sum()
            w_clean_n += (~flags).sum()
            w_corr_sum += weights[flags].sum()
            w_corr_n += flags.sum()

        loss = eval_loss()
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became non-finite at epoch {epoch}", metrics
            )
        metrics.append(
            {
                "epoch": epoch,
                "loss": loss,
                "mean_clean_weight": w_clean_sum / w_clean_n if w_clean_n else None,
                "mean_corrupted_weight": w_corr_sum / w_corr_n if w_corr_n else None,
            }
        )

    extras = {}
    if predictor is not None:
        extras["predictor"] = predictor
    if prototypes is not None:
        extras["prototypes"] = prototypes
    return TrainResult(encoder=encoder, metrics=metrics, config=cfg,
                       text_encoder=text_encoder, extras=extras)


def _batch_step(cfg, encoder, text_encoder, predictor, prototypes,
                batch, x1, x2, weights):
    """One forward/backward pass; returns (loss value, gradient dict)."""
    n = len(batch)
    v1, cache1 = encoder.forward(x1)
    v2, cache2 = encoder.forward(x2)
    enc_grads = encoder.zero_grads()
    out = {"encoder": enc_grads}

    if cfg.loss == "nce":
        v1h, n1 = _normalize_rows(v1)
        v2h, n2 = _normalize_rows(v2)
        losses = []
        for i in range(n):
            negs = [v2h[j] for j in range(n) if j != i]
            losses.append(nce_loss(v1h[i], v2h[i], negs, cfg.tau))
        combined = reweight(losses, weights)
        d1h = np.zeros_like(v1h)
        d2h = np.zeros_like(v2h)
        for i in range(n):
            d1h[i] += combined.grads[f"{i}:v1"]
            d2h[i] += combined.grads[f"{i}:v2"]
            neg_grads = combined.grads[f"{i}:negatives"]
            others = [j for j in range(n) if j != i]
            for g, j in zip(neg_grads, others):
                d2h[j] += g
        encoder.backward(_denormalize_grad(d1h, v1h, n1), cache1, enc_grads)
        encoder.backward(_denormalize_grad(d2h, v2h, n2), cache2, enc_grads)
        return combined.value, out

    if cfg.loss == "cosine":
        p1 = v1 @ predictor.T
        losses = [cosine_loss(p1[i], v2[i]) for i in range(n)]
        combined = reweight(losses, weights)
        dp1 = np.stack([combined.grads[f"{i}:p1"] for i in range(n)])
        out["predictor"] = dp1.T @ v1
        encoder.backward(dp1 @ predictor, cache1, enc_grads)
        return combined.value, out

    if cfg.loss == "swav":
        v1h, n1 = _normalize_rows(v1)
        v2h, n2 = _normalize_rows(v2)
        logits1 = v1h @ prototypes.T / cfg.tau
        logits2 = v2h @ prototypes.T / cfg.tau
        probs1 = _softmax_rows(logits1)
        probs2 = _softmax_rows(logits2)
        # Symmetrized swapped prediction with per-pair weights: row i of the
        # batch-mean loss is scaled by w_i (uniform w_i = 1/n reproduces the
        # plain swav_loss mean).
        t12 = swav_targets(probs2, cfg.sk_epsilon, cfg.sk_iters)
        t21 = swav_targets(probs1, cfg.sk_epsilon, cfg.sk_iters)
        ce12 = -(t12 * np.log(np.maximum(probs1, 1e-12))).sum(axis=1)
        ce21 = -(t21 * np.log(np.maximum(probs2, 1e-12))).sum(axis=1)
        value = float(np.dot(weights, 0.5 * (ce12 + ce21)))
        dlog1 = 0.5 * weights[:, None] * (probs1 - t12)
        dlog2 = 0.5 * weights[:, None] * (probs2 - t21)
        d1h = dlog1 @ prototypes / cfg.tau
        d2h = dlog2 @ prototypes / cfg.tau
        out["prototypes"] = (dlog1.T @ v1h + dlog2.T @ v2h) / cfg.tau
        encoder.backward(_denormalize_grad(d1h, v1h, n1), cache1, enc_grads)
        encoder.backward(_denormalize_grad(d2h, v2h, n2), cache2, enc_grads)
        return value, out

    # i2t_t2i: the generated view aligns with its caption against the batch.
    t_all, tcache = text_encoder.forward(
        np.stack([s.caption_embedding for s in batch])
    )
    losses = []
    per_pair = []
    for i in range(n):
        li = i2t_loss(v2[i], list(t_all), i, cfg.tau)
        lt = t2i_loss(t_all[i], list(v2), i, cfg.tau)
        losses.append(LossValue(value=0.5 * (li.value + lt.value), grads={}))
        per_pair.append((li, lt))
    combined = reweight(losses, weights)
    dv2 = np.zeros_like(v2)
    dt = np.zeros_like(t_all)
    for i, (li, lt) in enumerate(per_pair):
        w = weights[i]
        dv2[i] += 0.5 * w * li.grads["v"]
        dt[i] += 0.5 * w * lt.grads["t"]
        dt += 0.5 * w * li.grads["texts"]
        dv2 += 0.5 * w * lt.grads["images"]
    encoder.backward(dv2, cache2, enc_grads)
    tgrads = text_encoder.zero_grads()
    text_encoder.backward(dt, tcache, tgrads)
    out["text"] = tgrads
    return combined.value, out


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ProbeConfig:
    test_fraction: float = 0.3
    iterations: int = 200
    lr: float = 0.1
    seed: int = 0
    shuffle_labels: bool = False


def linear_probe(encoder: ToyEncoder, dataset: SyntheticDataset,
                 probe: ProbeConfig = ProbeConfig()) -> float:
    """Held-out accuracy of a logistic-regression probe on frozen embeddings."""
    x = np.stack([avg_pool(s.dense_map) for s in dataset.samples])
    y = np.array([s.label for s in dataset.samples])
    rng = np.random.default_rng(probe.seed)
    if probe.shuffle_labels:
        y = rng.permutation(y)
    z = encoder.encode(x)

    n = len(y)
    perm = rng.permutation(n)
    n_test = max(1, int(round(probe.test_fraction * n)))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    n_classes = dataset.config.n_classes
    if len(np.unique(y[train_idx])) < n_classes:
        raise DegenerateInputError("a class is absent from the probe train split")

    ztr, ytr = z[train_idx], y[train_idx]
    w = np.zeros((n_classes, z.shape[1]))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[ytr]
    for _ in range(probe.iterations):
        p = _softmax_rows(ztr @ w.T + b)
        d = (p - onehot) / len(ytr)
        w -= probe.lr * (d.T @ ztr)
        b -= probe.lr * d.sum(axis=0)

    pred = np.argmax(z[test_idx] @ w.T + b, axis=1)
    return float(np.mean(pred == y[test_idx]))


def compare_weighting(dataset_config: DatasetConfig, train_config: TrainConfig,
                      seeds) -> dict:
    """Train uniform vs quality-driven over several seeds; mean probe gap."""
    uniform, quality = [], []
    for seed in seeds:
        dcfg = replace(dataset_config, seed=derive_seed(seed, "data"))
        data = make_synthetic_dataset(dcfg)
        for use_qd, sink in ((False, uniform), (True, quality)):
            tcfg = replace(train_config, seed=seed, use_quality_weights=use_qd)
            result = train(data, tcfg)
            sink.append(linear_probe(result.encoder, data,
                                     ProbeConfig(seed=derive_seed(seed, "probe"))))
    return {
        "uniform": uniform,
        "quality": quality,
        "mean_uniform": float(np.mean(uniform)),
        "mean_quality": float(np.mean(quality)),
        "gap": float(np.mean(quality) - np.mean(uniform)),
    }
