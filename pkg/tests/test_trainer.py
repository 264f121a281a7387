import numpy as np
import pytest
from dataclasses import replace

import genview.trainer as trainer_mod
from genview.exceptions import DegenerateInputError, TrainingDivergedError
from genview.losses import finite_difference_gradient, max_relative_error
from genview.trainer import (
    DatasetConfig,
    ProbeConfig,
    ToyEncoder,
    TrainConfig,
    augment_map,
    linear_probe,
    make_synthetic_dataset,
    partner_map,
    train,
)

SMALL = DatasetConfig(n_classes=4, n_per_class=8, dim=10, grid=(3, 3))
CORRUPT = DatasetConfig(n_classes=6, n_per_class=16, dim=16,
                        corruption_rate=0.3, class_strength=1.5)


class TestMakeSyntheticDataset:
    def test_zero_corruption(self):
        data = make_synthetic_dataset(replace(SMALL, corruption_rate=0.0))
        assert data.corrupted_count() == 0

    def test_floor_rule(self):
        data = make_synthetic_dataset(
            DatasetConfig(n_classes=4, n_per_class=25, corruption_rate=0.5)
        )
        assert data.n == 100
        assert data.corrupted_count() == 50

    def test_floor_rule_rounds_down(self):
        data = make_synthetic_dataset(
            DatasetConfig(n_classes=3, n_per_class=11, corruption_rate=0.1)
        )
        assert data.corrupted_count() == 3  # floor(0.1 * 33)

    def test_same_seed_identical(self):
        a = make_synthetic_dataset(SMALL)
        b = make_synthetic_dataset(SMALL)
        for sa, sb in zip(a.samples, b.samples):
            np.testing.assert_array_equal(sa.dense_map, sb.dense_map)
            assert sa.label == sb.label and sa.corrupted == sb.corrupted

    def test_different_seed_differs(self):
        a = make_synthetic_dataset(SMALL)
        b = make_synthetic_dataset(replace(SMALL, seed=1))
        assert not np.allclose(a.samples[0].dense_map, b.samples[0].dense_map)

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            make_synthetic_dataset(replace(SMALL, n_classes=1))
        with pytest.raises(ValueError):
            make_synthetic_dataset(replace(SMALL, corruption_rate=1.5))

    def test_balanced_labels(self):
        data = make_synthetic_dataset(SMALL)
        labels = [s.label for s in data.samples]
        assert all(labels.count(c) == 8 for c in range(4))

    def test_fg_tokens_carry_objectness(self):
        data = make_synthetic_dataset(SMALL)
        s = data.samples[0]
        proj = s.dense_map.reshape(-1, SMALL.dim) @ data.objectness
        n_fg = int(round(0.4 * 9))
        top = np.sort(proj)[::-1]
        # Foreground projections clearly separated from background ones.
        assert top[n_fg - 1] > top[n_fg] + 1.0


class TestPartnerMap:
    def test_clean_partner_shares_fg_rows(self):
        data = make_synthetic_dataset(replace(SMALL, corruption_rate=0.0))
        s = data.samples[0]
        rng = np.random.default_rng(0)
        partner = partner_map(data, s, rng)
        own = s.dense_map.reshape(-1, SMALL.dim)
        new = partner.reshape(-1, SMALL.dim)
        n_fg = int(round(0.4 * 9))
        own_fg = own[np.argsort(own @ data.objectness)[::-1][:n_fg]]
        new_fg = new[np.argsort(new @ data.objectness)[::-1][:n_fg]]
        # Same fg token values, possibly at different grid positions.
        assert sorted(map(tuple, own_fg)) == sorted(map(tuple, new_fg))

    def test_corrupted_partner_keeps_bg_swaps_fg(self):
        data = make_synthetic_dataset(replace(SMALL, corruption_rate=1.0))
        s = data.samples[0]
        assert s.corrupted
        rng = np.random.default_rng(0)
        partner = partner_map(data, s, rng)
        own = s.dense_map.reshape(-1, SMALL.dim)
        new = partner.reshape(-1, SMALL.dim)
        n_fg = int(round(0.4 * 9))
        own_sorted = np.argsort(own @ data.objectness)[::-1]
        new_sorted = np.argsort(new @ data.objectness)[::-1]
        own_bg = own[own_sorted[n_fg:]]
        new_bg = new[new_sorted[n_fg:]]
        assert sorted(map(tuple, own_bg)) == sorted(map(tuple, new_bg))
        own_fg = own[own_sorted[:n_fg]]
        new_fg = new[new_sorted[:n_fg]]
        # Foreground centered on a different class: projections differ.
        center_gap = np.linalg.norm(own_fg.mean(axis=0) - new_fg.mean(axis=0))
        assert center_gap > 1.0


class TestAugmentMap:
    def test_jitter_perturbs(self):
        m = np.ones((3, 3, 4))
        out = augment_map(m, np.random.default_rng(0), jitter=0.1, dropout=0.0)
        assert not np.array_equal(out, m)
        assert np.abs(out - m).max() < 1.0

    def test_dropout_zeroes_tokens(self):
        m = np.ones((10, 10, 4))
        out = augment_map(m, np.random.default_rng(1), jitter=0.0, dropout=0.5)
        zeroed = np.all(out.reshape(-1, 4) == 0.0, axis=1).sum()
        assert 20 <= zeroed <= 80

    def test_deterministic_given_rng(self):
        m = np.ones((3, 3, 4))
        a = augment_map(m, np.random.default_rng(2))
        b = augment_map(m, np.random.default_rng(2))
        np.testing.assert_array_equal(a, b)


class TestToyEncoder:
    def test_identity_init(self):
        enc = ToyEncoder(5, 5, identity=True)
        x = np.random.default_rng(0).standard_normal((3, 5))
        np.testing.assert_array_equal(enc.encode(x), x)

    def test_identity_needs_square(self):
        with pytest.raises(ValueError):
            ToyEncoder(5, 3, identity=True)

    @pytest.mark.parametrize("hidden", [None, 6])
    def test_backward_matches_fd(self, hidden):
        rng = np.random.default_rng(3)
        enc = ToyEncoder(4, 3, hidden=hidden, seed=7)
        x = rng.standard_normal((5, 4))

        def loss_of(w1):
            probe = ToyEncoder(4, 3, hidden=hidden, seed=7)
            probe.w1 = w1.reshape(enc.w1.shape)
            if hidden is not None:
                probe.w2 = enc.w2
            return 0.5 * np.sum(probe.encode(x) ** 2)

        v, cache = enc.forward(x)
        grads = enc.zero_grads()
        enc.backward(v, cache, grads)  # dL/dv = v for L = 0.5||v||^2
        fd = finite_difference_gradient(loss_of, enc.w1.copy())
        assert max_relative_error(grads["w1"], fd) < 1e-5


class TestTrain:
    def test_bit_identical_metrics_for_fixed_seed(self):
        data = make_synthetic_dataset(SMALL)
        cfg = TrainConfig(epochs=3, batch_size=16, dim_out=4, seed=5)
        a = train(data, cfg).metrics
        b = train(data, cfg).metrics
        assert a == b

    def test_loss_finite_and_decreasing_first_epochs(self):
        data = make_synthetic_dataset(DatasetConfig())
        result = train(data, TrainConfig(epochs=5))
        losses = [m["loss"] for m in result.metrics]
        assert all(np.isfinite(losses))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_quality_weights_discriminate_every_epoch(self):
        data = make_synthetic_dataset(CORRUPT)
        result = train(data, TrainConfig(epochs=4, lr=0.2, batch_size=32,
                                         dim_out=4, use_quality_weights=True))
        for m in result.metrics[1:]:
            assert m["mean_corrupted_weight"] < m["mean_clean_weight"]
            assert m["mean_corrupted_weight"] < 1.0 / 32.0

    def test_uniform_weights_reported_flat(self):
        data = make_synthetic_dataset(CORRUPT)
        result = train(data, TrainConfig(epochs=2, batch_size=32, dim_out=4))
        m = result.metrics[-1]
        assert m["mean_clean_weight"] == pytest.approx(1.0 / 32.0)
        assert m["mean_corrupted_weight"] == pytest.approx(1.0 / 32.0)

    @pytest.mark.parametrize("kind", ["nce", "cosine", "swav", "i2t_t2i"])
    def test_all_loss_kinds_run(self, kind):
        data = make_synthetic_dataset(SMALL)
        cfg = TrainConfig(loss=kind, epochs=2, lr=0.05, batch_size=16, dim_out=4,
                          use_quality_weights=True)
        result = train(data, cfg)
        assert np.isfinite(result.metrics[-1]["loss"])

    def test_view_sources_cycle(self):
        data = make_synthetic_dataset(SMALL)
        cfg = TrainConfig(epochs=2, batch_size=16, dim_out=4,
                          view_sources=("ori", "IC", "TC", "ITC"))
        assert np.isfinite(train(data, cfg).metrics[-1]["loss"])

    def test_rescale_by_batch(self):
        data = make_synthetic_dataset(SMALL)
        a = train(data, TrainConfig(epochs=2, batch_size=16, dim_out=4))
        b = train(data, TrainConfig(epochs=2, batch_size=16, dim_out=4,
                                    rescale_by_batch=True, lr=0.05 / 16))
        # Rescaling by N with lr/N reproduces the unscaled run.
        assert a.metrics[-1]["loss"] == pytest.approx(b.metrics[-1]["loss"])

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(loss="triplet")
        with pytest.raises(ValueError):
            TrainConfig(view_sources=("nope",))

    def test_divergence_aborts_with_trace(self, monkeypatch):
        data = make_synthetic_dataset(SMALL)

        calls = {"n": 0}
        real = trainer_mod._batch_step

        def poisoned(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] > 3:
                value, grads = real(*args, **kwargs)
                return float("nan"), grads
            return real(*args, **kwargs)

        monkeypatch.setattr(trainer_mod, "_batch_step", poisoned)
        with pytest.raises(TrainingDivergedError) as err:
            train(data, TrainConfig(epochs=5, batch_size=16, dim_out=4))
        assert isinstance(err.value.metrics, list)


class TestWeightInvariants:
    def _trainer_batch_weights(self, dataset, batch, seed=0):
        """Weights exactly as the training loop computes them."""
        from genview.quality import score_image_pairs
        from genview.saliency import fit_foreground_direction

        direction = fit_foreground_direction(
            [s.dense_map for s in dataset.samples]
        )
        rng = np.random.default_rng(seed)
        pairs = []
        for s in batch:
            v1 = augment_map(s.dense_map, rng)
            v2 = augment_map(partner_map(dataset, s, rng), rng)
            pairs.append((s.sample_id, v1, v2))
        return score_image_pairs(pairs, direction).weights()

    def test_no_pathological_concentration_without_corruption(self):
        data = make_synthetic_dataset(replace(CORRUPT, corruption_rate=0.0))
        for seed in range(3):
            weights = self._trainer_batch_weights(data, data.samples[:32], seed)
            assert weights.max() / weights.min() < 10.0

    def test_corrupted_below_uniform_in_most_batches(self):
        data = make_synthetic_dataset(CORRUPT)
        samples = list(data.samples)
        batches_ok = 0
        n_batches = 0
        rng = np.random.default_rng(0)
        for trial in range(20):
            idx = rng.permutation(len(samples))[:32]
            batch = [samples[i] for i in idx]
            flags = np.array([s.corrupted for s in batch])
            if not flags.any():
                continue
            weights = self._trainer_batch_weights(data, batch, seed=trial)
            n_batches += 1
            if weights[flags].mean() < 1.0 / len(batch):
                batches_ok += 1
        assert n_batches >= 15
        assert batches_ok / n_batches >= 0.95


class TestLinearProbe:
    def test_identity_encoder_separable_clusters(self):
        data = make_synthetic_dataset(DatasetConfig(n_classes=4, n_per_class=32,
                                                    dim=16))
        acc = linear_probe(ToyEncoder(16, 16, identity=True), data,
                           ProbeConfig(seed=0))
        assert acc > 0.9

    def test_shuffled_labels_hit_chance(self):
        data = make_synthetic_dataset(DatasetConfig(n_classes=4, n_per_class=32,
                                                    dim=16))
        acc = linear_probe(ToyEncoder(16, 16, identity=True), data,
                           ProbeConfig(seed=0, shuffle_labels=True))
        assert abs(acc - 0.25) <= 0.1

    def test_deterministic(self):
        data = make_synthetic_dataset(SMALL)
        enc = ToyEncoder(10, 4, seed=3)
        a = linear_probe(enc, data, ProbeConfig(seed=1))
        b = linear_probe(enc, data, ProbeConfig(seed=1))
        assert a == b

    def test_missing_class_in_train_split(self):
        data = make_synthetic_dataset(replace(SMALL, n_per_class=2))
        with pytest.raises(DegenerateInputError):
            linear_probe(ToyEncoder(10, 4), data,
                         ProbeConfig(seed=0, test_fraction=0.95))
