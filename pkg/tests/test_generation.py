import base64
import json

import numpy as np
import pytest

from genview import container
from genview.exceptions import (
    BackendRejectionError,
    ManifestCorruptionError,
    MissingConditioningError,
    ShapeMismatchError,
    TransportError,
)
from genview.generation import (
    BlobStore,
    GenerationParams,
    GenerationRequest,
    MockEchoBackend,
    SampleInput,
    ToyDiffusionBackend,
    batch_generate,
    cfg_noise_estimate,
    collect_view_sets,
    derive_seed,
    echo_payload,
    generate,
    load_manifest,
    plan_generation,
    toy_reverse_diffusion,
)
from genview.policy import HeuristicComplexityScorer, NoiseSchedule
from genview.saliency import ForegroundDirection

DIM = 32
NO_SLEEP = lambda seconds: None


def axis_direction(dim=DIM):
    d = np.zeros(dim)
    d[0] = 1.0
    return ForegroundDirection(direction=d, center=np.zeros(dim),
                               source_sample_count=2)


def map_with_proportion(n_high, n_total, dim=DIM):
    """1 x n grid whose normalized activation exceeds 0.5 on n_high tokens."""
    f = np.zeros((1, n_total, dim))
    f[0, :n_high, 0] = 4.0
    f[0, :, 1] = 1.0  # keep the average embedding off zero
    return f


def make_sample(i=0, n_high=9, caption="a red dog"):
    return SampleInput(
        sample_id=f"s{i}",
        features=map_with_proportion(n_high, 10),
        caption=caption,
    )


def plan(sample, mode, **kw):
    return plan_generation(
        sample,
        mode,
        direction=axis_direction(),
        schedule=NoiseSchedule(),
        scorer=HeuristicComplexityScorer(),
        alpha=0.5,
        **kw,
    )


class TestGenerationParams:
    def test_mode_knob_invariants(self):
        GenerationParams("IC", noise_level=100)
        GenerationParams("TC", guidance_scale=4)
        GenerationParams("ITC", noise_level=0, guidance_scale=2)
        with pytest.raises(ValueError):
            GenerationParams("IC", guidance_scale=4)
        with pytest.raises(ValueError):
            GenerationParams("TC", noise_level=100, guidance_scale=4)
        with pytest.raises(ValueError):
            GenerationParams("ITC", noise_level=100)

    def test_dict_roundtrip(self):
        p = GenerationParams("ITC", noise_level=300, guidance_scale=8, seed=17)
        assert GenerationParams.from_dict(p.to_dict()) == p


class TestPlanGeneration:
    def test_ic_high_foreground_maps_to_400(self):
        req = plan(make_sample(n_high=9), "IC")  # p = 0.9
        assert req.params.noise_level == 400
        assert req.params.guidance_scale is None
        assert req.perturbed_embedding is not None

    def test_tc_simple_caption_maps_to_6(self):
        req = plan(make_sample(caption="a red dog"), "TC")  # 1 hit -> s=2
        assert req.params.guidance_scale == 6
        assert req.params.noise_level is None

    def test_itc_combines_both(self):
        caption = ("three red glass bottles on a wooden shelf under warm "
                   "light, watercolor style")  # >6 hits -> s=4
        req = plan(make_sample(n_high=1, caption=caption), "ITC")  # p = 0.1
        assert req.params.noise_level == 0
        assert req.params.guidance_scale == 2

    def test_zero_level_keeps_embedding_identical(self):
        req = plan(make_sample(n_high=1), "IC")  # p = 0.1 -> level 0
        np.testing.assert_array_equal(req.perturbed_embedding,
                                      req.image_embedding)

    def test_missing_conditioning(self):
        no_features = SampleInput(sample_id="x", caption="a dog")
        with pytest.raises(MissingConditioningError):
            plan(no_features, "IC")
        no_caption = SampleInput(sample_id="x",
                                 features=map_with_proportion(5, 10))
        with pytest.raises(MissingConditioningError):
            plan(no_caption, "TC")

    def test_cache_key_is_pure(self):
        a = plan(make_sample(), "IC")
        b = plan(make_sample(), "IC")
        assert a.cache_key == b.cache_key
        c = plan(make_sample(i=1), "IC")
        assert a.cache_key != c.cache_key

    def test_seed_derivation_stable(self):
        assert derive_seed(0, "s0", "IC") == derive_seed(0, "s0", "IC")
        assert derive_seed(0, "s0", "IC") != derive_seed(0, "s0", "TC")
        assert derive_seed(0, "s0", "IC") != derive_seed(1, "s0", "IC")


class TestCfgNoiseEstimate:
    def test_g_zero_collapses_to_uncond(self):
        u, c = np.array([1.0, 2.0]), np.array([5.0, -1.0])
        np.testing.assert_array_equal(cfg_noise_estimate(u, c, 0.0), u)

    def test_g_one_collapses_to_cond(self):
        u, c = np.array([1.0, 2.0]), np.array([5.0, -1.0])
        np.testing.assert_array_equal(cfg_noise_estimate(u, c, 1.0), c)

    def test_linearity_example(self):
        np.testing.assert_allclose(
            cfg_noise_estimate([0.0], [1.0], 2.0), [2.0]
        )

    def test_affine_in_g(self):
        rng = np.random.default_rng(0)
        u, c = rng.standard_normal(6), rng.standard_normal(6)
        g1, g2 = 1.7, -0.3
        lhs = cfg_noise_estimate(u, c, g1) + cfg_noise_estimate(u, c, g2)
        rhs = cfg_noise_estimate(u, c, g1 + g2) + cfg_noise_estimate(u, c, 0.0)
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cfg_noise_estimate([1.0], [1.0, 2.0], 1.0)


class TestToyReverseDiffusion:
    def test_cfg_collapses_at_zero_guidance(self):
        rng = np.random.default_rng(1)
        z0 = rng.standard_normal(8)
        text = rng.standard_normal(8)
        with_text = toy_reverse_diffusion(
            z0, {"text": text},
            GenerationParams("ITC", noise_level=0, guidance_scale=0, seed=5),
            steps=4,
        )
        without = toy_reverse_diffusion(
            z0, {},
            GenerationParams("IC", noise_level=0, seed=5),
            steps=4,
        )
        np.testing.assert_array_equal(with_text, without)

    def test_single_step_matches_manual_unroll(self):
        rng = np.random.default_rng(2)
        z0 = rng.standard_normal(6)
        img = rng.standard_normal(6)
        params = GenerationParams("IC", noise_level=100, seed=9)
        out = toy_reverse_diffusion(z0, {"image": img}, params, steps=1)

        # Hand-unrolled single Euler step with the same seeded projections.
        gen = np.random.default_rng(9)
        scale = 1.0 / np.sqrt(6)
        w_z = gen.standard_normal((6, 6)) * scale
        w_img = gen.standard_normal((6, 6)) * scale
        gen.standard_normal((6, 6))  # text projection, unused here
        drift = gen.standard_normal(6)
        eps = w_z @ z0 + w_img @ img + drift
        np.testing.assert_allclose(out, z0 - eps, atol=1e-12)

    def test_seed_changes_output(self):
        z0 = np.ones(5)
        a = toy_reverse_diffusion(z0, {}, GenerationParams("IC", 0, seed=1), 3)
        b = toy_reverse_diffusion(z0, {}, GenerationParams("IC", 0, seed=2), 3)
        assert not np.allclose(a, b)

    def test_pure_function(self):
        z0 = np.ones(5)
        params = GenerationParams("IC", 100, seed=3)
        a = toy_reverse_diffusion(z0, {}, params, 5)
        b = toy_reverse_diffusion(z0, {}, params, 5)
        np.testing.assert_array_equal(a, b)

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            toy_reverse_diffusion(np.ones(3), {}, GenerationParams("IC", 0), 0)


class TestBlobStore:
    def test_roundtrip_and_dedup(self, tmp_path):
        store = BlobStore(tmp_path / "blobs")
        ref1 = store.put(b"payload")
        ref2 = store.put(b"payload")
        assert ref1 == ref2
        assert store.get(ref1) == b"payload"
        assert store.exists(ref1)

    def test_missing_and_malformed(self, tmp_path):
        store = BlobStore(tmp_path / "blobs")
        assert not store.exists("sha256:" + "0" * 64)
        with pytest.raises(FileNotFoundError):
            store.get("sha256:" + "0" * 64)
        with pytest.raises(ValueError):
            store.get("not-a-ref")


class FlakyBackend:
    """Raises transport errors for the first `fail` calls, then delegates."""

    def __init__(self, fail, inner=None):
        self.fail = fail
        self.calls = 0
        self.inner = inner or MockEchoBackend()

    def generate(self, wire):
        self.calls += 1
        if self.calls <= self.fail:
            raise TransportError("injected transport failure")
        return self.inner.generate(wire)


class RejectingBackend:
    """Terminally rejects the first `reject` distinct requests."""

    def __init__(self, reject):
        self.reject = reject
        self.calls = 0
        self.inner = MockEchoBackend()

    def generate(self, wire):
        self.calls += 1
        if self.calls <= self.reject:
            return {"error": "injected rejection"}
        return self.inner.generate(wire)


class CountingBackend:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def generate(self, wire):
        self.calls += 1
        return self.inner.generate(wire)


class TestGenerate:
    def test_echo_payload_matches_conditioning(self, tmp_path):
        store = BlobStore(tmp_path)
        req = plan(make_sample(), "ITC")
        view = generate(req, MockEchoBackend(), store, sleep=NO_SLEEP)
        assert store.get(view.payload_ref) == echo_payload(req.wire_request())
        assert view.generator_id == "mock-echo"

    def test_toy_backend_deterministic(self, tmp_path):
        store = BlobStore(tmp_path)
        req = plan(make_sample(), "IC")
        a = generate(req, ToyDiffusionBackend(), store, sleep=NO_SLEEP)
        b = generate(req, ToyDiffusionBackend(), store, sleep=NO_SLEEP)
        assert a.payload_ref == b.payload_ref
        vec = container.load_bytes(store.get(a.payload_ref))
        assert vec.shape == (1, 1, DIM)

    def test_retries_then_succeeds_with_attempts_recorded(self, tmp_path):
        backend = FlakyBackend(fail=2)
        view = generate(plan(make_sample(), "IC"), backend,
                        BlobStore(tmp_path), sleep=NO_SLEEP)
        assert view.attempts == 3
        assert backend.calls == 3

    def test_exhausted_retries_raise_transport_error(self, tmp_path):
        with pytest.raises(TransportError):
            generate(plan(make_sample(), "IC"), FlakyBackend(fail=10),
                     BlobStore(tmp_path), sleep=NO_SLEEP)

    def test_rejection_is_terminal(self, tmp_path):
        backend = RejectingBackend(reject=10)
        with pytest.raises(BackendRejectionError):
            generate(plan(make_sample(), "IC"), backend,
                     BlobStore(tmp_path), sleep=NO_SLEEP)
        assert backend.calls == 1  # no retry on rejection


def run_batch(manifest, samples, backend, tmp_path, **kw):
    return batch_generate(
        manifest,
        samples,
        backend,
        max_in_flight=kw.pop("max_in_flight", 1),
        blob_store=BlobStore(tmp_path / "blobs"),
        direction=axis_direction(),
        schedule=NoiseSchedule(),
        scorer=HeuristicComplexityScorer(),
        sleep=NO_SLEEP,
        **kw,
    )


class TestBatchGenerate:
    def test_full_batch_counts(self, tmp_path):
        manifest = tmp_path / "m.jsonl"
        samples = [make_sample(i) for i in range(10)]
        backend = CountingBackend(ToyDiffusionBackend())
        result = run_batch(manifest, samples, backend, tmp_path)
        assert result.new_done == 30
        assert result.backend_calls == 30
        assert backend.calls == 30
        assert len(load_manifest(manifest)) == 30

    def test_rerun_is_idempotent(self, tmp_path):
        manifest = tmp_path / "m.jsonl"
        samples = [make_sample(i) for i in range(4)]
        run_batch(manifest, samples, CountingBackend(ToyDiffusionBackend()),
                  tmp_path)
        before = manifest.read_bytes()
        backend = CountingBackend(ToyDiffusionBackend())
        result = run_batch(manifest, samples, backend, tmp_path)
        assert backend.calls == 0
        assert result.new_done == 0 and result.already_done == 12
        assert manifest.read_bytes() == before

    def test_terminal_failures_recorded_and_retried_once(self, tmp_path):
        manifest = tmp_path / "m.jsonl"
        samples = [make_sample(i) for i in range(10)]
        result = run_batch(manifest, samples, RejectingBackend(reject=2),
                           tmp_path)
        assert result.new_done == 28 and result.new_failed == 2

        retry_backend = CountingBackend(ToyDiffusionBackend())
        result2 = run_batch(manifest, samples, retry_backend, tmp_path)
        assert retry_backend.calls == 2  # exactly the failed records
        assert result2.new_done == 2 and result2.already_done == 28

        result3 = run_batch(manifest, samples,
                            CountingBackend(ToyDiffusionBackend()), tmp_path)
        assert result3.backend_calls == 0

    def test_missing_conditioning_recorded_as_skipped(self, tmp_path):
        manifest = tmp_path / "m.jsonl"
        sample = SampleInput(sample_id="img-only",
                             features=map_with_proportion(5, 10))
        result = run_batch(manifest, [sample], MockEchoBackend(), tmp_path)
        assert result.new_done == 1      # IC
        assert result.new_skipped == 2   # TC, ITC need a caption
        rerun = run_batch(manifest, [sample], MockEchoBackend(), tmp_path)
        assert rerun.backend_calls == 0  # skipped records are not retried

    def test_concurrent_run_matches_serial_outcome(self, tmp_path):
        samples = [make_sample(i) for i in range(8)]
        m1, m2 = tmp_path / "serial.jsonl", tmp_path / "par.jsonl"
        run_batch(m1, samples, ToyDiffusionBackend(), tmp_path)
        run_batch(m2, samples, ToyDiffusionBackend(), tmp_path,
                  max_in_flight=4)
        key = lambda r: (r["sample_id"], r["mode"])
        serial = {key(r): r.get("payload_ref") for r in load_manifest(m1)}
        parallel = {key(r): r.get("payload_ref") for r in load_manifest(m2)}
        assert serial == parallel

    def test_corrupt_manifest_is_hard_error(self, tmp_path):
        manifest = tmp_path / "m.jsonl"
        manifest.write_text('{"sample_id": "a", "mode": "IC"}\nnot json\n')
        with pytest.raises(ManifestCorruptionError):
            run_batch(manifest, [make_sample(0)], MockEchoBackend(), tmp_path)

    def test_shared_cache_key_calls_backend_once(self, tmp_path):
        # Two inputs with identical id (and thus identical plans) collapse
        # to one backend call; the follower reuses the leader's payload.
        manifest = tmp_path / "m.jsonl"
        backend = CountingBackend(ToyDiffusionBackend())
        twin = [make_sample(0), make_sample(0)]
        result = run_batch(manifest, twin, backend, tmp_path, modes=("IC",))
        assert backend.calls == 1
        assert result.new_done == 2
        refs = {r["payload_ref"] for r in result.records}
        assert len(refs) == 1


class TestCollectViewSets:
    def test_ori_always_present_generated_when_done(self, tmp_path):
        manifest = tmp_path / "m.jsonl"
        samples = [make_sample(i) for i in range(3)]
        store = BlobStore(tmp_path / "blobs")
        batch_generate(
            manifest, samples, ToyDiffusionBackend(), max_in_flight=1,
            blob_store=store, direction=axis_direction(),
            schedule=NoiseSchedule(), scorer=HeuristicComplexityScorer(),
            modes=("IC", "TC"), sleep=NO_SLEEP,
        )
        sets = collect_view_sets(manifest, samples, store)
        for vs in sets:
            assert "ori" in vs.views
            assert set(vs.views) == {"ori", "IC", "TC"}
            assert store.exists(vs.views["ori"])

    def test_ori_required(self):
        with pytest.raises(ValueError):
            from genview.generation import PositiveViewSet
            PositiveViewSet(sample_id="x", views={"IC": "sha256:00"})


class TestWireFormat:
    def test_wire_request_fields(self):
        req = plan(make_sample(), "ITC")
        wire = req.wire_request()
        assert wire["mode"] == "ITC"
        assert set(wire) == {"mode", "seed", "noise_level", "guidance_scale",
                             "embedding", "caption"}
        decoded = np.frombuffer(base64.b64decode(wire["embedding"]), dtype="<f4")
        assert decoded.shape[0] == DIM

    def test_manifest_records_are_json_lines(self, tmp_path):
        manifest = tmp_path / "m.jsonl"
        run_batch(manifest, [make_sample(0)], MockEchoBackend(), tmp_path)
        for line in manifest.read_text().splitlines():
            rec = json.loads(line)
            assert {"sample_id", "mode", "params", "cache_key",
                    "status"} <= set(rec)
