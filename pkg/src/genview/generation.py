"""Offline view-generation orchestration.

Plans adaptive parameters per sample, dispatches to a pluggable generator
backend, stores payloads in a content-addressed blob store, and records
every job in an append-only JSON-lines manifest so re-runs are idempotent.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .core_math import avg_pool, min_max_normalize
from .exceptions import (
    BackendRejectionError,
    ManifestCorruptionError,
    MissingConditioningError,
    ShapeMismatchError,
    TransportError,
)
from .policy import (
    NoiseSchedule,
    guidance_scale,
    noise_level,
    perturb_embedding,
    score_caption_complexity,
)
from .saliency import ForegroundDirection, activation_map, foreground_proportion
from .validation import check_vector

MODES = ("IC", "TC", "ITC")
MAX_ATTEMPTS = 3
BACKOFF_BASE_SECONDS = 0.1
TOY_DIM = 32
TOY_STEPS = 20


@dataclass(frozen=True)
class GenerationParams:
    """Adaptive parameters for one generation job.

    The mode dictates which knobs are set: IC adapts the noise level, TC the
    guidance scale, ITC both.
    """

    mode: str
    noise_level: int | None = None
    guidance_scale: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        wants_noise = self.mode in ("IC", "ITC")
        wants_guidance = self.mode in ("TC", "ITC")
        if wants_noise != (self.noise_level is not None):
            raise ValueError(f"mode {self.mode} and noise_level disagree")
        if wants_guidance != (self.guidance_scale is not None):
            raise ValueError(f"mode {self.mode} and guidance_scale disagree")

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "seed": self.seed}
        if self.noise_level is not None:
            out["noise_level"] = self.noise_level
        if self.guidance_scale is not None:
            out["guidance_scale"] = self.guidance_scale
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "GenerationParams":
        return cls(
            mode=obj["mode"],
            noise_level=obj.get("noise_level"),
            guidance_scale=obj.get("guidance_scale"),
            seed=int(obj.get("seed", 0)),
        )


def _embedding_b64(vec) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def _embedding_from_b64(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").astype(np.float64)


@dataclass(frozen=True)
class GenerationRequest:
    """One planned job: parameters plus the conditioning they apply to."""

    sample_id: str
    params: GenerationParams
    image_embedding: np.ndarray | None = None
    caption: str | None = None
    perturbed_embedding: np.ndarray | None = None
    cache_key: str = field(default="", compare=False)

    def __post_init__(self):
        mode = self.params.mode
        if mode in ("IC", "ITC") and self.perturbed_embedding is None:
            raise MissingConditioningError(f"mode {mode} needs an image embedding")
        if mode in ("TC", "ITC") and self.caption is None:
            raise MissingConditioningError(f"mode {mode} needs a caption")
        if not self.cache_key:
            object.__setattr__(self, "cache_key", self._compute_cache_key())

    def _compute_cache_key(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.params.to_dict(), sort_keys=True).encode())
        for vec in (self.image_embedding, self.perturbed_embedding):
            h.update(b"\x00")
            if vec is not None:
                h.update(np.ascontiguousarray(vec, dtype="<f8").tobytes())
        h.update(b"\x00")
        if self.caption is not None:
            h.update(self.caption.encode("utf-8"))
        return h.hexdigest()

    def wire_request(self) -> dict:
        """Request body per the generator wire contract."""
        out = {"mode": self.params.mode, "seed": self.params.seed}
        if self.params.noise_level is not None:
            out["noise_level"] = self.params.noise_level
        if self.params.guidance_scale is not None:
            out["guidance_scale"] = self.params.guidance_scale
        embedding = (
            self.perturbed_embedding
            if self.perturbed_embedding is not None
            else self.image_embedding
        )
        if embedding is not None:
            out["embedding"] = _embedding_b64(embedding)
        if self.caption is not None:
            out["caption"] = self.caption
        return out


@dataclass(frozen=True)
class GeneratedView:
    sample_id: str
    mode: str
    params: GenerationParams
    payload_ref: str
    generator_id: str
    attempts: int = 1


@dataclass(frozen=True)
class PositiveViewSet:
    """All views of one sample, keyed by source; 'ori' is always present."""

    sample_id: str
    views: dict

    def __post_init__(self):
        if "ori" not in self.views:
            raise ValueError("positive view set must contain the original view")


# -- deterministic seeding ---------------------------------------------------


def derive_seed(base_seed: int, *parts) -> int:
    """Stable 64-bit seed from a base seed and string parts."""
    h = hashlib.sha256()
    h.update(str(base_seed).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "little")


# -- planning ----------------------------------------------------------------


@dataclass(frozen=True)
class SampleInput:
    """Raw material for planning one sample's views."""

    sample_id: str
    features: np.ndarray | None = None
    caption: str | None = None


def plan_generation(
    sample: SampleInput,
    mode: str,
    direction: ForegroundDirection | None = None,
    schedule: NoiseSchedule | None = None,
    scorer=None,
    alpha: float = 0.5,
    base_seed: int = 0,
) -> GenerationRequest:
    """Derive adaptive parameters and conditioning for one (sample, mode) job.

    IC runs saliency then the noise-level bin mapping and perturbs the
    sample's global embedding; TC scores the caption and picks the guidance
    scale; ITC does both. The per-job RNG seed derives from
    (base_seed, sample_id, mode), so plans are pure.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    seed = derive_seed(base_seed, sample.sample_id, mode)

    level = None
    image_embedding = None
    perturbed = None
    if mode in ("IC", "ITC"):
        if sample.features is None:
            raise MissingConditioningError(f"mode {mode} needs sample features")
        if direction is None or schedule is None:
            raise MissingConditioningError(f"mode {mode} needs a direction and schedule")
        norm = min_max_normalize(activation_map(sample.features, direction))
        level = noise_level(foreground_proportion(norm, alpha))
        image_embedding = avg_pool(sample.features)
        perturbed = perturb_embedding(
            image_embedding, level, schedule, np.random.default_rng(seed)
        )

    g_scale = None
    if mode in ("TC", "ITC"):
        if sample.caption is None:
            raise MissingConditioningError(f"mode {mode} needs a caption")
        if scorer is None:
            raise MissingConditioningError(f"mode {mode} needs a complexity scorer")
        g_scale = guidance_scale(score_caption_complexity(sample.caption, scorer))

    return GenerationRequest(
        sample_id=sample.sample_id,
        params=GenerationParams(
            mode=mode, noise_level=level, guidance_scale=g_scale, seed=seed
        ),
        image_embedding=image_embedding,
        caption=sample.caption,
        perturbed_embedding=perturbed,
    )


# -- diffusion-flavored math ---------------------------------------------------


def cfg_noise_estimate(eps_uncond, eps_cond, g: float) -> np.ndarray:
    """Classifier-free-guidance interpolation: eps_u + g * (eps_c - eps_u).

    Evaluated as (1-g)*eps_u + g*eps_c, which is the same affine map but
    collapses bit-exactly to eps_u at g=0 and eps_c at g=1.
    """
    eps_uncond = check_vector(eps_uncond, "eps_uncond")
    eps_cond = check_vector(eps_cond, "eps_cond")
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeMismatchError("noise estimates must share dim")
    g = float(g)
    return (1.0 - g) * eps_uncond + g * eps_cond


def toy_reverse_diffusion(z0, cond: dict, params: GenerationParams, steps: int) -> np.ndarray:
    """Miniature deterministic stand-in for a conditional denoiser.

    A fixed linear "denoiser" built from seeded random projections predicts a
    noise estimate each step; when text conditioning is present the estimate
    goes through classifier-free guidance at the params' guidance scale.
    Pure function of (z0, cond, params.seed, steps).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = check_vector(z0, "z0").copy()
    dim = z.shape[0]
    image = cond.get("image")
    text = cond.get("text")

    rng = np.random.default_rng(params.seed)
    scale = 1.0 / np.sqrt(dim)
    w_z = rng.standard_normal((dim, dim)) * scale
    w_img = rng.standard_normal((dim, dim)) * scale
    w_txt = rng.standard_normal((dim, dim)) * scale
    drift = rng.standard_normal(dim)

    img_term = w_img @ check_vector(image, "image") if image is not None else 0.0
    txt_term = w_txt @ check_vector(text, "text") if text is not None else None
    g = params.guidance_scale if params.guidance_scale is not None else 0.0

    for t in range(steps, 0, -1):
        base = w_z @ z + img_term + drift * (t / steps)
        if txt_term is not None:
            eps = cfg_noise_estimate(base, base + txt_term, g)
        else:
            eps = base
        z = z - eps / steps
    return z


# -- backends ------------------------------------------------------------------


def echo_payload(wire_request: dict) -> bytes:
    """Canonical serialization of a request's conditioning (echo contract)."""
    return json.dumps(
        {
            "embedding": wire_request.get("embedding"),
            "caption": wire_request.get("caption"),
        },
        sort_keys=True,
    ).encode("utf-8")


class MockEchoBackend:
    """Returns the serialized conditioning as the payload; no synthesis."""

    generator_id = "mock-echo"

    def generate(self, wire_request: dict) -> dict:
        return {
            "payload": base64.b64encode(echo_payload(wire_request)).decode("ascii"),
            "generator_id": self.generator_id,
        }


class ToyDiffusionBackend:
    """Runs the toy reverse diffusion on wire inputs; deterministic per seed.

    The working dimension follows the conditioning embedding when one is
    present; caption-only requests use the configured default.
    """

    generator_id = "toy-sim-v1"

    def __init__(self, dim: int = TOY_DIM, steps: int = TOY_STEPS):
        self.dim = dim
        self.steps = steps

    @staticmethod
    def _text_embedding(caption: str, dim: int) -> np.ndarray:
        seed = derive_seed(0, "caption", caption)
        return np.random.default_rng(seed).standard_normal(dim)

    def generate(self, wire_request: dict) -> dict:
        params = GenerationParams.from_dict(wire_request)
        cond = {}
        dim = self.dim
        if "embedding" in wire_request:
            emb = _embedding_from_b64(wire_request["embedding"])
            if emb.size == 0:
                return {"error": "empty conditioning embedding"}
            dim = emb.shape[0]
            cond["image"] = emb
        if "caption" in wire_request:
            cond["text"] = self._text_embedding(wire_request["caption"], dim)
        z0 = np.random.default_rng(params.seed).standard_normal(dim)
        out = toy_reverse_diffusion(z0, cond, params, self.steps)
        return {
            "payload": base64.b64encode(container.dump_bytes(out)).decode("ascii"),
            "generator_id": self.generator_id,
        }


def generate(
    req: GenerationRequest,
    backend,
    blob_store: "BlobStore",
    sleep=time.sleep,
    max_attempts: int = MAX_ATTEMPTS,
    rng: random.Random | None = None,
) -> GeneratedView:
    """Dispatch one request with retry on transport failure.

    Transport errors back off exponentially (100ms * 2^k plus jitter) and
    retry up to ``max_attempts``; a reply carrying an error is a terminal
    backend rejection.
    """
    rng = rng or random.Random(req.params.seed)
    wire = req.wire_request()
    last = None
    for attempt in range(1, max_attempts + 1):
        try:
            reply = backend.generate(wire)
        except TransportError as exc:
            last = exc
            if attempt < max_attempts:
                sleep(BACKOFF_BASE_SECONDS * (2 ** (attempt - 1)) * (1 + rng.random()))
            continue
        if "error" in reply:
            raise BackendRejectionError(str(reply["error"]))
        payload = base64.b64decode(reply["payload"])
        return GeneratedView(
            sample_id=req.sample_id,
            mode=req.params.mode,
            params=req.params,
            payload_ref=blob_store.put(payload),
            generator_id=reply.get("generator_id", "unknown"),
            attempts=attempt,
        )
    raise TransportError(f"backend unreachable after {max_attempts} attempts: {last}")


# -- blob store ----------------------------------------------------------------


class BlobStore:
    """Content-addressed payload store on the local filesystem.

    Identical payloads share one blob, so views can be reused across runs.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest[2:]

    def put(self, payload: bytes) -> str:
        digest = hashlib.sha256(payload).hexdigest()
        path = self._path(digest)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(payload)
            os.replace(tmp, path)
        return f"sha256:{digest}"

    def get(self, ref: str) -> bytes:
        scheme, _, digest = ref.partition(":")
        if scheme != "sha256" or not digest:
            raise ValueError(f"malformed blob ref {ref!r}")
        path = self._path(digest)
        if not path.exists():
            raise FileNotFoundError(f"blob {ref} not in store")
        return path.read_bytes()

    def exists(self, ref: str) -> bool:
        _, _, digest = ref.partition(":")
        return bool(digest) and self._path(digest).exists()


# -- manifest ------------------------------------------------------------------

STATUS_DONE = "done"
STATUS_FAILED = "failed"
STATUS_SKIPPED = "skipped"


class ManifestWriter:
    """Serialized append-only JSONL writer; one fsync per record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())


def load_manifest(path) -> list[dict]:
    """Read all manifest records; any unparseable line is a hard error."""
    path = Path(path)
    if not path.exists():
        return []
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ManifestCorruptionError(f"{path}:{lineno}: {exc}") from exc
    return records


def manifest_state(records) -> dict:
    """Latest record per (sample_id, mode); later records supersede earlier."""
    state = {}
    for rec in records:
        state[(rec["sample_id"], rec["mode"])] = rec
    return state


@dataclass
class BatchResult:
    """Outcome of one batch_generate run."""

    new_done: int = 0
    new_failed: int = 0
    new_skipped: int = 0
    already_done: int = 0
    backend_calls: int = 0
    records: list = field(default_factory=list)


def batch_generate(
    manifest_path,
    inputs,
    backend,
    max_in_flight: int = 4,
    *,
    blob_store: BlobStore,
    direction: ForegroundDirection | None = None,
    schedule: NoiseSchedule | None = None,
    scorer=None,
    modes=MODES,
    alpha: float = 0.5,
    base_seed: int = 0,
    sleep=time.sleep,
) -> BatchResult:
    """Plan and run every (sample, mode) job not already done in the manifest.

    Re-runs are idempotent: done records are skipped outright, failed records
    are retried once per run, and jobs with identical cache keys share a
    single backend call. Per-record failures are recorded and the batch
    continues.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")
    state = manifest_state(load_manifest(manifest_path))
    writer = ManifestWriter(manifest_path)
    result = BatchResult()

    # Payloads already generated anywhere in the manifest are reusable.
    cache: dict[str, str] = {
        rec["cache_key"]: rec["payload_ref"]
        for rec in state.values()
        if rec.get("status") == STATUS_DONE and rec.get("payload_ref")
    }
    cache_lock = threading.Lock()
    calls_lock = threading.Lock()

    jobs = []
    for sample in inputs:
        for mode in modes:
            prior = state.get((sample.sample_id, mode))
            if prior is not None and prior["status"] in (STATUS_DONE, STATUS_SKIPPED):
                result.already_done += 1
                continue
            try:
                req = plan_generation(
                    sample,
                    mode,
                    direction=direction,
                    schedule=schedule,
                    scorer=scorer,
                    alpha=alpha,
                    base_seed=base_seed,
                )
            except MissingConditioningError as exc:
                record = {
                    "sample_id": sample.sample_id,
                    "mode": mode,
                    "params": {"mode": mode},
                    "cache_key": "",
                    "status": STATUS_SKIPPED,
                    "error": str(exc),
                }
                writer.append(record)
                result.records.append(record)
                result.new_skipped += 1
                continue
            jobs.append(req)

    # One backend call per distinct cache key: duplicates wait on the leader.
    leaders: dict[str, GenerationRequest] = {}
    followers: list[GenerationRequest] = []
    for req in jobs:
        if req.cache_key in cache or req.cache_key in leaders:
            followers.append(req)
        else:
            leaders[req.cache_key] = req

    def run_one(req: GenerationRequest) -> dict:
        record = {
            "sample_id": req.sample_id,
            "mode": req.params.mode,
            "params": req.params.to_dict(),
            "cache_key": req.cache_key,
        }
        try:
            with calls_lock:
                result.backend_calls += 1
            view = generate(req, backend, blob_store, sleep=sleep)
        except (TransportError, BackendRejectionError) as exc:
            record.update(status=STATUS_FAILED, error=str(exc))
        else:
            with cache_lock:
                cache[req.cache_key] = view.payload_ref
            record.update(
                status=STATUS_DONE,
                payload_ref=view.payload_ref,
                generator_id=view.generator_id,
                attempts=view.attempts,
            )
        return record

    if leaders:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            finished = list(pool.map(run_one, leaders.values()))
    else:
        finished = []

    for record in finished:
        writer.append(record)
        result.records.append(record)
        if record["status"] == STATUS_DONE:
            result.new_done += 1
        else:
            result.new_failed += 1

    for req in followers:
        ref = cache.get(req.cache_key)
        record = {
            "sample_id": req.sample_id,
            "mode": req.params.mode,
            "params": req.params.to_dict(),
            "cache_key": req.cache_key,
        }
        if ref is None:
            # Leader failed this run; the follower inherits the failure.
            record.update(status=STATUS_FAILED, error="shared generation failed")
            result.new_failed += 1
        else:
            record.update(status=STATUS_DONE, payload_ref=ref, generator_id="cache")
            result.new_done += 1
        writer.append(record)
        result.records.append(record)

    return result


def collect_view_sets(manifest_path, inputs, blob_store: BlobStore) -> list[PositiveViewSet]:
    """Assemble positive view sets from the manifest plus original payloads.

    The original view is the sample's own serialized feature container,
    stored content-addressed like everything else.
    """
    state = manifest_state(load_manifest(manifest_path))
    sets = []
    for sample in inputs:
        views = {}
        if sample.features is not None:
            views["ori"] = blob_store.put(container.dump_bytes(sample.features))
        else:
            views["ori"] = blob_store.put(
                json.dumps({"caption": sample.caption}).encode()
            )
        for mode in MODES:
            rec = state.get((sample.sample_id, mode))
            if rec and rec["status"] == STATUS_DONE:
                views[mode] = rec["payload_ref"]
        sets.append(PositiveViewSet(sample_id=sample.sample_id, views=views))
    return sets
