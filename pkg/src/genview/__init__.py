"""Adaptive view-generation policies and quality-driven contrastive reweighting.

The package splits into pure math kernels (:mod:`genview.core_math`),
saliency estimation (:mod:`genview.saliency`), the adaptive generation
policy (:mod:`genview.policy`), offline orchestration
(:mod:`genview.generation`), pair-quality scoring (:mod:`genview.quality`),
contrastive losses with analytic gradients (:mod:`genview.losses`), and a
desk-scale training harness (:mod:`genview.trainer`). The ``genview`` CLI
exposes each stage as a subcommand.
"""

from .core_math import (
    avg_pool,
    cosine_similarity,
    first_principal_component,
    min_max_normalize,
    softmax,
    weighted_pool,
)
from .exceptions import (
    BackendRejectionError,
    DegenerateInputError,
    GenViewError,
    ManifestCorruptionError,
    MissingConditioningError,
    ScoreParseError,
    ShapeMismatchError,
    TrainingDivergedError,
    TransportError,
)
from .generation import (
    BlobStore,
    GenerationParams,
    GenerationRequest,
    MockEchoBackend,
    PositiveViewSet,
    SampleInput,
    ToyDiffusionBackend,
    batch_generate,
    cfg_noise_estimate,
    collect_view_sets,
    generate,
    plan_generation,
    toy_reverse_diffusion,
)
from .losses import (
    Assignment,
    LossValue,
    cosine_loss,
    i2t_loss,
    nce_loss,
    reweight,
    run_gradient_suite,
    sinkhorn_knopp,
    swav_loss,
    t2i_loss,
)
from .policy import (
    ComplexityScore,
    HeuristicComplexityScorer,
    LLMComplexityScorer,
    NoiseSchedule,
    alpha_bar,
    guidance_scale,
    noise_level,
    parse_score_reply,
    perturb_embedding,
    score_caption_complexity,
)
from .quality import (
    PairQuality,
    PairQualityScorer,
    WeightedBatch,
    image_pair_quality,
    image_text_quality,
    normalize_weights,
    score_image_pairs,
    score_image_text_pairs,
)
from .saliency import (
    ForegroundDirection,
    ForegroundSaliency,
    SaliencyResult,
    activation_map,
    attention_maps,
    calibrate_threshold,
    decouple_features,
    fit_foreground_direction,
    foreground_proportion,
)
from .trainer import (
    DatasetConfig,
    ProbeConfig,
    SyntheticDataset,
    ToyEncoder,
    TrainConfig,
    linear_probe,
    make_synthetic_dataset,
    train,
)

__version__ = "0.1.0"
