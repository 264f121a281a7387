"""Adaptive generation policy: noise levels, guidance scales, perturbation.

Maps input characteristics to generation parameters. Foreground proportion
drives the forward-diffusion noise level applied to conditioning embeddings;
caption visual complexity drives the classifier-free-guidance scale.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import ScoreParseError
from .validation import check_unit_interval, check_vector

NOISE_LEVELS = (0, 100, 200, 300, 400)
GUIDANCE_SCALES = (2, 4, 6, 8)
COMPLEXITY_VALUES = (1, 2, 3, 4)

# Canonical DDPM linear schedule.
DEFAULT_T_MAX = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

# Absorbs float representation error at bin edges: p = 0.6 must land in bin 3
# even though 0.6/0.2 rounds below 3 in binary.
_BIN_EDGE_EPS = 1e-9


def noise_level(p: float) -> int:
    """Discretize a foreground proportion into a noise level.

    Five bins of width 0.2 map to {0, 100, 200, 300, 400}; the level is
    capped at 400 (p = 1.0 would otherwise overflow the top bin). Floor
    semantics at bin edges: the edge value belongs to the upper bin.
    """
    p = check_unit_interval(p, "p")
    return min(400, 100 * int(math.floor(5.0 * p + _BIN_EDGE_EPS)))


def guidance_scale(score: "ComplexityScore | int") -> int:
    """Map a caption complexity score to a guidance scale: g = 10 - 2s.

    Simple captions (low s) get strong guidance; detailed captions get weak
    guidance, so the mapping is monotone decreasing onto {8, 6, 4, 2}.
    """
    value = score.value if isinstance(score, ComplexityScore) else int(score)
    if value not in COMPLEXITY_VALUES:
        raise ValueError(f"complexity score must be in {COMPLEXITY_VALUES}, got {value}")
    return 10 - 2 * value


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta forward diffusion schedule with cached cumulative products."""

    t_max: int = DEFAULT_T_MAX
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.t_max)
        bars = np.empty(self.t_max + 1)
        bars[0] = 1.0  # empty product
        np.cumprod(1.0 - betas, out=bars[1:])
        bars.setflags(write=False)
        object.__setattr__(self, "alpha_bar", bars)

    def alpha_bar_at(self, level: int) -> float:
        level = int(level)
        if not (0 <= level <= self.t_max):
            raise ValueError(f"noise level {level} outside [0, {self.t_max}]")
        return float(self.alpha_bar[level])


def alpha_bar(schedule: NoiseSchedule, level: int) -> float:
    return schedule.alpha_bar_at(level)


def perturb_embedding(
    embedding, level: int, schedule: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """Forward-diffuse an embedding: sqrt(abar)*c + sqrt(1-abar)*eps.

    Level 0 is the exact identity (no RNG draw), so a zero noise level leaves
    both the embedding and the generator state untouched.
    """
    c = check_vector(embedding, "embedding")
    bar = schedule.alpha_bar_at(level)
    if level == 0:
        return c.copy()
    eps = rng.standard_normal(c.shape[0])
    return np.sqrt(bar) * c + np.sqrt(1.0 - bar) * eps


@dataclass(frozen=True)
class ComplexityScore:
    """Caption visual-complexity score in {1, 2, 3, 4} plus its provenance."""

    value: int
    source: str = "heuristic"

    def __post_init__(self):
        if self.value not in COMPLEXITY_VALUES:
            raise ValueError(f"score must be in {COMPLEXITY_VALUES}, got {self.value}")
        if self.source not in ("llm", "heuristic", "manual"):
            raise ValueError(f"unknown score source {self.source!r}")


_SCORE_PATTERN = re.compile(r"\[\s*score\s*:\s*([1-4])\s*\]", re.IGNORECASE)

SCORING_INSTRUCTION = (
    "You are tasked with evaluating the visual complexity of a text prompt "
    "intended for image generation. Your goal is to assign a score from 1 to 4 "
    "that reflects how richly the prompt describes concrete visual elements. "
    "The more detailed and diverse the visual information, the higher the "
    "score should be.\n"
    "Visual complexity is determined by identifying constraints that directly "
    "affect how an image would be generated. These include the specificity of "
    "objects mentioned (such as type, quantity, or material), descriptive "
    "visual features (such as color, texture, or lighting), spatial "
    "relationships (such as layout or perspective), dynamic elements (such as "
    "actions or interactions), and stylistic cues (such as artistic genres or "
    "cultural elements). A prompt that contains a wide range of such features "
    "is considered more complex than one that simply names general categories.\n"
    "A prompt that only refers to broad object types without any additional "
    "visual information should be scored as 1. If it includes a small number "
    "of visual constraints—typically one to three—it should be scored as 2. "
    "A score of 3 is appropriate when the prompt contains a moderate level of "
    "detail, roughly four to six constraints. A prompt that includes more than "
    "six distinct and specific visual elements—such as combinations of "
    "materials, textures, color, spatial arrangement, and style—should be "
    "scored as 4.\n"
    "When evaluating, do not include abstract or emotional language that does "
    "not translate directly into visual features. Focus only on concrete and "
    "visualizable information.\n"
    "After analyzing the prompt, return a score from 1 to 4. Return the result "
    "in the following format: [score: ?]."
)


def build_scoring_prompt(caption: str) -> list[dict]:
    """Chat messages instructing an LLM to rate a caption's visual complexity."""
    return [
        {"role": "system", "content": SCORING_INSTRUCTION},
        {
            "role": "user",
            "content": (
                "Now output the score of visual constraints for the following "
                f"text prompt:{caption}."
            ),
        },
    ]


def parse_score_reply(raw: str) -> int:
    """Extract the integer from a "[score: k]" reply, case/space tolerant."""
    match = _SCORE_PATTERN.search(raw)
    if match is None:
        raise ScoreParseError(f"no [score: k] marker in reply: {raw!r}", raw=raw)
    return int(match.group(1))


def load_lexicon(path=None) -> dict:
    """Load the visual-constraint lexicon; the bundled one by default."""
    if path is None:
        text = (
            resources.files("genview").joinpath("data/complexity_lexicon.json")
        ).read_text()
    else:
        text = Path(path).read_text()
    obj = json.loads(text)
    if "categories" not in obj:
        raise ValueError("lexicon file missing 'categories'")
    return obj


class HeuristicComplexityScorer:
    """Deterministic lexicon-based fallback scorer.

    Counts distinct visual-constraint terms (colors, materials, counts,
    spatial prepositions, style terms, ...) present in the caption and bins
    the count: 0 hits -> 1, 1-3 -> 2, 4-6 -> 3, >6 -> 4. Pure and hermetic;
    no transport involved.
    """

    def __init__(self, lexicon: dict | None = None):
        lexicon = lexicon if lexicon is not None else load_lexicon()
        self.lexicon_version = lexicon.get("version")
        terms = set()
        for cat_terms in lexicon["categories"].values():
            terms.update(t.lower() for t in cat_terms)
        # Longest-first keeps multiword terms like "in front of" intact.
        joined = "|".join(re.escape(t) for t in sorted(terms, key=len, reverse=True))
        self._pattern = re.compile(rf"\b({joined})\b", re.IGNORECASE)

    def count_hits(self, caption: str) -> int:
        return len({m.lower() for m in self._pattern.findall(caption)})

    def score(self, caption: str) -> ComplexityScore:
        hits = self.count_hits(caption)
        if hits == 0:
            value = 1
        elif hits <= 3:
            value = 2
        elif hits <= 6:
            value = 3
        else:
            value = 4
        return ComplexityScore(value=value, source="heuristic")


class LLMComplexityScorer:
    """Scorer backed by a transport client speaking the wire contract.

    The transport is any callable taking ``{"caption": str}`` and returning
    ``{"raw": str}``; this class owns prompt construction and reply parsing.
    Concurrent calls must not interleave transport state.
    """

    def __init__(self, transport):
        self._transport = transport

    def score(self, caption: str) -> ComplexityScore:
        reply = self._transport({"caption": caption})
        return ComplexityScore(value=parse_score_reply(reply["raw"]), source="llm")


def score_caption_complexity(caption: str, scorer) -> ComplexityScore:
    """Score a caption's visual complexity with the given scorer client."""
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    return scorer.score(caption)
