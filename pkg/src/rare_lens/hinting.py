"""Object-aware detection with class prototypes and top-k prompt hints.

The prototype table doubles as a detector bank: projected patch tokens are
scored against every class by cosine, each class keeps its best patch as a
global relevance score, and the top-k class names are appended to the prompt
as ``[Detected: ...]``. Inference modes switch the visual refinement and the
hint injection independently, mirroring the ablation arms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapter import RefinedTokens, VisualTokenAdapter
from .base import ParamMixin
from .embeddings import ClassEmbeddingLearner, ClassEmbeddingTable, ProjectionHeads
from .errors import ContractError, PairingError
from .prompting import PromptTemplate, enrich_prompt
from .vlm import VLM, Tokenizer, build_prompt, connector, generate
from .world import SceneMeta, VisionEncoder

MODES = ("baseline", "visual-only", "hints-only", "all-classes-hints", "full")

__all__ = [
    "MODES",
    "ScoreMap",
    "DetectionResult",
    "PromptTemplate",
    "enrich_prompt",
    "score_map",
    "top_k",
    "ObjectDetector",
    "InferenceOutput",
    "detect_and_answer",
]


@dataclass
class ScoreMap:
    """Patch-by-class cosine scores with per-class maxima."""

    scores: np.ndarray  # [M, C], entries in [-1, 1]
    relevance: np.ndarray  # [C], column maxima
    argmax_patch: np.ndarray  # [C], patch index attaining each maximum


@dataclass
class DetectionResult:
    """Top-k classes by relevance, descending; ties break to lower class id."""

    names: list[str]
    class_ids: list[int]
    scores: list[float]

    def __len__(self) -> int:
        return len(self.class_ids)


def score_map(
    grid: np.ndarray,
    encoder: VisionEncoder,
    heads: ProjectionHeads,
    table: ClassEmbeddingTable,
) -> ScoreMap:
    """Project every encoded patch token and score it against each prototype."""
    if heads.pair_token != table.pair_token:
        raise PairingError(
            f"projection heads (run {heads.pair_token}) and class table "
            f"(run {table.pair_token}) come from different training runs"
        )
    tokens = encoder.encode(grid)
    projected = heads.project_visual(tokens)
    scores = ad.cosine_matrix(projected, table.w).array
    return ScoreMap(scores, scores.max(axis=0), scores.argmax(axis=0))


def top_k(smap: ScoreMap, k: int, class_names: list[str]) -> DetectionResult:
    if k < 1:
        raise ContractError("k must be at least 1")
    order = sorted(range(len(smap.relevance)), key=lambda c: (-smap.relevance[c], c))
    picked = order[: min(k, len(order))]
    return DetectionResult(
        [class_names[c] for c in picked],
        picked,
        [float(smap.relevance[c]) for c in picked],
    )


class ObjectDetector(ParamMixin):
    """Predict-shaped wrapper: scene grid in, top-k detected classes out."""

    def __init__(self, k: int = 3):
        self.k = k

    def bind(self, encoder: VisionEncoder, learner: ClassEmbeddingLearner):
        self.encoder_ = encoder
        self.heads_ = learner.heads_
        self.table_ = learner.table_
        return self

    def score_map(self, grid: np.ndarray) -> ScoreMap:
        return score_map(grid, self.encoder_, self.heads_, self.table_)

    def predict(self, grid: np.ndarray) -> DetectionResult:
        return top_k(self.score_map(grid), self.k, self.table_.class_names)


@dataclass
class InferenceOutput:
    generated: list[int]
    answer_text: str
    prompt_text: str
    detection: DetectionResult
    refined: RefinedTokens
    correct: bool


def detect_and_answer(
    meta: SceneMeta,
    grid: np.ndarray,
    encoder: VisionEncoder,
    learner: ClassEmbeddingLearner,
    adapter: VisualTokenAdapter | None,
    vlm: VLM,
    tokenizer: Tokenizer,
    k: int = 3,
    mode: str = "full",
    max_len: int = 3,
) -> InferenceOutput:
    """One-scene inference with independently switchable enhancement modes.

    baseline: original tokens, plain prompt. visual-only: refined tokens.
    hints-only: top-k hint suffix. all-classes-hints: every class name as a
    hint. full: refined tokens plus top-k hints.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
    table = learner.table_
    detection = top_k(
        score_map(grid, encoder, learner.heads_, table), k, table.class_names
    )

    v = connector(vlm, encoder.encode(grid)).array
    if mode in ("visual-only", "full"):
        if adapter is None:
            raise ContractError(f"mode {mode!r} needs a trained adapter")
        if adapter.table_crc_ != table.pair_token:
            raise PairingError(
                "adapter was trained against a different class table"
            )
        v_hat = adapter.transform(v, table)
        adapter_crc = adapter.checksum()
    else:
        v_hat, adapter_crc = v, None

    if mode in ("hints-only", "full"):
        prompt_text = enrich_prompt(meta.question, detection.names)
    elif mode == "all-classes-hints":
        prompt_text = enrich_prompt(meta.question, table.class_names)
    else:
        prompt_text = meta.question

    prompt = build_prompt(tokenizer, v_hat.shape[0], prompt_text)
    generated = generate(vlm, ad.Tensor(v_hat), prompt, max_len)
    answer_text = tokenizer.decode([t for t in generated if t != tokenizer.eos])
    correct = tokenizer.index.get(meta.answer) in generated
    return InferenceOutput(
        generated,
        answer_text,
        prompt_text,
        detection,
        RefinedTokens(v_hat, meta.scene_id, table.pair_token, adapter_crc),
        bool(correct),
    )
