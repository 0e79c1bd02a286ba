"""Tiny frozen decoder-only VLM fixture: connector, causal decoder, probes.

The fixture never sees a rare-class scene, so rare classes fail in baseline
mode by construction — that manufactured blind spot is what the enhancement
modules are later measured against. A slice of the pretraining examples
carries detector-style ``[Detected: ...]`` prompt suffixes with the true
name at a random slot, teaching the decoder that hints are informative; a
junk-object slice (random planted direction, answer = leading hint, any
class name) teaches the fallback of trusting hints on unfamiliar visuals
and gives every name token output-side competence without grounding it.
After pretraining the weights are rounded to storage precision,
checksummed, and never updated again.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor, backward
from .ckpt import round_f32, weights_crc
from .errors import ContractError, GateError, ShapeError
from .optim import AdamW, MonotoneGuard
from .prompting import HINT_SUFFIX, enrich_prompt
from .world import VisionEncoder, World, random_object_grid

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class Role(IntEnum):
    VISUAL = 0
    PROMPT = 1
    ANSWER = 2


@dataclass
class TokenSequence:
    """Token ids with a per-position role mask; visual positions lead."""

    ids: list[int]
    roles: list[int]

    def __post_init__(self):
        if len(self.ids) != len(self.roles):
            raise ContractError("ids and roles must have equal length")
        n_vis = self.n_visual
        if any(r == Role.VISUAL for r in self.roles[n_vis:]):
            raise ContractError("visual positions must form a contiguous prefix")

    @property
    def n_visual(self) -> int:
        n = 0
        while n < len(self.roles) and self.roles[n] == Role.VISUAL:
            n += 1
        return n

    @property
    def text_ids(self) -> list[int]:
        return self.ids[self.n_visual :]

    def answer_positions(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == Role.ANSWER]


class Tokenizer:
    """Word-level tokenizer; class names stay single tokens by construction."""

    SPECIALS = ("<bos>", "<eos>", "<pad>", "<unk>")

    def __init__(self, vocab: list[str]):
        self.vocab = list(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.bos, self.eos, self.pad, self.unk = (
            self.index[s] for s in self.SPECIALS
        )

    @classmethod
    def build(cls, world: World) -> "Tokenizer":
        words: set[str] = set()
        for meta in world.manifest.scene_meta.values():
            words.update(cls.split(meta.question))
            words.update(cls.split(meta.answer))
        words.update(world.manifest.names)
        words.update(cls.split(HINT_SUFFIX.format(names=",")))
        return cls(list(cls.SPECIALS) + sorted(words))

    @staticmethod
    def split(text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, self.unk) for tok in self.split(text)]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.vocab, indent=0))

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls(json.loads(Path(path).read_text()))

    def __len__(self) -> int:
        return len(self.vocab)


@dataclass(frozen=True)
class VLMConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 64
    ffn_hidden: int = 512
    context: int = 256
    d_v: int = 32
    tie_head: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ContractError("head count must divide dim")


@dataclass
class VLM:
    """Connector + decoder weights; frozen means no tensor requires grad."""

    config: VLMConfig
    weights: dict[str, Tensor]
    frozen: bool = False

    def checksum(self) -> int:
        return weights_crc(self.head_synced_weights())

    def head_tensor(self) -> Tensor:
        """The readout head; a live transpose of the embedding when tied."""
        if self.config.tie_head:
            return ad.transpose(self.weights["wte"])
        return self.weights["head"]

    def head_array(self) -> np.ndarray:
        return self.head_tensor().array

    def head_synced_weights(self) -> dict[str, Tensor]:
        """Weights with the derived head blob kept in sync for storage."""
        out = dict(self.weights)
        if self.config.tie_head:
            out["head"] = Tensor(self.weights["wte"].array.T.copy())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for name, t in self.weights.items()
                if not (self.config.tie_head and name == "head")]

    def freeze(self) -> "VLM":
        frozen = {k: Tensor(t.array, requires_grad=False) for k, t in self.weights.items()}
        return VLM(self.config, frozen, frozen=True)


def init_vlm(config: VLMConfig, vocab_size: int, seed: int) -> VLM:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))

    def mat(rows, cols, std=0.02):
        return Tensor(rng.normal(scale=std, size=(rows, cols)), requires_grad=True)

    d, h = config.dim, config.ffn_hidden
    weights: dict[str, Tensor] = {
        "wte": mat(vocab_size, d),
        "wpe": mat(config.context, d),
        "connector": mat(config.d_v, d),
    }
    for i in range(config.layers):
        weights[f"layer{i}.wq"] = mat(d, d)
        weights[f"layer{i}.wk"] = mat(d, d)
        weights[f"layer{i}.wv"] = mat(d, d)
        weights[f"layer{i}.wo"] = mat(d, d, std=0.0)
        weights[f"layer{i}.w1"] = mat(d, h)
        weights[f"layer{i}.w2"] = mat(h, d, std=0.0)
    if not config.tie_head:
        # Untied variant: the head starts as the embedding transpose.
        weights["head"] = Tensor(weights["wte"].array.T.copy(), requires_grad=True)
    return VLM(config, weights)


def connector(vlm: VLM, features: Tensor | np.ndarray) -> Tensor:
    """V = C(U): linear map from encoder space into the decoder embedding."""
    u = features if isinstance(features, Tensor) else Tensor(features)
    if u.shape[1] != vlm.config.d_v:
        raise ShapeError(f"connector expects d_v={vlm.config.d_v}, got {u.shape}")
    return ad.matmul(u, vlm.weights["connector"])


@dataclass
class ForwardResult:
    logits: Tensor  # [n, vocab]
    hiddens: list[Tensor]  # length layers+1; hiddens[0] is the embedded input
    attentions: list[np.ndarray]  # per layer [heads, n, n]
    n_visual: int


def forward(vlm: VLM, visual: Tensor | None, seq: TokenSequence) -> ForwardResult:
    """Full teacher-forced pass; strictly causal; keeps hiddens and attention."""
    cfg = vlm.config
    w = vlm.weights
    m = 0 if visual is None else visual.shape[0]
    if m != seq.n_visual:
        raise ContractError(f"sequence declares {seq.n_visual} visual positions, got {m}")
    n = len(seq.ids)
    if n > cfg.context:
        raise ContractError(f"sequence length {n} exceeds context {cfg.context}")
    if n == 0:
        raise ContractError("empty sequence")

    text = ad.gather_rows(w["wte"], seq.text_ids) if n > m else None
    if visual is not None and text is not None:
        x = ad.concat_rows([visual, text])
    else:
        x = visual if visual is not None else text
    x = ad.add(x, ad.gather_rows(w["wpe"], list(range(n))))

    hiddens = [x]
    attentions: list[np.ndarray] = []
    for i in range(cfg.layers):
        hnorm = ad.rmsnorm_rows(x)
        q = ad.matmul(hnorm, w[f"layer{i}.wq"])
        k = ad.matmul(hnorm, w[f"layer{i}.wk"])
        v = ad.matmul(hnorm, w[f"layer{i}.wv"])
        attn_out, attn_w = ad.multihead_attention(q, k, v, cfg.heads, causal=True)
        x = ad.add(x, ad.matmul(attn_out, w[f"layer{i}.wo"]))
        fnorm = ad.rmsnorm_rows(x)
        x = ad.add(x, ad.matmul(ad.gelu(ad.matmul(fnorm, w[f"layer{i}.w1"])), w[f"layer{i}.w2"]))
        hiddens.append(x)
        attentions.append(attn_w)

    logits = ad.matmul(x, vlm.head_tensor())
    return ForwardResult(logits, hiddens, attentions, m)


def sequence_nll(
    vlm: VLM, visual: Tensor | None, seq: TokenSequence, supervise: str = "answer"
) -> Tensor:
    """Summed next-token negative log-likelihood at supervised positions.

    supervise="answer" scores answer-region targets only; "all" scores every
    text position that has a predecessor.
    """
    if supervise == "answer":
        targets = seq.answer_positions()
    elif supervise == "all":
        targets = [p for p in range(len(seq.ids)) if seq.roles[p] != Role.VISUAL and p > 0]
    else:
        raise ContractError(f"unknown supervision mode {supervise!r}")
    if not targets:
        raise ContractError("no supervised positions in sequence")
    result = forward(vlm, visual, seq)
    logprobs = ad.log_softmax_rows(result.logits)
    rows = [p - 1 for p in targets]
    cols = [seq.ids[p] for p in targets]
    return ad.scale(ad.sum_all(ad.gather_elements(logprobs, rows, cols)), -1.0)


def generate(
    vlm: VLM, visual: Tensor | None, prompt: TokenSequence, max_len: int
) -> list[int]:
    """Greedy decoding; ties break to the lowest token id; stops at <eos>.

    Returns the generated ids (with the closing <eos> when emitted).
    """
    if not prompt.text_ids:
        raise ContractError("prompt must be nonempty")
    ids = list(prompt.ids)
    roles = list(prompt.roles)
    out: list[int] = []
    for _ in range(max_len):
        seq = TokenSequence(ids, roles)
        logits = forward(vlm, visual, seq).logits.array[-1]
        token = int(np.argmax(logits))  # argmax takes the first (lowest id) max
        out.append(token)
        ids.append(token)
        roles.append(Role.ANSWER)
        if token == EOS_ID:
            break
    return out


# <eos> sits at a fixed slot because specials lead the vocabulary.
EOS_ID = Tokenizer.SPECIALS.index("<eos>")
BOS_ID = Tokenizer.SPECIALS.index("<bos>")


def build_prompt(tokenizer: Tokenizer, n_visual: int, prompt_text: str) -> TokenSequence:
    ids = [tokenizer.pad] * n_visual + [tokenizer.bos] + tokenizer.encode(prompt_text)
    roles = [Role.VISUAL] * n_visual + [Role.PROMPT] * (len(ids) - n_visual)
    return TokenSequence(ids, roles)


def build_qa(
    tokenizer: Tokenizer, n_visual: int, prompt_text: str, answer_text: str
) -> TokenSequence:
    prompt = build_prompt(tokenizer, n_visual, prompt_text)
    answer_ids = tokenizer.encode(answer_text) + [tokenizer.eos]
    return TokenSequence(
        prompt.ids + answer_ids, prompt.roles + [Role.ANSWER] * len(answer_ids)
    )


# ---------------------------------------------------------------------------
# fixture pretraining
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixtureConfig:
    epochs: int = 12
    batch_scenes: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.01
    hinted_fraction: float = 0.25
    junk_fraction: float = 0.25
    hint_k: int = 3
    distractor_pool: str = "all"
    gate_common: float = 0.90
    gate_rare: float = 0.40
    max_answer_len: int = 3
    vlm: VLMConfig = field(default_factory=VLMConfig)


@dataclass
class _Example:
    features: np.ndarray  # [M, d_v]
    prompt: str
    answer: str


def _fixture_examples(
    world: World, encoder: VisionEncoder, cfg: FixtureConfig, rng: np.random.Generator
) -> list[_Example]:
    m = world.manifest
    common_names = [m.names[c] for c in range(m.n_classes) if c not in m.rare_ids]
    # Distractor hints may name rare classes (text only): the decoder learns
    # those words as inputs while never seeing a rare scene or answer.
    hint_pool = m.names if cfg.distractor_pool == "all" else common_names
    examples: list[_Example] = []
    for meta in world.scenes("train"):
        if meta.class_id in m.rare_ids:
            continue
        u = rng.uniform()
        feats = encoder.encode(world.grid(meta.scene_id))
        if u < cfg.junk_fraction:
            # Unfamiliar object: the leading hint is the only usable evidence.
            # The first hint (= answer) ranges over every class name; a junk
            # scene carries no class visual, so this trains word-level output
            # competence without ever grounding a rare class.
            grid, _ = random_object_grid(rng, m.g, m.d_v, m.alpha, m.noise)
            names = list(rng.choice(hint_pool, size=min(cfg.hint_k, len(hint_pool)), replace=False))
            examples.append(
                _Example(encoder.encode(grid), enrich_prompt(meta.question, names), names[0])
            )
        elif u < cfg.junk_fraction + cfg.hinted_fraction:
            # Known object with hints; the true name lands at a random slot.
            distractors = [nm for nm in hint_pool if nm != meta.answer]
            k = min(cfg.hint_k - 1, len(distractors))
            names = list(rng.choice(distractors, size=k, replace=False))
            names.insert(int(rng.integers(len(names) + 1)), meta.answer)
            examples.append(
                _Example(feats, enrich_prompt(meta.question, names), meta.answer)
            )
        else:
            examples.append(_Example(feats, meta.question, meta.answer))
    return examples


def evaluate_answers(
    vlm: VLM,
    tokenizer: Tokenizer,
    encoder: VisionEncoder,
    world: World,
    split: str = "test",
    max_len: int = 3,
) -> dict[int, float]:
    """Per-class exact-name answer accuracy in plain baseline mode."""
    per_class: dict[int, list[bool]] = {}
    for meta in world.scenes(split):
        v = connector(vlm, encoder.encode(world.grid(meta.scene_id)))
        prompt = build_prompt(tokenizer, v.shape[0], meta.question)
        out = generate(vlm, v, prompt, max_len)
        name_id = tokenizer.index[meta.answer]
        per_class.setdefault(meta.class_id, []).append(name_id in out)
    return {cid: float(np.mean(oks)) for cid, oks in per_class.items()}


def pretrain_fixture(
    world: World, cfg: FixtureConfig, seed: int
) -> tuple[VLM, Tokenizer, dict]:
    """Train the frozen-VLM fixture on common classes and enforce its gate.

    Returns the frozen (f32-rounded, checksummed) VLM, the tokenizer, and a
    log with per-epoch mean losses and gate metrics.
    """
    tokenizer = Tokenizer.build(world)
    vcfg = replace(cfg.vlm, d_v=world.manifest.d_v)
    vlm = init_vlm(vcfg, len(tokenizer), seed)
    encoder = VisionEncoder.for_world(world)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 97]))
    examples = _fixture_examples(world, encoder, cfg, rng)
    sequences = [
        (ex.features, build_qa(tokenizer, ex.features.shape[0], ex.prompt, ex.answer))
        for ex in examples
    ]

    def eval_mean_nll() -> float:
        return float(
            np.mean([sequence_nll(vlm, connector(vlm, f), s).item() for f, s in sequences])
        )

    optimizer = AdamW(vlm.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    guard = MonotoneGuard(optimizer)
    guard.best = eval_mean_nll()
    epoch_losses: list[float] = [guard.best]
    for epoch in range(cfg.epochs):
        guard.snapshot()
        order = rng.permutation(len(sequences))
        for start in range(0, len(order), cfg.batch_scenes):
            batch = order[start : start + cfg.batch_scenes]
            with GradTape() as tape:
                losses = []
                for j in batch:
                    feats, seq = sequences[j]
                    losses.append(sequence_nll(vlm, connector(vlm, feats), seq))
                loss = ad.scale(_sum(losses), 1.0 / len(batch))
            optimizer.step(backward(loss, tape))
        guard.accept(eval_mean_nll())
        epoch_losses.append(guard.best)

    frozen = VLM(vcfg, round_f32(vlm.weights)).freeze()
    per_class = evaluate_answers(frozen, tokenizer, encoder, world, max_len=cfg.max_answer_len)
    m = world.manifest
    common = [a for c, a in per_class.items() if c not in m.rare_ids]
    rare = [a for c, a in per_class.items() if c in m.rare_ids]
    gate = {
        "common_accuracy": float(np.mean(common)) if common else 1.0,
        "rare_accuracy": float(np.mean(rare)) if rare else 0.0,
        "per_class": per_class,
    }
    if gate["common_accuracy"] < cfg.gate_common or (
        rare and gate["rare_accuracy"] > cfg.gate_rare
    ):
        raise GateError(
            "fixture gate unmet: common "
            f"{gate['common_accuracy']:.3f} (need >= {cfg.gate_common}), rare "
            f"{gate['rare_accuracy']:.3f} (need <= {cfg.gate_rare}); retune the "
            "fixture config"
        )
    log = {"epoch_losses": epoch_losses, "gate": gate, "checksum": frozen.checksum()}
    return frozen, tokenizer, log


def _sum(tensors: list[Tensor]) -> Tensor:
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.add(acc, t)
    return acc


# ---------------------------------------------------------------------------
# interpretability probes
# ---------------------------------------------------------------------------


def attention_probe(result: ForwardResult, seq: TokenSequence, object_pos: int) -> np.ndarray:
    """Per-layer mean (over heads) attention mass from one token onto visuals."""
    if not 0 <= object_pos < len(seq.ids):
        raise ContractError(f"position {object_pos} out of range")
    if seq.roles[object_pos] != Role.ANSWER:
        raise ContractError("object position must lie in the answer region")
    m = result.n_visual
    if m == 0:
        return np.zeros(len(result.attentions))
    return np.array([
        attn[:, object_pos, :m].sum(axis=1).mean() for attn in result.attentions
    ])


def logit_lens(vlm: VLM, result: ForwardResult, positions: list[int]) -> np.ndarray:
    """Decode intermediate hidden states through the final head.

    Returns probabilities with shape [layers, len(positions), vocab]; layer
    index ell reads hiddens[ell + 1] (the residual stream after layer ell).
    """
    n = result.hiddens[0].shape[0]
    for p in positions:
        if not 0 <= p < n:
            raise ContractError(f"position {p} out of range 0..{n - 1}")
    head = vlm.head_array()
    rows = []
    for ell in range(1, len(result.hiddens)):
        h = result.hiddens[ell].array[positions]
        logits = h @ head
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        rows.append(e / e.sum(axis=1, keepdims=True))
    return np.stack(rows)


def token_rank(prob_row: np.ndarray, token_id: int) -> int:
    """0-based rank under descending probability; ties break by token id."""
    p = prob_row[token_id]
    higher = int((prob_row > p).sum())
    tied_before = int((prob_row[:token_id] == p).sum())
    return higher + tied_before
