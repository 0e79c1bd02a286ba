"""Experiment orchestration: staged pipeline, evaluation, sweeps, probes.

Stages run gen-data -> pretrain-vlm -> train-embeddings -> train-adapter ->
eval, each persisting its artifact plus a hash in run_meta.json that binds
the stage config to its upstream checksums. A resumed run reuses every stage
whose artifact still matches and re-executes everything downstream of the
first stale stage; because trained weights are rounded to storage precision
at stage boundaries, resumed runs are bit-identical to uninterrupted ones.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ckpt
from .adapter import VisualTokenAdapter
from .autodiff import Tensor
from .config import AdapterConfig, ExperimentConfig, config_hash
from .embeddings import (
    ClassEmbeddingLearner,
    ClassEmbeddingTable,
    ProjectionHeads,
    train_class_embeddings,
)
from .errors import ConfigError, GateError, PairingError
from .hinting import MODES, detect_and_answer
from .vlm import (
    VLM,
    Tokenizer,
    VLMConfig,
    attention_probe,
    build_qa,
    connector,
    forward,
    logit_lens,
    pretrain_fixture,
    token_rank,
)
from .vis import write_bar_svg, write_csv, write_csv_matrix, write_line_svg, write_pgm
from .world import VisionEncoder, World, generate_dataset, load_dataset, save_dataset


@dataclass
class Artifacts:
    """Pipeline products; later stages are None when a run stops early."""

    world: World
    encoder: VisionEncoder
    vlm: VLM | None = None
    tokenizer: Tokenizer | None = None
    learner: ClassEmbeddingLearner | None = None
    adapter: VisualTokenAdapter | None = None


# ---------------------------------------------------------------------------
# artifact persistence
# ---------------------------------------------------------------------------


def save_vlm_artifact(out: Path, vlm: VLM, tokenizer: Tokenizer) -> None:
    ckpt.save_vlm(
        out / "vlm.ckpt",
        vlm.config.layers,
        vlm.config.heads,
        vlm.config.dim,
        len(tokenizer),
        vlm.head_synced_weights(),
    )
    tokenizer.save(out / "vocab.json")


def load_vlm_artifact(out: Path) -> tuple[VLM, Tokenizer]:
    (layers, heads, dim, vocab), blobs = ckpt.load_vlm(out / "vlm.ckpt")
    tokenizer = Tokenizer.load(out / "vocab.json")
    if len(tokenizer) != vocab:
        raise PairingError("vocab.json does not match the checkpoint vocab size")
    tied = bool(np.array_equal(blobs["head"], blobs["wte"].T))
    cfg = VLMConfig(
        layers=layers,
        heads=heads,
        dim=dim,
        ffn_hidden=blobs["layer0.w1"].shape[1],
        context=blobs["wpe"].shape[0],
        d_v=blobs["connector"].shape[0],
        tie_head=tied,
    )
    weights = {k: Tensor(v) for k, v in blobs.items() if not (tied and k == "head")}
    return VLM(cfg, weights, frozen=True), tokenizer


def save_learner_artifact(out: Path, learner: ClassEmbeddingLearner) -> None:
    heads, table = learner.heads_, learner.table_
    weights = {**heads.weights, "table.w": table.w}
    dim = table.w.shape[1]
    ckpt.save_classes(
        out / "classes.ckpt",
        table.n_classes,
        dim,
        heads.weights["gv.w1"].shape[0],
        heads.weights["gt.w1"].shape[0],
        table.kappa,
        weights,
        table.class_names,
    )


def load_learner_artifact(out: Path) -> ClassEmbeddingLearner:
    (n_classes, dim, _, _, kappa), blobs, names = ckpt.load_classes(out / "classes.ckpt")
    table_w = Tensor(blobs.pop("table.w"))
    heads = ProjectionHeads({k: Tensor(v) for k, v in blobs.items()})
    token = ckpt.weights_crc({**heads.weights, "table.w": table_w})
    heads.pair_token = token
    table = ClassEmbeddingTable(table_w, names, kappa, pair_token=token)
    learner = ClassEmbeddingLearner(dim=dim, kappa=kappa)
    learner.heads_ = heads
    learner.table_ = table
    learner.history_ = []
    return learner


def save_adapter_artifact(out: Path, adapter: VisualTokenAdapter, dim: int) -> None:
    ckpt.save_adapter(
        out / "adapter.ckpt", dim, adapter.heads, adapter.params_, adapter.table_crc_
    )


def load_adapter_artifact(out: Path, cfg: AdapterConfig,
                          expect_table_crc: int | None) -> VisualTokenAdapter:
    (dim, heads), blobs, table_crc = ckpt.load_adapter(
        out / "adapter.ckpt", expect_table_crc
    )
    adapter = VisualTokenAdapter(
        heads=heads, epochs=cfg.epochs, lr=cfg.lr, weight_decay=cfg.weight_decay,
        rec_weight=cfg.rec_weight, autoreg_weight=cfg.autoreg_weight,
        supervise=cfg.supervise, per_class_cap=cfg.per_class_cap,
        rare_boost=cfg.rare_boost,
    )
    adapter.params_ = {k: Tensor(v) for k, v in blobs.items()}
    adapter.table_crc_ = table_crc
    adapter.history_ = []
    return adapter


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-mode answer metrics over the held-out split."""

    mode: str
    k: int
    n_scenes: int
    aggregate_accuracy: float
    per_class_accuracy: dict[int, float]
    per_class_counts: dict[int, int]
    rare_accuracy: float | None
    common_accuracy: float | None
    detection_accuracy: float
    trust_rate: float | None

    def recomputed_aggregate(self) -> float:
        total = sum(
            self.per_class_accuracy[c] * self.per_class_counts[c]
            for c in self.per_class_accuracy
        )
        return total / max(1, sum(self.per_class_counts.values()))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        doc["per_class_counts"] = {str(k): v for k, v in self.per_class_counts.items()}
        return doc


def evaluate(arts: Artifacts, mode: str, k: int, max_len: int = 3) -> EvalReport:
    """Run one inference arm over the test split, sorted by scene id."""
    m = arts.world.manifest
    name_ids = {arts.tokenizer.index[n]: n for n in m.names}
    per_class_hits: dict[int, list[bool]] = {c: [] for c in range(m.n_classes)}
    detect_hits: list[bool] = []
    aligned: list[bool] = []
    for meta in sorted(arts.world.scenes("test"), key=lambda s: s.scene_id):
        out = detect_and_answer(
            meta, arts.world.grid(meta.scene_id), arts.encoder, arts.learner,
            arts.adapter, arts.vlm, arts.tokenizer, k=k, mode=mode, max_len=max_len,
        )
        per_class_hits[meta.class_id].append(out.correct)
        detect_hits.append(meta.class_id in out.detection.class_ids)
        if mode in ("hints-only", "all-classes-hints", "full"):
            hinted = (
                out.detection.names if mode != "all-classes-hints" else m.names
            )
            answered = {name_ids[t] for t in out.generated if t in name_ids}
            aligned.append(bool(answered & set(hinted)))

    per_class = {c: float(np.mean(h)) if h else 0.0 for c, h in per_class_hits.items()}
    counts = {c: len(h) for c, h in per_class_hits.items()}
    rare = [per_class[c] for c in m.rare_ids]
    common = [per_class[c] for c in range(m.n_classes) if c not in m.rare_ids]
    all_hits = [hit for hits in per_class_hits.values() for hit in hits]
    return EvalReport(
        mode=mode,
        k=k,
        n_scenes=len(all_hits),
        aggregate_accuracy=float(np.mean(all_hits)),
        per_class_accuracy=per_class,
        per_class_counts=counts,
        rare_accuracy=float(np.mean(rare)) if rare else None,
        common_accuracy=float(np.mean(common)) if common else None,
        detection_accuracy=float(np.mean(detect_hits)),
        trust_rate=float(np.mean(aligned)) if aligned else None,
    )


def report_params(arts: Artifacts) -> dict:
    """Exact parameter counts; the plug-in side must stay under 10% of the VLM."""
    vlm_n = sum(t.array.size for t in arts.vlm.head_synced_weights().values())
    heads_n = sum(t.array.size for t in arts.learner.heads_.weights.values())
    table_n = arts.learner.table_.w.array.size
    adapter_n = sum(t.array.size for t in arts.adapter.params_.values())
    plugin = heads_n + table_n + adapter_n
    counts = {
        "vlm": vlm_n,
        "projection_heads": heads_n,
        "class_table": table_n,
        "adapter": adapter_n,
        "plugin_total": plugin,
        "plugin_ratio": plugin / vlm_n,
    }
    if plugin >= 0.10 * vlm_n:
        raise GateError(
            f"plug-in parameter budget exceeded: {plugin} vs 10% of {vlm_n}"
        )
    return counts


# ---------------------------------------------------------------------------
# staged pipeline
# ---------------------------------------------------------------------------

STAGES = ("dataset", "vlm", "classes", "adapter", "eval")


class _Meta:
    def __init__(self, path: Path):
        self.path = path
        self.doc = {"stages": {}}
        if path.exists():
            self.doc = json.loads(path.read_text())

    def get(self, stage: str) -> dict | None:
        return self.doc["stages"].get(stage)

    def put(self, stage: str, record: dict) -> None:
        self.doc["stages"][stage] = record
        self.path.write_text(json.dumps(self.doc, indent=1, sort_keys=True))


def run_pipeline(
    cfg: ExperimentConfig, out_dir, resume: bool = True, until: str = "eval"
) -> tuple[Artifacts, dict | None]:
    """Execute (or resume) stages through `until`; returns artifacts + report.

    A stage reruns when its recorded hash is missing or stale, its artifact
    fails to load, or any upstream stage was re-executed this run.
    """
    cfg.validate()
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}; expected one of {STAGES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = _Meta(out / "run_meta.json")
    stages_run: list[str] = []

    def stale(stage: str, expect_hash: str) -> bool:
        rec = meta.get(stage)
        return rec is None or rec.get("hash") != expect_hash

    # Stage 1: dataset.
    h_data = config_hash({"dataset": asdict(cfg.dataset), "seed": cfg.seed})
    dataset_dir = out / "dataset"
    world = None
    if resume and not stale("dataset", h_data):
        try:
            world = load_dataset(dataset_dir)
        except FileNotFoundError:
            world = None
    if world is None:
        d = cfg.dataset
        world = generate_dataset(
            d.n_classes, d.grid, d.d_v, d.profile(), cfg.seed, d_t=d.d_t,
            alpha=d.alpha, noise=d.noise, vision_identity=d.vision_identity,
        )
        save_dataset(world, dataset_dir)
        meta.put("dataset", {"hash": h_data})
        stages_run.append("dataset")
    encoder = VisionEncoder.for_world(world)
    if until == "dataset":
        return Artifacts(world, encoder), None

    # Stage 2: frozen decoder fixture.
    h_vlm = config_hash({"fixture": asdict(cfg.fixture), "up": h_data})
    vlm = tokenizer = None
    if resume and "dataset" not in stages_run and not stale("vlm", h_vlm):
        try:
            vlm, tokenizer = load_vlm_artifact(out)
        except FileNotFoundError:
            vlm = None
    if vlm is None:
        vlm, tokenizer, fixture_log = pretrain_fixture(world, cfg.fixture, cfg.seed)
        save_vlm_artifact(out, vlm, tokenizer)
        meta.put("vlm", {"hash": h_vlm, "crc": ckpt.file_crc(out / "vlm.ckpt"),
                         "weights_crc": vlm.checksum(),
                         "gate": fixture_log["gate"],
                         "epoch_losses": fixture_log["epoch_losses"]})
        stages_run.append("vlm")
    if until == "vlm":
        return Artifacts(world, encoder, vlm, tokenizer), None

    # Stage 3: class embeddings.
    h_cls = config_hash({"embeddings": asdict(cfg.embeddings), "up": h_data})
    learner = None
    if resume and "dataset" not in stages_run and not stale("classes", h_cls):
        try:
            learner = load_learner_artifact(out)
        except FileNotFoundError:
            learner = None
    if learner is None:
        learner, gate_report = train_class_embeddings(world, cfg.embeddings, cfg.seed)
        save_learner_artifact(out, learner)
        write_csv(
            out / "classes_log.csv",
            ["epoch", "phase", "L_align", "L_class", "proto_acc"],
            [[r["epoch"], r["phase"], r["align"], r["class"], r["proto_acc"]]
             for r in learner.history_],
        )
        meta.put("classes", {
            "hash": h_cls, "crc": ckpt.file_crc(out / "classes.ckpt"),
            "accuracy": gate_report["accuracy"],
            "rare_recall": gate_report["rare_recall"],
        })
        stages_run.append("classes")
    if until == "classes":
        return Artifacts(world, encoder, vlm, tokenizer, learner), None

    # Stage 4: adapter.
    upstream_ran = bool({"dataset", "vlm", "classes"} & set(stages_run))
    h_adp = config_hash({
        "adapter": asdict(cfg.adapter), "up": [h_vlm, h_cls],
        "table": learner.table_.pair_token, "vlm_crc": vlm.checksum(),
    })
    adapter = None
    if resume and not upstream_ran and not stale("adapter", h_adp):
        try:
            adapter = load_adapter_artifact(out, cfg.adapter, learner.table_.pair_token)
        except FileNotFoundError:
            adapter = None
    if adapter is None:
        a = cfg.adapter
        adapter = VisualTokenAdapter(
            heads=a.heads, epochs=a.epochs, lr=a.lr, weight_decay=a.weight_decay,
            rec_weight=a.rec_weight, autoreg_weight=a.autoreg_weight,
            supervise=a.supervise, per_class_cap=a.per_class_cap,
            rare_boost=a.rare_boost, seed=cfg.seed,
        )
        adapter.fit(world, learner.table_, vlm, tokenizer)
        save_adapter_artifact(out, adapter, vlm.config.dim)
        meta.put("adapter", {"hash": h_adp, "crc": ckpt.file_crc(out / "adapter.ckpt"),
                             "history": adapter.history_})
        stages_run.append("adapter")

    arts = Artifacts(world, encoder, vlm, tokenizer, learner, adapter)
    if until == "adapter":
        return arts, None

    # Stage 5: evaluation report.
    h_eval = config_hash({"inference": asdict(cfg.inference), "up": h_adp})
    report = None
    if resume and not stages_run and not stale("eval", h_eval):
        try:
            report = json.loads((out / "report.json").read_text())
        except FileNotFoundError:
            report = None
    if report is None:
        inf = cfg.inference
        rows = {
            mode: evaluate(arts, mode, inf.k, inf.max_answer_len).to_dict()
            for mode in ("baseline", cfg.inference.mode)
        }
        report = {
            "modes": rows,
            "params": report_params(arts),
            "fixture_gate": meta.get("vlm").get("gate") if meta.get("vlm") else None,
        }
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        meta.put("eval", {"hash": h_eval})
        stages_run.append("eval")

    # Run bookkeeping stays out of the persisted report so resumed runs keep
    # byte-identical artifacts.
    report["stages_run"] = stages_run
    return arts, report


# ---------------------------------------------------------------------------
# ablation sweep and probes
# ---------------------------------------------------------------------------


def ablation_sweep(
    arts: Artifacts,
    k: int = 3,
    ks: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8, 9),
    out_dir=None,
    max_len: int = 3,
) -> dict:
    """All ablation arms at the configured k, plus a k-sweep of hint injection."""
    arms = {mode: evaluate(arts, mode, k, max_len) for mode in MODES}
    sweep_rows = []
    for kk in ks:
        rep = evaluate(arts, "hints-only", kk, max_len)
        sweep_rows.append(rep)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = ["arm", "k", "aggregate", "rare", "common", "detection", "trust"]
        rows = []
        for mode, rep in arms.items():
            rows.append([mode, rep.k, rep.aggregate_accuracy, rep.rare_accuracy,
                         rep.common_accuracy, rep.detection_accuracy, rep.trust_rate])
        for rep in sweep_rows:
            rows.append(["hints-only(k-sweep)", rep.k, rep.aggregate_accuracy,
                         rep.rare_accuracy, rep.common_accuracy,
                         rep.detection_accuracy, rep.trust_rate])
        write_csv(out / "sweep.csv", header, rows)
        write_bar_svg(
            out / "arms.svg",
            list(arms),
            [arms[m].aggregate_accuracy for m in arms],
            "Answer accuracy by arm",
        )
        xs = [rep.k for rep in sweep_rows]
        write_line_svg(
            out / "ksweep.svg",
            {
                "detection": (xs, [r.detection_accuracy for r in sweep_rows]),
                "vlm": (xs, [r.aggregate_accuracy for r in sweep_rows]),
                "trust": (xs, [r.trust_rate for r in sweep_rows]),
            },
            "Hint injection vs k",
        )
    return {"arms": arms, "ksweep": sweep_rows}


def _bbox_positions(meta, g: int) -> list[int]:
    r0, c0, r1, c1 = meta.bbox
    return [r * g + c for r in range(r0, r1) for c in range(c0, c1)]


def _probe_one(arts: Artifacts, meta, refined: bool):
    """Teacher-forced pass for one scene: per-layer probes and lens grid.

    The rank list covers the grounding layers only (upper half of the
    stack): at toy depth the lens first decodes class identity there, while
    early-layer ranks are noise that would drown the aggregate. The returned
    probability grid still spans every layer for the heatmap files.
    """
    grid = arts.world.grid(meta.scene_id)
    v = connector(arts.vlm, arts.encoder.encode(grid)).array
    if refined:
        v = arts.adapter.transform(v, arts.learner.table_)
    seq = build_qa(arts.tokenizer, v.shape[0], meta.question, meta.answer)
    result = forward(arts.vlm, Tensor(v), seq)
    object_pos = len(seq.ids) - len(arts.tokenizer.encode(meta.answer)) - 1
    probe = attention_probe(result, seq, object_pos)
    positions = _bbox_positions(meta, arts.world.manifest.g)
    lens = logit_lens(arts.vlm, result, positions)
    name_id = arts.tokenizer.index[meta.answer]
    prob_grid = lens[:, :, name_id]
    ranks = [
        token_rank(lens[layer, p], name_id)
        for layer in range(lens.shape[0] // 2, lens.shape[0])
        for p in range(lens.shape[1])
    ]
    return probe, prob_grid, ranks


def probe_report(arts: Artifacts, scene_ids: list[str], out_dir) -> dict:
    """Per-scene probe files plus test-split aggregates (baseline vs refined)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sid in scene_ids:
        meta = arts.world.manifest.scene_meta[sid]
        probe_b, grid_b, _ = _probe_one(arts, meta, refined=False)
        probe_r, grid_r, _ = _probe_one(arts, meta, refined=True)
        write_csv(
            out / f"{sid}_attention.csv",
            ["layer", "baseline", "refined"],
            [[i, probe_b[i], probe_r[i]] for i in range(len(probe_b))],
        )
        for tag, grid in (("baseline", grid_b), ("refined", grid_r)):
            write_csv_matrix(out / f"{sid}_lens_{tag}.csv", grid)
            write_pgm(out / f"{sid}_lens_{tag}.pgm", grid)

    ranks_b, ranks_r, mass_b, mass_r = [], [], [], []
    for meta in sorted(arts.world.scenes("test"), key=lambda s: s.scene_id):
        probe_b, _, rb = _probe_one(arts, meta, refined=False)
        probe_r, _, rr = _probe_one(arts, meta, refined=True)
        ranks_b.extend(rb)
        ranks_r.extend(rr)
        mass_b.append(float(np.mean(probe_b)))
        mass_r.append(float(np.mean(probe_r)))
    aggregate = {
        "median_rank_baseline": float(np.median(ranks_b)),
        "median_rank_refined": float(np.median(ranks_r)),
        "attention_mass_baseline": float(np.mean(mass_b)),
        "attention_mass_refined": float(np.mean(mass_r)),
    }
    write_csv(
        out / "aggregate.csv",
        ["metric", "baseline", "refined"],
        [
            ["median_lens_rank", aggregate["median_rank_baseline"],
             aggregate["median_rank_refined"]],
            ["attention_mass", aggregate["attention_mass_baseline"],
             aggregate["attention_mass_refined"]],
        ],
    )
    return aggregate
