"""Command-line entry point.

    rare-lens <command> --config FILE [--seed N] [--out DIR]

Commands: gen-data, pretrain-vlm, train-embeddings, train-adapter, eval,
detect, probe, sweep. Exit codes: 0 success, 2 config error, 3 gate
failure, 4 checksum or artifact-pairing error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import ConfigError, ContractError, GateError, PairingError, ShapeError
from .harness import ablation_sweep, probe_report, run_pipeline
from .hinting import top_k, score_map

_STAGE_OF = {
    "gen-data": "dataset",
    "pretrain-vlm": "vlm",
    "train-embeddings": "classes",
    "train-adapter": "adapter",
    "eval": "eval",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rare-lens",
        description="Rare-object enhancement pipeline for a frozen toy VLM",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (
        "gen-data", "pretrain-vlm", "train-embeddings", "train-adapter",
        "eval", "detect", "probe", "sweep",
    ):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", type=Path, default=None,
                         help="JSON config file (defaults apply when omitted)")
        cmd.add_argument("--seed", type=int, default=None, help="override config seed")
        cmd.add_argument("--out", type=Path, default=Path("runs/default"),
                         help="artifact directory")
        if name == "probe":
            cmd.add_argument("--scenes", nargs="*", default=None,
                             help="scene ids to render (default: first test scenes)")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def _run(args) -> int:
    cfg = _load(args)
    command = args.command
    if command in _STAGE_OF:
        arts, report = run_pipeline(cfg, args.out, until=_STAGE_OF[command])
        if command == "eval" and report is not None:
            print(json.dumps(report["modes"], indent=1, sort_keys=True))
        else:
            print(f"{command}: done (artifacts in {args.out})")
        return 0

    arts, _ = run_pipeline(cfg, args.out, until="adapter")
    if command == "detect":
        names = arts.learner.table_.class_names
        for meta in sorted(arts.world.scenes("test"), key=lambda s: s.scene_id):
            smap = score_map(
                arts.world.grid(meta.scene_id), arts.encoder,
                arts.learner.heads_, arts.learner.table_,
            )
            det = top_k(smap, cfg.inference.k, names)
            print(json.dumps({
                "scene_id": meta.scene_id,
                "detected": [
                    {"name": n, "score": s, "argmax_patch": int(smap.argmax_patch[c])}
                    for n, c, s in zip(det.names, det.class_ids, det.scores)
                ],
            }, sort_keys=True))
        return 0
    if command == "probe":
        scene_ids = args.scenes
        if not scene_ids:
            scene_ids = [m.scene_id for m in arts.world.scenes("test")[:4]]
        aggregate = probe_report(arts, scene_ids, Path(args.out) / "probe")
        print(json.dumps(aggregate, indent=1, sort_keys=True))
        return 0
    if command == "sweep":
        result = ablation_sweep(
            arts, k=cfg.inference.k, out_dir=args.out,
            max_len=cfg.inference.max_answer_len,
        )
        for mode, rep in result["arms"].items():
            print(f"{mode}: aggregate={rep.aggregate_accuracy:.3f} "
                  f"rare={rep.rare_accuracy} detection={rep.detection_accuracy:.3f}")
        return 0
    raise ConfigError(f"unknown command {command!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GateError as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return 3
    except PairingError as exc:
        print(f"checksum/pairing error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
