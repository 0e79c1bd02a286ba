"""Pipeline staging, resume identity, reports, probes, CLI exit codes."""

import json

import numpy as np
import pytest

from rare_lens import cli
from rare_lens.config import config_from_dict
from rare_lens.harness import ablation_sweep, evaluate, probe_report, report_params, run_pipeline
from rare_lens.vis import quantize, read_csv_matrix, read_pgm

MINI_DOC = {
    "seed": 5,
    "dataset": {
        "n_classes": 3, "grid": 4, "d_v": 16, "d_t": 16,
        "rare_count": 1, "rare_n": 5, "common_n": 100, "test_per_class": 10,
    },
    "fixture": {
        "epochs": 12, "batch_scenes": 8, "lr": 2e-3,
        "vlm": {"layers": 2, "heads": 2, "dim": 32, "ffn_hidden": 512,
                 "context": 64, "d_v": 16},
    },
    "embeddings": {"dim": 32, "epochs_align": 5, "epochs_joint": 5, "lr": 1e-3},
    "adapter": {"heads": 2, "epochs": 2, "per_class_cap": 6},
    "inference": {"k": 2},
}


def mini_config():
    return config_from_dict(json.loads(json.dumps(MINI_DOC)))


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    arts, report = run_pipeline(mini_config(), out)
    return out, arts, report


ARTIFACT_FILES = ("vlm.ckpt", "vocab.json", "classes.ckpt", "adapter.ckpt", "report.json")


def test_pipeline_produces_all_artifacts(pipeline_run):
    out, arts, report = pipeline_run
    for name in ARTIFACT_FILES:
        assert (out / name).exists(), name
    assert (out / "dataset" / "manifest.json").exists()
    assert report["params"]["plugin_ratio"] < 0.10
    assert set(report["modes"]) == {"baseline", "full"}
    log_lines = (out / "classes_log.csv").read_text().splitlines()
    assert log_lines[0] == "epoch,phase,L_align,L_class,proto_acc"
    assert len(log_lines) == 1 + 5 + 5  # align epochs + joint epochs


def test_eval_report_internal_consistency(pipeline_run):
    _, arts, _ = pipeline_run
    rep = evaluate(arts, "full", k=2)
    assert abs(rep.aggregate_accuracy - rep.recomputed_aggregate()) < 1e-12
    for rate in (rep.aggregate_accuracy, rep.detection_accuracy):
        assert 0.0 <= rate <= 1.0
    assert rep.n_scenes == sum(rep.per_class_counts.values())


def test_report_params_formula_and_blob_sizes(pipeline_run):
    out, arts, _ = pipeline_run
    counts = report_params(arts)
    dim = arts.vlm.config.dim
    assert counts["adapter"] == 4 * dim * dim
    from rare_lens import ckpt

    _, blobs, _ = ckpt.load_adapter(out / "adapter.ckpt")
    assert sum(b.size for b in blobs.values()) == counts["adapter"]
    vlm_blob_total = sum(b.size for b in ckpt.load_vlm(out / "vlm.ckpt")[1].values())
    assert vlm_blob_total == counts["vlm"]


def test_resume_skips_completed_stages(pipeline_run):
    out, _, _ = pipeline_run
    arts, report = run_pipeline(mini_config(), out)
    assert report["stages_run"] == []


def test_resume_after_deleting_adapter_reruns_only_stages_4_and_5(pipeline_run):
    out, _, _ = pipeline_run
    before = (out / "adapter.ckpt").read_bytes()
    report_before = (out / "report.json").read_bytes()
    (out / "adapter.ckpt").unlink()
    (out / "report.json").unlink()
    arts, report = run_pipeline(mini_config(), out)
    assert report["stages_run"] == ["adapter", "eval"]
    assert (out / "adapter.ckpt").read_bytes() == before
    assert (out / "report.json").read_bytes() == report_before


def test_two_runs_bit_identical(pipeline_run, tmp_path):
    out, _, _ = pipeline_run
    other = tmp_path / "again"
    run_pipeline(mini_config(), other)
    for name in ("vlm.ckpt", "vocab.json", "classes.ckpt", "adapter.ckpt", "report.json"):
        assert (out / name).read_bytes() == (other / name).read_bytes(), name
    assert (out / "dataset" / "manifest.json").read_bytes() == (
        other / "dataset" / "manifest.json"
    ).read_bytes()


def test_config_change_reruns_downstream(pipeline_run, tmp_path):
    out, _, _ = pipeline_run
    clone = tmp_path / "clone"
    clone.mkdir()
    import shutil

    for item in out.iterdir():
        if item.is_dir():
            shutil.copytree(item, clone / item.name)
        else:
            shutil.copy(item, clone / item.name)
    doc = json.loads(json.dumps(MINI_DOC))
    doc["adapter"]["epochs"] = 1
    arts, report = run_pipeline(config_from_dict(doc), clone)
    assert report["stages_run"] == ["adapter", "eval"]


def test_ablation_sweep_outputs(pipeline_run, tmp_path):
    _, arts, _ = pipeline_run
    out = tmp_path / "sweep"
    result = ablation_sweep(arts, k=2, ks=(1, 2, 3), out_dir=out)
    assert set(result["arms"]) == {
        "baseline", "visual-only", "hints-only", "all-classes-hints", "full"
    }
    detections = [r.detection_accuracy for r in result["ksweep"]]
    assert all(b >= a - 1e-12 for a, b in zip(detections, detections[1:]))
    assert (out / "sweep.csv").exists()
    assert (out / "arms.svg").exists() and (out / "ksweep.svg").exists()
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("arm,k,")
    assert len(rows) == 1 + 5 + 3


def test_probe_report_files_round_trip(pipeline_run, tmp_path):
    _, arts, _ = pipeline_run
    out = tmp_path / "probe"
    sid = arts.world.manifest.test_ids[0]
    aggregate = probe_report(arts, [sid], out)
    grid = read_csv_matrix(out / f"{sid}_lens_baseline.csv")
    pgm = read_pgm(out / f"{sid}_lens_baseline.pgm")
    assert np.array_equal(pgm, quantize(grid))
    att_lines = (out / f"{sid}_attention.csv").read_text().splitlines()
    assert att_lines[0] == "layer,baseline,refined"
    assert len(att_lines) == 1 + arts.vlm.config.layers
    assert set(aggregate) == {
        "median_rank_baseline", "median_rank_refined",
        "attention_mass_baseline", "attention_mass_refined",
    }


def test_identity_adapter_probes_match_baseline(pipeline_run, tmp_path):
    _, arts, _ = pipeline_run
    from rare_lens.adapter import VisualTokenAdapter
    from rare_lens.harness import Artifacts, _probe_one

    identity = VisualTokenAdapter(heads=2, epochs=0, seed=0)
    identity.fit(arts.world, arts.learner.table_, arts.vlm, arts.tokenizer)
    swapped = Artifacts(
        arts.world, arts.encoder, arts.vlm, arts.tokenizer, arts.learner, identity
    )
    meta = arts.world.scenes("test")[0]
    probe_b, grid_b, ranks_b = _probe_one(swapped, meta, refined=False)
    probe_r, grid_r, ranks_r = _probe_one(swapped, meta, refined=True)
    assert np.array_equal(probe_b, probe_r)
    assert np.array_equal(grid_b, grid_r)
    assert ranks_b == ranks_r


def test_cli_exit_codes(tmp_path, pipeline_run):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert cli.main(["eval", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2

    out, _, _ = pipeline_run
    cfg_path = tmp_path / "mini.json"
    cfg_path.write_text(json.dumps(MINI_DOC))
    assert cli.main(["eval", "--config", str(cfg_path), "--out", str(out)]) == 0

    raw = bytearray((out / "classes.ckpt").read_bytes())
    raw[40] ^= 0xFF
    corrupted = tmp_path / "corrupted"
    import shutil

    shutil.copytree(out, corrupted)
    (corrupted / "classes.ckpt").write_bytes(bytes(raw))
    assert cli.main(["eval", "--config", str(cfg_path), "--out", str(corrupted)]) == 4


def test_cli_detect_emits_jsonl(tmp_path, pipeline_run, capsys):
    out, _, _ = pipeline_run
    cfg_path = tmp_path / "mini.json"
    cfg_path.write_text(json.dumps(MINI_DOC))
    assert cli.main(["detect", "--config", str(cfg_path), "--out", str(out)]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
    assert len(lines) == 30  # 3 classes x 10 test scenes
    first = json.loads(lines[0])
    assert set(first) == {"scene_id", "detected"}
    assert len(first["detected"]) == 2
    assert set(first["detected"][0]) == {"name", "score", "argmax_patch"}


def test_cli_seed_override_changes_artifacts(tmp_path, pipeline_run):
    out, _, _ = pipeline_run
    doc = json.loads(json.dumps(MINI_DOC))
    doc["dataset"]["n_classes"] = 2
    doc["dataset"]["rare_count"] = 0
    cfg_path = tmp_path / "s.json"
    cfg_path.write_text(json.dumps(doc))
    out2 = tmp_path / "seeded"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--seed", "77", "--out", str(out2)]) == 0
    meta = json.loads((out2 / "run_meta.json").read_text())
    assert meta["stages"]["dataset"]["hash"]
    doc["seed"] = 77
    from rare_lens.harness import run_pipeline as rp
    from rare_lens.config import config_from_dict as cfd
    arts, _ = rp(cfd(doc), out2, until="dataset")
    assert arts.world.manifest.seed == 77


def test_cli_gate_failure_exit_code(tmp_path):
    doc = json.loads(json.dumps(MINI_DOC))
    doc["fixture"]["epochs"] = 0
    cfg_path = tmp_path / "gate.json"
    cfg_path.write_text(json.dumps(doc))
    assert cli.main(["pretrain-vlm", "--config", str(cfg_path), "--out", str(tmp_path / "g")]) == 3
