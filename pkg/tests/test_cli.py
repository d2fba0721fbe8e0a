import hashlib
import json
import shutil
import subprocess
import sys
from importlib import resources
from pathlib import Path

import pytest

from phraseforge.builder import PhraseTask
from phraseforge.cli import main
from phraseforge.evaluation import PredictionRecord
from phraseforge.jsonl import read_jsonl, write_json, write_jsonl
from phraseforge.scene_graph import CategoryVocabulary
from phraseforge.synthetic import WORLD_CATEGORIES, bitmap_from_boxes, grounding_world, world_records, world_table

FIXTURES = Path(str(resources.files("phraseforge") / "fixtures"))


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


def dataset_pipeline(out: Path, jobs: int = 1, seed: int = 0) -> dict:
    """sample -> phrases -> qc -> refine -> eval; returns produced file paths."""
    out.mkdir(parents=True, exist_ok=True)
    sg = FIXTURES / "scene_graphs.jsonl"
    f = {name: out / name for name in ("samples.jsonl", "tasks.jsonl", "vocab.json", "qc.jsonl", "qc_report.json",
                                       "refined.jsonl", "preds.jsonl", "report.json")}
    common = ["--seed", seed, "--jobs", jobs]
    assert run("sample", "--input", sg, "--output", f["samples.jsonl"], *common) == 0
    assert run("phrases", "--input", sg, "--samples", f["samples.jsonl"], "--output", f["tasks.jsonl"],
               "--vocab-out", f["vocab.json"], *common) == 0
    assert run("qc", "--input", FIXTURES / "annotations.jsonl", "--tasks", f["tasks.jsonl"], "--output", f["qc.jsonl"],
               "--report", f["qc_report.json"], *common) == 0
    assert run("refine", "--input", f["qc.jsonl"], "--tasks", f["tasks.jsonl"], "--vocab", f["vocab.json"],
               "--output", f["refined.jsonl"], *common) == 0
    tasks = [PhraseTask.from_json(r) for r in read_jsonl(f["refined.jsonl"])]
    write_jsonl(f["preds.jsonl"], (PredictionRecord(t.task_id, bitmap_from_boxes(t.vg_boxes, t.image_size)).to_json() for t in tasks))
    assert run("eval", "--tasks", f["refined.jsonl"], "--preds", f["preds.jsonl"], "--report", f["report.json"], *common) == 0
    return f


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipe")
    return dataset_pipeline(base / "a"), dataset_pipeline(base / "b"), dataset_pipeline(base / "c", jobs=2)


def _outputs(files):
    out = {}
    for name, p in files.items():
        out[name] = digest(p)
        m = Path(str(p) + ".manifest.json")
        if m.exists():
            out[name + ".manifest"] = digest(m)
    return out


def test_pipeline_byte_identical(pipeline_runs):
    a, b, c = (_outputs(r) for r in pipeline_runs)
    assert a == b
    assert a == c


def test_pipeline_content(pipeline_runs):
    f = pipeline_runs[0]
    tasks = list(read_jsonl(f["tasks.jsonl"]))
    refined = list(read_jsonl(f["refined.jsonl"]))
    assert len(tasks) > 40 and 0 < len(refined) < len(tasks)
    qc = json.loads(f["qc_report.json"].read_text())
    trusted = {w["worker_id"] for w in qc["workers"] if w["trusted"]}
    assert trusted == {"good0", "good1", "good2"}
    assert qc["tasks_dropped"] > 0
    for r in refined:
        assert r["instances"] and len({"small", "mid", "large"} & set(r["subset_tags"])) == 1
    report = json.loads(f["report.json"].read_text())
    assert report["overall"]["n_pairs"] == len(refined)
    assert report["meta"]["empty_pair_convention"]
    assert 0.5 < report["overall"]["mean_iou"] <= 1.0


def test_manifest_contents(pipeline_runs):
    f = pipeline_runs[0]
    m = json.loads(Path(str(f["qc.jsonl"]) + ".manifest.json").read_text())
    assert m["command"] == "qc" and m["seed"] == 0
    assert m["inputs"]["input"]["sha256"] == digest(FIXTURES / "annotations.jsonl")
    assert m["inputs"]["tasks"]["sha256"] == digest(f["tasks.jsonl"])
    assert m["config"]["qc"]["iou_coefficient"] == 0.8
    assert m["overrides"] == ["seed"]
    assert set(m["versions"]) == {"phraseforge", "numpy", "python"}


def test_seed_changes_output(tmp_path, pipeline_runs):
    sg = FIXTURES / "scene_graphs.jsonl"
    assert run("sample", "--input", sg, "--output", tmp_path / "s.jsonl", "--seed", 1) == 0
    assert digest(tmp_path / "s.jsonl") != digest(pipeline_runs[0]["samples.jsonl"])


def test_eval_toy_fixture(tmp_path):
    rc = run("eval", "--tasks", FIXTURES / "toy_tasks.jsonl", "--preds", FIXTURES / "toy_preds.jsonl", "--report", tmp_path / "r.json")
    assert rc == 0
    r = json.loads((tmp_path / "r.json").read_text())
    assert r["overall"]["mean_iou"] == 1.0 and r["overall"]["cum_iou"] == 1.0
    assert r["overall"]["pr"] == {"0.5": 1.0, "0.7": 1.0, "0.9": 1.0}
    assert r["subsets"]["single"]["n_pairs"] == 4


def test_config_overrides_recorded(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"eval": {"thresholds": [0.5, 0.75]}}))
    rc = run("eval", "--config", cfg, "--tasks", FIXTURES / "toy_tasks.jsonl", "--preds", FIXTURES / "toy_preds.jsonl",
             "--report", tmp_path / "r.json")
    assert rc == 0
    r = json.loads((tmp_path / "r.json").read_text())
    assert set(r["overall"]["pr"]) == {"0.5", "0.75"}
    assert r["meta"]["overrides"] == ["eval.thresholds"]


def _last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"qc": {"iou_coeficient": 0.5}}))
    rc = run("eval", "--config", cfg, "--tasks", FIXTURES / "toy_tasks.jsonl", "--preds", FIXTURES / "toy_preds.jsonl",
             "--report", tmp_path / "r.json")
    assert rc == 2
    assert "iou_coeficient" in _last_error(capsys)["message"]


def test_bad_config_type(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"qc": {"min_annotations": "ten"}}))
    assert run("sample", "--config", cfg, "--input", FIXTURES / "scene_graphs.jsonl", "--output", tmp_path / "s") == 2
    _last_error(capsys)


def test_missing_input_is_data_error(tmp_path, capsys):
    rc = run("sample", "--input", tmp_path / "nope.jsonl", "--output", tmp_path / "s.jsonl")
    assert rc == 1
    assert _last_error(capsys)["exit"] == 1


def test_malformed_data_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"image_id": 3, "width": 10}\n')
    assert run("sample", "--input", bad, "--output", tmp_path / "s.jsonl") == 1
    assert "height" in _last_error(capsys)["message"]


def test_missing_prediction_is_data_error(tmp_path, capsys):
    preds = tmp_path / "p.jsonl"
    preds.write_text((FIXTURES / "toy_preds.jsonl").read_text().splitlines()[0] + "\n")
    rc = run("eval", "--tasks", FIXTURES / "toy_tasks.jsonl", "--preds", preds, "--report", tmp_path / "r.json")
    assert rc == 1
    assert "missing prediction" in _last_error(capsys)["message"]


def test_missing_required_flag(tmp_path, capsys):
    assert run("qc", "--input", FIXTURES / "annotations.jsonl", "--output", tmp_path / "q") == 2
    assert "--tasks" in _last_error(capsys)["message"]


def test_usage_errors():
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_console_script_unknown_subcommand():
    exe = shutil.which("forge")
    cmd = [exe] if exe else [sys.executable, "-m", "phraseforge.cli"]
    proc = subprocess.run(cmd + ["frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage:" in proc.stderr


# ---------------------------------------------------------------- model stages


@pytest.fixture(scope="module")
def world_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    train_recs, train_dets = world_records(grounding_world(24, 1), 0)
    val_recs, val_dets = world_records(grounding_world(12, 2), 0)
    write_jsonl(d / "train.jsonl", train_recs)
    write_jsonl(d / "val.jsonl", val_recs)
    write_jsonl(d / "det.jsonl", train_dets + val_dets)
    world_table(8, 0).save(d / "emb.txt")
    write_json(d / "cfg.json", {
        "model": {"n_categories": 6, "n_attributes": 4, "embed_dim": 8, "hidden_dim": 8, "ensemble_hidden": 8,
                  "relation_channels": 2, "channel_scale": 2},
        "train": {"pretrain_epochs": 1, "joint_epochs": 1, "batch_size": 4},
    })
    write_json(d / "vocab.json", CategoryVocabulary(WORLD_CATEGORIES, (6, 5, 4, 3, 2, 1)).to_json())
    return d


def model_stages(d: Path, out: Path, jobs: int) -> dict:
    out.mkdir()
    c = ["--config", d / "cfg.json", "--seed", 3, "--jobs", jobs]
    f = {n: out / n for n in ("m.ckpt", "preds.jsonl", "report.json", "sub.json", "spreds.jsonl", "ch.npz")}
    assert run("train", "--input", d / "train.jsonl", "--val", d / "val.jsonl", "--detections", d / "det.jsonl",
               "--embeddings", d / "emb.txt", "--output", f["m.ckpt"], *c) == 0
    assert run("predict", "--input", d / "val.jsonl", "--detections", d / "det.jsonl", "--embeddings", d / "emb.txt",
               "--checkpoint", f["m.ckpt"], "--output", f["preds.jsonl"], *c) == 0
    assert run("eval", "--tasks", d / "val.jsonl", "--preds", f["preds.jsonl"], "--report", f["report.json"], *c) == 0
    assert run("substitute", "--input", d / "train.jsonl", "--detections", d / "det.jsonl", "--vocab", d / "vocab.json",
               "--output", f["sub.json"], *c) == 0
    assert run("predict", "--input", d / "val.jsonl", "--detections", d / "det.jsonl", "--substitute", f["sub.json"],
               "--vocab", d / "vocab.json", "--output", f["spreds.jsonl"], *c) == 0
    assert run("channels", "--input", d / "det.jsonl", "--output", f["ch.npz"], *c) == 0
    return f


def test_model_stages_deterministic(world_files, tmp_path):
    a = _outputs(model_stages(world_files, tmp_path / "a", 1))
    b = _outputs(model_stages(world_files, tmp_path / "b", 1))
    c = _outputs(model_stages(world_files, tmp_path / "c", 2))
    assert a == b == c


def test_model_stage_outputs(world_files, tmp_path):
    f = model_stages(world_files, tmp_path / "x", 1)
    m = json.loads(Path(str(f["m.ckpt"]) + ".manifest.json").read_text())
    assert m["threshold"] in [round(0.05 * k, 2) for k in range(1, 20)]
    assert m["param_count"] > 0
    preds = list(read_jsonl(f["preds.jsonl"]))
    assert len(preds) == 12 and preds[0]["rle"]["size"] == [32, 32]
    sub = json.loads(f["sub.json"].read_text())
    assert {e["source"] for e in sub["mapping"]} <= set(WORLD_CATEGORIES)
    import numpy as np

    with np.load(f["ch.npz"]) as z:
        assert z["cat/world_0"].shape == (6, 32, 32) and z["att/world_0"].shape == (4, 32, 32)


def test_model_config_required(world_files, tmp_path, capsys):
    rc = run("train", "--input", world_files / "train.jsonl", "--detections", world_files / "det.jsonl",
             "--output", tmp_path / "m.ckpt")
    assert rc == 2
    assert "n_categories" in _last_error(capsys)["message"]
