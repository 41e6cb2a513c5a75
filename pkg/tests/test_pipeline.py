import json
import shutil

import pytest

from gtune.config import ConfigError, load_config, toy_config_path
from gtune.evaluation import load_records
from gtune.pipeline import StageError, run_ablate, run_pipeline, stage_key

from conftest import FIXTURES

TOY = toy_config_path().parent


@pytest.fixture
def quick_cfg():
    return load_config("toy", {"tune.steps": 20, "eval.resamples": 200})


def test_stage_key_sensitivity():
    base = stage_key("tune", {"a": "d1"}, {"alpha": 0.1})
    assert base == stage_key("tune", {"a": "d1"}, {"alpha": 0.1})
    assert base != stage_key("eval", {"a": "d1"}, {"alpha": 0.1})
    assert base != stage_key("tune", {"a": "d2"}, {"alpha": 0.1})
    assert base != stage_key("tune", {"a": "d1"}, {"alpha": 1.0})


def test_rerun_is_fully_cached(quick_cfg, tmp_path):
    first = run_pipeline(quick_cfg, tmp_path / "out")
    assert not any(first.values())
    report = (tmp_path / "out" / "eval" / "report.txt").read_text()
    second = run_pipeline(quick_cfg, tmp_path / "out")
    assert all(second.values())
    assert (tmp_path / "out" / "eval" / "report.txt").read_text() == report
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert set(manifest) == {"curate", "atlas", "tune", "predict", "eval"}


def test_alpha_change_reruns_downstream_only(quick_cfg, tmp_path):
    cache = tmp_path / "cache"
    run_pipeline(quick_cfg, tmp_path / "a", cache)
    other = load_config("toy", {"tune.steps": 20, "eval.resamples": 200, "tune.alpha": 1.0})
    hits = run_pipeline(other, tmp_path / "b", cache)
    assert hits == {"curate": True, "atlas": True, "tune": False, "predict": False, "eval": False}
    # an eval-only change reuses the tuned codebook and heatmaps
    again = load_config("toy", {"tune.steps": 20, "eval.resamples": 300, "tune.alpha": 1.0})
    hits = run_pipeline(again, tmp_path / "c", cache)
    assert hits == {"curate": True, "atlas": True, "tune": True, "predict": True, "eval": False}


def test_stage_failure_names_stage(quick_cfg, tmp_path):
    gt = tmp_path / "gt.jsonl"
    gt.write_text('{"image_id": "toy-a", "class": "Pneumonia", "boxes": [{"x_min": 1}]}\n')
    cfg = load_config("toy", {"tune.steps": 5, "inputs.gt": str(gt)})
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, tmp_path / "out")
    assert info.value.stage == "predict" and "predict" in str(info.value)
    # the failed stage leaves nothing behind in the cache
    assert not list((tmp_path / "out" / ".cache").glob("predict-*"))
    assert not list((tmp_path / "out" / ".cache").glob(".predict-*"))


def test_missing_input_is_config_error(tmp_path):
    cfg = load_config("toy", {"inputs.gt": str(tmp_path / "missing.jsonl")})
    with pytest.raises(ConfigError):
        run_pipeline(cfg, tmp_path / "out")


def test_toy_end_to_end_outputs(quick_cfg, tmp_path):
    run_pipeline(quick_cfg, tmp_path)
    trace = [json.loads(line) for line in (tmp_path / "tune" / "trace.jsonl").read_text().splitlines()]
    assert len(trace) == 21 and {"L_div", "L_loc", "L"} <= set(trace[0])
    records = load_records(tmp_path / "predict" / "records.jsonl")
    assert len(records) == 4 and records[0].heatmap.shape == tuple(records[0].image_size)
    rows = [json.loads(line) for line in (tmp_path / "eval" / "report.jsonl").read_text().splitlines()]
    assert [r["class"] for r in rows] == ["Pneumonia", "Average"] and rows[0]["n"] == 4


def test_ablation_sweep(quick_cfg, tmp_path):
    cfg = dict(quick_cfg, ablate={"alphas": [0.0, 1.0]})
    runs = run_ablate(cfg, tmp_path)
    assert sorted(runs) == [0.0, 1.0]
    table = (tmp_path / "ablation.txt").read_text().splitlines()
    assert len(table) == 3 and table[1].startswith("0 ") and table[2].startswith("1 ")
    for label in ("alpha_0", "alpha_1"):
        assert (tmp_path / label / "eval" / "report.jsonl").is_file()


def test_ablation_rejects_negative_alpha(quick_cfg, tmp_path):
    with pytest.raises(ConfigError):
        run_ablate(dict(quick_cfg, ablate={"alphas": [-1.0]}), tmp_path)


def test_input_edit_invalidates(quick_cfg, tmp_path):
    ann = tmp_path / "ann.jsonl"
    shutil.copy(TOY / "annotations.jsonl", ann)
    cfg = load_config("toy", {"tune.steps": 5, "eval.resamples": 50, "inputs.annotations": str(ann)})
    run_pipeline(cfg, tmp_path / "out")
    with ann.open("a") as fh:
        fh.write(json.dumps({"image_id": "toy-a", "sentence": "No pneumonia.", "spans": [],
                             "pathology": "Pneumonia"}) + "\n")
    hits = run_pipeline(cfg, tmp_path / "out")
    assert hits["curate"] is False and hits["atlas"] is True
