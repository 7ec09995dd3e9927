import csv
import json
import shutil

import numpy as np
import pytest
import torch

from dadet.bsrwst import trainloop
from dadet.bsrwst.config import MODES, apply_overrides, preset
from dadet.bsrwst.detector import load_checkpoint, read_checkpoint_header
from dadet.bsrwst.errors import ConfigError, DivergenceError
from dadet.bsrwst.losses import LossOutput
from dadet.bsrwst.pseudolabel import epsilon_schedule, pseudo_match
from dadet.bsrwst.runlog import read_events, read_metrics
from dadet.bsrwst.trainloop import (
    ABLATION_METHODS,
    CHECKPOINT_FILE,
    CONFIG_SNAPSHOT,
    Trainer,
    ablation_suite,
    evaluate_split,
    final_eval,
    sweep,
    train,
    trend_delta,
)


@pytest.fixture(scope="module")
def base_checkpoint(tmp_path_factory, tiny_dataset):
    config = apply_overrides(preset("smoke"), {"data.root": str(tiny_dataset)})
    return train(config, tmp_path_factory.mktemp("base")).checkpoint


def same_arrays(a, b):
    with np.load(a) as x, np.load(b) as y:
        return sorted(x.files) == sorted(y.files) and all(np.array_equal(x[k], y[k]) for k in x.files)


def non_eval(rows):
    return [r for r in rows if r["phase"] != "eval"]


@pytest.mark.parametrize("mode", MODES)
def test_every_mode_runs(mode, smoke_config, tmp_path):
    result = train(apply_overrides(smoke_config, {"mode": mode}), tmp_path)
    assert result.checkpoint == tmp_path / CHECKPOINT_FILE and result.checkpoint.is_file()
    assert (tmp_path / CONFIG_SNAPSHOT).is_file()
    assert read_checkpoint_header(result.checkpoint)["metadata"]["mode"] == mode
    rows = read_metrics(tmp_path)
    evals = [r for r in rows if r["phase"] == "eval"]
    assert len(evals) >= 2
    assert evals[0]["epoch"] == "0"
    assert result.final_eval is not None and result.final_eval.to_dict() == final_eval(tmp_path).to_dict()
    if mode == "source_only":
        assert {r["phase"] for r in non_eval(rows)} == {"base"}
    else:
        assert (tmp_path / "base.npz").is_file()
        assert {r["phase"] for r in non_eval(rows)} == {"base", "adapt"}
    assert (tmp_path / "checkpoints" / "epoch_000.npz").is_file()


def test_runs_are_reproducible(smoke_config, tmp_path):
    config = apply_overrides(smoke_config, {"mode": "bsr_wst"})
    train(config, tmp_path / "a")
    train(config, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert same_arrays(tmp_path / "a" / CHECKPOINT_FILE, tmp_path / "b" / CHECKPOINT_FILE)


def perturb_annotations(path):
    lines = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        for obj in rec["objects"]:
            obj["class_id"] = obj["class_id"] % 3 + 1
            obj["x_min"], obj["x_max"] = obj["x_min"] / 2, obj["x_max"] / 2
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n")


@pytest.mark.parametrize("mode", ["st", "wst", "bsr_wst", "dann"])
def test_target_labels_never_reach_training(mode, smoke_config, tiny_dataset, tmp_path):
    tainted = tmp_path / "tainted"
    shutil.copytree(tiny_dataset, tainted)
    for split in ("target_train", "target_test"):
        perturb_annotations(tainted / split / "annotations.jsonl")
    clean = train(apply_overrides(smoke_config, {"mode": mode}), tmp_path / "clean")
    dirty = train(apply_overrides(smoke_config, {"mode": mode, "data.root": str(tainted)}), tmp_path / "dirty")
    assert non_eval(read_metrics(clean.out_dir)) == non_eval(read_metrics(dirty.out_dir))
    assert same_arrays(clean.checkpoint, dirty.checkpoint)


def test_bsr_wst_window(smoke_config, tmp_path):
    config = apply_overrides(smoke_config, {"mode": "bsr_wst"})
    start, end = config.window_bounds()
    train(config, tmp_path)
    base_its = config.schedule.base_iterations
    rows = [r for r in read_metrics(tmp_path) if r["phase"] == "adapt"]
    assert len(rows) == end
    for r in rows:
        phase_it = int(r["iteration"]) - base_its - 1
        assert r["adv"] != ""
        if start <= phase_it < end:
            progress = (phase_it - start) / (end - 1 - start)
            assert float(r["epsilon"]) == pytest.approx(epsilon_schedule(progress), abs=1e-12)
        else:
            assert float(r["st_cls_pos"]) == 0.0 and float(r["st_cls_neg"]) == 0.0
            assert r["epsilon"] == "" and r["pseudo_count"] == ""


def test_fixed_epsilon_in_bsr_wst(smoke_config, tmp_path):
    config = apply_overrides(smoke_config, {"mode": "bsr_wst", "srrs.epsilon_mode": "fixed"})
    train(config, tmp_path)
    values = {r["epsilon"] for r in read_metrics(tmp_path) if r["phase"] == "adapt" and r["epsilon"]}
    assert values == {"0.8"}


def test_wst_leaves_box_head_untouched(smoke_config, base_checkpoint, tmp_path):
    config = apply_overrides(smoke_config, {"mode": "wst", "init_checkpoint": str(base_checkpoint)})
    result = train(config, tmp_path)
    before = load_checkpoint(base_checkpoint)
    after = load_checkpoint(result.checkpoint)
    for a, b in zip(before.loc_head_parameters(), after.loc_head_parameters()):
        assert torch.equal(a, b)
    assert not (tmp_path / "base.npz").exists()
    assert {r["phase"] for r in non_eval(read_metrics(tmp_path))} == {"adapt"}


def test_divergence_is_reported(smoke_config, tmp_path, monkeypatch):
    def nan_step(self, phase, phase_it, batch):
        nan = torch.tensor(float("nan"))
        return LossOutput(nan, {"cls_pos": nan}), None

    monkeypatch.setattr(Trainer, "_step", nan_step)
    with pytest.raises(DivergenceError) as info:
        train(smoke_config, tmp_path)
    assert info.value.iteration == 0
    diagnostics = [e for e in read_events(tmp_path) if e["event"] == "diagnostic"]
    assert diagnostics and diagnostics[0]["kind"] == "DivergenceError"


def test_pseudo_labels_match_with_match_iou(smoke_config, tmp_path, monkeypatch):
    seen = []

    def recording_match(anchors, labels, pos_iou=0.5):
        seen.append(pos_iou)
        return pseudo_match(anchors, labels, pos_iou)

    monkeypatch.setattr(trainloop, "pseudo_match", recording_match)
    config = apply_overrides(smoke_config, {"mode": "wst", "match_iou": 0.4, "srrs.delta": 0.7})
    train(config, tmp_path)
    assert seen and set(seen) == {0.4}


def test_train_restores_deterministic_mode(smoke_config, tmp_path, monkeypatch):
    inside = []
    step = Trainer._step

    def recording_step(self, phase, phase_it, batch):
        inside.append(torch.are_deterministic_algorithms_enabled())
        return step(self, phase, phase_it, batch)

    monkeypatch.setattr(Trainer, "_step", recording_step)
    before = torch.are_deterministic_algorithms_enabled()
    train(smoke_config, tmp_path)
    assert inside and all(inside)
    assert torch.are_deterministic_algorithms_enabled() == before


@pytest.mark.filterwarnings("error:Detected call of:UserWarning")
def test_steps_without_pseudo_labels_keep_scheduler_order(smoke_config, tmp_path, monkeypatch):
    monkeypatch.setattr(trainloop, "pseudo_labels_from_prediction", lambda *args, **kwargs: [])
    train(apply_overrides(smoke_config, {"mode": "wst"}), tmp_path)
    counts = {r["pseudo_count"] for r in read_metrics(tmp_path) if r["phase"] == "adapt"}
    assert counts == {"0"}


def test_dataset_class_mismatch(smoke_config, tmp_path):
    config = apply_overrides(smoke_config, {"detector.num_classes": 2})
    with pytest.raises(ConfigError):
        Trainer(config, tmp_path)


def test_evaluate_split(base_checkpoint, tiny_dataset, smoke_config):
    model = load_checkpoint(base_checkpoint)
    a = evaluate_split(model, tiny_dataset, "target_test", smoke_config.eval)
    b = evaluate_split(model, tiny_dataset, "target_test", smoke_config.eval)
    assert a.to_dict() == b.to_dict()
    assert set(a.num_gt) == {1, 2, 3}


def test_ablation_suite(smoke_config, base_checkpoint, tmp_path):
    config = apply_overrides(smoke_config, {"init_checkpoint": str(base_checkpoint)})
    summary = ablation_suite(config, tmp_path / "ablate")
    assert sorted(summary) == sorted(ABLATION_METHODS)
    assert all(s["status"] == "converged" for s in summary.values())
    with open(tmp_path / "ablate" / "comparison.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == list("ABCDEF")
    assert rows[5]["description"] == "SRRS+Weak Mask"
    assert (tmp_path / "ablate" / "plots" / "ablation.png").is_file()

    wst = train(apply_overrides(config, {"mode": "wst"}), tmp_path / "wst")
    assert (tmp_path / "ablate" / "F" / "metrics.csv").read_bytes() == (wst.out_dir / "metrics.csv").read_bytes()
    no_srrs = {r["epsilon"] for r in read_metrics(tmp_path / "ablate" / "A") if r["epsilon"]}
    assert no_srrs == {"0.9"}


def test_sweep(smoke_config, base_checkpoint, tmp_path):
    config = apply_overrides(smoke_config, {"mode": "bsr", "init_checkpoint": str(base_checkpoint)})
    summary = sweep(config, "t", [0.25, 0.5, 1.0], tmp_path)
    assert list(summary) == ["t_0.25", "t_0.5", "t_1"]
    assert summary["t_1"]["status"] == "failed"
    assert summary["t_0.5"]["status"] == "converged" and summary["t_0.5"]["eval"] is not None
    with open(tmp_path / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == list(summary)
    assert rows[2]["mAP"] == ""


def test_sweep_rejects_mismatched_parameter(smoke_config, tmp_path):
    with pytest.raises(ConfigError):
        sweep(apply_overrides(smoke_config, {"mode": "wst"}), "gamma", [1.0], tmp_path)
    with pytest.raises(ConfigError):
        sweep(apply_overrides(smoke_config, {"mode": "bsr"}), "epsilon", [0.5], tmp_path)
    with pytest.raises(ConfigError):
        sweep(smoke_config, "lr", [0.1], tmp_path)


def test_trend_delta(smoke_config, tmp_path):
    train(smoke_config, tmp_path)
    rows = [r for r in read_metrics(tmp_path) if r["phase"] == "eval"]
    assert trend_delta(tmp_path) == pytest.approx(float(rows[-1]["target_mAP"]) - float(rows[0]["target_mAP"]))
