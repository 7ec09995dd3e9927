import hashlib
import json

import pytest

from dadet.bsrwst.cli import ARGS_SNAPSHOT, build_parser, main, resolve_config
from dadet.bsrwst.config import TrainConfig
from dadet.bsrwst.trainloop import CHECKPOINT_FILE, CONFIG_SNAPSHOT


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def last_error(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, tiny_dataset):
    out = tmp_path_factory.mktemp("cli_train")
    code = main(["-q", "train", "--preset", "smoke", "--data", str(tiny_dataset), "--mode", "wst", "--out", str(out)])
    assert code == 0
    return out


def test_generate_data_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["-q", "generate-data", "--seed", "2", "--counts", "3", "2", "2", "--out", str(tmp_path / name)]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    args = json.loads((tmp_path / "a" / ARGS_SNAPSHOT).read_text())
    assert args["seed"] == 2 and "out" not in args


def test_generate_data_without_shift(tmp_path):
    assert main(["-q", "generate-data", "--counts", "2", "2", "2", "--no-shift", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["shift"]["source"] == manifest["shift"]["target"]


def test_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("DADET_OUTPUT_ROOT", str(tmp_path))
    assert main(["-q", "generate-data", "--counts", "1", "1", "1"]) == 0
    assert (tmp_path / "data" / "manifest.json").is_file()


def test_train_artifacts(trained_run):
    for name in (CHECKPOINT_FILE, CONFIG_SNAPSHOT, ARGS_SNAPSHOT, "metrics.csv", "events.jsonl", "base.npz"):
        assert (trained_run / name).is_file()
    assert TrainConfig.from_file(trained_run / CONFIG_SNAPSHOT).mode == "wst"


def test_eval_is_idempotent(trained_run, tiny_dataset, tmp_path, capsys):
    argv = ["-q", "eval", "--preset", "smoke", "--data", str(tiny_dataset), "--checkpoint", str(trained_run / CHECKPOINT_FILE)]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    first = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    second = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert first == second and first["split"] == "target_test"
    assert (tmp_path / "a" / "eval.json").read_text() == (tmp_path / "b" / "eval.json").read_text()
    assert (tmp_path / "a" / "eval.csv").is_file()


def test_inspect_pseudolabels(trained_run, tiny_dataset, tmp_path):
    out = tmp_path / "labels.jsonl"
    argv = [
        "-q", "inspect-pseudolabels", "--preset", "smoke", "--data", str(tiny_dataset),
        "--checkpoint", str(trained_run / CHECKPOINT_FILE), "--epsilon", "0.3", "--out", str(out),
    ]
    assert main(argv) == 0
    records = [json.loads(line) for line in out.read_text().splitlines()]
    for rec in records:
        assert set(rec) == {"image_id", "box", "class_id", "srrs", "epsilon_used"}
        assert rec["image_id"].startswith("target_train/")
        assert rec["class_id"] >= 1 and rec["srrs"] >= 0.3 and rec["epsilon_used"] == 0.3
        assert len(rec["box"]) == 4


def test_inspect_pseudolabels_to_stdout(trained_run, tiny_dataset, capsys):
    argv = [
        "-q", "inspect-pseudolabels", "--preset", "smoke", "--data", str(tiny_dataset),
        "--checkpoint", str(trained_run / CHECKPOINT_FILE), "--no-srrs", "--epsilon", "0.2", "--limit", "2",
    ]
    assert main(argv) == 0
    for line in capsys.readouterr().out.splitlines():
        rec = json.loads(line)
        assert rec["image_id"] in ("target_train/00000", "target_train/00001")


def test_plot(trained_run, tmp_path):
    assert main(["-q", "plot", "--runs", f"wst={trained_run}", "--bsr-shape", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "wst_trend.png").is_file()
    assert (tmp_path / "overlay.svg").is_file()
    assert (tmp_path / "bsr_shape_t0.5.png").is_file()


def test_ablate_creates_variant_dirs(trained_run, tiny_dataset, tmp_path):
    argv = [
        "-q", "ablate", "--preset", "smoke", "--data", str(tiny_dataset),
        "--init-checkpoint", str(trained_run / "base.npz"), "--out", str(tmp_path),
    ]
    assert main(argv) == 0
    for name in "ABCDEF":
        assert (tmp_path / name / CHECKPOINT_FILE).is_file()
    assert (tmp_path / "comparison.csv").is_file()


def test_usage_errors_exit_2(tiny_dataset, tmp_path, capsys):
    assert main(["train", "--mode", "nonsense"]) == 2
    assert main([]) == 2
    code = main(["-q", "train", "--preset", "smoke", "--data", str(tiny_dataset), "--set", "bsr.t=1.5", "--out", str(tmp_path)])
    assert code == 2
    err = last_error(capsys)
    assert err["error"] == "config" and err["exit_code"] == 2
    assert main(["-q", "train", "--set", "garbage", "--out", str(tmp_path)]) == 2
    assert last_error(capsys)["error"] == "usage"
    assert main(["-q", "plot", "--out", str(tmp_path)]) == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    code = main(["-q", "train", "--preset", "smoke", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "run")])
    assert code == 1
    err = last_error(capsys)
    assert err["error"] == "dataset" and "manifest" in err["message"]


def test_config_layering(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[train]\nseed = 4\n\n[bsr]\ngamma = 1.0\nt = 0.25\n")
    args = build_parser().parse_args(
        ["train", "--preset", "smoke", "--config", str(cfg), "--seed", "9", "--set", "bsr.gamma=4.0", "--mode", "bsr"]
    )
    config = resolve_config(args)
    assert config.schedule.base_iterations == 8
    assert config.seed == 9 and config.detector.seed == 9
    assert config.bsr.t == 0.25 and config.bsr.gamma == 4.0
    assert config.mode == "bsr"


@pytest.mark.parametrize("name", ["paper-protocol", "reference-protocol"])
def test_protocol_preset_flag(name):
    args = build_parser().parse_args(["train", "--preset", name, "--mode", "bsr_wst"])
    config = resolve_config(args)
    assert config.schedule.base_iterations == 6000
    assert config.schedule.adapt_iterations == 3600
    assert config.mode == "bsr_wst"
