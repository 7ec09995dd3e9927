"""Desk-scale adaptation trends, run with ``pytest --runslow``."""
import dataclasses
from pathlib import Path

import numpy as np
import pytest

from dadet.bsrwst.config import TrainConfig, apply_overrides
from dadet.bsrwst.data import generate_domain_pair
from dadet.bsrwst.trainloop import ABLATION_METHODS, train, trend_delta

SHIPPED_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy-adaptation.cfg"
SEEDS = (0, 1, 2)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    generate_domain_pair(root / "data", seed=0, counts=(400, 200, 200))
    shipped = apply_overrides(TrainConfig.from_file(SHIPPED_CONFIG), {"data.root": str(root / "data")})
    runs = {}
    for seed in SEEDS:
        config = apply_overrides(shipped, {"seed": seed, "detector.seed": seed})
        base = train(config, root / f"seed{seed}" / "source_only")
        runs[("source_only", seed)] = base
        adapt = apply_overrides(config, {"init_checkpoint": str(base.checkpoint)})
        for mode in ("st", "wst", "bsr_wst"):
            runs[(mode, seed)] = train(apply_overrides(adapt, {"mode": mode}), root / f"seed{seed}" / mode)
        naive = dataclasses.replace(
            apply_overrides(adapt, {"mode": "wst", "srrs.confidence_epsilon": 0.9}), ablation=ABLATION_METHODS["A"][1]
        )
        runs[("A", seed)] = train(naive, root / f"seed{seed}" / "A")
    return runs


def mean_final(runs, mode):
    return float(np.mean([runs[(mode, s)].final_eval.map for s in SEEDS]))


def mean_delta(runs, mode):
    return float(np.mean([trend_delta(runs[(mode, s)].out_dir) for s in SEEDS]))


def test_bsr_wst_beats_source_only(experiment):
    assert mean_final(experiment, "bsr_wst") >= mean_final(experiment, "source_only") + 0.05


def test_naive_self_training_degrades(experiment):
    assert mean_delta(experiment, "st") < 0.0


def test_weak_self_training_is_stable(experiment):
    assert mean_delta(experiment, "wst") >= -0.01


def test_srrs_weak_mask_at_least_naive(experiment):
    # variant F is the wst run
    assert mean_final(experiment, "wst") >= mean_final(experiment, "A")
