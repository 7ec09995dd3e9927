"""Training runs for every adaptation mode, plus the ablation suite and sweeps.

A run has up to two phases. ``base`` trains the detector on labeled source
images only; it is skipped when ``init_checkpoint`` is given. ``adapt``
fine-tunes the base detector in the configured mode:

* ``st``       naive self-training on target pseudo-labels, hard negatives
* ``wst``      SRRS pseudo-labels with weak negative mining
* ``bsr``      source task loss plus background score regularization
* ``bsr_wst``  ``bsr`` throughout, WST inside the window, stop at window end
* ``dann``     source task loss plus a pooled-feature domain classifier

Pseudo-labels are regenerated from the current weights at every iteration.
"""
import dataclasses
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .boxops import match_anchors
from .config import BSR_MODES, SELF_TRAINING_MODES, AblationToggles, OptimConfig, TrainConfig, apply_overrides
from .dadet_logger import DadetLogger
from .data import BatchComposer, load_ground_truth, load_labeled_split, load_unlabeled_split, read_manifest
from .detector import (
    DomainClassifier,
    TinyDetector,
    images_to_tensor,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .errors import ConfigError, DadetError, DivergenceError
from .evalreport import EvalResult, evaluate_map, plot_trends, write_results_table
from .losses import LossOutput, adversarial_objectives, domain_loss, self_training_loss, task_loss
from .pseudolabel import epsilon_schedule, pseudo_labels_from_prediction, pseudo_match
from .runlog import RunLog, eval_rows, read_events, read_metrics

CONFIG_SNAPSHOT = "resolved_config.cfg"
CHECKPOINT_FILE = "checkpoint.npz"

ABLATION_METHODS = {
    "A": ("ST", AblationToggles(use_srrs=False, mask_all_negatives=False, weak_mask=False)),
    "B": ("SRRS", AblationToggles(use_srrs=True, mask_all_negatives=False, weak_mask=False)),
    "C": ("Mask", AblationToggles(use_srrs=False, mask_all_negatives=True, weak_mask=False)),
    "D": ("SRRS+Mask", AblationToggles(use_srrs=True, mask_all_negatives=True, weak_mask=False)),
    "E": ("Weak Mask", AblationToggles(use_srrs=False, mask_all_negatives=False, weak_mask=True)),
    "F": ("SRRS+Weak Mask", AblationToggles(use_srrs=True, mask_all_negatives=False, weak_mask=True)),
}
SWEEP_PARAMETERS = {"gamma": "bsr.gamma", "t": "bsr.t", "epsilon": "srrs.epsilon_fixed"}


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    run_log: RunLog
    final_eval: Optional[EvalResult]
    best_checkpoint: Optional[Path] = None


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed)


def evaluate_model(model, anchors, records, ground_truth, eval_cfg, num_classes, chunk=64) -> EvalResult:
    detections = {}
    for start in range(0, len(records), chunk):
        part = records[start : start + chunk]
        images = images_to_tensor([r.image.astype(np.float32) / 255.0 for r in part])
        for rec, pred in zip(part, predict(model, images, anchors, eval_cfg.conf_thresh, eval_cfg.nms_iou)):
            detections[rec.image_id] = pred.final
    return evaluate_map(detections, ground_truth, num_classes, eval_cfg.conf_thresh, eval_cfg.iou_thresh, eval_cfg.ap_style)


def evaluate_split(model, root, split, eval_cfg, num_classes=None) -> EvalResult:
    """Evaluate ``model`` on any split of a generated dataset."""
    num_classes = read_manifest(root)["num_classes"] if num_classes is None else num_classes
    records = load_unlabeled_split(root, split)
    gt = load_ground_truth(root, split)
    return evaluate_model(model, model.config.anchors(), records, gt, eval_cfg, num_classes)


@contextmanager
def deterministic_algorithms():
    """Enable torch deterministic algorithms, restoring the caller's setting on exit."""
    enabled = torch.are_deterministic_algorithms_enabled()
    warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(enabled, warn_only=warn_only)


class Trainer(DadetLogger):
    def __init__(self, config: TrainConfig, out_dir):
        DadetLogger.__init__(self)
        self.config = config.validate()
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config.to_file(self.out_dir / CONFIG_SNAPSHOT)
        seed_everything(config.seed)
        self.log_seed(config.seed)

        root = Path(config.data.root)
        self.manifest = read_manifest(root)
        self.num_classes = int(self.manifest["num_classes"])
        if self.num_classes != config.detector.num_classes:
            raise ConfigError(
                f"Dataset has {self.num_classes} classes but the detector is configured for {config.detector.num_classes}"
            )
        self.class_names = {int(k): v for k, v in self.manifest["class_names"].items()}
        if config.init_checkpoint:
            self.model = load_checkpoint(config.init_checkpoint)
            self.log.info(f"Initialised from {config.init_checkpoint}")
        else:
            self.model = TinyDetector(config.detector)
        self.anchors = self.model.config.anchors()
        self.domain_clf = None
        if config.mode == "dann":
            self.domain_clf = DomainClassifier(config.detector.feature_channels[-1], config.dann_hidden, config.seed)

        self.source = load_labeled_split(root, config.data.source_split)
        self.target = None
        if config.mode != "source_only":
            self.target = load_unlabeled_split(root, config.data.target_split)
        self.eval_records = load_unlabeled_split(root, config.data.eval_split)
        self.eval_gt = load_ground_truth(root, config.data.eval_split)

        self.run_log = RunLog(self.out_dir, config.seed, self.class_names)
        self.epoch = 0
        self.best_map = None
        self.best_checkpoint = None
        self.last_eval = None
        self._phase_length = 1

    # batches -----------------------------------------------------------

    def _composer(self, use_source: bool, use_target: bool, seed_offset: int) -> BatchComposer:
        return BatchComposer(
            self.source if use_source else None,
            self.target if use_target else None,
            self.config.data.half_size,
            seed=self.config.seed + seed_offset,
            augment_cfg=self.config.augment,
        )

    def _source_inputs(self, batch):
        images = images_to_tensor(batch.source_images)
        matches = [match_anchors(self.anchors, objs, self.config.match_iou) for objs in batch.source_objects]
        return images, matches

    # pseudo-labels ----------------------------------------------------

    def _epsilon(self, phase_it: int, toggles: AblationToggles) -> float:
        policy = self.config.srrs
        scheduled = policy.epsilon_mode == "scheduled" or (policy.epsilon_mode == "auto" and self.config.mode == "bsr_wst")
        if not toggles.use_srrs or not scheduled:
            return policy.epsilon(use_srrs=toggles.use_srrs)
        if self.config.mode == "bsr_wst" and policy.schedule_progress == "window":
            start, end = self.config.window_bounds()
            progress = (phase_it - start) / (end - 1 - start) if end - 1 > start else 0.0
        else:
            progress = phase_it / max(self._phase_length - 1, 1)
        return epsilon_schedule(progress)

    def _pseudo_matches(self, images, epsilon: float, toggles: AblationToggles):
        cfg = self.config
        preds = predict(self.model, images, self.anchors, cfg.eval.conf_thresh, cfg.eval.nms_iou)
        matches, scores = [], []
        for pred in preds:
            labels = pseudo_labels_from_prediction(pred, cfg.srrs, epsilon, toggles.use_srrs)
            scores.extend(pl.srrs for pl in labels)
            matches.append(pseudo_match(self.anchors, labels, cfg.match_iou))
        stats = {
            "pseudo_count": len(scores),
            "mean_srrs": float(np.mean(scores)) if scores else None,
            "epsilon": epsilon,
        }
        return matches, stats

    # one iteration ----------------------------------------------------

    def _step(self, phase: str, phase_it: int, batch):
        cfg = self.config
        mode = "source_only" if phase == "base" else cfg.mode
        pseudo = None
        lam = cfg.grl_lambda

        if mode == "source_only":
            images, matches = self._source_inputs(batch)
            return task_loss(self.model(images), matches, self.anchors, cfg.neg_ratio, cfg.neg_fallback), pseudo

        target_images = images_to_tensor(batch.target_images)

        if mode in SELF_TRAINING_MODES:
            toggles = cfg.toggles
            matches, pseudo = self._pseudo_matches(target_images, self._epsilon(phase_it, toggles), toggles)
            out = self_training_loss(self.model(target_images), matches, toggles.negatives, cfg.neg_ratio).renamed("st_")
            if cfg.st_use_source:
                images, src_matches = self._source_inputs(batch)
                out = task_loss(self.model(images), src_matches, self.anchors, cfg.neg_ratio, cfg.neg_fallback) + out
            return out, pseudo

        images, src_matches = self._source_inputs(batch)
        source_feats = self.model.extract(images)
        source_raw = self.model.head(source_feats)
        target_feats = self.model.extract(target_images)

        if mode == "dann":
            out = task_loss(source_raw, src_matches, self.anchors, cfg.neg_ratio, cfg.neg_fallback)
            return out + domain_loss(self.domain_clf(source_feats, lam), self.domain_clf(target_feats, lam)), pseudo

        target_rev = self.model.head(target_feats, reverse_at_junction=True, lambd=lam)
        out = adversarial_objectives(
            source_raw, src_matches, self.anchors, target_rev, cfg.bsr, cfg.neg_ratio, cfg.neg_fallback
        )
        if mode == "bsr_wst":
            start, end = cfg.window_bounds()
            if start <= phase_it < end:
                toggles = cfg.ablation
                matches, pseudo = self._pseudo_matches(target_images, self._epsilon(phase_it, toggles), toggles)
                target_raw = self.model.head(target_feats)
                out = out + self_training_loss(target_raw, matches, toggles.negatives, cfg.neg_ratio).renamed("st_")
            else:
                zero = torch.zeros((), dtype=out.total.dtype)
                out = out + LossOutput(zero, {"st_cls_pos": zero, "st_cls_neg": zero})
        return out, pseudo

    # phases -----------------------------------------------------------

    def _parameters(self):
        params = list(self.model.parameters())
        if self.domain_clf is not None:
            params += list(self.domain_clf.parameters())
        return params

    def _optimizer(self, optim: OptimConfig, iterations: int):
        opt = torch.optim.SGD(self._parameters(), lr=optim.lr, momentum=optim.momentum, weight_decay=optim.weight_decay)
        milestones = sorted({int(round(m * iterations)) for m in optim.milestones})
        sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=optim.decay)
        return opt, sched

    def _phase_plan(self):
        cfg = self.config
        s = cfg.schedule
        plan = []
        if not cfg.init_checkpoint:
            plan.append(("base", s.base_iterations, cfg.base_optim))
        if cfg.mode in SELF_TRAINING_MODES:
            plan.append(("adapt", s.self_training_iterations, cfg.st_optim))
        elif cfg.mode == "bsr_wst":
            plan.append(("adapt", cfg.window_bounds()[1], cfg.adapt_optim))
        elif cfg.mode != "source_only":
            plan.append(("adapt", s.adapt_iterations, cfg.adapt_optim))
        return plan

    def evaluate(self, iteration: int, phase: str) -> EvalResult:
        result = evaluate_model(
            self.model, self.anchors, self.eval_records, self.eval_gt, self.config.eval, self.num_classes
        )
        self.run_log.evaluation(iteration, self.epoch, phase, result)
        path = self.out_dir / "checkpoints" / f"epoch_{self.epoch:03d}.npz"
        save_checkpoint(self.model, path, {"epoch": self.epoch, "iteration": iteration, "phase": phase})
        self.run_log.checkpoint(iteration, self.epoch, path, "epoch")
        if result.map is not None and (self.best_map is None or result.map > self.best_map):
            # reporting only, never fed back into training
            self.best_map = result.map
            self.best_checkpoint = self.out_dir / "checkpoints" / "best.npz"
            save_checkpoint(self.model, self.best_checkpoint, {"epoch": self.epoch, "target_mAP": result.map})
        self.last_eval = result
        return result

    def _run_phase(self, phase, iterations, optim, global_it, tracked):
        cfg = self.config
        self._phase_length = iterations
        use_source = phase == "base" or cfg.mode not in SELF_TRAINING_MODES or cfg.st_use_source
        use_target = phase == "adapt"
        composer = self._composer(use_source, use_target, seed_offset=0 if phase == "base" else 1)
        opt, sched = self._optimizer(optim, iterations)
        self.log.info(f"Phase {phase}: {iterations} iterations in mode {cfg.mode}")
        if tracked:
            self.evaluate(global_it, phase)
        for phase_it in range(iterations):
            batch = composer.next_batch()
            out, pseudo = self._step(phase, phase_it, batch)
            values = out.values()
            if not out.is_finite():
                error = DivergenceError(global_it, values)
                self.run_log.diagnostic(global_it, error, phase=phase, losses=values)
                raise error
            opt.zero_grad(set_to_none=True)
            if out.total.requires_grad:
                out.total.backward()
            # no-op without gradients; keeps the LR schedule on the iteration count
            opt.step()
            sched.step()
            global_it += 1
            self.run_log.iteration(global_it, self.epoch, phase, values, pseudo)
            if tracked and (phase_it + 1) % cfg.schedule.eval_interval == 0:
                self.epoch += 1
                self.evaluate(global_it, phase)
        if tracked and iterations % cfg.schedule.eval_interval != 0:
            self.epoch += 1
            self.evaluate(global_it, phase)
        return global_it

    def run(self) -> TrainResult:
        with deterministic_algorithms():
            return self._run()

    def _run(self) -> TrainResult:
        cfg = self.config
        global_it = 0
        for phase, iterations, optim in self._phase_plan():
            tracked = phase == "adapt" or cfg.mode == "source_only"
            global_it = self._run_phase(phase, iterations, optim, global_it, tracked)
            if phase == "base" and cfg.mode != "source_only":
                base_path = save_checkpoint(self.model, self.out_dir / "base.npz", {"phase": "base"})
                self.run_log.checkpoint(global_it, self.epoch, base_path, "base")
        if self.last_eval is None:
            self.evaluate(global_it, "final")
        extra = {"domain_classifier": self.domain_clf} if self.domain_clf is not None else None
        final = save_checkpoint(
            self.model, self.out_dir / CHECKPOINT_FILE, {"mode": cfg.mode, "iterations": global_it}, extra
        )
        self.run_log.checkpoint(global_it, self.epoch, final, "final")
        return TrainResult(self.out_dir, final, self.run_log, self.last_eval, self.best_checkpoint)


def train(config: TrainConfig, out_dir) -> TrainResult:
    return Trainer(config, out_dir).run()


def final_eval(out_dir) -> Optional[EvalResult]:
    """Last evaluation recorded in a run directory."""
    if not (Path(out_dir) / "events.jsonl").is_file():
        return None
    evals = [e for e in read_events(out_dir) if e["event"] == "evaluation"]
    return EvalResult.from_dict(evals[-1]["result"]) if evals else None


def _run_variant(args):
    config, out_dir = args
    try:
        train(config, out_dir)
        return {"status": "converged"}
    except DivergenceError as e:
        return {"status": "not converged", "error": str(e)}
    except DadetError as e:
        return {"status": "failed", "error": str(e)}


def _run_all(jobs: Sequence, workers: int) -> List[dict]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_variant, jobs))
    return [_run_variant(j) for j in jobs]


def ensure_base(config: TrainConfig, out_dir) -> TrainConfig:
    """Train a shared source-only base unless the config already names one."""
    if config.init_checkpoint:
        return config
    base = train(dataclasses.replace(config, mode="source_only"), Path(out_dir) / "base")
    return dataclasses.replace(config, init_checkpoint=str(base.checkpoint))


def ablation_suite(base_config: TrainConfig, out_dir, jobs: int = 1, confidence_epsilon: float = 0.9) -> Dict[str, dict]:
    """Run the six self-training variants A-F from one shared base.

    Variants without SRRS threshold pseudo-labels by confidence at
    ``confidence_epsilon``; the others use ``srrs.epsilon_fixed``.
    """
    out_dir = Path(out_dir)
    base_config = ensure_base(dataclasses.replace(base_config, mode="wst").validate(), out_dir)
    base_config.to_file(out_dir / CONFIG_SNAPSHOT)
    work, names = [], []
    for name, (_, toggles) in ABLATION_METHODS.items():
        srrs = base_config.srrs if toggles.use_srrs else dataclasses.replace(base_config.srrs, confidence_epsilon=confidence_epsilon)
        cfg = dataclasses.replace(base_config, ablation=toggles, srrs=srrs)
        work.append((cfg, str(out_dir / name)))
        names.append(name)
    statuses = _run_all(work, jobs)
    summary = {}
    for name, status in zip(names, statuses):
        summary[name] = {"description": ABLATION_METHODS[name][0], **status, "eval": final_eval(out_dir / name)}
    _write_summary(summary, out_dir / "comparison.csv", base_config)
    plot_trends({n: out_dir / n for n in names if summary[n]["status"] == "converged"}, out_dir / "plots", overlay_name="ablation")
    return summary


def sweep(config: TrainConfig, parameter: str, values: Sequence[float], out_dir, jobs: int = 1) -> Dict[str, dict]:
    """One run per value of ``parameter`` from a shared base and seed.

    A run whose loss turns non-finite is kept in the summary as
    ``"not converged"``; a value the config rejects is ``"failed"``.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"Sweep parameter must be one of {sorted(SWEEP_PARAMETERS)}, got {parameter!r}")
    if parameter in ("gamma", "t") and config.mode not in BSR_MODES:
        raise ConfigError(f"Sweeping {parameter} needs a BSR mode, got {config.mode!r}")
    if parameter == "epsilon" and config.mode not in ("wst", "bsr_wst"):
        raise ConfigError(f"Sweeping epsilon needs a WST mode, got {config.mode!r}")
    out_dir = Path(out_dir)
    config = ensure_base(config.validate(), out_dir)
    config.to_file(out_dir / CONFIG_SNAPSHOT)
    key = SWEEP_PARAMETERS[parameter]
    rejected, work, labels = {}, [], []
    for value in values:
        overrides = {key: float(value)}
        if parameter == "epsilon":
            overrides["srrs.epsilon_mode"] = "fixed"
        label = f"{parameter}_{float(value):g}"
        labels.append(label)
        try:
            work.append((apply_overrides(config, overrides).validate(), str(out_dir / label)))
        except ConfigError as e:
            rejected[label] = {"status": "failed", "error": str(e)}
    statuses = iter(_run_all(work, jobs))
    summary = {}
    for label in labels:
        status = rejected.get(label) or next(statuses)
        result = final_eval(out_dir / label) if status["status"] == "converged" else None
        summary[label] = {"parameter": parameter, **status, "eval": result}
    _write_summary(summary, out_dir / "summary.csv", config)
    return summary


def _write_summary(summary: Mapping[str, dict], path, config: TrainConfig):
    manifest = read_manifest(config.data.root)
    class_names = {int(k): v for k, v in manifest["class_names"].items()}
    results = {name: s["eval"] for name, s in summary.items()}
    extra = {}
    for name, s in summary.items():
        extra[name] = {"status": s["status"]}
        if "description" in s:
            extra[name]["description"] = s["description"]
    return write_results_table(results, path, class_names, extra)


def trend_delta(out_dir) -> Optional[float]:
    """Final minus first evaluated target mAP of a run, from its metrics file."""
    rows = [r for r in eval_rows(read_metrics(out_dir)) if r["target_mAP"] != ""]
    if not rows:
        return None
    return float(rows[-1]["target_mAP"]) - float(rows[0]["target_mAP"])
