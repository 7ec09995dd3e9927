"""VOC-style detection evaluation and result figures."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .boxops import Box, Detection, box_iou, boxes_to_array  # noqa: E402
from .errors import ConfigError, MissingColumnError  # noqa: E402
from .losses import bsr_curve  # noqa: E402
from .runlog import eval_rows, read_metrics  # noqa: E402

log = logging.getLogger("dadet.evalreport")

AP_STYLES = ("all_points", "11point")


@dataclass
class EvalResult:
    per_class_ap: Dict[int, Optional[float]] = field(default_factory=dict)
    map: Optional[float] = None
    tp: Dict[int, int] = field(default_factory=dict)
    fp: Dict[int, int] = field(default_factory=dict)
    fn: Dict[int, int] = field(default_factory=dict)
    num_gt: Dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "tp": {str(k): v for k, v in self.tp.items()},
            "fp": {str(k): v for k, v in self.fp.items()},
            "fn": {str(k): v for k, v in self.fn.items()},
            "num_gt": {str(k): v for k, v in self.num_gt.items()},
        }

    @classmethod
    def from_dict(cls, d) -> "EvalResult":
        def keyed(m):
            return {int(k): v for k, v in m.items()}

        return cls(keyed(d["per_class_ap"]), d["map"], keyed(d["tp"]), keyed(d["fp"]), keyed(d["fn"]), keyed(d["num_gt"]))


def average_precision(recall: np.ndarray, precision: np.ndarray, style: str = "all_points") -> float:
    if style == "11point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t]
            ap += (above.max() if above.size else 0.0) / 11.0
        return float(ap)
    if style != "all_points":
        raise ConfigError(f"ap_style must be one of {AP_STYLES}, got {style!r}")
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    # precision envelope, then integrate over recall steps
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_map(
    detections: Mapping[str, Sequence[Detection]],
    ground_truth: Mapping[str, Sequence[Tuple[Box, int]]],
    num_classes: Optional[int] = None,
    conf_thresh: float = 0.05,
    iou_thresh: float = 0.5,
    ap_style: str = "all_points",
) -> EvalResult:
    """Per-class AP and mAP over images keyed by id.

    Detections of a class are ranked by (score desc, image id, position).
    Each takes the highest-IoU ground truth of its class in its image; it is
    a true positive when that IoU reaches ``iou_thresh`` and the ground truth
    is still unclaimed, otherwise a false positive. Classes without ground
    truth are left out of the mean.
    """
    if num_classes is None:
        sizes = [d.num_classes for dets in detections.values() for d in dets]
        labels = [c for objs in ground_truth.values() for _, c in objs]
        num_classes = max(sizes + labels + [0])
    image_ids = sorted(set(detections) | set(ground_truth))
    result = EvalResult()
    for c in range(1, num_classes + 1):
        gt_boxes = {i: boxes_to_array([b for b, k in ground_truth.get(i, ()) if k == c]) for i in image_ids}
        claimed = {i: np.zeros(len(gt_boxes[i]), dtype=bool) for i in image_ids}
        npos = sum(len(b) for b in gt_boxes.values())
        ranked = []
        for i in image_ids:
            for j, d in enumerate(detections.get(i, ())):
                if d.predicted_class == c and d.score >= conf_thresh:
                    ranked.append((-d.score, i, j, d.box))
        ranked.sort(key=lambda r: r[:3])
        hits = np.zeros(len(ranked), dtype=bool)
        for k, (_, i, _, box) in enumerate(ranked):
            if len(gt_boxes[i]) == 0:
                continue
            overlaps = box_iou(box.as_array(), gt_boxes[i])[0]
            best = int(np.argmax(overlaps))
            if overlaps[best] >= iou_thresh and not claimed[i][best]:
                claimed[i][best] = True
                hits[k] = True
        tp = int(hits.sum())
        result.tp[c] = tp
        result.fp[c] = len(ranked) - tp
        result.fn[c] = npos - tp
        result.num_gt[c] = npos
        if npos == 0:
            result.per_class_ap[c] = None
            continue
        tp_cum = np.cumsum(hits)
        fp_cum = np.cumsum(~hits)
        recall = tp_cum / npos
        precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
        result.per_class_ap[c] = average_precision(recall, precision, ap_style)
    present = [ap for ap in result.per_class_ap.values() if ap is not None]
    if present:
        result.map = float(np.mean(present))
    else:
        log.warning("No ground truth in any image, mAP is undefined")
    return result


def write_results_table(results: Mapping[str, EvalResult], path, class_names: Mapping[int, str], extra=None):
    """CSV with one row per method, per-class AP columns and mAP."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = extra or {}
    extra_cols = sorted({k for v in extra.values() for k in v})
    header = ["method", *(class_names[c] for c in sorted(class_names)), "mAP", *extra_cols]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for method, res in results.items():
            aps = [res.per_class_ap.get(c) if res is not None else None for c in sorted(class_names)]
            row = [method, *aps, None if res is None else res.map, *(extra.get(method, {}).get(k) for k in extra_cols)]
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return path


def read_trend(metrics_path, column: str = "target_mAP") -> Tuple[List[int], List[float]]:
    """Epochs and metric values of the evaluation rows in a metrics file."""
    rows = read_metrics(metrics_path)
    if rows and ("epoch" not in rows[0] or column not in rows[0]):
        raise MissingColumnError("epoch" if "epoch" not in rows[0] else column, metrics_path)
    points = [(int(r["epoch"]), float(r[column])) for r in eval_rows(rows) if r[column] != ""]
    return [p[0] for p in points], [p[1] for p in points]


def _save(fig, out_dir: Path, stem: str) -> List[Path]:
    paths = []
    for ext in ("png", "svg"):
        p = out_dir / f"{stem}.{ext}"
        fig.savefig(p, bbox_inches="tight")
        paths.append(p)
    plt.close(fig)
    return paths


def plot_trends(runs: Mapping[str, object], out_dir, column: str = "target_mAP", overlay_name: str = "overlay") -> List[Path]:
    """Per-run metric-vs-epoch curves plus one overlay of all runs.

    ``runs`` maps a label to a run directory or metrics file.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series = {}
    for label, path in runs.items():
        epochs, values = read_trend(path, column)
        if len(epochs) < 2:
            log.warning(f"Run {label} has {len(epochs)} evaluation points, trend needs at least 2")
        series[label] = (epochs, values)
    paths = []
    for label, (epochs, values) in series.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(epochs, values, marker="o", label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(column)
        ax.set_title(label)
        paths += _save(fig, out_dir, f"{label}_trend")
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (epochs, values) in series.items():
        ax.plot(epochs, values, marker="o", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(column)
    ax.legend()
    paths += _save(fig, out_dir, overlay_name)
    return paths


def plot_bsr_shape(out_dir, t: float = 0.5, gammas: Sequence[float] = (0.0, 1.0, 2.0, 4.0, 5.0), points: int = 199) -> List[Path]:
    """Per-example BSR loss over background probability for several focal exponents."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p = np.linspace(0.0, 1.0, points + 2)[1:-1]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for gamma in gammas:
        ax.plot(p, bsr_curve(p, t, gamma), label=f"gamma={gamma:g}")
    ax.set_xlabel("background probability")
    ax.set_ylabel("loss")
    ax.set_title(f"t={t:g}")
    ax.legend()
    return _save(fig, out_dir, f"bsr_shape_t{t:g}")
