"""Pseudo-label generation on unlabeled target images.

A final (post-NMS) detection r* is supported by every raw detection that
overlaps it with IoU >= delta, r* itself included. Its reliability score is
the mean over supports of IoU(r_i, r*) * P(c* | r_i), where c* is the class
r* predicts; supports are gathered regardless of their own argmax.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .boxops import AnchorSet, Box, Detection, MatchResult, box_iou, boxes_to_array, match_anchors
from .detector import Prediction
from .errors import ConfigError, InvalidInputError

log = logging.getLogger("dadet.pseudolabel")

EPSILON_MODES = ("auto", "fixed", "scheduled")
PROGRESS_SOURCES = ("window", "global")


def epsilon_schedule(progress: float) -> float:
    """Logistic threshold ``1 / (1 + exp(-3 p))`` for ``p`` in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        clamped = min(max(progress, 0.0), 1.0)
        log.warning(f"Schedule progress {progress} outside [0, 1], clamped to {clamped}")
        progress = clamped
    return 1.0 / (1.0 + math.exp(-3.0 * progress))


@dataclass
class SrrsPolicy:
    delta: float = 0.5
    epsilon_mode: str = "auto"
    epsilon_fixed: float = 0.8
    confidence_epsilon: float = 0.5
    schedule_progress: str = "window"

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}")
        if self.epsilon_mode not in EPSILON_MODES:
            raise ConfigError(f"epsilon_mode must be one of {EPSILON_MODES}, got {self.epsilon_mode!r}")
        if not 0.0 < self.epsilon_fixed < 1.0:
            raise ConfigError(f"epsilon_fixed must lie in (0, 1), got {self.epsilon_fixed}")
        if not 0.0 < self.confidence_epsilon < 1.0:
            raise ConfigError(f"confidence_epsilon must lie in (0, 1), got {self.confidence_epsilon}")
        if self.schedule_progress not in PROGRESS_SOURCES:
            raise ConfigError(f"schedule_progress must be one of {PROGRESS_SOURCES}, got {self.schedule_progress!r}")

    def epsilon(self, progress: Optional[float] = None, use_srrs: bool = True) -> float:
        if not use_srrs:
            return self.confidence_epsilon
        if self.epsilon_mode == "fixed" or (self.epsilon_mode == "auto" and progress is None):
            return self.epsilon_fixed
        if progress is None:
            raise ConfigError("A scheduled epsilon needs the current schedule progress")
        return epsilon_schedule(progress)


@dataclass(frozen=True)
class PseudoLabel:
    box: Box
    class_id: int
    srrs: float
    source_detection_index: int

    def __post_init__(self):
        if self.class_id < 1:
            raise InvalidInputError(f"Pseudo-labels must carry a foreground class, got {self.class_id}")

    def to_record(self, image_id: str, epsilon: float) -> dict:
        return {
            "image_id": image_id,
            "box": list(self.box.as_tuple()),
            "class_id": self.class_id,
            "srrs": self.srrs,
            "epsilon_used": epsilon,
        }


def _check_delta(delta):
    if not 0.0 < delta <= 1.0:
        raise ConfigError(f"delta must lie in (0, 1], got {delta}")


def srrs_arrays(final_boxes, final_classes, boxes, probs, delta: float = 0.5) -> np.ndarray:
    """Vectorised score for ``m`` finals against ``n`` raw detections."""
    _check_delta(delta)
    final_boxes = np.asarray(final_boxes, dtype=np.float64).reshape(-1, 4)
    final_classes = np.asarray(final_classes, dtype=np.int64).ravel()
    if final_boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    overlaps = box_iou(final_boxes, boxes)
    support = overlaps >= delta
    class_probs = np.asarray(probs, dtype=np.float64)[:, final_classes].T
    sums = np.where(support, overlaps * class_probs, 0.0).sum(axis=1)
    counts = support.sum(axis=1)
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def srrs(r_star: Detection, all_dets: Sequence[Detection], delta: float = 0.5) -> float:
    _check_delta(delta)
    if len(all_dets) == 0:
        return 0.0
    boxes = boxes_to_array([d.box for d in all_dets])
    probs = np.stack([d.class_probs for d in all_dets])
    return float(srrs_arrays(r_star.box.as_array(), [r_star.predicted_class], boxes, probs, delta)[0])


def _select(final_boxes, final_classes, scores, epsilon) -> List[PseudoLabel]:
    out = []
    for i, (box, cls, score) in enumerate(zip(final_boxes, final_classes, scores)):
        # boxes clipped to the image border can collapse to zero width or height
        if box[2] <= box[0] or box[3] <= box[1]:
            log.debug(f"Skipping degenerate final box {i}: {box.tolist()}")
            continue
        if score >= epsilon:
            out.append(PseudoLabel(Box.from_array(box), int(cls), float(score), i))
    return out


def generate_pseudo_labels(
    O: Sequence[Detection],
    O_star: Sequence[Detection],
    policy: Optional[SrrsPolicy] = None,
    epsilon: Optional[float] = None,
    use_srrs: bool = True,
) -> List[PseudoLabel]:
    """Keep each final detection whose score reaches ``epsilon``, in ``O_star`` order.

    With ``use_srrs`` off the score is the detection confidence instead.
    """
    policy = SrrsPolicy() if policy is None else policy
    if epsilon is None:
        epsilon = policy.epsilon(use_srrs=use_srrs)
    if len(O_star) == 0:
        return []
    final_boxes = boxes_to_array([d.box for d in O_star])
    final_classes = np.array([d.predicted_class for d in O_star])
    if use_srrs:
        boxes = boxes_to_array([d.box for d in O])
        probs = np.stack([d.class_probs for d in O])
        scores = srrs_arrays(final_boxes, final_classes, boxes, probs, policy.delta)
    else:
        scores = np.array([d.score for d in O_star])
    return _select(final_boxes, final_classes, scores, epsilon)


def pseudo_labels_from_prediction(
    pred: Prediction, policy: SrrsPolicy, epsilon: float, use_srrs: bool = True
) -> List[PseudoLabel]:
    """Array path of :func:`generate_pseudo_labels` for one predicted image."""
    idx = np.asarray(pred.final_indices, dtype=np.int64)
    if idx.size == 0:
        return []
    final_boxes = pred.boxes[idx]
    final_classes = pred.probs[idx].argmax(axis=1)
    if use_srrs:
        scores = srrs_arrays(final_boxes, final_classes, pred.boxes, pred.probs, policy.delta)
    else:
        scores = pred.probs[idx, final_classes]
    return _select(final_boxes, final_classes, scores, epsilon)


def pseudo_match(anchors: AnchorSet, labels: Sequence[PseudoLabel], pos_iou: float = 0.5) -> Optional[MatchResult]:
    if len(labels) == 0:
        return None
    return match_anchors(anchors, [(pl.box, pl.class_id) for pl in labels], pos_iou=pos_iou)
