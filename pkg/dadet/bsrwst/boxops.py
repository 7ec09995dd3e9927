"""Box geometry: IoU, NMS, anchor grids, anchor matching and offset coding.

All coordinates are normalised ``(x_min, y_min, x_max, y_max)`` in image
space. Array helpers take ``(N, 4)`` float64 arrays; the object API wraps
them for single boxes.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, InvalidBoxError, InvalidInputError


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"Box coordinates must be finite, got {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise InvalidBoxError(f"Expected x_min <= x_max and y_min <= y_max, got {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clip(self, lo=0.0, hi=1.0) -> "Box":
        return Box(*(min(max(c, lo), hi) for c in self.as_tuple()))

    @classmethod
    def from_array(cls, arr) -> "Box":
        x_min, y_min, x_max, y_max = (float(v) for v in arr)
        return cls(x_min, y_min, x_max, y_max)


@dataclass(frozen=True, eq=False)
class Detection:
    """One detector output: a box plus its K+1 class distribution (0 = background).

    ``predicted_class`` is the argmax of ``class_probs``; ties go to the
    lowest class index.
    """

    box: Box
    class_probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.class_probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2:
            raise InvalidInputError(f"Expected a 1-d probability vector of length >= 2, got shape {probs.shape}")
        if np.any(probs < 0.0) or np.any(probs > 1.0) or abs(probs.sum() - 1.0) > 1e-6:
            raise InvalidInputError(f"Class probabilities must lie in [0, 1] and sum to 1, got {probs}")
        probs.setflags(write=False)
        object.__setattr__(self, "class_probs", probs)

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def score(self) -> float:
        return float(self.class_probs[self.predicted_class])

    @property
    def num_classes(self) -> int:
        return self.class_probs.size - 1

    def prob(self, class_id: int) -> float:
        return float(self.class_probs[class_id])


def _check_unit(name, value, lo_open=False, hi_open=False):
    lo_ok = value > 0.0 if lo_open else value >= 0.0
    hi_ok = value < 1.0 if hi_open else value <= 1.0
    if not (lo_ok and hi_ok):
        raise ConfigError(f"{name} must lie in {'(' if lo_open else '['}0, 1{')' if hi_open else ']'}, got {value}")


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def box_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two ``(N, 4)`` / ``(M, 4)`` arrays, shape ``(N, M)``."""
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(boxes1[:, None, 2], boxes2[None, :, 2]) - np.maximum(boxes1[:, None, 0], boxes2[None, :, 0])
    ih = np.minimum(boxes1[:, None, 3], boxes2[None, :, 3]) - np.maximum(boxes1[:, None, 1], boxes2[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = box_areas(boxes1)[:, None] + box_areas(boxes2)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def iou(a: Box, b: Box) -> float:
    iw = max(min(a.x_max, b.x_max) - max(a.x_min, b.x_min), 0.0)
    ih = max(min(a.y_max, b.y_max) - max(a.y_min, b.y_min), 0.0)
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms_arrays(boxes: np.ndarray, classes: np.ndarray, scores: np.ndarray, iou_thresh: float, conf_thresh: float) -> List[int]:
    """Greedy per-class suppression on arrays; returns kept indices.

    Background (class 0) entries and entries below ``conf_thresh`` are never
    kept. Candidates are visited by (score desc, index asc) and a candidate
    is dropped when it overlaps an already kept box of the same class by
    more than ``iou_thresh``.
    """
    _check_unit("iou_thresh", iou_thresh)
    _check_unit("conf_thresh", conf_thresh)
    idx = np.flatnonzero((classes != 0) & (scores >= conf_thresh))
    if idx.size == 0:
        return []
    order = idx[np.lexsort((idx, -scores[idx]))]
    overlaps = box_iou(boxes[order], boxes[order])
    same_class = classes[order][:, None] == classes[order][None, :]
    suppressed = np.zeros(order.size, dtype=bool)
    keep = []
    for k in range(order.size):
        if suppressed[k]:
            continue
        keep.append(int(order[k]))
        suppressed |= same_class[k] & (overlaps[k] > iou_thresh)
    return keep


def nms_indices(dets: Sequence[Detection], iou_thresh: float = 0.45, conf_thresh: float = 0.05) -> List[int]:
    if len(dets) == 0:
        _check_unit("iou_thresh", iou_thresh)
        _check_unit("conf_thresh", conf_thresh)
        return []
    boxes = boxes_to_array([d.box for d in dets])
    classes = np.array([d.predicted_class for d in dets])
    scores = np.array([d.score for d in dets])
    return nms_arrays(boxes, classes, scores, iou_thresh, conf_thresh)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.45, conf_thresh: float = 0.05) -> List[Detection]:
    return [dets[i] for i in nms_indices(dets, iou_thresh, conf_thresh)]


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """Fixed prior boxes, ordered level by level, then row-major cells, then shapes."""

    boxes: np.ndarray

    def __post_init__(self):
        boxes = np.array(self.boxes, dtype=np.float64).reshape(-1, 4)
        if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
            raise InvalidBoxError("Anchors must have positive width and height")
        boxes.setflags(write=False)
        object.__setattr__(self, "boxes", boxes)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def __getitem__(self, i) -> Box:
        return Box.from_array(self.boxes[i])

    def __iter__(self) -> Iterator[Box]:
        for i in range(len(self)):
            yield self[i]


def generate_anchors(grid_sizes=(8, 4), scales=(0.2, 0.4), aspect_ratios=(1.0, 2.0, 0.5)) -> AnchorSet:
    if len(grid_sizes) != len(scales):
        raise ConfigError(f"Expected one anchor scale per grid, got {len(scales)} scales for {len(grid_sizes)} grids")
    rows = []
    for grid, scale in zip(grid_sizes, scales):
        for y in range(grid):
            for x in range(grid):
                cx = (x + 0.5) / grid
                cy = (y + 0.5) / grid
                for ratio in aspect_ratios:
                    w = scale * math.sqrt(ratio)
                    h = scale / math.sqrt(ratio)
                    rows.append([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    # border anchors may extend past the image
    return AnchorSet(np.array(rows, dtype=np.float64))


@dataclass
class MatchResult:
    pos_indices: np.ndarray
    neg_candidate_indices: np.ndarray
    matched_gt: Dict[int, Tuple[Box, int]] = field(default_factory=dict)

    @property
    def num_pos(self) -> int:
        return int(self.pos_indices.size)

    def labels(self, num_anchors: int) -> np.ndarray:
        labels = np.zeros(num_anchors, dtype=np.int64)
        for i, (_, class_id) in self.matched_gt.items():
            labels[i] = class_id
        return labels

    def gt_boxes(self) -> np.ndarray:
        """Matched gt boxes aligned with ``pos_indices``."""
        return boxes_to_array([self.matched_gt[int(i)][0] for i in self.pos_indices])


def match_anchors(anchors: AnchorSet, gt: Sequence[Tuple[Box, int]], pos_iou: float = 0.5) -> MatchResult:
    _check_unit("pos_iou", pos_iou, lo_open=True, hi_open=True)
    n = len(anchors)
    if len(gt) == 0:
        return MatchResult(np.zeros(0, dtype=np.int64), np.arange(n, dtype=np.int64), {})
    overlaps = box_iou(anchors.boxes, boxes_to_array([b for b, _ in gt]))
    num_gt = overlaps.shape[1]
    assigned = np.full(n, -1, dtype=np.int64)
    best_gt = overlaps.argmax(axis=1)
    above = overlaps[np.arange(n), best_gt] >= pos_iou
    assigned[above] = best_gt[above]
    # every gt claims its own best anchor, highest overlap first; a gt that
    # overlaps no anchor at all claims nothing
    work = overlaps.copy()
    for _ in range(min(num_gt, n)):
        a, g = divmod(int(np.argmax(work)), num_gt)
        if work[a, g] <= 0.0:
            break
        assigned[a] = g
        work[:, g] = -1.0
        work[a, :] = -1.0
    pos = np.flatnonzero(assigned >= 0)
    neg = np.flatnonzero(assigned < 0)
    matched = {int(i): (gt[assigned[i]][0], int(gt[assigned[i]][1])) for i in pos}
    return MatchResult(pos, neg, matched)


def _centre_size(boxes):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Offsets ``(dcx / w_a, dcy / h_a, log(w_g / w_a), log(h_g / h_a))``."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _centre_size(anchors)
    gcx, gcy, gw, gh = _centre_size(gt)
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        raise InvalidBoxError("Cannot encode against an anchor with zero width or height")
    if np.any(gw <= 0.0) or np.any(gh <= 0.0):
        raise InvalidBoxError("Cannot encode a target box with zero width or height")
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _centre_size(anchors)
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        raise InvalidBoxError("Cannot decode against an anchor with zero width or height")
    cx = acx + offsets[:, 0] * aw
    cy = acy + offsets[:, 1] * ah
    w = aw * np.exp(offsets[:, 2])
    h = ah * np.exp(offsets[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_offsets(anchor: Box, gt: Box) -> np.ndarray:
    return encode_boxes(anchor.as_array(), gt.as_array())[0]


def decode_box(anchor: Box, offsets) -> Box:
    return Box.from_array(decode_boxes(anchor.as_array(), offsets)[0])
