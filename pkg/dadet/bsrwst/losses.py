"""Training objectives.

Selection steps (hard/weak negative mining, low-3N selection) run on
detached numpy copies with a deterministic index tie-break; the losses
then gather from the live tensors so gradients only flow through the
selected entries.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .boxops import AnchorSet, MatchResult, encode_boxes
from .detector import RawOutput
from .errors import ConfigError, InvalidInputError

NEGATIVE_MODES = ("hard", "weak", "none")


@dataclass
class BsrConfig:
    t: float = 0.5
    gamma: float = 2.0
    selection_multiplier: int = 3
    detach_focal: bool = True
    eps_clamp: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.t < 1.0:
            raise ConfigError(f"BSR target t must lie in (0, 1), got {self.t}")
        if self.gamma < 0.0:
            raise ConfigError(f"BSR focal exponent gamma must be >= 0, got {self.gamma}")
        if int(self.selection_multiplier) != self.selection_multiplier or self.selection_multiplier < 1:
            raise ConfigError(f"selection_multiplier must be a positive integer, got {self.selection_multiplier}")
        if not 0.0 < self.eps_clamp < 0.5:
            raise ConfigError(f"eps_clamp must lie in (0, 0.5), got {self.eps_clamp}")
        self.selection_multiplier = int(self.selection_multiplier)


@dataclass
class LossOutput:
    total: torch.Tensor
    components: Dict[str, torch.Tensor] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def __add__(self, other: "LossOutput") -> "LossOutput":
        components = dict(self.components)
        for k, v in other.components.items():
            components[k] = components[k] + v if k in components else v
        counts = dict(self.counts)
        for k, v in other.counts.items():
            counts[k] = counts.get(k, 0) + v
        return LossOutput(self.total + other.total, components, counts)

    def renamed(self, prefix: str) -> "LossOutput":
        return LossOutput(
            self.total,
            {f"{prefix}{k}": v for k, v in self.components.items()},
            {f"{prefix}{k}": v for k, v in self.counts.items()},
        )

    def scaled(self, weight: float) -> "LossOutput":
        return LossOutput(self.total * weight, {k: v * weight for k, v in self.components.items()}, dict(self.counts))

    def values(self) -> Dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.values().values())


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=ref.dtype, device=ref.device)


def _numpy(values) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def _index(idx) -> torch.Tensor:
    return torch.as_tensor(np.asarray(idx, dtype=np.int64))


def hard_negative_mining(conf_losses, neg, k: int) -> np.ndarray:
    """The ``k`` entries of ``neg`` with the highest confidence loss, ties by index."""
    losses = _numpy(conf_losses)
    neg = np.asarray(neg, dtype=np.int64)
    k = min(int(k), neg.size)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((neg, -losses[neg]))
    return neg[order[:k]]


def weak_negative_mining(conf_losses, neg) -> np.ndarray:
    """The ``max(1, |neg| // 3)`` entries of ``neg`` with the lowest confidence loss."""
    losses = _numpy(conf_losses)
    neg = np.asarray(neg, dtype=np.int64)
    if neg.size == 0:
        return neg
    k = max(1, neg.size // 3)
    order = np.lexsort((neg, losses[neg]))
    return neg[order[:k]]


def _check_batch(raw: RawOutput, matches: Sequence):
    if raw.class_logits.dim() != 3 or raw.class_logits.shape[0] != len(matches):
        raise InvalidInputError(
            f"Expected one match per image, got {len(matches)} matches for logits of shape {tuple(raw.class_logits.shape)}"
        )


def task_loss(
    raw: RawOutput,
    matches: Sequence[MatchResult],
    anchors: AnchorSet,
    neg_ratio: int = 3,
    neg_fallback: int = 3,
) -> LossOutput:
    """Supervised multibox loss with 3:1 hard negative mining, normalised by |Pos|."""
    _check_batch(raw, matches)
    n = raw.num_anchors
    if n != len(anchors):
        raise InvalidInputError(f"Raw output has {n} anchors but the anchor set has {len(anchors)}")
    log_probs = F.log_softmax(raw.class_logits, dim=-1)
    bg_loss = -log_probs[..., 0]
    bg_np = _numpy(bg_loss)
    cls_pos = cls_neg = loc = _zero(raw.class_logits)
    num_pos = num_neg = 0
    for b, match in enumerate(matches):
        pos = match.pos_indices
        if pos.size:
            labels = match.labels(n)[pos]
            cls_pos = cls_pos - log_probs[b, _index(pos), _index(labels)].sum()
            targets = torch.as_tensor(encode_boxes(anchors.boxes[pos], match.gt_boxes()), dtype=raw.box_offsets.dtype)
            loc = loc + F.smooth_l1_loss(raw.box_offsets[b, _index(pos)], targets, reduction="sum")
            k = neg_ratio * pos.size
        else:
            k = neg_fallback
        neg = hard_negative_mining(bg_np[b], match.neg_candidate_indices, k)
        cls_neg = cls_neg + bg_loss[b, _index(neg)].sum()
        num_pos += int(pos.size)
        num_neg += int(neg.size)
    norm = float(max(num_pos, 1))
    components = {"cls_pos": cls_pos / norm, "cls_neg": cls_neg / norm, "loc": loc / norm}
    total = components["cls_pos"] + components["cls_neg"] + components["loc"]
    return LossOutput(total, components, {"pos": num_pos, "neg": num_neg})


def self_training_loss(
    raw: RawOutput,
    pseudo_matches: Sequence[Optional[MatchResult]],
    negatives: str = "weak",
    neg_ratio: int = 3,
) -> LossOutput:
    """Classification-only loss on pseudo-labelled images.

    ``negatives`` picks the background supervision: ``"hard"`` keeps the
    3|Pos| hard negatives (naive self-training), ``"weak"`` keeps the
    lowest-loss third of them, ``"none"`` uses no negatives at all. Images
    without pseudo-labels contribute nothing. The box-offset head never
    enters the graph.
    """
    if negatives not in NEGATIVE_MODES:
        raise ConfigError(f"negatives must be one of {NEGATIVE_MODES}, got {negatives!r}")
    _check_batch(raw, pseudo_matches)
    n = raw.num_anchors
    log_probs = F.log_softmax(raw.class_logits, dim=-1)
    bg_loss = -log_probs[..., 0]
    bg_np = _numpy(bg_loss)
    cls_pos = cls_neg = _zero(raw.class_logits)
    num_pos = num_hard = num_weak = 0
    for b, match in enumerate(pseudo_matches):
        if match is None or match.num_pos == 0:
            continue
        pos = match.pos_indices
        labels = match.labels(n)[pos]
        cls_pos = cls_pos - log_probs[b, _index(pos), _index(labels)].sum()
        num_pos += int(pos.size)
        if negatives == "none":
            continue
        neg = hard_negative_mining(bg_np[b], match.neg_candidate_indices, neg_ratio * pos.size)
        num_hard += int(neg.size)
        if negatives == "weak":
            neg = weak_negative_mining(bg_np[b], neg)
            num_weak += int(neg.size)
        cls_neg = cls_neg + bg_loss[b, _index(neg)].sum()
    norm = float(max(num_pos, 1))
    components = {"cls_pos": cls_pos / norm, "cls_neg": cls_neg / norm, "loc": _zero(raw.class_logits)}
    total = components["cls_pos"] + components["cls_neg"]
    return LossOutput(total, components, {"pos": num_pos, "neg": num_hard, "weak_neg": num_weak})


def wst_loss(raw: RawOutput, pseudo_matches: Sequence[Optional[MatchResult]], neg_ratio: int = 3) -> LossOutput:
    return self_training_loss(raw, pseudo_matches, negatives="weak", neg_ratio=neg_ratio)


def count_foreground(class_probs) -> int:
    """Number of rows whose argmax over K+1 classes is a foreground class."""
    probs = _numpy(class_probs)
    probs = probs.reshape(-1, probs.shape[-1])
    return int(np.count_nonzero(probs.argmax(axis=1) != 0))


def select_bsr_examples(background_probs, predicted_fg_count: int, multiplier: int = 3) -> np.ndarray:
    """Indices of the ``multiplier * N`` lowest background probabilities in the pooled batch."""
    p = _numpy(background_probs).ravel()
    k = min(multiplier * int(predicted_fg_count), p.size)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(p.size), p))
    return order[:k].astype(np.int64)


def focal_weights(background_probs: torch.Tensor, cfg: BsrConfig) -> torch.Tensor:
    if cfg.gamma == 0.0:
        return torch.ones_like(background_probs)
    w = (cfg.t - background_probs).abs().pow(cfg.gamma)
    return w.detach() if cfg.detach_focal else w


def bsr_loss(background_probs: torch.Tensor, cfg: Optional[BsrConfig] = None, weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Focal binary cross-entropy of background probabilities against ``t``, averaged.

    ``weights`` overrides the focal factor, which is otherwise computed from
    the clamped probabilities.
    """
    cfg = BsrConfig() if cfg is None else cfg
    if background_probs.numel() == 0:
        return _zero(background_probs)
    p = background_probs.clamp(cfg.eps_clamp, 1.0 - cfg.eps_clamp)
    w = focal_weights(p, cfg) if weights is None else weights
    terms = -cfg.t * w * torch.log(p) - (1.0 - cfg.t) * w * torch.log1p(-p)
    return terms.mean()


def bsr_curve(p, t=0.5, gamma=2.0, eps_clamp=1e-6) -> np.ndarray:
    """Per-example BSR loss as a numpy curve over background probability ``p``."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps_clamp, 1.0 - eps_clamp)
    w = np.abs(t - p) ** gamma
    return -t * w * np.log(p) - (1.0 - t) * w * np.log1p(-p)


def adversarial_loss(target_raw: RawOutput, cfg: Optional[BsrConfig] = None) -> LossOutput:
    """BSR over the pooled target batch: low-3N selection then the focal loss."""
    cfg = BsrConfig() if cfg is None else cfg
    probs = target_raw.class_probs
    flat = probs.reshape(-1, probs.shape[-1])
    n_fg = count_foreground(flat)
    selected = select_bsr_examples(flat[:, 0], n_fg, cfg.selection_multiplier)
    adv = bsr_loss(flat[_index(selected), 0], cfg)
    return LossOutput(adv, {"adv": adv}, {"fg": n_fg, "selected": int(selected.size)})


def adversarial_objectives(
    source_raw: RawOutput,
    source_matches: Sequence[MatchResult],
    anchors: AnchorSet,
    target_raw: Optional[RawOutput] = None,
    cfg: Optional[BsrConfig] = None,
    neg_ratio: int = 3,
    neg_fallback: int = 3,
) -> LossOutput:
    """``L_task(source) + L_adv(target)`` as one loss for a single backward pass.

    ``target_raw`` must come from a forward pass with the reversal active at
    the F/C junction: C then descends on ``L_adv`` while F ascends on it.
    """
    out = task_loss(source_raw, source_matches, anchors, neg_ratio=neg_ratio, neg_fallback=neg_fallback)
    if target_raw is None:
        return out
    return out + adversarial_loss(target_raw, cfg)


def domain_loss(source_logits: torch.Tensor, target_logits: torch.Tensor) -> LossOutput:
    """Binary domain cross-entropy, source labelled 0 and target 1."""
    logits = torch.cat([source_logits, target_logits])
    labels = torch.cat([torch.zeros_like(source_logits), torch.ones_like(target_logits)])
    loss = F.binary_cross_entropy_with_logits(logits, labels)
    return LossOutput(loss, {"domain": loss}, {})
