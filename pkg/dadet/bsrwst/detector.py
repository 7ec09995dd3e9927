"""Tiny one-stage anchor detector with a gradient reversal point between
the feature extractor F and the detection head C.

F is four conv blocks taking a 64x64 image to an 8x8 map. C predicts on
the 8x8 map and on a 4x4 map produced by one more strided block, three
anchor shapes per cell.
"""
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .boxops import AnchorSet, Box, Detection, decode_boxes, generate_anchors, nms_arrays
from .errors import DatasetError, InvalidInputError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class DetectorConfig:
    image_size: int = 64
    in_channels: int = 3
    num_classes: int = 3
    feature_channels: tuple = (16, 32, 64, 64)
    head_channels: int = 64
    grid_sizes: tuple = (8, 4)
    anchor_scales: tuple = (0.2, 0.4)
    aspect_ratios: tuple = (1.0, 2.0, 0.5)
    seed: int = 0

    def __post_init__(self):
        self.feature_channels = tuple(int(c) for c in self.feature_channels)
        self.grid_sizes = tuple(int(g) for g in self.grid_sizes)
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.aspect_ratios = tuple(float(r) for r in self.aspect_ratios)
        if len(self.feature_channels) != 4:
            raise InvalidInputError(f"Expected 4 feature blocks, got {len(self.feature_channels)}")
        if self.image_size // 8 != self.grid_sizes[0] or self.grid_sizes[0] // 2 != self.grid_sizes[1]:
            raise InvalidInputError(
                f"Grid sizes {self.grid_sizes} do not follow from image size {self.image_size} (stride 8 then 16)"
            )

    @property
    def anchors_per_cell(self) -> int:
        return len(self.aspect_ratios)

    @property
    def num_anchors(self) -> int:
        return sum(g * g for g in self.grid_sizes) * self.anchors_per_cell

    def anchors(self) -> AnchorSet:
        return generate_anchors(self.grid_sizes, self.anchor_scales, self.aspect_ratios)


class GradientReversal(torch.autograd.Function):
    """Identity forward; backward negates and scales the gradient by ``lambd``."""

    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def grad_reverse(x, lambd=1.0):
    if lambd < 0:
        raise InvalidInputError(f"Gradient reversal coefficient must be >= 0, got {lambd}")
    return GradientReversal.apply(x, lambd)


@dataclass
class RawOutput:
    class_logits: torch.Tensor
    box_offsets: torch.Tensor

    @property
    def class_probs(self) -> torch.Tensor:
        return torch.softmax(self.class_logits, dim=-1)

    @property
    def background_probs(self) -> torch.Tensor:
        return self.class_probs[..., 0]

    @property
    def num_anchors(self) -> int:
        return self.class_logits.shape[1]


def _conv_block(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1), nn.ReLU())


class TinyDetector(nn.Module):
    def __init__(self, config: Optional[DetectorConfig] = None):
        super().__init__()
        self.config = DetectorConfig() if config is None else config
        cfg = self.config
        c1, c2, c3, c4 = cfg.feature_channels
        self.features = nn.Sequential(
            _conv_block(cfg.in_channels, c1, 2),
            _conv_block(c1, c2, 2),
            _conv_block(c2, c3, 2),
            _conv_block(c3, c4, 1),
        )
        self.extra = _conv_block(c4, cfg.head_channels, 2)
        level_channels = (c4, cfg.head_channels)
        a = cfg.anchors_per_cell
        self.cls_heads = nn.ModuleList(
            [nn.Conv2d(c, a * (cfg.num_classes + 1), kernel_size=3, padding=1) for c in level_channels]
        )
        self.loc_heads = nn.ModuleList([nn.Conv2d(c, a * 4, kernel_size=3, padding=1) for c in level_channels])
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                    nn.init.zeros_(m.bias)

    def feature_parameters(self):
        return list(self.features.parameters())

    def head_parameters(self):
        return list(self.extra.parameters()) + list(self.cls_heads.parameters()) + list(self.loc_heads.parameters())

    def loc_head_parameters(self):
        return list(self.loc_heads.parameters())

    def check_images(self, images):
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if not isinstance(images, torch.Tensor) or images.dim() != 4 or tuple(images.shape[1:]) != expected:
            shape = tuple(images.shape) if hasattr(images, "shape") else type(images).__name__
            raise InvalidInputError(f"Expected image tensor of shape (B, {', '.join(map(str, expected))}), got {shape}")

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        self.check_images(images)
        return self.features(images)

    def head(self, features: torch.Tensor, reverse_at_junction: bool = False, lambd: float = 1.0) -> RawOutput:
        if reverse_at_junction:
            features = grad_reverse(features, lambd)
        levels = [features, self.extra(features)]
        k1 = self.config.num_classes + 1
        logits, offsets = [], []
        for x, cls_head, loc_head in zip(levels, self.cls_heads, self.loc_heads):
            b = x.shape[0]
            # (B, A*C, H, W) -> (B, H*W*A, C), matching the anchor order
            logits.append(cls_head(x).permute(0, 2, 3, 1).reshape(b, -1, k1))
            offsets.append(loc_head(x).permute(0, 2, 3, 1).reshape(b, -1, 4))
        return RawOutput(torch.cat(logits, dim=1), torch.cat(offsets, dim=1))

    def forward(self, images: torch.Tensor, reverse_at_junction: bool = False, lambd: float = 1.0) -> RawOutput:
        return self.head(self.extract(images), reverse_at_junction, lambd)


class DomainClassifier(nn.Module):
    """Two-layer domain head on spatially pooled F features, behind a GRL."""

    def __init__(self, in_channels=64, hidden=32, seed=0):
        super().__init__()
        self.layers = nn.Sequential(nn.Linear(in_channels, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for m in self.layers:
                if isinstance(m, nn.Linear):
                    nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                    nn.init.zeros_(m.bias)

    def forward(self, features: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
        pooled = features.mean(dim=(2, 3))
        return self.layers(grad_reverse(pooled, lambd)).squeeze(1)


@dataclass
class Prediction:
    """Per-image output: all ``n`` decoded detections (O) and the NMS survivors (O*)."""

    boxes: np.ndarray
    probs: np.ndarray
    final_indices: List[int] = field(default_factory=list)

    @cached_property
    def detections(self) -> List[Detection]:
        return [Detection(Box.from_array(b), p) for b, p in zip(self.boxes, self.probs)]

    @property
    def final(self) -> List[Detection]:
        dets = self.detections
        return [dets[i] for i in self.final_indices]


def predict(model: TinyDetector, images: torch.Tensor, anchors: AnchorSet, conf_thresh=0.05, nms_iou=0.45) -> List[Prediction]:
    with torch.no_grad():
        raw = model(images)
        probs = torch.softmax(raw.class_logits.double(), dim=-1).cpu().numpy()
        offsets = raw.box_offsets.double().cpu().numpy()
    if probs.shape[1] != len(anchors):
        raise InvalidInputError(f"Detector emits {probs.shape[1]} anchors but the anchor set has {len(anchors)}")
    out = []
    for b in range(probs.shape[0]):
        boxes = np.clip(decode_boxes(anchors.boxes, offsets[b]), 0.0, 1.0)
        classes = probs[b].argmax(axis=1)
        scores = probs[b][np.arange(len(classes)), classes]
        keep = nms_arrays(boxes, classes, scores, nms_iou, conf_thresh)
        out.append(Prediction(boxes, probs[b], keep))
    return out


def save_checkpoint(model: TinyDetector, path, metadata=None, extra_modules=None):
    """Write an ``.npz`` archive: a JSON header plus little-endian float32 arrays."""
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "byte_order": "little",
        "dtype": "float32",
        "config": asdict(model.config),
        "metadata": metadata or {},
    }
    arrays = {f"detector:{k}": v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}
    for prefix, module in (extra_modules or {}).items():
        arrays.update({f"{prefix}:{k}": v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()})
    raw_header = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=raw_header, **arrays)
    return path


def read_checkpoint_header(path) -> dict:
    with np.load(path) as data:
        return json.loads(bytes(data["__header__"]).decode("utf-8"))


def load_checkpoint(path) -> TinyDetector:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Checkpoint {path} does not exist")
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise InvalidInputError(
                f"Expected checkpoint format version {CHECKPOINT_FORMAT_VERSION}, got {header.get('format_version')}"
            )
        model = TinyDetector(DetectorConfig(**header["config"]))
        state = {
            k.split(":", 1)[1]: torch.from_numpy(data[k].astype(np.float32)) for k in data.files if k.startswith("detector:")
        }
    model.load_state_dict(state)
    return model


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack HWC float images in [0, 1] into a (B, C, H, W) tensor."""
    arr = np.stack([np.asarray(img) for img in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
