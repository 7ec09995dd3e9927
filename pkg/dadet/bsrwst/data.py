"""Procedural source/target shape datasets and batch composition.

Layout on disk::

    <root>/manifest.json
    <root>/<split>/images/00000.png
    <root>/<split>/annotations.jsonl

Every image is rendered from a generator seeded by ``(seed, split, index)``
so a dataset is reproducible image by image. Target splits are loaded for
training as :class:`TargetRecord`, which has no label fields at all; their
annotations are only read back through :func:`load_ground_truth` for
evaluation.
"""
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .boxops import Box, box_iou
from .dadet_logger import DadetLogger
from .errors import ConfigError, DatasetError, InvalidBoxError

DATASET_FORMAT_VERSION = 1
SPLITS = ("source", "target_train", "target_test")
SPLIT_CODES = {"source": 0, "target_train": 1, "target_test": 2}
CLASS_NAMES = {1: "disc", 2: "square", 3: "triangle"}
PALETTES = ("natural", "warm", "cool", "grayscale", "inverted")
TEXTURES = ("flat", "hatched")
BACKGROUNDS = ("light", "dark", "gradient")
MIN_OBJECT_AREA = 0.005


@dataclass
class DomainStyle:
    palette: str = "natural"
    texture: str = "flat"
    outline: int = 0
    clutter: float = 0.0
    noise: float = 0.02
    background: str = "light"

    def __post_init__(self):
        if self.palette not in PALETTES:
            raise ConfigError(f"palette must be one of {PALETTES}, got {self.palette!r}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        if self.outline < 0 or self.clutter < 0 or self.noise < 0:
            raise ConfigError("outline, clutter and noise must be non-negative")
        self.outline = int(self.outline)


@dataclass
class DomainShiftConfig:
    source: DomainStyle = field(default_factory=DomainStyle)
    target: DomainStyle = field(
        default_factory=lambda: DomainStyle(
            palette="warm", texture="hatched", outline=1, clutter=3.0, noise=0.06, background="gradient"
        )
    )

    @property
    def is_shifted(self) -> bool:
        return self.source != self.target

    @classmethod
    def from_dict(cls, d) -> "DomainShiftConfig":
        return cls(DomainStyle(**d["source"]), DomainStyle(**d["target"]))


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    box: Box
    color: Tuple[int, int, int]


@dataclass(frozen=True)
class SceneSpec:
    image_size: int
    objects: Tuple[ObjectSpec, ...]
    seed: Tuple[int, int, int]


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), SPLIT_CODES[split], int(index)])


def sample_scene(rng: np.random.Generator, image_size=64, num_classes=3, max_objects=5, seed=(0, 0, 0)) -> SceneSpec:
    """1 to ``max_objects`` shapes on the pixel grid, pairwise IoU at most 0.1."""
    target_count = int(rng.integers(1, max_objects + 1))
    placed: List[ObjectSpec] = []
    for _ in range(target_count * 20):
        if len(placed) == target_count:
            break
        side = rng.uniform(0.15, 0.4)
        aspect = rng.uniform(0.75, 1.33)
        w = max(int(round(side * math.sqrt(aspect) * image_size)), 4)
        h = max(int(round(side / math.sqrt(aspect) * image_size)), 4)
        w, h = min(w, image_size), min(h, image_size)
        x0 = int(rng.integers(0, image_size - w + 1))
        y0 = int(rng.integers(0, image_size - h + 1))
        class_id = int(rng.integers(1, num_classes + 1))
        color = tuple(int(c) for c in rng.integers(40, 220, size=3))
        box = Box(x0 / image_size, y0 / image_size, (x0 + w) / image_size, (y0 + h) / image_size)
        if placed:
            others = np.array([o.box.as_tuple() for o in placed])
            if box_iou(box.as_array(), others).max() > 0.1:
                continue
        placed.append(ObjectSpec(class_id, box, color))
    return SceneSpec(image_size, tuple(placed), tuple(seed))


def _apply_palette(img: np.ndarray, palette: str) -> np.ndarray:
    x = img.astype(np.float64)
    if palette == "warm":
        x = x @ np.array([[1.1, 0.1, 0.0], [0.1, 0.9, 0.0], [0.0, 0.1, 0.7]]).T + np.array([20.0, 5.0, -10.0])
    elif palette == "cool":
        x = x @ np.array([[0.7, 0.1, 0.0], [0.0, 0.9, 0.1], [0.0, 0.1, 1.1]]).T + np.array([-10.0, 5.0, 20.0])
    elif palette == "grayscale":
        x = np.repeat((x @ np.array([0.299, 0.587, 0.114]))[..., None], 3, axis=-1)
    elif palette == "inverted":
        x = 255.0 - x
    return np.clip(x, 0, 255)


def _background(style: DomainStyle, size: int) -> np.ndarray:
    if style.background == "light":
        return np.full((size, size, 3), (225.0, 225.0, 215.0))
    if style.background == "dark":
        return np.full((size, size, 3), (45.0, 45.0, 55.0))
    ramp = np.linspace(60.0, 200.0, size)[:, None, None]
    return np.broadcast_to(ramp * np.array([1.0, 0.95, 0.85]), (size, size, 3)).copy()


def _shape_xy(class_id: int, px):
    x0, y0, x1, y1 = px
    if class_id == 3:
        return [((x0 + x1) / 2, y0), (x1, y1), (x0, y1)]
    return [x0, y0, x1, y1]


def _draw_shape(draw, class_id, px, **kwargs):
    xy = _shape_xy(class_id, px)
    if class_id == 1:
        draw.ellipse(xy, **kwargs)
    elif class_id == 2:
        draw.rectangle(xy, **kwargs)
    else:
        draw.polygon(xy, **kwargs)


def render_scene(scene: SceneSpec, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """Render one scene to an (H, W, 3) uint8 array."""
    size = scene.image_size
    canvas = Image.fromarray(_background(style, size).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.poisson(style.clutter))):
        pts = [tuple(int(v) for v in rng.integers(0, size, size=2)) for _ in range(3)]
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))
        draw.line(pts, fill=color, width=int(rng.integers(1, 3)))
    for obj in scene.objects:
        # pixel rectangle [x0, x1) in PIL's inclusive convention
        b = obj.box
        px = (b.x_min * size, b.y_min * size, b.x_max * size - 1, b.y_max * size - 1)
        mask = Image.new("L", (size, size), 0)
        _draw_shape(ImageDraw.Draw(mask), obj.class_id, px, fill=255)
        layer = Image.new("RGB", (size, size), obj.color)
        if style.texture == "hatched":
            hatch = ImageDraw.Draw(layer)
            stripe = tuple(c // 2 for c in obj.color)
            for k in range(-size, size, 4):
                hatch.line([(k, 0), (k + size, size)], fill=stripe, width=1)
        canvas.paste(layer, (0, 0), mask)
        if style.outline > 0:
            _draw_shape(draw, obj.class_id, px, outline=(20, 20, 20), width=style.outline)
    img = _apply_palette(np.asarray(canvas), style.palette)
    if style.noise > 0:
        img = img + rng.normal(0.0, style.noise * 255.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _annotation(file: str, scene: SceneSpec) -> dict:
    return {
        "file": file,
        "width": scene.image_size,
        "height": scene.image_size,
        "objects": [
            {"class_id": o.class_id, "x_min": o.box.x_min, "y_min": o.box.y_min, "x_max": o.box.x_max, "y_max": o.box.y_max}
            for o in scene.objects
        ],
    }


def _render_index(args):
    seed, scene_split, index, style, image_size, num_classes = args
    rng = scene_rng(seed, scene_split, index)
    scene = sample_scene(rng, image_size, num_classes, seed=(seed, SPLIT_CODES[scene_split], index))
    return scene, render_scene(scene, style, rng)


class DatasetGenerator(DadetLogger):
    def __init__(
        self,
        root,
        seed=0,
        counts=(500, 200, 200),
        shift: Optional[DomainShiftConfig] = None,
        image_size=64,
        num_classes=3,
        shared_target_split=False,
        jobs=1,
    ):
        DadetLogger.__init__(self)
        self.root = Path(root)
        self.seed = int(seed)
        self.counts = dict(zip(SPLITS, (int(c) for c in counts)))
        if len(tuple(counts)) != 3 or any(c < 1 for c in self.counts.values()):
            raise ConfigError(f"Expected three split counts >= 1, got {tuple(counts)}")
        self.shift = DomainShiftConfig() if shift is None else shift
        self.image_size = int(image_size)
        self.num_classes = int(num_classes)
        self.shared_target_split = bool(shared_target_split)
        if self.shared_target_split:
            self.counts["target_test"] = self.counts["target_train"]
        self.jobs = max(int(jobs), 1)
        self.log_seed(self.seed)
        if not self.shift.is_shifted:
            self.log.info("Source and target styles are identical, generating a zero-shift pair")

    def _jobs_for(self, split):
        style = self.shift.source if split == "source" else self.shift.target
        scene_split = "target_train" if split == "target_test" and self.shared_target_split else split
        return [(self.seed, scene_split, i, style, self.image_size, self.num_classes) for i in range(self.counts[split])]

    def generate_split(self, split):
        split_dir = self.root / split
        image_dir = split_dir / "images"
        try:
            image_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DatasetError(f"Cannot create {image_dir}: {e}") from e
        jobs = self._jobs_for(split)
        if self.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                rendered = list(pool.map(_render_index, jobs, chunksize=16))
        else:
            rendered = [_render_index(j) for j in jobs]
        lines = []
        try:
            for i, (scene, img) in enumerate(rendered):
                name = f"images/{i:05d}.png"
                Image.fromarray(img, "RGB").save(split_dir / name)
                lines.append(json.dumps(_annotation(name, scene), sort_keys=True))
            (split_dir / "annotations.jsonl").write_text("\n".join(lines) + "\n")
        except OSError as e:
            raise DatasetError(f"Cannot write split {split} under {split_dir}: {e}") from e
        self.log.info(f"Wrote {len(lines)} images to {split_dir}")

    def manifest(self) -> dict:
        return {
            "format_version": DATASET_FORMAT_VERSION,
            "seed": self.seed,
            "counts": self.counts,
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "class_names": {str(k): v for k, v in CLASS_NAMES.items() if k <= self.num_classes},
            "shift": asdict(self.shift),
            "shared_target_split": self.shared_target_split,
        }

    def generate(self) -> dict:
        for split in SPLITS:
            self.generate_split(split)
        manifest = self.manifest()
        try:
            (self.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        except OSError as e:
            raise DatasetError(f"Cannot write manifest under {self.root}: {e}") from e
        return manifest


def generate_domain_pair(root, seed=0, counts=(500, 200, 200), shift=None, **kwargs) -> dict:
    return DatasetGenerator(root, seed=seed, counts=counts, shift=shift, **kwargs).generate()


@dataclass(frozen=True, eq=False)
class SourceRecord:
    image_id: str
    image: np.ndarray
    objects: Tuple[Tuple[Box, int], ...]


@dataclass(frozen=True, eq=False)
class TargetRecord:
    image_id: str
    image: np.ndarray


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read dataset manifest {path}: {e}") from e
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(f"Expected dataset format version {DATASET_FORMAT_VERSION}, got {manifest.get('format_version')}")
    return manifest


def read_annotations(root, split) -> List[dict]:
    path = Path(root) / split / "annotations.jsonl"
    try:
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read annotations {path}: {e}") from e


def _objects(record: dict, where: str) -> Tuple[Tuple[Box, int], ...]:
    out = []
    for o in record["objects"]:
        box = Box(o["x_min"], o["y_min"], o["x_max"], o["y_max"])
        if box.area <= 0.0:
            raise InvalidBoxError(f"Degenerate box {box.as_tuple()} in {where}")
        out.append((box, int(o["class_id"])))
    return tuple(out)


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise DatasetError(f"Cannot read image {path}: {e}") from e


def load_labeled_split(root, split="source") -> List[SourceRecord]:
    root = Path(root)
    records = []
    for rec in read_annotations(root, split):
        image_id = f"{split}/{Path(rec['file']).stem}"
        records.append(SourceRecord(image_id, _read_image(root / split / rec["file"]), _objects(rec, image_id)))
    return records


def load_unlabeled_split(root, split="target_train") -> List[TargetRecord]:
    """Images only; the split's annotation file is never opened."""
    image_dir = Path(root) / split / "images"
    paths = sorted(image_dir.glob("*.png"))
    if not paths:
        raise DatasetError(f"No images found in {image_dir}")
    return [TargetRecord(f"{split}/{p.stem}", _read_image(p)) for p in paths]


def load_ground_truth(root, split) -> Dict[str, List[Tuple[Box, int]]]:
    """Evaluation-only access to a split's labels, keyed by image id."""
    return {
        f"{split}/{Path(rec['file']).stem}": list(_objects(rec, split)) for rec in read_annotations(root, split)
    }


@dataclass
class AugmentConfig:
    enabled: bool = True
    crop_min_scale: float = 0.75
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1


def _crop_objects(objects, crop):
    cx0, cy0, cx1, cy1 = crop
    cw, ch = cx1 - cx0, cy1 - cy0
    kept = []
    for box, class_id in objects:
        mx = 0.5 * (box.x_min + box.x_max)
        my = 0.5 * (box.y_min + box.y_max)
        if not (cx0 <= mx <= cx1 and cy0 <= my <= cy1):
            continue
        clipped = Box(
            (max(box.x_min, cx0) - cx0) / cw,
            (max(box.y_min, cy0) - cy0) / ch,
            (min(box.x_max, cx1) - cx0) / cw,
            (min(box.y_max, cy1) - cy0) / ch,
        ).clip()
        if clipped.area > 0.0:
            kept.append((clipped, class_id))
    return tuple(kept)


def augment(image: np.ndarray, objects, rng: np.random.Generator, cfg: AugmentConfig):
    """Random crop, horizontal flip and photometric jitter.

    The same random draws are consumed whether or not ``objects`` is given,
    so labeled and unlabeled images are augmented under one law. The one
    difference is the crop: a labeled image keeps its full view when no
    object centre falls inside the crop window, while an unlabeled image is
    always cropped. Returns a float32 image in [0, 1] and the transformed
    objects (or ``None``).
    """
    size = image.shape[0]
    scale = rng.uniform(cfg.crop_min_scale, 1.0)
    side = max(int(round(scale * size)), 1)
    x0 = int(rng.integers(0, size - side + 1))
    y0 = int(rng.integers(0, size - side + 1))
    flip = rng.uniform() < cfg.flip_prob
    gain = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    bias = rng.uniform(-cfg.brightness, cfg.brightness)

    crop = (x0 / size, y0 / size, (x0 + side) / size, (y0 + side) / size)
    cropped = objects
    if objects is not None:
        cropped = _crop_objects(objects, crop)
    if side < size and (objects is None or cropped):
        patch = Image.fromarray(image[y0 : y0 + side, x0 : x0 + side])
        image = np.asarray(patch.resize((size, size), Image.BILINEAR))
        objects = cropped
    out = image.astype(np.float32) / 255.0
    if flip:
        out = out[:, ::-1]
        if objects is not None:
            objects = tuple((Box(1.0 - b.x_max, b.y_min, 1.0 - b.x_min, b.y_max), c) for b, c in objects)
    out = np.clip((out - 0.5) * gain + 0.5 + bias, 0.0, 1.0).astype(np.float32)
    return np.ascontiguousarray(out), objects


@dataclass
class DomainBatch:
    source_ids: List[str]
    source_images: List[np.ndarray]
    source_objects: List[Tuple[Tuple[Box, int], ...]]
    target_ids: List[str]
    target_images: List[np.ndarray]

    def __len__(self):
        return len(self.source_images) + len(self.target_images)


class BatchComposer(DadetLogger):
    """Draws ``half_size`` source and ``half_size`` target images per batch.

    Each domain is consumed without replacement within an epoch; an epoch
    boundary reshuffles, and a batch may span two epochs.
    """

    def __init__(
        self,
        source: Optional[Sequence[SourceRecord]],
        target: Optional[Sequence[TargetRecord]],
        half_size=16,
        seed=0,
        augment_cfg: Optional[AugmentConfig] = None,
    ):
        DadetLogger.__init__(self)
        self.source = list(source or [])
        self.target = list(target or [])
        if not self.source and not self.target:
            raise DatasetError("Batch composition needs at least one non-empty split")
        self.half_size = int(half_size)
        self.augment_cfg = AugmentConfig() if augment_cfg is None else augment_cfg
        self.rng = np.random.default_rng(seed)
        self.log_seed(seed)
        self._order = {"source": np.zeros(0, dtype=np.int64), "target": np.zeros(0, dtype=np.int64)}
        self._cursor = {"source": 0, "target": 0}
        self.epochs = {"source": 0, "target": 0}
        for name, records in (("source", self.source), ("target", self.target)):
            if records and self.half_size > len(records):
                self.log.warning(
                    f"half_size {self.half_size} exceeds {name} split size {len(records)}, batches wrap across epochs"
                )

    def _take(self, name, count):
        out = []
        while len(out) < count:
            if self._cursor[name] >= self._order[name].size:
                n = len(self.source) if name == "source" else len(self.target)
                self._order[name] = self.rng.permutation(n)
                self._cursor[name] = 0
                self.epochs[name] += 1
            out.append(int(self._order[name][self._cursor[name]]))
            self._cursor[name] += 1
        return out

    def _prepare(self, image, objects):
        if self.augment_cfg.enabled:
            return augment(image, objects, self.rng, self.augment_cfg)
        return image.astype(np.float32) / 255.0, objects

    def next_batch(self) -> DomainBatch:
        batch = DomainBatch([], [], [], [], [])
        if self.source:
            for i in self._take("source", self.half_size):
                rec = self.source[i]
                img, objects = self._prepare(rec.image, rec.objects)
                batch.source_ids.append(rec.image_id)
                batch.source_images.append(img)
                batch.source_objects.append(objects)
        if self.target:
            for i in self._take("target", self.half_size):
                rec = self.target[i]
                img, _ = self._prepare(rec.image, None)
                batch.target_ids.append(rec.image_id)
                batch.target_images.append(img)
        return batch


def compose_batch(source, target, half_size=16, seed=0, augment_cfg=None) -> DomainBatch:
    if not source or not target:
        raise DatasetError("compose_batch needs non-empty source and target splits")
    return BatchComposer(source, target, half_size, seed, augment_cfg).next_batch()
