"""Training configuration.

A :class:`TrainConfig` is a tree of dataclasses. On disk it is an INI file
with one section per nested dataclass plus ``[train]`` for the top-level
fields; every value round-trips through :meth:`TrainConfig.to_file` /
:meth:`TrainConfig.from_file`.
"""
import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping

from .data import AugmentConfig
from .detector import DetectorConfig
from .errors import ConfigError
from .losses import BsrConfig
from .pseudolabel import SrrsPolicy

MODES = ("source_only", "st", "dann", "wst", "bsr", "bsr_wst")
SELF_TRAINING_MODES = ("st", "wst")
BSR_MODES = ("bsr", "bsr_wst")
AP_STYLES = ("all_points", "11point")

_INT = re.compile(r"^[+-]?\d+$")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = ()
    decay: float = 0.1

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.lr <= 0:
            raise ConfigError(f"Learning rate must be positive, got {self.lr}")
        if any(not 0.0 < m < 1.0 for m in self.milestones):
            raise ConfigError(f"Milestones are fractions of the phase budget in (0, 1), got {self.milestones}")


@dataclass
class ScheduleConfig:
    base_iterations: int = 6000
    adapt_iterations: int = 3600
    self_training_iterations: int = 1200
    wst_window: tuple = (0.8333, 0.9167)
    eval_interval: int = 300

    def __post_init__(self):
        self.wst_window = tuple(float(w) for w in self.wst_window)


@dataclass
class AblationToggles:
    use_srrs: bool = True
    mask_all_negatives: bool = False
    weak_mask: bool = True

    @property
    def negatives(self) -> str:
        if self.mask_all_negatives:
            return "none"
        return "weak" if self.weak_mask else "hard"


NAIVE_SELF_TRAINING = AblationToggles(use_srrs=False, mask_all_negatives=False, weak_mask=False)


@dataclass
class DataConfig:
    root: str = "data"
    half_size: int = 16
    source_split: str = "source"
    target_split: str = "target_train"
    eval_split: str = "target_test"


@dataclass
class EvalConfig:
    conf_thresh: float = 0.05
    iou_thresh: float = 0.5
    nms_iou: float = 0.45
    ap_style: str = "all_points"


@dataclass
class TrainConfig:
    """One run.

    ``match_iou`` is the anchor-matching IoU for source ground truth and for
    target pseudo-labels alike. ``srrs.delta`` only decides which raw
    detections support a final detection when scoring it.
    """

    mode: str = "source_only"
    seed: int = 0
    init_checkpoint: str = ""
    match_iou: float = 0.5
    neg_ratio: int = 3
    neg_fallback: int = 3
    grl_lambda: float = 1.0
    dann_hidden: int = 32
    st_use_source: bool = False
    base_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-2, milestones=(0.6667, 0.8333)))
    adapt_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-3, milestones=(0.8333,)))
    st_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-4))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    bsr: BsrConfig = field(default_factory=BsrConfig)
    srrs: SrrsPolicy = field(default_factory=SrrsPolicy)
    ablation: AblationToggles = field(default_factory=AblationToggles)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        s = self.schedule
        for name in ("base_iterations", "adapt_iterations", "self_training_iterations", "eval_interval"):
            if getattr(s, name) < 1:
                raise ConfigError(f"schedule.{name} must be >= 1, got {getattr(s, name)}")
        start, end = s.wst_window
        if not 0.0 <= start < end <= 1.0:
            raise ConfigError(f"wst_window must satisfy 0 <= start < end <= 1, got {s.wst_window}")
        if self.mode == "bsr_wst" and self.window_bounds()[1] <= self.window_bounds()[0]:
            raise ConfigError(f"wst_window {s.wst_window} is empty for {s.adapt_iterations} iterations")
        if self.data.half_size < 1:
            raise ConfigError(f"data.half_size must be >= 1, got {self.data.half_size}")
        if self.eval.ap_style not in AP_STYLES:
            raise ConfigError(f"eval.ap_style must be one of {AP_STYLES}, got {self.eval.ap_style!r}")
        if not 0.0 < self.match_iou < 1.0:
            raise ConfigError(f"match_iou must lie in (0, 1), got {self.match_iou}")
        if self.grl_lambda < 0:
            raise ConfigError(f"grl_lambda must be >= 0, got {self.grl_lambda}")
        return self

    @property
    def toggles(self) -> AblationToggles:
        """Toggles in effect: ``st`` is always naive self-training."""
        return NAIVE_SELF_TRAINING if self.mode == "st" else self.ablation

    def window_bounds(self):
        """WST window as adaptation iteration indices ``[start, end)``."""
        n = self.schedule.adapt_iterations
        start, end = self.schedule.wst_window
        return int(round(start * n)), int(round(end * n))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_ini(self) -> str:
        parser = _new_parser()
        parser.add_section("train")
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                parser.add_section(f.name)
                for sub in dataclasses.fields(value):
                    parser.set(f.name, sub.name, _format(getattr(value, sub.name)))
            else:
                parser.set("train", f.name, _format(value))
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser.items(section))
            lines.append("")
        return "\n".join(lines)

    def to_file(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path

    @classmethod
    def from_ini(cls, text: str, base: "TrainConfig" = None) -> "TrainConfig":
        parser = _new_parser()
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"Malformed config: {e}") from e
        overrides = {}
        for section in parser.sections():
            for key, value in parser.items(section):
                overrides[key if section == "train" else f"{section}.{key}"] = value
        return apply_overrides(cls() if base is None else base, overrides)

    @classmethod
    def from_file(cls, path, base: "TrainConfig" = None) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        return cls.from_ini(text, base)


def _new_parser():
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    return parser


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"Expected a boolean, got {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError as e:
        raise ConfigError(f"Expected a {type(like).__name__}, got {text!r}") from e
    return text


def _parse_tuple(text: str):
    items = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return tuple(int(t) if _INT.match(t) else float(t) for t in items)
    except ValueError as e:
        raise ConfigError(f"Expected a comma-separated list of numbers, got {text!r}") from e


def _parse(text, like):
    if isinstance(like, tuple):
        return _parse_tuple(text)
    return _parse_scalar(text, like)


def apply_overrides(config: TrainConfig, overrides: Mapping[str, object]) -> TrainConfig:
    """Return a copy of ``config`` with dotted keys (``"bsr.gamma"``) replaced.

    String values are parsed against the type of the current value, other
    values are taken as they are.
    """
    top: Dict[str, object] = {}
    nested: Dict[str, Dict[str, object]] = {}
    names = {f.name for f in dataclasses.fields(config)}
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        if section in ("", "train"):
            if name not in names or dataclasses.is_dataclass(getattr(config, name)):
                raise ConfigError(f"Unknown config key {key!r}")
            current = getattr(config, name)
            top[name] = _parse(value, current) if isinstance(value, str) else value
            continue
        if section not in names or not dataclasses.is_dataclass(getattr(config, section)):
            raise ConfigError(f"Unknown config section {section!r} in key {key!r}")
        sub = getattr(config, section)
        sub_names = {f.name for f in dataclasses.fields(sub)}
        if name not in sub_names:
            raise ConfigError(f"Unknown config key {key!r}")
        current = getattr(sub, name)
        nested.setdefault(section, {})[name] = _parse(value, current) if isinstance(value, str) else value
    for section, values in nested.items():
        top[section] = dataclasses.replace(getattr(config, section), **values)
    return dataclasses.replace(config, **top)


PRESETS = {
    # rescaled schedule: base 6000 iterations decayed at 2/3 and 5/6,
    # adaptation 3000 + 600 decayed, WST window 3000 -> 3300 then stop
    "paper-protocol": {
        "schedule.base_iterations": 6000,
        "schedule.adapt_iterations": 3600,
        "schedule.self_training_iterations": 1200,
        "schedule.wst_window": (0.8333, 0.9167),
        "base_optim.lr": 1e-2,
        "base_optim.milestones": (0.6667, 0.8333),
        "adapt_optim.lr": 1e-3,
        "adapt_optim.milestones": (0.8333,),
        "st_optim.lr": 1e-4,
        "bsr.t": 0.5,
        "bsr.gamma": 2.0,
        "srrs.delta": 0.5,
        "srrs.epsilon_fixed": 0.8,
        "data.half_size": 16,
    },
    "smoke": {
        "schedule.base_iterations": 8,
        "schedule.adapt_iterations": 12,
        "schedule.self_training_iterations": 6,
        "schedule.wst_window": (0.5, 1.0),
        "schedule.eval_interval": 3,
        "data.half_size": 2,
    },
}
PRESETS["reference-protocol"] = PRESETS["paper-protocol"]


def preset(name: str, base: TrainConfig = None) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    return apply_overrides(TrainConfig() if base is None else base, PRESETS[name])
