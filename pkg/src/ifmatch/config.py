"""Structured text experiment configuration.

Format: UTF-8 ``key = value`` lines with ``#`` comments and dotted
section keys (``trainer.lambda_u = 1.0``).  Unknown keys are hard errors
(with a nearest-key suggestion); out-of-range values are hard errors with
the offending line number.  An empty file yields the documented defaults.
"""

import difflib
from dataclasses import dataclass, field
from typing import Tuple

from . import featperturb, imgperturb
from .errors import ConfigError
from .trainer import PARADIGMS, TrainConfig


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str_list(s: str):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _int_list(s: str):
    return tuple(int(v.strip()) for v in s.split(",") if v.strip())


def _float_pair(s: str):
    parts = [v.strip() for v in s.split(",") if v.strip()]
    if not parts:
        return None
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated floats, got {s!r}")
    return (float(parts[0]), float(parts[1]))


@dataclass
class DatasetConfig:
    kind: str = "synthetic"            # synthetic | idx | csv
    classes: int = 4
    per_class: int = 1100
    test_per_class: int = 100
    channels: int = 1
    size: int = 12
    difficulty: float = 0.4
    num_labels: int = 40
    longtail: bool = False
    n1: int = 0
    m1: int = 0
    gamma: float = 1.0
    include_labeled_in_unlabeled: bool = False
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_csv: str = ""
    test_csv: str = ""


@dataclass
class ModelConfig:
    kind: str = "residual_cnn"
    widths: Tuple[int, ...] = (4, 8, 12)
    blocks_per_stage: int = 1


@dataclass
class AugConfig:
    crop_pad: int = 0                  # 0 = auto (pad 4 at 32px, proportional)
    flip_prob: float = 0.5
    strong_ops: int = 2
    strong_pool: Tuple[str, ...] = imgperturb.DEFAULT_STRONG_POOL
    cutout: bool = True
    magnitude_min: float = 0.0
    magnitude_max: float = 1.0


@dataclass
class ExperimentConfig:
    trainer: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    feat_pool: Tuple[str, ...] = featperturb.STRATEGIES


def _range_check(name, value, lo=None, hi=None, lo_open=False):
    if lo is not None and (value <= lo if lo_open else value < lo):
        raise ValueError(f"{name} must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and value > hi:
        raise ValueError(f"{name} must be <= {hi}, got {value}")
    return value


# key -> (section attr, field, parser)
_SCHEMA = {
    "trainer.steps": ("trainer", "steps", lambda s: _range_check("trainer.steps", int(s), 0)),
    "trainer.batch_labeled": ("trainer", "batch_labeled", lambda s: _range_check("trainer.batch_labeled", int(s), 1)),
    "trainer.batch_unlabeled": ("trainer", "batch_unlabeled", lambda s: _range_check("trainer.batch_unlabeled", int(s), 1)),
    "trainer.lambda_u": ("trainer", "lambda_u", lambda s: _range_check("trainer.lambda_u", float(s), 0.0)),
    "trainer.tau": ("trainer", "tau", lambda s: _range_check("trainer.tau", float(s), 0.0, 1.0, lo_open=True)),
    "trainer.threshold": ("trainer", "threshold_kind", lambda s: _choice(s, ("constant", "flex", "free", "soft"))),
    "trainer.threshold_clamp": ("trainer", "threshold_clamp", _float_pair),
    "trainer.branch1_threshold": ("trainer", "branch1_threshold", lambda s: _choice(s, ("constant", "mirror"))),
    "trainer.lr": ("trainer", "lr", lambda s: _range_check("trainer.lr", float(s), 0.0, lo_open=True)),
    "trainer.weight_decay": ("trainer", "weight_decay", lambda s: _range_check("trainer.weight_decay", float(s), 0.0)),
    "trainer.momentum": ("trainer", "momentum", lambda s: _range_check("trainer.momentum", float(s), 0.0, 1.0)),
    "trainer.ema": ("trainer", "ema_decay", lambda s: _range_check("trainer.ema", float(s), 0.0, 1.0)),
    "trainer.seed": ("trainer", "seed", lambda s: _range_check("trainer.seed", int(s), 0)),
    "trainer.paradigm": ("trainer", "paradigm", lambda s: _choice(s, PARADIGMS)),
    "trainer.cbi": ("trainer", "cbi", _bool),
    "trainer.identification": ("trainer", "identification", lambda s: _choice(s, ("cbi", "saa"))),
    "trainer.da": ("trainer", "distribution_alignment", _bool),
    "trainer.da_target": ("trainer", "da_target", lambda s: _choice(s, ("uniform", "labeled_prior"))),
    "trainer.eval_every": ("trainer", "eval_every", lambda s: _range_check("trainer.eval_every", int(s), 0)),
    "trainer.eval_batch": ("trainer", "eval_batch", lambda s: _range_check("trainer.eval_batch", int(s), 1)),
    "metrics.timing": ("trainer", "measure_time", lambda s: _choice(s, ("none", "measured")) == "measured"),
    "dataset.kind": ("dataset", "kind", lambda s: _choice(s, ("synthetic", "idx", "csv"))),
    "dataset.classes": ("dataset", "classes", lambda s: _range_check("dataset.classes", int(s), 2)),
    "dataset.per_class": ("dataset", "per_class", lambda s: _range_check("dataset.per_class", int(s), 1)),
    "dataset.test_per_class": ("dataset", "test_per_class", lambda s: _range_check("dataset.test_per_class", int(s), 1)),
    "dataset.channels": ("dataset", "channels", lambda s: _range_check("dataset.channels", int(s), 1)),
    "dataset.size": ("dataset", "size", lambda s: _range_check("dataset.size", int(s), 4)),
    "dataset.difficulty": ("dataset", "difficulty", lambda s: _range_check("dataset.difficulty", float(s), 0.0, 1.0)),
    "dataset.num_labels": ("dataset", "num_labels", lambda s: _range_check("dataset.num_labels", int(s), 1)),
    "dataset.longtail": ("dataset", "longtail", _bool),
    "dataset.n1": ("dataset", "n1", lambda s: _range_check("dataset.n1", int(s), 1)),
    "dataset.m1": ("dataset", "m1", lambda s: _range_check("dataset.m1", int(s), 1)),
    "dataset.gamma": ("dataset", "gamma", lambda s: _range_check("dataset.gamma", float(s), 1.0)),
    "dataset.include_labeled_in_unlabeled": ("dataset", "include_labeled_in_unlabeled", _bool),
    "dataset.train_images": ("dataset", "train_images", str),
    "dataset.train_labels": ("dataset", "train_labels", str),
    "dataset.test_images": ("dataset", "test_images", str),
    "dataset.test_labels": ("dataset", "test_labels", str),
    "dataset.train_csv": ("dataset", "train_csv", str),
    "dataset.test_csv": ("dataset", "test_csv", str),
    "model.kind": ("model", "kind", lambda s: _choice(s, ("residual_cnn", "mlp"))),
    "model.widths": ("model", "widths", _int_list),
    "model.blocks_per_stage": ("model", "blocks_per_stage", lambda s: _range_check("model.blocks_per_stage", int(s), 1)),
    "aug.crop_pad": ("aug", "crop_pad", lambda s: _range_check("aug.crop_pad", int(s), 0)),
    "aug.flip_prob": ("aug", "flip_prob", lambda s: _range_check("aug.flip_prob", float(s), 0.0, 1.0)),
    "aug.strong_ops": ("aug", "strong_ops", lambda s: _range_check("aug.strong_ops", int(s), 0)),
    "aug.strong_pool": ("aug", "strong_pool", _str_list),
    "aug.cutout": ("aug", "cutout", _bool),
    "aug.magnitude_min": ("aug", "magnitude_min", lambda s: _range_check("aug.magnitude_min", float(s), 0.0, 1.0)),
    "aug.magnitude_max": ("aug", "magnitude_max", lambda s: _range_check("aug.magnitude_max", float(s), 0.0, 1.0)),
    "feat.pool": (None, "feat_pool", _str_list),
}


def _choice(s: str, options):
    if s not in options:
        raise ValueError(f"must be one of {', '.join(options)}; got {s!r}")
    return s


def parse_config(path: str) -> ExperimentConfig:
    """Parse a config file into the structured experiment configuration."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, origin=path)


def parse_config_text(text: str, origin: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        spec = _SCHEMA.get(key)
        if spec is None:
            hint = difflib.get_close_matches(key, _SCHEMA.keys(), n=1)
            suffix = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}{suffix}")
        section, attr, parser = spec
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: {key}: {exc}") from exc
        if section is None:
            setattr(cfg, attr, parsed)
        else:
            setattr(getattr(cfg, section), attr, parsed)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    for s in cfg.feat_pool:
        if s not in featperturb.STRATEGIES:
            raise ConfigError(
                f"feat.pool: unknown strategy {s!r}; known: {featperturb.STRATEGIES}"
            )
    if not cfg.feat_pool:
        raise ConfigError("feat.pool must not be empty")
    for op in cfg.aug.strong_pool:
        if op not in imgperturb.DEFAULT_STRONG_POOL:
            raise ConfigError(
                f"aug.strong_pool: unknown op {op!r}; known: {imgperturb.DEFAULT_STRONG_POOL}"
            )
    if cfg.aug.magnitude_min > cfg.aug.magnitude_max:
        raise ConfigError("aug.magnitude_min must be <= aug.magnitude_max")
    if cfg.dataset.longtail and (cfg.dataset.n1 < 1 or cfg.dataset.m1 < 1):
        raise ConfigError("long-tail splits need dataset.n1 and dataset.m1 >= 1")
    if cfg.trainer.threshold_clamp is not None:
        lo, hi = cfg.trainer.threshold_clamp
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"trainer.threshold_clamp must satisfy 0 <= lo <= hi <= 1, got {lo}, {hi}")
    try:
        cfg.trainer.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_policy(cfg: ExperimentConfig, image_shape, channel_means) -> imgperturb.ImageAugPolicy:
    c, h, w = image_shape
    pad = cfg.aug.crop_pad if cfg.aug.crop_pad > 0 else max(1, round(min(h, w) / 8))
    return imgperturb.ImageAugPolicy(
        crop_pad=pad,
        flip_prob=cfg.aug.flip_prob,
        n_ops=cfg.aug.strong_ops,
        magnitude_range=(cfg.aug.magnitude_min, cfg.aug.magnitude_max),
        pool=cfg.aug.strong_pool,
        cutout=cfg.aug.cutout,
        fill=tuple(float(v) for v in channel_means),
    )
