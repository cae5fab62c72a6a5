"""Run configuration: INI files with sections, overridable by CLI flags.

Every run writes its fully resolved configuration next to its outputs, so a
result directory is always reproducible from what it contains.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from ..exceptions import ConfigError
from ..loss import LossWeights
from ..model import MotionNetConfig
from ..selection import DEFAULT_INLIER_THRESHOLD


@dataclass
class DataConfig:
    root: str = ""
    format: str = "sevenscenes"
    trans_thresh: float = 1.5
    rot_thresh_deg: float = 30.0
    cross_sequence_only: bool = False


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    decay_factor: float = 0.7
    decay_interval: int = 10  # epochs between rate decays
    batch_size: int = 6
    max_epochs: int = 50
    patience: int = 3         # epochs without improvement before early stop
    weights: LossWeights = field(default_factory=LossWeights)
    motion: MotionNetConfig = field(default_factory=MotionNetConfig)
    backbone: str = "vgg16"
    window_radius: int = 4
    normalize_correlation: bool = True
    seed: int = 0
    max_steps: int | None = None  # optimizer-step budget for smoke runs
    num_workers: int = 0          # 0 = sequential loading (deterministic)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay factor must be in (0, 1], got {self.decay_factor}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1 or self.patience < 1 or self.decay_interval < 1:
            raise ConfigError("max_epochs, patience, decay_interval must all be >= 1")


@dataclass
class EvalConfig:
    top_n: int = 1
    mode: str = "corr"  # corr | gt
    alpha: float = DEFAULT_INLIER_THRESHOLD

    def __post_init__(self):
        if self.mode not in ("corr", "gt"):
            raise ConfigError(f"selection mode must be 'corr' or 'gt', got {self.mode!r}")
        if self.top_n < 1:
            raise ConfigError(f"top_n must be >= 1, got {self.top_n}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0,1), got {self.alpha}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _set(obj, key: str, raw: str, section: str):
    if not hasattr(obj, key):
        raise ConfigError(f"unknown option [{section}] {key}")
    current = getattr(obj, key)
    try:
        if isinstance(current, bool):
            value = _BOOL[raw.strip().lower()]
        elif isinstance(current, int) and current is not None:
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        elif current is None and key == "max_steps":
            value = int(raw) if raw.strip() else None
        else:
            value = raw
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
    setattr(obj, key, value)


def _apply_section(cfg: RunConfig, section: str, items):
    if section == "data":
        target = cfg.data
    elif section == "train":
        target = cfg.train
    elif section == "eval":
        target = cfg.eval
    elif section == "model":
        target = cfg.train  # model options live on the train config
    elif section == "loss":
        target = cfg.train.weights
    else:
        raise ConfigError(f"unknown config section [{section}]")
    for key, raw in items:
        if section == "model":
            if key == "variant":
                cfg.train.motion = MotionNetConfig(variant=raw, use_depth=cfg.train.motion.use_depth)
            elif key == "use_depth":
                cfg.train.motion = MotionNetConfig(
                    variant=cfg.train.motion.variant, use_depth=_BOOL[raw.strip().lower()]
                )
            else:
                _set(cfg.train, key, raw, section)
        else:
            _set(target, key, raw, section)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional INI file plus ``section.key=value``
    override strings (flags win over the file)."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"config file {path} not found or unreadable")
        for section in parser.sections():
            _apply_section(cfg, section, parser.items(section))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply_section(cfg, section, [(key, value)])
    # re-validate dataclass invariants after mutation
    cfg.train.__post_init__()
    cfg.eval.__post_init__()
    cfg.train.weights.__post_init__()
    return cfg


def snapshot_config(cfg: RunConfig, out_dir) -> Path:
    """Write the resolved configuration as an INI next to the run outputs."""
    parser = configparser.ConfigParser()
    parser["data"] = {
        "root": cfg.data.root,
        "format": cfg.data.format,
        "trans_thresh": repr(cfg.data.trans_thresh),
        "rot_thresh_deg": repr(cfg.data.rot_thresh_deg),
        "cross_sequence_only": str(cfg.data.cross_sequence_only).lower(),
    }
    parser["model"] = {
        "variant": cfg.train.motion.variant,
        "use_depth": str(cfg.train.motion.use_depth).lower(),
        "backbone": cfg.train.backbone,
        "window_radius": str(cfg.train.window_radius),
        "normalize_correlation": str(cfg.train.normalize_correlation).lower(),
    }
    parser["train"] = {
        "learning_rate": repr(cfg.train.learning_rate),
        "decay_factor": repr(cfg.train.decay_factor),
        "decay_interval": str(cfg.train.decay_interval),
        "batch_size": str(cfg.train.batch_size),
        "max_epochs": str(cfg.train.max_epochs),
        "patience": str(cfg.train.patience),
        "seed": str(cfg.train.seed),
        "max_steps": "" if cfg.train.max_steps is None else str(cfg.train.max_steps),
        "num_workers": str(cfg.train.num_workers),
    }
    parser["loss"] = {
        "beta": repr(cfg.train.weights.beta),
        "gamma1": repr(cfg.train.weights.gamma1),
        "gamma2": repr(cfg.train.weights.gamma2),
    }
    parser["eval"] = {
        "top_n": str(cfg.eval.top_n),
        "mode": cfg.eval.mode,
        "alpha": repr(cfg.eval.alpha),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved-config.ini"
    with open(path, "w") as fh:
        parser.write(fh)
    return path
