"""Run configuration: strict JSON -> nested dataclasses.

Unknown keys, wrong types and out-of-range values are all collected and
reported together in a single ConfigError.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import AugmentConfig, PatchConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .losses import LossWeights
from .networks import DiscriminatorSpec, GeneratorSpec, SegNetSpec
from .training import GanTrainConfig, SegTrainConfig

# Keys whose defaults are the published training recipe; listed in the echo
# when the user left them unset.
RECIPE_KEYS = (
    "seg_net.levels", "seg_net.base_width",
    "generator.levels", "generator.base_width", "generator.vit_blocks",
    "seg_train.epochs", "seg_train.lr", "seg_train.lr_decay_start_epoch", "seg_train.batch_size",
    "gan_train.epochs", "gan_train.lr", "gan_train.batch_size",
    "gan_train.weights.lambda_a", "gan_train.weights.lambda_b",
    "gan_train.weights.lambda_idt", "gan_train.weights.lambda_seg",
    "data.patches.train_patch", "data.patches.eval_patch",
    "data.patches.grid_rows", "data.patches.grid_cols",
    "gan_augment.crop_size",
)
ECHO_MARKER = "_recipe_defaults"


@dataclass
class DataConfig:
    cffa_root: Optional[str] = None
    hrf_root: Optional[str] = None
    validate_counts: bool = True
    patches: PatchConfig = field(default_factory=PatchConfig)
    # side of the random patches drawn on the fly for segmenter training
    hrf_patch: int = 512

    def validate(self) -> list[str]:
        return [] if self.hrf_patch >= 1 else ["hrf_patch must be >= 1"]


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    seg_net: SegNetSpec = field(default_factory=SegNetSpec)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    seg_train: SegTrainConfig = field(default_factory=SegTrainConfig)
    gan_train: GanTrainConfig = field(default_factory=GanTrainConfig)
    seg_augment: AugmentConfig = field(default_factory=AugmentConfig)
    gan_augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(crop_size=448))
    eval: EvalConfig = field(default_factory=EvalConfig)


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _check_scalar(value, tp, path, errors) -> Any:
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if not optional:
            errors.append(f"{path}: must not be null")
        return value
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif tp is str:
        ok = isinstance(value, str)
    elif typing.get_origin(tp) is dict or tp is dict:
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        errors.append(f"{path}: expected {getattr(tp, '__name__', tp)}, got {type(value).__name__}")
    return value


def _build(cls, raw, path: str, errors: list[str]):
    if not isinstance(raw, dict):
        errors.append(f"{path or '<root>'}: expected an object")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            errors.append(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        tp, _ = _unwrap_optional(hints[f.name])
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, raw[f.name], sub, errors)
        else:
            kwargs[f.name] = _check_scalar(raw[f.name], hints[f.name], sub, errors)
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{path or '<root>'}: {exc}")
        return cls()
    if hasattr(obj, "validate"):
        for problem in obj.validate():
            errors.append(f"{path + ': ' if path else ''}{problem}")
    return obj


def validate_config(raw: dict) -> RunConfig:
    """Strictly parse a run configuration, filling recipe defaults."""
    raw = dict(raw or {})
    raw.pop(ECHO_MARKER, None)
    errors: list[str] = []
    cfg = _build(RunConfig, raw, "", errors)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors), keys=errors)
    cfg.seg_train = dataclasses.replace(cfg.seg_train, seed=cfg.seed)
    cfg.gan_train = dataclasses.replace(cfg.gan_train, seed=cfg.seed)
    cfg.eval = dataclasses.replace(cfg.eval, seed=cfg.seed)
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _has_key(raw: dict, dotted: str) -> bool:
    node = raw
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return False
        node = node[part]
    return True


def effective_config(cfg: RunConfig, raw: Optional[dict] = None) -> dict:
    """Fully resolved config plus the list of recipe defaults it relied on."""
    doc = dataclasses.asdict(cfg)
    raw = raw or {}
    doc[ECHO_MARKER] = [k for k in RECIPE_KEYS if not _has_key(raw, k)]
    return doc


def write_effective_config(cfg: RunConfig, raw: Optional[dict], path) -> None:
    Path(path).write_text(json.dumps(effective_config(cfg, raw), indent=2, sort_keys=True))
