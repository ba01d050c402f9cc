"""Flat `key = value` run configs with dotted sections and strict keys.

Unknown keys are rejected by name; every run writes its fully-resolved
config next to its outputs so experiments are self-describing.
"""

from __future__ import annotations

from .data import SHAPE_CLASSES
from .errors import ConfigError
from .model import ModelConfig

# key -> (type tag, default)
SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "model.levels": ("int", 2),
    "model.channels": ("int", 32),
    "model.image_kernel": ("int", 3),
    "model.patch_size": ("optint", None),
    "model.num_classes": ("int", 5),
    "model.input_h": ("int", 32),
    "model.input_w": ("int", 32),
    "model.variant": ("str", "dgm"),
    "model.affine_enabled": ("bool", True),
    "data.kind": ("str", "synth"),
    "data.path": ("str", ""),
    "data.classes": ("str", ",".join(SHAPE_CLASSES)),
    "data.train_size": ("int", 500),
    "data.eval_size": ("int", 200),
    "data.noise_max": ("float", 0.04),
    "train.epochs": ("int", 50),
    "train.batch_size": ("int", 32),
    "train.lr": ("float", 0.1),
    "train.momentum": ("float", 0.9),
    "train.weight_decay": ("float", 5e-4),
    "train.augment": ("bool", False),
    "train.stop_at_eval_acc": ("optfloat", None),
    "finetune.epochs": ("int", 30),
    "finetune.lr": ("float", 0.01),
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_value(key: str, raw: str):
    tag, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "optint":
            return None if raw.lower() == "none" else int(raw)
        if tag == "optfloat":
            return None if raw.lower() == "none" else float(raw)
        if tag == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = dict()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{stripped}'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the file, then --set key=value overrides."""
    resolved = {key: default for key, (_, default) in SCHEMA.items()}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            resolved.update(parse_config_text(f.read(), source=str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        resolved[key] = _parse_value(key, raw)
    return resolved


def format_config(resolved: dict) -> str:
    lines = []
    for key in sorted(resolved):
        v = resolved[key]
        if v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def model_config(resolved: dict) -> ModelConfig:
    cfg = ModelConfig(
        levels=resolved["model.levels"],
        channels=resolved["model.channels"],
        image_kernel=resolved["model.image_kernel"],
        patch_size=resolved["model.patch_size"],
        num_classes=resolved["model.num_classes"],
        input_h=resolved["model.input_h"],
        input_w=resolved["model.input_w"],
        variant=resolved["model.variant"],
        affine_enabled=resolved["model.affine_enabled"],
    )
    cfg.validate()
    return cfg


def class_list(resolved: dict) -> list[str]:
    names = [c.strip() for c in resolved["data.classes"].split(",") if c.strip()]
    if not names:
        raise ConfigError("data.classes is empty")
    return names
