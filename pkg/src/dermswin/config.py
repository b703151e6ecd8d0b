"""Run configuration: INI file merged with command-line overrides.

One file drives a whole run (model shape, dataset root, augmentation,
optimizer settings, seed). Every key is validated against a known-key
table before any compute starts, and the fully merged text is kept so a
run directory can record exactly what it ran with.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .data import AugmentPolicy
from .errors import ConfigError
from .model import ModelConfig, PatchConfig
from .train import TrainConfig

__all__ = ["RunConfig", "load_run_config", "DEFAULTS"]

DEFAULTS: dict[str, dict[str, str]] = {
    "model": {
        "image_size": "224",
        "patch_size": "16",
        "embed_dim": "96",
        "depths": "2,2",
        "heads": "3,6",
        "window": "7",
        "expansion": "4",
        "kernel": "3",
        "num_classes": "5",
        "head_dropout": "0.3",
        "sublayer": "irb",
        "stage_merging": "true",
        "irb_inner_skip": "true",
        "cls_mode": "pool",
    },
    "data": {
        "root": "",
        "mean": "0.5,0.5,0.5",
        "std": "0.5,0.5,0.5",
    },
    "augment": {
        "enabled": "true",
        "h_flip_p": "0.5",
        "v_flip_p": "0.0",
        "rotation_deg": "15.0",
        "crop_scale": "0.8,1.0",
        "brightness": "0.2",
        "contrast": "0.2",
        "saturation": "0.0",
    },
    "train": {
        "epochs": "100",
        "lr0": "1e-3",
        "weight_decay": "0.04",
        "decay_factor": "0.85",
        "decay_interval": "20",
        "batch_size": "16",
        "beta1": "0.9",
        "beta2": "0.999",
        "eps": "1e-8",
        "decay_mode": "decoupled",
        "class_weights": "",
        "grad_clip": "",
    },
    "run": {
        "name": "run",
        "dir": "runs",
        "seed": "0",
    },
}


def _parse_int(section: str, key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from None


def _parse_float(section: str, key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from None


def _parse_bool(section: str, key: str, raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"[{section}] {key} must be a boolean, got {raw!r}")


def _parse_ints(section: str, key: str, raw: str) -> tuple[int, ...]:
    return tuple(_parse_int(section, key, part.strip()) for part in raw.split(","))


def _parse_floats(section: str, key: str, raw: str) -> tuple[float, ...]:
    return tuple(_parse_float(section, key, part.strip()) for part in raw.split(","))


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    augment: AugmentPolicy
    train: TrainConfig
    data_root: Optional[Path]
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    run_name: str
    runs_dir: Path
    seed: int
    resolved: str

    @property
    def run_dir(self) -> Path:
        return self.runs_dir / self.run_name


def _merge(config_path, overrides: Sequence[str]) -> dict[str, dict[str, str]]:
    table = {section: dict(keys) for section, keys in DEFAULTS.items()}

    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(config_path, "r") as handle:
                parser.read_file(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from None
        for section in parser.sections():
            if section not in table:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in table[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                table[section][key] = value

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        section, key = dotted.split(".", 1)
        if section not in table or key not in table[section]:
            raise ConfigError(f"unknown override target {dotted!r}")
        table[section][key] = value
    return table


def _render(table: dict[str, dict[str, str]]) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in table.items():
        parser[section] = keys
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def load_run_config(config_path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Build a validated RunConfig from an INI file plus ``section.key=value`` overrides.

    Either part may be omitted; defaults cover everything except the
    dataset root, which commands that touch data check for themselves.
    """
    table = _merge(config_path, overrides)

    m = table["model"]
    image_size = _parse_int("model", "image_size", m["image_size"])
    sublayer = m["sublayer"].strip()
    if sublayer not in ("irb", "ffn"):
        raise ConfigError(f"[model] sublayer must be 'irb' or 'ffn', got {sublayer!r}")
    cls_mode = m["cls_mode"].strip()
    patch = PatchConfig(
        image_h=image_size,
        image_w=image_size,
        patch_size=_parse_int("model", "patch_size", m["patch_size"]),
        embed_dim=_parse_int("model", "embed_dim", m["embed_dim"]),
        cls_mode=cls_mode,
    )
    model = ModelConfig(
        patch=patch,
        depths=_parse_ints("model", "depths", m["depths"]),
        heads=_parse_ints("model", "heads", m["heads"]),
        window=_parse_int("model", "window", m["window"]),
        expansion=_parse_int("model", "expansion", m["expansion"]),
        kernel=_parse_int("model", "kernel", m["kernel"]),
        num_classes=_parse_int("model", "num_classes", m["num_classes"]),
        head_dropout=_parse_float("model", "head_dropout", m["head_dropout"]),
        sublayer_kind=sublayer,
        stage_merging=_parse_bool("model", "stage_merging", m["stage_merging"]),
        irb_inner_skip=_parse_bool("model", "irb_inner_skip", m["irb_inner_skip"]),
    )

    d = table["data"]
    mean = _parse_floats("data", "mean", d["mean"])
    std = _parse_floats("data", "std", d["std"])
    if len(mean) != 3 or len(std) != 3:
        raise ConfigError("[data] mean and std each need exactly 3 values")
    root = Path(d["root"]) if d["root"].strip() else None

    a = table["augment"]
    crop = _parse_floats("augment", "crop_scale", a["crop_scale"])
    if len(crop) != 2:
        raise ConfigError("[augment] crop_scale needs exactly 2 values")
    augment = AugmentPolicy(
        enabled=_parse_bool("augment", "enabled", a["enabled"]),
        h_flip_p=_parse_float("augment", "h_flip_p", a["h_flip_p"]),
        v_flip_p=_parse_float("augment", "v_flip_p", a["v_flip_p"]),
        rotation_deg=_parse_float("augment", "rotation_deg", a["rotation_deg"]),
        crop_scale=(crop[0], crop[1]),
        brightness=_parse_float("augment", "brightness", a["brightness"]),
        contrast=_parse_float("augment", "contrast", a["contrast"]),
        saturation=_parse_float("augment", "saturation", a["saturation"]),
    )

    r = table["run"]
    seed = _parse_int("run", "seed", r["seed"])
    name = r["name"].strip()
    if not name or "/" in name or name in (".", ".."):
        raise ConfigError(f"[run] name must be a plain directory name, got {name!r}")

    t = table["train"]
    weights_raw = t["class_weights"].strip()
    clip_raw = t["grad_clip"].strip()
    train = TrainConfig(
        epochs=_parse_int("train", "epochs", t["epochs"]),
        lr0=_parse_float("train", "lr0", t["lr0"]),
        weight_decay=_parse_float("train", "weight_decay", t["weight_decay"]),
        decay_factor=_parse_float("train", "decay_factor", t["decay_factor"]),
        decay_interval=_parse_int("train", "decay_interval", t["decay_interval"]),
        batch_size=_parse_int("train", "batch_size", t["batch_size"]),
        seed=seed,
        beta1=_parse_float("train", "beta1", t["beta1"]),
        beta2=_parse_float("train", "beta2", t["beta2"]),
        eps=_parse_float("train", "eps", t["eps"]),
        decay_mode=t["decay_mode"].strip(),
        class_weights=_parse_floats("train", "class_weights", weights_raw) if weights_raw else None,
        grad_clip=_parse_float("train", "grad_clip", clip_raw) if clip_raw else None,
    )

    return RunConfig(
        model=model,
        augment=augment,
        train=train,
        data_root=root,
        mean=(mean[0], mean[1], mean[2]),
        std=(std[0], std[1], std[2]),
        run_name=name,
        runs_dir=Path(r["dir"]),
        seed=seed,
        resolved=_render(table),
    )
