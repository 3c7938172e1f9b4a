"""Experiment configuration: a flat `key = value` text format.

Keys are dotted paths mirroring the dataclass field names of the objects
they configure (`train.epochs`, `rectifier.alpha`, `attack.1.kind`, ...).
Unknown keys are hard errors so a typo cannot silently change an ablation.
Lines starting with `#` and blank lines are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attacks import AttackSpec
from .errors import ConfigError
from .models import ArchDescriptor, TrainConfig
from .rectifier import RectifierConfig


@dataclass
class DataConfig:
    source: str = "synth_digits"  # synth_digits | idx | blobs
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_size: int = 12000
    test_size: int = 2000
    jitter: float = 1.25
    noise: float = 0.2
    blob_classes: int = 4
    blob_dim: int = 16
    blob_spread: float = 0.05


@dataclass
class DefenseConfig:
    variant: str = "real"  # real | aux_only | none
    aux_only_steps: int = 30
    calibration_size: int = 1000
    aux_multiplier: float = 2.5
    ent_multiplier: float = 2.5


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/out"
    subset: int = 1000
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchDescriptor = None
    train: TrainConfig = None
    rectifier: RectifierConfig = None
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attacks: list = field(default_factory=list)


_TOP_CASTS = {"seed": int, "out": str, "subset": int, "workers": int}

_DATA_CASTS = {
    "source": str, "train_images": str, "train_labels": str,
    "test_images": str, "test_labels": str, "train_size": int, "test_size": int,
    "jitter": float, "noise": float,
    "blob_classes": int, "blob_dim": int, "blob_spread": float,
}

_ARCH_CASTS = {
    "input_shape": "int_tuple", "encoder_widths": "int_tuple", "num_classes": int,
    "aux_kind": str, "decoder_widths": "int_tuple", "activation": str,
    "lc_rotations": "int_tuple",
}

_TRAIN_CASTS = {
    "epochs": int, "batch_size": int, "learning_rate": float,
    "lambda_aux": float, "seed": int,
}

_RECT_CASTS = {
    "steps": int, "step_size": float, "alpha": float, "max_rounds": int,
    "eps_pfy": float, "aux_threshold": float, "ent_threshold": float,
    "detection_enabled": "bool", "aux_kind": str,
    "ent_threshold_normalized": "bool", "aux_weight": float,
    "use_aux_loss": "bool", "use_max_min": "bool", "use_hss": "bool", "use_beta": "bool",
}

_ATTACK_CASTS = {
    "kind": str, "epsilon": float, "norm": str, "steps": int, "step_size": float,
    "targeted": "bool", "sigma": float, "momentum": float, "cw_c": float,
    "cw_lr": float, "df_overshoot": float, "random_start": "bool", "seed": int,
}

_DEFENSE_CASTS = {
    "variant": str, "aux_only_steps": int, "calibration_size": int,
    "aux_multiplier": float, "ent_multiplier": float,
}


def _cast(value: str, kind, key: str):
    try:
        if kind == "bool":
            low = value.lower()
            if low not in ("true", "false"):
                raise ValueError(value)
            return low == "true"
        if kind == "int_tuple":
            value = value.strip()
            return tuple(int(v) for v in value.split(",") if v.strip()) if value else ()
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse the key-value format into a fully validated ExperimentConfig."""
    top, data, arch, train, rect, defense = {}, {}, {}, {}, {}, {}
    attack_rows: dict[int, dict] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        parts = key.split(".")
        section = parts[0]
        if section in _TOP_CASTS and len(parts) == 1:
            top[key] = _cast(value, _TOP_CASTS[key], key)
        elif section == "data" and len(parts) == 2 and parts[1] in _DATA_CASTS:
            data[parts[1]] = _cast(value, _DATA_CASTS[parts[1]], key)
        elif section == "arch" and len(parts) == 2 and parts[1] in _ARCH_CASTS:
            arch[parts[1]] = _cast(value, _ARCH_CASTS[parts[1]], key)
        elif section == "train" and len(parts) == 2 and parts[1] in _TRAIN_CASTS:
            train[parts[1]] = _cast(value, _TRAIN_CASTS[parts[1]], key)
        elif section == "rectifier" and len(parts) == 2 and parts[1] in _RECT_CASTS:
            rect[parts[1]] = _cast(value, _RECT_CASTS[parts[1]], key)
        elif section == "defense" and len(parts) == 2 and parts[1] in _DEFENSE_CASTS:
            defense[parts[1]] = _cast(value, _DEFENSE_CASTS[parts[1]], key)
        elif section == "attack" and len(parts) == 3 and parts[2] in _ATTACK_CASTS:
            try:
                index = int(parts[1])
            except ValueError:
                raise ConfigError(f"line {ln}: attack index must be an integer in {key!r}")
            attack_rows.setdefault(index, {})[parts[2]] = _cast(value, _ATTACK_CASTS[parts[2]], key)
        else:
            raise ConfigError(f"line {ln}: unknown configuration key {key!r}")

    arch_defaults = dict(
        input_shape=(1, 28, 28), encoder_widths=(256, 128), num_classes=10,
        aux_kind="REC", decoder_widths=(256,), activation="relu",
    )
    arch_defaults.update(arch)
    for i in sorted(attack_rows):
        if "kind" not in attack_rows[i]:
            raise ConfigError(f"attack.{i} is missing its kind")
    try:
        arch_obj = ArchDescriptor(**arch_defaults)
        train_obj = TrainConfig(**train)
        rect_obj = RectifierConfig(**rect)
        specs = [AttackSpec(**attack_rows[i]) for i in sorted(attack_rows)]
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    cfg = ExperimentConfig(
        data=DataConfig(**data),
        arch=arch_obj,
        train=train_obj,
        rectifier=rect_obj,
        defense=DefenseConfig(**defense),
        attacks=specs,
        **top,
    )
    if cfg.defense.variant not in ("real", "aux_only", "none"):
        raise ConfigError(f"unknown defense variant {cfg.defense.variant!r}")
    if cfg.data.source not in ("synth_digits", "idx", "blobs"):
        raise ConfigError(f"unknown data source {cfg.data.source!r}")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
