"""Run configuration: flat key=value files with cosmetic section headers.

Every numeric field is validated against the range its owning module
declares; unknown keys are rejected. Flags override file values, and the
effective configuration echoed into each run directory reproduces the run
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .degrade import KINDS

STAGES = ("synth", "pretrain", "mac-rank", "finetune", "eval", "twin-infer")


@dataclass
class RunConfig:
    stage: str = ""
    seed: int = 0

    # data synthesis
    image_size: int = 32
    n_train: int = 64
    n_eval: int = 32
    mix: str = "gaussian_noise,gaussian_blur,jpeg"

    # masking
    rho: float = 0.5
    patch: int = 8
    mask_fill: float = 0.0
    mask_loss_weight: float = 1e-4

    # attribution path
    delta: float = 100.0
    path_steps: int = 64
    partial_ratio: float = 0.5
    k_percent: float = 30.0
    mac_aggregate: str = "abs"
    probe_per_kind: int = 8

    # optimization
    batch_size: int = 8
    pretrain_steps: int = 5000
    finetune_steps: int = 1000
    lr_max: float = 2e-4
    lr_min: float = 1e-6
    scorer_lr_max: float = 1e-4
    scorer_lr_min: float = 1e-6
    base_channels: int = 16
    checkpoint_every: int = 0

    # artifact paths (inputs of the current stage)
    data: str = ""
    checkpoint: str = ""
    report: str = ""
    out: str = "runs"

    def kinds(self) -> tuple[str, ...]:
        return tuple(k for k in self.mix.split(",") if k)


_INT_FIELDS = {f.name for f in fields(RunConfig) if f.type == "int"}
_FLOAT_FIELDS = {f.name for f in fields(RunConfig) if f.type == "float"}
_KNOWN_FIELDS = {f.name for f in fields(RunConfig)}

# field -> (check, human-readable legal range)
_RANGES = {
    "stage": (lambda v: v in STAGES, f"one of {STAGES}"),
    "rho": (lambda v: 0.0 < v < 1.0, "(0, 1)"),
    "patch": (lambda v: v >= 1, ">= 1"),
    "mask_fill": (lambda v: 0.0 <= v <= 1.0, "[0, 1]"),
    "mask_loss_weight": (lambda v: v >= 0.0, ">= 0"),
    "delta": (lambda v: v > 0.0, "> 0"),
    "path_steps": (lambda v: v >= 4, ">= 4"),
    "partial_ratio": (lambda v: 0.0 < v <= 1.0, "(0, 1]"),
    "k_percent": (lambda v: 0.0 < v <= 100.0, "(0, 100]"),
    "mac_aggregate": (lambda v: v in ("abs", "signed"), "abs or signed"),
    "probe_per_kind": (lambda v: v >= 1, ">= 1"),
    "batch_size": (lambda v: v >= 1, ">= 1"),
    "pretrain_steps": (lambda v: v >= 1, ">= 1"),
    "finetune_steps": (lambda v: v >= 1, ">= 1"),
    "lr_max": (lambda v: v > 0.0, "> 0"),
    "lr_min": (lambda v: v > 0.0, "> 0"),
    "scorer_lr_max": (lambda v: v > 0.0, "> 0"),
    "scorer_lr_min": (lambda v: v > 0.0, "> 0"),
    "base_channels": (lambda v: v >= 4, ">= 4"),
    "image_size": (lambda v: v >= 8 and v % 8 == 0, "a multiple of 8, >= 8"),
    "n_train": (lambda v: v >= 1, ">= 1"),
    "n_eval": (lambda v: v >= 1, ">= 1"),
    "seed": (lambda v: v >= 0, ">= 0"),
    "checkpoint_every": (lambda v: v >= 0, ">= 0"),
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value):
    if isinstance(value, str):
        text = value.strip()
        try:
            if key in _INT_FIELDS:
                return int(text)
            if key in _FLOAT_FIELDS:
                return float(text)
        except ValueError as exc:
            raise ConfigError(f"field {key!r}: cannot parse {text!r}") from exc
        return text
    return value


def validate(config: RunConfig) -> RunConfig:
    for key, (check, legal) in _RANGES.items():
        value = getattr(config, key)
        if key == "stage" and value == "":
            continue
        if not check(value):
            raise ConfigError(f"field {key!r} = {value!r} outside its legal range {legal}")
    if config.image_size % config.patch != 0:
        raise ConfigError(
            f"field 'patch' = {config.patch} must divide image_size {config.image_size}"
        )
    for kind in config.kinds():
        if kind not in KINDS:
            raise ConfigError(f"field 'mix': unknown degradation kind {kind!r}; known: {KINDS}")
    if not config.kinds():
        raise ConfigError("field 'mix' must name at least one degradation kind")
    return config


def read_config_file(path) -> dict:
    """Parse a flat key=value file; [section] headers are cosmetic."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text or (text.startswith("[") and text.endswith("]")):
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if key not in _KNOWN_FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a validated config from an optional file plus overriding flags."""
    config = RunConfig()
    merged: dict = {}
    if path is not None:
        merged.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if key not in _KNOWN_FIELDS:
            raise ConfigError(f"unknown config field {key!r}")
        merged[key] = value
    for key, value in merged.items():
        setattr(config, key, _coerce(key, value))
    return validate(config)


_SECTIONS = (
    ("run", ("stage", "seed", "out", "data", "checkpoint", "report")),
    ("data", ("image_size", "n_train", "n_eval", "mix")),
    ("masking", ("rho", "patch", "mask_fill", "mask_loss_weight")),
    ("attribution", ("delta", "path_steps", "partial_ratio", "k_percent",
                     "mac_aggregate", "probe_per_kind")),
    ("optimization", ("batch_size", "pretrain_steps", "finetune_steps", "lr_max",
                      "lr_min", "scorer_lr_max", "scorer_lr_min", "base_channels",
                      "checkpoint_every")),
)


def write_config(config: RunConfig, path) -> None:
    lines = []
    for section, keys in _SECTIONS:
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(config, key)
            rendered = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {rendered}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
