"""Scale presets and config resolution.

A resolved :class:`ModelConfig` flattens to dotted keys (``encoder.embed_dim``,
``decoder.num_queries`` ...).  Values are layered as scale defaults, then a
TOML config file, then explicit overrides, and the result is validated.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Mapping

from .decoder import DecoderConfig
from .encoder import PATCH_SIZE, EncoderConfig
from .projector import SINGLE_SCALE, TWO_SCALE, ProjectorConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCALE_NAMES = ("tiny", "small", "medium", "large", "xlarge")

_WIDE_WINDOWS = (0, 1, 3, 6, 7, 9)
_WIDE_OUTPUTS = (2, 4, 5, 9)

SCALES: dict[str, dict[str, Any]] = {
    "tiny": {
        "encoder.num_layers": 6, "encoder.embed_dim": 192,
        "encoder.window_attention_indexes": (0, 2, 4), "encoder.output_feature_indexes": (0, 2, 4),
        "projector.out_channels": 256, "projector.scales": SINGLE_SCALE,
        "decoder.num_queries": 100, "decoder.hidden_dim": 256,
        "decoder.self_attn_heads": 8, "decoder.cross_attn_heads": 16, "decoder.sampling_points": 2,
    },
    "small": {
        "encoder.num_layers": 10, "encoder.embed_dim": 192,
        "encoder.window_attention_indexes": _WIDE_WINDOWS, "encoder.output_feature_indexes": _WIDE_OUTPUTS,
        "projector.out_channels": 256, "projector.scales": SINGLE_SCALE,
        "decoder.num_queries": 300, "decoder.hidden_dim": 256,
        "decoder.self_attn_heads": 8, "decoder.cross_attn_heads": 16, "decoder.sampling_points": 2,
    },
    "medium": {
        "encoder.num_layers": 10, "encoder.embed_dim": 384,
        "encoder.window_attention_indexes": _WIDE_WINDOWS, "encoder.output_feature_indexes": _WIDE_OUTPUTS,
        "projector.out_channels": 256, "projector.scales": SINGLE_SCALE,
        "decoder.num_queries": 300, "decoder.hidden_dim": 256,
        "decoder.self_attn_heads": 8, "decoder.cross_attn_heads": 16, "decoder.sampling_points": 2,
    },
    "large": {
        "encoder.num_layers": 10, "encoder.embed_dim": 384,
        "encoder.window_attention_indexes": _WIDE_WINDOWS, "encoder.output_feature_indexes": _WIDE_OUTPUTS,
        "projector.out_channels": 384, "projector.scales": TWO_SCALE,
        "decoder.num_queries": 300, "decoder.hidden_dim": 384,
        "decoder.self_attn_heads": 12, "decoder.cross_attn_heads": 24, "decoder.sampling_points": 4,
    },
    "xlarge": {
        "encoder.num_layers": 10, "encoder.embed_dim": 768,
        "encoder.window_attention_indexes": _WIDE_WINDOWS, "encoder.output_feature_indexes": _WIDE_OUTPUTS,
        "projector.out_channels": 384, "projector.scales": TWO_SCALE,
        "decoder.num_queries": 300, "decoder.hidden_dim": 384,
        "decoder.self_attn_heads": 12, "decoder.cross_attn_heads": 24, "decoder.sampling_points": 4,
    },
}

COMMON_DEFAULTS: dict[str, Any] = {
    "input_size": 640,
    "num_classes": 80,
    "seed": 0,
    "encoder.num_windows": 16,
    "encoder.num_heads": 0,
    "encoder.ffn_ratio": 4,
    "projector.bottlenecks": 3,
    "projector.hidden_ratio": 0.5,
    "decoder.num_layers": 3,
    "decoder.ffn_dim": 2048,
    "decoder.num_groups": 13,
}

_TUPLE_KEYS = {"encoder.window_attention_indexes", "encoder.output_feature_indexes"}


class ConfigError(ValueError):
    """Unknown scale or key, bad value, or a config that violates an invariant."""


@dataclass(frozen=True)
class ModelConfig:
    scale: str
    input_size: int
    num_classes: int
    seed: int
    encoder: EncoderConfig
    projector: ProjectorConfig
    decoder: DecoderConfig

    @property
    def grid(self) -> tuple[int, int]:
        side = self.input_size // PATCH_SIZE
        return side, side

    @property
    def window(self) -> tuple[int, int]:
        return self.encoder.window_size(*self.grid)

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {"scale": self.scale, "input_size": self.input_size,
                                "num_classes": self.num_classes, "seed": self.seed}
        for key in _OVERRIDABLE:
            if "." in key:
                section, name = key.split(".", 1)
                flat[key] = getattr(getattr(self, section), name)
        return flat

    def describe(self) -> str:
        lines = []
        for key, value in self.to_flat().items():
            if key == "projector.scales":
                value = ", ".join(str(s) for s in value)
            elif isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines)


_OVERRIDABLE = tuple(COMMON_DEFAULTS) + tuple(SCALES["tiny"])


def parse_value(text: str) -> Any:
    """Parse a TOML scalar or array; fall back to the bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text.strip()


def flatten(table: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(flatten(value, f"{name}."))
        else:
            out[name] = value
    return out


def load_config_file(path) -> dict[str, Any]:
    """Flat dotted-key mapping from a TOML file (tables and dotted keys both work)."""
    try:
        with open(path, "rb") as fh:
            return flatten(tomllib.load(fh))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _coerce(key: str, value: Any) -> Any:
    if isinstance(value, str) and key != "scale" and key != "projector.scales":
        value = parse_value(value)
    if key == "projector.scales":
        items = value.split(",") if isinstance(value, str) else value
        try:
            return tuple(Fraction(str(s).strip()) for s in items)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad projector.scales {value!r}") from exc
    if key in _TUPLE_KEYS:
        if isinstance(value, int):
            value = [value]
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{key} must be a list of integers, got {value!r}")
        return tuple(value)
    if key == "projector.hidden_ratio":
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    return value


def resolve_config(scale: str | None, overrides: Mapping[str, Any] | None = None,
                   config_file=None) -> ModelConfig:
    """Scale defaults, then ``config_file``, then ``overrides``; validated.

    The ``scale`` argument wins over a ``scale`` key in the file; pass None to
    take it from the file.

    >>> resolve_config("tiny", {"input_size": 320}).window
    (5, 5)
    """
    layered: dict[str, Any] = {}
    if config_file is not None:
        layered.update(load_config_file(config_file))
    file_scale = layered.pop("scale", None)
    layered.update(overrides or {})
    scale = str(layered.pop("scale", scale if scale is not None else file_scale))
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}; choose one of {', '.join(SCALE_NAMES)}")
    values = {**COMMON_DEFAULTS, **SCALES[scale]}
    for key, value in layered.items():
        if key not in values:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return _build(scale, values)


def _build(scale: str, v: dict[str, Any]) -> ModelConfig:
    try:
        enc = EncoderConfig(
            num_layers=v["encoder.num_layers"], embed_dim=v["encoder.embed_dim"],
            window_attention_indexes=v["encoder.window_attention_indexes"],
            output_feature_indexes=v["encoder.output_feature_indexes"],
            num_windows=v["encoder.num_windows"], num_heads=v["encoder.num_heads"],
            ffn_ratio=v["encoder.ffn_ratio"],
        )
        proj = ProjectorConfig(
            in_channels=enc.out_channels, out_channels=v["projector.out_channels"],
            scales=v["projector.scales"], bottlenecks=v["projector.bottlenecks"],
            hidden_ratio=v["projector.hidden_ratio"],
        )
        dec = DecoderConfig(
            hidden_dim=v["decoder.hidden_dim"], num_queries=v["decoder.num_queries"],
            self_attn_heads=v["decoder.self_attn_heads"], cross_attn_heads=v["decoder.cross_attn_heads"],
            sampling_points=v["decoder.sampling_points"], num_levels=len(proj.scales),
            num_layers=v["decoder.num_layers"], num_classes=v["num_classes"],
            ffn_dim=v["decoder.ffn_dim"], num_groups=v["decoder.num_groups"],
        )
        cfg = ModelConfig(scale, v["input_size"], v["num_classes"], v["seed"], enc, proj, dec)
        validate(cfg)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def validate(cfg: ModelConfig) -> None:
    if cfg.input_size <= 0 or cfg.input_size % PATCH_SIZE:
        raise ConfigError(f"input_size {cfg.input_size} must be a positive multiple of {PATCH_SIZE}")
    if cfg.num_classes < 1:
        raise ConfigError("num_classes must be positive")
    if cfg.projector.out_channels != cfg.decoder.hidden_dim:
        raise ConfigError(
            f"projector.out_channels ({cfg.projector.out_channels}) must equal decoder.hidden_dim "
            f"({cfg.decoder.hidden_dim})")
    gh, gw = cfg.grid
    cfg.encoder.window_size(gh, gw)
    if cfg.projector.multi_scale:
        if gh % 2 or gw % 2:
            raise ConfigError(f"two-scale projector needs an even token grid, got {gh}x{gw}")
        tokens = 4 * gh * gw + (gh // 2) * (gw // 2)
    else:
        tokens = gh * gw
    if cfg.decoder.num_queries > tokens:
        raise ConfigError(f"{cfg.decoder.num_queries} queries exceed the {tokens} candidate tokens")


def config_fields() -> tuple[str, ...]:
    """Every dotted key accepted by :func:`resolve_config`."""
    return ("scale",) + _OVERRIDABLE


__all__ = [
    "ModelConfig", "ConfigError", "SCALES", "SCALE_NAMES", "resolve_config", "load_config_file",
    "parse_value", "flatten", "validate", "config_fields",
]
