"""C2f projector between the encoder and the decoder.

Convolutions run on the token grid as an (H, W, C) image.  Every conv is
conv + bias + SiLU (batch norm folded away), so a zero input with zero
biases maps to zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import params as P
from .encoder import FeatureMap
from .tensor import conv2d, conv_transpose2x2, silu

SINGLE_SCALE = (Fraction(1, 16),)
TWO_SCALE = (Fraction(1, 8), Fraction(1, 32))


@dataclass(frozen=True)
class ProjectorConfig:
    in_channels: int
    out_channels: int
    scales: tuple[Fraction, ...] = SINGLE_SCALE
    num_blocks: int = 1
    bottlenecks: int = 3
    hidden_ratio: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(Fraction(s) for s in self.scales))
        if self.scales not in (SINGLE_SCALE, TWO_SCALE):
            raise ValueError(f"unsupported projector scales {self.scales}")
        if self.num_blocks != 1:
            raise ValueError("only one C2f block per branch is supported")

    @property
    def hidden(self) -> int:
        return int(self.out_channels * self.hidden_ratio)

    @property
    def multi_scale(self) -> bool:
        return self.scales == TWO_SCALE


def c2f_spec(spec: P.Spec, name: str, c_in: int, c_out: int, n: int = 3, ratio: float = 0.5) -> None:
    c = int(c_out * ratio)
    P.conv_spec(spec, f"{name}.cv1", 1, c_in, 2 * c)
    for i in range(n):
        P.conv_spec(spec, f"{name}.m.{i}.cv1", 3, c, c)
        P.conv_spec(spec, f"{name}.m.{i}.cv2", 3, c, c)
    P.conv_spec(spec, f"{name}.cv2", 1, (2 + n) * c, c_out)


def param_spec(cfg: ProjectorConfig, prefix: str = "projector") -> P.Spec:
    spec: P.Spec = {}
    if not cfg.multi_scale:
        c2f_spec(spec, f"{prefix}.c2f", cfg.in_channels, cfg.out_channels, cfg.bottlenecks, cfg.hidden_ratio)
        return spec
    spec[f"{prefix}.up.weight"] = ((cfg.in_channels, 2, 2, cfg.out_channels), P.HE_UNIFORM)
    spec[f"{prefix}.up.bias"] = ((cfg.out_channels,), P.ZEROS)
    P.conv_spec(spec, f"{prefix}.down", 3, cfg.in_channels, cfg.out_channels)
    c2f_spec(spec, f"{prefix}.c2f_p3", cfg.out_channels, cfg.out_channels, cfg.bottlenecks, cfg.hidden_ratio)
    c2f_spec(spec, f"{prefix}.c2f_p5", cfg.out_channels, cfg.out_channels, cfg.bottlenecks, cfg.hidden_ratio)
    return spec


def _conv(x, p, name, stride=1):
    w = p[f"{name}.weight"]
    return silu(conv2d(x, w, p[f"{name}.bias"], stride=stride, padding=w.shape[0] // 2))


def c2f_grid(x: np.ndarray, p: dict) -> np.ndarray:
    """C2f on an (H, W, C) grid."""
    w1 = p["cv1.weight"]
    if x.shape[-1] != w1.shape[2]:
        raise ValueError(f"C2f expects {w1.shape[2]} channels, got {x.shape[-1]}")
    y = _conv(x, p, "cv1")
    c = y.shape[-1] // 2
    parts = [y[..., :c], y[..., c:]]
    i = 0
    while f"m.{i}.cv1.weight" in p:
        h = parts[-1]
        parts.append(h + _conv(_conv(h, p, f"m.{i}.cv1"), p, f"m.{i}.cv2"))
        i += 1
    return _conv(np.concatenate(parts, axis=-1), p, "cv2")


def c2f_block(f: FeatureMap, p: dict) -> FeatureMap:
    out = c2f_grid(f.grid(), p)
    return FeatureMap(out.reshape(-1, out.shape[-1]), f.height, f.width)


def project_single_scale(f: FeatureMap, p: dict) -> FeatureMap:
    return c2f_block(f, P.sub(p, "c2f"))


def project_multi_scale(f: FeatureMap, p: dict) -> tuple[FeatureMap, FeatureMap]:
    """(1/8, 1/32) maps from a 1/16 map via a 2x deconv and a stride-2 conv."""
    if f.height % 2 or f.width % 2:
        raise ValueError(f"two-scale projector needs even grid extents, got {f.height}x{f.width}")
    x = f.grid()
    up = silu(conv_transpose2x2(x, p["up.weight"], p["up.bias"]))
    down = _conv(x, p, "down", stride=2)
    p3 = c2f_grid(up, P.sub(p, "c2f_p3"))
    p5 = c2f_grid(down, P.sub(p, "c2f_p5"))
    return (
        FeatureMap(p3.reshape(-1, p3.shape[-1]), p3.shape[0], p3.shape[1]),
        FeatureMap(p5.reshape(-1, p5.shape[-1]), p5.shape[0], p5.shape[1]),
    )


def project(f: FeatureMap, cfg: ProjectorConfig, p: dict) -> list[FeatureMap]:
    if cfg.multi_scale:
        return list(project_multi_scale(f, p))
    return [project_single_scale(f, p)]
