"""Plain ViT encoder with interleaved window/global attention.

Tokens are kept as a (T, C) matrix together with a tag saying how the grid
is flattened.  Row-major flattening walks the grid row by row.  Window-major
flattening walks windows in row-major window order and the tokens inside
each window row by row, so a window is a contiguous block of rows and window
attention is a reshape instead of a copy.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import params as P
from .tensor import (
    gelu,
    inverse_axes,
    layer_norm,
    linear,
    matmul,
    permute_layout,
    softmax,
    tensor,
)

PATCH_SIZE = 16
_WINDOW_AXES = (0, 2, 1, 3, 4)


class LayoutMode(str, enum.Enum):
    ROW_MAJOR_BASELINE = "row-major"
    WINDOW_MAJOR_OPTIMIZED = "window-major"


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (height * width, channels)
    height: int
    width: int
    window: tuple[int, int] | None = None  # None means row-major

    def __post_init__(self):
        if self.data.shape[0] != self.height * self.width:
            raise ValueError(f"{self.data.shape[0]} tokens do not fill a {self.height}x{self.width} grid")
        if self.window is not None:
            wh, ww = self.window
            if self.height % wh or self.width % ww:
                raise ValueError(f"{self.height}x{self.width} grid is not divisible into {wh}x{ww} windows")

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def organization(self) -> str:
        return "row-major" if self.window is None else "window-major"

    def with_data(self, data: np.ndarray) -> "FeatureMap":
        return FeatureMap(data, self.height, self.width, self.window)

    def grid(self) -> np.ndarray:
        """(H, W, C) view; row-major maps only."""
        if self.window is not None:
            raise ValueError("grid() needs a row-major map; call to_row_major first")
        return self.data.reshape(self.height, self.width, self.channels)


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    embed_dim: int
    window_attention_indexes: tuple[int, ...]
    output_feature_indexes: tuple[int, ...]
    num_windows: int = 16
    num_heads: int = 0  # 0 -> embed_dim // 64
    ffn_ratio: int = 4
    patch_size: int = PATCH_SIZE

    def __post_init__(self):
        if self.num_heads == 0:
            object.__setattr__(self, "num_heads", max(1, self.embed_dim // 64))
        object.__setattr__(self, "window_attention_indexes", tuple(sorted(set(self.window_attention_indexes))))
        object.__setattr__(self, "output_feature_indexes", tuple(self.output_feature_indexes))
        for i in self.window_attention_indexes + self.output_feature_indexes:
            if not 0 <= i < self.num_layers:
                raise ValueError(f"layer index {i} outside [0, {self.num_layers})")
        if not self.output_feature_indexes:
            raise ValueError("at least one output feature index is required")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"{self.num_heads} heads do not divide embed_dim {self.embed_dim}")
        side = math.isqrt(self.num_windows)
        if side * side != self.num_windows:
            raise ValueError(f"num_windows={self.num_windows} is not a square")

    @property
    def global_attention_indexes(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.num_layers) if i not in self.window_attention_indexes)

    @property
    def out_channels(self) -> int:
        return self.embed_dim * len(self.output_feature_indexes)

    def window_size(self, grid_h: int, grid_w: int) -> tuple[int, int]:
        side = math.isqrt(self.num_windows)
        if grid_h % side or grid_w % side:
            raise ValueError(f"{grid_h}x{grid_w} token grid cannot be split into {side}x{side} windows")
        return grid_h // side, grid_w // side


def param_spec(cfg: EncoderConfig, grid_h: int, grid_w: int, prefix: str = "encoder") -> P.Spec:
    d = cfg.embed_dim
    spec: P.Spec = {}
    P.linear_spec(spec, f"{prefix}.patch_embed", cfg.patch_size * cfg.patch_size * 3, d)
    spec[f"{prefix}.pos_embed"] = ((grid_h * grid_w, d), P.TRUNC_NORMAL)
    for i in range(cfg.num_layers):
        b = f"{prefix}.blocks.{i}"
        P.norm_spec(spec, f"{b}.norm1", d)
        P.linear_spec(spec, f"{b}.attn.qkv", d, 3 * d)
        P.linear_spec(spec, f"{b}.attn.proj", d, d)
        P.norm_spec(spec, f"{b}.norm2", d)
        P.linear_spec(spec, f"{b}.mlp.fc1", d, cfg.ffn_ratio * d)
        P.linear_spec(spec, f"{b}.mlp.fc2", cfg.ffn_ratio * d, d)
    return spec


def patchify(image: np.ndarray, weight: np.ndarray, bias: np.ndarray, pos_embed: np.ndarray | None = None,
             patch_size: int = PATCH_SIZE) -> FeatureMap:
    """Linear embedding of non-overlapping square patches of an (H, W, 3) image."""
    image = tensor(image)
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = image.reshape(gh, patch_size, gw, patch_size, c).transpose(0, 2, 1, 3, 4)
    tokens = linear(np.ascontiguousarray(patches).reshape(gh * gw, -1), weight, bias)
    if pos_embed is not None:
        tokens = tokens + pos_embed
    return FeatureMap(tokens, gh, gw)


def to_window_major(f: FeatureMap, window_h: int, window_w: int) -> FeatureMap:
    if f.window is not None:
        raise ValueError("feature map is already window-major")
    if f.height % window_h or f.width % window_w:
        raise ValueError(f"{f.height}x{f.width} grid is not divisible into {window_h}x{window_w} windows")
    x = f.data.reshape(f.height // window_h, window_h, f.width // window_w, window_w, f.channels)
    x = permute_layout(x, _WINDOW_AXES)
    return FeatureMap(x.reshape(-1, f.channels), f.height, f.width, (window_h, window_w))


def to_row_major(f: FeatureMap) -> FeatureMap:
    if f.window is None:
        raise ValueError("feature map is already row-major")
    wh, ww = f.window
    x = f.data.reshape(f.height // wh, f.width // ww, wh, ww, f.channels)
    x = permute_layout(x, inverse_axes(_WINDOW_AXES))
    return FeatureMap(x.reshape(-1, f.channels), f.height, f.width)


def multi_head_attention(x: np.ndarray, p: dict, num_heads: int) -> np.ndarray:
    """Self-attention over the middle axis of a (B, N, C) batch."""
    b, n, c = x.shape
    if c % num_heads:
        raise ValueError(f"{num_heads} heads do not divide {c} channels")
    hd = c // num_heads
    qkv = linear(x, p["qkv.weight"], p["qkv.bias"]).reshape(b, n, 3, num_heads, hd)
    qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, B, heads, N, hd)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q * np.float32(hd ** -0.5), k.transpose(0, 1, 3, 2))
    out = matmul(softmax(scores, axis=-1), v)  # (B, heads, N, hd)
    out = out.transpose(0, 2, 1, 3).reshape(b, n, c)
    return linear(out, p["proj.weight"], p["proj.bias"])


def window_attention(f: FeatureMap, p: dict, num_heads: int, window: tuple[int, int] | None = None) -> FeatureMap:
    """Self-attention inside each non-overlapping window.

    Window-major input is attended in place.  Row-major input goes through a
    counted round trip to window-major and back, like the ViTDet layout.
    """
    if f.window is None:
        if window is None:
            raise ValueError("window size is required for a row-major map")
        wm = to_window_major(f, *window)
        return to_row_major(window_attention(wm, p, num_heads))
    if window is not None and tuple(window) != f.window:
        raise ValueError(f"window {window} does not match map organization {f.window}")
    wh, ww = f.window
    x = f.data.reshape(-1, wh * ww, f.channels)
    return f.with_data(multi_head_attention(x, p, num_heads).reshape(-1, f.channels))


def global_attention(f: FeatureMap, p: dict, num_heads: int) -> FeatureMap:
    """Self-attention over every token; works on either flattening as-is."""
    return f.with_data(multi_head_attention(f.data[None], p, num_heads)[0])


def _mlp(x: np.ndarray, p: dict) -> np.ndarray:
    return linear(gelu(linear(x, p["fc1.weight"], p["fc1.bias"])), p["fc2.weight"], p["fc2.bias"])


def encoder_block(f: FeatureMap, p: dict, num_heads: int, window: tuple[int, int] | None) -> FeatureMap:
    """Pre-norm block; ``window`` selects window attention, ``None`` global."""
    h = f.with_data(layer_norm(f.data, p["norm1.weight"], p["norm1.bias"]))
    ap = P.sub(p, "attn")
    h = window_attention(h, ap, num_heads, window) if window is not None else global_attention(h, ap, num_heads)
    x = f.data + h.data
    x = x + _mlp(layer_norm(x, p["norm2.weight"], p["norm2.bias"]), P.sub(p, "mlp"))
    return f.with_data(x)


def encoder_forward(f: FeatureMap, cfg: EncoderConfig, p: dict,
                    layout_mode: LayoutMode | str = LayoutMode.WINDOW_MAJOR_OPTIMIZED) -> FeatureMap:
    """Run the blocks and concatenate the selected layer outputs channel-wise.

    ``p`` holds the block weights (``blocks.{i}.*``).  The result is always a
    row-major map with ``cfg.out_channels`` channels.
    """
    layout_mode = LayoutMode(layout_mode)
    if f.window is not None:
        raise ValueError("encoder input must be row-major")
    window = cfg.window_size(f.height, f.width)
    optimized = layout_mode is LayoutMode.WINDOW_MAJOR_OPTIMIZED
    if optimized:
        f = to_window_major(f, *window)
    collected = []
    for i in range(cfg.num_layers):
        use_window = window if i in cfg.window_attention_indexes else None
        f = encoder_block(f, P.sub(p, f"blocks.{i}"), cfg.num_heads, use_window)
        if i in cfg.output_feature_indexes:
            collected.append(f.data)
    out = f.with_data(np.concatenate(collected, axis=1) if len(collected) > 1 else collected[0])
    return to_row_major(out) if optimized else out
