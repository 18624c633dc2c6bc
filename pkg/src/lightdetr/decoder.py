"""Deformable DETR decoder with mixed query selection and query groups.

Query tensors are shaped (G, K, D): G weight-sharing query groups of K
queries each.  Group g's queries only ever attend to group g (self-attention
is batched per group), and every batched product is a stack of identical
per-group products, so the group-0 slice of a multi-group pass reproduces a
single-group pass exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import params as P
from .boxes import apply_box_delta, clip_boxes
from .encoder import FeatureMap
from .tensor import add_flops, layer_norm, matmul, relu, softmax, tensor

__all__ = [
    "DecoderConfig",
    "QueryGroup",
    "LayerOutput",
    "apply_box_delta",
    "param_spec",
    "group_param_spec",
    "anchors_for",
    "sine_embed",
    "select_spatial_queries",
    "make_group_queries",
    "deformable_cross_attention",
    "decoder_forward",
]


@dataclass(frozen=True)
class DecoderConfig:
    hidden_dim: int = 256
    num_queries: int = 300
    self_attn_heads: int = 8
    cross_attn_heads: int = 16
    sampling_points: int = 2
    num_levels: int = 1
    num_layers: int = 3
    num_classes: int = 80
    ffn_dim: int = 2048
    num_groups: int = 13

    def __post_init__(self):
        for heads in (self.self_attn_heads, self.cross_attn_heads):
            if self.hidden_dim % heads:
                raise ValueError(f"{heads} heads do not divide hidden_dim {self.hidden_dim}")
        if self.hidden_dim % 4:
            raise ValueError("hidden_dim must be divisible by 4 for the box embedding")
        if self.num_levels not in (1, 2):
            raise ValueError("one or two feature levels are supported")
        if self.num_groups < 1 or self.num_queries < 1 or self.num_layers < 1:
            raise ValueError("num_groups, num_queries and num_layers must be positive")


@dataclass
class QueryGroup:
    content: np.ndarray  # (K, D)
    reference: np.ndarray  # (K, 4)
    token_index: np.ndarray  # (K,) indices into the flattened memory
    enc_logits: np.ndarray  # (K, num_classes)


@dataclass
class LayerOutput:
    logits: np.ndarray  # (G, K, num_classes)
    deltas: np.ndarray  # (G, K, 4)
    reference: np.ndarray  # (G, K, 4), treated as constant
    boxes: np.ndarray  # (G, K, 4)


def group_param_spec(cfg: DecoderConfig, g: int, prefix: str = "query") -> P.Spec:
    d = cfg.hidden_dim
    spec: P.Spec = {f"{prefix}.{g}.content": ((cfg.num_queries, d), P.TRUNC_NORMAL)}
    P.linear_spec(spec, f"{prefix}.{g}.enc_output", d, d)
    P.norm_spec(spec, f"{prefix}.{g}.enc_norm", d)
    P.linear_spec(spec, f"{prefix}.{g}.enc_class", d, cfg.num_classes)
    P.mlp_spec(spec, f"{prefix}.{g}.enc_bbox", [d, d, d, 4])
    return spec


def param_spec(cfg: DecoderConfig, num_groups: int = 1, prefix: str = "decoder") -> P.Spec:
    d = cfg.hidden_dim
    nh, nl, npt = cfg.cross_attn_heads, cfg.num_levels, cfg.sampling_points
    spec: P.Spec = {}
    for i in range(cfg.num_layers):
        b = f"{prefix}.layers.{i}"
        P.linear_spec(spec, f"{b}.self_attn.in_proj", d, 3 * d)
        P.linear_spec(spec, f"{b}.self_attn.out_proj", d, d)
        P.norm_spec(spec, f"{b}.norm1", d)
        P.linear_spec(spec, f"{b}.cross_attn.value_proj", d, d)
        P.linear_spec(spec, f"{b}.cross_attn.sampling_offsets", d, nh * nl * npt * 2, init=P.SMALL_UNIFORM)
        P.linear_spec(spec, f"{b}.cross_attn.attention_weights", d, nh * nl * npt)
        P.linear_spec(spec, f"{b}.cross_attn.output_proj", d, d)
        P.norm_spec(spec, f"{b}.norm2", d)
        P.linear_spec(spec, f"{b}.ffn.linear1", d, cfg.ffn_dim)
        P.linear_spec(spec, f"{b}.ffn.linear2", cfg.ffn_dim, d)
        P.norm_spec(spec, f"{b}.norm3", d)
    P.mlp_spec(spec, f"{prefix}.ref_point_head", [d, d, d])
    P.linear_spec(spec, f"{prefix}.class_head", d, cfg.num_classes)
    P.mlp_spec(spec, f"{prefix}.bbox_head", [d, d, d, 4])
    for g in range(num_groups):
        spec.update(group_param_spec(cfg, g))
    return spec


def _linear(x, p, name):
    y = matmul(x, p[f"{name}.weight"])
    y += p[f"{name}.bias"]
    return y


def _mlp(x, p, name):
    i = 0
    while f"{name}.layers.{i + 1}.weight" in p:
        x = relu(_linear(x, p, f"{name}.layers.{i}"))
        i += 1
    return _linear(x, p, f"{name}.layers.{i}")


def anchors_for(levels: list[FeatureMap]) -> np.ndarray:
    """One cell-sized anchor per token, centred on the cell."""
    out = []
    for f in levels:
        ys, xs = np.meshgrid(np.arange(f.height), np.arange(f.width), indexing="ij")
        a = np.stack(
            [(xs.ravel() + 0.5) / f.width, (ys.ravel() + 0.5) / f.height,
             np.full(xs.size, 1.0 / f.width), np.full(xs.size, 1.0 / f.height)],
            axis=1,
        )
        out.append(a)
    return np.concatenate(out).astype(np.float32)


def sine_embed(boxes: np.ndarray, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Sin/cos features of each of (cx, cy, w, h), ``dim // 4`` per coordinate."""
    per = dim // 4
    i = np.arange(per)
    freq = temperature ** (2 * (i // 2) / per)
    ang = boxes[..., :, None].astype(np.float64) * (2 * math.pi) / freq  # (..., 4, per)
    emb = np.where(i % 2 == 0, np.sin(ang), np.cos(ang))
    return emb.reshape(*boxes.shape[:-1], 4 * per).astype(np.float32)


def flatten_levels(levels: list[FeatureMap]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    memory = np.concatenate([f.data for f in levels], axis=0)
    shapes = np.array([(f.height, f.width) for f in levels], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(shapes.prod(1))[:-1]]).astype(np.int64)
    return memory, shapes, starts


def select_spatial_queries(levels: list[FeatureMap], k: int, gp: dict) -> QueryGroup:
    """Top-K tokens by best class score, with a box predicted per chosen token.

    ``gp`` holds one group's parameters (``content``, ``enc_*``).
    """
    memory, _, _ = flatten_levels(levels)
    if k > memory.shape[0]:
        raise ValueError(f"cannot select {k} queries from {memory.shape[0]} tokens")
    out = layer_norm(_linear(memory, gp, "enc_output"), gp["enc_norm.weight"], gp["enc_norm.bias"])
    logits = _linear(out, gp, "enc_class")
    score = logits.max(axis=1)
    order = np.argsort(-score, kind="stable")[:k]
    delta = _mlp(out[order], gp, "enc_bbox")
    boxes = apply_box_delta(anchors_for(levels)[order], delta)
    return QueryGroup(gp["content"], clip_boxes(boxes).astype(np.float32), order, logits[order])


def make_group_queries(levels: list[FeatureMap], num_groups: int, k: int, params: dict) -> list[QueryGroup]:
    """Per-group content tables and per-group top-K selection; group 0 is the inference group."""
    if num_groups < 1:
        raise ValueError("num_groups must be at least 1")
    return [select_spatial_queries(levels, k, P.sub(params, f"query.{g}")) for g in range(num_groups)]


def deformable_cross_attention(query, reference, levels, p, num_heads, num_points, return_internals=False):
    """Deformable attention from (G, K, D) queries to the flattened levels.

    Sampling points sit at the reference centre plus offsets scaled by half
    the reference extent (divided by the point count).
    """
    memory, shapes, starts = flatten_levels(levels)
    g, k, d = query.shape
    nl = len(levels)
    hd = d // num_heads
    value = _linear(memory, p, "value_proj").reshape(-1, num_heads, hd)
    off = _linear(query, p, "sampling_offsets").reshape(g * k, num_heads, nl, num_points, 2)
    aw = _linear(query, p, "attention_weights").reshape(g * k, num_heads, nl * num_points)
    aw = softmax(aw, axis=-1).reshape(g * k, num_heads, nl, num_points)
    ref = reference.reshape(g * k, 1, 1, 1, 4)
    loc = (ref[..., :2] + off / num_points * ref[..., 2:] * 0.5).astype(np.float32)
    sampled = kernels.ms_deform_attn(value, shapes, starts, loc, aw).reshape(g, k, d)
    # weighted sum over sampled points: one multiply-add per point and channel
    add_flops(2 * g * k * num_heads * nl * num_points * hd)
    out = _linear(sampled, p, "output_proj")
    if return_internals:
        return out, {"value": value, "shapes": shapes, "starts": starts, "locations": loc, "weights": aw,
                     "sampled": sampled}
    return out


def _group_self_attention(x, pos, p, num_heads):
    g, k, d = x.shape
    hd = d // num_heads
    w = p["in_proj.weight"]
    bias = p["in_proj.bias"]
    qk_in = x + pos
    q = matmul(qk_in, w[:, :d]) + bias[:d]
    kk = matmul(qk_in, w[:, d:2 * d]) + bias[d:2 * d]
    v = matmul(x, w[:, 2 * d:]) + bias[2 * d:]

    def heads(t):
        return np.ascontiguousarray(t.reshape(g, k, num_heads, hd).transpose(0, 2, 1, 3))

    q, kk, v = heads(q), heads(kk), heads(v)
    att = softmax(matmul(q * np.float32(hd ** -0.5), kk.transpose(0, 1, 3, 2)), axis=-1)
    out = matmul(att, v).transpose(0, 2, 1, 3).reshape(g, k, d)
    return _linear(np.ascontiguousarray(out), p, "out_proj")


def decoder_layer(tgt, pos, reference, levels, p, cfg: DecoderConfig):
    def ln(x, name):
        return layer_norm(x, p[f"{name}.weight"], p[f"{name}.bias"])

    tgt = ln(tgt + _group_self_attention(tgt, pos, P.sub(p, "self_attn"), cfg.self_attn_heads), "norm1")
    ca = deformable_cross_attention(tgt + pos, reference, levels, P.sub(p, "cross_attn"),
                                    cfg.cross_attn_heads, cfg.sampling_points)
    tgt = ln(tgt + ca, "norm2")
    ffn = _linear(relu(_linear(tgt, p, "ffn.linear1")), p, "ffn.linear2")
    return ln(tgt + ffn, "norm3")


def decoder_forward(groups: list[QueryGroup], levels: list[FeatureMap], cfg: DecoderConfig,
                    params: dict) -> list[LayerOutput]:
    """Iterative refinement over ``cfg.num_layers`` layers; one output per layer."""
    if len(levels) != cfg.num_levels:
        raise ValueError(f"decoder expects {cfg.num_levels} feature levels, got {len(levels)}")
    p = P.sub(params, "decoder")
    tgt = tensor(np.stack([q.content for q in groups]))
    reference = tensor(np.stack([q.reference for q in groups]))
    outputs = []
    for i in range(cfg.num_layers):
        pos = _mlp(sine_embed(reference, cfg.hidden_dim), p, "ref_point_head")
        tgt = decoder_layer(tgt, pos, reference, levels, P.sub(p, f"layers.{i}"), cfg)
        deltas = _mlp(tgt, p, "bbox_head")
        boxes = apply_box_delta(reference, deltas)
        logits = _linear(tgt, p, "class_head")
        outputs.append(LayerOutput(logits, deltas, reference, boxes))
        reference = clip_boxes(boxes).astype(np.float32)
    return outputs
