"""One-to-one matching and the detection objective.

The objective is IoU-aware BCE for classification plus weighted GIoU and L1
box terms, applied to every decoder layer and every query group.  All loss
functions return analytic gradients with respect to the raw class logits and
the box deltas.  The soft target ``t = s**alpha * u**(1 - alpha)`` and the
assignment are held constant when differentiating.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .boxes import MAX_LOG_SCALE, apply_box_delta, pairwise_iou, to_xyxy

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    iou: float = 2.0
    l1: float = 5.0
    alpha: float = 0.25


@dataclass
class GroundTruth:
    boxes: np.ndarray  # (N, 4) normalized cx, cy, w, h
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels differ in length")
        if np.any(self.boxes[:, 2:] <= 0):
            raise ValueError("ground-truth boxes need positive extents")

    def __len__(self):
        return len(self.labels)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_predictions: set[int]
    cost: float = 0.0

    @property
    def pred_index(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_index(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


# ---------------------------------------------------------------- GIoU

def _check_extents(*boxes):
    for b in boxes:
        if np.any(np.asarray(b)[..., 2:] <= 0):
            raise ValueError("GIoU is undefined for boxes with zero or negative extent")


def giou(a, b) -> np.ndarray:
    """Generalized IoU of broadcastable (cx, cy, w, h) boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_extents(a, b)
    ax, bx = to_xyxy(a), to_xyxy(b)
    iw = np.clip(np.minimum(ax[..., 2], bx[..., 2]) - np.maximum(ax[..., 0], bx[..., 0]), 0, None)
    ih = np.clip(np.minimum(ax[..., 3], bx[..., 3]) - np.maximum(ax[..., 1], bx[..., 1]), 0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    cw = np.maximum(ax[..., 2], bx[..., 2]) - np.minimum(ax[..., 0], bx[..., 0])
    ch = np.maximum(ax[..., 3], bx[..., 3]) - np.minimum(ax[..., 1], bx[..., 1])
    enclose = cw * ch
    return inter / union - (enclose - union) / enclose


def pairwise_giou(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return giou(a[:, None, :], b[None, :, :])


def giou_grad(a, b) -> tuple[np.ndarray, np.ndarray]:
    """GIoU of paired (N, 4) boxes and its gradient with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_extents(a, b)
    ax, bx = to_xyxy(a), to_xyxy(b)
    lo_x, hi_x = np.maximum(ax[:, 0], bx[:, 0]), np.minimum(ax[:, 2], bx[:, 2])
    lo_y, hi_y = np.maximum(ax[:, 1], bx[:, 1]), np.minimum(ax[:, 3], bx[:, 3])
    iw_raw, ih_raw = hi_x - lo_x, hi_y - lo_y
    iw, ih = np.clip(iw_raw, 0, None), np.clip(ih_raw, 0, None)
    inter = iw * ih
    area_a = a[:, 2] * a[:, 3]
    union = area_a + b[:, 2] * b[:, 3] - inter
    cw = np.maximum(ax[:, 2], bx[:, 2]) - np.minimum(ax[:, 0], bx[:, 0])
    ch = np.maximum(ax[:, 3], bx[:, 3]) - np.minimum(ax[:, 1], bx[:, 1])
    enc = cw * ch
    value = inter / union - (enc - union) / enc

    # derivatives with respect to a's corners (x1, y1, x2, y2)
    has = (iw_raw > 0) & (ih_raw > 0)
    z = np.zeros(len(a))

    def above(x, y):
        return (x > y).astype(np.float64)

    d_iw = np.stack([-above(ax[:, 0], bx[:, 0]), z, above(bx[:, 2], ax[:, 2]), z], 1)
    d_ih = np.stack([z, -above(ax[:, 1], bx[:, 1]), z, above(bx[:, 3], ax[:, 3])], 1)
    d_inter = has[:, None] * (d_iw * ih[:, None] + d_ih * iw[:, None])
    d_cw = np.stack([-above(bx[:, 0], ax[:, 0]), z, above(ax[:, 2], bx[:, 2]), z], 1)
    d_ch = np.stack([z, -above(bx[:, 1], ax[:, 1]), z, above(ax[:, 3], bx[:, 3])], 1)
    d_enc = d_cw * ch[:, None] + d_ch * cw[:, None]

    # corners -> (cx, cy, w, h)
    jac = np.array([[1, 0, -0.5, 0], [0, 1, 0, -0.5], [1, 0, 0.5, 0], [0, 1, 0, 0.5]], dtype=np.float64)
    d_inter_c = d_inter @ jac
    d_enc_c = d_enc @ jac
    d_area = np.stack([z, z, a[:, 3], a[:, 2]], 1)
    d_union = d_area - d_inter_c
    # giou = inter/union - 1 + union/enc
    grad = (d_inter_c * union[:, None] - inter[:, None] * d_union) / (union ** 2)[:, None]
    grad += (d_union * enc[:, None] - union[:, None] * d_enc_c) / (enc ** 2)[:, None]
    return value, grad


# ---------------------------------------------------------------- IA-BCE

def bce(s, t) -> np.ndarray:
    s = np.clip(np.asarray(s, dtype=np.float64), EPS, 1 - EPS)
    return -(t * np.log(s) + (1 - t) * np.log(1 - s))


def soft_target(s, u, alpha: float = 0.25) -> np.ndarray:
    return np.power(s, alpha) * np.power(u, 1 - alpha)


def ia_bce_loss(scores, pos_index, ious, alpha: float = 0.25) -> float:
    """IoU-aware BCE over post-sigmoid scores.

    ``pos_index`` are flat indices into ``scores``; every other entry is a
    negative weighted by its own squared score.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.zeros(s.size, dtype=bool)
    pos_index = np.asarray(pos_index, dtype=np.int64)
    pos[pos_index] = True
    t = soft_target(s[pos_index], np.asarray(ious, dtype=np.float64), alpha)
    return float(bce(s[pos_index], t).sum() + (s[~pos] ** 2 * bce(s[~pos], 0.0)).sum())


def _sigmoid64(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1 + np.tanh(0.5 * x))


def ia_bce_with_grad(logits, pos_index, targets):
    """IA-BCE from raw logits with fixed soft targets; returns (loss, dL/dlogits)."""
    x = np.asarray(logits, dtype=np.float64)
    s = _sigmoid64(x).ravel()
    sc = np.clip(s, EPS, 1 - EPS)
    live = (s > EPS) & (s < 1 - EPS)
    ds_dx = s * (1 - s)
    pos = np.zeros(s.size, dtype=bool)
    pos[pos_index] = True
    t = np.zeros(s.size)
    t[pos_index] = targets
    neg_log = -np.log(1 - sc)
    loss_terms = np.where(pos, bce(sc, t), s ** 2 * neg_log)
    d_pos = (-(t / sc) + (1 - t) / (1 - sc)) * live
    d_neg = 2 * s * neg_log + s ** 2 / (1 - sc) * live
    grad = np.where(pos, d_pos, d_neg) * ds_dx
    return float(loss_terms.sum()), grad.reshape(x.shape)


# ---------------------------------------------------------------- matching

def hungarian_match(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment of predictions (rows) to objects (columns)."""
    cost = np.asarray(cost, dtype=np.float64)
    n_pred = cost.shape[0]
    if cost.size == 0:
        return MatchResult([], set(range(n_pred)), 0.0)
    if not np.isfinite(cost).all():
        raise ValueError("matching costs must be finite")
    rows, cols = kernels.linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return MatchResult(pairs, set(range(n_pred)) - set(rows.tolist()), float(cost[rows, cols].sum()))


def match_cost(logits, boxes, gt: GroundTruth, weights: LossWeights = LossWeights()) -> np.ndarray:
    """(K, N) cost: IA-BCE gain of making a query positive plus the weighted box terms."""
    s = _sigmoid64(np.asarray(logits)[:, gt.labels])
    u = pairwise_iou(boxes, gt.boxes)
    t = soft_target(s, u, weights.alpha)
    cls = bce(s, t) - s ** 2 * bce(s, 0.0)
    l1 = np.abs(np.asarray(boxes, dtype=np.float64)[:, None, :] - gt.boxes[None]).sum(-1)
    return cls + weights.l1 * l1 + weights.iou * (1 - pairwise_giou(boxes, gt.boxes))


# ---------------------------------------------------------------- objective

@dataclass
class LossResult:
    total: float
    terms: dict[str, float]
    grad_logits: list[np.ndarray] = field(default_factory=list)  # per layer, (G, K, C)
    grad_deltas: list[np.ndarray] = field(default_factory=list)  # per layer, (G, K, 4)
    grad_boxes: list[np.ndarray] = field(default_factory=list)  # per layer, (G, K, 4)
    matches: list[list[MatchResult]] = field(default_factory=list)
    targets: list[list[np.ndarray]] = field(default_factory=list)


def _as_layers(outputs):
    """Accept LayerOutput-like objects or (logits, deltas, reference) tuples."""
    layers = []
    for o in outputs:
        if isinstance(o, tuple):
            logits, deltas, ref = o
        else:
            logits, deltas, ref = o.logits, o.deltas, o.reference
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim == 2:
            logits, deltas, ref = logits[None], np.asarray(deltas)[None], np.asarray(ref)[None]
        layers.append((logits, np.asarray(deltas, dtype=np.float64), np.asarray(ref, dtype=np.float64)))
    return layers


def total_loss(outputs, gt: GroundTruth, weights: LossWeights = LossWeights(), matches=None,
               targets=None) -> LossResult:
    """Sum of cls + iou-weight * GIoU-loss + l1-weight * L1 over layers and groups.

    Normalized by the number of positives per group (at least 1).  Pass ``matches`` and
    ``targets`` from an earlier call to evaluate with a frozen assignment.
    """
    layers = _as_layers(outputs)
    res = LossResult(0.0, {"cls": 0.0, "giou": 0.0, "l1": 0.0})
    for li, (logits, deltas, ref) in enumerate(layers):
        n_groups, k, n_cls = logits.shape
        n_norm = max(1, min(k, len(gt)))
        boxes = apply_box_delta(ref, deltas)
        g_logits = np.zeros_like(logits)
        g_boxes = np.zeros_like(boxes)
        layer_matches, layer_targets = [], []
        for g in range(n_groups):
            if matches is not None:
                m = matches[li][g]
            elif len(gt):
                m = hungarian_match(match_cost(logits[g], boxes[g], gt, weights))
            else:
                m = MatchResult([], set(range(k)))
            pi, gi = m.pred_index, m.gt_index
            flat_pos = pi * n_cls + gt.labels[gi] if len(pi) else np.zeros(0, dtype=np.int64)
            if targets is not None:
                t = targets[li][g]
            elif len(pi):
                s_pos = _sigmoid64(logits[g].ravel()[flat_pos])
                u = np.diag(pairwise_iou(boxes[g][pi], gt.boxes[gi])) if len(pi) else np.zeros(0)
                t = soft_target(s_pos, u, weights.alpha)
            else:
                t = np.zeros(0)
            cls, d_cls = ia_bce_with_grad(logits[g], flat_pos, t)
            res.terms["cls"] += cls / n_norm
            g_logits[g] = d_cls / n_norm
            if len(pi):
                diff = boxes[g][pi] - gt.boxes[gi]
                res.terms["l1"] += np.abs(diff).sum() / n_norm
                gv, gg = giou_grad(boxes[g][pi], gt.boxes[gi])
                res.terms["giou"] += (1 - gv).sum() / n_norm
                g_boxes[g][pi] = (weights.l1 * np.sign(diff) - weights.iou * gg) / n_norm
            layer_matches.append(m)
            layer_targets.append(t)
        # boxes -> deltas
        scale = np.concatenate([ref[..., 2:3], ref[..., 3:4], boxes[..., 2:]], axis=-1)
        live = np.concatenate([np.ones_like(deltas[..., :2]), (deltas[..., 2:] < MAX_LOG_SCALE)], axis=-1)
        res.grad_logits.append(g_logits)
        res.grad_boxes.append(g_boxes)
        res.grad_deltas.append(g_boxes * scale * live)
        res.matches.append(layer_matches)
        res.targets.append(layer_targets)
    res.total = res.terms["cls"] + weights.iou * res.terms["giou"] + weights.l1 * res.terms["l1"]
    return res
