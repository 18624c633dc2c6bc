"""Central finite differences against the analytic loss gradients.

The scene is small (5 queries, 2 objects) and is drawn until every matched
box is away from the kinks of the loss: no coordinate of a matched box lies
within ``margin`` of the corresponding object coordinate (the L1 kink), no
two compared edges coincide (the min/max kinks of GIoU), and no width or
height delta sits at the exp clamp.  The assignment and the soft targets are
frozen while differentiating.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import MAX_LOG_SCALE, apply_box_delta, to_xyxy
from .config import ModelConfig
from .matching import (
    GroundTruth,
    LossWeights,
    giou_grad,
    ia_bce_with_grad,
    total_loss,
)

STEP = 1e-3
TOLERANCE = 1e-3


@dataclass(frozen=True)
class GradReport:
    seed: int
    errors: dict[str, float]  # per checked term, normwise relative error
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |a|, max |n|); 0 when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
    return g


@dataclass
class Scene:
    outputs: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # per layer (logits, deltas, reference)
    gt: GroundTruth


def _random_boxes(rng, shape):
    return np.concatenate([rng.uniform(0.3, 0.7, shape + (2,)), rng.uniform(0.1, 0.35, shape + (2,))], -1)


def _is_generic(outputs, gt: GroundTruth, matches, margin: float) -> bool:
    """True when no matched box sits within ``margin`` of a kink of its loss terms."""
    for (_, deltas, ref), layer in zip(outputs, matches):
        if np.any(deltas[..., 2:] > MAX_LOG_SCALE - margin):
            return False
        boxes = apply_box_delta(ref, deltas)
        for g, m in enumerate(layer):
            if not m.pairs:
                continue
            pb, ob = boxes[g][m.pred_index], gt.boxes[m.gt_index]
            if np.abs(pb - ob).min() < margin:
                return False
            a, b = to_xyxy(pb), to_xyxy(ob)
            for i in (0, 1):
                ea = a[:, [i, i + 2]][:, :, None]
                eb = b[:, [i, i + 2]][:, None, :]
                if np.abs(ea - eb).min() < margin:
                    return False
    return True


def make_scene(seed: int, num_queries: int = 5, num_gt: int = 2, num_layers: int = 3,
               num_groups: int = 2, num_classes: int = 6, margin: float = 2e-3,
               weights: LossWeights = LossWeights()) -> Scene:
    """Random scene in generic position; redraws (deterministically) until it is."""
    rng = np.random.default_rng(seed)
    while True:
        gt = GroundTruth(_random_boxes(rng, (num_gt,)), rng.choice(num_classes, num_gt, replace=False))
        outputs = [
            (rng.normal(0, 1.5, (num_groups, num_queries, num_classes)),
             rng.normal(0, 0.3, (num_groups, num_queries, 4)),
             _random_boxes(rng, (num_groups, num_queries)))
            for _ in range(num_layers)
        ]
        if _is_generic(outputs, gt, total_loss(outputs, gt, weights).matches, margin):
            return Scene(outputs, gt)


def check_gradients(cfg: ModelConfig | None = None, seed: int = 0, weights: LossWeights = LossWeights(),
                    step: float = STEP) -> GradReport:
    """Finite-difference check of IA-BCE, GIoU, L1 and the total objective.

    ``cfg`` only supplies the decoder depth; the scene itself is synthetic.
    """
    num_layers = cfg.decoder.num_layers if cfg is not None else 3
    scene = make_scene(seed, num_layers=num_layers, weights=weights)
    gt = scene.gt
    ref_run = total_loss(scene.outputs, gt, weights)
    errors = {}

    # classification term on layer 0, group 0 with its frozen positives
    logits0 = scene.outputs[0][0][0].copy()
    m = ref_run.matches[0][0]
    pos = m.pred_index * logits0.shape[1] + gt.labels[m.gt_index]
    t = ref_run.targets[0][0]
    _, g_cls = ia_bce_with_grad(logits0, pos, t)
    errors["ia_bce"] = relative_error(g_cls, numeric_grad(lambda x: ia_bce_with_grad(x, pos, t)[0], logits0, step))

    # box terms on the matched boxes of layer 0, group 0
    _, deltas, ref = scene.outputs[0]
    boxes = apply_box_delta(ref[0], deltas[0])[m.pred_index]
    objs = gt.boxes[m.gt_index]
    _, g_giou = giou_grad(boxes, objs)
    errors["giou"] = relative_error(-g_giou, numeric_grad(lambda b: (1 - giou_grad(b, objs)[0]).sum(), boxes, step))
    errors["l1"] = relative_error(np.sign(boxes - objs),
                                  numeric_grad(lambda b: np.abs(b - objs).sum(), boxes, step))

    # the full objective with respect to every layer's logits and deltas
    def frozen_total(outputs):
        return total_loss(outputs, gt, weights, ref_run.matches, ref_run.targets).total

    worst = 0.0
    for li, (lg, dl, rf) in enumerate(scene.outputs):
        outs = list(scene.outputs)

        def f_logits(x):
            outs[li] = (x, dl, rf)
            return frozen_total(outs)

        def f_deltas(x):
            outs[li] = (lg, x, rf)
            return frozen_total(outs)

        worst = max(worst, relative_error(ref_run.grad_logits[li], numeric_grad(f_logits, lg.copy(), step)))
        worst = max(worst, relative_error(ref_run.grad_deltas[li], numeric_grad(f_deltas, dl.copy(), step)))
    errors["total"] = worst
    return GradReport(seed, errors)
