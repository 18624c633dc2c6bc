"""Box helpers for normalized (cx, cy, w, h) boxes."""
from __future__ import annotations

import numpy as np

# exp(4) caps extent growth per refinement step
MAX_LOG_SCALE = 4.0


def to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def apply_box_delta(proposal, delta) -> np.ndarray:
    """Shift the centre by the delta times the proposal extent, scale extents by exp."""
    proposal = np.asarray(proposal)
    delta = np.asarray(delta)
    if np.any(proposal[..., 2:] <= 0):
        raise ValueError("proposal width and height must be positive")
    pw = proposal[..., 2:3]
    ph = proposal[..., 3:4]
    log_scale = np.minimum(delta[..., 2:], MAX_LOG_SCALE)
    return np.concatenate(
        [
            delta[..., 0:1] * pw + proposal[..., 0:1],
            delta[..., 1:2] * ph + proposal[..., 1:2],
            np.exp(log_scale) * proposal[..., 2:],
        ],
        axis=-1,
    )


def solve_box_delta(proposal, box) -> np.ndarray:
    """The delta that maps ``proposal`` onto ``box`` (inverse of apply_box_delta)."""
    proposal = np.asarray(proposal)
    box = np.asarray(box)
    return np.concatenate(
        [
            (box[..., 0:1] - proposal[..., 0:1]) / proposal[..., 2:3],
            (box[..., 1:2] - proposal[..., 1:2]) / proposal[..., 3:4],
            np.log(box[..., 2:] / proposal[..., 2:]),
        ],
        axis=-1,
    )


def clip_boxes(b: np.ndarray, min_size: float = 1e-4) -> np.ndarray:
    """Clamp centres to [0, 1] and extents to [min_size, 1]."""
    return np.concatenate([np.clip(b[..., :2], 0.0, 1.0), np.clip(b[..., 2:], min_size, 1.0)], axis=-1)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(P, G) IoU matrix; pairs involving a zero-area box score 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax = to_xyxy(a)[:, None, :]
    bx = to_xyxy(b)[None, :, :]
    iw = np.clip(np.minimum(ax[..., 2], bx[..., 2]) - np.maximum(ax[..., 0], bx[..., 0]), 0, None)
    ih = np.clip(np.minimum(ax[..., 3], bx[..., 3]) - np.maximum(ax[..., 1], bx[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    union = area_a + area_b - inter
    ok = (area_a > 0) & (area_b > 0) & (union > 0)
    return np.where(ok, inter / np.where(ok, union, 1.0), 0.0)
