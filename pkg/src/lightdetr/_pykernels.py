"""Numpy implementations of the hot kernels.

These are the reference fallback for ``_ckernels.pyx`` and must produce the
same results (bit-identical index outputs, float outputs within rounding).
"""
import numpy as np


def _corner_terms(u, v, h, w):
    """Corner indices, weights and validity for normalized sample points."""
    x = u.astype(np.float64) * w - 0.5
    y = v.astype(np.float64) * h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi = y0 + dy
            xi = x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            out.append((np.where(ok, yi, 0), np.where(ok, xi, 0), np.where(ok, wy * wx, 0.0)))
    return out


def bilinear_sample(fmap, points):
    h, w, _ = fmap.shape
    acc = np.zeros((points.shape[0], fmap.shape[2]), dtype=np.float64)
    for yi, xi, wt in _corner_terms(points[:, 0], points[:, 1], h, w):
        acc += wt[:, None] * fmap[yi, xi]
    return acc.astype(np.float32)


def ms_deform_attn(value, shapes, starts, loc, attn):
    """Multi-scale deformable sampling + weighting.

    value: (S, nH, hd); shapes: (L, 2) as (H, W); starts: (L,)
    loc: (Q, nH, L, P, 2) normalized (x, y); attn: (Q, nH, L, P)
    returns (Q, nH * hd)
    """
    q, nh, nl, npt, _ = loc.shape
    hd = value.shape[2]
    acc = np.zeros((q, nh, hd), dtype=np.float64)
    heads = np.arange(nh)[None, :, None]
    for lvl in range(nl):
        h, w = int(shapes[lvl, 0]), int(shapes[lvl, 1])
        s0 = int(starts[lvl])
        vl = value[s0:s0 + h * w].reshape(h, w, nh, hd)
        a = attn[:, :, lvl, :].astype(np.float64)
        for yi, xi, wt in _corner_terms(loc[:, :, lvl, :, 0], loc[:, :, lvl, :, 1], h, w):
            sampled = vl[yi, xi, heads]  # (Q, nH, P, hd)
            acc += ((a * wt)[..., None] * sampled).sum(axis=2)
    return acc.reshape(q, nh * hd).astype(np.float32)


def box_iou_one(box, boxes):
    """IoU of one (cx, cy, w, h) box against many; zero-area boxes give 0."""
    ax1, ay1 = box[0] - box[2] / 2, box[1] - box[3] / 2
    ax2, ay2 = box[0] + box[2] / 2, box[1] + box[3] / 2
    bx1 = boxes[:, 0] - boxes[:, 2] / 2
    by1 = boxes[:, 1] - boxes[:, 3] / 2
    bx2 = boxes[:, 0] + boxes[:, 2] / 2
    by2 = boxes[:, 1] + boxes[:, 3] / 2
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    area_a = box[2] * box[3]
    area_b = boxes[:, 2] * boxes[:, 3]
    union = area_a + area_b - inter
    valid = (area_a > 0) & (area_b > 0) & (union > 0)
    return np.where(valid, inter / np.where(valid, union, 1.0), 0.0)


def greedy_nms(boxes, scores, labels, iou_threshold):
    n = boxes.shape[0]
    order = np.lexsort((np.arange(n), -scores))
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[(labels[rest] == labels[i]) & ~suppressed[rest]]
        if rest.size:
            suppressed[rest[box_iou_one(boxes[i], boxes[rest]) > iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def linear_sum_assignment(cost):
    """Shortest-augmenting-path assignment; returns (rows, cols) sorted by row."""
    cost = np.asarray(cost, dtype=np.float64)
    transposed = cost.shape[0] > cost.shape[1]
    if transposed:
        cost = cost.T
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)
    for cur in range(nr):
        shortest = np.full(nc, np.inf)
        path = np.full(nc, -1, dtype=np.int64)
        sr = np.zeros(nr, dtype=bool)
        sc = np.zeros(nc, dtype=bool)
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            sr[i] = True
            r = min_val + cost[i] - u[i] - v
            better = ~sc & (r < shortest)
            path[better] = i
            shortest[better] = r[better]
            cand = np.flatnonzero(~sc)
            best = shortest[cand].min()
            ties = cand[shortest[cand] == best]
            free = ties[row4col[ties] == -1]
            j = int(free[0]) if free.size else int(ties[0])
            min_val = best
            sc[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
        u[cur] += min_val
        others = sr.copy()
        others[cur] = False
        rows = np.flatnonzero(others)
        u[rows] += min_val - shortest[col4row[rows]]
        v[sc] -= min_val - shortest[sc]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break
    rows = np.arange(nr, dtype=np.int64)
    if transposed:
        order = np.argsort(col4row)
        return col4row[order].astype(np.int64), rows[order]
    return rows, col4row.astype(np.int64)
