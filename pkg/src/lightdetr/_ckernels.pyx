# cython: language_level=3
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()


cdef inline void _accumulate(const float[:, :, :] fmap, double x, double y,
                             double scale, double[:] acc) noexcept nogil:
    cdef Py_ssize_t h = fmap.shape[0], w = fmap.shape[1], c = fmap.shape[2]
    cdef double px = x * w - 0.5
    cdef double py = y * h - 0.5
    cdef double fx0 = floor(px), fy0 = floor(py)
    cdef Py_ssize_t x0 = <Py_ssize_t>fx0, y0 = <Py_ssize_t>fy0
    cdef double ax = px - fx0, ay = py - fy0
    cdef double wts[4]
    cdef Py_ssize_t ys[4]
    cdef Py_ssize_t xs[4]
    cdef Py_ssize_t k, ch
    wts[0] = (1 - ay) * (1 - ax); ys[0] = y0; xs[0] = x0
    wts[1] = (1 - ay) * ax; ys[1] = y0; xs[1] = x0 + 1
    wts[2] = ay * (1 - ax); ys[2] = y0 + 1; xs[2] = x0
    wts[3] = ay * ax; ys[3] = y0 + 1; xs[3] = x0 + 1
    for k in range(4):
        if ys[k] < 0 or ys[k] >= h or xs[k] < 0 or xs[k] >= w:
            continue
        for ch in range(c):
            acc[ch] += scale * wts[k] * fmap[ys[k], xs[k], ch]


def bilinear_sample(const float[:, :, :] fmap, const float[:, :] points):
    cdef Py_ssize_t p, ch, n = points.shape[0], c = fmap.shape[2]
    out = np.zeros((n, c), dtype=np.float32)
    cdef float[:, :] o = out
    acc_arr = np.zeros(c, dtype=np.float64)
    cdef double[:] acc = acc_arr
    with nogil:
        for p in range(n):
            acc[:] = 0
            _accumulate(fmap, points[p, 0], points[p, 1], 1.0, acc)
            for ch in range(c):
                o[p, ch] = <float>acc[ch]
    return out


def ms_deform_attn(value, shapes, starts, loc, attn):
    cdef const float[:, :, :] val = np.ascontiguousarray(value, dtype=np.float32)
    cdef const long long[:, :] shp = np.ascontiguousarray(shapes, dtype=np.int64)
    cdef const long long[:] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef const float[:, :, :, :, :] lc = np.ascontiguousarray(loc, dtype=np.float32)
    cdef const float[:, :, :, :] aw = np.ascontiguousarray(attn, dtype=np.float32)
    cdef Py_ssize_t nq = lc.shape[0], nh = lc.shape[1], nl = lc.shape[2], npt = lc.shape[3]
    cdef Py_ssize_t hd = val.shape[2]
    cdef Py_ssize_t q, hh, l, p, ch, k, h, w, s0, idx
    cdef double px, py, fx0, fy0, ax, ay, a
    cdef Py_ssize_t x0, y0
    cdef double wts[4]
    cdef Py_ssize_t ys[4]
    cdef Py_ssize_t xs[4]
    out = np.zeros((nq, nh * hd), dtype=np.float32)
    cdef float[:, :] o = out
    acc_arr = np.zeros(hd, dtype=np.float64)
    cdef double[:] acc = acc_arr
    with nogil:
        for q in range(nq):
            for hh in range(nh):
                acc[:] = 0
                for l in range(nl):
                    h = shp[l, 0]
                    w = shp[l, 1]
                    s0 = st[l]
                    for p in range(npt):
                        a = aw[q, hh, l, p]
                        px = <double>lc[q, hh, l, p, 0] * w - 0.5
                        py = <double>lc[q, hh, l, p, 1] * h - 0.5
                        fx0 = floor(px)
                        fy0 = floor(py)
                        x0 = <Py_ssize_t>fx0
                        y0 = <Py_ssize_t>fy0
                        ax = px - fx0
                        ay = py - fy0
                        wts[0] = (1 - ay) * (1 - ax); ys[0] = y0; xs[0] = x0
                        wts[1] = (1 - ay) * ax; ys[1] = y0; xs[1] = x0 + 1
                        wts[2] = ay * (1 - ax); ys[2] = y0 + 1; xs[2] = x0
                        wts[3] = ay * ax; ys[3] = y0 + 1; xs[3] = x0 + 1
                        for k in range(4):
                            if ys[k] < 0 or ys[k] >= h or xs[k] < 0 or xs[k] >= w:
                                continue
                            idx = s0 + ys[k] * w + xs[k]
                            for ch in range(hd):
                                acc[ch] += a * wts[k] * val[idx, hh, ch]
                for ch in range(hd):
                    o[q, hh * hd + ch] = <float>acc[ch]
    return out


cdef inline double _iou(const double[:, :] b, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef double ax1 = b[i, 0] - b[i, 2] / 2, ay1 = b[i, 1] - b[i, 3] / 2
    cdef double ax2 = b[i, 0] + b[i, 2] / 2, ay2 = b[i, 1] + b[i, 3] / 2
    cdef double bx1 = b[j, 0] - b[j, 2] / 2, by1 = b[j, 1] - b[j, 3] / 2
    cdef double bx2 = b[j, 0] + b[j, 2] / 2, by2 = b[j, 1] + b[j, 3] / 2
    cdef double iw = (ax2 if ax2 < bx2 else bx2) - (ax1 if ax1 > bx1 else bx1)
    cdef double ih = (ay2 if ay2 < by2 else by2) - (ay1 if ay1 > by1 else by1)
    cdef double area_a = b[i, 2] * b[i, 3], area_b = b[j, 2] * b[j, 3]
    cdef double inter, union
    if iw < 0:
        iw = 0
    if ih < 0:
        ih = 0
    inter = iw * ih
    union = area_a + area_b - inter
    if area_a <= 0 or area_b <= 0 or union <= 0:
        return 0.0
    return inter / union


def greedy_nms(boxes, scores, labels, double iou_threshold):
    cdef Py_ssize_t n = boxes.shape[0]
    order_arr = np.lexsort((np.arange(n), -np.asarray(scores, dtype=np.float64))).astype(np.int64)
    cdef const long long[:] order = order_arr
    cdef const double[:, :] b = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef const long long[:] lab = np.ascontiguousarray(labels, dtype=np.int64)
    keep_arr = np.empty(n, dtype=np.int64)
    cdef long long[:] keep = keep_arr
    sup_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[:] sup = sup_arr
    cdef Py_ssize_t a, c, i, j, nk = 0
    with nogil:
        for a in range(n):
            i = order[a]
            if sup[i]:
                continue
            keep[nk] = i
            nk += 1
            for c in range(a + 1, n):
                j = order[c]
                if sup[j] or lab[j] != lab[i]:
                    continue
                if _iou(b, i, j) > iou_threshold:
                    sup[j] = 1
    return keep_arr[:nk].copy()


def linear_sum_assignment(cost_in):
    cost_np = np.asarray(cost_in, dtype=np.float64)
    cdef bint transposed = cost_np.shape[0] > cost_np.shape[1]
    if transposed:
        cost_np = cost_np.T
    cost_np = np.ascontiguousarray(cost_np)
    cdef const double[:, :] cost = cost_np
    cdef Py_ssize_t nr = cost.shape[0], nc = cost.shape[1]
    u_a = np.zeros(nr); v_a = np.zeros(nc)
    shortest_a = np.empty(nc); path_a = np.empty(nc, dtype=np.int64)
    c4r_a = np.full(nr, -1, dtype=np.int64); r4c_a = np.full(nc, -1, dtype=np.int64)
    sr_a = np.zeros(nr, dtype=np.uint8); sc_a = np.zeros(nc, dtype=np.uint8)
    cdef double[:] u = u_a, v = v_a, shortest = shortest_a
    cdef long long[:] path = path_a, col4row = c4r_a, row4col = r4c_a
    cdef unsigned char[:] sr = sr_a, sc = sc_a
    cdef Py_ssize_t cur, i, j, k, sink, tmp
    cdef double min_val, r, best
    with nogil:
        for cur in range(nr):
            for j in range(nc):
                shortest[j] = INFINITY
                path[j] = -1
                sc[j] = 0
            for i in range(nr):
                sr[i] = 0
            min_val = 0
            i = cur
            sink = -1
            while sink == -1:
                sr[i] = 1
                best = INFINITY
                k = -1
                for j in range(nc):
                    if sc[j]:
                        continue
                    r = min_val + cost[i, j] - u[i] - v[j]
                    if r < shortest[j]:
                        path[j] = i
                        shortest[j] = r
                    if shortest[j] < best or (shortest[j] == best and row4col[j] == -1 and (k == -1 or row4col[k] != -1)):
                        best = shortest[j]
                        k = j
                min_val = best
                sc[k] = 1
                if row4col[k] == -1:
                    sink = k
                else:
                    i = row4col[k]
            u[cur] += min_val
            for i in range(nr):
                if sr[i] and i != cur:
                    u[i] += min_val - shortest[col4row[i]]
            for j in range(nc):
                if sc[j]:
                    v[j] -= min_val - shortest[j]
            j = sink
            while True:
                i = path[j]
                row4col[j] = i
                tmp = col4row[i]
                col4row[i] = j
                j = tmp
                if i == cur:
                    break
    rows = np.arange(nr, dtype=np.int64)
    if transposed:
        order = np.argsort(c4r_a)
        return c4r_a[order], rows[order]
    return rows, c4r_a
