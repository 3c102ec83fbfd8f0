"""Brute-force reference implementations used only by the tests.

Nothing here imports scipy.ndimage or the package's own kernels, so each
check compares two independent routes to the same answer.
"""

from __future__ import annotations

import itertools
from collections import deque

import numpy as np

OFFSETS_26 = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
OFFSETS_6 = [d for d in OFFSETS_26 if sum(map(abs, d)) == 1]


def scan_order(shape):
    """Voxel coordinates in x-fastest order."""
    for z in range(shape[2]):
        for y in range(shape[1]):
            for x in range(shape[0]):
                yield x, y, z


def bfs_components(mask):
    """Queue-based flood fill; labels numbered by first voxel in x-fastest scan."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=np.int64)
    n = 0
    for start in scan_order(mask.shape):
        if not mask[start] or labels[start]:
            continue
        n += 1
        labels[start] = n
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for d in OFFSETS_26:
                w = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
                if all(0 <= w[i] < mask.shape[i] for i in range(3)) and mask[w] and not labels[w]:
                    labels[w] = n
                    queue.append(w)
    return labels, n


def _shift(arr, d, fill):
    """out[x] = arr[x + d] with ``fill`` outside the grid."""
    out = np.full_like(arr, fill)
    src, dst = [], []
    for k, n in zip(d, arr.shape):
        src.append(slice(max(k, 0), n + min(k, 0)))
        dst.append(slice(max(-k, 0), n - max(k, 0)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def flood_fill_vectorized(mask):
    """Min-index propagation with pointer jumping.

    Each foreground voxel ends up holding the smallest x-fastest linear index
    in its 26-component, i.e. the component's first voxel in scan order.
    """
    mask = np.asarray(mask, dtype=bool)
    big = np.iinfo(np.int64).max
    idx = np.arange(mask.size, dtype=np.int64).reshape(mask.shape, order="F")
    rep = np.where(mask, idx, big)
    while True:
        new = rep.copy()
        for d in OFFSETS_26:
            np.minimum(new, _shift(rep, d, big), out=new)
        new = np.where(mask, new, big)
        # jump: follow representative pointers to their own representatives
        flat = new.ravel(order="F")
        fg = flat != big
        flat[fg] = np.minimum(flat[fg], flat[flat[fg]])
        new = flat.reshape(mask.shape, order="F")
        if np.array_equal(new, rep):
            return np.where(mask, rep, -1)
        rep = new


def components_from_reps(rep):
    """(first_index -> voxel count) in scan order."""
    vals = rep[rep >= 0]
    ids, counts = np.unique(vals, return_counts=True)
    return ids, counts


def prune_oracle(mask, prob, gamma, eta, max_components):
    rep = flood_fill_vectorized(mask)
    ids, counts = components_from_reps(rep)
    keep_ids = []
    for first, count in zip(ids, counts):
        members = rep == first
        mean = float(prob[members].astype(np.float64).sum() / count)
        if count >= gamma and mean >= eta:
            keep_ids.append((int(count), int(first)))
    keep_ids.sort(key=lambda t: (-t[0], t[1]))
    keep_ids = keep_ids[:max_components]
    out = np.zeros(mask.shape, dtype=bool)
    for _, first in keep_ids:
        out |= rep == first
    return out


def postprocess_oracle(tc, wt, et, cfg):
    """Straight-line threshold, filter, nest, re-filter, fuse."""
    probs = {"tc": tc, "wt": wt, "et": et}
    m = {c: probs[c] >= getattr(cfg, f"tau_{c}") for c in probs}

    def filt(c, mask):
        return prune_oracle(mask, probs[c], getattr(cfg, f"gamma_{c}"), getattr(cfg, f"eta_{c}"),
                            cfg.max_components)

    m = {c: filt(c, m[c]) for c in m}
    et_m = m["et"]
    tc_m = m["tc"] | et_m
    wt_m = m["wt"] | tc_m
    et_m = filt("et", et_m)
    tc_m = filt("tc", tc_m) | et_m
    wt_m = filt("wt", wt_m) | tc_m
    out = np.zeros(tc.shape, dtype=np.int16)
    out[wt_m] = 1
    out[tc_m] = 2
    out[et_m] = 3
    return out


def surface_oracle(mask):
    mask = np.asarray(mask, dtype=bool)
    inside_all = np.ones_like(mask)
    for d in OFFSETS_6:
        inside_all &= _shift(mask, d, False)
    return mask & ~inside_all


def nsd_oracle(pred, gt, tol, spacing=(1.0, 1.0, 1.0)):
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if not pred.any() and not gt.any():
        return 1.0
    if not pred.any() or not gt.any():
        return 0.0
    sp = np.argwhere(surface_oracle(pred)) * np.asarray(spacing)
    sg = np.argwhere(surface_oracle(gt)) * np.asarray(spacing)
    d = np.sqrt(((sp[:, None, :] - sg[None, :, :]) ** 2).sum(-1))
    hits = (d.min(axis=1) <= tol).sum() + (d.min(axis=0) <= tol).sum()
    return float(hits) / (len(sp) + len(sg))


def dice_oracle(pred, gt):
    from fractions import Fraction

    p, g = int(np.sum(pred)), int(np.sum(gt))
    if p + g == 0:
        return Fraction(1)
    return Fraction(2 * int(np.sum(np.logical_and(pred, gt))), p + g)


def dilate_oracle(mask):
    out = mask.copy()
    for d in OFFSETS_26:
        out |= _shift(mask, d, False)
    return out


def lesionwise_oracle(pred, gt, score):
    gl, ng = bfs_components(gt)
    pl, npred = bfs_components(pred)
    if ng == 0 and npred == 0:
        return 1.0
    scores, matched = [], set()
    for i in range(1, ng + 1):
        hit = set(np.unique(pl[dilate_oracle(gl == i)]).tolist()) - {0}
        matched |= hit
        union = np.isin(pl, list(hit)) if hit else np.zeros(gt.shape, bool)
        scores.append(score(union, gl == i))
    scores += [0.0] * (npred - len(matched))
    return float(np.mean(scores))


def conv3d_loops(x, w, b=None, stride=1, groups=1):
    """Seven nested loops over (co, ox, oy, oz, ci, kx, ky, kz) with zero padding."""
    c_in, nx, ny, nz = x.shape
    c_out, cpg, k = w.shape[0], w.shape[1], w.shape[2]
    pad = k // 2
    out_shape = [(n + stride - 1) // stride for n in (nx, ny, nz)]
    out = np.zeros((c_out, *out_shape))
    per_group_out = c_out // groups
    for co in range(c_out):
        g = co // per_group_out
        for ox in range(out_shape[0]):
            for oy in range(out_shape[1]):
                for oz in range(out_shape[2]):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cpg):
                        src = g * cpg + ci
                        for kx in range(k):
                            ix = ox * stride + kx - pad
                            if not 0 <= ix < nx:
                                continue
                            for ky in range(k):
                                iy = oy * stride + ky - pad
                                if not 0 <= iy < ny:
                                    continue
                                for kz in range(k):
                                    iz = oz * stride + kz - pad
                                    if 0 <= iz < nz:
                                        acc += w[co, ci, kx, ky, kz] * x[src, ix, iy, iz]
                    out[co, ox, oy, oz] = acc
    return out


def smooth_field(rng, shape, passes=3):
    """Cheap low-pass noise in [0, 1] via repeated box averaging (no scipy)."""
    f = rng.random(shape)
    for _ in range(passes):
        acc = f.copy()
        for d in OFFSETS_6:
            acc += _shift(f, d, 0.0)
        f = acc / 7.0
    f -= f.min()
    return f / max(f.max(), 1e-12)
