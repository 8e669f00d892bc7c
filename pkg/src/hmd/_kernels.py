"""Compiled inner loops for forest training and dense forest application.

Everything here works on flat numpy arrays so numba can compile it; the
object-level API in `forest` and `voting` packs/unpacks around these.
Kernels are single-threaded on purpose: results are bit-deterministic
regardless of scheduling.

Feature rows follow the `features.pack_features` layout:
    channel, mode, ax0, ay0, ax1, ay1, bx0, by0, bx1, by1
Integral stacks are float64 (channels, height+1, width+1); the multi-image
variant prepends an image axis with per-image true sizes carried separately.
"""

from __future__ import annotations

import numpy as np
from numba import njit

CLASSIFICATION = 0
UNIFORMITY = 1


@njit(cache=True)
def _rect_mean(table, cx, cy, x0, y0, x1, y1, width, height):
    ax0 = min(max(cx + x0, 0), width)
    ax1 = min(max(cx + x1, 0), width)
    ay0 = min(max(cy + y0, 0), height)
    ay1 = min(max(cy + y1, 0), height)
    area = (ax1 - ax0) * (ay1 - ay0)
    if area <= 0:
        return 0.0
    s = table[ay1, ax1] - table[ay0, ax1] - table[ay1, ax0] + table[ay0, ax0]
    return s / area


@njit(cache=True)
def _feature_value(ii3, feat, cx, cy, width, height):
    table = ii3[feat[0]]
    value = _rect_mean(table, cx, cy, feat[2], feat[3], feat[4], feat[5], width, height)
    if feat[1] == 1:
        value -= _rect_mean(table, cx, cy, feat[6], feat[7], feat[8], feat[9], width, height)
    return value


@njit(cache=True)
def feature_responses(ii_stack, img_w, img_h, simg, spx, spy, idx, feat):
    """Response of one feature at every sample in `idx`."""
    out = np.empty(idx.size, dtype=np.float64)
    for k in range(idx.size):
        i = idx[k]
        im = simg[i]
        out[k] = _feature_value(ii_stack[im], feat, spx[i], spy[i], img_w[im], img_h[im])
    return out


@njit(cache=True)
def _threshold_slot(r, rmin, step, n_thr):
    """Index of the first grid threshold strictly above r (n_thr if none)."""
    guess = int((r - rmin) / step) - 1
    if guess < 0:
        guess = 0
    while guess < n_thr and rmin + step * guess <= r:
        guess += 1
    return guess


@njit(cache=True)
def _weighted_entropy(counts, inv_prior):
    total = 0.0
    w0 = counts[0] * inv_prior[0]
    w1 = counts[1] * inv_prior[1]
    w2 = counts[2] * inv_prior[2]
    total = w0 + w1 + w2
    h = 0.0
    if w0 > 0.0:
        p = w0 / total
        h -= p * np.log(p)
    if w1 > 0.0:
        p = w1 / total
        h -= p * np.log(p)
    if w2 > 0.0:
        p = w2 / total
        h -= p * np.log(p)
    return h


@njit(cache=True)
def scan_split_candidates(
    ii_stack,
    img_w,
    img_h,
    simg,
    spx,
    spy,
    slab,
    svx,
    svy,
    idx,
    feats,
    n_thr,
    min_leaf,
    objective,
    inv_prior,
    out_obj,
    out_thr,
):
    """Best threshold (and its objective) per candidate feature.

    Thresholds are `n_thr` values evenly spaced over [min, max] of the
    feature's responses at the node; a sample goes left iff response <
    threshold. Candidates whose children would fall below `min_leaf`
    samples are discarded. out_obj[f] is +inf when feature f offers no
    valid candidate; ties inside a feature keep the lowest threshold.
    """
    n = idx.size
    n_feats = feats.shape[0]
    resp = np.empty(n, dtype=np.float64)

    # foreground subset (positions within idx) used by the uniformity objective
    n_fg = 0
    for k in range(n):
        if slab[idx[k]] > 0:
            n_fg += 1
    fg_pos = np.empty(n_fg, dtype=np.int64)
    j = 0
    for k in range(n):
        if slab[idx[k]] > 0:
            fg_pos[j] = k
            j += 1

    bins_cls = np.zeros((n_thr + 1, 3), dtype=np.int64)
    bins_all = np.zeros(n_thr + 1, dtype=np.int64)

    for f in range(n_feats):
        feat = feats[f]
        for k in range(n):
            i = idx[k]
            im = simg[i]
            resp[k] = _feature_value(ii_stack[im], feat, spx[i], spy[i], img_w[im], img_h[im])

        rmin = resp[0]
        rmax = resp[0]
        for k in range(1, n):
            if resp[k] < rmin:
                rmin = resp[k]
            if resp[k] > rmax:
                rmax = resp[k]
        out_obj[f] = np.inf
        out_thr[f] = np.nan
        if n_thr < 2 or rmax <= rmin:
            continue
        step = (rmax - rmin) / (n_thr - 1)

        best = np.inf
        best_thr = np.nan

        if objective == CLASSIFICATION:
            bins_cls[:] = 0
            for k in range(n):
                slot = _threshold_slot(resp[k], rmin, step, n_thr)
                bins_cls[slot, slab[idx[k]]] += 1
            nl0 = 0
            nl1 = 0
            nl2 = 0
            counts_l = np.empty(3, dtype=np.float64)
            counts_r = np.empty(3, dtype=np.float64)
            for t in range(n_thr):
                nl0 += bins_cls[t, 0]
                nl1 += bins_cls[t, 1]
                nl2 += bins_cls[t, 2]
                n_left = nl0 + nl1 + nl2
                n_right = n - n_left
                if n_left < min_leaf or n_right < min_leaf:
                    continue
                counts_l[0] = nl0
                counts_l[1] = nl1
                counts_l[2] = nl2
                counts_r[0] = bins_cls[:, 0].sum() - nl0
                counts_r[1] = bins_cls[:, 1].sum() - nl1
                counts_r[2] = bins_cls[:, 2].sum() - nl2
                obj = n_left * _weighted_entropy(counts_l, inv_prior) + n_right * _weighted_entropy(
                    counts_r, inv_prior
                )
                if obj < best:
                    best = obj
                    best_thr = rmin + step * t
        else:
            bins_all[:] = 0
            for k in range(n):
                bins_all[_threshold_slot(resp[k], rmin, step, n_thr)] += 1
            n_left_total = 0
            for t in range(n_thr):
                n_left_total += bins_all[t]
                n_right_total = n - n_left_total
                if n_left_total < min_leaf or n_right_total < min_leaf:
                    continue
                thr = rmin + step * t
                # mean vote per side
                lsx = 0.0
                lsy = 0.0
                lc = 0
                rsx = 0.0
                rsy = 0.0
                rc = 0
                for p in range(n_fg):
                    k = fg_pos[p]
                    i = idx[k]
                    if resp[k] < thr:
                        lsx += svx[i]
                        lsy += svy[i]
                        lc += 1
                    else:
                        rsx += svx[i]
                        rsy += svy[i]
                        rc += 1
                obj = 0.0
                if lc > 0:
                    mx = lsx / lc
                    my = lsy / lc
                    for p in range(n_fg):
                        k = fg_pos[p]
                        i = idx[k]
                        if resp[k] < thr:
                            obj += np.sqrt((svx[i] - mx) ** 2 + (svy[i] - my) ** 2)
                if rc > 0:
                    mx = rsx / rc
                    my = rsy / rc
                    for p in range(n_fg):
                        k = fg_pos[p]
                        i = idx[k]
                        if resp[k] >= thr:
                            obj += np.sqrt((svx[i] - mx) ** 2 + (svy[i] - my) ** 2)
                if obj < best:
                    best = obj
                    best_thr = thr
        out_obj[f] = best
        out_thr[f] = best_thr


@njit(cache=True)
def apply_forest(
    ii3,
    width,
    height,
    node_feat,
    node_thr,
    node_left,
    node_right,
    node_post,
    vote_start,
    vote_end,
    votes_mother,
    votes_daughter,
    roots,
):
    """Dense forest application on one image.

    Returns (vote_maps, posterior_maps): vote_maps[c] accumulates, for
    every pixel and tree, leaf posterior mass for foreground class c
    spread evenly over that leaf's stored votes (targets rounded to the
    nearest pixel, half away from the pixel origin; off-image targets
    dropped); posterior_maps[c] is the mean leaf posterior per class.
    Both are divided by the tree count.
    """
    tree_count = roots.size
    vote_maps = np.zeros((2, height, width), dtype=np.float64)
    post_maps = np.zeros((3, height, width), dtype=np.float64)
    for py in range(height):
        for px in range(width):
            for ti in range(tree_count):
                node = roots[ti]
                while node_left[node] >= 0:
                    r = _feature_value(ii3, node_feat[node], px, py, width, height)
                    if r < node_thr[node]:
                        node = node_left[node]
                    else:
                        node = node_right[node]
                for c in range(3):
                    post_maps[c, py, px] += node_post[node, c]
                s = vote_start[node, 0]
                e = vote_end[node, 0]
                if e > s and node_post[node, 1] > 0.0:
                    w = node_post[node, 1] / (e - s)
                    for j in range(s, e):
                        tx = int(np.floor(px + votes_mother[j, 0] + 0.5))
                        ty = int(np.floor(py + votes_mother[j, 1] + 0.5))
                        if 0 <= tx < width and 0 <= ty < height:
                            vote_maps[0, ty, tx] += w
                s = vote_start[node, 1]
                e = vote_end[node, 1]
                if e > s and node_post[node, 2] > 0.0:
                    w = node_post[node, 2] / (e - s)
                    for j in range(s, e):
                        tx = int(np.floor(px + votes_daughter[j, 0] + 0.5))
                        ty = int(np.floor(py + votes_daughter[j, 1] + 0.5))
                        if 0 <= tx < width and 0 <= ty < height:
                            vote_maps[1, ty, tx] += w
    vote_maps /= tree_count
    post_maps /= tree_count
    return vote_maps, post_maps
