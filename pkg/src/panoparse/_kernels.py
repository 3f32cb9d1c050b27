"""Compiled inner loops for the fusion pipeline.

Everything here is deterministic: loops run in a fixed order and
parallel sections write disjoint output slices only.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

_SIGMOID_SAT = 30.0  # |logit| beyond this is 0/1 exactly in float32


@njit(cache=True, parallel=True)
def refine_long_offsets(long_map, short_map, iterations):
    """Hop-based refinement of the long-range offsets.

    Each step replaces the vector at q by the exact displacement to
    r + short(r), where r is the rounded (clamped) cell the current
    vector lands on. Ideal maps are a fixed point: r lies on the
    keypoint disk, so r + short(r) is the keypoint itself.
    """
    P2, H, W = long_map.shape
    out = np.empty_like(long_map)
    for p in prange(P2 // 2):
        ly = long_map[2 * p]
        lx = long_map[2 * p + 1]
        sy = short_map[2 * p]
        sx = short_map[2 * p + 1]
        oy = out[2 * p]
        ox = out[2 * p + 1]
        for y in range(H):
            for x in range(W):
                dy = np.float64(ly[y, x])
                dx = np.float64(lx[y, x])
                for _ in range(iterations):
                    ty = y + dy + 0.5
                    tx = x + dx + 0.5
                    if ty < 0.0:
                        ty = 0.0
                    elif ty > H - 1:
                        ty = H - 1.0
                    if tx < 0.0:
                        tx = 0.0
                    elif tx > W - 1:
                        tx = W - 1.0
                    ry = int(ty)
                    rx = int(tx)
                    dy = ry + np.float64(sy[ry, rx]) - y
                    dx = rx + np.float64(sx[ry, rx]) - x
                oy[y, x] = np.float32(dy)
                ox[y, x] = np.float32(dx)
    return out


@njit(cache=True)
def splat_bilinear(ty, tx, w, out):
    """Accumulate weighted votes at continuous positions.

    Each vote is split bilinearly over the four surrounding cells;
    shares that fall outside the map are dropped.
    """
    H, W = out.shape
    for i in range(ty.size):
        yv = ty[i]
        xv = tx[i]
        wv = w[i]
        y0 = int(np.floor(yv))
        x0 = int(np.floor(xv))
        fy = yv - y0
        fx = xv - x0
        if fy == 0.0 and fx == 0.0:
            if 0 <= y0 < H and 0 <= x0 < W:
                out[y0, x0] += wv
            continue
        in_y0 = 0 <= y0 < H
        in_y1 = 0 <= y0 + 1 < H
        in_x0 = 0 <= x0 < W
        in_x1 = 0 <= x0 + 1 < W
        if in_y0 and in_x0:
            out[y0, x0] += wv * (1.0 - fy) * (1.0 - fx)
        if in_y0 and in_x1:
            out[y0, x0 + 1] += wv * (1.0 - fy) * fx
        if in_y1 and in_x0:
            out[y0 + 1, x0] += wv * fy * (1.0 - fx)
        if in_y1 and in_x1:
            out[y0 + 1, x0 + 1] += wv * fy * fx


@njit(cache=True)
def vote_channel(short_dy, short_dx, logits, long_dy, long_dx,
                 w_short, w_long, logit_cutoff, out):
    """One score channel: sigmoid-weighted short votes plus unit-weight
    long votes, bilinearly splatted and summed with (w_short, w_long).

    Short votes with logits at or below the cutoff have weight exactly
    zero after float32 sigmoid saturation, so they are skipped as
    no-ops.
    """
    H, W = out.shape
    do_short = w_short != 0.0
    do_long = w_long != 0.0
    for y in range(H):
        for x in range(W):
            if do_long:
                yv = y + np.float64(long_dy[y, x])
                xv = x + np.float64(long_dx[y, x])
                y0 = int(np.floor(yv))
                x0 = int(np.floor(xv))
                fy = yv - y0
                fx = xv - x0
                if fy == 0.0 and fx == 0.0:
                    if 0 <= y0 < H and 0 <= x0 < W:
                        out[y0, x0] += w_long
                else:
                    if 0 <= y0 < H:
                        if 0 <= x0 < W:
                            out[y0, x0] += w_long * (1.0 - fy) * (1.0 - fx)
                        if 0 <= x0 + 1 < W:
                            out[y0, x0 + 1] += w_long * (1.0 - fy) * fx
                    if 0 <= y0 + 1 < H:
                        if 0 <= x0 < W:
                            out[y0 + 1, x0] += w_long * fy * (1.0 - fx)
                        if 0 <= x0 + 1 < W:
                            out[y0 + 1, x0 + 1] += w_long * fy * fx
            if do_short:
                z = np.float64(logits[y, x])
                if z <= logit_cutoff:
                    continue
                if z > _SIGMOID_SAT:
                    wv = w_short
                else:
                    wv = w_short / (1.0 + np.exp(-z))
                yv = y + np.float64(short_dy[y, x])
                xv = x + np.float64(short_dx[y, x])
                y0 = int(np.floor(yv))
                x0 = int(np.floor(xv))
                fy = yv - y0
                fx = xv - x0
                if fy == 0.0 and fx == 0.0:
                    if 0 <= y0 < H and 0 <= x0 < W:
                        out[y0, x0] += wv
                else:
                    if 0 <= y0 < H:
                        if 0 <= x0 < W:
                            out[y0, x0] += wv * (1.0 - fy) * (1.0 - fx)
                        if 0 <= x0 + 1 < W:
                            out[y0, x0 + 1] += wv * (1.0 - fy) * fx
                    if 0 <= y0 + 1 < H:
                        if 0 <= x0 < W:
                            out[y0 + 1, x0] += wv * fy * (1.0 - fx)
                        if 0 <= x0 + 1 < W:
                            out[y0 + 1, x0 + 1] += wv * fy * fx


@njit(cache=True)
def find_peaks(score, threshold, radius, out_y, out_x):
    """Collect cells above threshold with no strictly greater value
    within the Chebyshev radius (plateau ties all qualify).

    Returns the peak count, or -1 if the output arrays are too small.
    """
    H, W = score.shape
    cap = out_y.size
    n = 0
    for y in range(H):
        for x in range(W):
            v = score[y, x]
            if v <= threshold:
                continue
            y0 = max(y - radius, 0)
            y1 = min(y + radius + 1, H)
            x0 = max(x - radius, 0)
            x1 = min(x + radius + 1, W)
            is_max = True
            for yy in range(y0, y1):
                for xx in range(x0, x1):
                    if score[yy, xx] > v:
                        is_max = False
                        break
                if not is_max:
                    break
            if is_max:
                if n >= cap:
                    return -1
                out_y[n] = y
                out_x[n] = x
                n += 1
    return n


@njit(cache=True)
def disk_mean_probs(logits, ys, xs, disk_dy, disk_dx, out):
    """Mean sigmoid heatmap probability over the in-bounds disk around
    each (y, x); saturated logits map to exact 0/1."""
    H, W = logits.shape
    for i in range(ys.size):
        cy = ys[i]
        cx = xs[i]
        total = 0.0
        count = 0
        for d in range(disk_dy.size):
            y = cy + disk_dy[d]
            x = cx + disk_dx[d]
            if 0 <= y < H and 0 <= x < W:
                z = np.float64(logits[y, x])
                if z > _SIGMOID_SAT:
                    total += 1.0
                elif z >= -_SIGMOID_SAT:
                    total += 1.0 / (1.0 + np.exp(-z))
                count += 1
        out[i] = total / count if count else 0.0


@njit(cache=True)
def _block_bounds(pred_y, pred_x, block, nby, nbx):
    """Per-block min/max of each predicted keypoint coordinate."""
    P, H, W = pred_y.shape
    boxes = np.empty((nby, nbx, P, 4), np.float64)
    for bi in range(nby):
        y0 = bi * block
        y1 = min(y0 + block, H)
        for bj in range(nbx):
            x0 = bj * block
            x1 = min(x0 + block, W)
            for k in range(P):
                # float32 comparisons only, so the bounds are exact
                mny = pred_y[k, y0, x0]
                mxy = mny
                mnx = pred_x[k, y0, x0]
                mxx = mnx
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        vy = pred_y[k, y, x]
                        vx = pred_x[k, y, x]
                        mny = min(mny, vy)
                        mxy = max(mxy, vy)
                        mnx = min(mnx, vx)
                        mxx = max(mxx, vx)
                boxes[bi, bj, k, 0] = np.float64(mny)
                boxes[bi, bj, k, 1] = np.float64(mxy)
                boxes[bi, bj, k, 2] = np.float64(mnx)
                boxes[bi, bj, k, 3] = np.float64(mxx)
    return boxes


@njit(cache=True, inline="always")
def _box_candidates(box, kp_y, kp_x, pool, npool, cand, lbs):
    """Prune a candidate pool against one bounding box.

    Writes the surviving candidates (those whose summed box-to-point
    lower bound does not exceed the best worst-case upper bound) into
    ``cand`` sorted by lower bound, and returns their count.
    """
    P = box.shape[0]
    ub = np.inf
    for ji in range(npool):
        j = pool[ji]
        lb = 0.0
        s = 0.0
        for k in range(P):
            mny = box[k, 0]
            mxy = box[k, 1]
            mnx = box[k, 2]
            mxx = box[k, 3]
            ay = abs(kp_y[j, k] - mny)
            by = abs(kp_y[j, k] - mxy)
            dy = ay if ay > by else by
            ax = abs(kp_x[j, k] - mnx)
            bx = abs(kp_x[j, k] - mxx)
            dx = ax if ax > bx else bx
            s += np.sqrt(dy * dy + dx * dx)
            gy = max(max(mny - kp_y[j, k], kp_y[j, k] - mxy), 0.0)
            gx = max(max(mnx - kp_x[j, k], kp_x[j, k] - mxx), 0.0)
            lb += np.sqrt(gy * gy + gx * gx)
        lbs[ji] = lb
        if s < ub:
            ub = s
    ub += 1e-6
    nc = 0
    for ji in range(npool):
        if lbs[ji] <= ub:
            cand[nc] = pool[ji]
            lbs[nc] = lbs[ji]
            nc += 1
    # insertion sort by lower bound; ranges are tiny
    for a in range(1, nc):
        jv = cand[a]
        lv = lbs[a]
        b = a - 1
        while b >= 0 and lbs[b] > lv:
            cand[b + 1] = cand[b]
            lbs[b + 1] = lbs[b]
            b -= 1
        cand[b + 1] = jv
        lbs[b + 1] = lv
    return nc


@njit(cache=True, parallel=True)
def assign_nearest_instance(pred_y, pred_x, kp_y, kp_x, block, tile_blocks, out):
    """Per-pixel argmin over instances of the summed keypoint distances.

    Exact, with two pruning levels: coarse tiles cut the instance pool
    per region, fine blocks cut it again, and the per-pixel scan stops
    as soon as the sorted lower bounds rule out all remaining
    candidates. The cost is therefore nearly independent of the
    instance count for spatially spread instances. Ties go to the
    lower instance index.
    """
    P, H, W = pred_y.shape
    M = kp_y.shape[0]
    nby = (H + block - 1) // block
    nbx = (W + block - 1) // block
    boxes = _block_bounds(pred_y, pred_x, block, nby, nbx)

    nty = (nby + tile_blocks - 1) // tile_blocks
    ntx = (nbx + tile_blocks - 1) // tile_blocks
    tile_cand = np.empty((nty, ntx, M), np.int64)
    tile_nc = np.empty((nty, ntx), np.int64)
    everyone = np.empty(M, np.int64)
    for j in range(M):
        everyone[j] = j
    tbox = np.empty((P, 4), np.float64)
    scratch_c = np.empty(M, np.int64)
    scratch_l = np.empty(M, np.float64)
    for ti in range(nty):
        b0 = ti * tile_blocks
        b1 = min(b0 + tile_blocks, nby)
        for tj in range(ntx):
            c0 = tj * tile_blocks
            c1 = min(c0 + tile_blocks, nbx)
            for k in range(P):
                tbox[k, 0] = np.inf
                tbox[k, 1] = -np.inf
                tbox[k, 2] = np.inf
                tbox[k, 3] = -np.inf
            for bi in range(b0, b1):
                for bj in range(c0, c1):
                    for k in range(P):
                        tbox[k, 0] = min(tbox[k, 0], boxes[bi, bj, k, 0])
                        tbox[k, 1] = max(tbox[k, 1], boxes[bi, bj, k, 1])
                        tbox[k, 2] = min(tbox[k, 2], boxes[bi, bj, k, 2])
                        tbox[k, 3] = max(tbox[k, 3], boxes[bi, bj, k, 3])
            nc = _box_candidates(tbox, kp_y, kp_x, everyone, M, scratch_c, scratch_l)
            tile_nc[ti, tj] = nc
            for a in range(nc):
                tile_cand[ti, tj, a] = scratch_c[a]

    for bi in prange(nby):
        cand = np.empty(M, np.int64)
        lbs = np.empty(M, np.float64)
        y0 = bi * block
        y1 = min(y0 + block, H)
        ti = bi // tile_blocks
        for bj in range(nbx):
            x0 = bj * block
            x1 = min(x0 + block, W)
            tj = bj // tile_blocks
            pool = tile_cand[ti, tj]
            npool = tile_nc[ti, tj]
            nc = _box_candidates(boxes[bi, bj], kp_y, kp_x, pool, npool, cand, lbs)
            if nc == 1:
                fill = np.int32(cand[0] + 1)
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        out[y, x] = fill
                continue
            for y in range(y0, y1):
                for x in range(x0, x1):
                    best = np.inf
                    bj_best = 0
                    for ci in range(nc):
                        j = cand[ci]
                        if lbs[ci] > best:
                            break
                        d = 0.0
                        for k in range(P):
                            da = np.float64(pred_y[k, y, x]) - kp_y[j, k]
                            db = np.float64(pred_x[k, y, x]) - kp_x[j, k]
                            d += np.sqrt(da * da + db * db)
                            if d > best:
                                break
                        if d < best or (d == best and j + 1 < bj_best):
                            best = d
                            bj_best = j + 1
                    out[y, x] = np.int32(bj_best)


@njit(cache=True)
def greedy_detect(kp_kind, kp_y, kp_x, kp_score, middle, scores, edges,
                  seed_ok, proximity, max_instances,
                  out_pos, out_score, out_seed):
    """Greedy best-first grouping of keypoints into instances.

    Keypoints arrive sorted by score. A seed within the proximity
    radius of the same-kind keypoint of an accepted instance is
    rejected; otherwise missing kinds are derived breadth-first along
    the graph edges, each hop re-based at the sampled cell. Returns the
    instance count. Kinds left unreachable stay NaN for the caller to
    synthesize.
    """
    P, H, W = scores.shape
    E = edges.shape[0]
    n_inst = 0
    r2 = proximity * proximity
    queue = np.empty(P, np.int64)
    for i in range(kp_kind.size):
        if n_inst >= max_instances:
            break
        kind = kp_kind[i]
        if not seed_ok[kind]:
            continue
        y = kp_y[i]
        x = kp_x[i]
        rejected = False
        for j in range(n_inst):
            dy = out_pos[j, kind, 0] - y
            dx = out_pos[j, kind, 1] - x
            if dy * dy + dx * dx <= r2:
                rejected = True
                break
        if rejected:
            continue
        for k in range(P):
            out_pos[n_inst, k, 0] = np.nan
            out_score[n_inst, k] = 0.0
        out_pos[n_inst, kind, 0] = y
        out_pos[n_inst, kind, 1] = x
        out_score[n_inst, kind] = kp_score[i]
        out_seed[n_inst] = kind
        head = 0
        tail = 1
        queue[0] = kind
        while head < tail:
            src = queue[head]
            head += 1
            sy = out_pos[n_inst, src, 0]
            sx = out_pos[n_inst, src, 1]
            cy = int(np.floor(sy + 0.5))
            cx = int(np.floor(sx + 0.5))
            if cy < 0:
                cy = 0
            elif cy >= H:
                cy = H - 1
            if cx < 0:
                cx = 0
            elif cx >= W:
                cx = W - 1
            for e in range(E):
                if edges[e, 0] != src:
                    continue
                dst = edges[e, 1]
                if not np.isnan(out_pos[n_inst, dst, 0]):
                    continue
                ny = cy + np.float64(middle[2 * e, cy, cx])
                nx = cx + np.float64(middle[2 * e + 1, cy, cx])
                if ny < 0.0:
                    ny = 0.0
                elif ny > H - 1:
                    ny = H - 1.0
                if nx < 0.0:
                    nx = 0.0
                elif nx > W - 1:
                    nx = W - 1.0
                dcy = int(np.floor(ny + 0.5))
                dcx = int(np.floor(nx + 0.5))
                out_pos[n_inst, dst, 0] = ny
                out_pos[n_inst, dst, 1] = nx
                out_score[n_inst, dst] = np.float64(scores[dst, dcy, dcx])
                queue[tail] = dst
                tail += 1
        n_inst += 1
    return n_inst


@njit(cache=True)
def greedy_nms(boxes, order, iou_threshold, suppressed):
    """Greedy box suppression: walk boxes in score order, suppress any
    later box overlapping a kept one beyond the threshold. Degenerate
    boxes count as IoU 0 against everything except an exact duplicate.
    """
    n = order.size
    for r in range(n):
        i = order[r]
        if suppressed[i]:
            continue
        ay0 = boxes[i, 0]
        ax0 = boxes[i, 1]
        ay1 = boxes[i, 2]
        ax1 = boxes[i, 3]
        area_i = (ay1 - ay0) * (ax1 - ax0)
        for s in range(r + 1, n):
            j = order[s]
            if suppressed[j]:
                continue
            if (boxes[j, 0] == ay0 and boxes[j, 1] == ax0
                    and boxes[j, 2] == ay1 and boxes[j, 3] == ax1):
                if 1.0 > iou_threshold:
                    suppressed[j] = True
                continue
            iy = min(ay1, boxes[j, 2]) - max(ay0, boxes[j, 0])
            ix = min(ax1, boxes[j, 3]) - max(ax0, boxes[j, 1])
            if iy <= 0.0 or ix <= 0.0:
                continue
            inter = iy * ix
            union = area_i + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
            if union <= 0.0:
                continue
            if inter / union > iou_threshold:
                suppressed[j] = True


@njit(cache=True)
def assign_nearest_instance_naive(pred_y, pred_x, kp_y, kp_x, out):
    """Unpruned reference scan; used for small maps and cross-checks."""
    P, H, W = pred_y.shape
    M = kp_y.shape[0]
    for y in range(H):
        for x in range(W):
            best = np.inf
            bj = 0
            for j in range(M):
                d = 0.0
                for k in range(P):
                    a = np.float64(pred_y[k, y, x]) - kp_y[j, k]
                    b = np.float64(pred_x[k, y, x]) - kp_x[j, k]
                    d += np.sqrt(a * a + b * b)
                if d < best:
                    best = d
                    bj = j + 1
            out[y, x] = np.int32(bj)
