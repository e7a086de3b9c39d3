"""Pure-Python/numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``PEGSOLVE_PURE_PYTHON=1``. Every function consumes the same inputs (including
caller-supplied uniforms) as its compiled twin and returns identical results.
"""

from collections import deque

import numpy as np


def bfs_all_pairs(indptr, indices):
    n = len(indptr) - 1
    dist = np.full((n, n), -1, dtype=np.int32)
    count = np.zeros((n, n), dtype=np.float64)
    for s in range(n):
        d = dist[s]
        c = count[s]
        d[s] = 0
        c[s] = 1.0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            for k in range(indptr[v], indptr[v + 1]):
                w = indices[k]
                if d[w] < 0:
                    d[w] = d[v] + 1
                    queue.append(w)
                if d[w] == d[v] + 1:
                    c[w] += c[v]
    return dist, count


def sample_paths(indptr, indices, dist, count, src, dst, uniforms):
    batch = len(dst)
    width = uniforms.shape[1] + 1
    paths = np.empty((batch, width), dtype=np.int32)
    lengths = np.empty(batch, dtype=np.int32)
    for b in range(batch):
        d = int(dst[b])
        x = int(src)
        row = [x]
        step = 0
        while x != d:
            r = uniforms[b, step] * count[x, d]
            acc = 0.0
            chosen = -1
            for k in range(indptr[x], indptr[x + 1]):
                y = int(indices[k])
                if dist[y, d] == dist[x, d] - 1:
                    chosen = y
                    acc += count[y, d]
                    if r < acc:
                        break
            x = chosen
            step += 1
            row.append(x)
        lengths[b] = len(row)
        paths[b, : len(row)] = row
        paths[b, len(row):] = x
    return paths, lengths


def reference_actions(dist, action_table, paths, lengths, t, ploc):
    batch, n = ploc.shape
    out = np.empty((batch, n), dtype=np.int32)
    for b in range(batch):
        tb = int(t[b])
        remaining = paths[b, tb: lengths[b]]
        for i in range(n):
            p = ploc[b, i]
            target = paths[b, lengths[b] - 1]
            for offset, w in enumerate(remaining):
                if dist[p, w] <= offset:
                    target = w
                    break
            slots = action_table[p]
            legal = slots >= 0
            d = np.where(legal, dist[np.where(legal, slots, 0), target], 1 << 30)
            d = np.where(d < 0, 1 << 30, d)
            out[b, i] = int(np.argmin(d))
    return out


def value_dp(action_table, is_exit, evader_dist, trans, n_members, horizon,
             policy=None):
    n_nodes, n_slots = action_table.shape
    n_joint = n_nodes ** n_members
    values = np.zeros((n_nodes, n_joint), dtype=np.float64)
    best = np.full((n_nodes, n_joint), -1, dtype=np.int64)
    # joint locations and joint actions as digit arrays
    locs = np.stack(
        [(np.arange(n_joint) // n_nodes ** m) % n_nodes for m in range(n_members)],
        axis=1,
    )
    acts = np.stack(
        [(np.arange(n_slots ** n_members) // n_slots ** m) % n_slots
         for m in range(n_members)],
        axis=1,
    )
    strides = n_nodes ** np.arange(n_members)
    is_exit = np.asarray(is_exit, dtype=bool)
    order = np.argsort(-np.asarray(evader_dist), kind="stable")
    for x in order:
        t = evader_dist[x]
        if t < 0 or t >= horizon or is_exit[x]:
            continue
        succ = np.nonzero(trans[x])[0]
        probs = trans[x, succ]
        best_val = np.full(n_joint, -np.inf)
        total = np.zeros(n_joint)
        for aidx, joint in enumerate(acts):
            nxt = action_table[locs, joint[None, :]]          # [n_joint, n]
            valid = np.all(nxt >= 0, axis=1)
            if not valid.any():
                continue
            nxt_safe = np.where(nxt >= 0, nxt, 0)
            nidx = nxt_safe @ strides
            caught = (nxt_safe[:, :, None] == succ[None, None, :]).any(axis=1)
            outcome = np.where(
                caught, 1.0,
                np.where(is_exit[succ][None, :], -1.0,
                         1.0 if t + 1 >= horizon else values[succ[None, :], nidx[:, None]]),
            )
            acc = outcome @ probs
            if policy is None:
                better = valid & (acc > best_val)
                best_val = np.where(better, acc, best_val)
                best[x] = np.where(better, aidx, best[x])
            else:
                weight = np.prod(
                    policy[x, np.arange(n_joint)[:, None], np.arange(n_members)[None, :],
                           joint[None, :]],
                    axis=1,
                )
                total += np.where(valid, weight * acc, 0.0)
        values[x] = best_val if policy is None else total
    return values, best


def _project_floor(x, floor):
    n = len(x)
    mass = 1.0 - n * floor
    y = x - floor
    srt = np.sort(y)[::-1]
    cum = np.cumsum(srt)
    ks = np.arange(1, n + 1)
    cond = srt - (cum - mass) / ks > 0
    theta = (cum[cond][-1] - mass) / ks[cond][-1] if cond.any() else 0.0
    return np.maximum(y - theta, 0.0) + floor


def regret_matching(payoff, iters, init_row, init_col):
    m, k = payoff.shape
    row = np.array(init_row, dtype=np.float64)
    col = np.array(init_col, dtype=np.float64)
    reg_r = np.zeros(m)
    reg_c = np.zeros(k)
    sum_r = np.zeros(m)
    sum_c = np.zeros(k)
    for _ in range(iters):
        sum_r += row
        sum_c += col
        u_r = payoff @ col
        u_c = -(payoff.T @ row)
        reg_r += u_r - row @ u_r
        reg_c += u_c - col @ u_c
        pos = np.maximum(reg_r, 0.0)
        row = pos / pos.sum() if pos.sum() > 0 else np.full(m, 1.0 / m)
        pos = np.maximum(reg_c, 0.0)
        col = pos / pos.sum() if pos.sum() > 0 else np.full(k, 1.0 / k)
    if iters > 0:
        return sum_r / iters, sum_c / iters
    return row, col


def projected_replicator(payoff, iters, step, gamma, init_row, init_col):
    m, k = payoff.shape
    row = np.array(init_row, dtype=np.float64)
    col = np.array(init_col, dtype=np.float64)
    min_r = min_c = np.inf
    for _ in range(iters):
        u_r = payoff @ col
        u_c = -(payoff.T @ row)
        row = row + step * row * (u_r - row @ u_r)
        col = col + step * col * (u_c - col @ u_c)
        row = _project_floor(row, gamma / m)
        col = _project_floor(col, gamma / k)
        min_r = min(min_r, row.min())
        min_c = min(min_c, col.min())
    return row, col, float(min_r), float(min_c)
