# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Signatures mirror :mod:`pegsolve._pykernels` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def bfs_all_pairs(const int[::1] indptr, const int[::1] indices):
    """All-pairs hop distances (-1 when unreachable) and shortest-path counts."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    dist_arr = np.full((n, n), -1, dtype=np.int32)
    count_arr = np.zeros((n, n), dtype=np.float64)
    cdef int[:, ::1] dist = dist_arr
    cdef double[:, ::1] count = count_arr
    queue_arr = np.empty(max(n, 1), dtype=np.int32)
    cdef int[::1] queue = queue_arr
    cdef Py_ssize_t s, head, tail, k
    cdef int v, w
    for s in range(n):
        dist[s, s] = 0
        count[s, s] = 1.0
        queue[0] = <int>s
        head = 0
        tail = 1
        while head < tail:
            v = queue[head]
            head += 1
            for k in range(indptr[v], indptr[v + 1]):
                w = indices[k]
                if dist[s, w] < 0:
                    dist[s, w] = dist[s, v] + 1
                    queue[tail] = w
                    tail += 1
                if dist[s, w] == dist[s, v] + 1:
                    count[s, w] += count[s, v]
    return dist_arr, count_arr


def sample_paths(const int[::1] indptr, const int[::1] indices,
                 const int[:, ::1] dist, const double[:, ::1] count,
                 int src, const int[::1] dst, const double[:, ::1] uniforms):
    """Uniform shortest paths src -> dst[b], driven by caller-supplied uniforms.

    Returns (paths, lengths); paths rows are padded with the final node.
    """
    cdef Py_ssize_t batch = dst.shape[0]
    cdef Py_ssize_t width = uniforms.shape[1] + 1
    paths_arr = np.empty((batch, width), dtype=np.int32)
    lengths_arr = np.empty(batch, dtype=np.int32)
    cdef int[:, ::1] paths = paths_arr
    cdef int[::1] lengths = lengths_arr
    cdef Py_ssize_t b, step, k, j
    cdef int x, d, y, chosen
    cdef double r, acc
    for b in range(batch):
        d = dst[b]
        x = src
        paths[b, 0] = x
        step = 0
        while x != d:
            r = uniforms[b, step] * count[x, d]
            acc = 0.0
            chosen = -1
            for k in range(indptr[x], indptr[x + 1]):
                y = indices[k]
                if dist[y, d] == dist[x, d] - 1:
                    chosen = y
                    acc += count[y, d]
                    if r < acc:
                        break
            x = chosen
            step += 1
            paths[b, step] = x
        lengths[b] = <int>(step + 1)
        for j in range(step + 1, width):
            paths[b, j] = x
    return paths_arr, lengths_arr


def reference_actions(const int[:, ::1] dist, const int[:, ::1] action_table,
                      const int[:, ::1] paths, const int[::1] lengths,
                      const int[::1] t, const int[:, ::1] ploc):
    """Interception reference slot for every (episode, member)."""
    cdef Py_ssize_t batch = ploc.shape[0]
    cdef Py_ssize_t n = ploc.shape[1]
    cdef Py_ssize_t n_slots = action_table.shape[1]
    out_arr = np.empty((batch, n), dtype=np.int32)
    cdef int[:, ::1] out = out_arr
    cdef Py_ssize_t b, i, k, a
    cdef int p, w, target, node, best_slot, best_d, dd
    for b in range(batch):
        for i in range(n):
            p = ploc[b, i]
            target = paths[b, lengths[b] - 1]
            for k in range(t[b], lengths[b]):
                w = paths[b, k]
                if dist[p, w] <= k - t[b]:
                    target = w
                    break
            best_slot = -1
            best_d = 1 << 30
            for a in range(n_slots):
                node = action_table[p, a]
                if node < 0:
                    continue
                dd = dist[node, target]
                if dd >= 0 and dd < best_d:
                    best_d = dd
                    best_slot = <int>a
            out[b, i] = best_slot
    return out_arr


def value_dp(const int[:, ::1] action_table, const unsigned char[::1] is_exit,
             const int[::1] evader_dist, const double[:, ::1] trans,
             int n_members, int horizon, policy=None):
    """Backward induction over (evader node, joint pursuer locations).

    With ``policy`` None the pursuer maximizes; otherwise ``policy`` is a
    float64 array [V, V**n, n, A] of per-member action probabilities.
    Returns (values [V, V**n], best joint action index [V, V**n]).
    """
    cdef Py_ssize_t n_nodes = action_table.shape[0]
    cdef Py_ssize_t n_slots = action_table.shape[1]
    cdef Py_ssize_t n_joint = n_nodes ** n_members
    cdef Py_ssize_t n_acts = n_slots ** n_members
    values_arr = np.zeros((n_nodes, n_joint), dtype=np.float64)
    best_arr = np.full((n_nodes, n_joint), -1, dtype=np.int64)
    cdef double[:, ::1] values = values_arr
    cdef long long[:, ::1] best = best_arr
    cdef bint optimize = policy is None
    cdef double[:, :, :, ::1] pol
    if not optimize:
        pol = np.ascontiguousarray(policy, dtype=np.float64)
    order = np.argsort(-np.asarray(evader_dist), kind="stable").astype(np.int32)
    cdef int[::1] order_v = order
    cdef int[::1] locs = np.empty(n_members, dtype=np.int32)
    cdef int[::1] nxt = np.empty(n_members, dtype=np.int32)
    cdef Py_ssize_t oi, pidx, aidx, m, rem, nidx, stride
    cdef int x, u, t, slot, node
    cdef double acc, total, weight, outcome, best_val
    cdef bint valid, caught
    for oi in range(n_nodes):
        x = order_v[oi]
        t = evader_dist[x]
        if t < 0 or t >= horizon or is_exit[x]:
            continue
        for pidx in range(n_joint):
            rem = pidx
            for m in range(n_members):
                locs[m] = <int>(rem % n_nodes)
                rem = rem // n_nodes
            best_val = -INFINITY
            total = 0.0
            for aidx in range(n_acts):
                rem = aidx
                valid = True
                weight = 1.0
                nidx = 0
                stride = 1
                for m in range(n_members):
                    slot = <int>(rem % n_slots)
                    rem = rem // n_slots
                    node = action_table[locs[m], slot]
                    if node < 0:
                        valid = False
                        break
                    if not optimize:
                        weight *= pol[x, pidx, m, slot]
                    nxt[m] = node
                    nidx += node * stride
                    stride *= n_nodes
                if not valid:
                    continue
                if not optimize and weight == 0.0:
                    continue
                acc = 0.0
                for u in range(n_nodes):
                    if trans[x, u] == 0.0:
                        continue
                    caught = False
                    for m in range(n_members):
                        if nxt[m] == u:
                            caught = True
                            break
                    if caught:
                        outcome = 1.0
                    elif is_exit[u]:
                        outcome = -1.0
                    elif t + 1 >= horizon:
                        outcome = 1.0
                    else:
                        outcome = values[u, nidx]
                    acc += trans[x, u] * outcome
                if optimize:
                    if acc > best_val:
                        best_val = acc
                        best[x, pidx] = aidx
                else:
                    total += weight * acc
            values[x, pidx] = best_val if optimize else total
    return values_arr, best_arr


cdef void _project_floor(double* x, Py_ssize_t n, double floor, double* buf) noexcept:
    # Euclidean projection onto {x_i >= floor, sum x = 1}.
    cdef Py_ssize_t i, j
    cdef double mass = 1.0 - n * floor
    cdef double tmp, cum = 0.0, theta = 0.0
    for i in range(n):
        buf[i] = x[i] - floor
    for i in range(1, n):
        tmp = buf[i]
        j = i - 1
        while j >= 0 and buf[j] < tmp:
            buf[j + 1] = buf[j]
            j -= 1
        buf[j + 1] = tmp
    for i in range(n):
        cum += buf[i]
        if buf[i] - (cum - mass) / (i + 1) > 0:
            theta = (cum - mass) / (i + 1)
    for i in range(n):
        tmp = x[i] - floor - theta
        x[i] = (tmp if tmp > 0 else 0.0) + floor


def regret_matching(const double[:, ::1] payoff, long iters,
                    const double[::1] init_row, const double[::1] init_col):
    """Time-averaged simultaneous regret matching on a zero-sum matrix game."""
    cdef Py_ssize_t m = payoff.shape[0], k = payoff.shape[1]
    cdef double[::1] row = np.array(init_row, dtype=np.float64)
    cdef double[::1] col = np.array(init_col, dtype=np.float64)
    cdef double[::1] reg_r = np.zeros(m), reg_c = np.zeros(k)
    sum_r_arr = np.zeros(m)
    sum_c_arr = np.zeros(k)
    cdef double[::1] sum_r = sum_r_arr, sum_c = sum_c_arr
    cdef double[::1] u_r = np.zeros(m), u_c = np.zeros(k)
    cdef Py_ssize_t it, i, j
    cdef double v, pos
    for it in range(iters):
        for i in range(m):
            sum_r[i] += row[i]
        for j in range(k):
            sum_c[j] += col[j]
        for i in range(m):
            u_r[i] = 0.0
            for j in range(k):
                u_r[i] += payoff[i, j] * col[j]
        for j in range(k):
            u_c[j] = 0.0
            for i in range(m):
                u_c[j] -= payoff[i, j] * row[i]
        v = 0.0
        for i in range(m):
            v += row[i] * u_r[i]
        for i in range(m):
            reg_r[i] += u_r[i] - v
        v = 0.0
        for j in range(k):
            v += col[j] * u_c[j]
        for j in range(k):
            reg_c[j] += u_c[j] - v
        pos = 0.0
        for i in range(m):
            if reg_r[i] > 0:
                pos += reg_r[i]
        for i in range(m):
            row[i] = (reg_r[i] / pos if reg_r[i] > 0 else 0.0) if pos > 0 else 1.0 / m
        pos = 0.0
        for j in range(k):
            if reg_c[j] > 0:
                pos += reg_c[j]
        for j in range(k):
            col[j] = (reg_c[j] / pos if reg_c[j] > 0 else 0.0) if pos > 0 else 1.0 / k
    if iters > 0:
        return sum_r_arr / iters, sum_c_arr / iters
    return np.asarray(row).copy(), np.asarray(col).copy()


def projected_replicator(const double[:, ::1] payoff, long iters, double step,
                         double gamma, const double[::1] init_row,
                         const double[::1] init_col):
    """Projected replicator dynamics; returns final strategies and the
    smallest probability seen on each side across all iterates."""
    cdef Py_ssize_t m = payoff.shape[0], k = payoff.shape[1]
    row_arr = np.array(init_row, dtype=np.float64)
    col_arr = np.array(init_col, dtype=np.float64)
    cdef double[::1] row = row_arr, col = col_arr
    cdef double[::1] u_r = np.zeros(m), u_c = np.zeros(k)
    cdef double[::1] buf = np.zeros(max(m, k))
    cdef double floor_r = gamma / m, floor_c = gamma / k
    cdef double min_r = INFINITY, min_c = INFINITY
    cdef Py_ssize_t it, i, j
    cdef double v_r, v_c
    for it in range(iters):
        for i in range(m):
            u_r[i] = 0.0
            for j in range(k):
                u_r[i] += payoff[i, j] * col[j]
        for j in range(k):
            u_c[j] = 0.0
            for i in range(m):
                u_c[j] -= payoff[i, j] * row[i]
        v_r = 0.0
        for i in range(m):
            v_r += row[i] * u_r[i]
        v_c = 0.0
        for j in range(k):
            v_c += col[j] * u_c[j]
        for i in range(m):
            row[i] += step * row[i] * (u_r[i] - v_r)
        for j in range(k):
            col[j] += step * col[j] * (u_c[j] - v_c)
        _project_floor(&row[0], m, floor_r, &buf[0])
        _project_floor(&col[0], k, floor_c, &buf[0])
        for i in range(m):
            if row[i] < min_r:
                min_r = row[i]
        for j in range(k):
            if col[j] < min_c:
                min_c = col[j]
    return row_arr, col_arr, min_r, min_c
