"""Compiled per-pixel LMI kernel.

Mutual information is evaluated from integer counts as

    ((S_joint - S_cur) + (n ln n - S_ref)) / n,   S = sum over bins of c ln c,

grouped so that a constant patch on either side cancels to exactly 0, with every ``c ln c`` taken from a shared table and each sum accumulated in
ascending bin order. Empty bins contribute an exact 0.0, so skipping them
does not change the result. The pure-Python path in ``lmi`` uses the same
order and reproduces these results bit for bit.

For each row and each search offset the paired histogram slides along the
row (one column out, one column in), so a pixel/offset pair costs O(side)
count updates instead of O(side^2).
"""

import numpy as np
from numba import njit


@njit(nogil=True, cache=True)
def lmi_rows(refpad, curpad, height, width, radius, search_radius, levels, clnc,
             row0, row1, out_value, out_drow, out_dcol):
    side = 2 * radius + 1
    n = side * side
    n_log_n = clnc[n]
    ca = np.zeros((width, levels), dtype=np.int64)
    present_a = np.zeros((width, levels), dtype=np.int64)
    n_present_a = np.zeros(width, dtype=np.int64)
    s_ref = np.empty(width)
    cb = np.zeros(levels, dtype=np.int64)
    present_b = np.zeros(levels, dtype=np.int64)
    joint = np.zeros(levels * levels, dtype=np.int64)
    best = np.empty(width)
    best_norm = np.empty(width, dtype=np.int64)

    for i in range(row0, row1):
        ca[:, :] = 0
        for j in range(width):
            for u in range(side):
                for v in range(side):
                    ca[j, refpad[i + u, j + v]] += 1
            k = 0
            acc = 0.0
            for a in range(levels):
                acc += clnc[ca[j, a]]
                if ca[j, a] > 0:
                    present_a[j, k] = a
                    k += 1
            n_present_a[j] = k
            s_ref[j] = acc
            best[j] = -1.0
            best_norm[j] = 1 << 30

        for dr in range(-search_radius, search_radius + 1):
            ii = i + dr
            if ii < 0 or ii >= height:
                continue
            for dc in range(-search_radius, search_radius + 1):
                j0 = max(0, -dc)
                j1 = min(width, width - dc)
                if j0 >= j1:
                    continue
                joint[:] = 0
                cb[:] = 0
                for u in range(side):
                    for v in range(side):
                        a = refpad[i + u, j0 + v]
                        b = curpad[ii + u, j0 + dc + v]
                        joint[a * levels + b] += 1
                        cb[b] += 1
                norm = abs(dr) + abs(dc)
                for j in range(j0, j1):
                    if j > j0:
                        for u in range(side):
                            a = refpad[i + u, j - 1]
                            b = curpad[ii + u, j - 1 + dc]
                            joint[a * levels + b] -= 1
                            cb[b] -= 1
                            a = refpad[i + u, j + side - 1]
                            b = curpad[ii + u, j + dc + side - 1]
                            joint[a * levels + b] += 1
                            cb[b] += 1
                    nb = 0
                    s_cur = 0.0
                    for b in range(levels):
                        s_cur += clnc[cb[b]]
                        if cb[b] > 0:
                            present_b[nb] = b
                            nb += 1
                    s_joint = 0.0
                    for ka in range(n_present_a[j]):
                        base = present_a[j, ka] * levels
                        for kb in range(nb):
                            s_joint += clnc[joint[base + present_b[kb]]]
                    total = (s_joint - s_cur) + (n_log_n - s_ref[j])
                    value = total / n
                    if value < 0.0:
                        value = 0.0
                    if value > best[j] or (value == best[j] and norm < best_norm[j]):
                        best[j] = value
                        best_norm[j] = norm
                        out_drow[i, j] = dr
                        out_dcol[i, j] = dc
        for j in range(width):
            out_value[i, j] = best[j]
