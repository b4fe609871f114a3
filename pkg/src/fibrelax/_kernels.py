"""Compiled inner loops for the particle simulation.

Each kernel has a plain-numpy twin in ``ibm_sim`` that the tests compare
against.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def crossing_pairs(pos, cs, sn, pairs, box, L, eps):
    """Mask and offsets (ell_ij, ell_ji) of candidate pairs whose segments cross."""
    m = pairs.shape[0]
    hit = np.zeros(m, dtype=np.bool_)
    l12 = np.empty(m)
    l21 = np.empty(m)
    periodic = box[0] > 0.0
    for k in range(m):
        i = pairs[k, 0]
        j = pairs[k, 1]
        dx = pos[j, 0] - pos[i, 0]
        dy = pos[j, 1] - pos[i, 1]
        if periodic:
            dx -= box[0] * np.floor(dx / box[0] + 0.5)
            dy -= box[1] * np.floor(dy / box[1] + 0.5)
        s = sn[j] * cs[i] - cs[j] * sn[i]
        a = abs(s)
        if a < eps:
            continue
        n12 = dx * sn[j] - dy * cs[j]
        n21 = dx * sn[i] - dy * cs[i]
        half = 0.5 * L * a
        if abs(n12) <= half and abs(n21) <= half:
            hit[k] = True
            l12[k] = n12 / s
            l21[k] = n21 / s
    return hit, l12, l21


@numba.njit(cache=True)
def _cell_axis(c, n, out):
    """Distinct neighbor cells of c along one periodic axis with n cells."""
    if n < 3:
        for k in range(n):
            out[k] = k
        return n
    out[0] = (c - 1) % n
    out[1] = c
    out[2] = (c + 1) % n
    return 3


@numba.njit(cache=True)
def cell_pairs(pos, box, nx, ny, cutoff):
    """Pairs (i < j) within cutoff (minimum image) via a periodic cell list.

    Two passes over the same loops: count, then fill.
    """
    n = pos.shape[0]
    cid = np.empty(n, dtype=np.int64)
    for i in range(n):
        cx = min(max(int(pos[i, 0] / box[0] * nx), 0), nx - 1)
        cy = min(max(int(pos[i, 1] / box[1] * ny), 0), ny - 1)
        cid[i] = cx * ny + cy
    counts = np.zeros(nx * ny + 1, dtype=np.int64)
    for i in range(n):
        counts[cid[i] + 1] += 1
    starts = np.cumsum(counts)
    order = np.empty(n, dtype=np.int64)
    fill = starts[:-1].copy()
    for i in range(n):
        order[fill[cid[i]]] = i
        fill[cid[i]] += 1
    ax = np.empty(3, dtype=np.int64)
    ay = np.empty(3, dtype=np.int64)
    c2 = cutoff * cutoff
    total = 0
    out = np.empty((0, 2), dtype=np.int64)
    for sweep in range(2):
        if sweep == 1:
            out = np.empty((total, 2), dtype=np.int64)
        k = 0
        for i in range(n):
            na = _cell_axis(cid[i] // ny, nx, ax)
            nb = _cell_axis(cid[i] % ny, ny, ay)
            for a in range(na):
                for b in range(nb):
                    c = ax[a] * ny + ay[b]
                    for m in range(starts[c], starts[c + 1]):
                        j = order[m]
                        if j <= i:
                            continue
                        dx = pos[j, 0] - pos[i, 0]
                        dy = pos[j, 1] - pos[i, 1]
                        dx -= box[0] * np.floor(dx / box[0] + 0.5)
                        dy -= box[1] * np.floor(dy / box[1] + 0.5)
                        if dx * dx + dy * dy <= c2:
                            if sweep == 1:
                                out[k, 0] = i
                                out[k, 1] = j
                            k += 1
        total = k
    return out


@numba.njit(cache=True, inline="always")
def _cross(xi, yi, ci, si, xj, yj, cj, sj, bx, by, L, eps):
    # positions lie in the box, so one shift gives the minimum image
    dx = xj - xi
    dy = yj - yi
    if dx > 0.5 * bx:
        dx -= bx
    elif dx < -0.5 * bx:
        dx += bx
    if dy > 0.5 * by:
        dy -= by
    elif dy < -0.5 * by:
        dy += by
    if dx * dx + dy * dy > L * L:
        return False, 0.0, 0.0
    s = sj * ci - cj * si
    a = abs(s)
    if a < eps:
        return False, 0.0, 0.0
    n12 = dx * sj - dy * cj
    n21 = dx * si - dy * ci
    half = 0.5 * L * a
    if abs(n12) <= half and abs(n21) <= half:
        return True, n12 / s, n21 / s
    return False, 0.0, 0.0


@numba.njit(cache=True)
def crossing_pairs_cells(pos, cs, sn, box, nx, ny, L, eps, capacity):
    """All crossing pairs (i < j) through a periodic cell list with at least
    3 cells of width >= L per axis. Each cell is paired with itself and four
    forward neighbors, so every pair is visited once. Returns
    (count, ij, l12, l21); when count exceeds capacity the caller retries
    with a larger buffer."""
    n = pos.shape[0]
    cid = np.empty(n, dtype=np.int64)
    for i in range(n):
        cx = min(max(int(pos[i, 0] / box[0] * nx), 0), nx - 1)
        cy = min(max(int(pos[i, 1] / box[1] * ny), 0), ny - 1)
        cid[i] = cx * ny + cy
    counts = np.zeros(nx * ny + 1, dtype=np.int64)
    for i in range(n):
        counts[cid[i] + 1] += 1
    starts = np.cumsum(counts)
    order = np.empty(n, dtype=np.int64)
    fill = starts[:-1].copy()
    for i in range(n):
        order[fill[cid[i]]] = i
        fill[cid[i]] += 1
    # cell-sorted copies for locality
    X = np.empty(n)
    Y = np.empty(n)
    C = np.empty(n)
    S = np.empty(n)
    for m in range(n):
        X[m] = pos[order[m], 0]
        Y[m] = pos[order[m], 1]
        C[m] = cs[order[m]]
        S[m] = sn[order[m]]
    ij = np.empty((capacity, 2), dtype=np.int64)
    l12 = np.empty(capacity)
    l21 = np.empty(capacity)
    fwd_x = np.array([0, 1, 1, 1, 0])
    fwd_y = np.array([0, -1, 0, 1, 1])
    bx = box[0]
    by = box[1]
    k = 0
    for cx in range(nx):
        for cy in range(ny):
            c = cx * ny + cy
            for t in range(5):
                d = ((cx + fwd_x[t]) % nx) * ny + (cy + fwd_y[t]) % ny
                for m in range(starts[c], starts[c + 1]):
                    lo = m + 1 if t == 0 else starts[d]
                    for q in range(lo, starts[d + 1]):
                        hit, a12, a21 = _cross(X[m], Y[m], C[m], S[m], X[q], Y[q], C[q], S[q], bx, by, L, eps)
                        if hit:
                            if k < capacity:
                                i = order[m]
                                j = order[q]
                                if i < j:
                                    ij[k, 0] = i
                                    ij[k, 1] = j
                                    l12[k] = a12
                                    l21[k] = a21
                                else:
                                    ij[k, 0] = j
                                    ij[k, 1] = i
                                    l12[k] = a21
                                    l21[k] = a12
                            k += 1
    return k, ij, l12, l21


@numba.njit(cache=True)
def link_forces(pos, ang, li, lj, elli, ellj, box, kappa, alpha, beta):
    """Pair part of the energy, 1/2 sum (V + b), and its gradients.

    Each endpoint receives half of the pair gradient, matching the 1/2 in
    front of the double sum over ordered pairs.
    """
    n = pos.shape[0]
    gx = np.zeros((n, 2))
    gt = np.zeros(n)
    W = 0.0
    periodic = box[0] > 0.0
    for k in range(li.shape[0]):
        i = li[k]
        j = lj[k]
        ci = np.cos(ang[i])
        si = np.sin(ang[i])
        cj = np.cos(ang[j])
        sj = np.sin(ang[j])
        dx = pos[i, 0] - pos[j, 0]
        dy = pos[i, 1] - pos[j, 1]
        if periodic:
            dx -= box[0] * np.floor(dx / box[0] + 0.5)
            dy -= box[1] * np.floor(dy / box[1] + 0.5)
        ex = dx + elli[k] * ci - ellj[k] * cj
        ey = dy + elli[k] * si - ellj[k] * sj
        W += 0.25 * kappa * (ex * ex + ey * ey)
        fx = 0.5 * kappa * ex
        fy = 0.5 * kappa * ey
        gx[i, 0] += fx
        gx[i, 1] += fy
        gx[j, 0] -= fx
        gx[j, 1] -= fy
        gt[i] += 0.5 * kappa * elli[k] * (-ex * si + ey * ci)
        gt[j] -= 0.5 * kappa * ellj[k] * (-ex * sj + ey * cj)
        s = si * cj - ci * sj
        if s != 0.0:
            a = abs(s)
            W += 0.5 * alpha * a**beta
            db = alpha * beta * a ** (beta - 1.0) * np.sign(s) * (ci * cj + si * sj)
            gt[i] += 0.5 * db
            gt[j] -= 0.5 * db
    return W, gx, gt
