"""Numba kernels for the hot paths: union-find forest build, piecewise
accumulation, and threshold root assignment.

All kernels release the GIL so randomizations can run on a thread pool.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _find(parent, a):
    root = a
    while parent[root] != root:
        root = parent[root]
    # path compression; merge history is kept separately in absorbed_by
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


@njit(cache=True, nogil=True)
def build_forest_kernel(order_lin, heights, rank_of_lin, nx, ny, nz, offsets):
    """One-pass union-find over voxels sorted by non-ascending height.

    order_lin : linear grid index per rank
    heights : value per rank, non-ascending
    rank_of_lin : full-grid array, rank of each linear index or -1

    Returns (absorbed_by, extent_at_own_height); absorbed_by[i] is the rank
    that unified rank i's subtree (-1 for final roots).  Extents for a run of
    equal heights are finalized only after the whole run is processed, so
    they count every voxel with height >= the tied value.
    """
    n = order_lin.shape[0]
    parent = np.arange(n)
    comp_size = np.ones(n, dtype=np.int64)
    absorbed_by = np.full(n, -1, dtype=np.int64)
    extent = np.zeros(n, dtype=np.int64)
    n_off = offsets.shape[0]

    i = 0
    while i < n:
        g_end = i
        h = heights[i]
        while g_end < n and heights[g_end] == h:
            g_end += 1
        for k in range(i, g_end):
            lin = order_lin[k]
            z = lin % nz
            t = lin // nz
            y = t % ny
            x = t // ny
            size_k = comp_size[k]
            for o in range(n_off):
                xx = x + offsets[o, 0]
                yy = y + offsets[o, 1]
                zz = z + offsets[o, 2]
                if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
                    rj = rank_of_lin[(xx * ny + yy) * nz + zz]
                    if 0 <= rj < k:
                        r = _find(parent, rj)
                        if r != k:
                            absorbed_by[r] = k
                            parent[r] = k
                            size_k += comp_size[r]
            comp_size[k] = size_k
        for k in range(i, g_end):
            extent[k] = comp_size[_find(parent, k)]
        i = g_end
    return absorbed_by, extent


@njit(cache=True, nogil=True)
def accumulate_kernel(absorbed_by, gain, f_height, f_floor):
    """Descending-rank accumulation of piecewise-constant integrals.

    T[i] = T[parent] + gain[i] * (f_height[i] - f_height[parent]), with the
    floor value f_floor closing each root's interval.  Parents always carry
    higher ranks, so a single reverse sweep suffices.
    """
    n = absorbed_by.shape[0]
    scores = np.zeros(n, dtype=np.float64)
    for i in range(n - 1, -1, -1):
        u = absorbed_by[i]
        if u < 0:
            scores[i] = gain[i] * (f_height[i] - f_floor)
        else:
            scores[i] = scores[u] + gain[i] * (f_height[i] - f_height[u])
    return scores


@njit(cache=True, nogil=True)
def roots_at_threshold_kernel(absorbed_by, n_supra):
    """Cluster root per rank at a threshold keeping the first n_supra ranks.

    A rank is its own root when its absorbing rank falls below the threshold
    (rank >= n_supra) or it is a final root.
    """
    root = np.empty(n_supra, dtype=np.int64)
    for i in range(n_supra - 1, -1, -1):
        u = absorbed_by[i]
        if u < 0 or u >= n_supra:
            root[i] = i
        else:
            root[i] = root[u]
    return root
