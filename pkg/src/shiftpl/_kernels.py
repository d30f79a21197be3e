"""Compiled per-step geometry for the simulator.

The slot rules are the same comparisons as :func:`shiftpl.trajectory.slot_assign`
applied one pair at a time.  Columns are visited in ascending id order and a
strictly smaller gap is required to replace the current best, so ties go to
the lower id exactly as in the vectorized version.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def world_geometry(x, y, vx, vy, ax, ay, lane, length, width, ids, exists, ring):
    """Slots, neighbor features and pairwise overlap for ``W`` worlds; ``ring[w] = inf`` disables wrapping."""
    W, n = x.shape
    slots = np.full((W, n, 8), -1, dtype=np.int64)
    feats = np.zeros((W, n, 8, 5))
    present = np.zeros((W, n, 8), dtype=np.bool_)
    nlen = np.zeros((W, n, 8))
    overlap = np.zeros((W, n, n), dtype=np.bool_)
    best = np.empty(8)
    bestdx = np.empty(8)
    for w in range(W):
        R = ring[w]
        wrap = math.isfinite(R)
        for i in range(n):
            if not exists[w, i]:
                continue
            half = 0.5 * length[w, i]
            for s in range(8):
                best[s] = np.inf
                slots[w, i, s] = -1
            for j in range(n):
                if j == i or not exists[w, j]:
                    continue
                d = x[w, j] - x[w, i]
                if wrap:
                    d = d - R * math.floor(d / R + 0.5)
                ad = abs(d)
                dl = lane[w, j] - lane[w, i]
                s = -1
                if dl == 0:
                    if d > 0 or (d == 0 and ids[w, j] > ids[w, i]):
                        s = 0
                    else:
                        s = 1
                elif dl == -1 or dl == 1:
                    base = 2 if dl == -1 else 5
                    if d > half:
                        s = base
                    elif ad <= half:
                        s = base + 1
                    elif d < -half:
                        s = base + 2
                if s >= 0 and ad < best[s]:
                    best[s] = ad
                    bestdx[s] = d
                    slots[w, i, s] = j
                if j > i and ad < 0.5 * (length[w, i] + length[w, j]) and \
                        abs(y[w, j] - y[w, i]) < 0.5 * (width[w, i] + width[w, j]):
                    overlap[w, i, j] = True
            for s in range(8):
                j = slots[w, i, s]
                if j >= 0:
                    present[w, i, s] = True
                    feats[w, i, s, 0] = vx[w, j]
                    feats[w, i, s, 1] = vy[w, j]
                    feats[w, i, s, 2] = ax[w, j]
                    feats[w, i, s, 3] = ay[w, j]
                    feats[w, i, s, 4] = math.hypot(bestdx[s], y[w, j] - y[w, i])
                    nlen[w, i, s] = length[w, j]
    return slots, feats, present, nlen, overlap
