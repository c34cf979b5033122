"""
Compiled inner loops for free-stream walks.

Every kernel reads moves from a direction buffer (uint8, values in [0, 2d))
starting at ``pos`` and hands back the new ``pos``; the caller refills the
buffer and calls again when a kernel reports EXHAUSTED. A walk is resumable
at that point: the current position has already been checked and no move
has been taken. Move k changes axis k >> 1 by +1 (k even) or -1 (k odd).
"""
from __future__ import annotations

from numba import njit

SETTLED = 0
STOPPED = 1
LEFT_BOX = 2
DONE = 0
EXHAUSTED = -1
BUDGET = -2


@njit(cache=True)
def box_index(x, extent, side):
    """Flat index of x in the box [-extent, extent]^d, -1 outside."""
    i = 0
    for c in x:
        c += extent
        if c < 0 or c >= side:
            return -1
        i = i * side + c
    return i


@njit(cache=True)
def _norm2(x):
    s = 0
    for c in x:
        s += c * c
    return s


@njit(cache=True)
def _move(x, k):
    if k & 1:
        x[k >> 1] -= 1
    else:
        x[k >> 1] += 1


@njit(cache=True)
def settle_walk(x, grid, extent, buf, pos, steps, budget):
    """
    Walk x until it stands on an empty cell of grid (SETTLED) or leaves the
    box (LEFT_BOX). Returns (status, pos, steps).
    """
    side = 2 * extent + 1
    while True:
        i = box_index(x, extent, side)
        if i < 0:
            return LEFT_BOX, pos, steps
        if grid[i] == 0:
            return SETTLED, pos, steps
        if steps >= budget:
            return BUDGET, pos, steps
        if pos >= buf.size:
            return EXHAUSTED, pos, steps
        _move(x, buf[pos])
        pos += 1
        steps += 1


@njit(cache=True)
def track_walk(x, grid, extent, target, limit2, seen, buf, pos, steps, budget):
    """
    settle_walk that also records, in seen[0], whether the walk stood on
    target (1) or first went beyond norm² limit2 (2). A start on target
    counts as a hit.
    """
    side = 2 * extent + 1
    while True:
        if seen[0] == 0:
            same = True
            for a in range(x.size):
                if x[a] != target[a]:
                    same = False
                    break
            outside = _norm2(x) > limit2
            if same and (steps == 0 or not outside):
                seen[0] = 1
            elif outside:
                seen[0] = 2
        i = box_index(x, extent, side)
        if i < 0:
            return LEFT_BOX, pos, steps
        if grid[i] == 0:
            return SETTLED, pos, steps
        if steps >= budget:
            return BUDGET, pos, steps
        if pos >= buf.size:
            return EXHAUSTED, pos, steps
        _move(x, buf[pos])
        pos += 1
        steps += 1


@njit(cache=True)
def wave_walk(x, grid, extent, visits, last_seen, explorer, limit2, buf, pos, steps, budget):
    """
    One wave explorer. Ends on the first empty cell with norm² <= limit2
    (SETTLED) or the first site with norm² > limit2 (STOPPED). Each site is
    counted in visits at most once per explorer id. The box must contain
    every site within one step of the ball.
    """
    side = 2 * extent + 1
    while True:
        i = box_index(x, extent, side)
        if i < 0:
            return LEFT_BOX, pos, steps
        if last_seen[i] != explorer:
            last_seen[i] = explorer
            visits[i] += 1
        if _norm2(x) > limit2:
            return STOPPED, pos, steps
        if grid[i] == 0:
            return SETTLED, pos, steps
        if steps >= budget:
            return BUDGET, pos, steps
        if pos >= buf.size:
            return EXHAUSTED, pos, steps
        _move(x, buf[pos])
        pos += 1
        steps += 1


@njit(cache=True)
def exit_walks(xs, first, limit2, buf, pos, steps, budget):
    """
    Walk rows first.. of xs until norm² > limit2, in place. Returns
    (status, row, pos, steps) with row the row to resume from.
    """
    n = xs.shape[0]
    for r in range(first, n):
        x = xs[r]
        while _norm2(x) <= limit2:
            if steps >= budget:
                return BUDGET, r, pos, steps
            if pos >= buf.size:
                return EXHAUSTED, r, pos, steps
            _move(x, buf[pos])
            pos += 1
            steps += 1
        steps = 0
    return DONE, n, pos, 0


@njit(cache=True)
def hit_walks(xs, first, hits, target, center, limit2, buf, pos, steps, budget):
    """
    hits[r] = 1 iff row r stands on target before ‖x − center‖² > limit2.
    A step that leaves the region is an escape even when it lands on target.
    """
    n = xs.shape[0]
    d = xs.shape[1]
    for r in range(first, n):
        x = xs[r]
        while True:
            same = True
            for a in range(d):
                if x[a] != target[a]:
                    same = False
                    break
            s = 0
            for a in range(d):
                t = x[a] - center[a]
                s += t * t
            # a start on target counts as a hit wherever it is
            if same and (steps == 0 or s <= limit2):
                hits[r] = 1
                break
            if s > limit2:
                break
            if steps >= budget:
                return BUDGET, r, pos, steps
            if pos >= buf.size:
                return EXHAUSTED, r, pos, steps
            _move(x, buf[pos])
            pos += 1
            steps += 1
        steps = 0
    return DONE, n, pos, 0
