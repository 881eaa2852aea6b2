"""Orderings of patch centers so that index-adjacent patches are spatially close.

All orderings are index permutations (``int64`` arrays). Distances and
coordinate sums are evaluated in float64; every tie resolves to the lowest
center index.
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from pointjepa.errors import InvalidArgument

DEFAULT_BITS = 10


class StartRule(str, Enum):
    MIN_COORD_SUM = "min-coord-sum"
    MIN_INDEX = "min-index"


SEQUENCERS = ("greedy-min-coord", "greedy-min-index", "morton", "hilbert")


def _as_centers(centers) -> np.ndarray:
    arr = np.asarray(centers, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgument(f"expected (c, 3) centers, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidArgument("cannot order an empty set of centers")
    return arr


def _pairwise_sq(x: np.ndarray) -> np.ndarray:
    d = x[..., :, None, :] - x[..., None, :, :]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _first_index(x: np.ndarray, start: StartRule) -> int:
    start = StartRule(start)
    if start is StartRule.MIN_INDEX:
        return 0
    s = x[:, 0] + x[:, 1] + x[:, 2]
    return int(np.argmin(s))


def greedy_order(centers, start: StartRule = StartRule.MIN_COORD_SUM) -> np.ndarray:
    """Nearest-unvisited-neighbour chain through the centers."""
    x = _as_centers(centers)
    c = x.shape[0]
    dist = _pairwise_sq(x)
    perm = np.empty(c, dtype=np.int64)
    visited = np.zeros(c, dtype=bool)
    cur = _first_index(x, start)
    perm[0] = cur
    visited[cur] = True
    for t in range(1, c):
        row = np.where(visited, np.inf, dist[cur])
        cur = int(np.argmin(row))
        perm[t] = cur
        visited[cur] = True
    return perm


def batched_greedy_order(center_sets, start: StartRule = StartRule.MIN_COORD_SUM) -> list:
    """Greedy orderings for many clouds, advanced in lock-step.

    Sets may differ in size; shorter ones are padded with never-selectable
    slots. Results are identical to calling :func:`greedy_order` per set.
    """
    sets = [_as_centers(s) for s in center_sets]
    if not sets:
        return []
    b = len(sets)
    sizes = np.array([s.shape[0] for s in sets])
    cmax = int(sizes.max())
    x = np.zeros((b, cmax, 3))
    pad = np.ones((b, cmax), dtype=bool)
    for i, s in enumerate(sets):
        x[i, : s.shape[0]] = s
        pad[i, : s.shape[0]] = False
    dist = _pairwise_sq(x)  # (b, cmax, cmax)
    rows = np.arange(b)
    cur = np.array([_first_index(s, start) for s in sets], dtype=np.int64)
    perm = np.zeros((b, cmax), dtype=np.int64)
    perm[:, 0] = cur
    blocked = pad.copy()
    blocked[rows, cur] = True
    for t in range(1, cmax):
        cand = np.where(blocked, np.inf, dist[rows, cur])
        nxt = np.argmin(cand, axis=1)
        live = t < sizes
        cur = np.where(live, nxt, cur)
        perm[:, t] = cur
        blocked[rows[live], cur[live]] = True
    return [perm[i, : sizes[i]].copy() for i in range(b)]


def quantize(centers, bits: int) -> np.ndarray:
    """Map each axis of the bounding box affinely onto ``[0, 2**bits - 1]``."""
    if not 1 <= bits <= 21:
        raise InvalidArgument(f"bits_per_axis must be in [1, 21], got {bits}")
    x = _as_centers(centers)
    lo = x.min(axis=0)
    ext = x.max(axis=0) - lo
    top = (1 << bits) - 1
    safe = np.where(ext > 0, ext, 1.0)
    q = np.floor((x - lo) / safe * top + 0.5)
    q = np.where(ext > 0, q, 0.0)
    return np.clip(q, 0, top).astype(np.uint64)


def morton_codes(q: np.ndarray, bits: int) -> np.ndarray:
    code = np.zeros(q.shape[0], dtype=np.uint64)
    one = np.uint64(1)
    for level in range(bits):
        for axis in range(3):
            bit = (q[:, axis] >> np.uint64(level)) & one
            code |= bit << np.uint64(3 * level + axis)
    return code


def hilbert_codes(q: np.ndarray, bits: int) -> np.ndarray:
    """3D Hilbert indices via Skilling's transpose construction."""
    x = [q[:, i].astype(np.uint64).copy() for i in range(3)]
    zero = np.uint64(0)
    big = np.uint64(1 << (bits - 1))
    # undo excess work (inverse rotations/reflections)
    qq = big
    while qq > 1:
        p = qq - np.uint64(1)
        for i in range(3):
            hit = (x[i] & qq) != zero
            x[0] = np.where(hit, x[0] ^ p, x[0])
            t = (x[0] ^ x[i]) & p
            t = np.where(hit, zero, t)
            x[0] ^= t
            x[i] ^= t
        qq >>= np.uint64(1)
    # Gray encode
    for i in range(1, 3):
        x[i] ^= x[i - 1]
    t = np.zeros_like(x[0])
    qq = big
    while qq > 1:
        t = np.where((x[2] & qq) != zero, t ^ (qq - np.uint64(1)), t)
        qq >>= np.uint64(1)
    for i in range(3):
        x[i] ^= t
    code = np.zeros(q.shape[0], dtype=np.uint64)
    one = np.uint64(1)
    for level in range(bits - 1, -1, -1):
        for i in range(3):
            code = (code << one) | ((x[i] >> np.uint64(level)) & one)
    return code


def morton_order(centers, bits_per_axis: int = DEFAULT_BITS) -> np.ndarray:
    codes = morton_codes(quantize(centers, bits_per_axis), bits_per_axis)
    return np.argsort(codes, kind="stable").astype(np.int64)


def hilbert_order(centers, bits_per_axis: int = DEFAULT_BITS) -> np.ndarray:
    codes = hilbert_codes(quantize(centers, bits_per_axis), bits_per_axis)
    return np.argsort(codes, kind="stable").astype(np.int64)


def order_centers(centers, method: str = "greedy-min-coord", bits: int = DEFAULT_BITS) -> np.ndarray:
    if method == "greedy-min-coord":
        return greedy_order(centers, StartRule.MIN_COORD_SUM)
    if method == "greedy-min-index":
        return greedy_order(centers, StartRule.MIN_INDEX)
    if method == "morton":
        return morton_order(centers, bits)
    if method == "hilbert":
        return hilbert_order(centers, bits)
    raise InvalidArgument(f"unknown sequencer {method!r}; choose from {SEQUENCERS}")


def contiguity_score(centers, ordering) -> float:
    """Mean Euclidean step length along the ordering (0 for a single center)."""
    x = _as_centers(centers)
    perm = np.asarray(ordering, dtype=np.int64)
    if perm.shape[0] < 2:
        return 0.0
    steps = np.diff(x[perm], axis=0)
    return float(np.sqrt((steps * steps).sum(axis=1)).mean())


def is_permutation(perm, c: int) -> bool:
    perm = np.asarray(perm)
    return perm.shape == (c,) and np.array_equal(np.sort(perm), np.arange(c))
