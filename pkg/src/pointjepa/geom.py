"""Farthest point sampling, k-NN grouping and patch normalization.

Clouds are ``(n, 3)`` float32 arrays. Distances are squared Euclidean,
computed elementwise in float32, and every tie breaks toward the lowest
point index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pointjepa.errors import InvalidArgument

# FPS start policies besides an explicit integer index.
START_RANDOM = "random"
START_CENTROID = "centroid"


def as_cloud(points) -> np.ndarray:
    pts = np.ascontiguousarray(points, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidArgument(f"expected an (n, 3) point array, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise InvalidArgument("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise InvalidArgument("point cloud has non-finite coordinates")
    return pts


def _sqdist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _start_index(pts: np.ndarray, start, rng) -> int:
    n = pts.shape[0]
    if isinstance(start, (int, np.integer)) and not isinstance(start, bool):
        if not 0 <= start < n:
            raise InvalidArgument(f"start index {start} outside [0, {n})")
        return int(start)
    if start == START_RANDOM:
        if rng is None:
            raise InvalidArgument("random FPS start needs an rng")
        return int(rng.integers(n))
    if start == START_CENTROID:
        # Depends only on the point set, so FPS becomes invariant to input order.
        centroid = pts.astype(np.float64).mean(axis=0).astype(np.float32)
        return int(np.argmax(_sqdist(pts, centroid)))
    raise InvalidArgument(f"unknown FPS start policy {start!r}")


def farthest_point_sample(points, c: int, start=0, rng=None) -> np.ndarray:
    """Select ``c`` well-spread point indices.

    ``start`` is an index (default 0), ``"random"`` (drawn from ``rng``) or
    ``"centroid"`` (the point farthest from the centroid). Each later pick
    maximizes the squared distance to the nearest already-selected point.
    """
    pts = as_cloud(points)
    n = pts.shape[0]
    if not 1 <= c <= n:
        raise InvalidArgument(f"need 1 <= c <= n, got c={c}, n={n}")
    idx = np.empty(c, dtype=np.int64)
    idx[0] = _start_index(pts, start, rng)
    mind = _sqdist(pts, pts[idx[0]])
    for i in range(1, c):
        # argmax returns the first maximum -> lowest index on ties
        nxt = int(np.argmax(mind))
        idx[i] = nxt
        np.minimum(mind, _sqdist(pts, pts[nxt]), out=mind)
    return idx


@dataclass(frozen=True)
class PatchSet:
    center_indices: np.ndarray  # (c,)
    centers: np.ndarray  # (c, 3)
    groups: np.ndarray  # (c, k)
    local_coords: np.ndarray  # (c, k, 3)

    @property
    def c(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.groups.shape[1]


def normalize_patches(points, centers, groups) -> np.ndarray:
    pts = as_cloud(points)
    groups = np.asarray(groups, dtype=np.int64)
    if groups.size and (groups.min() < 0 or groups.max() >= pts.shape[0]):
        raise InvalidArgument("group index out of range")
    centers = np.asarray(centers, dtype=np.float32)
    return pts[groups] - centers[:, None, :]


def knn_group(points, center_indices, k: int) -> PatchSet:
    """Group the ``k`` nearest cloud points around each selected center."""
    pts = as_cloud(points)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise InvalidArgument(f"need 1 <= k <= n, got k={k}, n={n}")
    center_indices = np.asarray(center_indices, dtype=np.int64)
    if center_indices.ndim != 1 or (
        center_indices.size and (center_indices.min() < 0 or center_indices.max() >= n)
    ):
        raise InvalidArgument("center index out of range")
    centers = pts[center_indices]
    d = _sqdist(pts[None, :, :], centers[:, None, :])  # (c, n)
    # stable sort keeps lower indices first among equal distances
    groups = np.argsort(d, axis=1, kind="stable")[:, :k]
    local = normalize_patches(pts, centers, groups)
    return PatchSet(center_indices, centers, groups, local)


def tokenize(points, c: int, k: int, start=START_CENTROID, rng=None) -> PatchSet:
    """FPS followed by k-NN grouping, the tokenizer used for training and evaluation."""
    return knn_group(points, farthest_point_sample(points, c, start=start, rng=rng), k)
