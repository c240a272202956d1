"""Point-cloud primitives: sampling, neighbour search, interpolation, warping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import numeric as nm

COINCIDENT_DIST = 1e-10


@dataclass(frozen=True)
class PointCloud:
    """Coordinates (N, 3) and per-point features (N, C).

    Either field may be a tape ``Var`` while a network is being differentiated.
    """

    coords: Any
    feats: Any

    def __post_init__(self):
        c, f = nm.value_of(self.coords), nm.value_of(self.feats)
        if c.ndim != 2 or c.shape[1] != 3 or c.shape[0] < 1:
            raise ValueError(f"PointCloud: coords must be (N>=1, 3), got {c.shape}")
        if f.ndim != 2 or f.shape[0] != c.shape[0]:
            raise ValueError(f"PointCloud: feats {f.shape} do not match coords {c.shape}")

    @property
    def n(self) -> int:
        return nm.value_of(self.coords).shape[0]

    @property
    def width(self) -> int:
        return nm.value_of(self.feats).shape[1]


@dataclass(frozen=True)
class FramePair:
    source: PointCloud
    target: PointCloud


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values")


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances from the direct differences (no norm expansion), (len(a), len(b))."""
    out = np.zeros((a.shape[0], b.shape[0]))
    for c in range(a.shape[1]):
        d = a[:, c, None] - b[None, :, c]
        d *= d
        out += d
    return out


def furthest_point_sample(coords: Any, n_out: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subsampling starting from ``seed_index``; ties go to the lowest index."""
    x = nm.value_of(coords)
    n = x.shape[0]
    if not 1 <= n_out <= n:
        raise ValueError(f"furthest_point_sample: n_out={n_out} not in [1, {n}]")
    if not 0 <= seed_index < n:
        raise ValueError(f"furthest_point_sample: seed_index {seed_index} out of range [0, {n})")
    picks = np.empty(n_out, dtype=np.intp)
    picks[0] = seed_index
    diff = x - x[seed_index]
    mind = np.einsum("ij,ij->i", diff, diff)
    for m in range(1, n_out):
        nxt = int(np.argmax(mind))
        picks[m] = nxt
        diff = x - x[nxt]
        np.minimum(mind, np.einsum("ij,ij->i", diff, diff), out=mind)
    return picks


def knn_group(queries: Any, reference: Any, k: int) -> np.ndarray:
    """Indices (G, k) of the k nearest reference points, sorted by (distance, index).

    ``reference`` may be a :class:`PointCloud` or a coordinate array.
    """
    ref = nm.value_of(reference.coords if isinstance(reference, PointCloud) else reference)
    q = nm.value_of(queries)
    n_ref = ref.shape[0]
    if not 1 <= k <= n_ref:
        raise ValueError(f"knn_group: K={k} exceeds reference size {n_ref}")
    d = pairwise_sq_dists(q, ref)
    return _smallest_k(d, k)


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    g, n = d.shape
    if k == n:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    part_d = np.take_along_axis(d, part, axis=1)
    kth = part_d.max(axis=1)
    # rows where the k-th distance is shared with points outside the partition
    tied = (d <= kth[:, None]).sum(axis=1) > k
    order = np.lexsort((part, part_d), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    for row in np.flatnonzero(tied):
        out[row] = np.argsort(d[row], kind="stable")[:k]
    return out


def interpolation_weights(
    sparse_coords: np.ndarray, dense_coords: np.ndarray, k: int = 3
) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour indices and normalised inverse-distance weights, both (N_d, k).

    A dense point closer than ``COINCIDENT_DIST`` to a sparse point takes that
    point's value exactly (one-hot weights).
    """
    sparse_coords = nm.value_of(sparse_coords)
    dense_coords = nm.value_of(dense_coords)
    if not 1 <= k <= sparse_coords.shape[0]:
        raise ValueError(f"interpolate: k={k} exceeds sparse size {sparse_coords.shape[0]}")
    idx = knn_group(dense_coords, sparse_coords, k)
    diff = sparse_coords[idx] - dense_coords[:, None, :]
    dist = np.sqrt(np.einsum("gkc,gkc->gk", diff, diff))
    coincident = dist[:, 0] < COINCIDENT_DIST
    safe = np.where(coincident[:, None], 1.0, dist)
    w = 1.0 / safe
    w = w / w.sum(axis=1, keepdims=True)
    w[coincident] = 0.0
    w[coincident, 0] = 1.0
    return idx, w


def interpolate(sparse: PointCloud, dense_coords: Any, k: int = 3):
    """Inverse-distance weighted features of ``sparse`` evaluated at ``dense_coords``."""
    idx, w = interpolation_weights(sparse.coords, dense_coords, k)
    return nm.weighted_gather(sparse.feats, idx, w)


def warp(coords: Any, flow: Any):
    """Move each point by its flow vector."""
    c, f = nm.value_of(coords), nm.value_of(flow)
    if c.shape != f.shape:
        raise ValueError(f"warp: coords {c.shape} and flow {f.shape} differ")
    return nm.add(coords, flow)
