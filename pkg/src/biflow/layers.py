"""Learned building blocks of the bidirectional scene-flow network.

Layer objects only hold weights (arrays or tape ``Var`` handles) and
hyper-parameters; evaluation lives in the module-level functions so the same
weights can be fed through either BFE form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import numeric as nm
from .geometry import PointCloud, interpolation_weights, knn_group

Weights = tuple[Any, Any]  # (W, bias); bias may be None


def _shape(x) -> tuple[int, ...]:
    return nm.value_of(x).shape


def _mlp(x, mlp: Sequence[Weights], slope: float, final_activation: bool = True):
    last = len(mlp) - 1
    for i, (W, b) in enumerate(mlp):
        x = nm.linear_map(x, W, b)
        if i < last or final_activation:
            x = nm.leaky_relu(x, slope)
    return x


def _check_chain(mlp: Sequence[Weights], start: int | None, what: str) -> None:
    width = start
    for W, b in mlp:
        a, c = _shape(W)
        if width is not None and a != width:
            raise ValueError(f"{what}: layer expects {a} inputs but receives {width}")
        if b is not None and _shape(b) != (c,):
            raise ValueError(f"{what}: bias {_shape(b)} does not match width {c}")
        width = c


@dataclass(frozen=True)
class SetLayer:
    """Shared per-member MLP (activation after every layer unless disabled).

    ``layout`` names the concatenated input blocks as (name, width) pairs; when
    given, their total must equal the first weight's input width.
    """

    mlp: tuple[Weights, ...]
    slope: float = nm.DEFAULT_SLOPE
    layout: tuple[tuple[str, int], ...] = ()
    final_activation: bool = True

    def __post_init__(self):
        if not self.mlp:
            raise ValueError("SetLayer: empty MLP")
        _check_chain(self.mlp, None, "SetLayer")
        if self.layout and sum(w for _, w in self.layout) != self.in_width:
            raise ValueError(
                f"SetLayer: layout {self.layout} sums to {sum(w for _, w in self.layout)}, "
                f"weights expect {self.in_width}"
            )

    @property
    def in_width(self) -> int:
        return _shape(self.mlp[0][0])[0]

    @property
    def out_width(self) -> int:
        return _shape(self.mlp[-1][0])[1]

    def apply(self, x):
        """Per-row MLP on an (n, D) input."""
        return _mlp(x, self.mlp, self.slope, self.final_activation)


class FlowHead(SetLayer):
    """Point-wise MLP regressing a 3-vector; no activation on the last layer."""

    def __init__(self, mlp: Sequence[Weights], slope: float = nm.DEFAULT_SLOPE):
        super().__init__(tuple(mlp), slope, (), False)
        if self.out_width != 3:
            raise ValueError(f"FlowHead: output width must be 3, got {self.out_width}")


@dataclass(frozen=True)
class BfeLayer:
    """First-layer weights of the bidirectional propagation MLP.

    Stored as the three row blocks (position, propagated, replicated); the naive
    matrix is their vertical stack.  ``tail`` holds optional deeper layers
    applied per member after the first activation.
    """

    W_p: Any
    W_b: Any
    W_r: Any
    bias: Any = None
    k: int = 8
    slope: float = nm.DEFAULT_SLOPE
    tail: tuple[Weights, ...] = field(default=())

    def __post_init__(self):
        (p, co), (cb, co_b), (cr, co_r) = _shape(self.W_p), _shape(self.W_b), _shape(self.W_r)
        if p != 3:
            raise ValueError(f"BfeLayer: W_p must have 3 rows, got {p}")
        if cb != cr or co != co_b or co != co_r:
            raise ValueError(
                f"BfeLayer: inconsistent blocks W_p{_shape(self.W_p)} "
                f"W_b{_shape(self.W_b)} W_r{_shape(self.W_r)}"
            )
        if self.bias is not None and _shape(self.bias) != (co,):
            raise ValueError(f"BfeLayer: bias {_shape(self.bias)} vs width {co}")
        _check_chain(self.tail, co, "BfeLayer tail")

    @classmethod
    def from_naive(cls, W, bias=None, **kw) -> "BfeLayer":
        return cls(*partition_weights(W), bias=bias, **kw)

    @property
    def c(self) -> int:
        return _shape(self.W_b)[0]

    @property
    def c_first(self) -> int:
        return _shape(self.W_p)[1]

    @property
    def out_width(self) -> int:
        return _shape(self.tail[-1][0])[1] if self.tail else self.c_first

    def naive_weights(self):
        return nm.concat([self.W_p, self.W_b, self.W_r], axis=0)


def partition_weights(W: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a (3 + 2C, C') matrix into its position, propagated and replicated blocks."""
    rows = W.shape[0]
    if W.ndim != 2 or rows < 3 or (rows - 3) % 2:
        raise ValueError(f"partition_weights: rows must be 3 + 2C, got shape {W.shape}")
    c = (rows - 3) // 2
    return W[:3].copy(), W[3 : 3 + c].copy(), W[3 + c :].copy()


def reconstitute_weights(W_p: np.ndarray, W_b: np.ndarray, W_r: np.ndarray) -> np.ndarray:
    return np.concatenate([W_p, W_b, W_r], axis=0)


@dataclass(frozen=True)
class AugmentedPointCloud:
    coords: Any
    aug_feats: Any

    def __post_init__(self):
        c, f = _shape(self.coords), _shape(self.aug_feats)
        if len(f) != 2 or c[0] != f[0]:
            raise ValueError(f"AugmentedPointCloud: coords {c} vs features {f}")

    @property
    def n(self) -> int:
        return _shape(self.coords)[0]


# ---------------------------------------------------------------- evaluation


def set_layer(groups, layer: SetLayer):
    """Shared MLP on every member of (G, K, D) groups, then max over K -> (G, C')."""
    g, k, d = _shape(groups)
    if d != layer.in_width:
        raise ValueError(f"set_layer: groups carry {d} channels, layer expects {layer.in_width}")
    h = layer.apply(nm.reshape(groups, (g * k, d)))
    out, _ = nm.group_max(nm.reshape(h, (g, k, layer.out_width)))
    return out


def _local_offsets(ref_coords, idx: np.ndarray, center_coords):
    """(G, K, 3) offsets ``ref[idx] - center``."""
    return nm.sub(nm.gather(ref_coords, idx), nm.expand_members(center_coords, idx.shape[1]))


def pointconv(
    cloud: PointCloud,
    centers: np.ndarray,
    k: int,
    layer: SetLayer,
    neighbors: np.ndarray | None = None,
) -> PointCloud:
    """Group ``k`` neighbours per centre, feed [offset, feature] through ``layer``.

    Simplified PointConv: no density reweighting.
    """
    centers = np.asarray(centers, dtype=np.intp)
    center_coords = nm.gather(cloud.coords, centers)
    if neighbors is None:
        neighbors = knn_group(center_coords, cloud.coords, k)
    members = nm.concat(
        [_local_offsets(cloud.coords, neighbors, center_coords), nm.gather(cloud.feats, neighbors)]
    )
    return PointCloud(center_coords, set_layer(members, layer))


def _check_bfp(P: PointCloud, Q: PointCloud, layer: BfeLayer) -> None:
    if P.width != layer.c or Q.width != layer.c:
        raise ValueError(
            f"bfp: feature widths P={P.width}, Q={Q.width} but layer expects C={layer.c}"
        )
    if layer.k > min(P.n, Q.n):
        raise ValueError(f"bfp: K={layer.k} exceeds min(N'={P.n}, M'={Q.n})")


def _bfp_neighbors(P, Q, layer, neighbors):
    if neighbors is not None:
        return neighbors
    return knn_group(P.coords, Q.coords, layer.k), knn_group(Q.coords, P.coords, layer.k)


def _finish_members(h, layer: BfeLayer, g: int, k: int):
    """Activation, optional tail, max over members; ``h`` is (G, K, C') pre-activation."""
    h = nm.leaky_relu(h, layer.slope)
    if layer.tail:
        h = nm.reshape(h, (g * k, layer.c_first))
        h = _mlp(h, layer.tail, layer.slope)
        h = nm.reshape(h, (g, k, layer.out_width))
    out, _ = nm.group_max(h)
    return out


def _naive_direction(xc, f, yc, g_feats, idx, W, layer: BfeLayer):
    n, k = idx.shape
    members = nm.concat(
        [_local_offsets(yc, idx, xc), nm.gather(g_feats, idx), nm.expand_members(f, k)]
    )
    h = nm.linear_map(nm.reshape(members, (n * k, 3 + 2 * layer.c)), W, layer.bias)
    return _finish_members(nm.reshape(h, (n, k, layer.c_first)), layer, n, k)


def bfp_naive(P: PointCloud, Q: PointCloud, layer: BfeLayer, neighbors=None):
    """Bidirectional feature propagation evaluated literally (group, concat, MLP, max).

    ``neighbors`` optionally supplies precomputed (P->Q, Q->P) index tables.
    """
    _check_bfp(P, Q, layer)
    idx_pq, idx_qp = _bfp_neighbors(P, Q, layer, neighbors)
    W = layer.naive_weights()
    f_aug = _naive_direction(P.coords, P.feats, Q.coords, Q.feats, idx_pq, W, layer)
    g_aug = _naive_direction(Q.coords, Q.feats, P.coords, P.feats, idx_qp, W, layer)
    return AugmentedPointCloud(P.coords, f_aug), AugmentedPointCloud(Q.coords, g_aug)


def _decomposed_direction(xc, own_r, yc, other_b, idx, layer: BfeLayer):
    n, k = idx.shape
    off = nm.reshape(_local_offsets(yc, idx, xc), (n * k, 3))
    pos = nm.reshape(nm.linear_map(off, layer.W_p), (n, k, layer.c_first))
    h = nm.add(nm.add(pos, nm.gather(other_b, idx)), nm.expand_members(own_r, k))
    return _finish_members(h, layer, n, k)


def bfp_decomposed(P: PointCloud, Q: PointCloud, layer: BfeLayer, neighbors=None):
    """Same result as :func:`bfp_naive` with feature transforms applied before grouping."""
    _check_bfp(P, Q, layer)
    idx_pq, idx_qp = _bfp_neighbors(P, Q, layer, neighbors)
    p_b = nm.linear_map(P.feats, layer.W_b)
    q_b = nm.linear_map(Q.feats, layer.W_b)
    p_r = nm.linear_map(P.feats, layer.W_r, layer.bias)
    q_r = nm.linear_map(Q.feats, layer.W_r, layer.bias)
    f_aug = _decomposed_direction(P.coords, p_r, Q.coords, q_b, idx_pq, layer)
    g_aug = _decomposed_direction(Q.coords, q_r, P.coords, p_b, idx_qp, layer)
    return AugmentedPointCloud(P.coords, f_aug), AugmentedPointCloud(Q.coords, g_aug)


def flow_embedding(P_aug: AugmentedPointCloud, Q_aug: AugmentedPointCloud, k: int, layer: SetLayer):
    """Source-to-target correlation: members are [q - p, g', f'], pooled by ``layer``."""
    if k > Q_aug.n:
        raise ValueError(f"flow_embedding: K={k} exceeds target size {Q_aug.n}")
    idx = knn_group(P_aug.coords, Q_aug.coords, k)
    members = nm.concat(
        [
            _local_offsets(Q_aug.coords, idx, P_aug.coords),
            nm.gather(Q_aug.aug_feats, idx),
            nm.expand_members(P_aug.aug_feats, k),
        ]
    )
    return set_layer(members, layer)


def upsample(sparse_cloud: PointCloud, sparse_flow, dense_coords, k: int = 3):
    """Inverse-distance interpolation of both features and flow onto ``dense_coords``."""
    if _shape(sparse_flow) != (sparse_cloud.n, 3):
        raise ValueError(f"upsample: flow {_shape(sparse_flow)} vs cloud of {sparse_cloud.n}")
    idx, w = interpolation_weights(sparse_cloud.coords, dense_coords, k)
    return nm.weighted_gather(sparse_cloud.feats, idx, w), nm.weighted_gather(sparse_flow, idx, w)


def predict_flow(
    warped_coords,
    upsampled_flow,
    fused_inputs,
    conv: SetLayer,
    head: FlowHead,
    k: int,
):
    """Smooth fused features over each warped point's neighbourhood, regress a residual."""
    n = _shape(warped_coords)[0]
    if _shape(upsampled_flow) != (n, 3) or _shape(fused_inputs)[0] != n:
        raise ValueError(
            f"predict_flow: coords {_shape(warped_coords)}, flow {_shape(upsampled_flow)}, "
            f"inputs {_shape(fused_inputs)} disagree"
        )
    if not isinstance(head, FlowHead):
        head = FlowHead(head.mlp, head.slope)
    smooth = pointconv(PointCloud(warped_coords, fused_inputs), np.arange(n), k, conv)
    return nm.add(upsampled_flow, head.apply(smooth.feats))
