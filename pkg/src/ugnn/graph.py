"""Supervoxel graphs built from the bottleneck feature map, and the GNN module.

Nodes are the voxels of a ``(F, d, h, w)`` feature map in z-major order, so
node ``n`` sits at ``(z, y, x)`` with ``n = (z * h + y) * w + x``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class SparseAdjacency:
    """Binary directed adjacency in CSR layout (``indptr``/``indices``)."""

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        if self.indptr.shape != (self.num_nodes + 1,):
            raise ValueError("indptr must have num_nodes + 1 entries")
        if self.indptr[0] != 0 or self.indptr[-1] != self.indices.size:
            raise ValueError("indptr does not span the index array")

    @classmethod
    def from_lists(cls, neighbours: list) -> "SparseAdjacency":
        lengths = np.array([len(nb) for nb in neighbours], dtype=np.int64)
        indptr = np.zeros(len(neighbours) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        indices = (np.concatenate([np.asarray(nb, dtype=np.int64) for nb in neighbours])
                   if neighbours and indptr[-1] else np.zeros(0, dtype=np.int64))
        return cls(len(neighbours), indptr, indices)

    @classmethod
    def from_dense(cls, dense) -> "SparseAdjacency":
        dense = np.asarray(dense, dtype=bool)
        return cls.from_lists([np.flatnonzero(row) for row in dense])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbours(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        rows = np.repeat(np.arange(self.num_nodes), self.degrees)
        out[rows, self.indices] = True
        return out

    @cached_property
    def _csr(self) -> sp.csr_matrix:
        data = np.ones(self.indices.size, dtype=np.float64)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.num_nodes, self.num_nodes))

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def is_symmetric(self) -> bool:
        a = self.to_scipy()
        return (a != a.T).nnz == 0


def node_coords(dims) -> np.ndarray:
    """(N, 3) integer (z, y, x) coordinates in node order."""
    d, h, w = dims
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)


def featuremap_to_nodes(fm: Tensor) -> Tensor:
    """(F, d, h, w) map -> (N, F) node matrix."""
    if fm.ndim != 4:
        raise ValueError(f"expected a (F, d, h, w) map, got {fm.shape}")
    f = fm.shape[0]
    return T.transpose(T.reshape(fm, (f, -1)), (1, 0))


def nodes_to_featuremap(nodes: Tensor, dims) -> Tensor:
    d, h, w = dims
    if nodes.ndim != 2 or nodes.shape[0] != d * h * w:
        raise ValueError(f"{nodes.shape[0] if nodes.ndim else 0} nodes cannot fill a {d}x{h}x{w} grid")
    e = nodes.shape[1]
    return T.reshape(T.transpose(nodes, (1, 0)), (e, d, h, w))


def build_regular_adjacency(dims) -> SparseAdjacency:
    """Each node linked to its (up to) 26 direct spatial neighbours."""
    d, h, w = dims
    if min(d, h, w) < 1:
        raise ValueError(f"grid dims must be positive, got {dims}")
    coords = node_coords(dims)
    neighbours = []
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1) if (a, b, c) != (0, 0, 0)]
    offsets = np.array(offsets)
    for z, y, x in coords:
        cand = offsets + (z, y, x)
        ok = ((cand >= 0) & (cand < (d, h, w))).all(axis=1)
        cand = cand[ok]
        neighbours.append(np.sort((cand[:, 0] * h + cand[:, 1]) * w + cand[:, 2]))
    return SparseAdjacency.from_lists(neighbours)


def build_dynamic_adjacency(z, dims, k: int = 26, radius: int = 5) -> SparseAdjacency:
    """k nearest nodes in feature space, searched inside a spatial cube.

    Candidates for node ``i`` are the other nodes within Chebyshev distance
    ``radius``.  Ranking uses squared Euclidean feature distance; equal
    distances go to the smaller node index.  The result is not symmetrised.
    """
    feats = z.data if isinstance(z, Tensor) else np.asarray(z)
    d, h, w = dims
    n = d * h * w
    if feats.ndim != 2 or feats.shape[0] != n:
        raise ValueError(f"feature matrix {feats.shape} does not match grid {dims}")
    if k < 1 or radius < 1:
        raise ValueError("k and radius must be >= 1")
    feats = feats.astype(np.float64, copy=False)
    coords = node_coords(dims)
    neighbours = []
    # process in row blocks to bound the (block, N, F) difference tensor
    block = max(1, 2_000_000 // max(1, n * feats.shape[1]))
    for start in range(0, n, block):
        rows = np.arange(start, min(n, start + block))
        cheb = np.abs(coords[rows, None, :] - coords[None, :, :]).max(axis=2)
        allowed = cheb <= radius
        allowed[np.arange(rows.size), rows] = False
        diff = feats[rows, None, :] - feats[None, :, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        dist[~allowed] = np.inf
        order = np.argsort(dist, axis=1, kind="stable")
        counts = allowed.sum(axis=1)
        for r, i in enumerate(rows):
            neighbours.append(order[r, :min(k, counts[r])])
    adj = SparseAdjacency.from_lists(neighbours)
    T.log_pattern(adj.indices)
    return adj


@dataclass(frozen=True)
class GnnModuleSpec:
    in_features: int
    out_features: int
    num_layers: int = 4
    adjacency: str = "regular"
    k: int = 26
    radius: int = 5

    def __post_init__(self):
        if self.adjacency not in ("regular", "dynamic"):
            raise ValueError(f"adjacency must be 'regular' or 'dynamic', got {self.adjacency!r}")
        if self.num_layers < 1 or self.k < 1 or self.radius < 1:
            raise ValueError("num_layers, k and radius must all be >= 1")

    def param_shapes(self) -> dict[str, tuple]:
        f, e = self.in_features, self.out_features
        shapes = {
            "mlp1.weight": (f, e), "mlp1.bias": (e,),
            "mlp2.weight": (e, e), "mlp2.bias": (e,),
            "norm.scale": (e,), "norm.shift": (e,),
        }
        for l in range(self.num_layers):
            shapes[f"conv{l}.w_self"] = (e, e)
            shapes[f"conv{l}.w_neigh"] = (e, e)
        return shapes


def init_gnn_weights(spec: GnnModuleSpec, rng: np.random.Generator, dtype=np.float64) -> dict[str, Tensor]:
    """He fan-in initialisation; zero biases; identity affine for the norm."""
    out = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith("bias") or name == "norm.shift":
            arr = np.zeros(shape)
        elif name == "norm.scale":
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        out[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return out


def node_mlp(z: Tensor, weights: dict[str, Tensor], eps: float = 1e-5) -> Tensor:
    hidden = T.relu(T.add(T.matmul(z, weights["mlp1.weight"]), weights["mlp1.bias"]))
    hidden = T.relu(T.add(T.matmul(hidden, weights["mlp2.weight"]), weights["mlp2.bias"]))
    return T.layer_norm(hidden, weights["norm.scale"], weights["norm.shift"], eps=eps)


def graph_conv_layer(h: Tensor, adj: SparseAdjacency, w_self: Tensor, w_neigh: Tensor) -> Tensor:
    """relu(H W0 + D^-1 A H W1), isolated nodes keeping only the self term."""
    if h.shape[1] != w_self.shape[0] or h.shape[1] != w_neigh.shape[0]:
        raise ValueError(f"node features {h.shape} incompatible with weights {w_self.shape}, {w_neigh.shape}")
    own = T.matmul(h, w_self)
    agg = T.matmul(T.spmm(adj, h, normalize=True), w_neigh)
    return T.relu(T.add(own, agg))


def build_adjacency(spec: GnnModuleSpec, nodes: Tensor, dims) -> SparseAdjacency:
    if spec.adjacency == "regular":
        return build_regular_adjacency(dims)
    return build_dynamic_adjacency(nodes, dims, spec.k, spec.radius)


def gnn_module_forward(fm: Tensor, spec: GnnModuleSpec, weights: dict[str, Tensor],
                       adjacency: SparseAdjacency | None = None) -> Tensor:
    """Feature map in, feature map out; spatial extents are preserved.

    ``adjacency`` overrides graph construction (used to freeze a dynamic
    graph during finite-difference checks).
    """
    if fm.shape[0] != spec.in_features:
        raise ValueError(f"map has {fm.shape[0]} channels, module expects {spec.in_features}")
    dims = fm.shape[1:]
    z = featuremap_to_nodes(fm)
    adj = adjacency if adjacency is not None else build_adjacency(spec, z, dims)
    h = node_mlp(z, weights)
    for l in range(spec.num_layers):
        h = graph_conv_layer(h, adj, weights[f"conv{l}.w_self"], weights[f"conv{l}.w_neigh"])
    return nodes_to_featuremap(h, dims)
