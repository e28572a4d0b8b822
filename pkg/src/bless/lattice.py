"""Analysis mask on a 2-D/3-D lattice and its face-sharing neighbour graph.

Dense voxel order is row-major with the *first* axis fastest (Fortran order),
which fixes the on-disk layout of every volume written by :mod:`bless.io`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse


@dataclass(frozen=True)
class LatticeMask:
    dims: tuple[int, ...]
    inside: np.ndarray  # flat bool, length prod(dims), first axis fastest

    sites: np.ndarray = field(init=False, repr=False)  # dense index -> flat site
    dense: np.ndarray = field(init=False, repr=False)  # flat site -> dense index or -1

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3) or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be 2 or 3 positive integers, got {dims}")
        inside = np.asarray(self.inside, dtype=bool)
        if inside.ndim != 1:
            inside = inside.reshape(-1, order="F")
        if inside.size != int(np.prod(dims)):
            raise ValueError("inside flags do not match dims")
        sites = np.flatnonzero(inside)
        dense = np.full(inside.size, -1, dtype=np.int64)
        dense[sites] = np.arange(sites.size)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "inside", inside)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "dense", dense)

    @classmethod
    def full(cls, dims: Sequence[int]) -> "LatticeMask":
        return cls(tuple(dims), np.ones(int(np.prod(dims)), dtype=bool))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "LatticeMask":
        arr = np.asarray(arr, dtype=bool)
        return cls(arr.shape, arr.reshape(-1, order="F"))

    @property
    def M(self) -> int:
        return int(self.sites.size)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def coords(self) -> np.ndarray:
        """Lattice coordinates of the in-mask voxels, shape (M, ndim)."""
        return np.stack(np.unravel_index(self.sites, self.dims, order="F"), axis=1)

    def to_volume(self, values: np.ndarray, fill=0) -> np.ndarray:
        """Scatter an (M, ...) array back onto the full lattice."""
        values = np.asarray(values)
        out = np.full((self.inside.size,) + values.shape[1:], fill, dtype=values.dtype)
        out[self.sites] = values
        return out.reshape(self.dims + values.shape[1:], order="F")

    def from_volume(self, vol: np.ndarray) -> np.ndarray:
        vol = np.asarray(vol)
        flat = vol.reshape((-1,) + vol.shape[self.ndim:], order="F")
        return flat[self.sites]


@dataclass(frozen=True)
class NeighborGraph:
    """Face-adjacency of the in-mask voxels.

    ``indptr``/``indices`` hold the sorted adjacency lists in CSR layout;
    ``edges`` lists each unordered pair once with ``edges[:, 0] < edges[:, 1]``.
    """

    indptr: np.ndarray
    indices: np.ndarray
    edges: np.ndarray
    color: np.ndarray  # checkerboard parity per voxel (0/1)

    @property
    def M(self) -> int:
        return self.indptr.size - 1

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, j: int) -> np.ndarray:
        return self.indices[self.indptr[j]:self.indptr[j + 1]]

    def adjacency(self) -> sparse.csr_matrix:
        data = np.ones(self.indices.size)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(self.M, self.M))

    def n_components(self) -> int:
        n, _ = sparse.csgraph.connected_components(self.adjacency(), directed=False)
        return int(n)


def build_graph(mask: LatticeMask) -> NeighborGraph:
    if mask.M == 0:
        raise ValueError("no in-mask voxels")
    dims = mask.dims
    coords = mask.coords()
    strides = np.cumprod((1,) + dims[:-1])
    src, dst = [], []
    for ax in range(len(dims)):
        ok = coords[:, ax] + 1 < dims[ax]
        nb_site = mask.sites[ok] + strides[ax]
        nb_dense = mask.dense[nb_site]
        keep = nb_dense >= 0
        src.append(np.flatnonzero(ok)[keep])
        dst.append(nb_dense[keep])
    a = np.concatenate(src)
    b = np.concatenate(dst)
    edges = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]

    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(mask.M + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    color = (coords.sum(axis=1) % 2).astype(np.int8)
    return NeighborGraph(indptr=indptr, indices=cols.astype(np.int64), edges=edges, color=color)


def connected_components(mask: LatticeMask, graph: NeighborGraph, active):
    """Label face-connected components among active voxels.

    Returns ``(labels, sizes)``: ``labels`` is -1 for inactive voxels, and
    component ids are ordered by decreasing size, ties broken by the smallest
    dense index contained in the component.
    """
    active = np.asarray(active, dtype=bool)
    if active.shape != (graph.M,):
        raise ValueError(f"active must have length {graph.M}")
    labels = np.full(graph.M, -1, dtype=np.int64)
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return labels, np.zeros(0, dtype=np.int64)
    e = graph.edges
    keep = active[e[:, 0]] & active[e[:, 1]]
    adj = sparse.coo_matrix(
        (np.ones(int(keep.sum())), (e[keep, 0], e[keep, 1])), shape=(graph.M, graph.M)
    )
    _, raw = sparse.csgraph.connected_components(adj, directed=False)
    raw = raw[idx]
    uniq, first, sizes = np.unique(raw, return_index=True, return_counts=True)
    # first occurrence in idx order == smallest dense index in the component
    order = np.lexsort((idx[first], -sizes))
    relabel = np.empty(uniq.size, dtype=np.int64)
    relabel[order] = np.arange(uniq.size)
    labels[idx] = relabel[np.searchsorted(uniq, raw)]
    return labels, sizes[order].astype(np.int64)
