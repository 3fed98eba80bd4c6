"""Undirected social graphs: generation, augmentation and neighbor aggregation.

Units are labelled ``0 .. n-1``. A graph is stored as a sorted edge list
``(i, j)`` with ``i < j`` plus a CSR neighbor index; the dense adjacency is
only materialized on request for ``n <= DENSE_LIMIT``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, ParameterError

DENSE_LIMIT = 20_000


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NetworkGraph:
    """Immutable undirected simple graph over ``n`` units.

    Parameters
    ----------
    n : int
        Number of units.
    edges : ndarray of shape (m, 2)
        Unique unordered pairs with ``edges[:, 0] < edges[:, 1]``, sorted
        lexicographically.
    """

    n: int
    edges: np.ndarray
    indptr: np.ndarray = field(repr=False, compare=False)
    indices: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, n: int, edges: Union[np.ndarray, Iterable[Sequence[int]]]) -> "NetworkGraph":
        """Build a graph, dropping self-loops and duplicate/reversed pairs."""
        if n < 1:
            raise ParameterError(f"n must be >= 1, got {n}")
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        e = e.reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ParameterError("edge endpoint out of range")
        e = e[e[:, 0] != e[:, 1]]
        e = np.sort(e, axis=1)
        if e.size:
            e = np.unique(e, axis=0)
        # unique() sorts lexicographically
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(n=int(n), edges=_frozen(e), indptr=_frozen(indptr), indices=_frozen(dst))

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def adjacency_sparse(self) -> sp.csr_matrix:
        data = np.ones(self.indices.shape[0])
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def adjacency(self) -> np.ndarray:
        """Dense 0/1 adjacency matrix (only for ``n <= DENSE_LIMIT``)."""
        if self.n > DENSE_LIMIT:
            raise ParameterError(f"dense adjacency refused for n={self.n} > {DENSE_LIMIT}")
        return self.adjacency_sparse().toarray()

    def permuted(self, perm: np.ndarray) -> "NetworkGraph":
        """Relabel units so that old unit ``perm[k]`` becomes new unit ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.n)
        return NetworkGraph.from_edges(self.n, inv[self.edges])


@dataclass(frozen=True)
class AugmentedGraph:
    """Self-loop augmented adjacency ``A + I`` and its normalized propagation matrix."""

    base: NetworkGraph
    a_tilde: sp.csr_matrix
    a_norm: sp.csr_matrix
    normalization: str = "row"

    @property
    def n(self) -> int:
        return self.base.n


def augment(graph: NetworkGraph, normalization: str = "row") -> AugmentedGraph:
    """Return ``A + I`` with row (``D^-1 (A+I)``), symmetric, or no (``"sum"``) normalization."""
    a_tilde = (graph.adjacency_sparse() + sp.identity(graph.n, format="csr")).tocsr()
    a_tilde.sort_indices()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    if normalization == "row":
        a_norm = sp.diags(1.0 / deg) @ a_tilde
    elif normalization == "sym":
        d = 1.0 / np.sqrt(deg)
        a_norm = sp.diags(d) @ a_tilde @ sp.diags(d)
    elif normalization == "sum":
        a_norm = a_tilde.copy()
    else:
        raise ParameterError(f"unknown normalization {normalization!r}")
    a_norm = sp.csr_matrix(a_norm)
    a_norm.sort_indices()
    return AugmentedGraph(graph, a_tilde, a_norm, normalization)


def neighbor_mean(graph: NetworkGraph, values: np.ndarray) -> np.ndarray:
    """Mean of ``values`` over each unit's neighbors; zero for isolated units."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != graph.n:
        raise ParameterError(f"values has {values.shape[0]} rows, graph has {graph.n} units")
    sums = graph.adjacency_sparse() @ values
    deg = graph.degrees.astype(float)
    scale = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    if sums.ndim == 1:
        return sums * scale
    return sums * scale[:, None]


# --------------------------------------------------------------------------
# generators


def _pair_from_index(k: np.ndarray, n: int) -> np.ndarray:
    """Decode linear indices of the strict upper triangle (row-major) to pairs."""
    k = k.astype(np.int64)
    total = n * (n - 1) // 2
    # row i holds indices [start(i), start(i+1)), start(i) = total - (n-i)(n-i-1)/2
    i = n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7) / 2.0 - 0.5).astype(np.int64)

    def start(r):
        return total - (n - r) * (n - r - 1) // 2

    # guard against rounding at row boundaries
    i = np.where(start(i) > k, i - 1, i)
    i = np.where(start(i + 1) <= k, i + 1, i)
    j = k - start(i) + i + 1
    return np.stack([i, j], axis=1)


def generate_erdos_renyi(n: int, p: float, rng: np.random.Generator) -> NetworkGraph:
    """G(n, p): every unordered pair is an edge independently with probability ``p``.

    Sampling draws the edge count from Binomial(n(n-1)/2, p) and then a uniform
    subset of pairs of that size, which has the same law as independent coin
    flips but avoids touching all O(n^2) pairs.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"p must lie in [0, 1], got {p}")
    total = n * (n - 1) // 2
    m = int(rng.binomial(total, p)) if total else 0
    if m == 0:
        return NetworkGraph.from_edges(n, np.empty((0, 2), dtype=np.int64))
    idx = rng.choice(total, size=m, replace=False)
    return NetworkGraph.from_edges(n, _pair_from_index(np.sort(idx), n))


def generate_watts_strogatz(
    n: int,
    k: int,
    rewire_p: float,
    rng: np.random.Generator,
    ordering: Optional[Sequence[int]] = None,
) -> NetworkGraph:
    """Ring lattice over ``ordering`` with each lattice edge rewired w.p. ``rewire_p``.

    Each unit is joined to its ``k/2`` successors on the ring. Rewiring keeps
    the first endpoint and moves the second to a uniform non-self,
    non-duplicate unit; a target is re-drawn up to ``n`` times before the edge
    is left in place.
    """
    if k % 2 or not 0 < k < n:
        raise ParameterError(f"k must be even with 0 < k < n, got k={k}, n={n}")
    if not 0.0 <= rewire_p <= 1.0:
        raise ParameterError(f"rewire_p must lie in [0, 1], got {rewire_p}")
    order = np.arange(n) if ordering is None else np.asarray(ordering, dtype=np.int64)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise ParameterError("ordering must be a permutation of range(n)")

    adj = [set() for _ in range(n)]
    for s in range(1, k // 2 + 1):
        for t in range(n):
            u, v = int(order[t]), int(order[(t + s) % n])
            adj[u].add(v)
            adj[v].add(u)

    if rewire_p > 0:
        for s in range(1, k // 2 + 1):
            coins = rng.random(n)
            for t in range(n):
                if coins[t] >= rewire_p:
                    continue
                u, v = int(order[t]), int(order[(t + s) % n])
                if v not in adj[u]:
                    continue  # already rewired away from the other side
                for _ in range(n):
                    w = int(rng.integers(n))
                    if w != u and w not in adj[u]:
                        adj[u].discard(v)
                        adj[v].discard(u)
                        adj[u].add(w)
                        adj[w].add(u)
                        break

    edges = [(u, v) for u in range(n) for v in adj[u] if u < v]
    return NetworkGraph.from_edges(n, np.array(edges, dtype=np.int64).reshape(-1, 2))


# --------------------------------------------------------------------------
# edge-list text format


def read_edge_list(path: Union[str, Path], n: Optional[int] = None) -> tuple[np.ndarray, dict]:
    """Parse ``i j`` lines (``#`` comments allowed) into a raw int64 pair array.

    Returns the raw pairs (no cleaning) and counters ``{"lines": .., "self_loops": ..}``.
    """
    pairs = []
    stats = {"lines": 0, "self_loops": 0}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(parts)}")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer endpoint") from None
            if i < 0 or j < 0 or (n is not None and (i >= n or j >= n)):
                raise FormatError(f"{path}:{lineno}: endpoint out of range for n={n}")
            stats["lines"] += 1
            if i == j:
                stats["self_loops"] += 1
            pairs.append((i, j))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2), stats


def write_edge_list(graph: NetworkGraph, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        fh.write(f"# n={graph.n} edges={graph.n_edges}\n")
        for i, j in graph.edges:
            fh.write(f"{i} {j}\n")
