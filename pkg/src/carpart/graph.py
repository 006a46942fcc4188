"""Undirected binary adjacency over areal units and connectivity primitives."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError


class AdjacencyGraph:
    """Immutable undirected graph on units ``0..n_units-1``.

    Adjacency is kept three ways: the deduplicated edge set, per-unit sorted
    neighbor tuples (for boundary queries) and a dense boolean matrix (for
    building sub-Laplacians with fancy indexing).
    """

    __slots__ = ("n_units", "edges", "_neighbors", "_adj")

    def __init__(self, n_units: int, edges: Iterable[tuple[int, int]]):
        n_units = int(n_units)
        if n_units < 1:
            raise InputError("graph needs at least one unit")
        edge_set = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if not (0 <= i < n_units and 0 <= j < n_units):
                raise InputError(f"edge ({i}, {j}) outside [0, {n_units})")
            if i == j:
                raise InputError(f"self-loop on unit {i}")
            edge_set.add((min(i, j), max(i, j)))
        nbrs = [[] for _ in range(n_units)]
        adj = np.zeros((n_units, n_units), dtype=bool)
        for i, j in sorted(edge_set):
            nbrs[i].append(j)
            nbrs[j].append(i)
            adj[i, j] = adj[j, i] = True
        adj.setflags(write=False)
        self.n_units = n_units
        self.edges = frozenset(edge_set)
        self._neighbors = tuple(tuple(sorted(v)) for v in nbrs)
        self._adj = adj

    @classmethod
    def grid(cls, rows: int, cols: int | None = None) -> "AdjacencyGraph":
        """Rook (4-neighbour) lattice; unit index is ``r * cols + c``."""
        cols = rows if cols is None else cols
        edges = []
        for r in range(rows):
            for c in range(cols):
                u = r * cols + c
                if c + 1 < cols:
                    edges.append((u, u + 1))
                if r + 1 < rows:
                    edges.append((u, u + cols))
        return cls(rows * cols, edges)

    @classmethod
    def path(cls, n: int) -> "AdjacencyGraph":
        return cls(n, [(i, i + 1) for i in range(n - 1)])

    @classmethod
    def from_edge_csv(cls, path, n_units: int | None = None,
                      unit_index: dict[str, int] | None = None) -> "AdjacencyGraph":
        """Read an ``i,j`` edge list.

        With ``unit_index`` the columns hold unit ids that are mapped to
        indices; otherwise they are 0-based integer indices. Reversed and
        repeated rows collapse to one edge.
        """
        edges = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"i", "j"} <= set(reader.fieldnames):
                raise InputError(f"{path}: expected header 'i,j'")
            for lineno, row in enumerate(reader, start=2):
                a, b = row["i"].strip(), row["j"].strip()
                if unit_index is not None:
                    try:
                        edges.append((unit_index[a], unit_index[b]))
                    except KeyError as exc:
                        raise InputError(f"{path}:{lineno}: unknown unit {exc.args[0]!r}") from None
                else:
                    try:
                        edges.append((int(a), int(b)))
                    except ValueError:
                        raise InputError(f"{path}:{lineno}: non-integer unit index") from None
        if unit_index is not None:
            n_units = len(unit_index)
        elif n_units is None:
            n_units = 1 + max((max(e) for e in edges), default=0)
        return cls(n_units, edges)

    def to_edge_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j"])
            for i, j in sorted(self.edges):
                w.writerow([i, j])

    def neighbors(self, unit: int) -> tuple[int, ...]:
        return self._neighbors[unit]

    @property
    def adjacency(self) -> np.ndarray:
        """Read-only dense boolean adjacency matrix."""
        return self._adj

    def degree(self, unit: int) -> int:
        return len(self._neighbors[unit])

    def check_units(self, units: Iterable[int]) -> None:
        for u in units:
            if not (0 <= u < self.n_units):
                raise InputError(f"unit {u} outside [0, {self.n_units})")

    def __repr__(self) -> str:
        return f"AdjacencyGraph(n_units={self.n_units}, n_edges={len(self.edges)})"


@dataclass(frozen=True)
class SubgraphLaplacian:
    indices: tuple[int, ...]
    matrix: np.ndarray


def induced_laplacian(graph: AdjacencyGraph, subset: Sequence[int]) -> SubgraphLaplacian:
    """Unweighted Laplacian of the subgraph induced by ``subset`` (in that order)."""
    idx = [int(u) for u in subset]
    graph.check_units(idx)
    if len(set(idx)) != len(idx):
        raise InputError("subset contains repeated units")
    a = graph.adjacency[np.ix_(idx, idx)].astype(float)
    lap = np.diag(a.sum(axis=1)) - a
    return SubgraphLaplacian(tuple(idx), lap)


def connected_components(graph: AdjacencyGraph, subset: Iterable[int]) -> list[frozenset[int]]:
    """Maximal connected pieces of the induced subgraph, ordered by smallest unit."""
    remaining = set(subset)
    graph.check_units(remaining)
    pieces = []
    while remaining:
        start = min(remaining)
        remaining.discard(start)
        seen = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in graph.neighbors(u):
                if v in remaining:
                    remaining.discard(v)
                    seen.add(v)
                    queue.append(v)
        pieces.append(frozenset(seen))
    pieces.sort(key=min)
    return pieces


def is_connected(graph: AdjacencyGraph, subset: Iterable[int]) -> bool:
    """True iff ``subset`` is non-empty and induces a connected subgraph."""
    subset = set(subset)
    if not subset:
        return False
    graph.check_units(subset)
    start = next(iter(subset))
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in graph.neighbors(u):
            if v in subset and v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(subset)
