"""Spatial partitions, particles and the local-search move generators.

A partition is stored canonically: clusters sorted by their smallest unit and
labelled ``0..K-1`` in that order. Two partitions that group the units the same
way therefore have identical label tuples, which double as the hashable key.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, NoOpMove
from .graph import AdjacencyGraph, connected_components, is_connected

MOVE_KINDS = ("island", "border", "merge", "split", "split_and_merge")
KIND_ORDER = {k: i for i, k in enumerate(MOVE_KINDS)}


class SpatialPartition:
    """Partition of all graph units into connected clusters (immutable)."""

    __slots__ = ("graph", "labels", "clusters", "_hash")

    def __init__(self, graph: AdjacencyGraph, clusters: Iterable[Iterable[int]],
                 validate: bool = True):
        clusters = [frozenset(int(u) for u in c) for c in clusters]
        if validate:
            _validate(graph, clusters)
        clusters.sort(key=min)
        labels = [0] * graph.n_units
        for lab, c in enumerate(clusters):
            for u in c:
                labels[u] = lab
        self.graph = graph
        self.clusters = tuple(clusters)
        self.labels = tuple(labels)
        self._hash = None

    @classmethod
    def from_labels(cls, graph: AdjacencyGraph, labels: Sequence, validate: bool = True):
        if len(labels) != graph.n_units:
            raise InputError(f"expected {graph.n_units} labels, got {len(labels)}")
        groups: dict = {}
        for u, lab in enumerate(labels):
            groups.setdefault(lab, []).append(u)
        return cls(graph, groups.values(), validate=validate)

    @classmethod
    def from_components(cls, graph: AdjacencyGraph, labels: Sequence) -> "SpatialPartition":
        """Refine an arbitrary labelling into the connected pieces of each label."""
        groups: dict = {}
        for u, lab in enumerate(labels):
            groups.setdefault(lab, []).append(u)
        pieces = []
        for members in groups.values():
            pieces.extend(connected_components(graph, members))
        return cls(graph, pieces, validate=False)

    @classmethod
    def one_cluster(cls, graph: AdjacencyGraph) -> "SpatialPartition":
        return cls(graph, [range(graph.n_units)])

    @classmethod
    def singletons(cls, graph: AdjacencyGraph) -> "SpatialPartition":
        return cls(graph, [[u] for u in range(graph.n_units)], validate=False)

    @property
    def k(self) -> int:
        return len(self.clusters)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.clusters)

    @property
    def n_units(self) -> int:
        return self.graph.n_units

    def key(self) -> tuple[int, ...]:
        """Label-invariant identity of the set partition."""
        return self.labels

    def cluster_of(self, unit: int) -> int:
        return self.labels[unit]

    def adjacent_labels(self, label: int) -> list[int]:
        """Labels of clusters sharing at least one edge with cluster ``label``."""
        out = set()
        labels = self.labels
        for u in self.clusters[label]:
            for v in self.graph.neighbors(u):
                if labels[v] != label:
                    out.add(labels[v])
        return sorted(out)

    def replace(self, removed: Iterable[int], added: Iterable[frozenset]) -> "SpatialPartition":
        removed = set(removed)
        kept = [c for lab, c in enumerate(self.clusters) if lab not in removed]
        return SpatialPartition(self.graph, kept + list(added), validate=False)

    def validate(self) -> None:
        _validate(self.graph, self.clusters)
        for lab, c in enumerate(self.clusters):
            if any(self.labels[u] != lab for u in c):
                raise InputError("labels and clusters disagree")

    def __eq__(self, other):
        if not isinstance(other, SpatialPartition):
            return NotImplemented
        return self.labels == other.labels

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(self.labels)
        return self._hash

    def __repr__(self):
        return f"SpatialPartition(k={self.k}, sizes={sorted(self.sizes, reverse=True)[:8]})"


def _validate(graph: AdjacencyGraph, clusters: Sequence[frozenset]) -> None:
    seen: set = set()
    for c in clusters:
        if not c:
            raise InputError("empty cluster")
        graph.check_units(c)
        if seen & c:
            raise InputError("clusters overlap")
        seen |= c
        if not is_connected(graph, c):
            raise InputError(f"cluster starting at unit {min(c)} is not connected")
    if len(seen) != graph.n_units:
        raise InputError(f"clusters cover {len(seen)} of {graph.n_units} units")


def canonical_key(p: SpatialPartition) -> tuple[int, ...]:
    return p.key()


@dataclass(frozen=True)
class Particle:
    """A pair of partitions: one for the mean levels, one for the trends."""

    alpha: SpatialPartition
    beta: SpatialPartition

    def __post_init__(self):
        if self.alpha.n_units != self.beta.n_units:
            raise InputError("alpha and beta partitions cover different unit sets")

    def key(self):
        return (self.alpha.labels, self.beta.labels)

    def side(self, which: str) -> SpatialPartition:
        return self.alpha if which == "alpha" else self.beta

    def with_side(self, which: str, p: SpatialPartition) -> "Particle":
        if which == "alpha":
            return Particle(p, self.beta)
        if which == "beta":
            return Particle(self.alpha, p)
        return Particle(p, p)

    def __eq__(self, other):
        if not isinstance(other, Particle):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


@dataclass(frozen=True)
class MoveProposal:
    """One local edit of a partition.

    ``removed`` lists the labels (in the source partition) of the clusters the
    move destroys, ``added`` the clusters it creates. ``target`` is ``alpha``,
    ``beta`` or ``both`` (equal-partition search).
    """

    kind: str
    target: str
    units: tuple[int, ...]
    removed: tuple[int, ...]
    added: tuple[frozenset, ...]
    result: SpatialPartition = field(compare=False)
    source: tuple[int, ...] = field(default=(), compare=False, repr=False)

    def order_key(self):
        return (KIND_ORDER[self.kind], min(self.units) if self.units else -1)


def _remainder_pieces(p: SpatialPartition, label: int, unit: int) -> list[frozenset]:
    rest = p.clusters[label] - {unit}
    return connected_components(p.graph, rest) if rest else []


def island_move(p: SpatialPartition, unit: int, target: str = "alpha") -> MoveProposal:
    p.graph.check_units([unit])
    lab = p.labels[unit]
    if len(p.clusters[lab]) == 1:
        raise NoOpMove(f"unit {unit} is already a singleton")
    added = (frozenset([unit]), *_remainder_pieces(p, lab, unit))
    return MoveProposal("island", target, (unit,), (lab,), added, p.replace([lab], added),
                        p.labels)


def apply_island(p: SpatialPartition, unit: int) -> SpatialPartition:
    """Move ``unit`` to a new singleton; the rest of its cluster splits into components."""
    return island_move(p, unit).result


def border_move(p: SpatialPartition, unit: int, dest: int, target: str = "alpha") -> MoveProposal:
    p.graph.check_units([unit])
    src = p.labels[unit]
    if not 0 <= dest < p.k:
        raise InputError(f"no cluster {dest}")
    if dest == src:
        raise InputError(f"unit {unit} already in cluster {dest}")
    if not any(p.labels[v] == dest for v in p.graph.neighbors(unit)):
        raise InputError(f"unit {unit} is not adjacent to cluster {dest}")
    added = (p.clusters[dest] | {unit}, *_remainder_pieces(p, src, unit))
    return MoveProposal("border", target, (unit,), (src, dest), added,
                        p.replace([src, dest], added), p.labels)


def apply_border(p: SpatialPartition, unit: int, dest_cluster: int) -> SpatialPartition:
    """Move a boundary unit into the adjacent cluster ``dest_cluster``."""
    return border_move(p, unit, dest_cluster).result


def merge_move(p: SpatialPartition, k1: int, k2: int, target: str = "alpha") -> MoveProposal:
    if k1 == k2 or not (0 <= k1 < p.k and 0 <= k2 < p.k):
        raise InputError(f"cannot merge clusters {k1} and {k2}")
    if k2 not in p.adjacent_labels(k1):
        raise InputError(f"clusters {k1} and {k2} are not adjacent")
    union = p.clusters[k1] | p.clusters[k2]
    added = (union,)
    return MoveProposal("merge", target, tuple(sorted(union)), (k1, k2), added,
                        p.replace([k1, k2], added), p.labels)


def apply_merge(p: SpatialPartition, k1: int, k2: int) -> SpatialPartition:
    return merge_move(p, k1, k2).result


def kmeans_1d(values, m: int, max_iter: int = 100) -> np.ndarray | None:
    """Lloyd's algorithm in one dimension, seeded at quantiles of the distinct values.

    Returns integer group labels ordered by centre, or ``None`` when the
    values cannot support ``m`` non-empty groups.
    """
    x = np.asarray(values, dtype=float)
    if m < 1:
        raise InputError("m must be positive")
    if m == 1:
        return np.zeros(len(x), dtype=int)
    distinct = np.unique(x)
    if len(distinct) < m:
        return None
    # seeding on distinct values keeps the initial centres strictly increasing
    centres = np.quantile(distinct, (np.arange(m) + 0.5) / m)
    labels = None
    for _ in range(max_iter):
        new = np.argmin(np.abs(x[:, None] - centres[None, :]), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=m)
        if np.any(counts == 0):
            return None
        centres = np.bincount(labels, weights=x, minlength=m) / counts
    order = np.argsort(centres, kind="stable")
    rank = np.empty(m, dtype=int)
    rank[order] = np.arange(m)
    return rank[labels]


def _split_pieces(p: SpatialPartition, k: int, values, max_subclusters: int):
    members = sorted(p.clusters[k])
    n_k = len(members)
    vals = np.asarray(values, dtype=float)[members]
    seen = set()
    for m in range(2, min(max_subclusters, n_k) + 1):
        groups = kmeans_1d(vals, m)
        if groups is None:
            continue
        pieces = []
        for g in range(m):
            grp = [members[i] for i in np.flatnonzero(groups == g)]
            pieces.extend(connected_components(p.graph, grp))
        pieces.sort(key=min)
        sig = tuple(pieces)
        if len(pieces) < 2 or sig in seen:
            continue
        seen.add(sig)
        yield pieces


def enumerate_splits(p: SpatialPartition, k: int, values, max_subclusters: int = 5,
                     target: str = "alpha") -> list[MoveProposal]:
    """Split cluster ``k`` by 1-D k-means on ``values`` for m = 2..max, refined to components."""
    if max_subclusters < 2:
        raise InputError("max_subclusters must be at least 2")
    out = []
    for pieces in _split_pieces(p, k, values, max_subclusters):
        added = tuple(pieces)
        out.append(MoveProposal("split", target, tuple(sorted(p.clusters[k])), (k,), added,
                                p.replace([k], added), p.labels))
    return out


def enumerate_split_and_merge(p: SpatialPartition, k: int, values, max_subclusters: int,
                              neighbor_means, target: str = "alpha") -> list[MoveProposal]:
    """Split cluster ``k`` then push pieces into their nearest-mean adjacent clusters.

    Two variants per split: every piece that touches another cluster is merged,
    or all of them except the largest piece.
    """
    vals = np.asarray(values, dtype=float)
    labels = p.labels
    out = []
    keys = set()
    for pieces in _split_pieces(p, k, values, max_subclusters):
        dest = []
        for piece in pieces:
            adj = {labels[v] for u in piece for v in p.graph.neighbors(u)} - {k}
            if not adj:
                dest.append(None)
                continue
            piece_mean = float(np.mean(vals[sorted(piece)]))
            dest.append(min(sorted(adj), key=lambda d: abs(neighbor_means[d] - piece_mean)))
        if all(d is None for d in dest):
            continue
        largest = max(range(len(pieces)), key=lambda i: (len(pieces[i]), -min(pieces[i])))
        for skip in (None, largest):
            absorbed: dict[int, set] = {}
            left = []
            for i, (piece, d) in enumerate(zip(pieces, dest)):
                if d is None or i == skip:
                    left.append(piece)
                else:
                    absorbed.setdefault(d, set()).update(piece)
            if not absorbed:
                continue
            removed = (k, *sorted(absorbed))
            added = tuple(left) + tuple(frozenset(p.clusters[d] | extra)
                                        for d, extra in sorted(absorbed.items()))
            result = p.replace(removed, added)
            if result.labels in keys:
                continue
            keys.add(result.labels)
            moved = tuple(sorted(u for d, extra in absorbed.items() for u in extra))
            out.append(MoveProposal("split_and_merge", target, moved, removed, added, result,
                                    p.labels))
    return out


def overlay(p1: SpatialPartition, p2: SpatialPartition) -> SpatialPartition:
    """Pairwise intersections of the clusters of two partitions (their meet)."""
    joint = list(zip(p1.labels, p2.labels))
    return SpatialPartition.from_components(p1.graph, joint)


def write_particle_csv(path, particles: Sequence[Particle], ids: Sequence | None = None) -> None:
    """Write particles as ``particle,unit,alpha_cluster,beta_cluster`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["particle", "unit", "alpha_cluster", "beta_cluster"])
        for ell, part in enumerate(particles):
            for u in range(part.alpha.n_units):
                unit = ids[u] if ids is not None else u
                w.writerow([ell, unit, part.alpha.labels[u], part.beta.labels[u]])


def read_particle_csv(path, graph: AdjacencyGraph,
                      unit_index: dict | None = None) -> list[Particle]:
    rows: dict[int, dict[int, tuple[int, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        has_particle = "particle" in (reader.fieldnames or [])
        for row in reader:
            ell = int(row["particle"]) if has_particle else 0
            unit = unit_index[row["unit"]] if unit_index is not None else int(row["unit"])
            rows.setdefault(ell, {})[unit] = (int(row["alpha_cluster"]), int(row["beta_cluster"]))
    out = []
    for ell in sorted(rows):
        assign = rows[ell]
        if sorted(assign) != list(range(graph.n_units)):
            raise InputError(f"particle {ell} does not cover all units")
        a = [assign[u][0] for u in range(graph.n_units)]
        b = [assign[u][1] for u in range(graph.n_units)]
        out.append(Particle(SpatialPartition.from_labels(graph, a),
                            SpatialPartition.from_labels(graph, b)))
    return out
