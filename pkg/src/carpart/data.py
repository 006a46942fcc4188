"""Ingestion, the inverse hyperbolic sine transform and the synthetic grid generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError, InputError
from .graph import AdjacencyGraph, induced_laplacian
from .model import Dataset
from .partition import SpatialPartition

LOG2 = math.log(2.0)

SETTINGS = {"high": (2.0, 1.0), "moderate": (1.0, 0.5), "low": (0.0, 0.0)}


def ihs_transform(count, area=1.0):
    """``asinh(count / area) - log 2``; works elementwise on arrays."""
    area = np.asarray(area, dtype=float)
    if np.any(area <= 0):
        raise InputError("areas must be positive")
    out = np.arcsinh(np.asarray(count, dtype=float) / area) - LOG2
    return float(out) if out.ndim == 0 else out


def counts_from_transformed(y):
    """Nearest non-negative integer to ``sinh(y + log 2)``; halves round away from zero."""
    v = np.sinh(np.asarray(y, dtype=float) + LOG2)
    out = np.maximum(np.floor(np.abs(v) + 0.5) * np.sign(v), 0).astype(np.int64)
    return int(out) if out.ndim == 0 else out


# Reference 20x20 layouts as (row range, col range, offset) rectangles; the
# remaining cells form one cluster with offset 0.
_ALPHA_BLOCKS = [
    ((0, 4), (0, 19), 1.0),      # 76
    ((16, 19), (0, 13), -1.0),   # 39
    ((6, 10), (12, 18), 0.5),    # 24
    ((11, 15), (2, 6), -0.5),    # 16
    ((6, 8), (3, 5), 1.0),       # 4
    ((12, 13), (15, 16), -1.0),  # singletons
    ((5, 6), (8, 9), 1.0),
    ((17, 18), (17, 18), 0.5),
    ((9, 10), (1, 2), -0.5),
]
_BETA_BLOCKS = [
    ((0, 5), (0, 20), 1.0),      # 100
    ((5, 10), (0, 20), -1.0),    # 100
    ((14, 17), (8, 12), 1.0),    # 12
]


def _reference_layout(blocks):
    lab = np.full((20, 20), len(blocks), dtype=int)
    for b, ((r0, r1), (c0, c1), _) in enumerate(blocks):
        lab[r0:r1, c0:c1] = b
    offsets = [o for _, _, o in blocks] + [0.0]
    return lab, offsets


@dataclass(frozen=True)
class TruePartitions:
    alpha: SpatialPartition
    beta: SpatialPartition
    alpha_offsets: tuple
    beta_offsets: tuple


def default_true_partitions(side: int = 20) -> TruePartitions:
    """Fixed true layouts on a ``side x side`` rook grid, with per-cluster mean offsets.

    On the 20x20 grid the intercept partition has clusters of sizes
    237, 76, 39, 24, 16, 4, 1, 1, 1, 1 and the trend partition 188, 100, 100, 12.
    Other sides rescale the reference layout and split any pieces it
    disconnects.
    """
    if side < 2:
        raise InputError("grid side must be at least 2")
    graph = AdjacencyGraph.grid(side)
    out = []
    for blocks in (_ALPHA_BLOCKS, _BETA_BLOCKS):
        ref, offsets = _reference_layout(blocks)
        src = [int(ref[r * 20 // side, c * 20 // side]) for r in range(side) for c in range(side)]
        p = SpatialPartition.from_components(graph, src)
        out.append((p, tuple(offsets[src[min(c)]] for c in p.clusters)))
    return TruePartitions(out[0][0], out[1][0], out[0][1], out[1][1])


@dataclass
class SyntheticSpec:
    side: int = 20
    delta_alpha: float = 2.0
    delta_beta: float = 1.0
    n_periods: int = 12
    sigma2: float = 0.0625
    car_rho: float = 0.95
    car_a1: float = 0.125
    car_b1: float = 0.125
    car_sd: float = 0.25
    alpha_shift: float = 3.5
    dgp: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.delta_alpha < 0 or self.delta_beta < 0:
            raise InputError("separations must be non-negative")
        if self.dgp not in ("gaussian", "poisson"):
            raise InputError(f"unknown data generating process {self.dgp!r}")
        if self.n_periods < 3:
            raise InputError("need at least 3 periods")
        if self.sigma2 < 0 or self.car_sd < 0:
            raise InputError("variances must be non-negative")

    @classmethod
    def for_setting(cls, setting: str, **kw) -> "SyntheticSpec":
        if setting not in SETTINGS:
            raise InputError(f"unknown setting {setting!r}; choose from {sorted(SETTINGS)}")
        da, db = SETTINGS[setting]
        return cls(delta_alpha=da, delta_beta=db, **kw)


@dataclass
class SyntheticTruth:
    alpha: np.ndarray
    beta: np.ndarray
    partition_alpha: SpatialPartition
    partition_beta: SpatialPartition
    x_next: float
    y_next: np.ndarray
    counts: np.ndarray | None = None
    spec: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "alpha_partition": list(self.partition_alpha.labels),
            "beta_partition": list(self.partition_beta.labels),
            "x_next": self.x_next,
            "y_next": self.y_next.tolist(),
            "spec": self.spec,
        }, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, graph: AdjacencyGraph) -> "SyntheticTruth":
        d = json.loads(text)
        return cls(np.array(d["alpha"]), np.array(d["beta"]),
                   SpatialPartition.from_labels(graph, d["alpha_partition"]),
                   SpatialPartition.from_labels(graph, d["beta_partition"]),
                   float(d["x_next"]), np.array(d["y_next"]), spec=d.get("spec", {}))


def _car_draw(rng, graph, partition, means, rho, scale):
    out = np.empty(graph.n_units)
    for c, mu in zip(partition.clusters, means):
        idx = sorted(c)
        lap = induced_laplacian(graph, idx).matrix
        prec = rho * lap + (1.0 - rho) * np.eye(len(idx))
        # x = L^-T z has covariance (L L^T)^-1 = prec^-1
        chol = np.linalg.cholesky(prec)
        z = rng.standard_normal(len(idx))
        out[idx] = mu + math.sqrt(scale) * np.linalg.solve(chol.T, z)
    return out


def generate(spec: SyntheticSpec) -> tuple[Dataset, AdjacencyGraph, SyntheticTruth]:
    """Draw one synthetic data set on the grid; fully determined by ``spec.seed``."""
    truth_parts = default_true_partitions(spec.side)
    graph = truth_parts.alpha.graph
    rng = np.random.default_rng(spec.seed)
    mean_a = [spec.alpha_shift + o * spec.delta_alpha for o in truth_parts.alpha_offsets]
    mean_b = [o * spec.delta_beta for o in truth_parts.beta_offsets]
    sd2 = spec.car_sd ** 2
    alpha = _car_draw(rng, graph, truth_parts.alpha, mean_a, spec.car_rho, spec.car_a1 * sd2)
    beta = _car_draw(rng, graph, truth_parts.beta, mean_b, spec.car_rho, spec.car_b1 * sd2)
    t = spec.n_periods
    periods = list(range(t))
    base = Dataset.from_periods(np.zeros((graph.n_units, t)), periods)
    x_next = base.x_at(t)
    mu = alpha[:, None] + beta[:, None] * base.x[None, :]
    mu_next = alpha + beta * x_next
    counts = None
    if spec.dgp == "gaussian":
        sd = math.sqrt(spec.sigma2)
        y = mu + sd * rng.standard_normal(mu.shape)
        y_next = mu_next + sd * rng.standard_normal(graph.n_units)
    else:
        counts = rng.poisson(np.exp(mu))
        y = ihs_transform(counts)
        y_next = ihs_transform(rng.poisson(np.exp(mu_next)))
    ids = [str(u) for u in range(graph.n_units)]
    data = Dataset(y, base.x, unit_ids=ids, periods=periods, time_center=base.time_center,
                   time_scale=base.time_scale)
    truth = SyntheticTruth(alpha, beta, truth_parts.alpha, truth_parts.beta, float(x_next),
                           np.asarray(y_next, dtype=float), counts, asdict(spec))
    return data, graph, truth


def write_dataset_csv(path, data: Dataset, counts=None) -> None:
    """Long format ``unit,period,y`` (plus ``count`` when given)."""
    ids = data.unit_ids or [str(u) for u in range(data.n_units)]
    periods = data.periods or list(range(data.n_periods))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "period", "y"] + (["count"] if counts is not None else []))
        for i, uid in enumerate(ids):
            for j, per in enumerate(periods):
                row = [uid, per, repr(float(data.y[i, j]))]
                if counts is not None:
                    row.append(int(counts[i, j]))
                w.writerow(row)


def _read_long(path, value_col, cast):
    cells: dict = {}
    units: list = []
    seen_units = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"unit", "period", value_col}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            uid = row["unit"].strip()
            try:
                per = int(row["period"])
                val = cast(row[value_col])
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse row {row}") from None
            if (uid, per) in cells:
                raise DataError(f"{path}:{lineno}: duplicate row for unit {uid!r}, period {per}")
            cells[(uid, per)] = val
            if uid not in seen_units:
                seen_units.add(uid)
                units.append(uid)
    periods = sorted({p for _, p in cells})
    gaps = [(u, p) for u in units for p in periods if (u, p) not in cells]
    if gaps:
        shown = ", ".join(f"{u}@{p}" for u, p in gaps[:10])
        raise DataError(f"{path}: {len(gaps)} missing unit/period cells: {shown}"
                        + (" ..." if len(gaps) > 10 else ""))
    mat = np.array([[cells[(u, p)] for p in periods] for u in units], dtype=float)
    return units, periods, mat


def _count(text):
    v = int(text)
    if v < 0:
        raise ValueError("negative count")
    return v


def load_dataset(crime_csv, areas_csv, edges_csv) -> tuple[Dataset, AdjacencyGraph]:
    """Counts + areas + unit-id edge list into a transformed dataset and its graph."""
    units, periods, counts = _read_long(crime_csv, "count", _count)
    areas = {}
    with open(areas_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"unit", "area_sq_miles"} <= set(reader.fieldnames):
            raise DataError(f"{areas_csv}: expected columns unit,area_sq_miles")
        for row in reader:
            a = float(row["area_sq_miles"])
            if not a > 0:
                raise DataError(f"{areas_csv}: area of unit {row['unit']!r} must be positive")
            areas[row["unit"].strip()] = a
    missing = [u for u in units if u not in areas]
    if missing:
        raise DataError(f"{areas_csv}: no area for units {missing[:10]}")
    area = np.array([areas[u] for u in units])
    y = ihs_transform(counts, area[:, None])
    index = {u: i for i, u in enumerate(units)}
    try:
        graph = AdjacencyGraph.from_edge_csv(edges_csv, unit_index=index)
    except InputError as exc:
        raise DataError(str(exc)) from None
    return Dataset.from_periods(y, periods, unit_ids=units), graph


def load_transformed(data_csv, edges_csv) -> tuple[Dataset, AdjacencyGraph]:
    """Already-transformed long data ``unit,period,y`` plus a unit-id edge list."""
    units, periods, y = _read_long(data_csv, "y", float)
    index = {u: i for i, u in enumerate(units)}
    try:
        graph = AdjacencyGraph.from_edge_csv(edges_csv, unit_index=index)
    except InputError as exc:
        raise DataError(str(exc)) from None
    return Dataset.from_periods(y, periods, unit_ids=units), graph


def write_edges_by_id(path, graph: AdjacencyGraph, ids) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j"])
        for i, j in sorted(graph.edges):
            w.writerow([ids[i], ids[j]])
