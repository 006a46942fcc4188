"""Closed-form quantities of the CAR-within-clusters model.

Given a particle, the model is a Gaussian linear model whose coefficient
precision is block diagonal, one block per cluster of each partition, and
whose design is orthogonal because time is centred. The marginal likelihood
and the conditional posterior means therefore reduce to independent
per-cluster factorizations. Those are cached by cluster membership so that a
local move only pays for the clusters it touches.
"""

from __future__ import annotations

import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import lapack

from .errors import CacheConsistencyError, InputError, NumericalError
from .graph import SubgraphLaplacian
from .partition import MoveProposal, Particle, SpatialPartition

SIDES = ("alpha", "beta")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the CAR-within-clusters model.

    ``a1``/``a2`` scale the within-cluster CAR and grand-mean variances of the
    intercepts, ``b1``/``b2`` those of the trends; ``nu_sigma`` and
    ``lambda_sigma`` parametrize the inverse-gamma prior on the residual variance.
    """

    rho: float = 0.9
    eta: float = 1.0
    a1: float = 1.0
    a2: float = 1.0
    b1: float = 1.0
    b2: float = 1.0
    nu_sigma: float = 3.0
    lambda_sigma: float = 1.0
    prior: str = "ep"

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise InputError(f"rho must lie in [0, 1), got {self.rho}")
        for name in ("eta", "a1", "a2", "b1", "b2", "nu_sigma", "lambda_sigma"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise InputError(f"{name} must be positive and finite, got {v}")
        if self.prior not in ("ep", "uniform"):
            raise InputError(f"unknown partition prior {self.prior!r}")

    def scales(self, side: str) -> tuple[float, float]:
        return (self.a1, self.a2) if side == "alpha" else (self.b1, self.b2)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class Dataset:
    """Transformed responses ``y`` (N x T) and the centred time covariate ``x``.

    ``time_center``/``time_scale`` record how ``x`` was derived from the raw
    periods so that forecasts can be placed on the same scale.
    """

    def __init__(self, y, x, unit_ids=None, periods=None, time_center=0.0, time_scale=1.0):
        y = np.array(y, dtype=float, ndmin=2)
        x = np.array(x, dtype=float).ravel()
        if y.shape[1] != x.shape[0]:
            raise InputError(f"y has {y.shape[1]} periods but x has {x.shape[0]}")
        if x.shape[0] < 2:
            raise InputError("need at least two periods")
        if abs(x.sum()) >= 1e-10:
            raise InputError("time covariate must have mean zero")
        if not np.all(np.isfinite(y)):
            raise InputError("y contains non-finite values")
        y.setflags(write=False)
        x.setflags(write=False)
        self.y = y
        self.x = x
        self.unit_ids = list(unit_ids) if unit_ids is not None else None
        self.periods = list(periods) if periods is not None else None
        self.time_center = float(time_center)
        self.time_scale = float(time_scale)
        self.sum_y = y.sum(axis=1)
        self.sum_xy = y @ x
        self.sxx = float(x @ x)
        self.yty = float(np.sum(y * y))
        self.ybar = self.sum_y / x.shape[0]

    @classmethod
    def from_periods(cls, y, periods, unit_ids=None) -> "Dataset":
        """Standardize raw period values (sample sd, divisor T-1) into ``x``."""
        t = np.asarray(periods, dtype=float)
        center = float(t.mean())
        scale = float(t.std(ddof=1))
        if scale <= 0:
            raise InputError("periods must not all be equal")
        x = (t - center) / scale
        x = x - x.mean()
        return cls(y, x, unit_ids=unit_ids, periods=list(periods), time_center=center,
                   time_scale=scale)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    def x_at(self, period: float) -> float:
        return (float(period) - self.time_center) / self.time_scale

    def side_stats(self, side: str) -> tuple[np.ndarray, float]:
        """Per-unit ``X'Y`` entries and the matching ``X'X`` diagonal value."""
        if side == "alpha":
            return self.sum_y, float(self.n_periods)
        return self.sum_xy, self.sxx


def car_precision_block(laplacian, rho: float, a1: float, a2: float) -> np.ndarray:
    """Precision of one cluster's coefficients with the grand mean integrated out.

    Uses the Woodbury form ``a1^-1 Omega - c 11'`` where ``Omega = rho L + (1-rho) I``
    and ``1`` is an eigenvector of ``Omega`` with eigenvalue ``1 - rho``.
    """
    lap = laplacian.matrix if isinstance(laplacian, SubgraphLaplacian) else np.asarray(laplacian)
    n = lap.shape[0]
    omega = rho * lap + (1.0 - rho) * np.eye(n)
    c = (1.0 - rho) ** 2 / a1 ** 2 / (n * (1.0 - rho) / a1 + 1.0 / a2)
    return omega / a1 - c


def grand_mean_posterior(values, rho: float, a1: float, a2: float) -> float:
    """Conditional posterior mean of a cluster's grand mean given its coefficients."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if n < 1:
        raise InputError("empty cluster")
    w = (1.0 - rho) / a1
    return float(w * values.sum() / (1.0 / a2 + n * w))


@dataclass(frozen=True)
class ClusterStats:
    """Per-cluster factorization results.

    ``logdet`` is this block's contribution to ``log det(Sigma_Y^-1)`` and
    ``quad`` its contribution ``r' (Sigma_k^-1 + d I)^-1 r`` to the explained
    quadratic form; ``mean`` holds the conditional posterior means of the
    cluster's coefficients in sorted-member order.
    """

    side: str
    members: tuple[int, ...]
    logdet: float
    quad: float
    mean: np.ndarray = field(repr=False)
    grand_mean: float


def _chol(mat: np.ndarray, what: str, members) -> tuple[np.ndarray, float]:
    fac, info = lapack.dpotrf(mat, lower=1, clean=0, overwrite_a=1)
    if info != 0:
        raise NumericalError(f"{what} factorization failed for cluster starting at unit "
                             f"{members[0]} (info={info})", cluster=tuple(members))
    return fac, 2.0 * float(np.sum(np.log(np.diag(fac))))


def cluster_stats(data: Dataset, graph, config: ModelConfig, side: str,
                  members) -> ClusterStats:
    """Factorize one cluster block from scratch."""
    idx = np.array(sorted(members), dtype=np.intp)
    n = idx.shape[0]
    rho = config.rho
    s1, s2 = config.scales(side)
    rhs_all, d = data.side_stats(side)
    r = rhs_all[idx]
    adj = graph.adjacency[np.ix_(idx, idx)].astype(float)
    omega = -rho * adj
    omega[np.diag_indices(n)] = rho * adj.sum(axis=1) + (1.0 - rho)
    prec = omega / s1
    c = (1.0 - rho) ** 2 / s1 ** 2 / (n * (1.0 - rho) / s1 + 1.0 / s2)
    prec -= c
    prec[np.diag_indices(n)] += d
    _, logdet_omega = _chol(omega, "CAR precision", idx)
    fac, logdet_m = _chol(prec, "posterior precision", idx)
    mean, info = lapack.dpotrs(fac, r, lower=1)
    if info != 0:
        raise NumericalError("triangular solve failed", cluster=tuple(idx))
    quad = float(r @ mean)
    logdet_prior = -n * math.log(s1) + logdet_omega - math.log1p(s2 * n * (1.0 - rho) / s1)
    grand = grand_mean_posterior(mean, rho, s1, s2)
    mean.setflags(write=False)
    return ClusterStats(side, tuple(int(u) for u in idx), logdet_prior - logdet_m, quad,
                        mean, grand)


_versions = itertools.count(1)


class BlockCache:
    """LRU cache of :class:`ClusterStats` keyed by (side, membership).

    A cache is bound to one dataset, graph and configuration; ``version`` is a
    unique stamp carried by every :class:`ParticleStats` built from it.
    """

    def __init__(self, data: Dataset, graph, config: ModelConfig, maxsize: int = 50000):
        if data.n_units != graph.n_units:
            raise InputError(f"dataset has {data.n_units} units but graph has {graph.n_units}")
        self.data = data
        self.graph = graph
        self.config = config
        self.maxsize = maxsize
        self.version = next(_versions)
        self._store: OrderedDict = OrderedDict()
        self.hits = 0
        self.misses = 0
        nt = data.n_units * data.n_periods
        nu, lam = config.nu_sigma, config.lambda_sigma
        self._const = (-0.5 * nt * math.log(math.pi) + math.lgamma(0.5 * (nt + nu))
                       - math.lgamma(0.5 * nu) + 0.5 * nu * math.log(nu * lam))
        self._power = 0.5 * (nt + nu)

    def get(self, side: str, members) -> ClusterStats:
        key = (side, np.fromiter(sorted(members), dtype=np.int32).tobytes())
        hit = self._store.get(key)
        if hit is not None:
            self.hits += 1
            self._store.move_to_end(key)
            return hit
        self.misses += 1
        st = cluster_stats(self.data, self.graph, self.config, side, members)
        self._store[key] = st
        if len(self._store) > self.maxsize:
            self._store.popitem(last=False)
        return st

    def log_marginal(self, logdet_total: float, quad_total: float) -> float:
        """Assemble ``log p(y | particle)`` from the summed block terms."""
        nu_lam = self.config.nu_sigma * self.config.lambda_sigma
        resid = self.data.yty - quad_total
        if not nu_lam + resid > 0:
            raise NumericalError(f"non-positive posterior scale {nu_lam + resid!r}")
        return self._const + 0.5 * logdet_total - self._power * math.log(nu_lam + resid)

    def _check_graph(self, p: SpatialPartition):
        if p.graph is not self.graph and p.graph.edges != self.graph.edges:
            raise CacheConsistencyError("partition built on a different graph")


@dataclass(frozen=True)
class ParticleStats:
    """Cached likelihood state of one particle (the per-particle cache)."""

    particle: Particle
    alpha_blocks: tuple[ClusterStats, ...] = field(repr=False)
    beta_blocks: tuple[ClusterStats, ...] = field(repr=False)
    logdet: tuple[float, float]
    quad: tuple[float, float]
    log_marginal: float
    version: int

    def blocks(self, side: str) -> tuple[ClusterStats, ...]:
        return self.alpha_blocks if side == "alpha" else self.beta_blocks

    def unit_means(self, side: str) -> np.ndarray:
        out = np.empty(self.particle.alpha.n_units)
        for b in self.blocks(side):
            out[list(b.members)] = b.mean
        return out

    def grand_means(self, side: str) -> np.ndarray:
        return np.array([b.grand_mean for b in self.blocks(side)])


def particle_stats(cache: BlockCache, particle: Particle) -> ParticleStats:
    """Build the per-particle state, reusing any cached cluster blocks."""
    cache._check_graph(particle.alpha)
    cache._check_graph(particle.beta)
    blocks = {}
    for side in SIDES:
        blocks[side] = tuple(cache.get(side, c) for c in particle.side(side).clusters)
    logdet = tuple(math.fsum(b.logdet for b in blocks[s]) for s in SIDES)
    quad = tuple(math.fsum(b.quad for b in blocks[s]) for s in SIDES)
    lm = cache.log_marginal(math.fsum(logdet), math.fsum(quad))
    return ParticleStats(particle, blocks["alpha"], blocks["beta"], logdet, quad, lm,
                         cache.version)


def _check_version(cache: BlockCache, stats: ParticleStats) -> None:
    if stats.version != cache.version:
        raise CacheConsistencyError(
            f"particle state built by cache v{stats.version}, not v{cache.version}")


def _move_sides(move: MoveProposal) -> tuple[str, ...]:
    return SIDES if move.target == "both" else (move.target,)


def move_log_marginal(cache: BlockCache, stats: ParticleStats, move: MoveProposal) -> float:
    """Log marginal after ``move`` using only the blocks the move touches."""
    _check_version(cache, stats)
    logdet = list(stats.logdet)
    quad = list(stats.quad)
    for s, side in enumerate(SIDES):
        if side not in _move_sides(move):
            continue
        blocks = stats.blocks(side)
        for lab in move.removed:
            logdet[s] -= blocks[lab].logdet
            quad[s] -= blocks[lab].quad
        for c in move.added:
            b = cache.get(side, c)
            logdet[s] += b.logdet
            quad[s] += b.quad
    return cache.log_marginal(logdet[0] + logdet[1], quad[0] + quad[1])


def update_cache_for_move(cache: BlockCache, stats: ParticleStats,
                          move: MoveProposal) -> tuple[ParticleStats, float]:
    """Apply ``move`` to a particle state; returns the new state and the log-marginal change.

    Untouched clusters keep their blocks; only the move's new clusters are
    looked up (and factorized on a cache miss).
    """
    _check_version(cache, stats)
    sides = _move_sides(move)
    for side in sides:
        if move.source and move.source != stats.particle.side(side).labels:
            raise CacheConsistencyError(f"move was built against a different {side} partition")
    particle = stats.particle.with_side(move.target, move.result)
    new = particle_stats(cache, particle)
    return new, new.log_marginal - stats.log_marginal


@dataclass(frozen=True)
class FitQuantities:
    log_marginal: float
    post_mean_alpha: np.ndarray
    post_mean_beta: np.ndarray
    grand_mean_alpha: np.ndarray
    grand_mean_beta: np.ndarray


def log_marginal_likelihood(data: Dataset, particle: Particle, config: ModelConfig,
                            cache: BlockCache | None = None) -> float:
    """``log p(y | particle)`` with sigma^2, grand means and coefficients integrated out."""
    if cache is None:
        cache = BlockCache(data, particle.alpha.graph, config)
    elif cache.config != config or cache.data is not data:
        raise CacheConsistencyError("cache was built for another dataset or configuration")
    return particle_stats(cache, particle).log_marginal


def posterior_means(data: Dataset, particle: Particle, config: ModelConfig,
                    cache: BlockCache | None = None) -> FitQuantities:
    if cache is None:
        cache = BlockCache(data, particle.alpha.graph, config)
    st = particle_stats(cache, particle)
    return FitQuantities(st.log_marginal, st.unit_means("alpha"), st.unit_means("beta"),
                         st.grand_means("alpha"), st.grand_means("beta"))
