"""Entropy-penalized particle optimization over pairs of spatial partitions.

The search maximizes ``sum_l w_l log p(y, g_l) + lam * H(w)`` by coordinate
ascent. Weights are always held at their optimum, which makes the objective
equal to ``lam * log sum_u exp(a_u / lam)`` over the distinct particles ``u``
with log posteriors ``a_u``. Each candidate move is scored by that profiled
value, so a particle sitting on top of another one is free to move away even
when the move lowers its own posterior.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import InputError
from .inference import kmeans_partition, unit_mles
from .model import (BlockCache, Dataset, ModelConfig, ParticleStats, move_log_marginal,
                    particle_stats, update_cache_for_move)
from .partition import (KIND_ORDER, MoveProposal, Particle, SpatialPartition, border_move,
                        enumerate_split_and_merge, enumerate_splits, island_move, merge_move,
                        overlay)
from .priors import PartitionPrior, particle_log_prior


@dataclass(frozen=True)
class SearchConfig:
    n_particles: int = 10
    lam: float = 100.0
    max_sweeps: int = 500
    tol: float = 1e-8
    seed: int = 0
    equal_partitions: bool = False
    island_quantile: float = 0.05
    max_subclusters: int = 5

    def __post_init__(self):
        if self.n_particles < 1:
            raise InputError("need at least one particle")
        if not self.lam > 0:
            raise InputError("lambda must be positive")
        if not 0 <= self.island_quantile < 0.5:
            raise InputError("island quantile must lie in [0, 0.5)")
        if self.max_subclusters < 2:
            raise InputError("max_subclusters must be at least 2")

    def replace(self, **changes) -> "SearchConfig":
        return replace(self, **changes)


def entropy(weights, keys=None) -> float:
    """Entropy of the distribution a weighted particle list induces (copies pooled)."""
    w = np.asarray(weights, dtype=float)
    if keys is None:
        q = w
    else:
        agg: dict = {}
        for k, wi in zip(keys, w):
            agg[k] = agg.get(k, 0.0) + wi
        q = np.array(list(agg.values()))
    q = q[q > 0]
    return float(-np.sum(q * np.log(q)))


def optimal_weights(log_posts, lam: float, keys=None) -> np.ndarray:
    """Maximizer of the penalized objective over the simplex for fixed particles.

    Distinct particles get mass proportional to ``exp(log_post / lam)``;
    identical particles split their aggregate equally.
    """
    from .inference import truncation_weights
    return truncation_weights(log_posts, keys, temperature=lam)


def objective_value(log_posts, weights, lam: float, keys=None) -> float:
    lp = np.asarray(log_posts, dtype=float)
    w = np.asarray(weights, dtype=float)
    return math.fsum(w * lp) + lam * entropy(w, keys)


def profiled_objective(log_posts, lam: float, keys=None) -> float:
    """Objective value at the optimal weights: ``lam * logsumexp(a_u / lam)`` over distinct particles."""
    lp = np.asarray(log_posts, dtype=float)
    if keys is not None:
        seen: dict = {}
        for k, a in zip(keys, lp):
            seen.setdefault(k, a)
        lp = np.fromiter(seen.values(), dtype=float)
    return float(lam * logsumexp(lp / lam))


@dataclass
class ParticleSet:
    particles: list
    stats: list = field(repr=False)
    log_posts: np.ndarray
    weights: np.ndarray
    lam: float

    def keys(self) -> list:
        return [p.key() for p in self.particles]

    def objective(self) -> float:
        return objective_value(self.log_posts, self.weights, self.lam, self.keys())

    def copy(self) -> "ParticleSet":
        return ParticleSet(list(self.particles), list(self.stats), self.log_posts.copy(),
                           self.weights.copy(), self.lam)

    def reweight(self) -> None:
        self.weights = optimal_weights(self.log_posts, self.lam, self.keys())

    def sorted_by_weight(self) -> "ParticleSet":
        order = sorted(range(len(self.particles)),
                       key=lambda i: (-self.weights[i], -self.log_posts[i], i))
        return ParticleSet([self.particles[i] for i in order], [self.stats[i] for i in order],
                           self.log_posts[order], self.weights[order], self.lam)


def objective(ps: ParticleSet) -> float:
    return ps.objective()


class Scorer:
    """Bundles everything needed to evaluate particles and moves."""

    def __init__(self, data: Dataset, graph, config: ModelConfig, cfg: SearchConfig,
                 cache: BlockCache | None = None):
        self.data = data
        self.graph = graph
        self.config = config
        self.cfg = cfg
        self.cache = cache if cache is not None else BlockCache(data, graph, config)
        if self.cache.config != config or self.cache.data is not data:
            raise InputError("cache built for a different dataset or configuration")
        self.prior = PartitionPrior.from_config(config)
        self._log_eta = math.log(config.eta)

    def stats(self, particle: Particle) -> ParticleStats:
        if self.cfg.equal_partitions and particle.alpha != particle.beta:
            raise InputError("equal-partition search needs identical alpha and beta partitions")
        return particle_stats(self.cache, particle)

    def log_post(self, st: ParticleStats) -> float:
        return st.log_marginal + particle_log_prior(st.particle, self.prior,
                                                    self.cfg.equal_partitions)

    def prior_delta(self, move: MoveProposal, source: SpatialPartition) -> float:
        if self.prior.kind == "uniform":
            return 0.0
        sizes = source.sizes
        d = (len(move.added) - len(move.removed)) * self._log_eta
        d += math.fsum(math.lgamma(len(c)) for c in move.added)
        d -= math.fsum(math.lgamma(sizes[k]) for k in move.removed)
        sides = 2 if move.target == "both" and not self.cfg.equal_partitions else 1
        return sides * d

    def move_log_post(self, st: ParticleStats, move: MoveProposal) -> float:
        src = st.particle.alpha if move.target in ("alpha", "both") else st.particle.beta
        return (move_log_marginal(self.cache, st, move)
                + particle_log_prior(st.particle, self.prior, self.cfg.equal_partitions)
                + self.prior_delta(move, src))


def _cluster_value_means(p: SpatialPartition, values: np.ndarray) -> list[float]:
    return [float(values[list(c)].mean()) for c in p.clusters]


def candidate_moves(st: ParticleStats, which: str, cfg: SearchConfig,
                    config: ModelConfig | None = None) -> list[MoveProposal]:
    """Heuristic proposals for one partition of a particle, deduplicated by result.

    ``which`` is ``alpha``, ``beta`` or ``both``; for ``both`` (tied partitions)
    proposals driven by either side's running estimates are pooled.
    """
    if which == "both":
        out, seen = [], set()
        for side in ("alpha", "beta"):
            for mv in _side_candidates(st, side, "both", cfg):
                if mv.result.labels not in seen:
                    seen.add(mv.result.labels)
                    out.append(mv)
        out.sort(key=MoveProposal.order_key)
        return out
    return _side_candidates(st, which, which, cfg)


def _side_candidates(st: ParticleStats, side: str, target: str, cfg: SearchConfig):
    p = st.particle.side(side)
    values = st.unit_means(side)
    grand = st.grand_means(side)
    graph = p.graph
    labels = p.labels
    moves = []
    q = cfg.island_quantile
    for k, c in enumerate(p.clusters):
        if len(c) < 2:
            continue
        members = sorted(c)
        vals = values[members]
        lo, hi = np.quantile(vals, [q, 1.0 - q])
        for u, v in zip(members, vals):
            if v <= lo or v >= hi:
                moves.append(island_move(p, u, target))
    for u in range(p.n_units):
        for d in sorted({labels[v] for v in graph.neighbors(u)} - {labels[u]}):
            moves.append(border_move(p, u, d, target))
    merged = set()
    for k in range(p.k):
        adj = p.adjacent_labels(k)
        if not adj:
            continue
        best = min(adj, key=lambda d: (abs(grand[d] - grand[k]), d))
        pair = (min(k, best), max(k, best))
        if pair not in merged:
            merged.add(pair)
            moves.append(merge_move(p, pair[0], pair[1], target))
    means = _cluster_value_means(p, values)
    for k, c in enumerate(p.clusters):
        if len(c) < 2:
            continue
        moves.extend(enumerate_splits(p, k, values, cfg.max_subclusters, target))
        moves.extend(enumerate_split_and_merge(p, k, values, cfg.max_subclusters, means,
                                               target))
    moves.sort(key=MoveProposal.order_key)
    out, seen = [], {p.labels}
    for mv in moves:
        if mv.result.labels not in seen:
            seen.add(mv.result.labels)
            out.append(mv)
    return out


def all_island_moves(p: SpatialPartition, target: str) -> list[MoveProposal]:
    out, seen = [], {p.labels}
    for u in range(p.n_units):
        if len(p.clusters[p.labels[u]]) < 2:
            continue
        mv = island_move(p, u, target)
        if mv.result.labels not in seen:
            seen.add(mv.result.labels)
            out.append(mv)
    return out


@dataclass(frozen=True)
class MoveChoice:
    moves: tuple
    log_post: float
    value: float
    gain: float


class _Profile:
    """Profiled objective of a set with one particle swapped out."""

    def __init__(self, ps: ParticleSet, ell: int):
        lam = ps.lam
        self.lam = lam
        others: dict = {}
        for i, (p, a) in enumerate(zip(ps.particles, ps.log_posts)):
            if i != ell:
                others.setdefault(p.key(), a)
        self.other_keys = others
        self.base = logsumexp(np.fromiter(others.values(), dtype=float) / lam) if others else -math.inf

    def value(self, key, log_post: float) -> float:
        if key in self.other_keys:
            return self.lam * self.base
        return self.lam * float(np.logaddexp(self.base, log_post / self.lam))


def _particle_after(st: ParticleStats, move: MoveProposal) -> Particle:
    return st.particle.with_side(move.target, move.result)


def best_move(ps: ParticleSet, ell: int, which: str, scorer: Scorer,
              moves=None) -> MoveChoice | None:
    """Best-scoring proposal for particle ``ell``; ``None`` if nothing beats the tolerance."""
    st = ps.stats[ell]
    prof = _Profile(ps, ell)
    current = prof.value(st.particle.key(), ps.log_posts[ell])
    if moves is None:
        moves = candidate_moves(st, which, scorer.cfg)
    best = None
    for mv in moves:
        lp = scorer.move_log_post(st, mv)
        val = prof.value(_particle_after(st, mv).key(), lp)
        if best is None or val > best.value:
            best = MoveChoice((mv,), lp, val, val - current)
    if best is None or not best.gain > scorer.cfg.tol:
        return None
    return best


def best_step_through(ps: ParticleSet, ell: int, which: str, scorer: Scorer) -> MoveChoice | None:
    """Two-move escape through a state already held by another particle.

    A move that lands on another particle's state scores nothing by itself;
    here it is followed by the best single move of either partition. Only
    used once single moves are exhausted.
    """
    if which == "both":
        return None
    other = "beta" if which == "alpha" else "alpha"
    st = ps.stats[ell]
    prof = _Profile(ps, ell)
    current = prof.value(st.particle.key(), ps.log_posts[ell])
    best = None
    p = st.particle.side(which)
    seen = set()
    for mv in candidate_moves(st, which, scorer.cfg) + all_island_moves(p, which):
        key = _particle_after(st, mv).key()
        if key not in prof.other_keys or key in seen:
            continue
        seen.add(key)
        mid, _ = update_cache_for_move(scorer.cache, st, mv)
        follow = []
        for side in (which, other):
            follow += candidate_moves(mid, side, scorer.cfg)
            follow += all_island_moves(mid.particle.side(side), side)
        for mv2 in follow:
            lp = scorer.move_log_post(mid, mv2)
            val = prof.value(_particle_after(mid, mv2).key(), lp)
            if best is None or val > best.value:
                best = MoveChoice((mv, mv2), lp, val, val - current)
    if best is None or not best.gain > scorer.cfg.tol:
        return None
    return best


def _update_particle(ps: ParticleSet, ell: int, which: str, scorer: Scorer) -> bool:
    choice = best_move(ps, ell, which, scorer)
    if choice is None:
        p = ps.particles[ell].side("alpha" if which == "both" else which)
        choice = best_move(ps, ell, which, scorer, all_island_moves(p, which))
    if choice is None:
        choice = best_step_through(ps, ell, which, scorer)
    if choice is None:
        return False
    new = ps.stats[ell]
    for mv in choice.moves:
        new, _ = update_cache_for_move(scorer.cache, new, mv)
    ps.stats[ell] = new
    ps.particles[ell] = new.particle
    ps.log_posts[ell] = scorer.log_post(new)
    return True


def sweep(ps: ParticleSet, scorer: Scorer) -> tuple[ParticleSet, bool]:
    """One pass over the particles: alpha then beta move per particle, weights refreshed after each."""
    ps = ps.copy()
    sides = ("both",) if scorer.cfg.equal_partitions else ("alpha", "beta")
    improved = False
    for ell in range(len(ps.particles)):
        changed = False
        for which in sides:
            changed |= _update_particle(ps, ell, which, scorer)
        if changed:
            ps.reweight()
            improved = True
    return ps, improved


def make_particle_set(particles, scorer: Scorer, lam: float) -> ParticleSet:
    stats = [scorer.stats(p) for p in particles]
    lp = np.array([scorer.log_post(s) for s in stats])
    ps = ParticleSet([s.particle for s in stats], stats, lp, np.zeros(len(stats)), lam)
    ps.reweight()
    return ps


def initial_pool(data: Dataset, graph, cfg: SearchConfig, extra=()) -> list[Particle]:
    """k-means-on-MLE partitions for K = 1..floor(ln N), paired across alpha and beta."""
    if data.n_units < 2:
        raise InputError("need at least two units")
    kmax = max(1, int(math.floor(math.log(data.n_units))))
    mle = unit_mles(data) if data.n_periods >= 3 else None
    alpha_hat = mle.alpha_hat if mle else data.ybar
    beta_hat = mle.beta_hat if mle else data.sum_xy / data.sxx

    def side(values):
        out = []
        for k in range(1, kmax + 1):
            p = kmeans_partition(graph, values, k)
            if p is not None and p not in out:
                out.append(p)
        return out

    pa, pb = side(alpha_hat), side(beta_hat)
    pool = []
    for a in pa:
        for b in pb:
            if cfg.equal_partitions:
                m = overlay(a, b)
                pool.append(Particle(m, m))
            else:
                pool.append(Particle(a, b))
    for p in extra:
        if cfg.equal_partitions and p.alpha != p.beta:
            m = overlay(p.alpha, p.beta)
            p = Particle(m, m)
        pool.append(p)
    uniq = []
    for p in pool:
        if p not in uniq:
            uniq.append(p)
    return uniq


def initialize(data: Dataset, graph, config: ModelConfig, cfg: SearchConfig,
               scorer: Scorer | None = None, extra=()) -> ParticleSet:
    """Draw L particles with replacement from the pool, proportionally to posterior mass."""
    scorer = scorer or Scorer(data, graph, config, cfg)
    pool = initial_pool(data, graph, cfg, extra)
    stats = [scorer.stats(p) for p in pool]
    lp = np.array([scorer.log_post(s) for s in stats])
    prob = np.exp(lp - lp.max())
    prob /= prob.sum()
    rng = np.random.default_rng(cfg.seed)
    idx = rng.choice(len(pool), size=cfg.n_particles, replace=True, p=prob)
    return make_particle_set([pool[i] for i in idx], scorer, cfg.lam)


@dataclass
class SearchResult:
    particles: ParticleSet
    trace: list
    sweeps: int
    converged: bool
    scorer: Scorer = field(repr=False)


def _trace_row(sweep_idx: int, ps: ParticleSet) -> dict:
    return {
        "sweep": sweep_idx,
        "objective": ps.objective(),
        "log_posts": [float(a) for a in ps.log_posts],
        "weights": [float(w) for w in ps.weights],
        "k_alpha": [p.alpha.k for p in ps.particles],
        "k_beta": [p.beta.k for p in ps.particles],
    }


def run(data: Dataset, graph, config: ModelConfig, cfg: SearchConfig, init=None,
        extra_init=(), cache: BlockCache | None = None, on_sweep=None) -> SearchResult:
    """Coordinate ascent until a sweep changes nothing or ``max_sweeps`` is reached.

    ``init`` fixes the starting particles (length L); otherwise they are drawn
    by :func:`initialize` from the k-means pool plus ``extra_init``.
    """
    scorer = Scorer(data, graph, config, cfg, cache)
    if init is not None:
        init = list(init)
        if len(init) != cfg.n_particles:
            raise InputError(f"expected {cfg.n_particles} initial particles, got {len(init)}")
        ps = make_particle_set(init, scorer, cfg.lam)
    else:
        ps = initialize(data, graph, config, cfg, scorer, extra_init)
    trace = [_trace_row(0, ps)]
    converged = False
    n = 0
    while n < cfg.max_sweeps:
        ps, improved = sweep(ps, scorer)
        n += 1
        trace.append(_trace_row(n, ps))
        if on_sweep is not None:
            on_sweep(trace[-1])
        if not improved:
            converged = True
            break
    return SearchResult(ps.sorted_by_weight(), trace, n, converged, scorer)


def write_trace(path, trace) -> None:
    with open(path, "w") as fh:
        for row in trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
