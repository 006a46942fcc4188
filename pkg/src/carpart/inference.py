"""Per-unit least squares, model-averaged estimates, forecasts and evaluation metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .model import BlockCache, Dataset, ModelConfig, particle_stats
from .partition import Particle, SpatialPartition, kmeans_1d


@dataclass(frozen=True)
class UnitMLE:
    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    sigma2_hat: np.ndarray


def unit_mles(data: Dataset) -> UnitMLE:
    """Separate OLS fit per unit; residual variance uses divisor T - 2."""
    t = data.n_periods
    if t < 3:
        raise InputError(f"need at least 3 periods for residual variances, got {t}")
    alpha = data.sum_y / t
    beta = data.sum_xy / data.sxx
    resid = data.y - alpha[:, None] - beta[:, None] * data.x[None, :]
    sigma2 = np.sum(resid * resid, axis=1) / (t - 2)
    return UnitMLE(alpha, beta, sigma2)


def truncation_weights(log_posts, keys=None, temperature: float = 1.0) -> np.ndarray:
    """Per-position weights of the truncated (optionally tempered) posterior.

    Mass is assigned to each distinct particle proportionally to
    ``exp(log_post / temperature)`` and split equally between its copies, so
    duplicated particles do not gain weight.
    """
    lp = np.asarray(log_posts, dtype=float)
    if lp.ndim != 1 or lp.size == 0:
        raise InputError("need at least one log posterior")
    if keys is None:
        keys = list(range(lp.size))
    first: dict = {}
    for i, k in enumerate(keys):
        first.setdefault(k, i)
    uniq = list(first.values())
    counts = Counter(keys)
    u = lp[uniq] / temperature
    mass = np.exp(u - u.max())
    mass /= mass.sum()
    share = dict(zip((keys[i] for i in uniq), mass))
    return np.array([share[k] / counts[k] for k in keys])


@dataclass(frozen=True)
class BMAEstimate:
    """Model-averaged intercepts and trends, with the per-particle pieces kept for audit."""

    alpha: np.ndarray
    beta: np.ndarray
    particle_alpha: np.ndarray
    particle_beta: np.ndarray
    weights: np.ndarray


def bma_estimate(particles, log_posts, data: Dataset, config: ModelConfig,
                 cache: BlockCache | None = None) -> BMAEstimate:
    """Average conditional posterior means with truncated-posterior weights (lambda = 1)."""
    particles = list(particles)
    if cache is None:
        cache = BlockCache(data, particles[0].alpha.graph, config)
    w = truncation_weights(log_posts, [p.key() for p in particles])
    pa = np.empty((len(particles), data.n_units))
    pb = np.empty_like(pa)
    for i, part in enumerate(particles):
        st = particle_stats(cache, part)
        pa[i] = st.unit_means("alpha")
        pb[i] = st.unit_means("beta")
    return BMAEstimate(w @ pa, w @ pb, pa, pb, w)


def predict(est, x_star: float) -> np.ndarray:
    """Per-unit forecast ``alpha + beta * x_star`` (``x_star`` on the standardized scale)."""
    alpha, beta = (est.alpha, est.beta) if hasattr(est, "alpha") else est
    return np.asarray(alpha) + np.asarray(beta) * float(x_star)


def rmse(est, truth) -> float:
    """Root mean square error over the concatenated (alpha, beta) vector.

    Both arguments are ``(alpha, beta)`` pairs or objects with those attributes.
    """
    def flat(v):
        if hasattr(v, "alpha"):
            v = (v.alpha, v.beta)
        return np.concatenate([np.ravel(v[0]), np.ravel(v[1])])

    a, b = flat(est), flat(truth)
    if a.shape != b.shape:
        raise InputError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _labels(p):
    return p.labels if isinstance(p, SpatialPartition) else tuple(p)


def adjusted_rand(p1, p2) -> float:
    """Hubert-Arabie adjusted Rand index from the contingency table.

    When the chance-corrected denominator vanishes the index is 1 for
    identical groupings and 0 otherwise.
    """
    a, b = _labels(p1), _labels(p2)
    if len(a) != len(b):
        raise InputError("partitions cover different numbers of units")
    n = len(a)
    pairs = n * (n - 1) // 2
    both = sum(c * (c - 1) // 2 for c in Counter(zip(a, b)).values())
    rows = sum(c * (c - 1) // 2 for c in Counter(a).values())
    cols = sum(c * (c - 1) // 2 for c in Counter(b).values())
    # scale by the pair count so everything stays in exact integers until the division
    num = both * pairs - rows * cols
    den = (rows + cols) * pairs - 2 * rows * cols
    if den == 0:
        same = len(set(zip(a, b))) == len(set(a)) == len(set(b))
        return 1.0 if same else 0.0
    return 2 * num / den


def weighted_ari(particles, log_posts, truth_alpha, truth_beta) -> tuple[float, float]:
    """Posterior-weighted mean ARI of the particle set against the true partitions."""
    particles = list(particles)
    w = truncation_weights(log_posts, [p.key() for p in particles])
    ari_a = sum(wi * adjusted_rand(p.alpha, truth_alpha) for wi, p in zip(w, particles))
    ari_b = sum(wi * adjusted_rand(p.beta, truth_beta) for wi, p in zip(w, particles))
    return float(ari_a), float(ari_b)


def kmeans_partition(graph, values, k: int) -> SpatialPartition | None:
    """1-D k-means grouping of ``values`` refined into spatially connected clusters."""
    groups = kmeans_1d(values, k)
    if groups is None:
        return None
    return SpatialPartition.from_components(graph, groups.tolist())


def _best_by_silhouette(graph, values, ks) -> SpatialPartition:
    from sklearn.metrics import silhouette_score

    values = np.asarray(values, dtype=float)
    best, best_score = None, -math.inf
    for k in ks:
        groups = kmeans_1d(values, k)
        if groups is None or len(set(groups.tolist())) < 2:
            continue
        score = silhouette_score(values.reshape(-1, 1), groups)
        if score > best_score:
            best, best_score = groups, score
    if best is None:
        return SpatialPartition.one_cluster(graph)
    return SpatialPartition.from_components(graph, best.tolist())


@dataclass(frozen=True)
class BaselineFit:
    particle: Particle
    alpha: np.ndarray
    beta: np.ndarray


def kmeans_baseline(data: Dataset, graph, config: ModelConfig, ks=range(2, 6),
                    cache: BlockCache | None = None) -> BaselineFit:
    """k-means on the unit MLEs (K picked by silhouette), then conditional posterior means."""
    mle = unit_mles(data)
    part = Particle(_best_by_silhouette(graph, mle.alpha_hat, ks),
                    _best_by_silhouette(graph, mle.beta_hat, ks))
    if cache is None:
        cache = BlockCache(data, graph, config)
    st = particle_stats(cache, part)
    return BaselineFit(part, st.unit_means("alpha"), st.unit_means("beta"))
