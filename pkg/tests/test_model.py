import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from carpart.errors import CacheConsistencyError, InputError
from carpart.graph import AdjacencyGraph, induced_laplacian
from carpart.model import (BlockCache, Dataset, ModelConfig, car_precision_block,
                           grand_mean_posterior, log_marginal_likelihood, particle_stats,
                           posterior_means, update_cache_for_move)
from carpart.partition import (Particle, SpatialPartition, border_move, enumerate_splits,
                               island_move, merge_move)

from oracles import (dense_car_covariance, dense_log_marginal, dense_posterior_means,
                     random_instance)


def test_precision_block_two_node_path():
    g = AdjacencyGraph.path(2)
    p = car_precision_block(induced_laplacian(g, [0, 1]), 0.5, 1.0, 1.0)
    np.testing.assert_allclose(p, [[0.875, -0.625], [-0.625, 0.875]], atol=1e-14)
    dense = np.linalg.inv(dense_car_covariance(g.adjacency, [0, 1], 0.5, 1.0, 1.0))
    np.testing.assert_allclose(p, dense, atol=1e-12)


def test_precision_block_singleton_variance():
    lap = np.zeros((1, 1))
    # without the grand-mean term the CAR variance is 1/(1-rho)
    prec = car_precision_block(lap, 0.9, 1.0, 1e-300)
    assert prec[0, 0] == pytest.approx(0.1)
    prec = car_precision_block(lap, 0.9, 1.0, 1.0)
    assert 1 / prec[0, 0] == pytest.approx(10 + 1)


def test_precision_block_independence_limit():
    g = AdjacencyGraph.grid(2)
    lap = induced_laplacian(g, range(4))
    # a vanishing grand-mean variance pins the mean at zero, leaving independent units
    np.testing.assert_allclose(car_precision_block(lap, 0.0, 2.0, 1e-12), np.eye(4) / 2, atol=1e-9)
    # a diffuse grand mean removes the precision along the constant direction
    flat = car_precision_block(lap, 0.0, 2.0, 1e12)
    np.testing.assert_allclose(flat, (np.eye(4) - 0.25) / 2, atol=1e-9)


def test_grand_mean_posterior_examples():
    assert grand_mean_posterior([2.0], 0.9, 1.0, 1.0) == pytest.approx(0.2 / 1.1)
    vals = [1.0, 2.0, 6.0]
    assert grand_mean_posterior(vals, 0.9, 1.0, 1e12) == pytest.approx(3.0)
    shrunk = grand_mean_posterior([4.0] * 3, 0.5, 1.0, 1.0)
    assert 0 < shrunk < 4.0
    assert shrunk == pytest.approx(4 * 3 * 0.5 / (1 + 3 * 0.5))


def test_dataset_invariants():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 3)), [0.0, 1.0, 2.0])
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 1)), [0.0])
    d = Dataset.from_periods(np.zeros((2, 12)), list(range(2000, 2012)))
    assert d.sxx == pytest.approx(11.0)
    assert d.time_scale == pytest.approx(3.6055512754639896)


def test_config_validation():
    with pytest.raises(InputError):
        ModelConfig(rho=1.0)
    with pytest.raises(InputError):
        ModelConfig(a1=0.0)
    with pytest.raises(InputError):
        ModelConfig(prior="dirichlet")


def test_single_unit_two_periods_scalar_integral():
    g = AdjacencyGraph(1, [])
    p = SpatialPartition.one_cluster(g)
    cfg = ModelConfig(rho=0.6, a1=0.7, a2=1.3, b1=0.4, b2=2.0, nu_sigma=5.0, lambda_sigma=0.8)
    y = np.array([[0.3, 1.1]])
    data = Dataset.from_periods(y, [0, 1])
    x = data.x
    va = cfg.a1 / (1 - cfg.rho) + cfg.a2
    vb = cfg.b1 / (1 - cfg.rho) + cfg.b2
    cov = np.eye(2) + va * np.ones((2, 2)) + vb * np.outer(x, x)

    def integrand(s2):
        return (stats.multivariate_normal(np.zeros(2), s2 * cov).pdf(y[0])
                * stats.invgamma(cfg.nu_sigma / 2, scale=cfg.nu_sigma * cfg.lambda_sigma / 2).pdf(s2))

    val, _ = integrate.quad(integrand, 0, np.inf, epsabs=0, epsrel=1e-12, limit=200)
    got = log_marginal_likelihood(data, Particle(p, p), cfg)
    assert got == pytest.approx(math.log(val), rel=1e-9)


def test_matches_dense_oracle_random():
    rng = np.random.default_rng(3)
    for _ in range(40):
        data, g, part, cfg = random_instance(rng)
        got = log_marginal_likelihood(data, part, cfg)
        want = dense_log_marginal(data.y, data.x, g.adjacency, part, cfg)
        assert abs(got - want) <= 1e-8 * abs(want)
        fit = posterior_means(data, part, cfg)
        ea, eb = dense_posterior_means(data.y, data.x, g.adjacency, part, cfg)
        np.testing.assert_allclose(fit.post_mean_alpha, ea, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(fit.post_mean_beta, eb, rtol=1e-8, atol=1e-10)


def test_relabeling_and_unit_permutation_invariance():
    rng = np.random.default_rng(5)
    data, g, part, cfg = random_instance(rng, n_range=(8, 10))
    base = log_marginal_likelihood(data, part, cfg)
    perm = rng.permutation(g.n_units)
    inv = np.argsort(perm)
    g2 = AdjacencyGraph(g.n_units, [(inv[i], inv[j]) for i, j in g.edges])
    relabel = lambda p: SpatialPartition.from_labels(g2, [p.labels[perm[u]] for u in range(g.n_units)])
    data2 = Dataset(data.y[perm], data.x)
    part2 = Particle(relabel(part.alpha), relabel(part.beta))
    assert log_marginal_likelihood(data2, part2, cfg) == pytest.approx(base, abs=1e-10)
    # the same set partition always yields the same canonical clusters, so the value is identical
    again = Particle(SpatialPartition(g, reversed(part.alpha.clusters)), part.beta)
    assert log_marginal_likelihood(data, again, cfg) == base


def test_posterior_means_vanishing_prior_precision():
    rng = np.random.default_rng(8)
    data, g, part, _ = random_instance(rng)
    cfg = ModelConfig(rho=0.5, a1=1e9, a2=1e9, b1=1e9, b2=1e9)
    fit = posterior_means(data, part, cfg)
    np.testing.assert_allclose(fit.post_mean_alpha, data.y.mean(axis=1), atol=1e-6)
    np.testing.assert_allclose(fit.post_mean_beta, data.y @ data.x / data.sxx, atol=1e-6)


def test_zero_data_gives_zero_means():
    g = AdjacencyGraph.grid(3)
    p = SpatialPartition.from_labels(g, [0, 0, 1, 0, 0, 1, 2, 2, 1])
    fit = posterior_means(Dataset.from_periods(np.zeros((9, 4)), range(4)), Particle(p, p), ModelConfig())
    assert not fit.post_mean_alpha.any() and not fit.post_mean_beta.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_posterior_means_linear_in_y(seed):
    rng = np.random.default_rng(seed)
    data, g, part, cfg = random_instance(rng, n_range=(2, 8))
    y2 = rng.normal(size=data.y.shape)
    d2 = Dataset(y2, data.x)
    d12 = Dataset(data.y + y2, data.x)
    f1, f2, f12 = (posterior_means(d, part, cfg) for d in (data, d2, d12))
    np.testing.assert_allclose(f12.post_mean_alpha, f1.post_mean_alpha + f2.post_mean_alpha, atol=1e-9)
    np.testing.assert_allclose(f12.post_mean_beta, f1.post_mean_beta + f2.post_mean_beta, atol=1e-9)


@pytest.mark.parametrize("t, tol", [(10, 0.05), (100, 0.005)])
def test_noiseless_one_cluster_converges(t, tol):
    g = AdjacencyGraph.grid(3)
    p = SpatialPartition.one_cluster(g)
    data = Dataset.from_periods(np.zeros((9, t)), range(t))
    y = 2.0 + 0.7 * np.tile(data.x, (9, 1))
    data = Dataset(y, data.x)
    fit = posterior_means(data, Particle(p, p), ModelConfig(a1=1, a2=10, b1=1, b2=10))
    assert np.max(np.abs(fit.post_mean_alpha - 2.0)) < tol
    assert np.max(np.abs(fit.post_mean_beta - 0.7)) < tol


def test_large_nt_is_finite():
    rng = np.random.default_rng(0)
    g = AdjacencyGraph.grid(10)
    p = SpatialPartition.one_cluster(g)
    data = Dataset.from_periods(rng.normal(size=(100, 1000)), range(1000))
    assert math.isfinite(log_marginal_likelihood(data, Particle(p, p), ModelConfig()))


def test_incremental_update_matches_scratch():
    rng = np.random.default_rng(11)
    data, g, part, cfg = random_instance(rng, n_range=(10, 12))
    cache = BlockCache(data, g, cfg)
    st0 = particle_stats(cache, part)
    moves = []
    for u in range(g.n_units):
        if len(part.alpha.clusters[part.alpha.labels[u]]) > 1:
            moves.append(island_move(part.alpha, u, "alpha"))
        for d in {part.beta.labels[v] for v in g.neighbors(u)} - {part.beta.labels[u]}:
            moves.append(border_move(part.beta, u, d, "beta"))
    assert moves
    for mv in moves:
        new, delta = update_cache_for_move(cache, st0, mv)
        scratch = log_marginal_likelihood(data, new.particle, cfg)
        assert abs(new.log_marginal - scratch) <= 1e-9
        assert abs(delta - (scratch - st0.log_marginal)) <= 1e-9


def test_merge_then_split_round_trip_in_cache():
    g = AdjacencyGraph.path(4)
    p = SpatialPartition.from_labels(g, [0, 0, 1, 1])
    rng = np.random.default_rng(2)
    data = Dataset.from_periods(rng.normal(size=(4, 5)), range(5))
    cache = BlockCache(data, g, ModelConfig())
    s0 = particle_stats(cache, Particle(p, p))
    s1, d1 = update_cache_for_move(cache, s0, merge_move(p, 0, 1, "alpha"))
    split = enumerate_splits(s1.particle.alpha, 0, [0, 0, 9, 9], target="alpha")[0]
    s2, d2 = update_cache_for_move(cache, s1, split)
    assert s2.particle == s0.particle
    assert abs(s2.log_marginal - s0.log_marginal) <= 1e-9
    assert abs(d1 + d2) <= 1e-9


def test_stale_cache_rejected():
    g = AdjacencyGraph.path(3)
    p = SpatialPartition.one_cluster(g)
    data = Dataset.from_periods(np.ones((3, 3)), range(3))
    c1, c2 = BlockCache(data, g, ModelConfig()), BlockCache(data, g, ModelConfig(rho=0.5))
    s = particle_stats(c1, Particle(p, p))
    with pytest.raises(CacheConsistencyError):
        update_cache_for_move(c2, s, island_move(p, 0))
    other = SpatialPartition.from_labels(g, [0, 1, 1])
    with pytest.raises(CacheConsistencyError):
        update_cache_for_move(c1, s, island_move(other, 1))
