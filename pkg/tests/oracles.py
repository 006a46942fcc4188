"""Dense, deliberately naive reference implementations used as test oracles."""

import itertools

import numpy as np
from scipy import stats


def dense_car_covariance(adj, members, rho, s1, s2):
    """Marginal prior covariance of one cluster: s1 * inv(rho L + (1-rho) I) + s2 * 11'."""
    idx = list(members)
    a = adj[np.ix_(idx, idx)].astype(float)
    lap = np.diag(a.sum(axis=1)) - a
    omega = rho * lap + (1 - rho) * np.eye(len(idx))
    return s1 * np.linalg.inv(omega) + s2 * np.ones((len(idx), len(idx)))


def dense_prior_cov(adj, particle, cfg):
    n = adj.shape[0]
    cov = np.zeros((2 * n, 2 * n))
    for off, part, (s1, s2) in ((0, particle.alpha, (cfg.a1, cfg.a2)),
                                (n, particle.beta, (cfg.b1, cfg.b2))):
        for c in part.clusters:
            idx = sorted(c)
            blk = dense_car_covariance(adj, idx, cfg.rho, s1, s2)
            gi = [off + i for i in idx]
            cov[np.ix_(gi, gi)] = blk
    return cov


def design(n, x):
    t = len(x)
    ones = np.kron(np.eye(n), np.ones((t, 1)))
    trend = np.kron(np.eye(n), np.asarray(x).reshape(-1, 1))
    return np.hstack([ones, trend])


def dense_log_marginal(y, x, adj, particle, cfg):
    """Multivariate-t density of vec(y) with shape lambda * (I + X Sigma X')."""
    n, t = y.shape
    xmat = design(n, x)
    sigma_y = np.eye(n * t) + xmat @ dense_prior_cov(adj, particle, cfg) @ xmat.T
    dist = stats.multivariate_t(loc=np.zeros(n * t), shape=cfg.lambda_sigma * sigma_y,
                                df=cfg.nu_sigma)
    return float(dist.logpdf(y.ravel()))


def dense_posterior_means(y, x, adj, particle, cfg):
    n = y.shape[0]
    xmat = design(n, x)
    prec = np.linalg.inv(dense_prior_cov(adj, particle, cfg))
    theta = np.linalg.solve(xmat.T @ xmat + prec, xmat.T @ y.ravel())
    return theta[:n], theta[n:]


def all_set_partitions(n):
    """Every set partition of range(n) as a label list (restricted growth strings)."""
    def rec(prefix, top):
        if len(prefix) == n:
            yield list(prefix)
            return
        for lab in range(top + 2):
            yield from rec(prefix + [lab], max(top, lab))
    if n == 0:
        return
    yield from rec([0], 0)


def pair_count_ari(a, b):
    """Adjusted Rand index from brute-force counts over all unit pairs."""
    n = len(a)
    same_a = same_b = both = 0
    for i, j in itertools.combinations(range(n), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        same_a += sa
        same_b += sb
        both += sa and sb
    total = n * (n - 1) / 2
    expected = same_a * same_b / total if total else 0.0
    top = 0.5 * (same_a + same_b)
    if top == expected:
        return 1.0 if list(a) == list(b) or _same_partition(a, b) else 0.0
    return (both - expected) / (top - expected)


def _same_partition(a, b):
    m1, m2 = {}, {}
    for u, v in zip(a, b):
        if m1.setdefault(u, v) != v or m2.setdefault(v, u) != u:
            return False
    return True


def random_graph(rng, n):
    """A random connected graph: a grid or path backbone plus a few chords."""
    from carpart.graph import AdjacencyGraph
    rows = next(r for r in (3, 2, 1) if n % r == 0 and n // r >= r) if n > 1 else 1
    base = AdjacencyGraph.grid(rows, n // rows)
    edges = set(base.edges)
    for _ in range(rng.integers(0, 3)):
        i, j = rng.choice(n, 2, replace=False) if n > 1 else (0, 0)
        if i != j:
            edges.add((int(min(i, j)), int(max(i, j))))
    return AdjacencyGraph(n, edges)


def random_instance(rng, n_range=(2, 12), t_range=(3, 8)):
    from carpart.model import Dataset, ModelConfig
    from carpart.partition import Particle, SpatialPartition
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    t = int(rng.integers(t_range[0], t_range[1] + 1))
    g = random_graph(rng, n)
    k = int(rng.integers(1, n + 1))
    pa = SpatialPartition.from_components(g, rng.integers(0, k, n).tolist())
    pb = SpatialPartition.from_components(g, rng.integers(0, k, n).tolist())
    cfg = ModelConfig(rho=float(rng.uniform(0, 0.99)),
                      a1=float(np.exp(rng.uniform(-3, 3))), a2=float(np.exp(rng.uniform(-3, 3))),
                      b1=float(np.exp(rng.uniform(-3, 3))), b2=float(np.exp(rng.uniform(-3, 3))),
                      nu_sigma=float(rng.uniform(1, 10)),
                      lambda_sigma=float(np.exp(rng.uniform(-2, 1))))
    y = rng.normal(rng.normal(0, 2), 1.0, size=(n, t))
    data = Dataset.from_periods(y, list(range(t)))
    return data, g, Particle(pa, pb), cfg


def draw_from_model(rng, graph, particle, cfg, t, sigma2):
    """Sample y from the CAR-within-clusters model with fixed sigma^2."""
    n = graph.n_units
    x = np.arange(t) - (t - 1) / 2
    x = x / x.std(ddof=1)
    cov = dense_prior_cov(graph.adjacency, particle, cfg) * sigma2
    theta = rng.multivariate_normal(np.zeros(2 * n), cov)
    mu = theta[:n, None] + theta[n:, None] * x[None, :]
    return mu + rng.normal(0, np.sqrt(sigma2), size=mu.shape)


def path_partitions(n):
    """All 2^(n-1) spatial partitions of the 1 x n path graph."""
    import itertools
    from carpart.graph import AdjacencyGraph
    from carpart.partition import SpatialPartition
    g = AdjacencyGraph.path(n)
    out = []
    for cuts in itertools.product([0, 1], repeat=n - 1):
        lab = [0]
        for c in cuts:
            lab.append(lab[-1] + c)
        out.append(SpatialPartition.from_labels(g, lab))
    return g, out


def path4_toy(seed=0, t=6):
    """Small two-cluster data on the 1 x 4 path plus every particle on it."""
    from carpart.model import Dataset, ModelConfig
    from carpart.partition import Particle
    g, parts = path_partitions(4)
    rng = np.random.default_rng(seed)
    y = (np.array([[0, 0.2, 2, 2.1]]).T + np.array([[1, 1, -1, -1]]).T * np.linspace(-1, 1, t)
         + rng.normal(0, 0.5, (4, t)))
    data = Dataset.from_periods(y, range(t))
    config = ModelConfig(a1=0.5, a2=2, b1=0.5, b2=2, nu_sigma=4, lambda_sigma=0.3)
    return data, g, config, [Particle(a, b) for a in parts for b in parts]


def brute_force_best_support(log_posts, n_particles, lam, iters=200):
    """Maximize the penalized objective over every support of at most L particles.

    A multiset of L particles only matters through its distinct members, so
    supports of size 1..L cover every particle set. For each support the
    simplex optimum is found by damped exponentiated-gradient ascent in log
    space rather than by a closed form. Returns (value, support, weights).
    """
    import itertools
    from scipy.special import logsumexp
    lp = np.asarray(log_posts, dtype=float)
    best = (-np.inf, None, None)
    for m in range(1, n_particles + 1):
        sup = np.array(list(itertools.combinations(range(lp.size), m)))
        a = lp[sup]
        lq = np.full(a.shape, -np.log(m))
        for _ in range(iters):
            lq = 0.5 * lq + 0.5 * a / lam
            lq -= logsumexp(lq, axis=1, keepdims=True)
        q = np.exp(lq)
        val = np.sum(q * a, axis=1) - lam * np.sum(q * lq, axis=1)
        j = int(np.argmax(val))
        if val[j] > best[0]:
            best = (float(val[j]), tuple(sup[j]), q[j])
    return best
