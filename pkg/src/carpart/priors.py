"""Partition priors and the data-driven choice of model hyperparameters."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .errors import DegenerateInputError, InputError
from .inference import unit_mles
from .model import BlockCache, Dataset, ModelConfig, particle_stats
from .partition import Particle, SpatialPartition

SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class PartitionPrior:
    kind: str = "ewens_pitman"
    eta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ewens_pitman", "uniform"):
            raise InputError(f"unknown partition prior {self.kind!r}")
        if not self.eta > 0:
            raise InputError("eta must be positive")

    @classmethod
    def from_config(cls, config: ModelConfig) -> "PartitionPrior":
        return cls("uniform" if config.prior == "uniform" else "ewens_pitman", config.eta)


def log_prior(p: SpatialPartition, prior: PartitionPrior) -> float:
    """Unnormalized log mass ``K log eta + sum log (n_k - 1)!`` (0 for the uniform prior)."""
    if prior.kind == "uniform":
        return 0.0
    return p.k * math.log(prior.eta) + math.fsum(math.lgamma(n) for n in p.sizes)


def particle_log_prior(particle: Particle, prior: PartitionPrior,
                       equal_partitions: bool = False) -> float:
    """Independent priors on both partitions, or a single one when they are tied."""
    if equal_partitions:
        return log_prior(particle.alpha, prior)
    return log_prior(particle.alpha, prior) + log_prior(particle.beta, prior)


def sigma_prior_from_unit_fits(sigma2_hats) -> tuple[float, float]:
    """Match the inverse-gamma mean and variance to the unit residual variances.

    The spread ``v`` is the sample variance (divisor n - 1).
    """
    s = np.asarray(sigma2_hats, dtype=float)
    if s.size < 2:
        raise DegenerateInputError("need residual variances from at least two units")
    m = float(s.mean())
    v = float(s.var(ddof=1))
    if not v > 0:
        raise DegenerateInputError("residual variances have no spread; pass nu_sigma explicitly "
                                   "(e.g. 3) instead of using the moment heuristic")
    nu = 2.0 * m * m / v + 4.0
    return nu, m * (1.0 - 2.0 / nu)


def _side_scales(mle, sigma2, rho, k):
    mle = np.asarray(mle, dtype=float)
    spread = float(mle.max() - mle.min())
    if not spread > 0:
        raise DegenerateInputError("unit estimates are constant")
    within = spread ** 2 / (4.0 * (k + 1) ** 2 * sigma2 / (1.0 - rho))
    between = float(np.max(np.abs(mle))) ** 2 / (4.0 * sigma2) - within / (1.0 - rho)
    return within, between


def variance_scales_heuristic(mle_alpha, mle_beta, sigma2_hat: float, rho: float,
                              k: int) -> tuple[float, float, float, float]:
    """Raw (unfloored) ``(a1, a2, b1, b2)`` from the spread and size of the unit estimates."""
    if not sigma2_hat > 0:
        raise DegenerateInputError("sigma2_hat must be positive")
    a1, a2 = _side_scales(mle_alpha, sigma2_hat, rho, k)
    b1, b2 = _side_scales(mle_beta, sigma2_hat, rho, k)
    return a1, a2, b1, b2


@dataclass
class HyperHeuristicReport:
    sigma2_hat: list
    m: float
    v: float
    nu_sigma: float
    lambda_sigma: float
    k: int
    rho: float
    a1: float
    a2: float
    b1: float
    b2: float
    floored: list = field(default_factory=list)
    eb_a1: float | None = None
    eb_b1: float | None = None
    eb_start_objective: float | None = None
    eb_objective: float | None = None
    eb_evaluations: int | None = None

    def config(self, base: ModelConfig, use_eb: bool = True) -> ModelConfig:
        a1 = self.eb_a1 if use_eb and self.eb_a1 is not None else self.a1
        b1 = self.eb_b1 if use_eb and self.eb_b1 is not None else self.b1
        return base.replace(a1=a1, a2=self.a2, b1=b1, b2=self.b2,
                            nu_sigma=self.nu_sigma, lambda_sigma=self.lambda_sigma)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HyperHeuristicReport":
        return cls(**json.loads(text))


def heuristic_hyperparameters(data: Dataset, rho: float = 0.9,
                              k: int | None = None) -> HyperHeuristicReport:
    """Temporary hyperparameters from per-unit fits; ``k`` defaults to floor(ln N)."""
    mle = unit_mles(data)
    nu, lam = sigma_prior_from_unit_fits(mle.sigma2_hat)
    s = mle.sigma2_hat
    m = float(s.mean())
    if k is None:
        k = max(1, int(math.floor(math.log(data.n_units))))
    a1, a2, b1, b2 = variance_scales_heuristic(mle.alpha_hat, mle.beta_hat, m, rho, k)
    floored = []
    if a2 < SCALE_FLOOR:
        a2 = SCALE_FLOOR
        floored.append("a2")
    if b2 < SCALE_FLOOR:
        b2 = SCALE_FLOOR
        floored.append("b2")
    return HyperHeuristicReport(s.tolist(), m, float(s.var(ddof=1)), nu, lam, k, rho,
                                a1, a2, b1, b2, floored)


@dataclass(frozen=True)
class EmpiricalBayesResult:
    a1: float
    b1: float
    objective: float
    start_objective: float
    evaluations: int


def empirical_bayes_scales(data: Dataset, particle: Particle, config: ModelConfig,
                           bounds=(1e-6, 1e3), max_evals: int = 200) -> EmpiricalBayesResult:
    """Maximize the marginal likelihood over ``(a1, b1)`` at a fixed particle.

    Nelder-Mead in log coordinates, box-constrained, started from the
    scales in ``config``. The start point is returned if nothing beats it.
    """
    graph = particle.alpha.graph
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    evals = 0

    def value(z):
        nonlocal evals
        evals += 1
        z = np.clip(z, lo, hi)
        cfg = config.replace(a1=math.exp(z[0]), b1=math.exp(z[1]))
        return particle_stats(BlockCache(data, graph, cfg), particle).log_marginal

    z0 = np.clip([math.log(config.a1), math.log(config.b1)], lo, hi)
    f0 = value(z0)
    if not math.isfinite(f0):
        raise InputError("log marginal likelihood is not finite at the starting scales")
    res = optimize.minimize(lambda z: -value(z), z0, method="Nelder-Mead",
                            bounds=[(lo, hi), (lo, hi)],
                            options={"maxfev": max_evals - 1, "xatol": 1e-5, "fatol": 1e-10,
                                     "initial_simplex": [z0, z0 + [0.5, 0], z0 + [0, 0.5]]})
    z, f = np.clip(res.x, lo, hi), -float(res.fun)
    if not f > f0:
        z, f = z0, f0
    return EmpiricalBayesResult(math.exp(z[0]), math.exp(z[1]), f, f0, evals)
