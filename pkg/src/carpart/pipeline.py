"""End-to-end fitting: heuristic scales, MAP search, empirical Bayes, full particle run."""

from __future__ import annotations

from dataclasses import dataclass

from .inference import BMAEstimate, bma_estimate
from .model import Dataset, ModelConfig
from .priors import EmpiricalBayesResult, HyperHeuristicReport, empirical_bayes_scales, \
    heuristic_hyperparameters
from .search import SearchConfig, SearchResult, run

SCALE_NAMES = ("a1", "a2", "b1", "b2", "nu_sigma", "lambda_sigma")


@dataclass
class FitResult:
    config: ModelConfig
    report: HyperHeuristicReport
    map_result: SearchResult | None
    eb: EmpiricalBayesResult | None
    result: SearchResult
    bma: BMAEstimate


def fit(data: Dataset, graph, base: ModelConfig, cfg: SearchConfig, skip_eb: bool = False,
        overrides: dict | None = None, k: int | None = None, log=None) -> FitResult:
    """Run the whole procedure.

    ``overrides`` pins any of a1, a2, b1, b2, nu_sigma, lambda_sigma; the rest
    come from the heuristics. Unless ``skip_eb``, a single-particle search
    finds a MAP particle, (a1, b1) are re-estimated there by empirical Bayes
    (skipped for pinned scales) and the MAP particle joins the initial pool.
    """
    overrides = {k_: v for k_, v in (overrides or {}).items() if v is not None}
    report = heuristic_hyperparameters(data, rho=base.rho, k=k)
    temp = report.config(base, use_eb=False).replace(**overrides)
    map_result = eb = None
    extra = ()
    config = temp
    if not skip_eb:
        map_result = run(data, graph, temp, cfg.replace(n_particles=1))
        map_particle = map_result.particles.particles[0]
        extra = (map_particle,)
        if log:
            log(f"MAP search: {map_result.sweeps} sweeps, log posterior "
                f"{map_result.particles.log_posts[0]:.4f}")
        eb = empirical_bayes_scales(data, map_particle, temp)
        report.eb_a1, report.eb_b1 = eb.a1, eb.b1
        report.eb_start_objective, report.eb_objective = eb.start_objective, eb.objective
        report.eb_evaluations = eb.evaluations
        config = temp.replace(a1=overrides.get("a1", eb.a1), b1=overrides.get("b1", eb.b1))
        if log:
            log(f"empirical Bayes: a1={config.a1:.6g} b1={config.b1:.6g}")
    result = run(data, graph, config, cfg, extra_init=extra)
    if log:
        log(f"particle search: {result.sweeps} sweeps, objective "
            f"{result.particles.objective():.4f}")
    ps = result.particles
    bma = bma_estimate(ps.particles, ps.log_posts, data, config, result.scorer.cache)
    return FitResult(config, report, map_result, eb, result, bma)
