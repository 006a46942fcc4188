"""Command-line entry point: simulate, fit, evaluate and hyper."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import data as dataio
from .errors import InputError, NumericalError
from .graph import AdjacencyGraph
from .inference import (BMAEstimate, adjusted_rand, predict, rmse, truncation_weights,
                        weighted_ari)
from .model import Dataset, ModelConfig
from .partition import read_particle_csv, write_particle_csv
from .pipeline import SCALE_NAMES, fit
from .priors import heuristic_hyperparameters
from .search import SearchConfig, write_trace

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything that determines a fit; written next to the outputs as run_config.json."""

    data: str | None = None
    counts: str | None = None
    areas: str | None = None
    edges: str | None = None
    out: str = "fit_out"
    n_particles: int = 10
    lam: float = 100.0
    rho: float = 0.9
    eta: float = 1.0
    prior: str = "ep"
    equal_partitions: bool = False
    seed: int = 0
    skip_eb: bool = False
    max_sweeps: int = 500
    holdout_last: bool = False
    k_heuristic: int | None = None
    a1: float | None = None
    a2: float | None = None
    b1: float | None = None
    b2: float | None = None
    nu_sigma: float | None = None
    lambda_sigma: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**raw)

    def model_config(self) -> ModelConfig:
        return ModelConfig(rho=self.rho, eta=self.eta, prior=self.prior)

    def search_config(self) -> SearchConfig:
        return SearchConfig(n_particles=self.n_particles, lam=self.lam,
                            max_sweeps=self.max_sweeps, seed=self.seed,
                            equal_partitions=self.equal_partitions)


def _fmt(v: float) -> str:
    return repr(float(v))


def _load_inputs(rc: RunConfig) -> tuple[Dataset, AdjacencyGraph, np.ndarray | None]:
    if rc.edges is None:
        raise UsageError("--edges is required")
    if rc.data is not None:
        data, graph = dataio.load_transformed(rc.data, rc.edges)
    elif rc.counts is not None and rc.areas is not None:
        data, graph = dataio.load_dataset(rc.counts, rc.areas, rc.edges)
    else:
        raise UsageError("pass --data, or --counts together with --areas")
    held = None
    if rc.holdout_last:
        if data.n_periods < 4:
            raise UsageError("--holdout-last needs at least 4 periods")
        held = data.y[:, -1].copy()
        data = Dataset.from_periods(data.y[:, :-1], data.periods[:-1], unit_ids=data.unit_ids)
    return data, graph, held


def _write_fit_outputs(out: Path, rc: RunConfig, data: Dataset, res) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ps = res.result.particles
    ids = data.unit_ids or [str(u) for u in range(data.n_units)]
    write_particle_csv(out / "particles.csv", ps.particles, ids)
    bma_w = truncation_weights(ps.log_posts, ps.keys())
    with open(out / "weights.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["particle", "weight", "bma_weight", "log_post", "log_marginal",
                    "k_alpha", "k_beta"])
        for i, (p, st) in enumerate(zip(ps.particles, ps.stats)):
            w.writerow([i, _fmt(ps.weights[i]), _fmt(bma_w[i]), _fmt(ps.log_posts[i]),
                        _fmt(st.log_marginal), p.alpha.k, p.beta.k])
    with open(out / "bma.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "alpha", "beta"])
        for uid, a, b in zip(ids, res.bma.alpha, res.bma.beta):
            w.writerow([uid, _fmt(a), _fmt(b)])
    write_trace(out / "trace.jsonl", res.result.trace)
    (out / "hyper.json").write_text(res.report.to_json() + "\n")
    final = {"model": res.config.to_dict(), "time_center": data.time_center,
             "time_scale": data.time_scale, "periods": data.periods,
             "sweeps": res.result.sweeps, "converged": res.result.converged,
             "objective": ps.objective()}
    (out / "fit_summary.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
    (out / "run_config.json").write_text(rc.to_json() + "\n")


def _fit_one(rc: RunConfig, quiet: bool) -> None:
    data, graph, _ = _load_inputs(rc)
    overrides = {k: getattr(rc, k) for k in SCALE_NAMES}
    log = None if quiet else (lambda msg: print(msg, file=sys.stderr))
    res = fit(data, graph, rc.model_config(), rc.search_config(), skip_eb=rc.skip_eb,
              overrides=overrides, k=rc.k_heuristic, log=log)
    _write_fit_outputs(Path(rc.out), rc, data, res)
    top = res.result.particles
    print(f"wrote {rc.out}: {len(set(top.keys()))} distinct particles, top log posterior "
          f"{top.log_posts[0]:.4f} (K_alpha={top.particles[0].alpha.k}, "
          f"K_beta={top.particles[0].beta.k})")


def _run_replicates(jobs, n_jobs):
    if n_jobs <= 1 or len(jobs) <= 1:
        for fn, args in jobs:
            fn(*args)
        return
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        for f in [pool.submit(fn, *args) for fn, args in jobs]:
            f.result()


def cmd_fit(args) -> None:
    rc = RunConfig()
    if args.config:
        rc = RunConfig.from_json(Path(args.config).read_text())
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(rc, f.name, v)
    rc.model_config()
    rc.search_config()
    reps = args.replicates or 1
    if reps == 1:
        _fit_one(rc, args.quiet)
        return
    jobs = []
    for r in range(reps):
        sub = RunConfig(**asdict(rc))
        sub.seed = rc.seed + r
        sub.out = str(Path(rc.out) / f"rep_{r:03d}")
        jobs.append((_fit_one, (sub, args.quiet)))
    _run_replicates(jobs, args.jobs)


def _simulate_one(spec: dataio.SyntheticSpec, out: Path) -> None:
    data, graph, truth = dataio.generate(spec)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_dataset_csv(out / "data.csv", data, truth.counts)
    dataio.write_edges_by_id(out / "edges.csv", graph, data.unit_ids)
    (out / "truth.json").write_text(truth.to_json() + "\n")
    print(f"wrote {out}: {spec.side}x{spec.side} grid, T={spec.n_periods}, "
          f"delta=({spec.delta_alpha:g}, {spec.delta_beta:g}), dgp={spec.dgp}, seed={spec.seed}")


def cmd_simulate(args) -> None:
    reps = args.replicates or 1
    jobs = []
    for r in range(reps):
        spec = dataio.SyntheticSpec.for_setting(
            args.setting, side=args.grid, n_periods=args.periods, sigma2=args.sigma2,
            dgp=args.dgp, seed=args.seed + r)
        out = Path(args.out) if reps == 1 else Path(args.out) / f"rep_{r:03d}"
        jobs.append((_simulate_one, (spec, out)))
    _run_replicates(jobs, args.jobs)


def _read_bma(path: Path, unit_index: dict) -> BMAEstimate:
    n = len(unit_index)
    alpha, beta = np.empty(n), np.empty(n)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i = unit_index[row["unit"]]
            alpha[i], beta[i] = float(row["alpha"]), float(row["beta"])
    return BMAEstimate(alpha, beta, np.empty((0, n)), np.empty((0, n)), np.empty(0))


def cmd_evaluate(args) -> None:
    fit_dir = Path(args.fit)
    if args.truth is None and not args.holdout:
        raise UsageError("evaluate needs --truth (synthetic runs) or --holdout (real data)")
    rc = RunConfig.from_json((fit_dir / "run_config.json").read_text())
    summary = json.loads((fit_dir / "fit_summary.json").read_text())
    edges = args.edges or rc.edges
    full, graph, _ = _load_inputs(RunConfig(**{**asdict(rc), "holdout_last": False,
                                                "edges": edges}))
    ids = full.unit_ids
    index = {u: i for i, u in enumerate(ids)}
    bma = _read_bma(fit_dir / "bma.csv", index)
    particles = read_particle_csv(fit_dir / "particles.csv", graph, index)
    with open(fit_dir / "weights.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    log_posts = [float(r["log_post"]) for r in rows]
    metrics = {
        "k_alpha": [p.alpha.k for p in particles],
        "k_beta": [p.beta.k for p in particles],
        "log_post": log_posts,
    }
    if args.truth is not None:
        truth = dataio.SyntheticTruth.from_json(Path(args.truth).read_text(), graph)
        metrics["rmse"] = rmse(bma, (truth.alpha, truth.beta))
        x_next = (float(len(summary["periods"])) - summary["time_center"]) / summary["time_scale"]
        metrics["pred_rmse"] = float(np.sqrt(np.mean((predict(bma, x_next) - truth.y_next) ** 2)))
        wa, wb = weighted_ari(particles, log_posts, truth.partition_alpha, truth.partition_beta)
        metrics["ari_alpha"], metrics["ari_beta"] = wa, wb
        metrics["top_ari_alpha"] = adjusted_rand(particles[0].alpha, truth.partition_alpha)
        metrics["top_ari_beta"] = adjusted_rand(particles[0].beta, truth.partition_beta)
    if args.holdout:
        if not rc.holdout_last:
            raise UsageError("the fit was not run with --holdout-last")
        x_star = (float(full.periods[-1]) - summary["time_center"]) / summary["time_scale"]
        err = predict(bma, x_star) - full.y[:, -1]
        metrics["pred_rmse"] = float(np.sqrt(np.mean(err ** 2)))
    out = Path(args.out) if args.out else fit_dir / "metrics.json"
    out.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    shown = {k: v for k, v in metrics.items() if not isinstance(v, list)}
    print(json.dumps(shown, sort_keys=True))


def cmd_hyper(args) -> None:
    rc = RunConfig(data=args.data, counts=args.counts, areas=args.areas, edges=args.edges)
    data, _, _ = _load_inputs(rc)
    report = heuristic_hyperparameters(data, rho=args.rho, k=args.k)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="carpart", description=(
        "Spatial clustering of areal time series with a CAR-within-clusters model "
        "and entropy-penalized particle search."))
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic grid data set")
    s.add_argument("--grid", type=int, default=20, help="grid side length (default 20)")
    s.add_argument("--setting", choices=sorted(dataio.SETTINGS), default="high",
                   help="cluster separation: high=(2,1), moderate=(1,0.5), low=(0,0)")
    s.add_argument("--periods", type=int, default=12, help="number of time periods T")
    s.add_argument("--sigma2", type=float, default=0.0625, help="residual variance")
    s.add_argument("--dgp", choices=["gaussian", "poisson"], default="gaussian")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--replicates", type=int, default=None,
                   help="write R data sets with seeds seed..seed+R-1 into OUT/rep_XXX")
    s.add_argument("--jobs", type=int, default=1, help="worker processes for replicates")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit the model and search for top particles")
    f.add_argument("--config", help="run_config.json from an earlier run; flags override it")
    f.add_argument("--data", help="transformed data CSV with columns unit,period,y")
    f.add_argument("--counts", help="raw CSV with columns unit,period,count")
    f.add_argument("--areas", help="CSV with columns unit,area_sq_miles")
    f.add_argument("--edges", help="edge list CSV with columns i,j holding unit ids")
    f.add_argument("--out", help="output directory")
    f.add_argument("--L", dest="n_particles", type=int, help="number of particles (default 10)")
    f.add_argument("--lambda", dest="lam", type=float, help="entropy penalty (default 100)")
    f.add_argument("--rho", type=float, help="within-cluster spatial dependence (default 0.9)")
    f.add_argument("--eta", type=float, help="partition prior mass (default 1)")
    f.add_argument("--prior", choices=["ep", "uniform"], help="partition prior (default ep)")
    f.add_argument("--equal-partitions", dest="equal_partitions", action="store_const",
                   const=True, help="tie the intercept and trend partitions together")
    f.add_argument("--seed", type=int, help="random seed (default 0)")
    f.add_argument("--skip-eb", dest="skip_eb", action="store_const", const=True,
                   help="use heuristic or pinned scales without the MAP/empirical Bayes step")
    f.add_argument("--max-sweeps", dest="max_sweeps", type=int)
    f.add_argument("--holdout-last", dest="holdout_last", action="store_const", const=True,
                   help="withhold the final period for out-of-sample evaluation")
    f.add_argument("--k-heuristic", dest="k_heuristic", type=int,
                   help="cluster count used by the scale heuristic (default floor(ln N))")
    for name in SCALE_NAMES:
        f.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float,
                       help=f"pin {name} instead of estimating it")
    f.add_argument("--replicates", type=int, default=None,
                   help="run R fits with seeds seed..seed+R-1 into OUT/rep_XXX")
    f.add_argument("--jobs", type=int, default=1)
    f.add_argument("--quiet", action="store_true")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("evaluate", help="compute metrics for a fit directory")
    e.add_argument("--fit", required=True, help="fit output directory")
    e.add_argument("--truth", help="truth.json written by simulate")
    e.add_argument("--holdout", action="store_true",
                   help="score forecasts of the period withheld by --holdout-last")
    e.add_argument("--edges", help="edge list (defaults to the one in run_config.json)")
    e.add_argument("--out", help="metrics file (default FIT/metrics.json)")
    e.set_defaults(func=cmd_evaluate)

    h = sub.add_parser("hyper", help="report heuristic hyperparameters")
    h.add_argument("--data")
    h.add_argument("--counts")
    h.add_argument("--areas")
    h.add_argument("--edges", required=True)
    h.add_argument("--rho", type=float, default=0.9)
    h.add_argument("--k", type=int, default=None)
    h.add_argument("--out")
    h.set_defaults(func=cmd_hyper)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
