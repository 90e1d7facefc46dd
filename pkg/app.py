"""
chainstack command line.

    python app.py diagnose --in DIR
    python app.py psis --in DIR
    python app.py stack --in DIR [--method stacking|pseudo-bma|uniform|mode-height|importance]
    python app.py resample --in DIR --s-thin N --seed S --out-dir OUT
    python app.py simulate-cauchy --a 10 --p0 0.5 --n 100 --chains 8 --iters 4000 --out-dir OUT
    python app.py theory --a 10 --p0 0.5
    python app.py pipeline --in DIR --out-dir OUT [--report]

JSON goes to stdout (or --out), logs to stderr. Failures print an error record
and exit with 2 (input), 3 (contract), 4 (numerical) or 5 (no convergence).
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from utils import cauchy_theory
from utils.config import (
    DEFAULT_LAMBDA,
    DEFAULT_MAX_ITER,
    DEFAULT_RHAT_THRESHOLD,
    DEFAULT_STEP,
    DEFAULT_SUMMARY,
    DEFAULT_TOL,
    resolve_log_level,
    resolve_threads,
)
from utils.draws import load_chain_dir, load_matrix_csv, write_chain_csv
from utils.errors import ChainStackError, ConvergenceError, DomainError
from utils.json_output import RunManifest, build_record, dumps, to_jsonable, write_json
from utils.pipeline import METHODS, ChainStackAnalyzer, format_report_for_display, parse_estimand
from utils.psis import khat_summary, loo_matrix
from utils.stacking import StackingConfig, heldout_log_score
from utils.visualization import (
    create_khat_chart,
    create_monitor_curve_chart,
    create_pairwise_rhat_heatmap,
    create_weights_chart,
    create_xi_chart,
    write_figures,
)

logger = logging.getLogger("chainstack")


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def _common(parser):
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (CHAINSTACK_THREADS overrides; default: all cores)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logs")
    parser.add_argument("--out", type=Path, default=None, help="write the JSON record here instead of stdout")


def _input(parser):
    parser.add_argument("--in", dest="input", type=Path, required=True, help="directory of chain CSV files")
    parser.add_argument("--layout", choices=("draws", "observations"), default="draws",
                        help="rows are draws (default) or observations")
    parser.add_argument("--skip-rows", type=int, default=0, help="leading rows to drop from every file")


def _diagnostics(parser):
    parser.add_argument("--threshold", type=float, default=DEFAULT_RHAT_THRESHOLD,
                        help="pairwise R-hat threshold for merging chains")
    parser.add_argument("--summary", default=DEFAULT_SUMMARY,
                        help='scalar per draw for the diagnostics: "mean_loglik" or "param:<column>"')
    parser.add_argument("--no-cluster", action="store_true", help="treat every chain as its own cluster")


def _weights(parser):
    parser.add_argument("--method", choices=METHODS, default="stacking")
    parser.add_argument("--lambda", dest="lambda_", type=float, default=DEFAULT_LAMBDA,
                        help="Dirichlet prior scale, > 1")
    parser.add_argument("--prior-form", choices=("shifted", "literal"), default="shifted")
    parser.add_argument("--tol", type=float, default=DEFAULT_TOL)
    parser.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER)
    parser.add_argument("--log-heights", default=None,
                        help="comma-separated log posterior density at each cluster's mode (mode-height)")
    parser.add_argument("--log-post-column", default="lp__",
                        help="parameter column holding log p(theta|y) (importance)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainstack", description="Stacking of non-mixing MCMC chains")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diagnose", help="split-R-hat, ESS and chain clustering")
    _common(p)
    _input(p)
    _diagnostics(p)

    p = sub.add_parser("psis", help="PSIS leave-one-out densities per chain")
    _common(p)
    _input(p)

    p = sub.add_parser("stack", help="weights for the (clustered) chains")
    _common(p)
    _input(p)
    _diagnostics(p)
    _weights(p)
    p.add_argument("--monitor", action="store_true", help="also compute the monitoring curve")
    p.add_argument("--heldout", type=Path, default=None,
                   help="CSV of held-out log predictive densities, one column per cluster")

    p = sub.add_parser("resample", help="thin the weighted clusters into unweighted draws")
    _common(p)
    _input(p)
    _diagnostics(p)
    _weights(p)
    p.add_argument("--s-thin", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("simulate-cauchy", help="simulate non-mixing chains on the Cauchy mixture")
    _common(p)
    p.add_argument("--a", type=float, required=True)
    p.add_argument("--p0", type=float, default=0.5)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--chains", type=int, default=8)
    p.add_argument("--iters", type=int, default=4000)
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("theory", help="closed-form and quadrature results for the Cauchy mixture")
    _common(p)
    p.add_argument("--a", type=float, required=True)
    p.add_argument("--p0", type=float, default=0.5)
    p.add_argument("--figures", type=Path, default=None, help="write plotly figure JSON here")

    p = sub.add_parser("pipeline", help="diagnose, PSIS, stack, monitor and resample in one run")
    _common(p)
    _input(p)
    _diagnostics(p)
    _weights(p)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--s-thin", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimand", default=None, help='parameter expectation to report, e.g. "mu" or "mu>0"')
    p.add_argument("--no-monitor", action="store_true")
    p.add_argument("--report", action="store_true", help="print a markdown report instead of JSON")
    p.add_argument("--figures", type=Path, default=None, help="write plotly figure JSON here")
    return parser


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------

def _emit(record, out=None):
    if out is not None:
        write_json(record, out)
    else:
        sys.stdout.write(dumps(record))


def _stacking_config(args) -> StackingConfig:
    return StackingConfig(lambda_=args.lambda_, tol=args.tol, max_iter=args.max_iter, prior_form=args.prior_form)


def _log_heights(args):
    if args.log_heights is None:
        return None
    try:
        return [float(v) for v in args.log_heights.split(",")]
    except ValueError:
        raise DomainError(f"--log-heights must be comma-separated numbers, got {args.log_heights!r}",
                          module="cli") from None


def _config_echo(args, **extra):
    keys = ("lambda_", "prior_form", "tol", "max_iter", "threshold", "summary", "method", "seed", "s_thin", "layout",
            "skip_rows", "a", "p0", "n", "chains", "iters", "step")
    echo = {k.rstrip("_"): getattr(args, k) for k in keys if hasattr(args, k)}
    if hasattr(args, "no_cluster"):
        echo["cluster"] = not args.no_cluster
    echo.update(extra)
    return echo


def _analyzer(args, threads) -> ChainStackAnalyzer:
    draws = load_chain_dir(args.input, args.layout, args.skip_rows, threads)
    return ChainStackAnalyzer(
        draws, _stacking_config(args), threshold=args.threshold, summary=args.summary,
        cluster=not args.no_cluster, threads=threads,
    )


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_diagnose(args, threads):
    draws = load_chain_dir(args.input, args.layout, args.skip_rows, threads)
    analyzer = ChainStackAnalyzer(draws, threshold=args.threshold, summary=args.summary,
                                  cluster=not args.no_cluster, threads=threads)
    diagnostics = analyzer.run_diagnostics()
    manifest = RunManifest.from_drawset(draws, _config_echo(args))
    _emit(build_record("diagnostics", diagnostics.to_dict(), manifest), args.out)
    return 0


def cmd_psis(args, threads):
    draws = load_chain_dir(args.input, args.layout, args.skip_rows, threads)
    loo = loo_matrix(draws, threads)
    manifest = RunManifest.from_drawset(draws, _config_echo(args))
    _emit(build_record("loo", {"loo": loo, "khat_summary": khat_summary(loo.khat)}, manifest), args.out)
    return 0


def _clusters_payload(analyzer):
    diagnostics = analyzer.diagnostics
    return [
        {
            "cluster": k,
            "chain_id": chain.chain_id,
            "members": [diagnostics.chain_ids[j] for j in diagnostics.clusters.members(k)],
            "n_draws": chain.n_draws,
        }
        for k, chain in enumerate(analyzer.clustered.chains)
    ]


def cmd_stack(args, threads):
    analyzer = _analyzer(args, threads)
    weights = analyzer.compute_weights(args.method, _log_heights(args), args.log_post_column)
    payload = analyzer.weights_summary(analyzer.monitor() if args.monitor else None)
    payload["clusters"] = _clusters_payload(analyzer)
    payload["heldout_log_score"] = (
        heldout_log_score(weights, load_matrix_csv(args.heldout)) if args.heldout is not None else None
    )
    manifest = RunManifest.from_drawset(analyzer.draws, _config_echo(args))
    _emit(build_record("weights", payload, manifest), args.out)
    return 0


def cmd_resample(args, threads):
    analyzer = _analyzer(args, threads)
    analyzer.compute_weights(args.method, _log_heights(args), args.log_post_column)
    plan, thinned = analyzer.resample(args.s_thin, args.seed)
    files = [str(p) for p in write_chain_csv(thinned, args.out_dir) if p is not None]
    manifest = RunManifest.from_drawset(analyzer.draws, _config_echo(args))
    record = build_record("resample", {"weights": analyzer.weights, "plan": plan, "files": files}, manifest)
    write_json(record, args.out_dir / "plan.json")
    _emit(record, args.out)
    return 0


def cmd_simulate(args, threads):
    scenario = cauchy_theory.CauchyScenario(a=args.a, p0=args.p0, n=args.n, seed=args.seed)
    sim = cauchy_theory.simulate_chains(scenario, args.chains, args.iters, args.step, threads)
    files = [str(p) for p in cauchy_theory.write_simulation(sim, args.out_dir)]
    manifest = RunManifest(config=_config_echo(args))
    _emit(build_record("simulation", {"scenario": sim.scenario_record(), "files": files}, manifest), args.out)
    return 0


def cmd_theory(args, threads):
    report = cauchy_theory.theory_report(args.a, args.p0)
    if args.figures is not None:
        a_grid = np.geomspace(2.05, max(100.0, 2.0 * args.a), 60)
        xi_values = [cauchy_theory.xi(a) for a in a_grid]
        write_figures({"xi": create_xi_chart(a_grid, xi_values, args.p0, args.a)}, args.figures)
    _emit(build_record("theory", report, RunManifest(config=_config_echo(args))), args.out)
    return 0


def cmd_pipeline(args, threads):
    analyzer = _analyzer(args, threads)
    estimand = parse_estimand(args.estimand) if args.estimand else None
    report = analyzer.generate_report(
        method=args.method, monitor=not args.no_monitor, estimand=estimand, s_thin=args.s_thin,
        seed=args.seed, log_heights=_log_heights(args), log_post_column=args.log_post_column,
    )
    manifest = RunManifest.from_drawset(analyzer.draws, _config_echo(args))
    out_dir = args.out_dir
    written = [
        write_json(build_record("diagnostics", report["diagnostics"].to_dict(), manifest),
                   out_dir / "diagnostics.json"),
        write_json(build_record("loo", {"loo": report["loo"], "khat_summary": report["khat_summary"]}, manifest),
                   out_dir / "loo.json"),
        write_json(build_record("weights", {**analyzer.weights_summary(report["monitor"]),
                                            "clusters": report["clusters"]}, manifest),
                   out_dir / "weights.json"),
    ]
    if report["monitor"] is not None:
        written.append(write_json(build_record("monitor", {"monitor": report["monitor"]}, manifest),
                                  out_dir / "monitor.json"))
    if report["resample"] is not None:
        written.extend(p for p in write_chain_csv(report["thinned"], out_dir) if p is not None)
        written.append(write_json(build_record("resample", {"plan": report["resample"]}, manifest),
                                  out_dir / "plan.json"))
    if args.figures is not None:
        figures = {
            "weights": create_weights_chart(report["weights"], [c["chain_id"] for c in report["clusters"]]),
            "khat": create_khat_chart(report["khat_summary"]),
            "pairwise_rhat": create_pairwise_rhat_heatmap(report["diagnostics"]),
        }
        if report["monitor"] is not None:
            figures["monitor"] = create_monitor_curve_chart(report["monitor"])
        written.extend(write_figures(figures, args.figures))

    if args.report:
        sys.stdout.write(format_report_for_display(report))
        return 0
    summary = {
        "weights": report["weights"],
        "clusters": report["clusters"],
        "stacked_ess": report["stacked_ess"],
        "khat_summary": report["khat_summary"],
        "estimate": report["estimate"],
        "files": [str(p) for p in written],
    }
    _emit(build_record("pipeline", summary, manifest), args.out)
    return 0


COMMANDS = {
    "diagnose": cmd_diagnose,
    "psis": cmd_psis,
    "stack": cmd_stack,
    "resample": cmd_resample,
    "simulate-cauchy": cmd_simulate,
    "theory": cmd_theory,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=resolve_log_level(args.verbose),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    threads = resolve_threads(args.threads)
    logger.debug("running %s with %d thread(s)", args.command, threads)
    try:
        return COMMANDS[args.command](args, threads)
    except ChainStackError as exc:
        record = exc.to_record()
        if isinstance(exc, ConvergenceError) and exc.best is not None:
            record["error"]["best"] = to_jsonable(exc.best)
        logger.error("%s: %s", exc.code, exc.message)
        sys.stdout.write(dumps(record))
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
