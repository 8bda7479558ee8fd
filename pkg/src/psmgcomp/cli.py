"""Command-line entry point: ``psmgcomp {estimate,simulate,calibrate,bench,version}``.

Exit codes: 0 success, 1 usage error, 2 data or model error, 3 calibration
failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .bench import (
    DEFAULT_R_SIZE,
    Scenario,
    Settings,
    aggregate,
    canonical_method,
    emit,
    estimate_effect,
    run_scenario,
)
from .data import DataError, DichotomizeSpec, dichotomize, ingest_csv, read_real_table, tabulate
from .dgp import (
    CalibrationError,
    CalibrationTarget,
    calibrate,
    is_calibrated,
    read_scenario,
    simulate_dataset,
    spec_from_scenario,
    write_scenario,
)
from .posterior import DEFAULT_DRAWS
from .streams import RandomStream

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CALIBRATION = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _auto(value: str) -> float | None:
    if value == "auto":
        return None
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {value!r}") from None


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def _threads(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="psmgcomp", description="Bayesian g-computation with saturated and "
                     "partially saturated binary outcome models.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    est = sub.add_parser("estimate", help="estimate the ATT/ATE from a CSV dataset")
    est.add_argument("--data", required=True, help="CSV file with a header row")
    est.add_argument("--outcome", required=True, help="binary outcome column")
    est.add_argument("--treatment", required=True, help="binary treatment column")
    est.add_argument("--confounders", default=None,
                     help="comma-separated confounder columns (default: all other columns)")
    est.add_argument("--method", required=True,
                     choices=["bsat", "psm", "psm-clt", "psm-random", "parametric"])
    est.add_argument("--estimand", default="att", choices=["att", "ate"])
    est.add_argument("--b", type=_auto, default=None, metavar="auto|VAL",
                     help="prior share b (default auto: missing-code share clipped to [0.1, 0.9])")
    est.add_argument("--phi", type=_auto, default=None, metavar="auto|VAL",
                     help="Beta prior concentration (default auto: n/2^p)")
    est.add_argument("--epsilon", type=_auto, default=None, metavar="auto|VAL",
                     help="Dirichlet prior concentration (default auto: n/2^p)")
    est.add_argument("--draws", type=int, default=DEFAULT_DRAWS, help="posterior draws")
    est.add_argument("--r-size", type=int, default=DEFAULT_R_SIZE,
                     help="missing codes sampled by psm-random")
    est.add_argument("--seed", type=int, default=0, help="master random seed")
    est.add_argument("--dichotomize", action="store_true",
                     help="median-split confounder columns that are not already 0/1")
    est.add_argument("--out", default=None, help="write posterior draws to this CSV")
    est.add_argument("--plot", default=None, help="write an SVG histogram of the draws")
    est.add_argument("--threads", type=_threads, default=os.cpu_count() or 1,
                     help="worker threads for sampling (default: logical cores)")

    sim = sub.add_parser("simulate", help="simulate a dataset from a scenario file")
    sim.add_argument("--scenario", required=True, help="scenario JSON file")
    sim.add_argument("--n", type=int, required=True, help="rows to simulate")
    sim.add_argument("--seed", type=int, default=0, help="random seed")
    sim.add_argument("--out", required=True, help="output CSV")

    cal = sub.add_parser("calibrate", help="solve for lambda0, lambda1 hitting target ATT and MEB")
    cal.add_argument("--scenario", required=True, help="scenario JSON file")
    cal.add_argument("--delta-t", type=float, default=None, help="target ATT (default: scenario)")
    cal.add_argument("--meb", type=float, default=None, help="target MEB (default: scenario)")
    cal.add_argument("--tol", type=float, default=0.005, help="tolerance on both targets")
    cal.add_argument("--restarts", type=int, default=20, help="maximum random restarts")
    cal.add_argument("--out", required=True, help="output scenario JSON")

    ben = sub.add_parser("bench", help="replicate simulations and score the methods")
    ben.add_argument("--scenario", required=True, help="scenario JSON file")
    ben.add_argument("--methods", default="bsat,psm",
                     help="comma-separated subset of bsat,psm,psm-clt,psm-random,parametric")
    ben.add_argument("--n-grid", type=_int_list, default=[100], help="comma-separated sample sizes")
    ben.add_argument("--replicates", type=int, default=10, help="datasets per sample size")
    ben.add_argument("--draws", type=int, default=DEFAULT_DRAWS, help="posterior draws per fit")
    ben.add_argument("--r-size", type=int, default=DEFAULT_R_SIZE,
                     help="missing codes sampled by psm-random")
    ben.add_argument("--seed", type=int, default=0, help="master random seed")
    ben.add_argument("--out", required=True, help="output CSV of per-replicate rows")
    ben.add_argument("--summary", action="store_true", help="print the RMSE/bias/time table")
    ben.add_argument("--threads", type=_threads, default=os.cpu_count() or 1,
                     help="worker threads for sampling (default: logical cores)")

    sub.add_parser("version", help="print the package version")
    return parser


def _load_dataset(args):
    with open(args.data, "rb") as fh:
        raw = fh.read()
    cols = args.confounders.split(",") if args.confounders else None
    if not args.dichotomize:
        return ingest_csv(raw, args.outcome, args.treatment, cols)
    table = read_real_table(raw)
    names = cols or [k for k in table if k not in (args.outcome, args.treatment)]
    rules = {k: "binary" for k in (args.outcome, args.treatment)}
    for k in names:
        if np.isin(table[k], (0.0, 1.0)).all():
            rules[k] = "binary"
    return dichotomize(table, DichotomizeSpec(rules), args.outcome, args.treatment, names)


def cmd_estimate(args) -> int:
    d = _load_dataset(args)
    t = tabulate(d)
    method = canonical_method(args.method)
    settings = Settings(b=args.b, phi=args.phi, epsilon=args.epsilon)
    h = settings.resolve(t)
    est = estimate_effect(d, method, estimand=args.estimand.upper(), settings=settings,
                          draws=args.draws, r_size=args.r_size, rng=RandomStream(args.seed),
                          workers=args.threads, table=t)
    if "promoted" in est.diagnostics:
        print(f"notice: {est.diagnostics['promoted']}", file=sys.stderr)
    out = sys.stdout
    print(f"method      {est.method}", file=out)
    print(f"estimand    {args.estimand.upper()}", file=out)
    print(f"n           {t.n}", file=out)
    print(f"p           {t.p}", file=out)
    print(f"|M1| |M0|   {t.m1_size} {t.m0_size}", file=out)
    print(f"phi         {h.phi:.6g}", file=out)
    print(f"epsilon     {h.epsilon:.6g}", file=out)
    # BSAT is the b = 0 member of the PSM family; the parametric fit has no b
    b = 0.0 if method == "BSAT" else h.b
    print(f"b           {'n/a' if method == 'Parametric' else f'{b:.6g}'}", file=out)
    print(f"mean        {est.mean:.6f}", file=out)
    if est.draws.size:
        lo, hi = est.interval(0.95)
        print(f"sd          {est.sd:.6f}", file=out)
        print(f"95% CrI     [{lo:.6f}, {hi:.6f}]  (central interval; coverage not calibrated)", file=out)
        print(f"draws       {est.draws.size}", file=out)
    if est.closed_mean is not None:
        print(f"exact mean  {est.closed_mean:.6f}", file=out)
        print(f"exact sd    {est.closed_sd:.6f}", file=out)
    if est.diagnostics.get("clamped"):
        print(f"clamped     {est.diagnostics['clamped']}", file=out)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("draw\n")
            fh.writelines(f"{v!r}\n" for v in est.draws.tolist())
    if args.plot:
        if not est.draws.size:
            print("notice: no draws to plot for this method", file=sys.stderr)
        else:
            emit(est, "svg-histogram", args.plot, title=f"{est.method} posterior of {args.estimand.upper()}")
    return EXIT_OK


def _scenario_spec(path):
    scenario = read_scenario(path)
    if not is_calibrated(scenario):
        target = CalibrationTarget(float(scenario["delta_t"]), float(scenario["meb"]))
        print("notice: scenario has no lambda0/lambda1; calibrating first", file=sys.stderr)
        res = calibrate(spec_from_scenario(scenario), target, rng=int(scenario["seed"]))
        return scenario, res.spec
    return scenario, spec_from_scenario(scenario)


def cmd_simulate(args) -> int:
    _, spec = _scenario_spec(args.scenario)
    d = simulate_dataset(spec, args.n, RandomStream(args.seed))
    emit(d, "csv", args.out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    scenario = read_scenario(args.scenario)
    target = CalibrationTarget(
        delta_t=float(scenario["delta_t"]) if args.delta_t is None else args.delta_t,
        meb=float(scenario["meb"]) if args.meb is None else args.meb,
        tolerance=args.tol, max_restarts=args.restarts,
    )
    res = calibrate(spec_from_scenario(scenario), target, rng=int(scenario["seed"]))
    doc = dict(scenario)
    doc.update(delta_t=target.delta_t, meb=target.meb, lambda0=res.lambda0, lambda1=res.lambda1,
               achieved_delta_t=res.delta_t, achieved_meb=res.meb)
    write_scenario(doc, args.out)
    print(f"lambda0={res.lambda0:.6f} lambda1={res.lambda1:.6f} "
          f"delta_t={res.delta_t:.6f} meb={res.meb:.6f} attempts={res.attempts}")
    return EXIT_OK


def cmd_bench(args) -> int:
    _, spec = _scenario_spec(args.scenario)
    methods = [canonical_method(m) for m in args.methods.split(",") if m.strip()]
    s = Scenario(spec=spec, n_grid=args.n_grid, methods=methods, replicates=args.replicates,
                 draws=args.draws, r_size=args.r_size, seed=args.seed)
    failures: list = []
    rows = run_scenario(s, workers=args.threads, failures=failures)
    emit(rows, "csv", args.out)
    for method, n, rep, err in failures:
        print(f"warning: n={n} replicate={rep} {method or 'data'} failed: {err}", file=sys.stderr)
    if args.summary and rows:
        sys.stdout.write(emit(aggregate(rows), "text-summary").decode())
    return EXIT_OK


COMMANDS = dict(estimate=cmd_estimate, simulate=cmd_simulate, calibrate=cmd_calibrate, bench=cmd_bench)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "version":
        print(__version__)
        return EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except CalibrationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (DataError, ValueError, KeyError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
