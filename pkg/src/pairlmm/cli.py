"""Command-line interface: fit, simulate, bootstrap, combine.

Configuration comes from flags plus an optional plain-text ``key=value``
file (one pair per line, ``#`` comments); flags win on conflict.
Diagnostics go to stderr, results to stdout and/or CSV files.  Exit
codes: 0 success, 1 user error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from .design import DesignError, SurveyDesign, validate_design
from .data import ModelFrameError, build_model_frame
from .formula import FormulaError, parse_formula
from .inference import bootstrap_fit, rubin_combine, sandwich_beta
from .pairwise import (
    FitError,
    FitOptions,
    enumerate_pairs,
    fit_pairwise_from_pairs,
)
from .reference import WeightScaling, fit_ml, fit_stagewise
from .simlab import preset, run_study

_MISSING = {"", "na", "nan", "null", "."}


class UserError(Exception):
    """Bad input or configuration (exit code 1)."""


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UserError(f"{path}:{ln}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def ingest_csv(path: str, numeric: list[str], keep: list[str]):
    """Read a CSV into a column table, dropping rows with missing values.

    Args:
        path: UTF-8 CSV with a header row.
        numeric: columns parsed as floats (error names row and column on
            a non-numeric value).
        keep: additional columns kept as strings (categoricals).

    Returns:
        (table, n_dropped): dict column -> array, and the number of rows
        dropped because a used column was missing.
    """
    numeric = list(dict.fromkeys(numeric))
    keep = [c for c in dict.fromkeys(keep) if c not in numeric]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise UserError(f"{path}: empty file") from None
        cols = {name: i for i, name in enumerate(header)}
        for name in numeric + keep:
            if name not in cols:
                raise UserError(f"{path}: missing column {name!r}")
        rows = []
        n_dropped = 0
        for ln, rec in enumerate(reader, start=2):
            vals = {}
            missing = False
            for name in numeric + keep:
                raw = rec[cols[name]].strip() if cols[name] < len(rec) else ""
                if raw.lower() in _MISSING:
                    missing = True
                    break
                vals[name] = raw
            if missing:
                n_dropped += 1
                continue
            for name in numeric:
                try:
                    vals[name] = float(vals[name])
                except ValueError:
                    raise UserError(
                        f"{path}: non-numeric value {vals[name]!r} in "
                        f"column {name!r} at row {ln}") from None
            rows.append(vals)
    if not rows:
        raise UserError(f"{path}: no usable rows after filtering")
    table = {}
    for name in numeric:
        table[name] = np.array([r[name] for r in rows], dtype=float)
    for name in keep:
        table[name] = np.array([r[name] for r in rows], dtype=object)
    return table, n_dropped


def build_design(table, args) -> SurveyDesign:
    def col(name):
        if name not in table:
            raise UserError(f"design column {name!r} not in data")
        return table[name]

    return SurveyDesign(
        stratum=col(args.stratum),
        psu=col(args.psu),
        group=col(args.group),
        p_stage1=np.asarray(col(args.p1), dtype=float),
        p_stage2=np.asarray(col(args.p2), dtype=float),
        p_pair=np.asarray(col(args.ppair), dtype=float)
        if args.ppair else None,
        pop_cluster_size=np.asarray(col(args.npop), dtype=float)
        if args.npop else None,
    )


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _write_fit_csv(path: str, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "parameter", "estimate", "se"])
        for row in rows:
            writer.writerow(row)


def _load_table(args):
    formula = parse_formula(args.formula)
    numeric = list(formula.variables)
    numeric.remove(formula.grouping_factors[0])
    for extra in (args.p1, args.p2, args.ppair, args.npop):
        if extra:
            numeric.append(extra)
    keep = [args.stratum, args.psu, args.group,
            formula.grouping_factors[0]]
    table, n_dropped = ingest_csv(args.data, numeric, keep)
    if n_dropped:
        print(f"note: dropped {n_dropped} rows with missing values",
              file=sys.stderr)
    return formula, table


def cmd_fit(args) -> int:
    formula, table = _load_table(args)
    design = build_design(table, args)
    checked = validate_design(design)
    print(f"pair probabilities: {checked.provenance}", file=sys.stderr)

    estimators = ([args.estimator] if args.estimator != "all" else
                  ["ml", "pairwise", "stagewise"])
    frame = build_model_frame(table, formula)
    out_rows = []
    options = FitOptions(weight_scale=args.weight_scale)
    for est in estimators:
        if est == "ml":
            fit = fit_ml(table, formula)
            se = {}
        elif est == "pairwise":
            pairs = enumerate_pairs(frame, checked)
            start = fit_ml(table, formula).theta.free
            fit = fit_pairwise_from_pairs(
                pairs, frame.structure, start, options,
                beta_names=frame.x_names, vc_names=frame.vc_names(),
                n_obs=frame.n, n_groups=checked.n_groups)
            sand = sandwich_beta(fit, pairs)
            se = dict(zip(fit.beta_names, sand.se))
        else:
            fit = fit_stagewise(table, design, formula,
                                scaling=WeightScaling(args.scaling,
                                                      args.scaling_target))
            se = {}
        print(f"== {fit.method} ==")
        print(f"  converged: {fit.converged}  evaluations: "
              f"{fit.evaluations}  boundary: {fit.boundary}")
        if fit.singletons_dropped:
            print(f"  singleton groups dropped from pairs: "
                  f"{fit.singletons_dropped}", file=sys.stderr)
        params = fit.parameters()
        for name, value in params.items():
            line = f"  {name:24s} {_fmt(value):>14s}"
            if name in se:
                line += f"  (SE {_fmt(se[name])})"
            print(line)
            out_rows.append([fit.method, name, repr(value),
                             repr(se[name]) if name in se else ""])
    if args.out:
        _write_fit_csv(args.out, out_rows)
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_bootstrap(args) -> int:
    formula, table = _load_table(args)
    design = build_design(table, args)
    checked = validate_design(design)
    frame = build_model_frame(table, formula)
    pairs = enumerate_pairs(frame, checked)
    start = fit_ml(table, formula).theta.free
    fit = fit_pairwise_from_pairs(
        pairs, frame.structure, start,
        beta_names=frame.x_names, vc_names=frame.vc_names(),
        n_obs=frame.n, n_groups=checked.n_groups)
    sand = sandwich_beta(fit, pairs)
    reps = bootstrap_fit(fit, pairs, replicates=args.replicates,
                         seed=args.seed)
    se = reps.se()
    print(f"== pairwise (bootstrap R={args.replicates}, seed={args.seed}, "
          f"failed={reps.n_failed}) ==")
    out_rows = []
    for i, name in enumerate(fit.beta_names):
        print(f"  {name:24s} {_fmt(fit.beta[i]):>14s}  "
              f"(sandwich SE {_fmt(sand.se[i])}, "
              f"bootstrap SE {_fmt(se['beta'][i])})")
        out_rows.append(["pairwise", name, repr(fit.beta[i]),
                         repr(sand.se[i])])
    for i, name in enumerate(fit.vc_names):
        print(f"  {name:24s} {_fmt(fit.vc_values[i]):>14s}  "
              f"(bootstrap SE {_fmt(se['vc'][i])})")
        out_rows.append(["pairwise", name, repr(fit.vc_values[i]),
                         repr(se["vc"][i])])
    print(f"  {'sigma2':24s} {_fmt(fit.sigma2):>14s}  "
          f"(bootstrap SE {_fmt(se['sigma2'])})")
    out_rows.append(["pairwise", "sigma2", repr(fit.sigma2),
                     repr(se["sigma2"])])
    if args.out:
        _write_fit_csv(args.out, out_rows)
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    try:
        scen = preset(args.preset, replicates=args.replicates,
                      seed=args.seed)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    result = run_study(scen)
    m = result.metrics
    header = (f"# preset={scen.name} replicates={scen.replicates} "
              f"seed={scen.seed} rule={scen.rule} split_by={scen.split_by} "
              f"x_dist={scen.x_dist}")
    failures = {e: m.n_failed[e] for e in m.estimators}
    print(header)
    print(f"# failures: {failures}")
    flagged = [e for e in m.estimators
               if m.n_failed[e] > 0.05 * scen.replicates]
    if flagged:
        print(f"# WARNING: >5% fit failures for {flagged}", file=sys.stderr)
    print(m.to_text())
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            fh.write(header + "\n")
            fh.write(f"# failures: {failures}\n")
            writer = csv.writer(fh)
            writer.writerow(["estimator", "parameter", "statistic",
                             "value"])
            for row in m.rows():
                writer.writerow(row)
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _read_fit_csv(path: str):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["estimator", "parameter", "estimate", "se"]:
            raise UserError(f"{path}: not a fit output file")
        rows = [r for r in reader]
    return rows


def cmd_combine(args) -> int:
    sets = []
    for path in args.fits:
        rows = _read_fit_csv(path)
        params = {r[1]: (float(r[2]), float(r[3]) if r[3] else np.nan)
                  for r in rows if r[0] == args.estimator}
        if not params:
            raise UserError(
                f"{path}: no rows for estimator {args.estimator!r}")
        sets.append(params)
    names = list(sets[0])
    for path, s in zip(args.fits[1:], sets[1:]):
        if list(s) != names:
            raise UserError(f"{path}: parameter set differs from "
                            f"{args.fits[0]}")
    if len(sets) == 1:
        print("warning: single fit supplied; passing through unchanged",
              file=sys.stderr)
        for n in names:
            est, se = sets[0][n]
            print(f"  {n:24s} {_fmt(est):>14s}  (SE {_fmt(se)})")
        return 0
    est = np.array([[s[n][0] for n in names] for s in sets])
    var = np.array([[s[n][1] ** 2 for n in names] for s in sets])
    usable = ~np.any(np.isnan(var), axis=0)
    combined = rubin_combine(est, np.where(usable, var, 0.0), names)
    print(f"== Rubin-combined over M={len(sets)} fits ==")
    for i, n in enumerate(names):
        se = _fmt(combined.se[i]) if usable[i] else "NA"
        df = _fmt(combined.df[i]) if usable[i] else "NA"
        print(f"  {n:24s} {_fmt(combined.estimate[i]):>14s}  "
              f"(SE {se}, df {df})")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "estimate", "se", "df"])
            for i, n in enumerate(names):
                writer.writerow([n, repr(float(combined.estimate[i])),
                                 repr(float(combined.se[i]))
                                 if usable[i] else "",
                                 repr(float(combined.df[i]))
                                 if usable[i] else ""])
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _add_design_flags(sp):
    sp.add_argument("--stratum", default="stratum",
                    help="stratum column name")
    sp.add_argument("--psu", default="psu", help="PSU column name")
    sp.add_argument("--group", default="group",
                    help="model group column name")
    sp.add_argument("--p1", default="p1",
                    help="stage-1 probability column")
    sp.add_argument("--p2", default="p2",
                    help="stage-2 conditional probability column")
    sp.add_argument("--ppair", default=None,
                    help="conditional pair probability column (optional)")
    sp.add_argument("--npop", default=None,
                    help="population cluster size column (optional)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairlmm",
        description="Two-level linear mixed models for complex-survey "
                    "data by weighted pairwise composite likelihood.")
    parser.add_argument("--config", default=None,
                        help="key=value configuration file (flags win)")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit estimators to a CSV dataset")
    fit.add_argument("data", help="input CSV path")
    fit.add_argument("--formula", required=True)
    _add_design_flags(fit)
    fit.add_argument("--estimator", default="pairwise",
                     choices=["pairwise", "ml", "stagewise", "all"])
    fit.add_argument("--scaling", default="gk",
                     choices=["unscaled", "cluster-size", "gk"])
    fit.add_argument("--scaling-target", default="population",
                     choices=["population", "sample"])
    fit.add_argument("--weight-scale", type=float, default=1.0)
    fit.add_argument("--out", default=None, help="CSV output path")
    fit.set_defaults(func=cmd_fit)

    boot = sub.add_parser("bootstrap",
                          help="pairwise fit with bootstrap SEs")
    boot.add_argument("data", help="input CSV path")
    boot.add_argument("--formula", required=True)
    _add_design_flags(boot)
    boot.add_argument("--replicates", type=int, default=200)
    boot.add_argument("--seed", type=int, required=True)
    boot.add_argument("--out", default=None, help="CSV output path")
    boot.set_defaults(func=cmd_bootstrap)

    sim = sub.add_parser("simulate", help="run a simulation study preset")
    sim.add_argument("--preset", required=True,
                     help="table1 ... table9")
    sim.add_argument("--replicates", type=int, default=None)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--out", default=None, help="CSV output path")
    sim.set_defaults(func=cmd_simulate)

    comb = sub.add_parser("combine",
                          help="Rubin-combine fits across plausible values")
    comb.add_argument("fits", nargs="+", help="fit output CSV paths")
    comb.add_argument("--estimator", default="pairwise")
    comb.add_argument("--out", default=None, help="CSV output path")
    comb.set_defaults(func=cmd_combine)
    return parser


def _apply_config(parser, argv):
    """Merge an optional config file under the flags (flags win)."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    path = argv[i + 1]
    conf = read_config_file(path)
    extra = []
    for key, value in conf.items():
        flag = "--" + key.replace("_", "-")
        if flag not in argv:
            extra.extend([flag, value])
    return argv + extra


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    try:
        argv = _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (UserError, FormulaError, DesignError, ModelFrameError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FitError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
