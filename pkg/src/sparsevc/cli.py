"""Command-line front end.

Exit codes: 0 success, 1 numerical failure, 2 I/O problem, 3 schema or
validation error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .datamodel import DataError, MissingPolicy, export_csv, ingest_csv, summarize
from .kernel import KernelSpec, build_blocks
from .modelio import ModelFormatError, load_model, save_model
from .predictor import coefficient_curves, write_predictions_csv
from .solver import ConvergenceError, FitConfig, SolverError, fit_one_step, theorem1_diagnostics
from .synth import WAVE_CUTOFFS, generate, load_scenario, waves_experiment, write_waves_csv
from .tuning import GcvDegenerate, cross_validate_M, default_M_grid, make_cv_plan, select_tau0

log = logging.getLogger("sparsevc")

EXIT_OK, EXIT_NUMERIC, EXIT_IO, EXIT_SCHEMA = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _float_list(text: str) -> list[float]:
    text = text.strip()
    if text.startswith("logspace:"):
        lo, hi, num = text.split(":")[1:]
        return [float(v) for v in np.logspace(float(lo), float(hi), int(num))]
    return [float(v) for v in text.split(",") if v.strip()]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


_CONFIG_ALIASES = {"lambda": "lam"}


def read_config_file(path) -> dict:
    """``key = value`` lines; keys are flag names with or without dashes."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}", EXIT_IO) from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'", EXIT_SCHEMA)
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        out[_CONFIG_ALIASES.get(key, key)] = val
    return out


# ---------------------------------------------------------------------------
# parser


def _add_common(p, seed_default=0):
    p.add_argument("--config", help="key = value file mirroring the flags (flags win)")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--print-config", action="store_true", help="echo the resolved configuration")
    p.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSVs")


def _add_fit_flags(p):
    p.add_argument("--kernel", choices=["sobolev1", "cubic", "cubic-spline", "gaussian"], default="sobolev1")
    p.add_argument("--bandwidth", type=float, default=0.25)
    p.add_argument("--tau0-grid", type=_float_list, default=None,
                   help="comma list or logspace:LO:HI:NUM (default logspace:-6:2:15)")
    p.add_argument("--tau0", type=float, default=None, help="skip GCV and use this value")
    p.add_argument("--M", type=float, default=None, help="weight budget (default: cross-validated)")
    p.add_argument("--M-grid", type=_float_list, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="report the implied tau1 = lambda^4 / (4 tau0)")
    p.add_argument("--folds", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsevc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="tune and fit a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="fit_out", help="output directory for reports")
    p.add_argument("--model", default=None, help="model file (default OUT/model.json)")
    p.add_argument("--time-divisor", type=float, default=None)
    _add_fit_flags(p)
    _add_common(p)

    p = sub.add_parser("predict", help="predict responses for query visits")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="query CSV: subject_id,time[,response],covariates")
    p.add_argument("--out", default="predictions.csv")
    p.add_argument("--time-divisor", type=float, default=None,
                   help="divisor for query times (default: the one stored with the model)")
    _add_common(p)

    p = sub.add_parser("simulate", help="draw a synthetic cohort")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", default="cohort.csv")
    _add_common(p, seed_default=None)

    p = sub.add_parser("waves", help="holdout RMSE for growing amounts of longitudinal data")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", default="waves.csv")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds, starting at --seed")
    p.add_argument("--levels", type=_float_list, default=list(WAVE_CUTOFFS))
    _add_fit_flags(p)
    _add_common(p, seed_default=None)

    p = sub.add_parser("summarize", help="cohort summary table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="CSV summary (text goes to stdout)")
    p.add_argument("--time-divisor", type=float, default=None)
    _add_common(p)

    p = sub.add_parser("gram", help="export Gram matrices for debugging")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="gram_out")
    p.add_argument("--time-divisor", type=float, default=None)
    p.add_argument("--kernel", choices=["sobolev1", "cubic", "cubic-spline", "gaussian"], default="sobolev1")
    p.add_argument("--bandwidth", type=float, default=0.25)
    _add_common(p)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg = read_config_file(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, raw in cfg.items():
            if key not in known or key in ("config", "help"):
                raise CliError(f"{args.config}: unknown key {key!r}", EXIT_SCHEMA)
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes")
            elif action.type is not None:
                defaults[key] = action.type(raw)
            else:
                defaults[key] = raw
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _print_config(args):
    for key in sorted(vars(args)):
        if key in ("print_config",):
            continue
        val = getattr(args, key)
        if isinstance(val, list):
            val = ",".join(_fmt(v) for v in val)
        print(f"{key} = {val}")


def _fit_config(args) -> FitConfig:
    return FitConfig(tau0=args.tau0, M=args.M, lam=args.lam,
                     kernel=KernelSpec(args.kernel, args.bandwidth))


def _read(path, time_divisor):
    if not Path(path).is_file():
        raise CliError(f"input file not found: {path}", EXIT_IO)
    return ingest_csv(path, policy=MissingPolicy(), time_divisor=time_divisor)


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    ds = _read(args.data, args.time_divisor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _fit_config(args)
    blocks = build_blocks(config.kernel, ds)

    gcv = None
    if config.tau0 is None:
        gcv = select_tau0(ds, blocks, args.tau0_grid)
        config = replace(config, tau0=gcv.chosen)
        gcv.write_csv(out / "gcv_trace.csv")
    cv = None
    if config.M is None:
        grid_M = default_M_grid(ds.p) if args.M_grid is None else np.asarray(args.M_grid)
        k = min(args.folds, ds.n)
        if k < 2:
            raise CliError("cross-validating M needs at least two subjects; pass --M", EXIT_SCHEMA)
        cv = cross_validate_M(ds, config, grid_M, make_cv_plan(ds, k, args.seed), jobs=args.jobs)
        config = replace(config, M=cv.chosen)
        cv.write_csv(out / "cv_curve.csv")

    model = fit_one_step(ds, config, blocks)
    model_path = Path(args.model) if args.model else out / "model.json"
    save_model(model, model_path, ds.time_divisor)
    diag = theorem1_diagnostics(ds, blocks, model)
    norms = np.sqrt(blocks.component_norms_sq(model.beta_coeffs))

    with open(out / "components.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["covariate", "theta", "norm", "selected"])
        sel = set(model.selected)
        for j, nm in enumerate(model.covariate_names):
            w.writerow([nm, _fmt(model.theta[j]), _fmt(norms[j]), int(j in sel)])
    t_grid = np.linspace(0.0, 1.0, 51)
    curves = coefficient_curves(model, t_grid)
    with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["covariate", "t", "beta"])
        for j in model.selected:
            for t, v in zip(t_grid, curves[j]):
                w.writerow([model.covariate_names[j], _fmt(t), _fmt(v)])

    lines = [
        f"data            {args.data}",
        f"subjects n      {ds.n}",
        f"visits N        {ds.N}",
        f"covariates p    {ds.p}",
        f"kernel          {config.kernel.family}",
        f"tau0            {model.tau0:.6g}" + (" (GCV)" if gcv else " (given)"),
        f"M               {model.M:g}" + (" (CV)" if cv else " (given)"),
        f"tau1 realized   {model.tau1:.6g}",
    ]
    if config.tau1 is not None:
        lines.append(f"tau1 from lambda {config.tau1:.6g}")
    lines += [
        f"intercept b     {model.b:.6g}",
        f"selected        {', '.join(model.selected_names) or '(none)'}",
        "",
        "objective after steps 2, 3, 4: " + ", ".join(f"{v:.8g}" for v in model.history["objective"]),
        "",
        "existence-domain diagnostics",
    ]
    lines += [f"  {k:10s} {v}" for k, v in diag.to_dict().items()]
    lines += ["", "covariate  theta  norm"]
    lines += [f"{model.covariate_names[j]}  {model.theta[j]:.6g}  {norms[j]:.6g}" for j in model.selected]
    (out / "fit_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if args.plot:
        from . import plotting

        plotting.plot_curves(model, out / "curves.png")
        if gcv is not None:
            plotting.plot_gcv(gcv, out / "gcv.png")
        if cv is not None:
            plotting.plot_cv(cv, out / "cv.png")
    print(f"selected: {', '.join(model.selected_names) or '(none)'}")
    print(f"model written to {model_path}")
    return EXIT_OK


def _read_query(path, model, time_divisor):
    if not Path(path).is_file():
        raise CliError(f"query file not found: {path}", EXIT_IO)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return [], [], [], []
        header = [h.strip() for h in header]
        for col in ("subject_id", "time"):
            if col not in header:
                raise CliError(f"query file lacks column {col!r}", EXIT_SCHEMA)
        needed = [model.covariate_names[j] for j in model.selected]
        missing = [c for c in needed if c not in header]
        if missing:
            raise CliError(f"query file lacks selected covariates: {', '.join(missing)}", EXIT_SCHEMA)
        pos = {h: k for k, h in enumerate(header)}
        sids, times, ytrue, xs = [], [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                t = float(rec[pos["time"]]) / time_divisor
                row = {c: float(rec[pos[c]]) for c in needed}
            except (ValueError, IndexError):
                raise CliError(f"{path}: line {lineno}: bad or missing value", EXIT_SCHEMA) from None
            if not 0.0 <= t <= 1.0:
                raise CliError(f"{path}: line {lineno}: scaled time {t} outside [0, 1]", EXIT_SCHEMA)
            yt = None
            if "response" in pos and rec[pos["response"]].strip():
                yt = float(rec[pos["response"]])
            sids.append(rec[pos["subject_id"]].strip())
            times.append(t)
            ytrue.append(yt)
            xs.append(row)
    return sids, times, ytrue, xs


def cmd_predict(args) -> int:
    if not Path(args.model).is_file():
        raise CliError(f"model file not found: {args.model}", EXIT_IO)
    model, stored_div = load_model(args.model)
    div = args.time_divisor if args.time_divisor is not None else stored_div
    sids, times, ytrue, xs = _read_query(args.data, model, div)
    sel = model.selected
    if times:
        beta = coefficient_curves(model, times)[sel]
        X = np.array([[row[model.covariate_names[j]] for j in sel] for row in xs]).reshape(len(times), len(sel))
        pred = model.b + np.einsum("st,ts->t", beta, X)
    else:
        pred = []
    write_predictions_csv(args.out, sids, times, pred, ytrue)
    print(f"{len(times)} predictions written to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    ds, truth = generate(sc)
    export_csv(ds, args.out)
    print(f"cohort: n={ds.n}, N={ds.N}, p={ds.p}, active={sorted(j + 1 for j in truth.active)}")
    return EXIT_OK


def _scenario(args):
    if not Path(args.scenario).is_file():
        raise CliError(f"scenario file not found: {args.scenario}", EXIT_IO)
    try:
        sc = load_scenario(args.scenario)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_SCHEMA) from None
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    return sc


def cmd_waves(args) -> int:
    sc = _scenario(args)
    config = _fit_config(args)
    seeds = list(range(sc.seed, sc.seed + args.seeds))
    grid_M = None if args.M_grid is None else np.asarray(args.M_grid)
    rows = waves_experiment(sc, args.levels, seeds, config, grid_M, args.folds, jobs=args.jobs)
    write_waves_csv(args.out, rows)
    levels = sorted({r.level for r in rows})
    for lv in levels:
        vals = [r.rmse for r in rows if r.level == lv]
        print(f"level {lv}: mean RMSE {np.mean(vals):.4f} over {len(vals)} seeds")
    if args.plot:
        from . import plotting

        plotting.plot_waves(rows, Path(args.out).with_suffix(".png"))
    return EXIT_OK


def cmd_summarize(args) -> int:
    ds = _read(args.data, args.time_divisor)
    s = summarize(ds)
    sys.stdout.write(s.to_text())
    if args.out:
        s.write_csv(args.out)
    return EXIT_OK


def _write_matrix(path, A):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in A:
            w.writerow([_fmt(v) for v in row])


def cmd_gram(args) -> int:
    ds = _read(args.data, args.time_divisor)
    blocks = build_blocks(KernelSpec(args.kernel, args.bandwidth), ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix(out / "G.csv", blocks.G)
    for j, nm in enumerate(ds.covariate_names):
        _write_matrix(out / f"sigma_{nm}.csv", blocks.sigma[j])
    print(f"{1 + ds.p} matrices written to {out}")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "waves": cmd_waves,
    "summarize": cmd_summarize,
    "gram": cmd_gram,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_config:
        _print_config(args)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SolverError, ConvergenceError, GcvDegenerate, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, ModelFormatError, KeyError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
