"""Command-line entry point: ``railhaz <subcommand> ...``.

Exit codes: 0 success, 1 internal error, 2 invalid input, 3 an estimator
did not converge (outputs are still written and flagged in the JSON fit).
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .ctmc import CtmcFit, IntensitySpec, evolution_probabilities, fit_ctmc
from .errors import RailhazError, SingularInformationError, ValidationError
from .inference import lr_test
from .ingest import ingest
from .report import (
    panel_rows_from_paths,
    read_json,
    read_panel,
    read_sections,
    write_cox_table,
    write_ctmc_tables,
    write_evolution,
    write_json,
    write_panel,
    write_rejects,
    write_sections,
    write_survival_curves,
)
from .simgen import SimConfig, simulate_cox_sections, simulate_ctmc
from .survival import CoxDataset, CoxFit, fit_cox, predict_survival

logger = logging.getLogger("railhaz")

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2, 3


class UsageError(ValidationError):
    """Bad option values detected after argument parsing."""


# -- helpers --------------------------------------------------------------------


def _threads(args) -> int:
    env = os.environ.get("RAILHAZ_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"RAILHAZ_THREADS must be an integer, got {env!r}") from None
    elif args.threads is not None:
        n = args.threads
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return n


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out: Path, subcommand: str, inputs: dict[str, str], options: dict) -> None:
    write_json(out / "manifest.json", {
        "subcommand": subcommand,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "input_sha256": {k: _sha256(Path(v)) for k, v in inputs.items()},
        "options": options,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    })


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def parse_at(text: str | None, names: Sequence[str], default: np.ndarray) -> np.ndarray:
    """Covariate values from ``name=value,...`` or a plain comma list in model order.

    Named values override ``default`` one by one; a plain list must be complete.
    """
    x = np.array(default, dtype=float)
    if not text:
        return x
    items = [s.strip() for s in text.split(",") if s.strip()]
    if all("=" in s for s in items):
        for item in items:
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in names:
                raise UsageError(f"--at: unknown covariate {key!r} (model has {', '.join(names) or 'none'})")
            x[list(names).index(key)] = _number(value, "--at")
        return x
    if any("=" in s for s in items):
        raise UsageError("--at: mix of named and positional values")
    if len(items) != len(names):
        raise UsageError(f"--at: expected {len(names)} values ({', '.join(names)}), got {len(items)}")
    return np.array([_number(v, "--at") for v in items])


def _number(value: str, what: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise UsageError(f"{what}: not a number: {value!r}") from None
    if not np.isfinite(v):
        raise UsageError(f"{what}: value must be finite")
    return v


def _int_list(text: str, what: str) -> list[int]:
    try:
        vals = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{what}: empty list")
    return vals


def _grid(upper: float, step: float) -> np.ndarray:
    if step <= 0:
        raise UsageError("--grid-step must be positive")
    n = int(np.floor(upper / step + 1e-9))
    grid = step * np.arange(n + 1)
    if grid[-1] < upper:
        grid = np.append(grid, upper)
    return grid


# -- subcommands ----------------------------------------------------------------


def cmd_ingest(args) -> int:
    ops = _require_file(args.operations, "operations file")
    line = _require_file(args.line, "line file")
    weather = _require_file(args.weather, "weather file")
    result = ingest(ops, line, weather)
    out = _out_dir(args.out)
    write_rejects(out / "rejects.csv", result.rejects)
    _write_manifest(out, "ingest", {"operations": ops, "line": line, "weather": weather}, {})
    if result.n_runs == 0:
        print("error: no runs parsed", file=sys.stderr)
        return EXIT_INVALID
    if not result.sections:
        print(f"error: all {result.n_runs} runs rejected (see rejects.csv)", file=sys.stderr)
        return EXIT_INVALID
    write_sections(out / "sections.csv", result.sections, result.covariate_names)
    write_panel(out / "panel.csv", result.panel, result.covariate_names)
    n_trains = len({r.train_id for r in result.sections})
    print(f"{n_trains} runs -> {len(result.sections)} sections; {len(result.rejects)} rejects")
    return EXIT_OK


def cmd_fit_cox(args) -> int:
    src = _require_file(args.sections, "sections file")
    records, names = read_sections(src)
    if not records:
        raise UsageError("sections file has no rows")
    data = CoxDataset.from_sections(records, names, layout=args.layout)
    if not args.stratified:
        data = data.unstratified()
    try:
        fit = fit_cox(data, max_iter=args.max_iter, ridge=args.ridge)
    except SingularInformationError as exc:
        raise UsageError(f"{exc} (use --ridge)") from None
    x = parse_at(args.at, names, data.X.mean(axis=0))
    strata = [1] if not args.stratified else _int_list(args.strata, "--strata")
    curves = []
    for j in strata:
        if j not in fit.baseline:
            logger.warning("stratum %d has no events; no survival curve", j)
            continue
        upper = args.grid_max if args.grid_max is not None else float(fit.baseline[j].x[-1])
        curves.append(predict_survival(fit, x, j, _grid(upper, args.grid_step)))
    out = _out_dir(args.out)
    write_json(out / "cox_fit.json", {**fit.to_dict(), "summary": fit.summary()})
    write_cox_table(out / "cox_table.csv", fit)
    write_survival_curves(out / "survival_curve.csv", curves)
    _write_manifest(out, "fit-cox", {"sections": src}, {
        "stratified": args.stratified, "layout": args.layout, "at": x.tolist(), "strata": strata,
        "grid_step": args.grid_step, "grid_max": args.grid_max, "ridge": args.ridge, "max_iter": args.max_iter,
    })
    print(f"cox: loglik {fit.loglik:.6g}, {fit.iterations} iterations, {data.n_events} events")
    if not fit.converged:
        print("error: Newton-Raphson did not converge", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_fit_ctmc(args) -> int:
    src = _require_file(args.panel, "panel file")
    paths, names = read_panel(src)
    if not paths:
        raise UsageError("panel file has no rows")
    if args.split_covariates and args.changepoint is None:
        raise UsageError("--split-covariates needs --changepoint")
    q = max(int(p.states.max()) for p in paths) if args.states is None else args.states
    q = max(q, 2)
    transitions = tuple((r, s) for r in range(1, q + 1) for s in range(1, q + 1) if r != s)
    spec = IntensitySpec(q, transitions, tuple(names), args.changepoint, args.split_covariates)
    fit = fit_ctmc(paths, spec, max_iter=args.max_iter, n_threads=_threads(args))
    X = np.vstack([p.covariates for p in paths])
    x = parse_at(args.at, names, X.mean(axis=0))
    upper = args.grid_max if args.grid_max is not None else max(float(p.distances[-1]) for p in paths)
    grid = _grid(upper, args.grid_step)
    probs = evolution_probabilities(fit, x, grid, initial_state=args.initial)
    out = _out_dir(args.out)
    write_json(out / "ctmc_fit.json", fit.to_dict())
    write_ctmc_tables(out / "ctmc_tables.csv", fit)
    write_evolution(out / "evolution.csv", grid, probs)
    _write_manifest(out, "fit-ctmc", {"panel": src}, {
        "changepoint": args.changepoint, "split_covariates": args.split_covariates, "states": q,
        "at": x.tolist(), "initial": args.initial, "grid_step": args.grid_step, "grid_max": args.grid_max,
        "max_iter": args.max_iter,
    })
    print(f"ctmc: loglik {fit.loglik:.6g}, {fit.n_iter} iterations, {fit.n_intervals} intervals")
    if not fit.converged:
        print(f"error: optimizer did not converge ({fit.message})", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_lrt(args) -> int:
    import json

    res = lr_test(args.ll_simple, args.ll_complex, args.df)
    print(json.dumps(res.to_dict()))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg_path = _require_file(args.config, "config file")
    config = SimConfig.from_json(cfg_path)
    if args.seed is not None:
        config.seed = args.seed
    out = _out_dir(args.out)
    names = config.covariate_names
    if args.model == "cox":
        write_sections(out / "sections.csv", simulate_cox_sections(config), names)
    else:
        write_panel(out / "panel.csv", panel_rows_from_paths(simulate_ctmc(config)), names)
    _write_manifest(out, f"simulate {args.model}", {"config": cfg_path}, {"seed": config.seed})
    return EXIT_OK


def cmd_predict_survival(args) -> int:
    src = _require_file(args.fit, "fit file")
    fit = CoxFit.from_dict(read_json(src))
    x = parse_at(args.at, fit.covariate_names, np.zeros(fit.beta.size))
    curves = []
    for j in _int_list(args.strata, "--strata"):
        upper = args.grid_max
        if upper is None:
            upper = float(fit.baseline[j].x[-1]) if j in fit.baseline else 0.0
        curves.append(predict_survival(fit, x, j, _grid(upper, args.grid_step)))
    out = _out_dir(args.out)
    write_survival_curves(out / "survival_curve.csv", curves)
    _write_manifest(out, "predict-survival", {"fit": src}, {
        "at": x.tolist(), "strata": args.strata, "grid_step": args.grid_step, "grid_max": args.grid_max,
    })
    return EXIT_OK


def cmd_predict_evolution(args) -> int:
    src = _require_file(args.fit, "fit file")
    fit = CtmcFit.from_dict(read_json(src))
    x = parse_at(args.at, fit.spec.covariate_names, np.zeros(fit.spec.n_covariates))
    grid = _grid(args.grid_max, args.grid_step)
    probs = evolution_probabilities(fit, x, grid, initial_state=args.initial)
    out = _out_dir(args.out)
    write_evolution(out / "evolution.csv", grid, probs)
    _write_manifest(out, "predict-evolution", {"fit": src}, {
        "at": x.tolist(), "initial": args.initial, "grid_step": args.grid_step, "grid_max": args.grid_max,
    })
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="railhaz",
        description="Delay hazard models for train operations: ingest, Cox and CTMC fits, LR tests, simulation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for likelihood evaluation (default: all cores; RAILHAZ_THREADS overrides)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("ingest", help="operations + line + weather -> sections.csv, panel.csv, rejects.csv")
    p.add_argument("--operations", required=True)
    p.add_argument("--line", required=True)
    p.add_argument("--weather", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    at_help = "covariate values, 'name=value,...' or a full comma list (default: sample means)"

    p = sub.add_parser("fit-cox", help="stratified Cox model on sections.csv")
    p.add_argument("--sections", required=True)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--stratified", dest="stratified", action="store_true", default=True)
    g.add_argument("--unstratified", dest="stratified", action="store_false")
    p.add_argument("--layout", choices=("gap", "calendar"), default="gap",
                   help="clock for the risk sets (default: distance since previous event)")
    p.add_argument("--at", help=at_help)
    p.add_argument("--strata", default="1,2", help="event orders to draw survival curves for (default: 1,2)")
    p.add_argument("--grid-step", type=float, default=1.0)
    p.add_argument("--grid-max", type=float, default=None)
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--max-iter", type=int, default=100)
    p.set_defaults(func=cmd_fit_cox)

    p = sub.add_parser("fit-ctmc", help="panel-data CTMC on panel.csv")
    p.add_argument("--panel", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--changepoint", type=float, default=None, help="distance (km) where intensities may shift")
    p.add_argument("--split-covariates", action="store_true",
                   help="separate covariate effects after the changepoint")
    p.add_argument("--states", type=int, default=None, help="number of states (default: largest observed)")
    p.add_argument("--at", help=at_help)
    p.add_argument("--initial", type=int, default=1, help="initial state for evolution.csv")
    p.add_argument("--grid-step", type=float, default=1.0)
    p.add_argument("--grid-max", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=500)
    p.set_defaults(func=cmd_fit_ctmc)

    p = sub.add_parser("lrt", help="likelihood ratio test of nested fits (JSON on stdout)")
    p.add_argument("--ll-simple", type=float, required=True)
    p.add_argument("--ll-complex", type=float, required=True)
    p.add_argument("--df", type=int, required=True)
    p.set_defaults(func=cmd_lrt)

    p = sub.add_parser("simulate", help="synthetic sections.csv (cox) or panel.csv (ctmc)")
    p.add_argument("model", choices=("cox", "ctmc"))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict-survival", help="survival curves from cox_fit.json")
    p.add_argument("--fit", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--at", help="covariate values (default: zeros)")
    p.add_argument("--strata", default="1,2")
    p.add_argument("--grid-step", type=float, default=1.0)
    p.add_argument("--grid-max", type=float, default=None)
    p.set_defaults(func=cmd_predict_survival)

    p = sub.add_parser("predict-evolution", help="state probabilities along the line from ctmc_fit.json")
    p.add_argument("--fit", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--at", help="covariate values (default: zeros)")
    p.add_argument("--initial", type=int, default=1)
    p.add_argument("--grid-step", type=float, default=1.0)
    p.add_argument("--grid-max", type=float, required=True)
    p.set_defaults(func=cmd_predict_evolution)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        if getattr(args, "threads", None) is not None or "RAILHAZ_THREADS" in os.environ:
            _threads(args)
        return args.func(args)
    except (RailhazError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # pragma: no cover - reported, not hidden
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
