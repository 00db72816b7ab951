"""Command-line front end: ``fit``, ``ape``, ``simulate`` and ``oracle-check``.

Every command prints one JSON document (``"schema": 1``) that includes the
resolved configuration, so a run can be repeated exactly.  Failures are
reported as a JSON error document on stderr with a distinct exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .ape import analyze_ape, effect_from_string, estimate_ape
from .bias import analytic_correction, beta_confidence_interval
from .estimator import FitOptions, Params, fit_ife
from .exceptions import ConvergenceError, DomainError, IFEError, PanelError
from .families import family_from_string
from .hessian import build_hessian
from .jackknife import jackknife_ape, jackknife_beta, jackknife_fits, make_split_plan
from .oracle import compare_with_ife
from .panel import drop_uninformative, load_panel
from .simulation import DgpSpec, ESTIMATORS, render_tables, run_mc

SCHEMA = 1
WORKERS_ENV = "IFEPANEL_WORKERS"

EXIT_OK = 0
EXIT_USAGE = 2        # argparse: unknown flag, bad value
EXIT_CONFLICT = 3     # flags that cannot be combined
EXIT_IO = 4           # unreadable input, unwritable output
EXIT_DATA = 5         # malformed panel or outcome outside the family's support
EXIT_ESTIMATION = 6   # numerical failure during estimation

STANDARD_GRID = ((10, 10), (25, 10), (25, 25), (50, 10), (50, 25), (50, 50))


class ConflictError(Exception):
    pass


class _IOError(Exception):
    pass


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _dump(doc: Dict[str, Any]) -> str:
    return json.dumps(_jsonable(doc), indent=2, sort_keys=False, allow_nan=False) + "\n"


def _parse_columns(text: Optional[str]) -> Optional[dict]:
    """``unit=id,time=t,y=out,x=a;b`` -> schema mapping (regressors separated by ``;``)."""
    if not text:
        return None
    schema: Dict[str, Any] = {}
    for part in text.split(","):
        key, sep, val = part.partition("=")
        key = key.strip()
        if not sep or key not in ("unit", "time", "y", "x") or key in schema:
            raise ConflictError(f"cannot parse --columns entry {part!r}; expected unit=,time=,y=,x=a;b")
        schema[key] = [v.strip() for v in val.split(";") if v.strip()] if key == "x" else val.strip()
    return schema


def _read_panel(args):
    schema = _parse_columns(getattr(args, "columns", None))
    try:
        with open(args.data, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise _IOError(f"cannot read {args.data}: {exc.strerror or exc}") from None
    return load_panel(raw, schema)


def _options(args) -> FitOptions:
    return FitOptions(tol=args.tol, max_outer_iters=args.max_iters, grad_tol=args.grad_tol)


def _prepare(args):
    panel = _read_panel(args)
    family = family_from_string(args.model)
    info = {"n_units_dropped": 0, "n_periods_dropped": 0}
    if args.drop_constant:
        tr = drop_uninformative(panel)
        panel = tr.panel
        info = {"n_units_dropped": tr.n_units_dropped, "n_periods_dropped": tr.n_periods_dropped}
    N, T, K = panel.shape
    info.update(N=N, T=T, K=K)
    return panel, family, info


def _check_correction_flags(args, allow_none_level=False):
    c = args.correct
    if args.trim is not None and c != "analytic":
        raise ConflictError(f"--trim applies only to --correct analytic (got --correct {c})")
    if args.exogenous and c != "analytic":
        raise ConflictError(f"--exogenous applies only to --correct analytic (got --correct {c})")
    if (args.splits is not None or args.seed is not None) and c != "jackknife":
        raise ConflictError(f"--splits/--seed apply only to --correct jackknife (got --correct {c})")
    if args.skip_failed_splits and c != "jackknife":
        raise ConflictError("--skip-failed-splits applies only to --correct jackknife")
    if args.level is not None and c == "none" and not allow_none_level:
        raise ConflictError("--level needs a correction (--correct analytic or jackknife)")
    if args.trim is not None and args.trim < 0:
        raise ConflictError("--trim must be non-negative")
    if args.splits is not None and args.splits < 1:
        raise ConflictError("--splits must be at least 1")


def _resolved(args, skip=("func", "command")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _require_converged(fit, wanted: bool, doc: dict) -> None:
    if fit.converged:
        return
    msg = (f"the full-panel fit did not converge after {fit.outer_iterations} iterations; "
           "for binary outcomes the maximum likelihood estimate may not exist (try --drop-constant)")
    if wanted:
        raise ConvergenceError(msg)
    doc.setdefault("warnings", []).append(msg)


def _lags(args) -> int:
    """Resolved trimming ``L``: explicit ``--trim``, else 0 for exogenous regressors and 1 otherwise."""
    if args.trim is None:
        args.trim = 0 if args.exogenous else 1
    return args.trim


def _fit_with_restarts(panel, family, opts, args):
    fit = fit_ife(panel, family, opts)
    if not args.restarts:
        return fit
    rng = np.random.default_rng(args.restart_seed)
    N, T, K = panel.shape
    scale = max(float(np.sqrt(np.mean(fit.alpha ** 2))), 0.1)
    for _ in range(args.restarts):
        init = Params(fit.beta + rng.standard_normal(K) * 0.1, scale * rng.standard_normal(N),
                      scale * rng.standard_normal(T))
        try:
            cand = fit_ife(panel, family, opts, init=init)
        except (IFEError, ArithmeticError):
            continue
        if cand.converged and (not fit.converged or cand.loglik > fit.loglik + 1e-12):
            fit = cand
    return fit


def _cmd_fit(args) -> dict:
    _check_correction_flags(args)
    panel, family, info = _prepare(args)
    N, T, K = panel.shape
    if args.correct != "none" and K == 0:
        raise ConflictError("coefficient corrections need at least one regressor")
    opts = _options(args)
    fit = _fit_with_restarts(panel, family, opts, args)
    doc: Dict[str, Any] = {"panel": info, "family": family.spec_string(), "fit": fit.to_dict()}
    _require_converged(fit, args.correct != "none" or args.dump_hessian_spectrum, doc)
    level = 0.95 if args.level is None else args.level
    if args.correct == "analytic":
        doc["correction"] = dict(method="analytic", **analytic_correction(
            panel, family, fit, L=_lags(args), level=level).to_dict())
    elif args.correct == "jackknife":
        plan = make_split_plan(N, T, args.splits or 20, 0 if args.seed is None else args.seed)
        fits = jackknife_fits(panel, family, plan, opts, fit=fit, trim=args.drop_constant,
                              skip_failed=args.skip_failed_splits)
        bj = jackknife_beta(panel, family, fits=fits)
        W = analytic_correction(panel, family, fit, level=level).W_hat
        lo, hi = beta_confidence_interval(bj, W, N, T, level)
        doc["correction"] = {
            "method": "jackknife", "beta_hat": fit.beta, "beta_corrected": bj,
            "n_partitions": plan.n_partitions, "partitions_enumerated": plan.enumerated,
            "partitions_used": len(fits.unit_halves), "skipped": fits.skipped,
            "level": level, "ci_lower": lo, "ci_upper": hi,
        }
    if args.dump_hessian_spectrum:
        doc["hessian_spectrum"] = build_hessian(panel, family, fit).spectrum()
    return doc


def _cmd_ape(args) -> dict:
    _check_correction_flags(args, allow_none_level=True)
    panel, family, info = _prepare(args)
    N, T, K = panel.shape
    spec = effect_from_string(args.effect)
    if getattr(spec, "k", -1) >= K:
        raise ConflictError(f"--effect {args.effect} refers to regressor {spec.k + 1} but the panel has K={K}")
    opts = _options(args)
    fit = _fit_with_restarts(panel, family, opts, args)
    level = 0.95 if args.level is None else args.level
    doc: Dict[str, Any] = {"panel": info, "family": family.spec_string(), "fit": fit.to_dict()}
    _require_converged(fit, True, doc)
    if args.correct == "analytic":
        rep = analyze_ape(panel, family, fit, spec, L=_lags(args), level=level, options=opts)
        doc["ape"] = dict(method="analytic", **rep.to_dict())
    elif args.correct == "jackknife":
        plan = make_split_plan(N, T, args.splits or 20, 0 if args.seed is None else args.seed)
        fits = jackknife_fits(panel, family, plan, opts, fit=fit, trim=args.drop_constant,
                              skip_failed=args.skip_failed_splits)
        d_hat, _ = estimate_ape(panel, family, spec, fit.beta, fit)
        doc["ape"] = {
            "method": "jackknife", "effect": spec.describe(), "delta_hat": d_hat,
            "delta_corrected": jackknife_ape(panel, family, spec, fits=fits),
            "n_partitions": plan.n_partitions, "partitions_enumerated": plan.enumerated,
            "partitions_used": len(fits.unit_halves), "skipped": fits.skipped,
        }
    else:
        rep = analyze_ape(panel, family, fit, spec, level=level, correct_beta=False, options=opts)
        z = stats.norm.ppf(0.5 + level / 2)
        doc["ape"] = {"method": "none", "effect": rep.effect, "delta_hat": rep.delta_hat, "se": rep.se,
                      "level": level, "ci": [rep.delta_hat - z * rep.se, rep.delta_hat + z * rep.se]}
    return doc


def _cmd_oracle(args) -> dict:
    panel = _read_panel(args)
    opts = _options(args)
    cmp = compare_with_ife(panel, args.sigma, opts)
    out = cmp.to_dict()
    out["within_tolerance"] = cmp.max_product_diff <= 1e-6 and cmp.delta_diff <= 1e-8
    return {"panel": {"N": panel.n_units, "T": panel.n_periods, "K": panel.n_regressors}, "oracle": out}


SIM_KEYS = ("dgp", "N", "T", "grid", "reps", "seed", "delta0", "beta0", "effect_law", "fixed_effects",
            "estimators", "splits", "level", "workers", "no_trim", "out", "mc_dispersion", "records")


def _grid(args) -> List[tuple]:
    if args.grid:
        if args.N is not None or args.T is not None:
            raise ConflictError("use either --grid or --N/--T")
        if args.grid == "standard":
            return list(STANDARD_GRID)
        cells = []
        for cell in args.grid.split(","):
            try:
                n, t = (int(v) for v in cell.lower().split("x"))
            except ValueError:
                raise ConflictError(f"cannot parse grid cell {cell!r}; expected NxT") from None
            cells.append((n, t))
        return cells
    if args.N is None or args.T is None:
        raise ConflictError("simulate needs --N and --T (or --grid)")
    return [(args.N, args.T)]


def _cmd_simulate(args) -> dict:
    kind = args.dgp.replace("-", "_")
    if kind != "linear_nonreg" and args.delta0 is not None:
        raise ConflictError("--delta0 applies only to --dgp linear-nonreg")
    if kind == "linear_nonreg" and args.beta0 is not None:
        raise ConflictError("--beta0 does not apply to --dgp linear-nonreg")
    ests = tuple(args.estimators.split(","))
    if args.workers is None:
        args.workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    workers = args.workers
    results = []
    for n, t in _grid(args):
        spec = DgpSpec(kind, n, t, delta0=args.delta0 or 1.0,
                       beta0=tuple(args.beta0) if args.beta0 else (1.0,),
                       effect_law=args.effect_law, seed=args.seed, fixed_effects=args.fixed_effects)
        results.append(run_mc(spec, args.reps, ests, args.level, args.splits, workers,
                              trim=False if args.no_trim else None, keep_records=args.records))
    tables = render_tables(results, mc_dispersion=args.mc_dispersion)
    doc = {
        "results": [r.to_dict(include_records=args.records) for r in results],
        "tables": {"table1_csv": tables.table1_csv, "table2_csv": tables.table2_csv},
    }
    if args.out:
        out = Path(args.out)
        stem = out.with_suffix("")
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(tables.table1_csv, encoding="utf-8")
            Path(f"{stem}_coverage.csv").write_text(tables.table2_csv, encoding="utf-8")
        except OSError as exc:
            raise _IOError(f"cannot write {out}: {exc.strerror or exc}") from None
        doc["files"] = [str(out), f"{stem}_coverage.csv"]
    return doc


def _common_fit_flags(p: argparse.ArgumentParser, model_required=True):
    p.add_argument("--data", required=True, help="long-format CSV (unit,time,y,x1..xK)")
    p.add_argument("--columns", help="column mapping, e.g. unit=id,time=year,y=out,x=a;b")
    if model_required:
        p.add_argument("--model", required=True, help="linear[:sigma=v] | probit | logit | poisson")
    p.add_argument("--tol", type=float, default=FitOptions.tol, help="objective-increase tolerance")
    p.add_argument("--grad-tol", type=float, default=FitOptions.grad_tol, help="stationarity tolerance")
    p.add_argument("--max-iters", type=int, default=FitOptions.max_outer_iters)
    if model_required:
        p.add_argument("--restarts", type=int, default=0,
                       help="extra fits from random starts; the highest converged objective wins")
        p.add_argument("--restart-seed", type=int, default=0)


def _correction_flags(p: argparse.ArgumentParser, default: str):
    p.add_argument("--correct", choices=("analytic", "jackknife", "none"), default=default)
    p.add_argument("--trim", type=int, default=None,
                   help="lags L in the time-series bias term (analytic; default 0 with --exogenous, else 1)")
    p.add_argument("--exogenous", action="store_true", help="regressors are strictly exogenous (sets L=0)")
    p.add_argument("--level", type=float, default=None, help="confidence level (default 0.95)")
    p.add_argument("--splits", type=int, default=None, help="unit partitions for the jackknife (default 20)")
    p.add_argument("--seed", type=int, default=None, help="seed for drawing jackknife partitions (default 0)")
    p.add_argument("--skip-failed-splits", action="store_true",
                   help="jackknife: drop unit partitions whose subpanel fits fail")
    p.add_argument("--drop-constant", action="store_true",
                   help="drop units and periods whose outcome never varies (also inside jackknife subpanels)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ifepanel", description="Interactive fixed effects panel estimation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    ap.add_argument("-o", "--output", help="write the JSON document here instead of stdout")
    # the same two flags are also accepted after the subcommand
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    shared.add_argument("-o", "--output", default=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[shared], help="estimate coefficients and effects")
    _common_fit_flags(p)
    _correction_flags(p, "none")
    p.add_argument("--dump-hessian-spectrum", action="store_true",
                   help="include the eigenvalues of the incidental-parameter Hessian")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("ape", parents=[shared], help="average partial effect with bias correction")
    _common_fit_flags(p)
    p.add_argument("--effect", required=True, help="binary:k=j | deriv:k=j | variance")
    _correction_flags(p, "analytic")
    p.set_defaults(func=_cmd_ape)

    p = sub.add_parser("oracle-check", parents=[shared],
                       help="compare the estimator with a rank-1 SVD (Gaussian, no regressors)")
    _common_fit_flags(p, model_required=False)
    p.add_argument("--sigma", type=float, default=1.0)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("simulate", parents=[shared], help="Monte Carlo study")
    p.add_argument("--config", help="JSON file with any of the simulate options; flags given explicitly win")
    p.add_argument("--dgp", default="linear-nonreg",
                   choices=("linear-nonreg", "probit-static", "linear-static", "poisson-static"))
    p.add_argument("--N", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--grid", help="'standard' (N, T in 10, 25, 50 with T <= N) or a list such as 10x10,25x10")
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta0", type=float, default=None)
    p.add_argument("--beta0", type=float, nargs="+", default=None)
    p.add_argument("--effect-law", default="default", help="normal | uniform:a,b | default")
    p.add_argument("--fixed-effects", action="store_true", help="draw the effects once for all replications")
    p.add_argument("--estimators", default=",".join(ESTIMATORS))
    p.add_argument("--splits", type=int, default=1)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--workers", type=int, default=None, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    p.add_argument("--no-trim", action="store_true", help="keep constant units/periods in binary designs")
    p.add_argument("--out",
                   help="CSV path for the bias and dispersion table; the coverage table goes to <stem>_coverage.csv")
    p.add_argument("--mc-dispersion", action="store_true",
                   help="add Monte Carlo sd rows to the bias and dispersion table")
    p.add_argument("--records", action="store_true", help="include per-replication records in the JSON")
    p.set_defaults(func=_cmd_simulate)
    ap.simulate_parser = p
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv: Sequence[str], args):
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise _IOError(f"cannot read {args.config}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConflictError(f"{args.config} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConflictError("the config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = set(cfg) - set(SIM_KEYS)
    if unknown:
        raise ConflictError(f"unknown config keys {sorted(unknown)}")
    if isinstance(cfg.get("estimators"), list):
        cfg["estimators"] = ",".join(cfg["estimators"])
    ap.simulate_parser.set_defaults(**cfg)
    return ap.parse_args(argv)


def _error(code: int, exc: BaseException, stream) -> int:
    stream.write(_dump({"schema": SCHEMA, "error": {"type": type(exc).__name__, "message": str(exc),
                                                    "exit_code": code}}))
    return code


def main(argv: Optional[Sequence[str]] = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.verbose == 0 else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=stderr)
    if args.verbose == 0:
        logging.getLogger("ifepanel").setLevel(logging.ERROR)
    try:
        if getattr(args, "config", None):
            args = _apply_config(ap, argv, args)
        result = args.func(args)
        doc = {"schema": SCHEMA, "command": args.command, "version": __version__,
               "config": _resolved(args, skip=("func", "command", "output", "verbose")), **result}
        text = _dump(doc)
        if args.output:
            try:
                Path(args.output).write_text(text, encoding="utf-8")
            except OSError as exc:
                raise _IOError(f"cannot write {args.output}: {exc.strerror or exc}") from None
        else:
            stdout.write(text)
        return EXIT_OK
    except ConflictError as exc:
        return _error(EXIT_CONFLICT, exc, stderr)
    except _IOError as exc:
        return _error(EXIT_IO, exc, stderr)
    except (PanelError, DomainError) as exc:
        return _error(EXIT_DATA, exc, stderr)
    except (IFEError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        return _error(EXIT_ESTIMATION, exc, stderr)
    except ValueError as exc:
        # remaining value errors come from flag contents (family names, effect strings, levels)
        return _error(EXIT_CONFLICT, exc, stderr)


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
