"""Command-line interface: ``alqr analyze | simulate | sensitivity``.

Exit codes: 0 success, 2 input/schema/configuration error, 3 numerical
failure. Errors are also written to stderr as a JSON record. JSON reports
carry ``"schema_version": 1`` and are serialized with sorted keys, so
identical requests produce byte-identical files.

``--threads`` sets the number of worker processes; the environment variable
``ALQR_THREADS`` overrides it. Numeric output never depends on it: every
unit of work is computed with single-threaded BLAS and results are ordered
by (estimator, tau) or replication before being written.
"""

import argparse
import csv
import io
import json
import math
import multiprocessing as mp
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ._rng import derive_seed
from .core import Estimator, EstimatorConfig, validate_dataset
from .engine import fit_nuisance_models, fold_plan_for
from .estimator import estimate, estimate_from_models
from .exceptions import AlqrError, ConfigError, SchemaError
from .simulation import MC_ESTIMATORS, DgpSpec, McSettings, run_monte_carlo

SCHEMA_VERSION = 1
EXAMPLE_INPUT = "@example"
ESTIMATOR_CHOICES = [e.value for e in Estimator]


# ---------------------------------------------------------------------------
# CSV ingestion


def example_csv_path():
    """Path of the bundled 40-row example (binary exposure ``A``, outcome
    ``Y``, covariates ``L1``-``L4``)."""
    return Path(str(resources.files("alqr") / "data" / "example_binary.csv"))


def read_table(path):
    """Read a headed, UTF-8, comma-separated file into (header, rows)."""
    if str(path) == EXAMPLE_INPUT:
        path = example_csv_path()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise SchemaError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names in header")
    body = rows[1:]
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}: line {i} has {len(row)} fields, header has {len(header)}")
    if not body:
        raise SchemaError(f"{path}: no data rows")
    return header, body


def numeric_column(header, body, name):
    """Parse one column as finite floats; errors name the line and column."""
    j = header.index(name)
    out = np.empty(len(body))
    for i, row in enumerate(body):
        cell = row[j].strip()
        line = i + 2
        if cell == "":
            raise SchemaError(f"missing value at line {line}, column {name!r}")
        try:
            value = float(cell)
        except ValueError:
            raise SchemaError(f"non-numeric value {cell!r} at line {line}, column {name!r}") from None
        if not math.isfinite(value):
            raise SchemaError(f"non-finite value {cell!r} at line {line}, column {name!r}")
        out[i] = value
    return out


def load_dataset(path, outcome, exposure, covariates=None, weights=None, exposure_kind="auto"):
    """Build a validated dataset from a CSV file and column roles.

    Without ``covariates`` every column not assigned a role is a covariate.
    ``exposure_kind="auto"`` treats an exposure with only 0/1 values as binary.
    """
    header, body = read_table(path)
    roles = [outcome, exposure] + ([weights] if weights else [])
    if covariates is None:
        covariates = [h for h in header if h not in roles]
    named = roles + list(covariates)
    missing = [c for c in named if c not in header]
    if missing:
        raise SchemaError(f"column(s) not found in header: {', '.join(missing)}")
    if len(set(named)) != len(named):
        raise SchemaError("outcome, exposure, weights and covariate columns must be distinct")
    y = numeric_column(header, body, outcome)
    a = numeric_column(header, body, exposure)
    w = numeric_column(header, body, weights) if weights else None
    L = np.column_stack([numeric_column(header, body, c) for c in covariates]) if covariates else None
    if exposure_kind == "auto":
        exposure_kind = "binary" if np.all((a == 0) | (a == 1)) else "continuous"
    return validate_dataset(y, a, L, exposure_kind, w), list(covariates)


# ---------------------------------------------------------------------------
# helpers


def _floats(text):
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def resolve_threads(threads):
    env = os.environ.get("ALQR_THREADS")
    value = env if env not in (None, "") else threads
    try:
        value = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"thread count must be an integer, got {value!r}") from None
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return value


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _error_record(exc):
    code = exc.exit_code if isinstance(exc, AlqrError) else 2
    return {"type": type(exc).__name__, "message": str(exc), "exit_code": code}


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _csv_text(columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _output_format(args):
    if args.format:
        return args.format
    return "csv" if args.out and str(args.out).lower().endswith(".csv") else "json"


# ---------------------------------------------------------------------------
# analyze


def _config_from_args(args, tau, seed=None, folds=None):
    return EstimatorConfig(
        tau=tau, estimator=args.estimator, folds=args.folds if folds is None else folds,
        seed=args.seed if seed is None else seed, link=args.link, tmle_mode=args.tmle_mode,
        num_trees=args.num_trees, min_leaf=args.min_leaf, mean_learner=args.mean_learner,
    )


def _tau_result(tau, fn):
    try:
        out = fn()
    except AlqrError as exc:
        return {"tau": float(tau), "status": "error", "error": _error_record(exc)}
    return {"tau": float(tau), "status": "ok", "output": out.to_dict()}


def _analyze_one(payload):
    dataset, config = payload
    with threadpool_limits(limits=1):
        return _tau_result(config.tau, lambda: estimate(dataset, config))


def analyze_dataset(dataset, base_config, taus, threads=1):
    """Estimate at every ``tau``; one result record per ``tau`` (in input order).

    With one worker the forest learners, which do not depend on ``tau``, are
    fitted once and shared; with several workers each ``tau`` is estimated
    independently. Both paths give the same numbers.
    """
    configs = [base_config.with_(tau=t) for t in taus]
    if threads > 1 and len(configs) > 1:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(threads, len(configs)), mp_context=ctx) as pool:
            return list(pool.map(_analyze_one, [(dataset, c) for c in configs]))
    with threadpool_limits(limits=1):
        if base_config.estimator.uses_selection:
            return [_tau_result(c.tau, lambda c=c: estimate(dataset, c)) for c in configs]
        try:
            models = fit_nuisance_models(dataset, configs[0], fold_plan_for(dataset, configs[0]))
        except AlqrError as exc:
            return [{"tau": float(c.tau), "status": "error", "error": _error_record(exc)} for c in configs]
        return [_tau_result(c.tau, lambda c=c: estimate_from_models(dataset, c, models)) for c in configs]


def _request_record(args, covariates):
    return {
        "input": str(args.input), "outcome": args.outcome, "exposure": args.exposure, "covariates": covariates,
        "weights": args.weights, "tau": _floats(args.tau), "estimator": args.estimator, "folds": args.folds,
        "seed": args.seed, "link": args.link, "tmle_mode": args.tmle_mode, "num_trees": args.num_trees,
        "min_leaf": args.min_leaf, "mean_learner": args.mean_learner,
    }


def _exit_code(results):
    codes = [r["error"]["exit_code"] for r in results if r["status"] == "error"]
    return max(codes) if codes else 0


ANALYZE_COLUMNS = ["tau", "estimator", "status", "psi_hat", "se", "ci_low", "ci_high", "error"]


def _flat(result, **extra):
    row = dict(extra)
    row["tau"] = result["tau"]
    row["status"] = result["status"]
    if result["status"] == "ok":
        out = result["output"]
        row.update({k: out[k] for k in ("estimator", "psi_hat", "se", "ci_low", "ci_high")})
    else:
        row["error"] = f"{result['error']['type']}: {result['error']['message']}"
    return row


def cmd_analyze(args):
    dataset, covariates = load_dataset(args.input, args.outcome, args.exposure, _split(args.covariates),
                                       args.weights, args.exposure_kind)
    taus = _floats(args.tau)
    if not taus:
        raise ConfigError("at least one tau is required")
    base = _config_from_args(args, taus[0])
    results = analyze_dataset(dataset, base, taus, resolve_threads(args.threads))
    code = _exit_code(results)
    if _output_format(args) == "csv":
        rows = [_flat(r, estimator=base.estimator.value) for r in results]
        _write(args.out, _csv_text(ANALYZE_COLUMNS, rows))
    else:
        report = {"schema_version": SCHEMA_VERSION, "command": "analyze", "n": dataset.n,
                  "exposure_kind": "binary" if dataset.is_binary else "continuous",
                  "request": _request_record(args, covariates), "results": results, "partial": code != 0}
        _write(args.out, _dumps(report))
    return code


def _split(text):
    if text is None:
        return None
    return [c.strip() for c in text.split(",") if c.strip()]


# ---------------------------------------------------------------------------
# sensitivity


SENSITIVITY_COLUMNS = ["folds", "run", "seed", "tau", "estimator", "status", "psi_hat", "se", "ci_low", "ci_high",
                       "error"]


def cmd_sensitivity(args):
    if args.repeat < 2:
        raise ConfigError(f"--repeat must be >= 2, got {args.repeat}")
    fold_counts = _ints(args.folds)
    if not fold_counts:
        raise ConfigError("at least one fold count is required")
    dataset, covariates = load_dataset(args.input, args.outcome, args.exposure, _split(args.covariates),
                                       args.weights, args.exposure_kind)
    taus = _floats(args.tau)
    if not taus:
        raise ConfigError("at least one tau is required")
    threads = resolve_threads(args.threads)
    runs = []
    code = 0
    for k in fold_counts:
        for r in range(args.repeat):
            seed = derive_seed(args.seed, r)
            base = _config_from_args(args, taus[0], seed=seed, folds=k)
            results = analyze_dataset(dataset, base, taus, threads)
            code = max(code, _exit_code(results))
            runs.extend(_flat(res, folds=k, run=r, seed=seed, estimator=base.estimator.value) for res in results)
    dispersion = []
    for k in fold_counts:
        for t in taus:
            vals = np.array([x["psi_hat"] for x in runs if x["folds"] == k and x["tau"] == t and x["status"] == "ok"])
            dispersion.append({
                "folds": k, "tau": t, "n_ok": int(vals.size),
                "mean_psi_hat": float(vals.mean()) if vals.size else None,
                "sd_psi_hat": float(vals.std(ddof=1)) if vals.size > 1 else None,
                "range_psi_hat": float(vals.max() - vals.min()) if vals.size else None,
            })
    if _output_format(args) == "csv":
        _write(args.out, _csv_text(SENSITIVITY_COLUMNS, runs))
    else:
        req = _request_record(args, covariates)
        req.update({"folds": fold_counts, "repeat": args.repeat})
        report = {"schema_version": SCHEMA_VERSION, "command": "sensitivity", "request": req, "runs": runs,
                  "dispersion": dispersion}
        _write(args.out, _dumps(report))
    return code


# ---------------------------------------------------------------------------
# simulate


SIMULATE_COLUMNS = ["estimator", "tau", "truth", "bias", "mc_sd", "mean_se", "coverage_95", "n_reps", "n_failures",
                    "degenerate_moments"]


def cmd_simulate(args):
    spec = DgpSpec(args.experiment, args.n)
    estimators = _split(args.estimators) or []
    if not estimators:
        raise ConfigError("at least one estimator is required")
    taus = _floats(args.tau)
    if not taus or not all(0.0 < t < 1.0 for t in taus):
        raise ConfigError(f"tau values must lie in (0, 1), got {args.tau!r}")
    if args.reps < 1:
        raise ConfigError(f"--reps must be >= 1, got {args.reps}")
    settings = McSettings(folds=args.folds, num_trees=args.num_trees, mean_learner=args.mean_learner)
    summary = run_monte_carlo(spec, estimators, taus, args.reps, args.seed, resolve_threads(args.threads), settings)
    rows = sorted((dict(vars(r)) for r in summary.rows), key=lambda r: (r["estimator"], r["tau"]))
    if any(r["degenerate_moments"] for r in rows):
        sys.stderr.write("warning: fewer than two successful replications for some rows; their SD is reported as 0\n")
    table = _csv_text(SIMULATE_COLUMNS, rows)
    report = {"schema_version": SCHEMA_VERSION, "command": "simulate",
              "request": {"experiment": spec.id.value, "n": spec.n, "reps": args.reps, "estimators": estimators,
                          "tau": taus, "seed": args.seed, "folds": args.folds, "num_trees": args.num_trees,
                          "mean_learner": args.mean_learner},
              "rows": rows}
    if args.out in (None, "-"):
        sys.stdout.write(table)
    else:
        out = Path(args.out)
        if out.suffix.lower() == ".json":
            out.write_text(_dumps(report), encoding="utf-8")
            out.with_suffix(".csv").write_text(table, encoding="utf-8")
        else:
            out.write_text(table, encoding="utf-8")
            out.with_suffix(".json").write_text(_dumps(report), encoding="utf-8")
        sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--threads", default=1, help="worker processes (ALQR_THREADS overrides)")


def _add_analysis(p, folds_default, folds_help):
    p.add_argument("--input", required=True, help=f"CSV file, or {EXAMPLE_INPUT} for the bundled example")
    p.add_argument("--outcome", required=True)
    p.add_argument("--exposure", required=True)
    p.add_argument("--covariates", default=None, help="comma-separated; default: all other columns")
    p.add_argument("--weights", default=None)
    p.add_argument("--exposure-kind", default="auto", choices=["auto", "binary", "continuous"])
    p.add_argument("--tau", default="0.5", help="comma-separated quantile levels")
    p.add_argument("--estimator", default="tmle", choices=ESTIMATOR_CHOICES)
    p.add_argument("--folds", default=folds_default, type=str if folds_help else int, help=folds_help)
    p.add_argument("--seed", default=0, type=int)
    p.add_argument("--link", default="identity", choices=["identity", "log"])
    p.add_argument("--tmle-mode", default="iterate", choices=["iterate", "onestep"])
    p.add_argument("--num-trees", default=500, type=int)
    p.add_argument("--min-leaf", default=5, type=int)
    p.add_argument("--mean-learner", default="auto", choices=["auto", "linear", "forest"])
    p.add_argument("--format", default=None, choices=["json", "csv"], help="default: from --out extension")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    _add_common(p)


def build_parser():
    parser = argparse.ArgumentParser(prog="alqr", description="Assumption-lean quantile regression inference.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("analyze", help="estimate the exposure effect on a CSV file")
    _add_analysis(p, 5, None)
    p.set_defaults(func=cmd_analyze)
    p = sub.add_parser("sensitivity", help="repeat an analysis over seeds and fold counts")
    _add_analysis(p, "5,10", "comma-separated fold counts")
    p.add_argument("--repeat", default=10, type=int)
    p.set_defaults(func=cmd_sensitivity)
    p = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    p.add_argument("--experiment", required=True)
    p.add_argument("--n", default=500, type=int)
    p.add_argument("--reps", default=200, type=int)
    p.add_argument("--estimators", default="oracle,plugin,dml,tmle",
                   help=f"comma-separated, from: {', '.join(MC_ESTIMATORS)}")
    p.add_argument("--tau", default="0.5")
    p.add_argument("--seed", default=1, type=int)
    p.add_argument("--folds", default=5, type=int, help="folds of the -cf estimators")
    p.add_argument("--num-trees", default=200, type=int)
    p.add_argument("--mean-learner", default="auto", choices=["auto", "linear", "forest"])
    p.add_argument("--out", default=None, help="table path; a .csv and a .json are written side by side")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (AlqrError, FileNotFoundError, ValueError) as exc:
        record = {"schema_version": SCHEMA_VERSION, "error": _error_record(exc)}
        sys.stderr.write(_dumps(record))
        return record["error"]["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
