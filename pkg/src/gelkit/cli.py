"""Command-line surface: CSV in, JSON reports out.

Exit codes: 0 success, 1 usage or bad config, 2 infeasible,
3 non-convergence (a report with diagnostics is still written),
4 I/O or unparseable data.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time

import click
import numpy as np

from .core import confidence_interval, gel_estimate, gel_test
from .distributed import dgel_estimate, dgel_test, partition_shards
from .exceptions import (ArgumentError, GelkitError, InfeasibleError,
                         NonConvergence, NonFiniteError, ParseError)
from .models import model_from_config
from .simulate import (VERSION, SimConfig, _atomic_write_text, _jsonable,
                       run_mse_study, run_size_power_study, run_timing_bench)
from .two_sample import make_two_sample_problem, two_sample_test


class _ExitCode(Exception):
    """Carries a process exit code through click's plumbing."""

    def __init__(self, code):
        super().__init__(code)
        self.code = int(code)


# ---------------------------------------------------------------- data I/O

def read_csv(path, has_header=False, columns=None):
    """Load a numeric CSV as a float matrix.

    Raises ParseError with the 1-based file row/column of the first bad
    cell, NonFiniteError for nan/inf cells, and ArgumentError for an
    out-of-range column selection.  Blank lines are skipped; ragged rows
    are rejected.
    """
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for rownum, record in enumerate(csv.reader(fh), start=1):
            if has_header and rownum == 1:
                continue
            if not record or (len(record) == 1 and not record[0].strip()):
                continue
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise ParseError(
                    f"expected {width} fields, got {len(record)}",
                    row=rownum, col=len(record))
            vals = []
            for colnum, cell in enumerate(record, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"not a number: {cell.strip()!r}",
                                     row=rownum, col=colnum) from None
                if not math.isfinite(v):
                    raise NonFiniteError(
                        f"non-finite value {cell.strip()!r}",
                        row=rownum, col=colnum)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows", row=1, col=1)
    mat = np.asarray(rows, dtype=float)
    if columns is not None:
        sel = list(columns)
        if any(c < -mat.shape[1] or c >= mat.shape[1] for c in sel):
            raise ArgumentError(
                f"column selection {sel} out of range for "
                f"{mat.shape[1]} columns")
        mat = mat[:, sel]
    return mat


def mspe_eval(theta, test_data, model):
    """Mean and SD of squared prediction errors on held-out rows.

    The SD is over individual squared errors (population convention).
    """
    test_data = np.asarray(test_data, dtype=float)
    if test_data.ndim != 2 or test_data.shape[0] == 0:
        raise ArgumentError("test data must be a non-empty matrix")
    if not model.supports_predict:
        raise ArgumentError(
            f"model {model.name!r} has no prediction rule")
    pred = model.predict(test_data, np.asarray(theta, dtype=float))
    sq = (pred - test_data[:, 0]) ** 2
    return float(np.mean(sq)), float(np.std(sq))


# ------------------------------------------------------------- report glue

def _clean(obj):
    """JSON-safe copy: numpy -> native, non-finite floats -> strings."""
    obj = _jsonable(obj)

    def walk(x):
        if isinstance(x, float) and not math.isfinite(x):
            return repr(x)
        if isinstance(x, dict):
            return {k: walk(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [walk(v) for v in x]
        return x

    return walk(obj)


def _emit(doc, out_path):
    text = json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"
    if out_path:
        _atomic_write_text(out_path, text)
    else:
        click.echo(text, nl=False)


def _report(command, config, seed, result, diagnostics, t0):
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "result": result,
        "diagnostics": diagnostics,
        "timing_s": time.perf_counter() - t0,
        "version": VERSION,
    }


def _fail_with_report(command, config, seed, err, t0, out_path):
    diag = dict(getattr(err, "diagnostics", None) or {})
    diag["error"] = str(err)
    _emit(_report(command, config, seed, None, diag, t0), out_path)
    raise _ExitCode(3)


# ------------------------------------------------------------ flag parsing

def _parse_floats(text, name):
    if text is None:
        return None
    try:
        vals = [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ArgumentError(
            f"{name} must be comma-separated numbers, got {text!r}") from None
    if not vals:
        raise ArgumentError(f"{name} is empty")
    return np.asarray(vals)


def _parse_columns(text):
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise ArgumentError(
            f"--columns must be comma-separated integers (0-based), "
            f"got {text!r}") from None


def _load_model_config(spec_text):
    s = (spec_text or "mean").strip()
    if s.startswith("{"):
        try:
            cfg = json.loads(s)
        except json.JSONDecodeError as e:
            raise ArgumentError(f"bad model JSON: {e}") from None
    elif os.path.exists(s):
        with open(s, encoding="utf-8") as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as e:
                raise ArgumentError(
                    f"bad model config {s}: {e}") from None
    else:
        cfg = {"model": s}
    if not isinstance(cfg, dict):
        raise ArgumentError("model config must be a JSON object")
    return cfg


def _resolve_groups(n_obs, groups, group_size, el):
    if el:
        if groups is not None or group_size is not None:
            raise ArgumentError(
                "--el conflicts with --groups/--group-size")
        return n_obs
    if groups is not None and group_size is not None:
        raise ArgumentError(
            "--groups and --group-size are mutually exclusive")
    if groups is not None:
        return groups
    if group_size is not None:
        if not 1 <= group_size <= n_obs:
            raise ArgumentError(
                f"--group-size must be in [1, {n_obs}], got {group_size}")
        return max(1, round(n_obs / group_size))
    return min(n_obs, 100)


# ---------------------------------------------------------------- commands

@click.group("gelkit")
@click.version_option(VERSION, prog_name="gelkit")
def cli():
    """Grouped empirical likelihood estimation and testing."""


_data_opts = [
    click.option("--data", "data_path", required=True,
                 help="CSV file of observations (rows)."),
    click.option("--model", "model_spec", default="mean", show_default=True,
                 help="Model name (mean/normal3/linreg), inline JSON "
                      "config, or path to a JSON config file."),
    click.option("--has-header", is_flag=True,
                 help="Skip the first CSV row."),
    click.option("--columns", default=None,
                 help="Comma-separated 0-based column selection; for "
                      "regression put the response first."),
    click.option("--groups", type=int, default=None,
                 help="Number of groups n (default min(N, 100))."),
    click.option("--group-size", type=int, default=None,
                 help="Target group size m (alternative to --groups)."),
    click.option("--el", is_flag=True,
                 help="Classical EL: one observation per group."),
    click.option("--seed", type=int, default=0, show_default=True,
                 help="Grouping seed."),
    click.option("--tol", type=float, default=1e-8, show_default=True),
    click.option("--out", "out_path", default=None,
                 help="Write the JSON report here instead of stdout."),
]


def _with_opts(opts):
    def deco(f):
        for opt in reversed(opts):
            f = opt(f)
        return f
    return deco


def _fit_result(fit):
    res = {
        "theta": fit.theta,
        "wald_se": fit.wald_se(),
        "lambda": fit.lam,
        "lambda_norm": float(np.linalg.norm(fit.lam)),
        "neg2log_ratio": fit.neg2log_ratio,
        "converged": fit.converged,
        "n_obs": fit.n_obs,
        "n_groups": fit.grouping.n_groups,
        "mean_group_size": fit.mean_group_size,
    }
    return res


@cli.command("estimate")
@_with_opts(_data_opts)
@click.option("--theta0", default=None,
              help="Comma-separated starting value (default automatic).")
@click.option("--ci", "ci_level", type=float, default=None,
              help="Also compute profile confidence intervals at this "
                   "level for every component.")
@click.option("--train-rows", type=int, default=None,
              help="Fit on the first K rows only.")
@click.option("--mspe", is_flag=True,
              help="Evaluate squared prediction error on the rows held "
                   "out by --train-rows.")
def cmd_estimate(data_path, model_spec, has_header, columns, groups,
                 group_size, el, seed, tol, out_path, theta0, ci_level,
                 train_rows, mspe):
    """Fit the model by grouped empirical likelihood."""
    t0 = time.perf_counter()
    columns = _parse_columns(columns)
    data = read_csv(data_path, has_header=has_header, columns=columns)
    test_data = None
    if train_rows is not None:
        if not 1 <= train_rows <= data.shape[0]:
            raise ArgumentError(
                f"--train-rows must be in [1, {data.shape[0]}]")
        data, test_data = data[:train_rows], data[train_rows:]
    if mspe and (test_data is None or test_data.shape[0] == 0):
        raise ArgumentError("--mspe needs held-out rows via --train-rows")
    model = model_from_config(_load_model_config(model_spec),
                              data_dim=data.shape[1])
    n_groups = _resolve_groups(data.shape[0], groups, group_size, el)
    theta_init = _parse_floats(theta0, "--theta0")
    config = {
        "data": data_path, "model": model_spec, "has_header": has_header,
        "columns": columns, "n_groups": n_groups, "el": el, "seed": seed,
        "tol": tol, "theta0": theta0, "ci": ci_level,
        "train_rows": train_rows, "mspe": mspe,
    }
    seed_echo = {"seed": seed, "grouping_seed": seed}
    try:
        fit = gel_estimate(data, model, n_groups=n_groups,
                           theta_init="auto" if theta_init is None
                           else theta_init, seed=seed, tol=tol)
    except NonConvergence as e:
        _fail_with_report("estimate", config, seed_echo, e, t0, out_path)
    result = _fit_result(fit)
    if ci_level is not None:
        if not 0 < ci_level < 1:
            raise ArgumentError(f"--ci must be in (0,1), got {ci_level}")
        result["ci"] = {
            "level": ci_level,
            "intervals": [list(confidence_interval(
                data, model, fit, component=j, level=ci_level, tol=tol))
                for j in range(model.param_dim)],
        }
    if mspe:
        m, sd = mspe_eval(fit.theta, test_data, model)
        result["mspe"] = m
        result["mspe_sd"] = sd
        result["test_rows"] = int(test_data.shape[0])
    diag = dict(fit.diagnostics)
    diag["outer_iterations"] = fit.outer_iterations
    _emit(_report("estimate", config, seed_echo, result, diag, t0),
          out_path)


@cli.command("test")
@_with_opts(_data_opts)
@click.option("--theta0", required=True,
              help="Comma-separated null value to test.")
def cmd_test(data_path, model_spec, has_header, columns, groups,
             group_size, el, seed, tol, out_path, theta0):
    """Likelihood-ratio test of theta = theta0."""
    t0 = time.perf_counter()
    columns = _parse_columns(columns)
    data = read_csv(data_path, has_header=has_header, columns=columns)
    model = model_from_config(_load_model_config(model_spec),
                              data_dim=data.shape[1])
    n_groups = _resolve_groups(data.shape[0], groups, group_size, el)
    t0v = _parse_floats(theta0, "--theta0")
    config = {
        "data": data_path, "model": model_spec, "has_header": has_header,
        "columns": columns, "n_groups": n_groups, "el": el, "seed": seed,
        "tol": tol, "theta0": theta0,
    }
    seed_echo = {"seed": seed, "grouping_seed": seed}
    try:
        tr = gel_test(data, model, theta0=t0v, n_groups=n_groups,
                      seed=seed, tol=tol)
    except NonConvergence as e:
        _fail_with_report("test", config, seed_echo, e, t0, out_path)
    result = {
        "theta0": tr.theta0,
        "statistic": tr.statistic,
        "df": tr.df,
        "p_value": tr.p_value,
        "infeasible": tr.infeasible,
        "raw_neg2log_ratio": tr.raw_neg2log_ratio,
        "profile_minimum": tr.profile_minimum,
        "mean_group_size": tr.mean_group_size,
    }
    diag = {}
    if tr.fit is not None:
        result["theta_hat"] = tr.fit.theta
        diag["outer_iterations"] = tr.fit.outer_iterations
    if tr.infeasible:
        diag["infeasible_theta0"] = True
    _emit(_report("test", config, seed_echo, result, diag, t0), out_path)


@cli.command("two-sample")
@click.option("--data-x", "path_x", required=True, help="CSV for sample X.")
@click.option("--data-y", "path_y", required=True, help="CSV for sample Y.")
@click.option("--pi0", required=True,
              help="Comma-separated null difference theta_y - theta_x.")
@click.option("--model", "model_spec", default="mean", show_default=True,
              help="Just-identified model (r = p).")
@click.option("--group-size", "m", type=int, required=True,
              help="Common group size m for both samples.")
@click.option("--trim", is_flag=True,
              help="Drop a seeded random remainder when sizes are not "
                   "multiples of m.")
@click.option("--has-header", is_flag=True)
@click.option("--columns", default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", default=None)
def cmd_two_sample(path_x, path_y, pi0, model_spec, m, trim, has_header,
                   columns, seed, out_path):
    """Test a difference in parameters between two samples."""
    t0 = time.perf_counter()
    columns = _parse_columns(columns)
    X = read_csv(path_x, has_header=has_header, columns=columns)
    Y = read_csv(path_y, has_header=has_header, columns=columns)
    model = model_from_config(_load_model_config(model_spec),
                              data_dim=X.shape[1])
    pi = _parse_floats(pi0, "--pi0")
    config = {
        "data_x": path_x, "data_y": path_y, "pi0": pi0,
        "model": model_spec, "group_size": m, "trim": trim,
        "has_header": has_header, "columns": columns, "seed": seed,
    }
    problem = make_two_sample_problem(X, Y, model, m, seed=seed, trim=trim)
    seed_echo = {
        "seed": seed,
        "grouping_x_seed": problem.grouping_x.seed,
        "grouping_y_seed": problem.grouping_y.seed,
    }
    try:
        res = two_sample_test(problem, pi)
    except NonConvergence as e:
        _fail_with_report("two-sample", config, seed_echo, e, t0, out_path)
    result = {
        "pi0": res.pi0,
        "theta_x": res.theta_x_star,
        "theta_y": res.theta_y_star,
        "lambda": res.lambda_star,
        "neg2logR": res.neg2logR,
        "statistic": res.statistic,
        "df": res.df,
        "p_value": res.p_value,
        "converged": res.converged,
        "n1": problem.N1,
        "n2": problem.N2,
        "trimmed_x": problem.trimmed_x,
        "trimmed_y": problem.trimmed_y,
    }
    diag = dict(res.diagnostics)
    diag["iterations"] = res.iterations
    diag["method"] = res.method
    _emit(_report("two-sample", config, seed_echo, result, diag, t0),
          out_path)


@cli.command("dgel")
@click.option("--data", "data_path", required=True)
@click.option("--model", "model_spec", default="mean", show_default=True)
@click.option("--shards", "K", type=int, default=10, show_default=True,
              help="Number of shards.")
@click.option("--groups", type=int, default=None,
              help="Groups per shard (default min(shard size, 100)).")
@click.option("--theta0", default=None,
              help="If given, also run the aggregated test at theta0.")
@click.option("--survivors", is_flag=True,
              help="Average over shards that converged instead of "
                   "failing when any shard fails.")
@click.option("--weighted", is_flag=True,
              help="Weight the average by shard sizes.")
@click.option("--threads", type=int, default=None,
              help="Worker pool width (default GELKIT_THREADS or cores).")
@click.option("--has-header", is_flag=True)
@click.option("--columns", default=None)
@click.option("--seed", type=int, default=0, show_default=True,
              help="Master seed: partition permutation and shard "
                   "grouping seeds derive from it.")
@click.option("--out", "out_path", default=None)
def cmd_dgel(data_path, model_spec, K, groups, theta0, survivors, weighted,
             threads, has_header, columns, seed, out_path):
    """Sharded estimation: fit per shard, aggregate by averaging."""
    t0 = time.perf_counter()
    columns = _parse_columns(columns)
    data = read_csv(data_path, has_header=has_header, columns=columns)
    model = model_from_config(_load_model_config(model_spec),
                              data_dim=data.shape[1])
    t0v = _parse_floats(theta0, "--theta0")
    config = {
        "data": data_path, "model": model_spec, "shards": K,
        "groups": groups, "theta0": theta0, "survivors": survivors,
        "weighted": weighted, "threads": threads,
        "has_header": has_header, "columns": columns, "seed": seed,
    }
    shards = partition_shards(data, K, seed, n_groups=groups)
    seed_echo = {
        "master_seed": seed,
        "shard_seeds": [s.seed for s in shards],
    }
    try:
        est = dgel_estimate(shards, model, strict=not survivors,
                            weighted=weighted, threads=threads)
        test = (dgel_test(shards, model, t0v, threads=threads)
                if t0v is not None else None)
    except NonConvergence as e:
        _fail_with_report("dgel", config, seed_echo, e, t0, out_path)
    result = {
        "theta": est.theta_dgel,
        "K": K,
        "shard_sizes": [s.n_obs for s in shards],
        "local_thetas": [f.theta for f in est.local_fits
                         if f is not None],
    }
    diag = dict(est.diagnostics)
    if test is not None:
        result["test"] = {
            "theta0": t0v,
            "statistic": test.statistic,
            "df": test.df,
            "p_value": test.p_value,
            "calibration": test.calibration,
            "agg_neg2logR": test.agg_neg2logR,
        }
        diag.update(test.diagnostics)
    _emit(_report("dgel", config, seed_echo, result, diag, t0), out_path)


# ------------------------------------------------------- simulation driver

_STUDIES = {
    "mse": run_mse_study,
    "size-power": run_size_power_study,
    "timing": run_timing_bench,
}


def _load_sim_config(config_path, replications):
    with open(config_path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ArgumentError(f"bad config {config_path}: {e}") from None
    if not isinstance(raw, dict):
        raise ArgumentError("config must be a JSON object")
    study = raw.pop("study", None)
    if replications is not None:
        raw["replications"] = replications
    return raw, study


def _run_study(command, config_path, out_dir, study, replications, t0):
    raw, cfg_study = _load_sim_config(config_path, replications)
    if command == "bench":
        study = "timing"
    elif study is None:
        study = cfg_study or ("size-power" if raw.get("example") == "ex3"
                              else "mse")
    study = study.replace("_", "-")
    if study not in _STUDIES:
        raise ArgumentError(
            f"unknown study {study!r}; choose from {sorted(_STUDIES)}")
    config = SimConfig.from_dict(raw)
    seed_echo = {"master_seed": config.master_seed}
    cfg_echo = dict(config.to_dict())
    cfg_echo["study"] = study
    try:
        report = _STUDIES[study](config)
    except NonConvergence as e:
        _fail_with_report(command, cfg_echo, seed_echo, e, t0, None)
    files = {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        stem = os.path.join(out_dir, report.kind)
        report.to_json(stem + ".json")
        report.to_csv(stem + ".csv")
        files = {"json": stem + ".json", "csv": stem + ".csv"}
    result = {
        "kind": report.kind,
        "rows": report.rows,
        "failures": report.failures,
        "meta": report.meta,
        "files": files,
    }
    _emit(_report(command, cfg_echo, seed_echo, result, {}, t0), None)


@cli.command("simulate")
@click.option("--config", "config_path", required=True,
              help="JSON study config.")
@click.option("--out", "out_dir", default=None,
              help="Directory for the JSON and CSV report files.")
@click.option("--study", type=click.Choice(sorted(_STUDIES)), default=None,
              help="Override the study kind (default: config key, else "
                   "size-power for ex3 and mse otherwise).")
@click.option("--replications", type=int, default=None,
              help="Override the replication count (smoke runs).")
def cmd_simulate(config_path, out_dir, study, replications):
    """Run a Monte Carlo study described by a JSON config."""
    _run_study("simulate", config_path, out_dir, study, replications,
               time.perf_counter())


@cli.command("bench")
@click.option("--config", "config_path", required=True,
              help="JSON timing config; its grid lists the N values.")
@click.option("--out", "out_dir", default=None)
@click.option("--replications", type=int, default=None)
def cmd_bench(config_path, out_dir, replications):
    """Median wall-clock timing over a grid of sample sizes."""
    _run_study("bench", config_path, out_dir, None, replications,
               time.perf_counter())


# ------------------------------------------------------------- entry point

def main(argv=None):
    try:
        cli.main(args=argv, prog_name="gelkit", standalone_mode=False)
        return 0
    except _ExitCode as e:
        return e.code
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.UsageError as e:
        click.echo(f"gelkit: {e.format_message()}", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except NonConvergence as e:
        click.echo(f"gelkit: did not converge: {e}", err=True)
        return 3
    except InfeasibleError as e:
        click.echo(f"gelkit: infeasible: {e}", err=True)
        return 2
    except ParseError as e:
        loc = ""
        if getattr(e, "row", None) is not None:
            loc = f" at row {e.row} col {e.col}"
        click.echo(f"gelkit: parse error{loc}: {e}", err=True)
        return 4
    except (ArgumentError, GelkitError) as e:
        click.echo(f"gelkit: {e}", err=True)
        return 1
    except OSError as e:
        click.echo(f"gelkit: i/o error: {e}", err=True)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
