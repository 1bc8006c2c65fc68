"""Seeded data generators and replication studies.

Three stock designs: normal-parameter estimation (ex1), heteroscedastic
constrained regression (ex2), and a heavy-tailed two-sample mean test
(ex3).  Studies are paired: every method sees the same generated dataset
within a replication, and per-replication seeds come from a splitmix
counter so reports are reproducible at any worker-pool width.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import el_estimate, gel_estimate, gel_test
from .distributed import (_pool_width, dgel_estimate, dgel_test,
                          partition_shards)
from .exceptions import (ArgumentError, GelkitError, InfeasibleError,
                         NonConvergence)
from .models import (as_data_matrix, linreg_constrained_model, mean_model,
                     normal_three_moment_model)
from .rng import splitmix64
from .two_sample import make_two_sample_problem, two_sample_test

VERSION = "0.1.0"

KNOWN_METHODS = ("EL", "GEL", "DCEL", "DGEL", "WT")
EXAMPLES = ("ex1", "ex2", "ex3", "custom")


# ---------------------------------------------------------------------------
# generators


def gen_example1(N, mu=0.0, sigma=2.0, seed=0):
    """N iid draws from Normal(mu, sigma^2) as an (N, 1) matrix."""
    N = int(N)
    if N < 1:
        raise ArgumentError(f"need N >= 1, got {N}")
    if not sigma > 0:
        raise ArgumentError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(int(seed))
    return rng.normal(mu, sigma, size=(N, 1))


def gen_example2(N, p=5, rho=0.2, alpha=1.0, beta0=1.0, beta=None, seed=0):
    """Correlated covariates with output-dependent noise variance.

    Covariates are N(0, (1-rho) I + rho 11'); given X the error variance
    is 1 + alpha (1'X / sqrt(p))^2.  Returns (responses, covariates).
    """
    N, p = int(N), int(p)
    if N < 1:
        raise ArgumentError(f"need N >= 1, got {N}")
    if p < 1:
        raise ArgumentError(f"need p >= 1, got {p}")
    if not -1.0 < rho < 1.0:
        raise ArgumentError(f"rho must lie in (-1, 1), got {rho}")
    if 1.0 + (p - 1) * rho <= 0.0:
        raise ArgumentError(
            f"covariance (1-rho)I + rho 11' is not positive definite for "
            f"rho={rho}, p={p}")
    if alpha < 0:
        raise ArgumentError(f"alpha must be >= 0, got {alpha}")
    beta = (np.arange(1, p + 1, dtype=float) if beta is None
            else np.asarray(beta, dtype=float).reshape(p))
    rng = np.random.default_rng(int(seed))
    cov = (1.0 - rho) * np.eye(p) + rho * np.ones((p, p))
    X = rng.standard_normal((N, p)) @ np.linalg.cholesky(cov).T
    noise_sd = np.sqrt(1.0 + alpha * (X.sum(axis=1) / np.sqrt(p)) ** 2)
    y = beta0 + X @ beta + noise_sd * rng.standard_normal(N)
    return y, X


# mixture pieces: (means, variances) per component
_EX3_X = (np.array([0.0, 100.0, 1000.0]), np.array([1.0, 100.0, 1000.0]))
_EX3_Y_VAR = np.array([2.0, 200.0, 3000.0])

EX3_MEAN_X = 1100.0 / 3.0


def ex3_mean_shift(j) -> float:
    """Population mean difference E(Y) - E(X) at grid point j."""
    return 20.0 * j / 3.0


def _mixture(rng, N, means, variances):
    comp = rng.integers(0, 3, size=N)
    draws = rng.standard_normal(N) * np.sqrt(variances[comp]) + means[comp]
    return draws[:, None]


def gen_example3(N, j, seed=0):
    """Two heavy-spread three-component mixtures (X, Y), each (N, 1).

    The second mixture parameter is read as a variance.  j in {0..5}
    shifts the mean of Y's third component by 20j, so the mean gap is
    20j/3 and j=0 is the equal-means case.
    """
    N = int(N)
    if N < 1:
        raise ArgumentError(f"need N >= 1, got {N}")
    if int(j) != j or not 0 <= j <= 5:
        raise ArgumentError(f"j must be an integer in 0..5, got {j}")
    j = int(j)
    rng_x = np.random.default_rng(splitmix64(seed, 0))
    rng_y = np.random.default_rng(splitmix64(seed, 1))
    X = _mixture(rng_x, N, _EX3_X[0], _EX3_X[1])
    y_means = np.array([0.0, 100.0, 1000.0 + 20.0 * j])
    Y = _mixture(rng_y, N, y_means, _EX3_Y_VAR)
    return X, Y


def dcel_estimate(data, k: int, model, seed=0, **fit_opts) -> np.ndarray:
    """Split into k seeded blocks, fit classical EL per block, average.

    k=1 leaves the data untouched and reduces to one plain EL fit.
    Block failures propagate.
    """
    data = as_data_matrix(data, model.data_dim)
    N = data.shape[0]
    k = int(k)
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if N < k:
        raise ArgumentError(f"cannot split {N} rows into {k} blocks")
    if k == 1:
        parts = [data]
    else:
        perm = np.random.default_rng(int(seed)).permutation(N)
        shuffled = data[perm]
        base, extra = divmod(N, k)
        sizes = np.full(k, base)
        sizes[:extra] += 1
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        parts = [shuffled[bounds[i]:bounds[i + 1]] for i in range(k)]
    thetas = [el_estimate(part, model, **fit_opts).theta for part in parts]
    return np.mean(thetas, axis=0)


# ---------------------------------------------------------------------------
# configuration and reports


@dataclass
class SimConfig:
    example: str
    replications: int
    methods: list
    master_seed: int = 0
    N: int | None = None
    N1: int | None = None
    N2: int | None = None
    alpha: float = 0.05
    grid: list | None = None
    params: dict = field(default_factory=dict)
    method_params: dict = field(default_factory=dict)
    threads: int | None = None

    def __post_init__(self):
        if self.example not in EXAMPLES:
            raise ArgumentError(
                f"unknown example {self.example!r}; choose from {EXAMPLES}")
        if int(self.replications) < 1:
            raise ArgumentError("replications must be >= 1")
        self.replications = int(self.replications)
        if not self.methods:
            raise ArgumentError("at least one method is required")
        self.methods = [str(m).upper() for m in self.methods]
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ArgumentError(
                    f"unknown method {m!r}; choose from {KNOWN_METHODS}")
        if not 0.0 < self.alpha <= 1.0:
            raise ArgumentError(f"alpha must be in (0, 1], got {self.alpha}")

    _FIELDS = ("example", "replications", "methods", "master_seed", "N",
               "N1", "N2", "alpha", "grid", "params", "method_params",
               "threads")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - set(cls._FIELDS)
        if unknown:
            raise ArgumentError(
                f"unknown config keys: {sorted(unknown)}; "
                f"allowed: {list(cls._FIELDS)}")
        if "example" not in d or "replications" not in d or "methods" not in d:
            raise ArgumentError(
                "config needs at least example, replications, methods")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self._FIELDS}

    def method_param(self, method, key, default=None):
        return self.method_params.get(method, {}).get(key, default)


def _atomic_write_text(path, text):
    """Write via a temp file and rename, so readers never see a partial
    file."""
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


@dataclass
class SimReport:
    kind: str
    config: dict
    rows: list
    failures: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self, path=None):
        payload = json.dumps(_jsonable({
            "kind": self.kind, "config": self.config, "rows": self.rows,
            "failures": self.failures, "meta": self.meta,
        }), indent=2, sort_keys=True)
        if path is not None:
            _atomic_write_text(path, payload + "\n")
        return payload

    def to_csv(self, path=None):
        """Flat table, one row per method x grid point."""
        cols = []
        for row in self.rows:
            for key in row:
                if key not in cols:
                    cols.append(key)
        lines = [",".join(cols)]
        for row in self.rows:
            cells = []
            for key in cols:
                v = row.get(key, "")
                cells.append(repr(v) if isinstance(v, float) else str(v))
            lines.append(",".join(cells))
        text = "\n".join(lines) + "\n"
        if path is not None:
            _atomic_write_text(path, text)
        return text


# ---------------------------------------------------------------------------
# study plumbing


def _resolve_design(config: SimConfig, generator=None, model=None,
                    truth=None):
    """Map an example name to (generator(seed) -> data, model, truth)."""
    prm = config.params
    if config.example == "custom":
        if generator is None or model is None:
            raise ArgumentError(
                "custom configs need generator= and model= passed "
                "through the API")
        return generator, model, (None if truth is None
                                  else np.asarray(truth, dtype=float))
    if config.example == "ex1":
        if config.N is None:
            raise ArgumentError("ex1 needs N")
        mu = float(prm.get("mu", 0.0))
        sigma = float(prm.get("sigma", 2.0))
        gen = lambda seed: gen_example1(config.N, mu, sigma, seed)
        return gen, normal_three_moment_model(), np.array([mu, sigma])
    if config.example == "ex2":
        if config.N is None:
            raise ArgumentError("ex2 needs N")
        p = int(prm.get("p", 5))
        rho = float(prm.get("rho", 0.2))
        het = float(prm.get("alpha", 1.0))
        beta0 = float(prm.get("beta0", 1.0))
        beta = np.asarray(prm.get("beta", np.arange(1, p + 1)), dtype=float)
        if p < 5:
            raise ArgumentError("ex2 uses the first five slopes in its "
                                "constraint, so p >= 5 is required")
        coeffs = np.zeros(p + 1)
        coeffs[1:6] = 1.0
        model_ = linreg_constrained_model(p, coeffs, float(beta[:5].sum()))

        def gen(seed):
            y, X = gen_example2(config.N, p, rho, het, beta0, beta, seed)
            return np.column_stack([y, X])

        return gen, model_, np.concatenate([[beta0], beta])
    raise ArgumentError(f"{config.example} has no point-estimation design; "
                        "use the size/power study")


def _method_seed(rep_seed, method):
    return splitmix64(rep_seed, 7001 + KNOWN_METHODS.index(method))


def _fit_one(method, data, model, config: SimConfig, rep_seed):
    """One method's point estimate on one replication, with its wall
    time (the fit call only)."""
    seed = _method_seed(rep_seed, method)
    if method == "EL":
        t0 = time.perf_counter()
        theta = el_estimate(data, model).theta
    elif method == "GEL":
        n = int(config.method_param("GEL", "n", 100))
        t0 = time.perf_counter()
        theta = gel_estimate(data, model, n_groups=n, seed=seed).theta
    elif method == "DCEL":
        k = int(config.method_param("DCEL", "k", 100))
        t0 = time.perf_counter()
        theta = dcel_estimate(data, k, model, seed=seed)
    elif method == "DGEL":
        K = int(config.method_param("DGEL", "K", 10))
        n = int(config.method_param("DGEL", "n", 100))
        t0 = time.perf_counter()
        shards = partition_shards(data, K, seed, n_groups=n)
        theta = dgel_estimate(shards, model, threads=1).theta_dgel
    else:
        raise ArgumentError(f"method {method} has no point estimator")
    return theta, time.perf_counter() - t0


def _run_replications(config: SimConfig, worker):
    """Evaluate worker(rep, rep_seed) for every replication, folding the
    results in replication order regardless of pool width."""
    seeds = [splitmix64(config.master_seed, rep)
             for rep in range(config.replications)]
    width = min(_pool_width(config.threads), config.replications)
    if width <= 1:
        return [worker(rep, s) for rep, s in enumerate(seeds)]
    with ThreadPoolExecutor(max_workers=width) as pool:
        return list(pool.map(worker, range(config.replications), seeds))


def _failure_policy(config: SimConfig, failures: dict):
    """Warn on sub-1% failure rates, abort otherwise."""
    R = config.replications
    for method, recs in failures.items():
        if not recs:
            continue
        rate = len(recs) / R
        msg = (f"{method}: {len(recs)}/{R} replications failed "
               f"(first: {recs[0][1]})")
        if rate >= 0.01:
            raise NonConvergence("failure rate >= 1%, aborting study: "
                                 + msg)
        warnings.warn(msg + "; excluded from summaries")


# ---------------------------------------------------------------------------
# studies


def run_mse_study(config: SimConfig, *, generator=None, model=None,
                  truth=None) -> SimReport:
    """Paired Monte Carlo of squared estimation error and fit time.

    Every method fits the same dataset per replication; per-component
    MSE means and SDs are taken over the successful replications.
    """
    gen, model_, truth_ = _resolve_design(config, generator, model, truth)
    if truth_ is None:
        raise ArgumentError("an MSE study needs the true parameter")
    methods = config.methods
    for m in methods:
        if m == "WT":
            raise ArgumentError("WT is a two-sample baseline; it has no "
                                "point estimator")
    t_start = time.perf_counter()

    def worker(rep, rep_seed):
        data = gen(rep_seed)
        out = {}
        for method in methods:
            try:
                out[method] = _fit_one(method, data, model_, config,
                                       rep_seed)
            except GelkitError as e:
                out[method] = e
        return out

    results = _run_replications(config, worker)

    failures = {m: [] for m in methods}
    sq_errs = {m: [] for m in methods}
    times = {m: [] for m in methods}
    for rep, res in enumerate(results):
        for method in methods:
            got = res[method]
            if isinstance(got, GelkitError):
                failures[method].append((rep, str(got)))
            else:
                theta, dt = got
                sq_errs[method].append((theta - truth_) ** 2)
                times[method].append(dt)
    _failure_policy(config, failures)

    names = model_.param_names
    rows = []
    for method in methods:
        errs = np.array(sq_errs[method])
        row = {"method": method,
               "n_effective": errs.shape[0],
               "failures": len(failures[method]),
               "mean_seconds": float(np.mean(times[method]))}
        mse = errs.mean(axis=0)
        sd = errs.std(axis=0) if errs.shape[0] > 1 else np.zeros(len(names))
        for i, name in enumerate(names):
            row[f"mse_{name}"] = float(mse[i])
            row[f"sd_{name}"] = float(sd[i])
        rows.append(row)
    return SimReport(
        kind="mse", config=config.to_dict(), rows=rows,
        failures={m: f for m, f in failures.items() if f},
        meta={"version": VERSION, "truth": _jsonable(truth_),
              "total_seconds": time.perf_counter() - t_start})


def _welch_pvalue(X, Y) -> float:
    res = stats.ttest_ind(X[:, 0], Y[:, 0], equal_var=False)
    return float(res.pvalue)


def _one_sample_pvalue(method, data, model, theta0, config, rep_seed):
    seed = _method_seed(rep_seed, method)
    if method == "GEL":
        n = int(config.method_param("GEL", "n", 100))
        return gel_test(data, model, n_groups=n, seed=seed,
                        theta0=theta0).p_value
    if method == "EL":
        return gel_test(data, model,
                        n_groups=data.shape[0], seed=seed,
                        theta0=theta0).p_value
    if method == "DGEL":
        K = int(config.method_param("DGEL", "K", 10))
        n = int(config.method_param("DGEL", "n", 100))
        shards = partition_shards(data, K, seed, n_groups=n)
        return dgel_test(shards, model, theta0, threads=1).p_value
    raise ArgumentError(f"method {method} has no one-sample test")


def run_size_power_study(config: SimConfig, *, generator=None, model=None,
                         truth=None) -> SimReport:
    """Rejection rates at level alpha, with binomial standard errors.

    ex1 runs one-sample tests of the true parameter (size only).  ex3
    runs the two-sample mean test across the j grid (GEL) next to a
    Welch t baseline (WT); an infeasible null counts as a rejection,
    not a failure.
    """
    t_start = time.perf_counter()
    alpha = config.alpha
    if config.example == "ex3":
        if config.N1 is None or config.N2 is None:
            raise ArgumentError("ex3 needs N1 and N2")
        grid = config.grid if config.grid is not None else [0]
        for m in config.methods:
            if m not in ("GEL", "WT"):
                raise ArgumentError(
                    f"ex3 size/power supports GEL and WT, got {m}")
        mparams = {"m": int(config.method_param("GEL", "m", 100)),
                   "trim": bool(config.method_param("GEL", "trim", False))}

        def worker(rep, rep_seed):
            out = {}
            for j in grid:
                X, Y = gen_example3(max(config.N1, config.N2), j,
                                    splitmix64(rep_seed, 31 + j))
                X, Y = X[:config.N1], Y[:config.N2]
                for method in config.methods:
                    key = (method, j)
                    if method == "WT":
                        out[key] = _welch_pvalue(X, Y)
                        continue
                    try:
                        prob = make_two_sample_problem(
                            X, Y, mean_model(1), mparams["m"],
                            seed=_method_seed(rep_seed, "GEL"),
                            trim=mparams["trim"])
                        out[key] = two_sample_test(prob, [0.0]).p_value
                    except InfeasibleError:
                        out[key] = 0.0  # overwhelming evidence: reject
                    except GelkitError as e:
                        out[key] = e
            return out

        keys = [(m, j) for m in config.methods for j in grid]
    else:
        gen, model_, truth_ = _resolve_design(config, generator, model,
                                              truth)
        if truth_ is None:
            raise ArgumentError("a size study needs the true parameter "
                                "as theta0")
        theta0 = np.asarray(config.params.get("theta0", truth_),
                            dtype=float)
        for m in config.methods:
            if m == "WT":
                raise ArgumentError("WT only applies to the two-sample "
                                    "design (ex3)")

        def worker(rep, rep_seed):
            data = gen(rep_seed)
            out = {}
            for method in config.methods:
                try:
                    out[(method, None)] = _one_sample_pvalue(
                        method, data, model_, theta0, config, rep_seed)
                except InfeasibleError:
                    out[(method, None)] = 0.0
                except GelkitError as e:
                    out[(method, None)] = e
            return out

        keys = [(m, None) for m in config.methods]

    results = _run_replications(config, worker)

    failures = {k: [] for k in keys}
    pvals = {k: [] for k in keys}
    for rep, res in enumerate(results):
        for key in keys:
            got = res[key]
            if isinstance(got, GelkitError):
                failures[key].append((rep, str(got)))
            else:
                pvals[key].append(got)
    _failure_policy(config, {f"{m} (j={j})" if j is not None else m: f
                             for (m, j), f in failures.items()})

    rows = []
    for key in keys:
        method, j = key
        pv = np.array(pvals[key])
        rate = float((pv < alpha).mean())
        row = {"method": method}
        if j is not None:
            row["j"] = j
        row.update({
            "rejection_rate": rate,
            "binom_se": float(np.sqrt(rate * (1 - rate) / pv.size)),
            "n_effective": int(pv.size),
            "failures": len(failures[key]),
            "alpha": alpha,
        })
        rows.append(row)
    return SimReport(
        kind="size_power", config=config.to_dict(), rows=rows,
        failures={f"{m}/{j}": f for (m, j), f in failures.items() if f},
        meta={"version": VERSION,
              "total_seconds": time.perf_counter() - t_start})


def run_timing_bench(config: SimConfig, *, generator=None, model=None,
                     truth=None) -> SimReport:
    """Median fit wall-clock per method over a grid of sample sizes.

    Runs strictly sequentially (pool width 1) so timings are untainted
    by contention; config.grid carries the N values.
    """
    if not config.grid:
        raise ArgumentError("a timing bench needs grid = [N1, N2, ...]")
    sizes = [int(N) for N in config.grid]
    if any(N < 1 for N in sizes):
        raise ArgumentError("bench sizes must be positive")
    t_start = time.perf_counter()
    rows = []
    for N in sizes:
        sub = SimConfig(example=config.example,
                        replications=config.replications,
                        methods=config.methods,
                        master_seed=config.master_seed, N=N,
                        alpha=config.alpha, params=config.params,
                        method_params=config.method_params, threads=1)
        gen, model_, _ = _resolve_design(sub, generator, model, truth)
        per_method = {m: [] for m in sub.methods}
        for rep in range(sub.replications):
            rep_seed = splitmix64(sub.master_seed, rep)
            data = gen(rep_seed)
            for method in sub.methods:
                _, dt = _fit_one(method, data, model_, sub, rep_seed)
                per_method[method].append(dt)
        for method in sub.methods:
            ts = per_method[method]
            rows.append({"method": method, "N": N,
                         "median_seconds": float(np.median(ts)),
                         "mean_seconds": float(np.mean(ts)),
                         "reps": len(ts)})
    return SimReport(
        kind="timing", config=config.to_dict(), rows=rows,
        meta={"version": VERSION,
              "total_seconds": time.perf_counter() - t_start})
