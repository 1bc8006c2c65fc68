"""Distributed GEL: shard the data, fit locally, average and aggregate.

Shards are embarrassingly parallel; local fits run in an in-process
worker pool whose width is capped by GELKIT_THREADS.  Aggregation is an
ordered fold over shard_id, so reports are reproducible regardless of
scheduling.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import GelFit, TestResult, chisq_sf, gel_estimate, gel_test
from .exceptions import ArgumentError, GelkitError
from .grouping import make_grouping
from .models import MomentModel, as_data_matrix
from .rng import splitmix64


@dataclass(frozen=True)
class Shard:
    """One server's slice of the data plus its local grouping params."""

    shard_id: int
    data: np.ndarray = field(repr=False)
    n_groups: int
    seed: int

    @property
    def n_obs(self) -> int:
        return self.data.shape[0]

    @property
    def mean_group_size(self) -> float:
        return self.n_obs / self.n_groups


@dataclass
class DgelFit:
    theta_dgel: np.ndarray | None
    local_fits: list
    agg_neg2logR: float | None = None
    statistic: float | None = None
    df: int | None = None
    p_value: float | None = None
    calibration: str = "sum_chisq"
    diagnostics: dict = field(default_factory=dict, repr=False)


def partition_shards(data, K: int, master_seed: int, *,
                     n_groups=None) -> list[Shard]:
    """Split rows into K near-equal shards with derived grouping seeds.

    K >= 2 shuffles rows with a seeded permutation before the contiguous
    split; K = 1 keeps the data untouched so the single shard reproduces
    a plain GEL fit bit for bit.  Shard k gets grouping seed
    splitmix64(master_seed, k) and n_k = min(N_k, 100) groups unless
    n_groups overrides it.
    """
    data = as_data_matrix(data)
    N = data.shape[0]
    K = int(K)
    if K < 1:
        raise ArgumentError(f"K must be >= 1, got {K}")
    if N < K:
        raise ArgumentError(f"cannot split {N} rows into {K} shards")
    if K == 1:
        parts = [data]
    else:
        perm = np.random.default_rng(int(master_seed)).permutation(N)
        shuffled = data[perm]
        base, extra = divmod(N, K)
        sizes = np.full(K, base)
        sizes[:extra] += 1
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        parts = [shuffled[bounds[k]:bounds[k + 1]] for k in range(K)]
    shards = []
    for k, part in enumerate(parts):
        nk = min(part.shape[0], 100) if n_groups is None else int(n_groups)
        if not 1 <= nk <= part.shape[0]:
            raise ArgumentError(
                f"shard {k}: n_groups={nk} outside [1, {part.shape[0]}]")
        shards.append(Shard(shard_id=k, data=np.ascontiguousarray(part),
                            n_groups=nk, seed=splitmix64(master_seed, k)))
    return shards


def _pool_width(threads) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("GELKIT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _map_shards(fn, shards, threads):
    """Apply fn to each shard; results return in shard_id order.

    Exceptions are captured per shard rather than raised, so callers
    decide between strict and survivor handling.
    """
    ordered = sorted(shards, key=lambda s: s.shard_id)

    def capture(shard):
        try:
            return shard.shard_id, fn(shard), None
        except GelkitError as e:
            return shard.shard_id, None, e

    width = min(_pool_width(threads), len(ordered))
    if width <= 1:
        rows = [capture(s) for s in ordered]
    else:
        with ThreadPoolExecutor(max_workers=width) as pool:
            rows = list(pool.map(capture, ordered))
    rows.sort(key=lambda r: r[0])
    return rows


def _shard_grouping(shard: Shard):
    return make_grouping(shard.n_obs, shard.n_groups, seed=shard.seed)


def dgel_estimate(shards, model: MomentModel, *, strict=True,
                  weighted=False, threads=None, **fit_opts) -> DgelFit:
    """Fit GEL on every shard and average the local estimates.

    Equal-weight averaging is the default even when shard sizes differ
    by one; weighted=True switches to N_k weights (an experimentation
    flag, never the reference behavior).  strict=True fails on any shard
    failure; otherwise survivors are averaged under a warning.
    """
    if not shards:
        raise ArgumentError("no shards given")
    rows = _map_shards(
        lambda s: gel_estimate(s.data, model, _shard_grouping(s),
                               **fit_opts),
        shards, threads)
    failures = [(sid, err) for sid, _, err in rows if err is not None]
    fits = [(sid, fit) for sid, fit, err in rows if err is None]
    if failures:
        msg = "; ".join(f"shard {sid}: {err}" for sid, err in failures)
        if strict or not fits:
            raise type(failures[0][1])(f"{len(failures)} shard(s) failed: "
                                       f"{msg}")
        warnings.warn(f"averaging {len(fits)} surviving shard(s); "
                      f"failed: {msg}")
    thetas = np.array([f.theta for _, f in fits])
    if weighted:
        w = np.array([f.n_obs for _, f in fits], dtype=float)
        theta = (w[:, None] * thetas).sum(axis=0) / w.sum()
    else:
        theta = thetas.mean(axis=0)
    return DgelFit(theta_dgel=theta, local_fits=[f for _, f in fits],
                   diagnostics={"failed_shards": [sid for sid, _ in failures],
                                "weighted": bool(weighted)})


def dgel_test(shards, model: MomentModel, theta0, *, threads=None,
              **opts) -> DgelFit:
    """Aggregate per-shard log-ratio tests of H0: theta = theta0.

    S averages the K local -2 log ratios; the chi-square calibration
    refers K*S/mbar to df = K*p (each local scaled ratio is chi-square
    with p degrees of freedom, and shards are independent).  All shards
    must share the same mean group size; a shard where theta0 is
    infeasible turns the aggregate into a flagged rejection.
    """
    if not shards:
        raise ArgumentError("no shards given")
    theta0 = np.asarray(theta0, dtype=float).reshape(model.param_dim)
    mbars = [s.mean_group_size for s in shards]
    if max(mbars) - min(mbars) > 1e-12 * max(mbars):
        raise ArgumentError(
            "aggregated testing needs equal mean group sizes across "
            f"shards; got {sorted(set(round(m, 6) for m in mbars))}. "
            "Adjust K or n_groups so N_k / n_k match.")
    mbar = mbars[0]

    def one(shard: Shard) -> tuple[GelFit, TestResult]:
        grouping = _shard_grouping(shard)
        fit = gel_estimate(shard.data, model, grouping, **opts)
        tr = gel_test(shard.data, model, grouping, theta0=theta0, fit=fit,
                      **opts)
        return fit, tr

    rows = _map_shards(one, shards, threads)
    failures = [(sid, err) for sid, _, err in rows if err is not None]
    if failures:
        msg = "; ".join(f"shard {sid}: {err}" for sid, err in failures)
        raise type(failures[0][1])(f"{len(failures)} shard(s) failed: {msg}")
    fits = [fit for _, (fit, _), _ in rows]
    results = [tr for _, (_, tr), _ in rows]

    K = len(results)
    p = model.param_dim
    infeasible = [s.shard_id for s, tr in zip(sorted(shards,
                  key=lambda s: s.shard_id), results) if tr.infeasible]
    theta = np.mean([f.theta for f in fits], axis=0)
    if infeasible:
        agg = float("inf")
        statistic = float("inf")
        p_value = 0.0
    else:
        # per-shard -2logR at theta0 relative to each local optimum, so
        # each term is chi-square p after the 1/mbar scaling
        local = [max(tr.raw_neg2log_ratio - tr.profile_minimum, 0.0)
                 for tr in results]
        agg = float(np.sum(local)) / K
        statistic = K * agg / mbar
        p_value = chisq_sf(statistic, K * p)
    return DgelFit(theta_dgel=theta, local_fits=fits, agg_neg2logR=agg,
                   statistic=statistic, df=K * p, p_value=p_value,
                   calibration="sum_chisq",
                   diagnostics={"infeasible_shards": infeasible,
                                "theta0": theta0,
                                "local_statistics": [tr.statistic
                                                     for tr in results]})
