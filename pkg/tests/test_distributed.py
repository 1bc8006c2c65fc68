import numpy as np
import pytest

from gelkit.core import gel_estimate, gel_test
from gelkit.distributed import (Shard, dgel_estimate, dgel_test,
                                partition_shards)
from gelkit.exceptions import ArgumentError, InfeasibleError
from gelkit.grouping import make_grouping
from gelkit.models import mean_model, normal_three_moment_model
from gelkit.rng import splitmix64


# -------------------------------------------------------------- partitioning

def test_partition_sizes_near_equal(rng):
    data = rng.normal(size=10)
    shards = partition_shards(data, 3, master_seed=0)
    assert [s.n_obs for s in shards] == [4, 3, 3]
    assert [s.shard_id for s in shards] == [0, 1, 2]
    stacked = np.concatenate([s.data.ravel() for s in shards])
    assert sorted(stacked.tolist()) == sorted(data.tolist())


def test_single_shard_keeps_row_order(rng):
    data = rng.normal(size=25)
    (shard,) = partition_shards(data, 1, master_seed=99)
    assert np.array_equal(shard.data.ravel(), data)
    assert shard.seed == splitmix64(99, 0)


def test_partition_is_seeded_permutation(rng):
    data = rng.normal(size=40)
    a = partition_shards(data, 4, master_seed=5)
    b = partition_shards(data, 4, master_seed=5)
    c = partition_shards(data, 4, master_seed=6)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.data, sb.data)
    assert any(not np.array_equal(sa.data, sc.data)
               for sa, sc in zip(a, c))


def test_partition_rejects_bad_k(rng):
    data = rng.normal(size=5)
    with pytest.raises(ArgumentError):
        partition_shards(data, 0, master_seed=0)
    with pytest.raises(ArgumentError):
        partition_shards(data, 6, master_seed=0)


# ----------------------------------------------------------- k=1 equivalence

def test_k1_estimate_bit_equals_plain_gel(rng):
    data = rng.normal(0.0, 2.0, size=500)
    model = normal_three_moment_model()
    shards = partition_shards(data, 1, master_seed=17)
    dfit = dgel_estimate(shards, model)
    plain = gel_estimate(data, model,
                         make_grouping(500, 100, seed=splitmix64(17, 0)))
    assert np.array_equal(dfit.theta_dgel, plain.theta)


def test_k1_test_bit_equals_plain_gel(rng):
    data = rng.normal(0.0, 2.0, size=400)
    model = normal_three_moment_model()
    shards = partition_shards(data, 1, master_seed=3)
    dres = dgel_test(shards, model, [0.0, 2.0])
    grouping = make_grouping(400, 100, seed=splitmix64(3, 0))
    fit = gel_estimate(data, model, grouping)
    tres = gel_test(data, model, grouping, [0.0, 2.0], fit=fit)
    assert dres.statistic == pytest.approx(tres.statistic, abs=0)
    assert dres.df == tres.df
    assert dres.p_value == pytest.approx(tres.p_value, abs=0)


# ------------------------------------------------------------- aggregation

def test_average_of_identical_shards_is_local_fit(rng):
    block = rng.normal(size=100)
    shards = [Shard(i, block[:, None], 10, seed=7) for i in range(3)]
    fit = dgel_estimate(shards, mean_model(1))
    assert fit.theta_dgel == pytest.approx([block.mean()], abs=1e-12)
    for lf in fit.local_fits:
        assert lf.theta == pytest.approx([block.mean()], abs=1e-12)


def test_shard_order_invariance(rng):
    data = rng.normal(0.0, 1.5, size=600)
    shards = partition_shards(data, 5, master_seed=1)
    fwd = dgel_estimate(shards, mean_model(1))
    rev = dgel_estimate(list(reversed(shards)), mean_model(1))
    assert np.array_equal(fwd.theta_dgel, rev.theta_dgel)
    t_fwd = dgel_test(shards, mean_model(1), [0.0])
    t_rev = dgel_test(list(reversed(shards)), mean_model(1), [0.0])
    assert t_fwd.statistic == pytest.approx(t_rev.statistic, abs=0)


def test_weighted_average_uses_shard_sizes(rng):
    a = rng.normal(0.0, 1.0, size=40)
    b = rng.normal(10.0, 1.0, size=10)
    shards = [Shard(0, a[:, None], 8, seed=0),
              Shard(1, b[:, None], 2, seed=1)]
    plain = dgel_estimate(shards, mean_model(1))
    weighted = dgel_estimate(shards, mean_model(1), weighted=True)
    assert plain.theta_dgel == pytest.approx(
        [(a.mean() + b.mean()) / 2], abs=1e-10)
    assert weighted.theta_dgel == pytest.approx(
        [(40 * a.mean() + 10 * b.mean()) / 50], abs=1e-10)


# ----------------------------------------------------------------- testing

def test_statistic_sums_local_profiled_ratios(rng):
    data = rng.normal(0.0, 2.0, size=900)
    model = normal_three_moment_model()
    shards = partition_shards(data, 3, master_seed=2)
    res = dgel_test(shards, model, [0.0, 2.0])
    locals_ = res.diagnostics["local_statistics"]
    mbar = shards[0].mean_group_size
    # each local entry is a per-shard profiled statistic; they add up
    assert res.statistic == pytest.approx(sum(locals_), rel=1e-12)
    assert res.agg_neg2logR == pytest.approx(
        res.statistic * mbar / 3, rel=1e-12)
    assert res.df == 3 * 2
    assert res.calibration == "sum_chisq"
    assert all(v >= 0 for v in locals_)


def test_null_ordering_by_distance(rng):
    # the grand mean is not each shard's optimum, so its statistic is a
    # proper chi-square draw; it must still beat a clearly false null
    data = rng.normal(size=500)
    shards = partition_shards(data, 5, master_seed=8)
    near = dgel_test(shards, mean_model(1), [data.mean()])
    far = dgel_test(shards, mean_model(1), [data.mean() + 0.3])
    assert near.statistic >= 0
    assert 0.0 < near.p_value <= 1.0
    assert far.statistic > near.statistic
    assert far.p_value < near.p_value


def test_unequal_mean_group_sizes_refused(rng):
    a = rng.normal(size=40)
    b = rng.normal(size=60)
    shards = [Shard(0, a[:, None], 10, seed=0),   # mbar = 4
              Shard(1, b[:, None], 10, seed=1)]   # mbar = 6
    with pytest.raises(ArgumentError):
        dgel_test(shards, mean_model(1), [0.0])


def test_infeasible_shard_flagged(rng):
    a = rng.normal(0.0, 1.0, size=50)
    b = rng.normal(50.0, 1.0, size=50)  # cannot support theta0 = 0
    shards = [Shard(0, a[:, None], 10, seed=0),
              Shard(1, b[:, None], 10, seed=1)]
    res = dgel_test(shards, mean_model(1), [0.0])
    assert res.statistic == np.inf
    assert res.p_value == 0.0
    assert res.diagnostics["infeasible_shards"] == [1]


# ------------------------------------------------------------ failure modes

def _constant_shard(value, n, shard_id, n_groups=5):
    return Shard(shard_id, np.full((n, 1), value), n_groups, seed=0)


def test_strict_mode_raises_on_shard_failure(rng):
    ok = Shard(0, rng.normal(0, 2, size=(80, 1)), 8, seed=0)
    bad = _constant_shard(1.0, 80, 1, n_groups=8)  # zero variance
    with pytest.raises(InfeasibleError) as ei:
        dgel_estimate([ok, bad], normal_three_moment_model())
    assert "shard" in str(ei.value)


def test_survivor_mode_averages_remaining_shards(rng):
    ok = Shard(0, rng.normal(0, 2, size=(80, 1)), 8, seed=0)
    bad = _constant_shard(1.0, 80, 1, n_groups=8)
    with pytest.warns(UserWarning):
        fit = dgel_estimate([ok, bad], normal_three_moment_model(),
                            strict=False)
    solo = gel_estimate(ok.data, normal_three_moment_model(),
                        make_grouping(80, 8, seed=0))
    assert fit.theta_dgel == pytest.approx(solo.theta, abs=1e-12)
    assert fit.diagnostics["failed_shards"] == [1]


# -------------------------------------------------------------- concurrency

def test_pool_width_does_not_change_numbers(rng, monkeypatch):
    data = rng.normal(0.0, 2.0, size=800)
    model = normal_three_moment_model()
    shards = partition_shards(data, 4, master_seed=6)
    monkeypatch.setenv("GELKIT_THREADS", "1")
    a = dgel_estimate(shards, model)
    monkeypatch.setenv("GELKIT_THREADS", "4")
    b = dgel_estimate(shards, model)
    c = dgel_estimate(shards, model, threads=2)
    assert np.array_equal(a.theta_dgel, b.theta_dgel)
    assert np.array_equal(a.theta_dgel, c.theta_dgel)
