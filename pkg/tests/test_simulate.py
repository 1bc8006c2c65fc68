"""Generators, split-and-average EL, study configs, and the three study
runners at desk scale."""

import json
import os

import numpy as np
import pytest

from gelkit import ArgumentError, NonConvergence, el_estimate, mean_model
from gelkit.rng import splitmix64
from gelkit.simulate import (EX3_MEAN_X, SimConfig, SimReport,
                             _atomic_write_text, _failure_policy,
                             dcel_estimate, ex3_mean_shift, gen_example1,
                             gen_example2, gen_example3, run_mse_study,
                             run_size_power_study, run_timing_bench)


# ---------------------------------------------------------------------------
# generators


def test_ex1_shape_and_determinism():
    a = gen_example1(40, mu=1.0, sigma=0.5, seed=9)
    b = gen_example1(40, mu=1.0, sigma=0.5, seed=9)
    c = gen_example1(40, mu=1.0, sigma=0.5, seed=10)
    assert a.shape == (40, 1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_ex1_moments():
    N = 200_000
    X = gen_example1(N, mu=1.5, sigma=2.0, seed=3)[:, 0]
    assert abs(X.mean() - 1.5) < 5 * 2.0 / np.sqrt(N)
    assert abs(X.std() - 2.0) < 0.05


def test_ex1_rejects_bad_args():
    with pytest.raises(ArgumentError):
        gen_example1(0)
    with pytest.raises(ArgumentError):
        gen_example1(10, sigma=0.0)
    with pytest.raises(ArgumentError):
        gen_example1(10, sigma=-1.0)


def test_ex2_shapes_and_determinism():
    y, X = gen_example2(30, p=5, seed=4)
    y2, X2 = gen_example2(30, p=5, seed=4)
    y3, _ = gen_example2(30, p=5, seed=5)
    assert y.shape == (30,) and X.shape == (30, 5)
    assert np.array_equal(y, y2) and np.array_equal(X, X2)
    assert not np.array_equal(y, y3)


def test_ex2_covariate_correlation():
    _, X = gen_example2(120_000, p=5, rho=0.3, seed=6)
    corr = np.corrcoef(X.T)
    off = corr[~np.eye(5, dtype=bool)]
    assert np.all(np.abs(off - 0.3) < 0.02)
    assert np.all(np.abs(X.var(axis=0) - 1.0) < 0.03)


def test_ex2_noise_variance_tracks_projection():
    # E[e^2 | X] = 1 + alpha * (1'X / sqrt(p))^2, so regressing the
    # squared residual on s^2 recovers (intercept, slope) = (1, alpha).
    N, p, alpha = 200_000, 5, 2.0
    beta = np.arange(1.0, p + 1)
    y, X = gen_example2(N, p=p, rho=0.2, alpha=alpha, beta0=1.0, seed=8)
    e2 = (y - 1.0 - X @ beta) ** 2
    s2 = (X.sum(axis=1) / np.sqrt(p)) ** 2
    A = np.column_stack([np.ones(N), s2])
    coef, *_ = np.linalg.lstsq(A, e2, rcond=None)
    assert abs(coef[0] - 1.0) < 0.15
    assert abs(coef[1] - alpha) < 0.25

    y0, X0 = gen_example2(N, p=p, rho=0.2, alpha=0.0, beta0=1.0, seed=8)
    e0 = y0 - 1.0 - X0 @ beta
    assert abs(e0.var() - 1.0) < 0.03


def test_ex2_default_beta_is_one_to_p():
    explicit = gen_example2(25, p=4, beta=np.arange(1.0, 5.0), seed=2)
    default = gen_example2(25, p=4, seed=2)
    assert np.array_equal(explicit[0], default[0])
    assert np.array_equal(explicit[1], default[1])


def test_ex2_rejects_bad_args():
    with pytest.raises(ArgumentError, match="positive definite"):
        gen_example2(10, p=5, rho=-0.3)
    with pytest.raises(ArgumentError):
        gen_example2(10, p=5, rho=1.0)
    with pytest.raises(ArgumentError):
        gen_example2(10, p=0)
    with pytest.raises(ArgumentError):
        gen_example2(0, p=5)
    with pytest.raises(ArgumentError):
        gen_example2(10, p=5, alpha=-0.5)


def test_ex3_shapes_means_and_shift():
    N = 200_000
    X, Y = gen_example3(N, 0, seed=11)
    assert X.shape == (N, 1) and Y.shape == (N, 1)
    # mixture sd is about 450, so 5 standard errors is about 5
    se = 5 * 450 / np.sqrt(N)
    assert abs(X.mean() - EX3_MEAN_X) < 5 + se
    assert abs(Y.mean() - X.mean()) < 8
    _, Y3 = gen_example3(N, 3, seed=11)
    gap = Y3.mean() - X.mean()
    assert abs(gap - ex3_mean_shift(3)) < 8

    a = gen_example3(50, 2, seed=7)
    b = gen_example3(50, 2, seed=7)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_ex3_rejects_bad_grid_points():
    for j in (-1, 6, 0.5):
        with pytest.raises(ArgumentError):
            gen_example3(10, j)
    with pytest.raises(ArgumentError):
        gen_example3(0, 0)


def test_ex3_mean_shift_values():
    assert ex3_mean_shift(0) == 0.0
    assert ex3_mean_shift(3) == pytest.approx(20.0)
    assert ex3_mean_shift(5) == pytest.approx(100.0 / 3.0)


# ---------------------------------------------------------------------------
# split-and-average EL


def test_dcel_one_block_is_plain_el(rng):
    data = rng.normal(size=(50, 1))
    theta = dcel_estimate(data, 1, mean_model(1))
    assert np.array_equal(theta, el_estimate(data, mean_model(1)).theta)


def test_dcel_even_blocks_average_to_grand_mean(rng):
    # just-identified EL per block gives the block mean exactly, and
    # averaging equal-size block means recovers the grand mean
    data = rng.normal(size=(100, 1))
    theta = dcel_estimate(data, 5, mean_model(1), seed=3)
    assert theta[0] == pytest.approx(data.mean(), abs=1e-10)


def test_dcel_uneven_blocks_depend_on_seed(rng):
    data = rng.normal(size=(10, 1))
    t0 = dcel_estimate(data, 3, mean_model(1), seed=0)
    t0b = dcel_estimate(data, 3, mean_model(1), seed=0)
    t1 = dcel_estimate(data, 3, mean_model(1), seed=1)
    assert np.array_equal(t0, t0b)
    assert not np.array_equal(t0, t1)


def test_dcel_rejects_bad_k(rng):
    data = rng.normal(size=(10, 1))
    with pytest.raises(ArgumentError):
        dcel_estimate(data, 0, mean_model(1))
    with pytest.raises(ArgumentError):
        dcel_estimate(data, 11, mean_model(1))


# ---------------------------------------------------------------------------
# config and report plumbing


def test_config_roundtrip():
    cfg = SimConfig(example="ex1", replications=5, methods=["EL", "GEL"],
                    master_seed=2, N=100, grid=[1, 2],
                    method_params={"GEL": {"n": 10}})
    again = SimConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_config_uppercases_methods():
    cfg = SimConfig(example="ex1", replications=1, methods=["gel", "el"])
    assert cfg.methods == ["GEL", "EL"]


def test_config_validation_errors():
    with pytest.raises(ArgumentError, match="unknown example"):
        SimConfig(example="ex9", replications=1, methods=["EL"])
    with pytest.raises(ArgumentError):
        SimConfig(example="ex1", replications=0, methods=["EL"])
    with pytest.raises(ArgumentError):
        SimConfig(example="ex1", replications=1, methods=[])
    with pytest.raises(ArgumentError, match="unknown method"):
        SimConfig(example="ex1", replications=1, methods=["MLE"])
    for bad_alpha in (0.0, 1.2):
        with pytest.raises(ArgumentError):
            SimConfig(example="ex1", replications=1, methods=["EL"],
                      alpha=bad_alpha)
    with pytest.raises(ArgumentError, match="unknown config keys"):
        SimConfig.from_dict({"example": "ex1", "replications": 1,
                             "methods": ["EL"], "bogus": 1})
    with pytest.raises(ArgumentError, match="at least"):
        SimConfig.from_dict({"example": "ex1"})


def test_method_param_lookup():
    cfg = SimConfig(example="ex1", replications=1, methods=["GEL"],
                    method_params={"GEL": {"n": 25}})
    assert cfg.method_param("GEL", "n", 100) == 25
    assert cfg.method_param("GEL", "tol", 1e-8) == 1e-8
    assert cfg.method_param("EL", "n", 7) == 7


def test_atomic_write(tmp_path):
    target = tmp_path / "out.json"
    _atomic_write_text(target, "hello\n")
    assert target.read_text() == "hello\n"
    leftovers = [p for p in os.listdir(tmp_path) if ".tmp." in p]
    assert leftovers == []


def test_report_json_and_csv(tmp_path):
    rows = [{"method": "EL", "mse": 0.25},
            {"method": "GEL", "mse": 0.5, "extra": 1}]
    rep = SimReport(kind="mse", config={"example": "ex1"}, rows=rows,
                    meta={"truth": [0.0]})
    doc = json.loads(rep.to_json())
    assert doc["kind"] == "mse"
    assert doc["rows"] == rows

    jpath = tmp_path / "r.json"
    rep.to_json(jpath)
    assert json.loads(jpath.read_text())["rows"] == rows

    csv_text = rep.to_csv(tmp_path / "r.csv")
    lines = csv_text.strip().splitlines()
    assert lines[0] == "method,mse,extra"
    assert lines[1] == "EL,0.25,"
    assert lines[2] == "GEL,0.5,1"
    assert (tmp_path / "r.csv").read_text() == csv_text


# ---------------------------------------------------------------------------
# MSE study


def _tiny_mse_config(**over):
    base = dict(example="ex1", replications=6, methods=["EL", "GEL"],
                master_seed=7, N=400, method_params={"GEL": {"n": 20}},
                threads=1)
    base.update(over)
    return SimConfig(**base)


def test_mse_study_schema_and_determinism():
    rep = run_mse_study(_tiny_mse_config())
    assert rep.kind == "mse"
    assert [r["method"] for r in rep.rows] == ["EL", "GEL"]
    for row in rep.rows:
        assert set(row) == {"method", "n_effective", "failures",
                            "mean_seconds", "mse_mu", "sd_mu",
                            "mse_sigma", "sd_sigma"}
        assert row["n_effective"] == 6 and row["failures"] == 0
        assert row["mean_seconds"] > 0
        assert row["mse_mu"] > 0 and row["mse_sigma"] > 0
    assert rep.meta["truth"] == [0.0, 2.0]
    assert rep.failures == {}

    again = run_mse_study(_tiny_mse_config())
    for a, b in zip(rep.rows, again.rows):
        assert a["mse_mu"] == b["mse_mu"]
        assert a["mse_sigma"] == b["mse_sigma"]


def test_mse_study_pool_width_invariance():
    narrow = run_mse_study(_tiny_mse_config(threads=1))
    wide = run_mse_study(_tiny_mse_config(threads=3))
    for a, b in zip(narrow.rows, wide.rows):
        assert a["mse_mu"] == b["mse_mu"]
        assert a["sd_sigma"] == b["sd_sigma"]


def test_mse_study_rejects_wt():
    with pytest.raises(ArgumentError, match="two-sample"):
        run_mse_study(_tiny_mse_config(methods=["EL", "WT"]))


def test_mse_study_needs_truth():
    cfg = SimConfig(example="custom", replications=2, methods=["EL"],
                    threads=1)
    gen = lambda seed: np.arange(4.0)[:, None]
    with pytest.raises(ArgumentError, match="true parameter"):
        run_mse_study(cfg, generator=gen, model=mean_model(1))


def test_custom_design_requires_generator_and_model():
    cfg = SimConfig(example="custom", replications=2, methods=["EL"])
    with pytest.raises(ArgumentError, match="generator"):
        run_mse_study(cfg, truth=[0.0])


def test_custom_mse_study_exact_value():
    # fixed dataset with mean 1.5 against truth 1.0: every replication
    # contributes squared error 0.25, so the sd across reps is zero
    cfg = SimConfig(example="custom", replications=3, methods=["EL"],
                    threads=1)
    gen = lambda seed: np.array([[0.0], [1.0], [2.0], [3.0]])
    rep = run_mse_study(cfg, generator=gen, model=mean_model(1),
                        truth=[1.0])
    row = rep.rows[0]
    assert row["mse_theta_0"] == pytest.approx(0.25, abs=1e-12)
    assert row["sd_theta_0"] == pytest.approx(0.0, abs=1e-12)


def test_ex3_has_no_mse_design():
    cfg = SimConfig(example="ex3", replications=2, methods=["EL"],
                    N1=100, N2=100)
    with pytest.raises(ArgumentError, match="point-estimation"):
        run_mse_study(cfg)


# ---------------------------------------------------------------------------
# size and power study


def test_size_study_ex1_schema():
    cfg = SimConfig(example="ex1", replications=30, methods=["GEL"],
                    master_seed=3, N=250,
                    method_params={"GEL": {"n": 25}}, threads=1)
    rep = run_size_power_study(cfg)
    assert rep.kind == "size_power"
    row = rep.rows[0]
    assert set(row) == {"method", "rejection_rate", "binom_se",
                        "n_effective", "failures", "alpha"}
    rate = row["rejection_rate"]
    assert 0.0 <= rate <= 1.0
    assert row["binom_se"] == pytest.approx(
        np.sqrt(rate * (1 - rate) / 30), abs=1e-15)
    assert row["n_effective"] == 30 and row["failures"] == 0
    assert row["alpha"] == 0.05


def test_size_study_theta0_override_rejects_far_null():
    gen = lambda seed: np.random.default_rng(seed).normal(size=(200, 1))
    base = dict(example="custom", replications=10, methods=["EL"],
                master_seed=5, threads=1)
    far = SimConfig(params={"theta0": [5.0]}, **base)
    rep = run_size_power_study(far, generator=gen, model=mean_model(1),
                               truth=[0.0])
    assert rep.rows[0]["rejection_rate"] == 1.0

    near = run_size_power_study(SimConfig(**base), generator=gen,
                                model=mean_model(1), truth=[0.0])
    assert near.rows[0]["rejection_rate"] <= 0.3


def test_size_study_rejects_wt_for_one_sample():
    cfg = SimConfig(example="ex1", replications=2, methods=["WT"], N=100)
    with pytest.raises(ArgumentError, match="two-sample"):
        run_size_power_study(cfg)


def test_size_power_ex3_rows():
    cfg = SimConfig(example="ex3", replications=5, methods=["GEL", "WT"],
                    master_seed=1, N1=240, N2=240, grid=[0, 3],
                    method_params={"GEL": {"m": 40}}, threads=1)
    rep = run_size_power_study(cfg)
    keys = {(r["method"], r["j"]) for r in rep.rows}
    assert keys == {("GEL", 0), ("GEL", 3), ("WT", 0), ("WT", 3)}
    for row in rep.rows:
        assert 0.0 <= row["rejection_rate"] <= 1.0
        assert row["n_effective"] == 5


def test_ex3_study_rejects_point_methods():
    cfg = SimConfig(example="ex3", replications=2, methods=["EL"],
                    N1=100, N2=100)
    with pytest.raises(ArgumentError, match="GEL and WT"):
        run_size_power_study(cfg)


def test_ex3_study_needs_both_sizes():
    cfg = SimConfig(example="ex3", replications=2, methods=["GEL"], N1=100)
    with pytest.raises(ArgumentError, match="N1 and N2"):
        run_size_power_study(cfg)


# ---------------------------------------------------------------------------
# failure policy


def test_failure_policy_warns_below_one_percent():
    cfg = SimConfig(example="ex1", replications=1000, methods=["EL"], N=10)
    failures = {"EL": [(i, "boom") for i in range(9)]}
    with pytest.warns(UserWarning, match="excluded from summaries"):
        _failure_policy(cfg, failures)


def test_failure_policy_aborts_at_one_percent():
    cfg = SimConfig(example="ex1", replications=1000, methods=["EL"], N=10)
    failures = {"EL": [(i, "boom") for i in range(10)]}
    with pytest.raises(NonConvergence, match="failure rate >= 1%"):
        _failure_policy(cfg, failures)
    _failure_policy(cfg, {"EL": []})  # clean run stays silent


# ---------------------------------------------------------------------------
# timing bench


def test_timing_bench_rows():
    cfg = SimConfig(example="ex1", replications=3, methods=["GEL"],
                    master_seed=2, grid=[200, 400],
                    method_params={"GEL": {"n": 20}})
    rep = run_timing_bench(cfg)
    assert rep.kind == "timing"
    assert [r["N"] for r in rep.rows] == [200, 400]
    for row in rep.rows:
        assert row["method"] == "GEL"
        assert row["median_seconds"] > 0
        assert row["reps"] == 3


def test_timing_bench_needs_grid():
    cfg = SimConfig(example="ex1", replications=2, methods=["GEL"], N=100)
    with pytest.raises(ArgumentError, match="grid"):
        run_timing_bench(cfg)
    with pytest.raises(ArgumentError, match="positive"):
        run_timing_bench(SimConfig(example="ex1", replications=2,
                                   methods=["GEL"], grid=[0]))
