import numpy as np
import pytest

from oracle_helpers import brute_force_two_sample_neg2logR
from gelkit.dual import solve_dual
from gelkit.exceptions import ArgumentError, InfeasibleError
from gelkit.grouping import make_grouping
from gelkit.models import mean_model, normal_three_moment_model
from gelkit.two_sample import (group_weights, make_two_sample_problem,
                               solve_two_sample_system, two_sample_mean_test,
                               two_sample_test)


# ------------------------------------------------------------ construction

def test_requires_just_identified_model():
    X = np.zeros((6, 1))
    with pytest.raises(ArgumentError):
        make_two_sample_problem(X, X, normal_three_moment_model(), 2)


def test_divisibility_enforced_without_trim(rng):
    X = rng.normal(size=10)
    Y = rng.normal(size=9)
    with pytest.raises(ArgumentError):
        make_two_sample_problem(X, Y, mean_model(1), 3)


def test_trim_drops_seeded_remainder(rng):
    X = rng.normal(size=11)
    Y = rng.normal(size=9)
    prob = make_two_sample_problem(X, Y, mean_model(1), 3, seed=4,
                                   trim=True)
    assert prob.N1 == 9 and prob.N2 == 9
    assert prob.trimmed_x == 2 and prob.trimmed_y == 0
    prob2 = make_two_sample_problem(X, Y, mean_model(1), 3, seed=4,
                                    trim=True)
    assert np.array_equal(prob.X, prob2.X)
    prob3 = make_two_sample_problem(X, Y, mean_model(1), 3, seed=5,
                                    trim=True)
    assert not np.array_equal(prob.X, prob3.X)


def test_tau_weights():
    X = np.zeros((30, 1))
    Y = np.zeros((60, 1))
    prob = make_two_sample_problem(X + 1.0, Y + 1.0, mean_model(1), 10)
    assert prob.tau1 == pytest.approx(3.0)
    assert prob.tau2 == pytest.approx(1.5)
    assert prob.N == 90


# ----------------------------------------------------------- trivial cases

def test_identical_samples_accept_zero_difference(rng):
    X = rng.normal(size=40)
    prob = make_two_sample_problem(X, X.copy(), mean_model(1), 10, seed=0)
    fit = two_sample_test(prob, [0.0])
    assert fit.lambda_star == pytest.approx(np.zeros(1), abs=1e-9)
    assert fit.statistic == pytest.approx(0.0, abs=1e-10)
    assert fit.p_value == pytest.approx(1.0, abs=1e-8)
    assert fit.converged


def test_statistic_vanishes_at_sample_difference(rng):
    X = rng.normal(0.0, 1.0, size=40)
    Y = rng.normal(0.7, 1.3, size=60)
    pi_hat = Y.mean() - X.mean()
    prob = make_two_sample_problem(X, Y, mean_model(1), 10, seed=1)
    fit = two_sample_test(prob, [pi_hat])
    assert fit.statistic == pytest.approx(0.0, abs=1e-9)
    assert fit.theta_x_star == pytest.approx([X.mean()], abs=1e-7)
    assert fit.theta_y_star == pytest.approx([Y.mean()], abs=1e-7)


# ------------------------------------------------------------- closed form

def test_closed_form_two_point_samples():
    # X={0,2}, Y={1,3}, m=1, pi0=0: by symmetry theta* = 1.5; each dual
    # reduces to a two-point problem whose ratio sums to 4 log(4/3)
    X = np.array([0.0, 2.0])
    Y = np.array([1.0, 3.0])
    prob = make_two_sample_problem(X, Y, mean_model(1), 1)
    fit = two_sample_test(prob, [0.0])
    assert fit.theta_x_star == pytest.approx([1.5], abs=1e-9)
    assert fit.theta_y_star == pytest.approx([1.5], abs=1e-9)
    assert fit.neg2logR == pytest.approx(1.1507282898071237, abs=1e-10)
    assert fit.statistic == pytest.approx(1.1507282898071237, abs=1e-10)
    assert fit.df == 1


# ------------------------------------------------------ brute-force oracle

def test_newton_system_matches_simplex_brute_force(rng):
    done = 0
    while done < 4:
        n1 = int(rng.integers(3, 7))
        n2 = int(rng.integers(3, 7))
        x = rng.normal(0.0, 1.0, size=n1)
        y = rng.normal(0.5, 1.0, size=n2)
        pi0 = float(rng.normal(scale=0.3))
        prob = make_two_sample_problem(x, y, mean_model(1), 1)
        try:
            fit = two_sample_test(prob, [pi0])
        except InfeasibleError:
            continue
        if not np.isfinite(fit.neg2logR):
            continue
        oracle = brute_force_two_sample_neg2logR(x, y, pi0)
        assert fit.neg2logR == pytest.approx(oracle, abs=1e-6), \
            f"instance {done}"
        done += 1


# -------------------------------------------------- profile cross-check

def test_matches_profile_decomposition(rng):
    # independent route: -2logR(pi0) = min_theta [ratio_X(theta) +
    # ratio_Y(theta+pi0)] with each ratio from its own grouped dual
    import scipy.optimize
    X = rng.normal(0.0, 1.0, size=60)
    Y = rng.normal(0.4, 1.2, size=40)
    m = 5
    prob = make_two_sample_problem(X, Y, mean_model(1), m, seed=3)
    fit = two_sample_test(prob, [0.1])

    gx = prob.X[prob.grouping_x.order].reshape(-1, m).mean(axis=1)
    gy = prob.Y[prob.grouping_y.order].reshape(-1, m).mean(axis=1)

    def ratio(groups, mult, theta):
        try:
            s = solve_dual(groups - theta)
        except InfeasibleError:
            return np.inf
        return 2.0 * mult * s.log_terms_sum

    def total(theta):
        return (ratio(gx, m, theta) + ratio(gy, m, theta + 0.1))

    res = scipy.optimize.minimize_scalar(
        total, bounds=(X.mean() - 1.0, X.mean() + 1.0), method="bounded",
        options={"xatol": 1e-12})
    assert fit.neg2logR == pytest.approx(res.fun, abs=1e-7)


# ------------------------------------------------------------- invariances

def test_swap_symmetry(rng):
    X = rng.normal(0.0, 1.0, size=30)
    Y = rng.normal(0.5, 1.5, size=20)
    m = 5
    gx = make_grouping(30, 6, seed=11)
    gy = make_grouping(20, 4, seed=12)
    fwd = two_sample_test(
        make_two_sample_problem(X, Y, mean_model(1), m,
                                grouping_x=gx, grouping_y=gy), [0.2])
    rev = two_sample_test(
        make_two_sample_problem(Y, X, mean_model(1), m,
                                grouping_x=gy, grouping_y=gx), [-0.2])
    assert rev.statistic == pytest.approx(fwd.statistic, abs=1e-8)
    assert rev.p_value == pytest.approx(fwd.p_value, abs=1e-8)


def test_group_weight_identities(rng):
    X = rng.normal(0.0, 1.0, size=40)
    Y = rng.normal(0.3, 1.0, size=30)
    m = 5
    prob = make_two_sample_problem(X, Y, mean_model(1), m, seed=2)
    fit = two_sample_test(prob, [0.0])
    p, q = group_weights(prob, fit)
    assert p.sum() == pytest.approx(1.0 / m, abs=1e-10)
    assert q.sum() == pytest.approx(1.0 / m, abs=1e-10)
    assert np.all(p > 0) and np.all(q > 0)
    # weighted group means reproduce the constrained estimates
    gx = prob.X[prob.grouping_x.order].reshape(-1, m).mean(axis=1)
    gy = prob.Y[prob.grouping_y.order].reshape(-1, m).mean(axis=1)
    assert (m * p) @ gx == pytest.approx(fit.theta_x_star[0], abs=1e-8)
    assert (m * q) @ gy == pytest.approx(fit.theta_y_star[0], abs=1e-8)


def test_mean_test_convenience_wrapper(rng):
    X = rng.normal(size=40)
    Y = rng.normal(0.4, 1.0, size=40)
    a = two_sample_mean_test(X, Y, 8, [0.0], seed=7)
    prob = make_two_sample_problem(X, Y, mean_model(1), 8, seed=7)
    b = two_sample_test(prob, [0.0])
    assert a.statistic == pytest.approx(b.statistic, abs=1e-12)
    assert a.p_value == pytest.approx(b.p_value, abs=1e-12)


def test_far_null_rejected(rng):
    X = rng.normal(0.0, 1.0, size=50)
    Y = rng.normal(0.0, 1.0, size=50)
    prob = make_two_sample_problem(X, Y, mean_model(1), 5, seed=1)
    try:
        fit = two_sample_test(prob, [5.0])
        assert fit.p_value <= 1e-6
    except InfeasibleError:
        pass  # a null this far can sit outside both hulls
