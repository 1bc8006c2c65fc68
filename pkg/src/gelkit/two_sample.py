"""Two-sample grouped empirical likelihood for a parameter difference.

Both samples share one moment model (r = p) and one exact group size m.
The log-ratio for a hypothesized difference pi0 = theta_y - theta_x is
obtained by solving a 2p nonlinear system in (theta_x, lambda) with a
damped Newton iteration; a quasi-Newton minimization of the two summed
one-sample profiles serves as a fallback when the Newton solve stalls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import _Profile, _bfgs_profile, chisq_sf, gel_estimate
from .exceptions import (ArgumentError, InfeasibleAtInit, InfeasibleError,
                         NonConvergence)
from .grouping import Grouping, make_grouping
from .models import MomentModel, as_data_matrix, mean_model
from .rng import splitmix64


@dataclass(frozen=True)
class TwoSampleProblem:
    """Paired samples, shared model, and the common group size m.

    Group sizes are exactly m in both samples: construction refuses
    non-multiples unless asked to trim.
    """

    X: np.ndarray = field(repr=False)
    Y: np.ndarray = field(repr=False)
    model: MomentModel
    m: int
    grouping_x: Grouping = field(repr=False)
    grouping_y: Grouping = field(repr=False)
    trimmed_x: int = 0
    trimmed_y: int = 0

    @property
    def n1(self) -> int:
        return self.grouping_x.n_groups

    @property
    def n2(self) -> int:
        return self.grouping_y.n_groups

    @property
    def N1(self) -> int:
        return self.X.shape[0]

    @property
    def N2(self) -> int:
        return self.Y.shape[0]

    @property
    def N(self) -> int:
        return self.N1 + self.N2

    @property
    def tau1(self) -> float:
        return self.N / self.N1

    @property
    def tau2(self) -> float:
        return self.N / self.N2


@dataclass
class TwoSampleFit:
    theta_x_star: np.ndarray
    theta_y_star: np.ndarray
    lambda_star: np.ndarray
    neg2logR: float
    statistic: float     # neg2logR / m
    df: int
    p_value: float
    converged: bool
    pi0: np.ndarray
    iterations: int = 0
    method: str = "newton"
    diagnostics: dict = field(default_factory=dict, repr=False)


def _check_explicit_grouping(grouping, N, m, label):
    if grouping.n_obs != N:
        raise ArgumentError(
            f"grouping for {label} covers {grouping.n_obs} rows, data has {N}")
    if not np.all(grouping.sizes == m):
        raise ArgumentError(
            f"grouping for {label} must have every group of size m={m}")


def _trim_to_multiple(data, m, seed):
    """Drop a uniformly random remainder so the row count divides by m."""
    N = data.shape[0]
    r = N % m
    if r == 0:
        return data, 0
    rng = np.random.default_rng(splitmix64(seed, 0))
    keep = np.sort(rng.permutation(N)[r:])
    return data[keep], r


def make_two_sample_problem(X, Y, model: MomentModel, m: int, *, seed=0,
                            trim=False, grouping_x=None,
                            grouping_y=None) -> TwoSampleProblem:
    """Validate shapes and divisibility and draw the two groupings.

    Sample sizes must be exact multiples of m. With trim=True a seeded
    random remainder is dropped instead (the discarded counts are kept
    on the problem); explicit groupings require pre-trimmed data.
    """
    m = int(m)
    if m < 1:
        raise ArgumentError(f"group size m must be >= 1, got {m}")
    if model.moment_dim != model.param_dim:
        raise ArgumentError(
            "the two-sample ratio is defined for just-identified models "
            f"(r = p); got r={model.moment_dim}, p={model.param_dim}")
    X = as_data_matrix(X, model.data_dim)
    Y = as_data_matrix(Y, model.data_dim)

    trimmed_x = trimmed_y = 0
    if X.shape[0] % m or Y.shape[0] % m:
        if not trim:
            raise ArgumentError(
                f"sample sizes ({X.shape[0]}, {Y.shape[0]}) must be exact "
                f"multiples of m={m}; pass trim=True to drop a seeded "
                "random remainder")
        if grouping_x is not None or grouping_y is not None:
            raise ArgumentError(
                "explicit groupings require data already trimmed to a "
                "multiple of m")
        X, trimmed_x = _trim_to_multiple(X, m, splitmix64(seed, 101))
        Y, trimmed_y = _trim_to_multiple(Y, m, splitmix64(seed, 102))

    if grouping_x is None:
        grouping_x = make_grouping(X.shape[0], X.shape[0] // m,
                                   seed=splitmix64(seed, 1))
    else:
        _check_explicit_grouping(grouping_x, X.shape[0], m, "X")
    if grouping_y is None:
        grouping_y = make_grouping(Y.shape[0], Y.shape[0] // m,
                                   seed=splitmix64(seed, 2))
    else:
        _check_explicit_grouping(grouping_y, Y.shape[0], m, "Y")

    return TwoSampleProblem(X=X, Y=Y, model=model, m=m,
                            grouping_x=grouping_x, grouping_y=grouping_y,
                            trimmed_x=trimmed_x, trimmed_y=trimmed_y)


def _system_state(problem, gevx, gevy, pi0, theta, lam):
    """Group averages, denominators, and normalized residuals at a point.

    Returns None when theta or theta+pi0 leaves the model domain or a
    denominator is not strictly positive (the point is unusable).
    """
    model = problem.model
    if not (model.in_domain(theta) and model.in_domain(theta + pi0)):
        return None
    gx = gevx.gbar(theta)
    gy = gevy.gbar(theta + pi0)
    u = 1.0 - problem.tau1 * (gx @ lam)
    v = 1.0 + problem.tau2 * (gy @ lam)
    if u.min() <= 0.0 or v.min() <= 0.0:
        return None
    F1 = (gx / u[:, None]).mean(axis=0)
    F2 = (gy / v[:, None]).mean(axis=0)
    return gx, gy, u, v, F1, F2


def _newton_attempt(problem, gevx, gevy, pi0, theta0, lam0, tol_eff,
                    max_iter):
    """Damped Newton on the packed unknowns (theta_x, lambda).

    Returns (theta, lam, u, v, iterations) or None when the iteration
    stalls; step candidates that cross a denominator boundary or leave
    the domain are rejected by the line search.
    """
    p = problem.model.param_dim
    theta = theta0.copy()
    lam = lam0.copy()
    state = _system_state(problem, gevx, gevy, pi0, theta, lam)
    if state is None:
        return None
    for it in range(1, max_iter + 1):
        gx, gy, u, v, F1, F2 = state
        if max(np.abs(F1).max(), np.abs(F2).max()) <= tol_eff:
            return theta, lam, u, v, it - 1
        Jx = gevx.group_jacobians(theta)
        Jy = gevy.group_jacobians(theta + pi0)
        iu, iv = 1.0 / u, 1.0 / v
        iu2, iv2 = iu * iu, iv * iv
        lJx = np.einsum("r,irp->ip", lam, Jx)
        lJy = np.einsum("r,jrp->jp", lam, Jy)
        n1, n2 = problem.n1, problem.n2
        A11 = (np.einsum("irp,i->rp", Jx, iu)
               + problem.tau1 * np.einsum("ir,ip,i->rp", gx, lJx, iu2)) / n1
        A12 = problem.tau1 * np.einsum("ir,is,i->rs", gx, gx, iu2) / n1
        A21 = (np.einsum("jrp,j->rp", Jy, iv)
               - problem.tau2 * np.einsum("jr,jp,j->rp", gy, lJy, iv2)) / n2
        A22 = -problem.tau2 * np.einsum("jr,js,j->rs", gy, gy, iv2) / n2
        J = np.block([[A11, A12], [A21, A22]])
        F = np.concatenate([F1, F2])
        try:
            dz = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            ridge = 1e-12 * max(1.0, np.abs(np.diag(J)).max())
            dz = np.linalg.solve(J + ridge * np.eye(2 * p), -F)
        fnorm = np.linalg.norm(F)
        alpha, accepted = 1.0, False
        for _ in range(60):
            cand_theta = theta + alpha * dz[:p]
            cand_lam = lam + alpha * dz[p:]
            cand = _system_state(problem, gevx, gevy, pi0, cand_theta,
                                 cand_lam)
            if cand is not None:
                fn = np.linalg.norm(np.concatenate([cand[4], cand[5]]))
                if fn <= (1.0 - 1e-4 * alpha) * fnorm:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            return None
        theta, lam, state = cand_theta, cand_lam, cand
    gx, gy, u, v, F1, F2 = state
    if max(np.abs(F1).max(), np.abs(F2).max()) <= tol_eff:
        return theta, lam, u, v, max_iter
    return None


class _SumProfile:
    """One-sample profile objectives of both samples, summed over theta_x.

    Duck-types the profile interface used by the quasi-Newton driver;
    the dual payload is the pair of per-sample dual solutions.
    """

    def __init__(self, profx: _Profile, profy: _Profile, pi0):
        self.profx = profx
        self.profy = profy
        self.pi0 = pi0
        self.model = profx.geval.model

    def value(self, theta):
        vx, dx = self.profx.value(theta)
        vy, dy = self.profy.value(theta + self.pi0)
        return vx + vy, (dx, dy)

    def try_value(self, theta):
        if not (self.model.in_domain(theta)
                and self.model.in_domain(theta + self.pi0)):
            return np.inf, None
        try:
            return self.value(theta)
        except (InfeasibleError, NonConvergence):
            return np.inf, None

    def gradient(self, theta, dual):
        return (self.profx.gradient(theta, dual[0])
                + self.profy.gradient(theta + self.pi0, dual[1]))


def _initial_theta(problem, pi0, init):
    """Starting theta_x with both theta_x and theta_x + pi0 in-domain."""
    model = problem.model
    candidates = []
    if init is not None:
        candidates.append(np.asarray(init, dtype=float).reshape(-1))
    else:
        fx = gel_estimate(problem.X, model, problem.grouping_x)
        candidates.append(fx.theta)
        fy = gel_estimate(problem.Y, model, problem.grouping_y)
        candidates.append(fy.theta - pi0)
        candidates.append(0.5 * (fx.theta + fy.theta - pi0))
    for cand in candidates:
        if model.in_domain(cand) and model.in_domain(cand + pi0):
            return cand
    raise ArgumentError(
        "no starting point keeps both theta_x and theta_x + pi0 inside "
        "the model domain; pass init= explicitly")


def solve_two_sample_system(problem: TwoSampleProblem, pi0, init=None, *,
                            tol=1e-10, max_iter=100,
                            inner_tol=1e-10) -> TwoSampleFit:
    """Solve for (theta_x, lambda) at the hypothesized difference pi0.

    The primary route is damped Newton on the joint score system with
    denominators kept strictly positive by step shortening.  If it
    stalls, theta_x is re-profiled by minimizing the sum of the two
    one-sample grouped ratios (their multipliers then satisfy the
    common-lambda relation), after which one more Newton polish runs.
    """
    p = problem.model.param_dim
    pi0 = np.asarray(pi0, dtype=float).reshape(p)
    gevx = problem.model.grouped(problem.X, problem.grouping_x)
    gevy = problem.model.grouped(problem.Y, problem.grouping_y)
    theta0 = _initial_theta(problem, pi0, init)

    state0 = _system_state(problem, gevx, gevy, pi0, theta0, np.zeros(p))
    if state0 is None:
        raise InfeasibleError(
            "initial point violates the model domain for theta_x + pi0")
    gscale = 1.0 + max(np.abs(state0[0]).max(), np.abs(state0[1]).max())
    tol_eff = tol * gscale

    result = _newton_attempt(problem, gevx, gevy, pi0, theta0, np.zeros(p),
                             tol_eff, max_iter)
    method = "newton"
    iterations = 0
    diagnostics = {}
    if result is None:
        # Newton stalled: profile theta_x through the summed one-sample
        # objectives, then polish the score system from that point
        profx = _Profile(gevx, inner_tol=inner_tol)
        profy = _Profile(gevy, inner_tol=inner_tol)
        sprof = _SumProfile(profx, profy, pi0)
        try:
            theta_p, val_p, dual_p, its_p, conv_p, _ = _bfgs_profile(
                sprof, problem.model, theta0, tol=1e-8 * gscale,
                max_iter=max(max_iter, 200))
        except InfeasibleAtInit as e:
            raise InfeasibleError(str(e)) from e
        lam_x, lam_y = dual_p[0].lam, dual_p[1].lam
        lam_common = 0.5 * (-lam_x / problem.tau1 + lam_y / problem.tau2)
        mismatch = float(np.linalg.norm(lam_x / problem.tau1
                                        + lam_y / problem.tau2))
        diagnostics["multiplier_mismatch"] = mismatch
        result = _newton_attempt(problem, gevx, gevy, pi0, theta_p,
                                 lam_common, tol_eff, max_iter)
        method = "profile+newton"
        iterations = its_p
        if result is None:
            if not conv_p:
                raise NonConvergence(
                    "two-sample system: Newton stalled and the profile "
                    "fallback did not converge",
                    diagnostics={"gscale": gscale, **diagnostics})
            # accept the profile solution outright; its value is the
            # same objective evaluated through the one-sample duals
            u = 1.0 - problem.tau1 * (gevx.gbar(theta_p) @ lam_common)
            v = 1.0 + problem.tau2 * (gevy.gbar(theta_p + pi0) @ lam_common)
            if u.min() <= 0 or v.min() <= 0:
                raise NonConvergence(
                    "two-sample system: reconstructed denominators are "
                    "not positive at the profile solution",
                    diagnostics=diagnostics)
            result = (theta_p, lam_common, u, v, its_p)
            method = "profile"

    theta, lam, u, v, its = result
    iterations += its
    neg2logR = 2.0 * problem.m * float(np.log(u).sum() + np.log(v).sum())
    if neg2logR < 0.0:
        if neg2logR < -1e-9 * (1.0 + abs(neg2logR)):
            raise NonConvergence(
                f"two-sample ratio came out negative ({neg2logR:.3e}); "
                "the score solve is unreliable here",
                diagnostics={"neg2logR": neg2logR, **diagnostics})
        neg2logR = 0.0
    statistic = neg2logR / problem.m
    return TwoSampleFit(
        theta_x_star=theta, theta_y_star=theta + pi0, lambda_star=lam,
        neg2logR=neg2logR, statistic=statistic, df=p,
        p_value=chisq_sf(statistic, p), converged=True, pi0=pi0,
        iterations=iterations, method=method, diagnostics=diagnostics)


def two_sample_test(problem: TwoSampleProblem, pi0, **opts) -> TwoSampleFit:
    """Chi-square test of H0: theta_y - theta_x = pi0 with df = p."""
    return solve_two_sample_system(problem, pi0, **opts)


def two_sample_mean_test(X, Y, m: int, dmu0, *, seed=0, trim=False,
                         **opts) -> TwoSampleFit:
    """Convenience wrapper: mean-difference test between two samples."""
    X = as_data_matrix(X)
    model = mean_model(X.shape[1])
    problem = make_two_sample_problem(X, Y, model, m, seed=seed, trim=trim)
    return two_sample_test(problem, dmu0, **opts)


def group_weights(problem: TwoSampleProblem, fit: TwoSampleFit):
    """Reconstruct the per-group weights (p_i, q_j) at the solution.

    Each vector sums to 1/m when the score equations hold.
    """
    gx = problem.model.grouped(problem.X, problem.grouping_x)
    gy = problem.model.grouped(problem.Y, problem.grouping_y)
    u = 1.0 - problem.tau1 * (gx.gbar(fit.theta_x_star) @ fit.lambda_star)
    v = 1.0 + problem.tau2 * (gy.gbar(fit.theta_y_star) @ fit.lambda_star)
    return 1.0 / (problem.N1 * u), 1.0 / (problem.N2 * v)
