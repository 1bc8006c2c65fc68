"""Grouped empirical-likelihood estimation and testing.

Observations are split into n groups (sizes d_i differing by at most
one) and the group-mean moment vectors gbar_i(theta) replace individual
contributions. Maximizing the grouped nonparametric likelihood under
the moment constraint gives group probabilities

    q_i = 1 / (N (1 + lam' gbar_i(theta)))

with lam solving sum_i (d_i/N) gbar_i / (1 + lam' gbar_i) = 0, and the
log-likelihood-ratio objective

    neg2log_ratio(theta) = 2 sum_i d_i log(1 + lam' gbar_i(theta)).

The estimator minimizes this over theta. For just-identified models
(r = p) the minimizer solves the aggregate moment equation exactly and
the ratio collapses to zero; for r > p the profile is minimized by a
quasi-Newton iteration whose gradient has the closed envelope form

    2 sum_i d_i Jbar_i' lam / (1 + lam' gbar_i),

Jbar_i being the group-mean parameter Jacobian. Test statistics divide
the ratio (above its profile minimum) by the mean group size and refer
it to chi-square with p degrees of freedom.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats

from .dual import DualSolution, solve_dual
from .exceptions import (ArgumentError, BracketError, InfeasibleAtInit,
                         InfeasibleError, NonConvergence, SingularError)
from .grouping import Grouping, identity_grouping, make_grouping
from .models import MomentModel, as_data_matrix

_COND_LIMIT = 1e12


def chisq_sf(x, df) -> float:
    """Chi-square survival function P(X > x), via the regularized upper
    incomplete gamma function; absolute error well under 1e-12."""
    if not np.isfinite(df) or df < 1:
        raise ArgumentError(f"df must be >= 1, got {df}")
    x = float(x)
    if np.isnan(x) or x < 0:
        raise ArgumentError(f"x must be >= 0, got {x}")
    if np.isinf(x):
        return 0.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def chisq_quantile(level, df) -> float:
    if not 0.0 < level < 1.0:
        raise ArgumentError(f"level must be in (0, 1), got {level}")
    return float(stats.chi2.ppf(level, df))


@dataclass(frozen=True)
class GroupedMoments:
    gbar: np.ndarray      # (n, r) group-mean moment vectors
    sizes: np.ndarray     # (n,)
    weights: np.ndarray   # sizes / N


def group_moment_averages(data, model: MomentModel, grouping: Grouping,
                          theta) -> GroupedMoments:
    """Group-mean moment vectors at theta."""
    X = as_data_matrix(data, model.data_dim)
    _check_grouping(grouping, X.shape[0])
    geval = model.grouped(X, grouping)
    theta = model.check_domain(theta)
    return GroupedMoments(geval.gbar(theta), grouping.sizes.copy(),
                          geval.weights.copy())


def _check_grouping(grouping: Grouping, N: int):
    if grouping.n_obs != N:
        raise ArgumentError(
            f"grouping covers {grouping.n_obs} observations, data has {N}")


def _resolve_grouping(grouping, N, n_groups, seed):
    if grouping is not None:
        _check_grouping(grouping, N)
        return grouping
    n = min(N, 100) if n_groups is None else int(n_groups)
    return make_grouping(N, n, seed)


class _Profile:
    """neg2log_ratio as a function of theta over fixed grouped data,
    with a warm-started inner dual solve."""

    def __init__(self, geval, inner_tol=1e-10, inner_max_iter=100):
        self.geval = geval
        self.inner_tol = inner_tol
        self.inner_max_iter = inner_max_iter
        self.lam = np.zeros(geval.model.moment_dim)
        self.inner_iterations = 0
        self.scale = 2.0 * geval.n_obs / geval.n_groups  # 2 * mean group size

    def value(self, theta) -> tuple[float, DualSolution]:
        gbar = self.geval.gbar(theta)
        sol = solve_dual(gbar, weights=self.geval.weights,
                         tol=self.inner_tol, max_iter=self.inner_max_iter,
                         lam0=self.lam)
        self.inner_iterations += sol.iterations
        self.lam = sol.lam.copy()
        return self.scale * sol.log_terms_sum, sol

    def try_value(self, theta) -> tuple[float, DualSolution | None]:
        """Like value(), but +inf outside the domain or feasible region."""
        if not self.geval.model.in_domain(theta):
            return np.inf, None
        try:
            return self.value(theta)
        except (InfeasibleError, NonConvergence):
            return np.inf, None

    def gradient(self, theta, dual: DualSolution) -> np.ndarray:
        gbar = self.geval.gbar(theta)
        jac = self.geval.group_jacobians(theta)
        u = 1.0 + gbar @ dual.lam
        coef = self.geval.sizes / u
        return 2.0 * np.einsum("i,irp,r->p", coef, jac, dual.lam)


def gel_log_ratio(data, model: MomentModel, grouping: Grouping, theta,
                  inner_tol=1e-10, inner_max_iter=100,
                  lam0=None) -> tuple[float, DualSolution]:
    """neg2log_ratio at a fixed theta, plus the inner dual solution.

    Raises InfeasibleError when zero is outside the hull of the group
    means at theta (the ratio is +inf there).
    """
    X = as_data_matrix(data, model.data_dim)
    _check_grouping(grouping, X.shape[0])
    theta = model.check_domain(theta)
    prof = _Profile(model.grouped(X, grouping), inner_tol, inner_max_iter)
    if lam0 is not None:
        prof.lam = np.asarray(lam0, dtype=float).copy()
    return prof.value(theta)


def profile_gradient(data, model: MomentModel, grouping: Grouping, theta,
                     dual: DualSolution | None = None,
                     inner_tol=1e-10) -> np.ndarray:
    """Gradient of neg2log_ratio in theta (envelope form; the multiplier
    is held at its optimum so its derivative contributes nothing)."""
    X = as_data_matrix(data, model.data_dim)
    _check_grouping(grouping, X.shape[0])
    theta = model.check_domain(theta)
    prof = _Profile(model.grouped(X, grouping), inner_tol)
    if dual is None:
        _, dual = prof.value(theta)
    return prof.gradient(theta, dual)


@dataclass
class GelFit:
    theta: np.ndarray            # (p,)
    lam: np.ndarray              # (r,) multiplier at theta
    group_probs: np.ndarray      # (n,) q_i; sum_i d_i q_i = 1
    neg2log_ratio: float         # at theta
    converged: bool
    outer_iterations: int
    cov: np.ndarray | None       # plug-in asymptotic covariance, (p, p)
    grouping: Grouping = field(repr=False)
    model: MomentModel = field(repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def n_obs(self) -> int:
        return self.grouping.n_obs

    @property
    def mean_group_size(self) -> float:
        return self.grouping.mean_group_size

    def wald_se(self) -> np.ndarray | None:
        """Standard errors sqrt(diag(cov) / N)."""
        if self.cov is None:
            return None
        return np.sqrt(np.diag(self.cov) / self.n_obs)


@dataclass
class TestResult:
    statistic: float        # (ratio at theta0 - profile minimum) / mean size
    df: int
    p_value: float
    raw_neg2log_ratio: float     # unscaled ratio at theta0
    profile_minimum: float       # ratio at the estimate (0 when r = p)
    mean_group_size: float
    theta0: np.ndarray
    infeasible: bool = False
    fit: GelFit | None = field(default=None, repr=False)


def _newton_just_identified(geval, model, theta0, tol, max_iter):
    """Solve the size-weighted aggregate moment equation (r = p)."""
    theta = theta0.copy()
    F = geval.full_mean(theta)
    fnorm = np.linalg.norm(F)
    for it in range(1, max_iter + 1):
        if fnorm <= tol:
            return theta, it - 1, True
        J = geval.full_jacobian(theta)
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise SingularError("aggregate moment Jacobian is singular")
        alpha = 1.0
        for _ in range(61):
            cand = theta + alpha * step
            if model.in_domain(cand):
                Fc = geval.full_mean(cand)
                fc = np.linalg.norm(Fc)
                if fc < fnorm:
                    theta, F, fnorm = cand, Fc, fc
                    break
            alpha *= 0.5
        else:
            break
    if fnorm <= tol:
        return theta, max_iter, True
    raise NonConvergence(
        f"moment equation Newton stalled at residual {fnorm:.3e}",
        diagnostics={"residual": fnorm})


def _gradient_newton_polish(prof, theta, f, dual, g, tol, steps=4):
    """Newton iterations on the envelope gradient for the endgame.

    Near the minimum the objective differences fall below float
    resolution while the gradient stays smooth, so the refinement uses a
    finite-difference Hessian of the gradient and accepts on gradient
    contraction alone.  For long data the gradient itself bottoms out on
    accumulated rounding before tol; a Newton step below the float
    resolution of theta then certifies the minimizer directly.  Returns
    (state, grad_norm, at_float_floor) with state None when no progress
    was possible.
    """
    p = theta.shape[0]
    cur = (theta, f, dual, g)
    best = float(np.linalg.norm(g))
    improved = False
    for _ in range(steps):
        theta, f, dual, g = cur
        H = np.empty((p, p))
        usable = True
        for j in range(p):
            h = 1e-6 * max(1.0, abs(theta[j]))
            probe = theta.copy()
            probe[j] += h
            fj, dj = prof.try_value(probe)
            if dj is None:
                usable = False
                break
            H[:, j] = (prof.gradient(probe, dj) - g) / h
        if not usable:
            break
        H = 0.5 * (H + H.T)
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)):
            break
        if float(np.linalg.norm(delta)) <= \
                1e-11 * (1.0 + float(np.linalg.norm(theta))):
            return cur, best, True
        if float(delta @ g) >= 0.0:
            break
        stepped = False
        for _shrink in range(3):
            cand = theta + delta
            f_new, dual_new = prof.try_value(cand)
            if dual_new is not None and f_new <= f + 1e-8 * (1.0 + abs(f)):
                g_new = prof.gradient(cand, dual_new)
                nn = float(np.linalg.norm(g_new))
                if nn < 0.9 * best:
                    cur = (cand, f_new, dual_new, g_new)
                    best = nn
                    improved = stepped = True
                    break
            delta = 0.5 * delta
        if not stepped or best <= tol:
            break
    return (cur if improved else None), best, False


def _bfgs_profile(prof: _Profile, model, theta0, tol, max_iter):
    """Damped BFGS on the profile with envelope gradients. Infeasible or
    out-of-domain trial points act as +inf; line-search failures and
    float-resolution stagnation hand over to a gradient-Newton polish,
    then one simplex restart, before giving up."""
    theta = theta0.copy()
    p = theta.shape[0]
    try:
        f, dual = prof.value(theta)
    except InfeasibleError as e:
        raise InfeasibleAtInit(
            f"starting value is infeasible: {e}; pass a different theta_init")
    g = prof.gradient(theta, dual)
    Hinv = np.eye(p)
    scaled = False  # Hinv still the raw identity, no curvature seen yet
    restarts = 0
    stagnant = 0
    it = 0
    while it < max_iter:
        it += 1
        gnorm = np.linalg.norm(g)
        if gnorm <= tol:
            return theta, f, dual, it - 1, True, restarts
        accepted = False
        if stagnant < 3:
            direction = -Hinv @ g
            slope = float(direction @ g)
            if slope >= 0:
                Hinv = np.eye(p)
                scaled = False
                direction, slope = -g, -float(g @ g)
            # without curvature information a raw gradient step can be
            # orders of magnitude too long; start at unit parameter scale
            alpha = 1.0 if scaled else 1.0 / max(1.0, float(gnorm))
            for _ in range(61):
                cand = theta + alpha * direction
                f_new, dual_new = prof.try_value(cand)
                if f_new <= f + 1e-4 * alpha * slope:
                    accepted = True
                    break
                alpha *= 0.5
        if accepted:
            stagnant = stagnant + 1 if f - f_new <= 1e-14 * (1 + abs(f)) \
                else 0
            step = alpha * direction
            g_new = prof.gradient(cand, dual_new)
            y = g_new - g
            sy = float(step @ y)
            if sy > 1e-10 * np.linalg.norm(step) * np.linalg.norm(y):
                if not scaled:
                    # size the identity to the first measured curvature
                    Hinv = (sy / float(y @ y)) * np.eye(p)
                    scaled = True
                rho = 1.0 / sy
                V = np.eye(p) - rho * np.outer(step, y)
                Hinv = V @ Hinv @ V.T + rho * np.outer(step, step)
            theta, f, dual, g = cand, f_new, dual_new, g_new
            continue
        # endgame: objective comparisons are uninformative here
        stagnant = 0
        polished, best, at_floor = _gradient_newton_polish(
            prof, theta, f, dual, g, tol)
        if polished is not None:
            theta, f, dual, g = polished
            if best <= tol or at_floor:
                return theta, f, dual, it, True, restarts
            Hinv = np.eye(p)
            continue
        if restarts == 0:
            # derivative-free restart from the incumbent
            restarts += 1
            res = optimize.minimize(
                lambda t: prof.try_value(t)[0], theta,
                method="Nelder-Mead",
                options={"maxfev": 200 * (p + 1), "xatol": 1e-12,
                         "fatol": 1e-14})
            cand = np.asarray(res.x, dtype=float)
            f_new, dual_new = prof.try_value(cand)
            if f_new < f:
                theta, f, dual = cand, f_new, dual_new
                g = prof.gradient(theta, dual)
                Hinv = np.eye(p)
                continue
        break
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return theta, f, dual, it, True, restarts
    raise NonConvergence(
        f"profile minimization stopped after {it} iterations with gradient "
        f"norm {gnorm:.3e} > tol={tol:.1e}",
        diagnostics={"iterations": it, "grad_norm": gnorm, "theta": theta})


def gel_estimate(data, model: MomentModel, grouping: Grouping | None = None,
                 theta_init="auto", *, n_groups=None, seed=0, tol=1e-8,
                 inner_tol=1e-10, max_iter=200) -> GelFit:
    """Minimize the grouped likelihood-ratio objective over theta.

    With grouping omitted, a seeded random grouping into
    min(N, 100) groups (or n_groups) is drawn. theta_init="auto" asks
    the model for a starting value (moment-based or least squares).
    """
    X = as_data_matrix(data, model.data_dim)
    N = X.shape[0]
    grouping = _resolve_grouping(grouping, N, n_groups, seed)
    if grouping.n_groups < model.moment_dim + 1:
        warnings.warn(
            f"only {grouping.n_groups} groups for a {model.moment_dim}"
            "-dimensional moment vector; the inner problem may be "
            "ill-conditioned", stacklevel=2)
    if isinstance(theta_init, str) and theta_init == "auto":
        theta0 = np.asarray(model.default_init(X), dtype=float)
    else:
        theta0 = np.asarray(theta_init, dtype=float)
    theta0 = model.check_domain(theta0)

    geval = model.grouped(X, grouping)
    prof = _Profile(geval, inner_tol=inner_tol)
    r, p = model.moment_dim, model.param_dim
    diagnostics = {}

    if r == p:
        theta, outer_its, converged = _newton_just_identified(
            geval, model, theta0, inner_tol, max_iter)
        f, dual = prof.value(theta)
        diagnostics["path"] = "moment-newton"
    else:
        theta, f, dual, outer_its, converged, restarts = _bfgs_profile(
            prof, model, theta0, tol, max_iter)
        diagnostics["path"] = "profile-bfgs"
        if restarts:
            diagnostics["simplex_restarts"] = restarts
    diagnostics["inner_iterations"] = prof.inner_iterations
    if dual.regularized:
        diagnostics["regularized"] = True

    group_probs = dual.weights / grouping.sizes  # q_i; sum d_i q_i = 1
    cov = None
    try:
        cov = asymptotic_covariance(X, model, theta)
    except SingularError as e:
        diagnostics["covariance_error"] = str(e)
    return GelFit(theta=theta, lam=dual.lam.copy(), group_probs=group_probs,
                  neg2log_ratio=f, converged=converged,
                  outer_iterations=outer_its, cov=cov, grouping=grouping,
                  model=model, diagnostics=diagnostics)


def el_estimate(data, model: MomentModel, **opts) -> GelFit:
    """Ungrouped (classical) fit: singleton groups in natural order."""
    X = as_data_matrix(data, model.data_dim)
    return gel_estimate(X, model, identity_grouping(X.shape[0]), **opts)


def gel_test(data, model: MomentModel, grouping: Grouping | None = None,
             theta0=None, fit: GelFit | None = None, *, n_groups=None,
             seed=0, tol=1e-8, inner_tol=1e-10,
             max_iter=200) -> TestResult:
    """Likelihood-ratio test of theta = theta0.

    statistic = (neg2log_ratio(theta0) - profile minimum) / mean group
    size, referred to chi-square with p degrees of freedom. For r = p
    the profile minimum is zero and no estimation pass is needed. An
    infeasible theta0 is a sure rejection: p_value 0 with a flag.
    """
    if theta0 is None:
        raise ArgumentError("gel_test needs theta0")
    X = as_data_matrix(data, model.data_dim)
    if fit is not None:
        grouping = fit.grouping
    grouping = _resolve_grouping(grouping, X.shape[0], n_groups, seed)
    theta0 = model.check_domain(theta0)
    mbar = grouping.mean_group_size
    p = model.param_dim

    try:
        raw, _ = gel_log_ratio(X, model, grouping, theta0,
                               inner_tol=inner_tol)
    except InfeasibleError:
        return TestResult(statistic=np.inf, df=p, p_value=0.0,
                          raw_neg2log_ratio=np.inf, profile_minimum=np.nan,
                          mean_group_size=mbar, theta0=theta0,
                          infeasible=True, fit=fit)

    if model.moment_dim == p:
        minimum = 0.0
    else:
        if fit is None:
            fit = gel_estimate(X, model, grouping, tol=tol,
                               inner_tol=inner_tol, max_iter=max_iter)
        minimum = fit.neg2log_ratio
    statistic = max(raw - minimum, 0.0) / mbar
    return TestResult(statistic=statistic, df=p,
                      p_value=chisq_sf(statistic, p), raw_neg2log_ratio=raw,
                      profile_minimum=minimum, mean_group_size=mbar,
                      theta0=theta0, fit=fit)


def asymptotic_covariance(data, model: MomentModel, theta) -> np.ndarray:
    """Plug-in sandwich-free covariance {Ghat' Shat^{-1} Ghat}^{-1} with
    Ghat the mean parameter Jacobian and Shat the mean moment outer
    product, both per observation. Wald standard errors for the
    estimator are sqrt(diag / N)."""
    X = as_data_matrix(data, model.data_dim)
    theta = model.check_domain(theta)
    g = model.moments(X, theta)
    S = (g.T @ g) / X.shape[0]
    if np.linalg.cond(S) > _COND_LIMIT:
        raise SingularError("moment second-moment matrix is singular")
    G = model.mean_jacobian(X, theta)
    A = G.T @ np.linalg.solve(S, G)
    if np.linalg.cond(A) > _COND_LIMIT:
        raise SingularError("Jacobian information matrix is singular")
    return np.linalg.inv(A)


class _SubProfile:
    """Profile with one component pinned; exposes the free components
    to the same quasi-Newton driver."""

    def __init__(self, prof: _Profile, component: int, pinned: float,
                 free: list[int], p: int):
        self.prof = prof
        self.component = component
        self.pinned = pinned
        self.free = free
        self.p = p

    def _assemble(self, tf):
        th = np.empty(self.p)
        th[self.component] = self.pinned
        th[self.free] = tf
        return th

    def value(self, tf):
        th = self._assemble(tf)
        if not self.prof.geval.model.in_domain(th):
            raise InfeasibleError("outside the parameter domain")
        return self.prof.value(th)

    def try_value(self, tf):
        return self.prof.try_value(self._assemble(tf))

    def gradient(self, tf, dual):
        return self.prof.gradient(self._assemble(tf), dual)[self.free]


def _profile_statistic_fn(X, model, fit, component, inner_tol, tol, max_iter):
    """phi(t): profile test statistic along one component, re-profiling
    the remaining components when p > 1; +inf where infeasible."""
    geval = model.grouped(X, fit.grouping)
    prof = _Profile(geval, inner_tol=inner_tol)
    mbar = fit.grouping.mean_group_size
    p = model.param_dim
    base = fit.neg2log_ratio
    if p == 1:
        def phi(t):
            val, _ = prof.try_value(np.array([t]))
            return (val - base) / mbar
        return phi

    free = [j for j in range(p) if j != component]
    state = {"free": fit.theta[free].copy()}

    def phi(t):
        sub = _SubProfile(prof, component, float(t), free, p)
        for start in (state["free"].copy(), fit.theta[free].copy()):
            try:
                th_free, valf, *_rest = _bfgs_profile(
                    sub, model, start, tol, max_iter)
            except (InfeasibleError, NonConvergence):
                continue
            state["free"] = th_free
            return (valf - base) / mbar
        return np.inf

    return phi


def confidence_interval(data, model: MomentModel, fit: GelFit,
                        component: int = 0, level: float = 0.95, *,
                        inner_tol=1e-10, tol=1e-8, max_iter=200,
                        max_walk_sd=20.0) -> tuple[float, float]:
    """Invert the likelihood-ratio test for one parameter component.

    Walks outward from the estimate in Wald standard-deviation units
    until the profile statistic crosses the chi-square(1) quantile at
    the requested level (BracketError past max_walk_sd units), then
    bisects each crossing. Components other than the target are
    re-profiled when p > 1.
    """
    X = as_data_matrix(data, model.data_dim)
    p = model.param_dim
    if not 0 <= component < p:
        raise ArgumentError(f"component {component} out of range for p={p}")
    if fit.cov is None:
        raise ArgumentError(
            "fit has no covariance; cannot scale the bracket walk")
    quantile = chisq_quantile(level, 1)
    sd = float(np.sqrt(fit.cov[component, component] / fit.n_obs))
    if not np.isfinite(sd) or sd <= 0:
        raise ArgumentError("component has a degenerate Wald scale")
    center = float(fit.theta[component])
    phi = _profile_statistic_fn(X, model, fit, component, inner_tol, tol,
                                max_iter)

    def crossing(direction):
        steps = [0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0,
                 max_walk_sd]
        inner = center
        for k in steps:
            t = center + direction * k * sd
            if phi(t) > quantile:
                return _bisect_crossing(phi, inner, t, quantile)
            inner = t
        raise BracketError(
            f"no quantile crossing within {max_walk_sd} Wald SDs "
            f"in direction {direction:+d}")

    lo = crossing(-1)
    hi = crossing(+1)
    return lo, hi


def _bisect_crossing(phi, t_in, t_out, quantile):
    """Bisection between a point below the quantile and one above; +inf
    values (infeasible side) are handled as above."""
    for _ in range(200):
        mid = 0.5 * (t_in + t_out)
        if abs(t_out - t_in) <= 1e-12 * max(1.0, abs(t_in), abs(t_out)):
            break
        if phi(mid) > quantile:
            t_out = mid
        else:
            t_in = mid
    return 0.5 * (t_in + t_out)
