"""Inner dual problem: the multiplier behind the likelihood-ratio weights.

Given rows z_1..z_n in R^r and positive weights w_i summing to one, the
solver maximizes the strictly concave dual objective

    f(lam) = sum_i w_i log*(1 + lam' z_i)

by damped Newton. log* is the quadratic C^2 extension of log below a
threshold epsilon (default 1/n): it agrees with log on [epsilon, inf)
and continues smoothly below, which makes f defined everywhere so the
iteration never has to guard the log domain. At an interior optimum the
stationarity condition is the weighted moment equation

    sum_i w_i z_i / (1 + lam' z_i) = 0,

and the implied probabilities w_i / (1 + lam' z_i) are positive and sum
to one. A solution exists exactly when zero is interior to the convex
hull of the z_i; otherwise the solve reports InfeasibleError, detected
either by a final positivity check, a diverging iterate, or the
explicit hull test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import linprog

from .exceptions import ArgumentError, InfeasibleError, NonConvergence

_MAX_HALVINGS = 50
_DIVERGENCE = 1e12


@dataclass(frozen=True)
class LogStarParams:
    epsilon: float

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ArgumentError(f"epsilon must be positive, got {self.epsilon}")


def log_star(u, params: LogStarParams):
    """Value and first two derivatives of the extended log.

    For u >= eps: (log u, 1/u, -1/u^2). Below eps the quadratic
    log(eps) - 1.5 + 2u/eps - u^2/(2 eps^2) takes over; the two branches
    match in value, slope, and curvature at u = eps.
    """
    eps = params.epsilon
    scalar = np.isscalar(u) or np.ndim(u) == 0
    u = np.asarray(u, dtype=float)
    big = u >= eps
    safe = np.maximum(u, eps)
    val = np.where(big, np.log(safe),
                   np.log(eps) - 1.5 + 2.0 * u / eps - u * u / (2.0 * eps * eps))
    d1 = np.where(big, 1.0 / safe, 2.0 / eps - u / (eps * eps))
    d2 = np.where(big, -1.0 / (safe * safe), -1.0 / (eps * eps))
    if scalar:
        return float(val), float(d1), float(d2)
    return val, d1, d2


@dataclass
class DualSolution:
    lam: np.ndarray
    weights: np.ndarray          # implied probabilities, sum to 1
    log_terms_sum: float         # n * sum_i w_i log(1 + lam' z_i)
    converged: bool
    iterations: int
    grad_norm: float             # weighted moment residual at lam
    regularized: bool = False
    objective_trace: list | None = field(default=None, repr=False)


def _prepare(z, weights):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2 or z.shape[0] < 1:
        raise ArgumentError(f"z must be an (n, r) matrix, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ArgumentError("z contains non-finite values")
    n = z.shape[0]
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise ArgumentError(f"weights shape {w.shape} != ({n},)")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ArgumentError("weights must be finite and positive")
        w = w / w.sum()
    return z, w


def solve_dual(z, weights=None, tol=1e-10, max_iter=100, lam0=None,
               epsilon=None, trace=False) -> DualSolution:
    """Solve the inner dual problem for the multiplier.

    Raises InfeasibleError when zero is not interior to the hull of the
    rows, NonConvergence when the iteration budget runs out with the
    residual still above tol.
    """
    z, w = _prepare(z, weights)
    n, r = z.shape
    if not (np.isfinite(tol) and tol > 0):
        raise ArgumentError(f"tol must be positive, got {tol}")
    eps = 1.0 / n if epsilon is None else float(epsilon)
    params = LogStarParams(eps)

    lam = np.zeros(r) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    if lam.shape != (r,):
        raise ArgumentError(f"lam0 shape {lam.shape} != ({r},)")
    zscale = max(1.0, float(np.abs(z).max()))

    def objective(l):
        val, _, _ = log_star(1.0 + z @ l, params)
        return float(w @ val)

    def solved(u):
        # a genuine interior solution satisfies the score equation AND
        # carries unit probability mass: on the divergent ray of an
        # infeasible problem the score also vanishes, but sum w/u -> 0
        if not np.all(u > 0):
            return False, np.inf
        resid = float(np.linalg.norm((w / u) @ z))
        return (resid <= tol and abs((w / u).sum() - 1.0) <= 1e-8), resid

    f_cur = objective(lam)
    history = [f_cur] if trace else None
    regularized = False
    iterations = 0
    converged = False
    line_search_stuck = False
    infeasible_ray = False
    warm_start = bool(lam.any())

    hull_interior = None

    def hull() -> bool:
        # the rows never change within one call; pay the LP at most once
        nonlocal hull_interior
        if hull_interior is None:
            hull_interior = check_convex_hull(z)
        return hull_interior

    polish_left = 3

    for _attempt in range(6):
        converged = False
        for _ in range(max_iter - iterations):
            iterations += 1
            u = 1.0 + z @ lam
            _, d1, d2 = log_star(u, params)
            grad = (w * d1) @ z
            gnorm = np.linalg.norm(grad)
            converged = gnorm <= tol
            if converged and (polish_left == 0 or gnorm == 0.0):
                break
            # curvature matrix -(d2-weighted second moment); PD when the
            # rows span R^r, otherwise take a tiny ridge
            H = (z * (-(w * d2))[:, None]).T @ z
            try:
                fac = cho_factor(H, lower=True)
            except LinAlgError:
                ridge = 1e-12 * (np.trace(H) / r if np.trace(H) > 0 else 1.0)
                regularized = True
                try:
                    fac = cho_factor(H + ridge * np.eye(r), lower=True)
                except LinAlgError:
                    fac = cho_factor(H + (1e-8 * np.trace(H) / r + 1e-12)
                                     * np.eye(r), lower=True)
            step = cho_solve(fac, grad)
            if converged:
                # already inside tolerance: tighten toward the float
                # floor while full Newton steps keep halving the score;
                # warm-started callers rely on this extra precision
                polish_left -= 1
                cand = lam + step
                _, d1c, _ = log_star(1.0 + z @ cand, params)
                if np.linalg.norm((w * d1c) @ z) < 0.5 * gnorm:
                    lam = cand
                    f_cur = objective(lam)
                    if trace:
                        history.append(f_cur)
                    continue
                break
            alpha = 1.0
            accepted = False
            for _half in range(_MAX_HALVINGS + 1):
                f_new = objective(lam + alpha * step)
                if f_new > f_cur:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                # objective gains below float resolution; polish on the
                # gradient norm with the full Newton step instead
                cand = lam + step
                _, d1c, _ = log_star(1.0 + z @ cand, params)
                if np.linalg.norm((w * d1c) @ z) < np.linalg.norm(grad):
                    alpha, f_new = 1.0, objective(cand)
                else:
                    line_search_stuck = True
                    break
            lam = lam + alpha * step
            f_cur = f_new
            if trace:
                history.append(f_cur)
            if np.linalg.norm(lam) * zscale > _DIVERGENCE:
                break

        u = 1.0 + z @ lam
        ok, _ = solved(u)
        if ok:
            break
        if not converged:
            if warm_start:
                # far warm starts can strand the iteration deep in the
                # extension region, where the curvature spans many orders
                # of magnitude; the cold problem recovers on its own
                warm_start = False
                lam = np.zeros(r)
                params = LogStarParams(eps)
                f_cur = objective(lam)
                iterations = 0
                line_search_stuck = False
                polish_left = 3
                continue
            break
        if np.all(u > 0) and abs((w / u).sum() - 1.0) > 1e-8 \
                and u.min() >= params.epsilon:
            infeasible_ray = True  # score ~ 0 along a runaway direction
            break
        # stationary on the extension only: some u_i sit at or below
        # epsilon (possibly negative, since the extension is defined
        # there). Infeasibility is certified by the hull test, not by a
        # leaked iterate; when feasible, pull the threshold down and let
        # the sharper barrier push the iterate back inside.
        if u.min() <= 0.0 and not hull():
            break  # final classification below raises InfeasibleError
        new_eps = (0.5 * float(u.min()) if u.min() > 0.0
                   else params.epsilon / 16.0)
        if not new_eps < params.epsilon:
            break
        params = LogStarParams(new_eps)
        f_cur = objective(lam)

    u = 1.0 + z @ lam
    ok, true_norm = solved(u)
    diverged = np.linalg.norm(lam) * zscale > _DIVERGENCE

    if ok:
        probs = w / u
        probs = probs / probs.sum()
        log_terms = float(n * (w @ np.log(u)))
        return DualSolution(lam=lam, weights=probs, log_terms_sum=log_terms,
                            converged=True, iterations=iterations,
                            grad_norm=true_norm, regularized=regularized,
                            objective_trace=history)

    if converged and not np.all(u > 0) and not hull():
        raise InfeasibleError(
            "dual stationary point lies outside the log domain; zero is not "
            "interior to the convex hull of the moment vectors")
    if infeasible_ray or diverged or not hull():
        raise InfeasibleError(
            "zero is not interior to the convex hull of the moment vectors")
    raise NonConvergence(
        f"dual solve stopped after {iterations} iterations with residual "
        f"{true_norm:.3e} > tol={tol:.1e}",
        diagnostics={"iterations": iterations, "grad_norm": true_norm,
                     "line_search_stuck": line_search_stuck})


def check_convex_hull(z, margin=1e-9) -> bool:
    """Is zero interior to the convex hull of the rows of z?

    r=1 is exact (min < 0 < max). For r >= 2, rank-deficient rows are
    first projected onto their span (interior then means relative
    interior). Zero fails to be interior exactly when some nonzero
    direction v keeps every projection z_i . v nonnegative; pinning one
    coordinate of v to +-1 turns that cone question into 2k feasibility
    programs with k = dim(span) variables each, so the cost stays
    linear in n at any scale.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    n, r = z.shape
    if r == 1:
        col = z[:, 0]
        return bool(col.min() < 0.0 < col.max())
    scale = np.abs(z).max()
    if scale == 0.0:
        return True  # all rows are the origin
    zs = z / scale
    # exact one-sided certificates first (cheap at any n): a coordinate
    # or the mean direction with single-signed projections separates
    # zero outright
    for proj in (zs, (zs @ zs.mean(axis=0))[:, None]):
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        if np.any((lo >= 0.0) & (hi > 0.0)) or np.any((hi <= 0.0) & (lo < 0.0)):
            return False
    gram = zs.T @ zs
    evals, evecs = np.linalg.eigh(gram)
    keep = evals > evals[-1] * 1e-12
    zr = zs @ evecs[:, keep]
    k = zr.shape[1]
    if k == 1:
        col = zr[:, 0]
        return bool(col.min() < 0.0 < col.max())
    # search for a separator v with z_i . v >= -margin for all i (the
    # slack makes barely-interior points count as boundary, never the
    # other way round); any feasible subproblem certifies non-interior
    c = np.zeros(k)
    A_ub = -zr
    b_ub = np.full(n, margin)
    for j in range(k):
        for s in (1.0, -1.0):
            bounds = [(-1.0, 1.0)] * k
            bounds[j] = (s, s)
            res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds,
                          method="highs")
            if res.status != 2:
                return False
    return True
