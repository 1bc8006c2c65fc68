"""Moment-condition models.

A model supplies a vector of estimating functions g(x, theta) in R^r for
a single observation x in R^d and a parameter theta in R^p, with r >= p.
Estimation routines only touch models through this interface, so adding
a model means subclassing MomentModel and (optionally) providing a
grouped fast path built on per-group sufficient statistics.

Built-ins:

- ``mean_model(d)``: g(x, theta) = x - theta, the just-identified mean.
- ``normal_three_moment_model()``: theta = (mu, sigma), sigma > 0, and

      g1 = mu - x
      g2 = sigma^2 - (x - mu)^2
      g3 = x^3 - mu (mu^2 + 3 sigma^2)

  i.e. the first three moment equations of N(mu, sigma^2); r=3 > p=2.
- ``linreg_constrained_model(p)``: rows are (response first)
  (1, x')' (y - b0 - x'b), optionally augmented with a linear
  restriction row sum_j c_j b_j - value, making the system
  over-identified.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ArgumentError, DomainError

_FD_STEP = float(np.cbrt(np.finfo(float).eps))


def as_data_matrix(data, data_dim=None):
    """Coerce to a C-contiguous float64 (N, d) matrix and validate it."""
    x = np.ascontiguousarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ArgumentError(f"data must be 1-D or 2-D, got ndim={x.ndim}")
    if x.shape[0] == 0:
        raise ArgumentError("data has no rows")
    if not np.all(np.isfinite(x)):
        raise ArgumentError("data contains non-finite values")
    if data_dim is not None and x.shape[1] != data_dim:
        raise ArgumentError(
            f"data has {x.shape[1]} columns, model expects {data_dim}")
    return x


def central_diff_step(theta):
    # h_j = cbrt(machine eps) * max(1, |theta_j|), per coordinate
    return _FD_STEP * np.maximum(1.0, np.abs(theta))


class MomentModel:
    """Base class; subclasses must set dims and implement ``moments``."""

    name = "custom"
    data_dim = None     # d
    param_dim = None    # p
    moment_dim = None   # r
    has_analytic_jacobian = False
    supports_predict = False

    @property
    def param_names(self):
        return [f"theta_{j}" for j in range(self.param_dim)]

    # -- parameter domain (open box; overridden where needed) ------------
    def in_domain(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return theta.shape == (self.param_dim,) and bool(
            np.all(np.isfinite(theta)))

    def check_domain(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.param_dim,):
            raise DomainError(
                f"theta has shape {theta.shape}, expected ({self.param_dim},)")
        if not self.in_domain(theta):
            raise DomainError(f"theta={theta!r} outside the parameter domain")
        return theta

    # -- evaluation ------------------------------------------------------
    def moments(self, X, theta):
        """Vectorized g: (N, d) x (p,) -> (N, r)."""
        raise NotImplementedError

    def eval_moment(self, x, theta):
        theta = self.check_domain(theta)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.moments(x, theta)[0]

    def eval_jacobian(self, x, theta):
        """dg/dtheta' at one observation, (r, p); central differences
        unless a subclass provides the analytic form."""
        theta = self.check_domain(theta)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self._fd_jacobian(lambda t: self.moments(x, t)[0], theta)

    def mean_jacobian(self, X, theta):
        """Average of per-observation Jacobians, (r, p)."""
        theta = self.check_domain(theta)
        return self._fd_jacobian(
            lambda t: self.moments(X, t).mean(axis=0), theta)

    def _fd_jacobian(self, fun, theta):
        h = central_diff_step(theta)
        cols = []
        for j in range(self.param_dim):
            tp = theta.copy()
            tm = theta.copy()
            tp[j] += h[j]
            tm[j] -= h[j]
            cols.append((fun(tp) - fun(tm)) / (2.0 * h[j]))
        return np.stack(cols, axis=-1)

    # -- grouped fast path -------------------------------------------------
    def grouped(self, X, grouping):
        """Precompute per-group state; default keeps the ordered rows."""
        return GroupedEval(self, X, grouping)

    def default_init(self, X):
        raise NotImplementedError(
            f"model {self.name!r} has no automatic starting value; "
            "pass theta_init explicitly")

    def predict(self, X, theta):
        raise ArgumentError(f"model {self.name!r} does not predict a response")


class GroupedEval:
    """Per-group moment averages for a fixed data set and grouping.

    ``gbar(theta)`` returns the n x r matrix of group-mean moment vectors
    and ``group_jacobians(theta)`` their n x r x p parameter Jacobians.
    The generic implementation re-evaluates the model on all N rows per
    call; models with polynomial moment functions override this with
    sufficient statistics so that the per-theta cost is O(n), not O(N).
    """

    def __init__(self, model, X, grouping):
        self.model = model
        self.grouping = grouping
        self.sizes = grouping.sizes.astype(float)
        self.weights = self.sizes / grouping.n_obs
        self.n_groups = grouping.n_groups
        self.n_obs = grouping.n_obs
        self._X_ord = X[grouping.order]
        self._starts = grouping.starts[:-1]

    def gbar(self, theta):
        g = self.model.moments(self._X_ord, theta)
        return np.add.reduceat(g, self._starts, axis=0) / self.sizes[:, None]

    def group_jacobians(self, theta):
        theta = np.asarray(theta, dtype=float)
        h = central_diff_step(theta)
        cols = []
        for j in range(self.model.param_dim):
            tp = theta.copy()
            tm = theta.copy()
            tp[j] += h[j]
            tm[j] -= h[j]
            cols.append((self.gbar(tp) - self.gbar(tm)) / (2.0 * h[j]))
        return np.stack(cols, axis=-1)

    def full_mean(self, theta):
        """Size-weighted recombination; equals the full-sample mean of g."""
        return self.weights @ self.gbar(theta)

    def full_jacobian(self, theta):
        return np.einsum("i,irp->rp", self.weights, self.group_jacobians(theta))


# ---------------------------------------------------------------------------
# mean model


class _MeanModel(MomentModel):
    name = "mean"
    has_analytic_jacobian = True

    def __init__(self, d):
        if d < 1:
            raise ArgumentError(f"mean model needs d >= 1, got {d}")
        self.data_dim = int(d)
        self.param_dim = int(d)
        self.moment_dim = int(d)

    def moments(self, X, theta):
        return X - np.asarray(theta, dtype=float)

    def eval_jacobian(self, x, theta):
        self.check_domain(theta)
        return -np.eye(self.data_dim)

    def mean_jacobian(self, X, theta):
        self.check_domain(theta)
        return -np.eye(self.data_dim)

    def grouped(self, X, grouping):
        return _MeanGrouped(self, X, grouping)

    def default_init(self, X):
        return X.mean(axis=0)


class _MeanGrouped(GroupedEval):
    def __init__(self, model, X, grouping):
        super().__init__(model, X, grouping)
        self._gm = (np.add.reduceat(X[grouping.order],
                                    grouping.starts[:-1], axis=0)
                    / self.sizes[:, None])
        del self._X_ord

    def gbar(self, theta):
        return self._gm - np.asarray(theta, dtype=float)

    def group_jacobians(self, theta):
        d = self.model.param_dim
        return np.broadcast_to(-np.eye(d), (self.n_groups, d, d)).copy()

    def full_jacobian(self, theta):
        return -np.eye(self.model.param_dim)


def mean_model(d: int) -> MomentModel:
    """Just-identified mean model in d dimensions: g(x, theta) = x - theta."""
    return _MeanModel(d)


# ---------------------------------------------------------------------------
# three-moment normal model


class _Normal3Model(MomentModel):
    name = "normal3"
    data_dim = 1
    param_dim = 2
    moment_dim = 3
    has_analytic_jacobian = True

    @property
    def param_names(self):
        return ["mu", "sigma"]

    def in_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        return (theta.shape == (2,) and np.all(np.isfinite(theta))
                and theta[1] > 0.0)

    def moments(self, X, theta):
        mu, sigma = self.check_domain(theta)
        x = X[:, 0]
        g = np.empty((x.shape[0], 3))
        g[:, 0] = mu - x
        g[:, 1] = sigma**2 - (x - mu) ** 2
        g[:, 2] = x**3 - mu * (mu**2 + 3.0 * sigma**2)
        return g

    def eval_jacobian(self, x, theta):
        mu, sigma = self.check_domain(theta)
        x = float(np.asarray(x).reshape(-1)[0])
        return np.array([
            [1.0, 0.0],
            [2.0 * (x - mu), 2.0 * sigma],
            [-3.0 * (mu**2 + sigma**2), -6.0 * mu * sigma],
        ])

    def mean_jacobian(self, X, theta):
        mu, sigma = self.check_domain(theta)
        xbar = X[:, 0].mean()
        return np.array([
            [1.0, 0.0],
            [2.0 * (xbar - mu), 2.0 * sigma],
            [-3.0 * (mu**2 + sigma**2), -6.0 * mu * sigma],
        ])

    def grouped(self, X, grouping):
        return _Normal3Grouped(self, X, grouping)

    def default_init(self, X):
        x = X[:, 0]
        sd = float(x.std())
        return np.array([float(x.mean()), sd if sd > 0 else 1.0])


class _Normal3Grouped(GroupedEval):
    """Group means of (x, x^2, x^3) are sufficient for gbar and its
    Jacobian, so each theta costs O(n)."""

    def __init__(self, model, X, grouping):
        super().__init__(model, X, grouping)
        x = X[grouping.order, 0]
        pw = np.stack([x, x * x, x * x * x], axis=1)
        self._m = (np.add.reduceat(pw, grouping.starts[:-1], axis=0)
                   / self.sizes[:, None])
        del self._X_ord

    def gbar(self, theta):
        mu, sigma = self.model.check_domain(theta)
        m1, m2, m3 = self._m[:, 0], self._m[:, 1], self._m[:, 2]
        g = np.empty((self.n_groups, 3))
        g[:, 0] = mu - m1
        g[:, 1] = sigma**2 - (m2 - 2.0 * mu * m1 + mu**2)
        g[:, 2] = m3 - mu * (mu**2 + 3.0 * sigma**2)
        return g

    def group_jacobians(self, theta):
        mu, sigma = self.model.check_domain(theta)
        n = self.n_groups
        jac = np.zeros((n, 3, 2))
        jac[:, 0, 0] = 1.0
        jac[:, 1, 0] = 2.0 * (self._m[:, 0] - mu)
        jac[:, 1, 1] = 2.0 * sigma
        jac[:, 2, 0] = -3.0 * (mu**2 + sigma**2)
        jac[:, 2, 1] = -6.0 * mu * sigma
        return jac


def normal_three_moment_model() -> MomentModel:
    """N(mu, sigma^2) estimated from its first three moment equations."""
    return _Normal3Model()


# ---------------------------------------------------------------------------
# linear regression scores, optionally with a linear parameter restriction


class _LinRegModel(MomentModel):
    name = "linreg"
    has_analytic_jacobian = True
    supports_predict = True

    def __init__(self, n_covariates, constraint_coeffs=None,
                 constraint_value=None):
        p = int(n_covariates)
        if p < 1:
            raise ArgumentError(f"linreg needs >= 1 covariate, got {p}")
        self.n_covariates = p
        self.data_dim = p + 1          # (y, x1..xp), response first
        self.param_dim = p + 1         # (b0, b1..bp), intercept first
        self.constraint_coeffs = None
        self.constraint_value = None
        if constraint_coeffs is not None:
            c = np.asarray(constraint_coeffs, dtype=float)
            if c.shape != (p + 1,):
                raise ArgumentError(
                    f"constraint coeffs must have length {p + 1} "
                    f"(intercept included), got shape {c.shape}")
            if constraint_value is None or not np.isfinite(constraint_value):
                raise ArgumentError("constraint needs a finite value")
            if not np.any(c != 0.0):
                raise ArgumentError("constraint coeffs are all zero")
            self.constraint_coeffs = c
            self.constraint_value = float(constraint_value)
        self.moment_dim = (p + 1) + (1 if self.constraint_coeffs is not None
                                     else 0)

    @property
    def param_names(self):
        return [f"beta_{j}" for j in range(self.param_dim)]

    def _design(self, X):
        xt = np.empty((X.shape[0], self.param_dim))
        xt[:, 0] = 1.0
        xt[:, 1:] = X[:, 1:]
        return xt

    def moments(self, X, theta):
        beta = self.check_domain(theta)
        xt = self._design(X)
        resid = X[:, 0] - xt @ beta
        g = xt * resid[:, None]
        if self.constraint_coeffs is None:
            return g
        out = np.empty((X.shape[0], self.moment_dim))
        out[:, :-1] = g
        out[:, -1] = self.constraint_coeffs @ beta - self.constraint_value
        return out

    def eval_jacobian(self, x, theta):
        self.check_domain(theta)
        x = np.asarray(x, dtype=float).reshape(1, -1)
        xt = self._design(x)[0]
        jac = -np.outer(xt, xt)
        if self.constraint_coeffs is None:
            return jac
        return np.vstack([jac, self.constraint_coeffs])

    def mean_jacobian(self, X, theta):
        self.check_domain(theta)
        xt = self._design(X)
        jac = -(xt.T @ xt) / X.shape[0]
        if self.constraint_coeffs is None:
            return jac
        return np.vstack([jac, self.constraint_coeffs])

    def grouped(self, X, grouping):
        return _LinRegGrouped(self, X, grouping)

    def default_init(self, X):
        xt = self._design(X)
        beta, *_ = np.linalg.lstsq(xt, X[:, 0], rcond=None)
        return beta

    def predict(self, X, theta):
        beta = self.check_domain(theta)
        X = as_data_matrix(X)
        if X.shape[1] == self.data_dim:      # (y, x) rows: ignore response
            return self._design(X) @ beta
        if X.shape[1] == self.n_covariates:  # covariates only
            return beta[0] + X @ beta[1:]
        raise ArgumentError(
            f"predict expects {self.n_covariates} covariate columns "
            f"(or {self.data_dim} with the response), got {X.shape[1]}")


class _LinRegGrouped(GroupedEval):
    """Group means of (x~ y, x~ x~') determine the score averages as the
    affine map a_i - C_i beta; the Jacobian -C_i is constant in theta."""

    def __init__(self, model, X, grouping):
        super().__init__(model, X, grouping)
        xt = model._design(X[grouping.order])
        y = X[grouping.order, 0]
        starts = grouping.starts[:-1]
        self._a = (np.add.reduceat(xt * y[:, None], starts, axis=0)
                   / self.sizes[:, None])
        outer = xt[:, :, None] * xt[:, None, :]
        self._C = (np.add.reduceat(outer, starts, axis=0)
                   / self.sizes[:, None, None])
        del self._X_ord

    def gbar(self, theta):
        beta = self.model.check_domain(theta)
        g = self._a - self._C @ beta
        if self.model.constraint_coeffs is None:
            return g
        out = np.empty((self.n_groups, self.model.moment_dim))
        out[:, :-1] = g
        out[:, -1] = (self.model.constraint_coeffs @ beta
                      - self.model.constraint_value)
        return out

    def group_jacobians(self, theta):
        self.model.check_domain(theta)
        if self.model.constraint_coeffs is None:
            return -self._C
        n, P = self.n_groups, self.model.param_dim
        jac = np.empty((n, P + 1, P))
        jac[:, :P, :] = -self._C
        jac[:, P, :] = self.model.constraint_coeffs
        return jac


def linreg_constrained_model(n_covariates, constraint_coeffs=None,
                             constraint_value=None) -> MomentModel:
    """Least-squares score conditions for y = b0 + x'b + e, rows
    (y, x1..xp); pass constraint coeffs/value to add a restriction row
    sum_j c_j b_j = value (making the system over-identified)."""
    return _LinRegModel(n_covariates, constraint_coeffs, constraint_value)


# ---------------------------------------------------------------------------


def model_from_config(config, data_dim=None) -> MomentModel:
    """Build a model from a config dict:

    {"model": "mean" | "normal3" | "linreg",
     "p": int,                                  # linreg covariate count
     "constraint": {"coeffs": [...], "value": v} | null}

    For "mean", dimension comes from the data; for "linreg", "p" may be
    omitted when data_dim is known (then p = data_dim - 1).
    """
    if isinstance(config, str):
        config = {"model": config}
    if not isinstance(config, dict) or "model" not in config:
        raise ArgumentError("model config must be a dict with a 'model' key")
    kind = config["model"]
    if kind == "mean":
        d = config.get("p") or data_dim
        if d is None:
            raise ArgumentError("mean model needs data to fix its dimension")
        return mean_model(d)
    if kind == "normal3":
        if data_dim is not None and data_dim != 1:
            raise ArgumentError("normal3 expects a single data column")
        return normal_three_moment_model()
    if kind == "linreg":
        p = config.get("p")
        if p is None:
            if data_dim is None:
                raise ArgumentError("linreg needs 'p' or data to fix it")
            p = data_dim - 1
        if data_dim is not None and data_dim != p + 1:
            raise ArgumentError(
                f"linreg with p={p} expects {p + 1} data columns, "
                f"got {data_dim}")
        constraint = config.get("constraint")
        if constraint:
            return linreg_constrained_model(
                p, constraint.get("coeffs"), constraint.get("value"))
        return linreg_constrained_model(p)
    raise ArgumentError(f"unknown model {kind!r}")
