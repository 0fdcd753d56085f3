"""ANOVA baselines: constant, one-way, two-way and user-scaled interaction fits.

All sparse fits minimise a penalised squared error over the observed pairs,

    sum_C (r - mu - alpha_i - gamma_i * beta_j)^2
        + lambda1 * sum(alpha^2) + lambda2 * sum(beta^2)
        + lambda_gamma * sum((gamma - 1)^2),

with ``gamma`` fixed at one except in :func:`fit_interaction`.  The grand
mean is never penalised.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import RatingsDataset

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class BaselineModel:
    mu: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray | None = None
    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda_gamma: float | None = None
    kind: str = "twoway"
    fit_log: dict = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return len(self.alpha)

    @property
    def num_movies(self) -> int:
        return len(self.beta)

    def predict_values(self, users, movies) -> np.ndarray:
        """mu + alpha_i + gamma_i * beta_j.  Unseen indices contribute zero
        effects (gamma one), i.e. predict from whatever is known."""
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        ku = users < self.num_users
        km = movies < self.num_movies
        a = np.where(ku, self.alpha[np.where(ku, users, 0)], 0.0)
        b = np.where(km, self.beta[np.where(km, movies, 0)], 0.0)
        if self.gamma is not None:
            b = b * np.where(ku, self.gamma[np.where(ku, users, 0)], 1.0)
        return self.mu + a + b

    def residuals(self, data: RatingsDataset) -> np.ndarray:
        return data.values - self.predict_values(data.users, data.movies)

    def objective(self, data: RatingsDataset) -> float:
        return _objective(data, self.mu, self.alpha, self.beta, self.gamma,
                          self.lambda1, self.lambda2, self.lambda_gamma or 0.0)

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "baseline",
            "kind": self.kind,
            "mu": float(self.mu),
            "alpha": [float(x) for x in self.alpha],
            "beta": [float(x) for x in self.beta],
            "gamma": None if self.gamma is None else [float(x) for x in self.gamma],
            "lambdas": {"lambda1": self.lambda1, "lambda2": self.lambda2,
                        "lambda_gamma": self.lambda_gamma},
            "fit_log": self.fit_log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported baseline schema {d.get('schema_version')}")
        lam = d.get("lambdas", {})
        return cls(
            mu=d["mu"],
            alpha=np.asarray(d["alpha"], dtype=float),
            beta=np.asarray(d["beta"], dtype=float),
            gamma=None if d.get("gamma") is None else np.asarray(d["gamma"], dtype=float),
            lambda1=lam.get("lambda1", 0.0),
            lambda2=lam.get("lambda2", 0.0),
            lambda_gamma=lam.get("lambda_gamma"),
            kind=d.get("kind", "twoway"),
            fit_log=d.get("fit_log", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _objective(data, mu, alpha, beta, gamma, lambda1, lambda2, lambda_gamma) -> float:
    b = beta[data.movies]
    if gamma is not None:
        b = gamma[data.users] * b
    e = data.values - mu - alpha[data.users] - b
    obj = float(e @ e) + lambda1 * float(alpha @ alpha) + lambda2 * float(beta @ beta)
    if gamma is not None and lambda_gamma:
        obj += lambda_gamma * float((gamma - 1.0) @ (gamma - 1.0))
    return obj


def _group_sums(data: RatingsDataset, values: np.ndarray):
    su = np.bincount(data.users, weights=values, minlength=data.num_users)
    sm = np.bincount(data.movies, weights=values, minlength=data.num_movies)
    return su, sm


def _recenter(mu, alpha, beta, users_seen, movies_seen):
    """Move the means of the supported effects into mu."""
    a = alpha[users_seen].mean() if users_seen.any() else 0.0
    b = beta[movies_seen].mean() if movies_seen.any() else 0.0
    alpha = alpha.copy()
    beta = beta.copy()
    alpha[users_seen] -= a
    beta[movies_seen] -= b
    return mu + a + b, alpha, beta


# ---------------------------------------------------------------------------


def fit_constant(train: RatingsDataset) -> BaselineModel:
    if train.n == 0:
        raise ValueError("cannot fit on an empty dataset")
    mu = float(train.values.mean())
    return BaselineModel(mu, np.zeros(train.num_users), np.zeros(train.num_movies),
                         kind="constant", fit_log={"n": train.n})


def fit_oneway(train: RatingsDataset, axis: str = "user") -> BaselineModel:
    """Per-user (``axis='user'``) or per-movie group means around the grand mean.

    Groups with no ratings get a zero effect; their count is logged.
    """
    if axis not in ("user", "movie"):
        raise ValueError("axis must be 'user' or 'movie'")
    r = train.values
    mu = float(r.mean())
    idx = train.users if axis == "user" else train.movies
    size = train.num_users if axis == "user" else train.num_movies
    counts = np.bincount(idx, minlength=size)
    sums = np.bincount(idx, weights=r, minlength=size)
    effect = np.zeros(size)
    seen = counts > 0
    effect[seen] = sums[seen] / counts[seen] - mu
    log = {"n": train.n, "empty_groups": int((~seen).sum())}
    if axis == "user":
        return BaselineModel(mu, effect, np.zeros(train.num_movies), kind="user", fit_log=log)
    return BaselineModel(mu, np.zeros(train.num_users), effect, kind="movie", fit_log=log)


def fit_twoway_sparse(
    train: RatingsDataset,
    lambda1: float = 0.0,
    lambda2: float = 0.0,
    solver: str = "coordinate",
    tol_obj: float | None = None,
    max_iters: int = 500,
    recenter: bool = True,
) -> BaselineModel:
    """Penalised two-way ANOVA on sparse data.

    ``solver='coordinate'`` cycles exact block minimisations over mu, the
    alphas and the betas.  ``solver='gradient_descent'`` takes Jacobi-scaled
    gradient steps with an exact line search.  Both stop once a full pass
    lowers the objective by less than ``tol_obj`` (default ``1e-9 * N``);
    hitting ``max_iters`` returns the best iterate flagged non-converged.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("penalties must be non-negative")
    if solver not in ("coordinate", "gradient_descent"):
        raise ValueError(f"unknown solver {solver!r}")
    if tol_obj is None:
        tol_obj = 1e-9 * train.n

    r = train.values
    u, m = train.users, train.movies
    Ji = train.user_counts.astype(float)
    Ij = train.movie_counts.astype(float)
    mu = float(r.mean())
    alpha = np.zeros(train.num_users)
    beta = np.zeros(train.num_movies)

    def obj(mu, alpha, beta):
        return _objective(train, mu, alpha, beta, None, lambda1, lambda2, 0.0)

    history = [obj(mu, alpha, beta)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        if solver == "coordinate":
            mu = float(np.mean(r - alpha[u] - beta[m]))
            su, _ = _group_sums(train, r - mu - beta[m])
            alpha = np.divide(su, Ji + lambda1, out=np.zeros_like(su), where=(Ji + lambda1) > 0)
            _, sm = _group_sums(train, r - mu - alpha[u])
            beta = np.divide(sm, Ij + lambda2, out=np.zeros_like(sm), where=(Ij + lambda2) > 0)
        else:
            mu, alpha, beta = _gd_step(train, mu, alpha, beta, lambda1, lambda2, Ji, Ij)
        history.append(obj(mu, alpha, beta))
        if history[-2] - history[-1] < tol_obj:
            converged = True
            break

    if recenter and lambda1 == 0 and lambda2 == 0:
        mu, alpha, beta = _recenter(mu, alpha, beta, Ji > 0, Ij > 0)
    log = {"solver": solver, "iterations": it, "objective": history[-1],
           "converged": converged, "n": train.n}
    if not converged:
        logger.warning("two-way fit did not converge in %d iterations", max_iters)
    return BaselineModel(mu, alpha, beta, lambda1=lambda1, lambda2=lambda2,
                         kind="twoway", fit_log=log)


def _gd_step(train, mu, alpha, beta, lambda1, lambda2, Ji, Ij):
    r = train.values
    u, m = train.users, train.movies
    e = r - mu - alpha[u] - beta[m]
    # half-gradients
    g_mu = -e.sum()
    su, sm = _group_sums(train, e)
    g_a = -su + lambda1 * alpha
    g_b = -sm + lambda2 * beta
    # Jacobi scaling by the diagonal of the half-Hessian
    d_mu = g_mu / train.n
    d_a = np.divide(g_a, Ji + lambda1, out=np.zeros_like(g_a), where=(Ji + lambda1) > 0)
    d_b = np.divide(g_b, Ij + lambda2, out=np.zeros_like(g_b), where=(Ij + lambda2) > 0)
    ad = d_mu + d_a[u] + d_b[m]
    curv = ad @ ad + lambda1 * d_a @ d_a + lambda2 * d_b @ d_b
    if curv <= 0:
        return mu, alpha, beta
    t = (g_mu * d_mu + g_a @ d_a + g_b @ d_b) / curv
    return mu - t * d_mu, alpha - t * d_a, beta - t * d_b


def fit_twoway_sequential(
    train: RatingsDataset,
    lambda1: float = 10.0,
    lambda2: float = 25.0,
    order: str = "movies_first",
) -> BaselineModel:
    """Two closed-form passes: shrunken movie effects from the mean-removed
    ratings, then shrunken user effects from what is left (or the reverse
    with ``order='users_first'``).  Defaults are lambda1=10, lambda2=25."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("penalties must be non-negative")
    r = train.values
    u, m = train.users, train.movies
    Ji = train.user_counts.astype(float)
    Ij = train.movie_counts.astype(float)
    mu = float(r.mean())

    def shrunk(idx, resid, count, lam, size):
        s = np.bincount(idx, weights=resid, minlength=size)
        return np.divide(s, count + lam, out=np.zeros(size), where=(count + lam) > 0)

    if order == "movies_first":
        beta = shrunk(m, r - mu, Ij, lambda2, train.num_movies)
        alpha = shrunk(u, r - mu - beta[m], Ji, lambda1, train.num_users)
    elif order == "users_first":
        alpha = shrunk(u, r - mu, Ji, lambda1, train.num_users)
        beta = shrunk(m, r - mu - alpha[u], Ij, lambda2, train.num_movies)
    else:
        raise ValueError(f"unknown order {order!r}")
    model = BaselineModel(mu, alpha, beta, lambda1=lambda1, lambda2=lambda2,
                          kind="twoway-seq", fit_log={"order": order, "n": train.n})
    model.fit_log["objective"] = model.objective(train)
    return model


def fit_penalized_complete(matrix, lambda1: float = 0.0, lambda2: float = 0.0) -> BaselineModel:
    """Closed-form penalised ANOVA on a fully observed I x J matrix:
    mu = grand mean, alpha_i = J/(J+lambda1) * (row mean - grand mean),
    beta_j = I/(I+lambda2) * (column mean - grand mean)."""
    R = np.asarray(matrix, dtype=float)
    if R.ndim != 2 or np.isnan(R).any():
        raise ValueError("need a complete 2-d matrix")
    I, J = R.shape
    g = R.mean()
    a = _shrink_factor(J, lambda1) * (R.mean(axis=1) - g)
    b = _shrink_factor(I, lambda2) * (R.mean(axis=0) - g)
    return BaselineModel(float(g), a, b, lambda1=lambda1, lambda2=lambda2,
                         kind="twoway-complete", fit_log={"closed_form": True})


def _shrink_factor(n: int, lam: float) -> float:
    return 0.0 if math.isinf(lam) else n / (n + lam)


def complete_objective(matrix, model: BaselineModel) -> float:
    R = np.asarray(matrix, dtype=float)
    fit = model.mu + model.alpha[:, None] + model.beta[None, :]
    e = R - fit
    return float((e * e).sum() + model.lambda1 * model.alpha @ model.alpha
                 + model.lambda2 * model.beta @ model.beta)


def fit_interaction(
    train: RatingsDataset,
    lambda1: float = 0.0,
    lambda2: float = 0.0,
    lambda_gamma: float = 0.0,
    tol_obj: float | None = None,
    max_iters: int = 500,
) -> BaselineModel:
    """Fit r = mu + alpha_i + gamma_i * beta_j with gamma shrunk toward one.

    Starts from the two-way fit with gamma = 1 and then cycles exact block
    solves: mu; each user's (alpha_i, gamma_i) jointly as a 2x2 ridge
    problem; each beta_j.  ``lambda_gamma = inf`` pins gamma at one.
    """
    if min(lambda1, lambda2, lambda_gamma) < 0:
        raise ValueError("penalties must be non-negative")
    if tol_obj is None:
        tol_obj = 1e-9 * train.n
    base = fit_twoway_sparse(train, lambda1, lambda2, recenter=False)
    mu, alpha, beta = base.mu, base.alpha.copy(), base.beta.copy()
    gamma = np.ones(train.num_users)
    r = train.values
    u, m = train.users, train.movies
    I, J = train.num_users, train.num_movies
    Ij = train.movie_counts
    fixed_gamma = math.isinf(lambda_gamma)
    lg = 0.0 if fixed_gamma else lambda_gamma

    def obj():
        return _objective(train, mu, alpha, beta, gamma, lambda1, lambda2, lg)

    history = [obj()]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        mu = float(np.mean(r - alpha[u] - gamma[u] * beta[m]))
        y = r - mu
        b = beta[m]
        if fixed_gamma:
            s = np.bincount(u, weights=y - b, minlength=I)
            d = train.user_counts + lambda1
            alpha = np.divide(s, d, out=np.zeros(I), where=d > 0)
        else:
            # normal equations of the per-user 2x2 ridge problem in (alpha, gamma)
            n = train.user_counts.astype(float)
            sb = np.bincount(u, weights=b, minlength=I)
            sbb = np.bincount(u, weights=b * b, minlength=I)
            sy = np.bincount(u, weights=y, minlength=I)
            syb = np.bincount(u, weights=y * b, minlength=I)
            a11 = n + lambda1
            a12 = sb
            a22 = sbb + lg
            r1 = sy
            r2 = syb + lg
            det = a11 * a22 - a12 * a12
            ok = det > 1e-300
            alpha = np.where(ok, (a22 * r1 - a12 * r2) / np.where(ok, det, 1.0), 0.0)
            gamma = np.where(ok, (a11 * r2 - a12 * r1) / np.where(ok, det, 1.0), 1.0)
        g = gamma[u]
        num = np.bincount(m, weights=g * (y - alpha[u]), minlength=J)
        den = np.bincount(m, weights=g * g, minlength=J) + lambda2
        beta = np.divide(num, den, out=np.zeros(J), where=(den > 0) & (Ij > 0))
        history.append(obj())
        if history[-2] - history[-1] < tol_obj:
            converged = True
            break
    log = {"iterations": it, "objective": history[-1], "converged": converged, "n": train.n}
    if not converged:
        logger.warning("interaction fit did not converge in %d iterations", max_iters)
    return BaselineModel(mu, alpha, beta, gamma=gamma, lambda1=lambda1, lambda2=lambda2,
                         lambda_gamma=lambda_gamma, kind="interaction", fit_log=log)


def load_baseline(path) -> BaselineModel:
    with open(path, encoding="utf-8") as fh:
        return BaselineModel.from_dict(json.load(fh))
