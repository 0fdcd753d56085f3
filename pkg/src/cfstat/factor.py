"""Regularised latent-factor models on sparse ratings.

Four fitting routes share :class:`FactorModel`:

* joint alternating least squares (exact ridge solves per movie, then per user),
* one-feature-at-a-time ALS with residual or ridge shrinkage,
* stochastic gradient descent, all features at once or one at a time,
* the asymmetric NSVD variant where part of each user's factor is built
  from secondary movie features over the movies that user rated.

Factor fits work on residuals from an optional :class:`BaselineModel`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .baseline import BaselineModel
from .dataset import RatingsDataset
from .errors import DivergenceError
from .predictions import PredictionSet

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

PER_PARAMETER = "per_parameter"
PER_OBSERVATION = "per_observation"


@dataclass
class FitSchedule:
    max_epochs: int = 100
    tol_obj: float = 1e-6  # relative objective decrease that counts as converged
    eta: float = 0.01
    eta_decay: float = 1.0
    seed: int = 0
    init_std: float = 0.01
    patience: int = 3
    # a rise only counts toward divergence once the objective sits this far
    # (relative) above the best value seen; smaller rises are SGD noise
    divergence_tol: float = 1e-2

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")


@dataclass
class FactorModel:
    U: np.ndarray
    V: np.ndarray
    baseline: BaselineModel | None = None
    Y: np.ndarray | None = None
    # u_i + |J(i)|^-1/2 sum y over the training movies, for NSVD models
    user_composite: np.ndarray | None = None
    reg: dict = field(default_factory=dict)
    kind: str = "als"
    fit_log: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.V.shape[1]

    @property
    def user_factors(self) -> np.ndarray:
        return self.U if self.user_composite is None else self.user_composite

    def base_values(self, users, movies) -> np.ndarray:
        if self.baseline is None:
            return np.zeros(np.shape(users))
        return self.baseline.predict_values(users, movies)

    def interaction_values(self, users, movies) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        P = self.user_factors
        known = (users < P.shape[0]) & (movies < self.V.shape[0])
        out = np.zeros(users.shape)
        if known.any():
            out[known] = np.einsum("nk,nk->n", P[users[known]], self.V[movies[known]])
        return out

    def predict_values(self, users, movies) -> np.ndarray:
        return self.base_values(users, movies) + self.interaction_values(users, movies)

    def to_dict(self) -> dict:
        def mat(a):
            return None if a is None else [[float(x) for x in row] for row in a]

        return {
            "schema_version": SCHEMA_VERSION,
            "type": "factor",
            "kind": self.kind,
            "p": self.p,
            "U": mat(self.U),
            "V": mat(self.V),
            "Y": mat(self.Y),
            "user_composite": mat(self.user_composite),
            "reg": self.reg,
            "baseline": None if self.baseline is None else self.baseline.to_dict(),
            "fit_log": self.fit_log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FactorModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported factor schema {d.get('schema_version')}")
        p = d["p"]

        def arr(x):
            return None if x is None else np.asarray(x, dtype=float).reshape(-1, p)

        return cls(
            U=arr(d["U"]), V=arr(d["V"]),
            baseline=None if d.get("baseline") is None else BaselineModel.from_dict(d["baseline"]),
            Y=arr(d.get("Y")), user_composite=arr(d.get("user_composite")),
            reg=d.get("reg", {}), kind=d.get("kind", "als"), fit_log=d.get("fit_log", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def clip(x, low: float = 1.0, high: float = 5.0):
    """Winsorise predictions into [low, high]."""
    return np.clip(x, low, high)


def predict(model, users, movies, clip_range: tuple[float, float] | None = None,
            model_id: str = "", split_id: str = "") -> PredictionSet:
    """Predictions for query pairs, optionally clipped.

    Works for any model exposing ``predict_values``; unseen users or movies
    fall back to the baseline part.
    """
    values = model.predict_values(users, movies)
    if clip_range is not None:
        values = clip(values, *clip_range)
    return PredictionSet(np.asarray(users), np.asarray(movies), values,
                         model_id=model_id or getattr(model, "kind", ""),
                         split_id=split_id, clipped=clip_range is not None)


def _targets(train: RatingsDataset, baseline: BaselineModel | None) -> np.ndarray:
    r = train.values
    if baseline is not None:
        r = r - baseline.predict_values(train.users, train.movies)
    return r


def _rmse(model: FactorModel, data: RatingsDataset) -> float:
    e = data.values - model.predict_values(data.users, data.movies)
    return float(np.sqrt(np.mean(e * e)))


# ---------------------------------------------------------------------------
# joint ALS


def als_objective(train, U, V, lambda1, lambda2, resid) -> float:
    e = resid - np.einsum("nk,nk->n", U[train.users], V[train.movies])
    return float(e @ e + lambda1 * np.sum(U * U) + lambda2 * np.sum(V * V))


def _indicator(idx: np.ndarray, size: int) -> sp.csr_matrix:
    n = idx.size
    return sp.csr_matrix((np.ones(n), (idx, np.arange(n))), shape=(size, n))


def _ridge_half_sweep(S, other, resid, lam, p):
    """Solve every row's ridge problem given the opposite side's factors."""
    G = (S @ (other[:, :, None] * other[:, None, :]).reshape(len(other), -1)).reshape(-1, p, p)
    rhs = S @ (other * resid[:, None])
    if lam > 0:
        return np.linalg.solve(G + lam * np.eye(p), rhs[..., None])[..., 0], 0
    # minimum-norm least squares for rank-deficient rows
    deficient = int((np.linalg.matrix_rank(G, hermitian=True) < p).sum()) if p else 0
    return np.einsum("bij,bj->bi", np.linalg.pinv(G, hermitian=True), rhs), deficient


def fit_als_joint(
    train: RatingsDataset,
    p: int,
    lambda1: float = 0.0,
    lambda2: float = 0.0,
    schedule: FitSchedule | None = None,
    baseline: BaselineModel | None = None,
) -> FactorModel:
    """Minimise sum_C (r - b - u_i'v_j)^2 + lambda1 sum|u|^2 + lambda2 sum|v|^2.

    Each epoch solves the movie ridge problems with users fixed, then the
    user problems with movies fixed, so the objective never increases.
    With a zero penalty, rows whose Gram matrix is singular get the
    minimum-norm solution and are counted in ``fit_log``.
    """
    schedule = schedule or FitSchedule()
    if p < 0:
        raise ValueError("p must be >= 0")
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("penalties must be non-negative")
    if train.n == 0:
        raise ValueError("empty training set")
    I, J = train.num_users, train.num_movies
    resid = _targets(train, baseline)
    rng = np.random.default_rng(schedule.seed)
    U = rng.standard_normal((I, p)) * schedule.init_std
    V = np.zeros((J, p))
    reg = {"convention": "als", "lambda1": lambda1, "lambda2": lambda2}
    if p == 0:
        return FactorModel(U, V, baseline=baseline, reg=reg, kind="als",
                           fit_log={"epochs": 0, "objective": float(resid @ resid), "converged": True})

    S_movie = _indicator(train.movies.astype(np.int64), J)
    S_user = _indicator(train.users.astype(np.int64), I)
    history = []
    deficient = 0
    converged = False
    epoch = 0
    for epoch in range(1, schedule.max_epochs + 1):
        V, d1 = _ridge_half_sweep(S_movie, U[train.users], resid, lambda2, p)
        U, d2 = _ridge_half_sweep(S_user, V[train.movies], resid, lambda1, p)
        deficient = max(deficient, d1 + d2)
        history.append(als_objective(train, U, V, lambda1, lambda2, resid))
        if len(history) > 1 and history[-2] - history[-1] <= schedule.tol_obj * max(history[-2], 1e-300):
            converged = True
            break
    log = {"epochs": epoch, "objective": history[-1], "converged": converged,
           "singular_rows": deficient}
    if deficient:
        logger.info("ALS used minimum-norm solves for %d rank-deficient rows", deficient)
    return FactorModel(U, V, baseline=baseline, reg=reg, kind="als", fit_log=log)


# ---------------------------------------------------------------------------
# one feature at a time


def default_lambda_schedule(lam: float, p: int) -> list[float]:
    """lambda_k = lambda * (1 + 0.1 k), k = 1..p."""
    return [lam * (1.0 + 0.1 * k) for k in range(1, p + 1)]


def fit_als_sequential(
    train: RatingsDataset,
    p: int,
    shrink: str = "residual",
    lam: float = 0.0,
    lambda_schedule=None,
    schedule: FitSchedule | None = None,
    baseline: BaselineModel | None = None,
) -> FactorModel:
    """Fit features one at a time on the residuals of the earlier ones.

    ``shrink='residual'`` multiplies the working residuals by
    n/(n + lambda_k) with n = min(I_j, J_i) before fitting feature k;
    ``shrink='ridge'`` instead adds lambda_k(|u_k|^2 + |v_k|^2).  Earlier
    features stay frozen.  ``lambda_schedule`` overrides the default
    increasing schedule and must be nondecreasing.
    """
    schedule = schedule or FitSchedule(max_epochs=200, tol_obj=1e-10)
    if shrink not in ("residual", "ridge"):
        raise ValueError(f"unknown shrink mode {shrink!r}")
    lams = list(lambda_schedule) if lambda_schedule is not None else default_lambda_schedule(lam, p)
    if len(lams) != p:
        raise ValueError("lambda schedule length must equal p")
    if any(b < a for a, b in zip(lams, lams[1:])):
        raise ValueError("lambda schedule must be nondecreasing")

    I, J = train.num_users, train.num_movies
    u_idx, m_idx = train.users, train.movies
    target = _targets(train, baseline)
    support = np.minimum(train.movie_counts[m_idx], train.user_counts[u_idx]).astype(float)
    rng = np.random.default_rng(schedule.seed)
    U = np.zeros((I, p))
    V = np.zeros((J, p))
    feature_log = []

    for k in range(p):
        lam_k = lams[k]
        e = target - np.einsum("nk,nk->n", U[u_idx, :k], V[m_idx, :k])
        if shrink == "residual":
            e = e * (support / (support + lam_k) if not math.isinf(lam_k) else 0.0)
        ridge = lam_k if shrink == "ridge" else 0.0
        if not np.any(e):
            feature_log.append({"feature": k, "epochs": 0, "zero_residual": True})
            continue
        u = rng.standard_normal(I) * schedule.init_std
        v = np.zeros(J)
        prev = math.inf
        sweeps = 0
        for sweeps in range(1, schedule.max_epochs + 1):
            uu = u[u_idx]
            den = np.bincount(m_idx, weights=uu * uu, minlength=J) + ridge
            v = np.divide(np.bincount(m_idx, weights=uu * e, minlength=J), den,
                          out=np.zeros(J), where=den > 0)
            vv = v[m_idx]
            den = np.bincount(u_idx, weights=vv * vv, minlength=I) + ridge
            u = np.divide(np.bincount(u_idx, weights=vv * e, minlength=I), den,
                          out=np.zeros(I), where=den > 0)
            res = e - u[u_idx] * v[m_idx]
            obj = float(res @ res + ridge * (u @ u + v @ v))
            if math.isfinite(prev) and prev - obj <= schedule.tol_obj * max(prev, 1e-300):
                break
            prev = obj
        U[:, k] = u
        V[:, k] = v
        feature_log.append({"feature": k, "epochs": sweeps, "lambda": lam_k, "objective": obj})

    reg = {"convention": f"sequential-{shrink}", "lambda_schedule": lams}
    return FactorModel(U, V, baseline=baseline, reg=reg, kind="als-seq",
                       fit_log={"features": feature_log})


def feature_energy(model: FactorModel) -> np.ndarray:
    """|u_k|^2 |v_k|^2 per feature; gauge-free measure of importance."""
    return np.sum(model.U ** 2, axis=0) * np.sum(model.V ** 2, axis=0)


# ---------------------------------------------------------------------------
# stochastic gradient descent


def _reg_arrays(train, lam, convention, I, J):
    if convention == PER_PARAMETER:
        ju = train.user_counts.astype(float)
        im = train.movie_counts.astype(float)
        reg_u = np.divide(lam, ju, out=np.zeros(I), where=ju > 0)
        reg_v = np.divide(lam, im, out=np.zeros(J), where=im > 0)
    elif convention == PER_OBSERVATION:
        reg_u = np.full(I, float(lam))
        reg_v = np.full(J, float(lam))
    else:
        raise ValueError(f"unknown regularisation convention {convention!r}")
    return reg_u, reg_v


def sgd_objective(train, U, V, lam, convention=PER_PARAMETER, resid=None) -> float:
    """Objective whose per-rating gradient shares are the SGD updates.

    per_parameter:   sum_C e^2 + (lam/2) (sum_i |u_i|^2 + sum_j |v_j|^2)
    per_observation: sum_C [e^2 + (lam/2)(|u_i|^2 + |v_j|^2)]
    """
    resid = train.values if resid is None else resid
    Uu, Vm = U[train.users], V[train.movies]
    e = resid - np.einsum("nk,nk->n", Uu, Vm)
    sse = float(e @ e)
    if convention == PER_PARAMETER:
        return sse + 0.5 * lam * float(np.sum(U * U) + np.sum(V * V))
    return sse + 0.5 * lam * float(np.sum(Uu * Uu) + np.sum(Vm * Vm))


def sgd_gradient(train, U, V, lam, convention=PER_PARAMETER, resid=None):
    """Full-batch gradient of :func:`sgd_objective` with respect to (U, V)."""
    resid = train.values if resid is None else resid
    u, m = train.users, train.movies
    e = resid - np.einsum("nk,nk->n", U[u], V[m])
    gU = np.zeros_like(U)
    gV = np.zeros_like(V)
    np.add.at(gU, u, -2.0 * e[:, None] * V[m])
    np.add.at(gV, m, -2.0 * e[:, None] * U[u])
    if convention == PER_PARAMETER:
        gU += lam * U
        gV += lam * V
    else:
        gU += lam * train.user_counts[:, None] * U
        gV += lam * train.movie_counts[:, None] * V
    return gU, gV


class _Monitor:
    """Convergence, divergence and early-stopping bookkeeping for SGD fits."""

    def __init__(self, schedule: FitSchedule, probe_fn=None):
        self.schedule = schedule
        self.probe_fn = probe_fn
        self.history: list[float] = []
        self.probe_history: list[float] = []
        self.best = None
        self.best_probe = math.inf
        self.stale = 0
        self.rises = 0
        self.lowest = math.inf

    def update(self, obj: float, snapshot) -> bool:
        """Record an epoch; returns True when training should stop."""
        if not math.isfinite(obj):
            raise DivergenceError("non-finite objective; reduce the learning rate")
        start = self.history[0] if self.history else None
        self.history.append(obj)
        self.lowest = min(self.lowest, obj)
        if len(self.history) == 2 and obj > start:
            raise DivergenceError(
                f"first epoch increased the objective ({start:.6g} -> {obj:.6g}); reduce eta")
        if len(self.history) > 1:
            climbing = obj > self.history[-2] and obj > self.lowest * (1 + self.schedule.divergence_tol)
            self.rises = self.rises + 1 if climbing else 0
            if self.rises >= 3:
                raise DivergenceError("objective increased for 3 consecutive epochs")
        if self.probe_fn is not None and len(self.history) > 1:
            score = self.probe_fn()
            self.probe_history.append(score)
            if score < self.best_probe:
                self.best_probe = score
                self.best = snapshot()
                self.stale = 0
            else:
                self.stale += 1
                if self.stale >= self.schedule.patience:
                    return True
        if len(self.history) > 1:
            prev = self.history[-2]
            if 0 <= prev - obj <= self.schedule.tol_obj * max(prev, 1e-300):
                return True
        return False


def fit_sgd(
    train: RatingsDataset,
    p: int,
    reg_convention: str = PER_PARAMETER,
    lam: float = 0.0,
    schedule: FitSchedule | None = None,
    mode: str = "all_features",
    baseline: BaselineModel | None = None,
    probe: RatingsDataset | None = None,
) -> FactorModel:
    """Per-rating gradient updates over a shuffled pass of C each epoch.

    per_parameter (penalty scaled by support)::

        u_ik += eta * (2 e_ij v_jk - lam / J_i * u_ik)
        v_jk += eta * (2 e_ij u_ik - lam / I_j * v_jk)

    per_observation uses ``lam`` in place of ``lam / J_i`` and ``lam / I_j``.
    ``mode='feature_at_a_time'`` trains feature k to convergence with the
    earlier ones frozen before moving on.  With a ``probe`` set training
    stops after ``schedule.patience`` epochs without a probe improvement
    and the best iterate is returned.
    """
    schedule = schedule or FitSchedule()
    if mode not in ("all_features", "feature_at_a_time"):
        raise ValueError(f"unknown mode {mode!r}")
    I, J = train.num_users, train.num_movies
    reg_u, reg_v = _reg_arrays(train, lam, reg_convention, I, J)
    resid = _targets(train, baseline)
    users = train.users.astype(np.int64)
    movies = train.movies.astype(np.int64)
    init_rng = np.random.default_rng([schedule.seed, 1])
    shuffle_rng = np.random.default_rng([schedule.seed, 2])
    U = np.zeros((I, p))
    V = np.zeros((J, p))
    reg = {"convention": reg_convention, "lambda": lam}
    model = FactorModel(U, V, baseline=baseline, reg=reg, kind="sgd")

    blocks = [(0, p)] if mode == "all_features" else [(k, k + 1) for k in range(p)]
    log_blocks = []
    for k0, k1 in blocks:
        U[:, k0:k1] = init_rng.standard_normal((I, k1 - k0)) * schedule.init_std
        V[:, k0:k1] = init_rng.standard_normal((J, k1 - k0)) * schedule.init_std
        probe_fn = None if probe is None else (lambda: _rmse(model, probe))
        mon = _Monitor(schedule, probe_fn)
        mon.update(sgd_objective(train, U, V, lam, reg_convention, resid), lambda: None)
        eta = schedule.eta
        epoch = 0
        for epoch in range(1, schedule.max_epochs + 1):
            order = shuffle_rng.permutation(train.n)
            _kernels.sgd_epoch(users, movies, resid, order, U, V, reg_u, reg_v, eta, k0, k1)
            eta *= schedule.eta_decay
            obj = sgd_objective(train, U, V, lam, reg_convention, resid)
            if mon.update(obj, lambda: (U.copy(), V.copy())):
                break
        if mon.best is not None:
            U[:], V[:] = mon.best
        log_blocks.append({"features": [k0, k1], "epochs": epoch,
                           "objective": mon.history[-1],
                           "best_probe_rmse": None if probe is None else mon.best_probe,
                           "probe_history": mon.probe_history})
    model.fit_log = {"mode": mode, "blocks": log_blocks,
                     "objective": sgd_objective(train, U, V, lam, reg_convention, resid)}
    return model


# ---------------------------------------------------------------------------
# NSVD


def composite_user_factors(train: RatingsDataset, U: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """u_i + |J(i)|^-1/2 sum_{j in J(i)} y_j; users without ratings keep u_i."""
    S = _indicator(train.users.astype(np.int64), train.num_users)
    sums = S @ Y[train.movies]
    n = train.user_counts.astype(float)
    scale = np.divide(1.0, np.sqrt(n), out=np.zeros_like(n), where=n > 0)
    return U + scale[:, None] * sums


def nsvd_objective(train, U, V, Y, lam, resid, train_user=True) -> float:
    """sum_C e^2 + (lam/2)(sum|u|^2 + sum|v|^2 + sum|y|^2)."""
    Z = composite_user_factors(train, U, Y)
    e = resid - np.einsum("nk,nk->n", Z[train.users], V[train.movies])
    pen = np.sum(V * V) + np.sum(Y * Y) + (np.sum(U * U) if train_user else 0.0)
    return float(e @ e + 0.5 * lam * pen)


def fit_nsvd(
    train: RatingsDataset,
    p: int,
    lam: float = 0.0,
    schedule: FitSchedule | None = None,
    baseline: BaselineModel | None = None,
    train_user: bool = True,
    train_secondary: bool = True,
    probe: RatingsDataset | None = None,
) -> FactorModel:
    """Asymmetric factors: r_hat = b + v_j'(u_i + |J(i)|^-1/2 sum_{J(i)} y).

    ``train_user=False`` pins u at zero so users are described only through
    the movies they rated.  ``train_secondary=False`` pins y at zero, which
    reduces to the plain factor model.  Penalties follow the per-parameter
    convention (lam / support per occurrence).
    """
    schedule = schedule or FitSchedule()
    I, J = train.num_users, train.num_movies
    resid = _targets(train, baseline)
    reg_u, reg_v = _reg_arrays(train, lam, PER_PARAMETER, I, J)
    reg_y = reg_v.copy()
    init_rng = np.random.default_rng([schedule.seed, 1])
    shuffle_rng = np.random.default_rng([schedule.seed, 2])
    U = init_rng.standard_normal((I, p)) * schedule.init_std if train_user else np.zeros((I, p))
    V = init_rng.standard_normal((J, p)) * schedule.init_std
    Y = init_rng.standard_normal((J, p)) * schedule.init_std if train_secondary else np.zeros((J, p))
    movies = train.movies.astype(np.int64)
    user_ptr = train.user_ptr.astype(np.int64)
    model = FactorModel(U, V, baseline=baseline, Y=Y, kind="nsvd",
                        reg={"convention": PER_PARAMETER, "lambda": lam,
                             "train_user": train_user, "train_secondary": train_secondary})

    def refresh():
        model.user_composite = composite_user_factors(train, U, Y)

    def probe_fn():
        refresh()
        return _rmse(model, probe)

    mon = _Monitor(schedule, None if probe is None else probe_fn)
    mon.update(nsvd_objective(train, U, V, Y, lam, resid, train_user), lambda: None)
    eta = schedule.eta
    epoch = 0
    for epoch in range(1, schedule.max_epochs + 1):
        order = shuffle_rng.permutation(I)
        _kernels.nsvd_epoch(user_ptr, movies, resid, order, U, V, Y,
                            reg_u, reg_v, reg_y, eta, train_user, train_secondary)
        eta *= schedule.eta_decay
        obj = nsvd_objective(train, U, V, Y, lam, resid, train_user)
        if mon.update(obj, lambda: (U.copy(), V.copy(), Y.copy())):
            break
    if mon.best is not None:
        U[:], V[:], Y[:] = mon.best
    refresh()
    model.fit_log = {"epochs": epoch, "objective": nsvd_objective(train, U, V, Y, lam, resid, train_user),
                     "best_probe_rmse": None if probe is None else mon.best_probe}
    return model


def load_factor(path) -> FactorModel:
    with open(path, encoding="utf-8") as fh:
        return FactorModel.from_dict(json.load(fh))
