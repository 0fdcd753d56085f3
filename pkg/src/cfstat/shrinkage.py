"""Regularisation analytics for the penalised complete I x J ANOVA.

The fitted values of the penalised complete ANOVA are a linear map of the
data, r_hat = H(lambda) r, so the effective degrees of freedom are
trace(H).  Mallows' Cp = RSS / sigma^2 + 2 df separates in the two
shrinkage factors J/(J+lambda1) and I/(I+lambda2), which gives approximate
closed-form optimal penalties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .baseline import fit_penalized_complete
from .dataset import RatingsDataset


def _factor(n: int, lam: float) -> float:
    return 0.0 if math.isinf(lam) else n / (n + lam)


def effective_df(I: int, J: int, lambda1: float, lambda2: float) -> float:
    """trace(H) = 1 + (I-1) J/(J+lambda1) + (J-1) I/(I+lambda2)."""
    if I < 1 or J < 1:
        raise ValueError("need I, J >= 1")
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("penalties must be non-negative")
    return 1.0 + (I - 1) * _factor(J, lambda1) + (J - 1) * _factor(I, lambda2)


def _fitted(R: np.ndarray, lambda1: float, lambda2: float) -> np.ndarray:
    m = fit_penalized_complete(R, lambda1, lambda2)
    return m.mu + m.alpha[:, None] + m.beta[None, :]


def perturbation_df(I: int, J: int, lambda1: float, lambda2: float,
                    delta: float = 1.0, seed: int = 0) -> float:
    """trace of the hat map by finite differences of the closed-form fit.

    Each cell in turn is bumped by ``delta`` and the change in its own fitted
    value recorded.  The map is linear, so the result is exact up to rounding
    and does not depend on the base matrix.
    """
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((I, J))
    f0 = _fitted(base, lambda1, lambda2)
    total = 0.0
    for i in range(I):
        for j in range(J):
            bumped = base.copy()
            bumped[i, j] += delta
            total += (_fitted(bumped, lambda1, lambda2)[i, j] - f0[i, j]) / delta
    return total


def covariance_df(mean: np.ndarray, sigma2: float, lambda1: float, lambda2: float,
                  reps: int = 2000, seed: int = 0) -> float:
    """Monte-Carlo estimate of sum Cov(Y, Y_hat) / sigma^2 around ``mean``."""
    rng = np.random.default_rng(seed)
    mean = np.asarray(mean, dtype=float)
    sd = math.sqrt(sigma2)
    ys = mean[None] + sd * rng.standard_normal((reps,) + mean.shape)
    fits = np.stack([_fitted(y, lambda1, lambda2) for y in ys])
    cov = ((ys - ys.mean(0)) * (fits - fits.mean(0))).sum(0) / (reps - 1)
    return float(cov.sum() / sigma2)


def _effects(R: np.ndarray):
    g = R.mean()
    return g, R.mean(axis=1) - g, R.mean(axis=0) - g


def residual_ss(matrix, lambda1: float, lambda2: float) -> float:
    R = np.asarray(matrix, dtype=float)
    e = R - _fitted(R, lambda1, lambda2)
    return float((e * e).sum())


@dataclass
class DfReport:
    lambda1: float
    lambda2: float
    df: float
    residual_ss: float
    sigma2: float
    cp: float


def cp_report(matrix, lambda1: float, lambda2: float, sigma2: float) -> DfReport:
    """Mallows' Cp = RSS / sigma^2 + 2 df for one penalty pair."""
    R = np.asarray(matrix, dtype=float)
    I, J = R.shape
    df = effective_df(I, J, lambda1, lambda2)
    rss = residual_ss(R, lambda1, lambda2)
    return DfReport(lambda1, lambda2, df, rss, sigma2, rss / sigma2 + 2 * df)


class OptimalLambdas(NamedTuple):
    lambda1: float
    lambda2: float

    @property
    def degenerate(self) -> bool:
        return math.isinf(self.lambda1) or math.isinf(self.lambda2)


def optimal_lambdas(matrix, sigma2: float) -> OptimalLambdas:
    """Approximate Cp-optimal penalties.

    lambda1 = sigma^2 / (sum_i (r_i. - r..)^2 / (I-1)), lambda2 likewise over
    columns.  Zero row (column) variation gives an infinite, degenerate
    penalty.
    """
    R = np.asarray(matrix, dtype=float)
    I, J = R.shape
    if I < 2 or J < 2:
        raise ValueError("need I, J >= 2")
    _, a, b = _effects(R)
    va = a @ a / (I - 1)
    vb = b @ b / (J - 1)
    # tolerance: exact zero variation comes out at rounding level
    scale = max(float(np.abs(R).max()), 1.0) ** 2 * 1e-24
    l1 = math.inf if va <= scale else sigma2 / va
    l2 = math.inf if vb <= scale else sigma2 / vb
    return OptimalLambdas(l1, l2)


def exact_cp_minimizer(matrix, sigma2: float) -> OptimalLambdas:
    """Minimiser of Cp without the approximation in :func:`optimal_lambdas`.

    Setting the derivative in c = J/(J+lambda1) to zero gives
    1 - c = (I-1) sigma^2 / (J S_a) with S_a = sum (r_i. - r..)^2; an
    infinite penalty results when that exceeds one.
    """
    R = np.asarray(matrix, dtype=float)
    I, J = R.shape
    _, a, b = _effects(R)

    def solve(n_other, n_groups, ss):
        if ss <= 0:
            return math.inf
        x = (n_groups - 1) * sigma2 / (n_other * ss)
        return math.inf if x >= 1 else n_other * x / (1 - x)

    return OptimalLambdas(solve(J, I, a @ a), solve(I, J, b @ b))


def cp_grid(matrix, sigma2: float, grid1, grid2) -> np.ndarray:
    """Cp over the outer product of two penalty grids from closed-form fitted values."""
    R = np.asarray(matrix, dtype=float)
    I, J = R.shape
    g, a, b = _effects(R)
    grid1 = np.asarray(grid1, dtype=float)
    grid2 = np.asarray(grid2, dtype=float)
    c1 = J / (J + grid1)
    c2 = I / (I + grid2)
    # fitted values for every grid pair, broadcast to (G1, G2, I, J)
    fit = g + c1[:, None, None, None] * a[None, None, :, None] + c2[None, :, None, None] * b[None, None, None, :]
    e = R[None, None] - fit
    rss = (e * e).sum(axis=(2, 3))
    df = 1 + (I - 1) * c1[:, None] + (J - 1) * c2[None, :]
    return rss / sigma2 + 2 * df


@dataclass
class GridCheck:
    formula: OptimalLambdas
    grid_argmin: tuple[float, float]
    step: tuple[float, float]
    within_one_step: bool


def verify_optimal_lambdas(matrix, sigma2: float, points: int = 21, span: float = 10.0) -> GridCheck:
    """Grid-search Cp over [0, span * lambda_formula]^2 and compare.

    The grid is linear with ``points`` values per axis, so one step is
    ``span * lambda_formula / (points - 1)``.
    """
    formula = optimal_lambdas(matrix, sigma2)
    if formula.degenerate or formula.lambda1 == 0 or formula.lambda2 == 0:
        raise ValueError("grid check needs finite, positive formula penalties")
    g1 = np.linspace(0.0, span * formula.lambda1, points)
    g2 = np.linspace(0.0, span * formula.lambda2, points)
    cp = cp_grid(matrix, sigma2, g1, g2)
    k1, k2 = np.unravel_index(int(np.argmin(cp)), cp.shape)
    s1, s2 = g1[1] - g1[0], g2[1] - g2[0]
    ok = (abs(g1[k1] - formula.lambda1) <= s1 * (1 + 1e-9)
          and abs(g2[k2] - formula.lambda2) <= s2 * (1 + 1e-9))
    return GridCheck(formula, (float(g1[k1]), float(g2[k2])), (float(s1), float(s2)), ok)


class EBVariances(NamedTuple):
    sigma1_sq: float
    sigma2_sq: float

    def clamped(self) -> "EBVariances":
        return EBVariances(max(self.sigma1_sq, 0.0), max(self.sigma2_sq, 0.0))


def empirical_bayes_variances(matrix, sigma2: float) -> EBVariances:
    """Marginal-likelihood estimates of the row and column effect variances.

    sigma1^2 = (1/I) sum (r_i. - r..)^2 - sigma^2 / J and symmetrically.
    Negative values are returned as computed; use ``.clamped()`` for the
    truncated version.
    """
    R = np.asarray(matrix, dtype=float)
    I, J = R.shape
    _, a, b = _effects(R)
    return EBVariances(float(a @ a / I - sigma2 / J), float(b @ b / J - sigma2 / I))


def estimate_sigma2(matrix) -> float:
    """Residual variance of the unpenalised complete fit, RSS / (N - df0)."""
    R = np.asarray(matrix, dtype=float)
    I, J = R.shape
    dof = I * J - (I + J - 1)
    if dof <= 0:
        raise ValueError("no residual degrees of freedom")
    return residual_ss(R, 0.0, 0.0) / dof


def estimate_sigma2_sparse(train: RatingsDataset) -> float:
    """Sparse analogue: RSS of the unpenalised two-way fit over N - df0,
    df0 = 1 + (#users rated - 1) + (#movies rated - 1)."""
    from .baseline import fit_twoway_sparse

    model = fit_twoway_sparse(train, 0.0, 0.0, tol_obj=1e-12 * train.n, max_iters=5000)
    e = model.residuals(train)
    df0 = 1 + int((train.user_counts > 0).sum()) - 1 + int((train.movie_counts > 0).sum()) - 1
    dof = train.n - df0
    if dof <= 0:
        raise ValueError("no residual degrees of freedom")
    return float(e @ e) / dof
