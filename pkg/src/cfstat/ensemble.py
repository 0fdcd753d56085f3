"""Evaluation and ridge blending of prediction sets.

A blend regresses the probe truth on member predictions plus an unpenalised
intercept.  Rows can be split into support strata (user support by movie
support, log-binned at probe terciles) with a separate regression in each.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .predictions import PredictionSet

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_LAMBDA_GRID = (0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)


def rmse(predictions, truth) -> float:
    """Root mean squared error over aligned rows.

    ``predictions`` and ``truth`` may be PredictionSets (their user and movie
    columns must agree) or plain arrays of equal length.
    """
    p_rows = _rows(predictions)
    t_rows = _rows(truth)
    if p_rows is not None and t_rows is not None:
        if not (np.array_equal(p_rows[0], t_rows[0]) and np.array_equal(p_rows[1], t_rows[1])):
            raise ValueError("predictions and truth rows are not aligned")
    p = _values(predictions)
    t = _values(truth)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truth values")
    if p.size == 0:
        raise ValueError("no rows to score")
    e = p - t
    return float(np.sqrt(np.mean(e * e)))


def format_rmse(value: float) -> str:
    return f"{value:.6f}"


def _rows(x):
    if isinstance(x, PredictionSet):
        return x.users, x.movies
    if hasattr(x, "users") and hasattr(x, "movies"):
        return np.asarray(x.users, dtype=np.int64), np.asarray(x.movies, dtype=np.int64)
    return None


def _values(x) -> np.ndarray:
    if isinstance(x, PredictionSet):
        return x.values
    if hasattr(x, "values") and not isinstance(x, np.ndarray):
        v = x.values
        return np.asarray(v() if callable(v) else v, dtype=float)
    return np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# strata


@dataclass
class Strata:
    """Grid of bins over log user support and log movie support.

    ``user_edges`` and ``movie_edges`` are interior cut points on
    log(1 + support); a single stratum has no edges.
    """

    user_edges: list = field(default_factory=list)
    movie_edges: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return (len(self.user_edges) + 1) * (len(self.movie_edges) + 1)

    @classmethod
    def single(cls) -> "Strata":
        return cls([], [])

    @classmethod
    def terciles(cls, user_support, movie_support, bins: int = 3) -> "Strata":
        qs = np.arange(1, bins) / bins
        lu = np.log1p(np.asarray(user_support, dtype=float))
        lm = np.log1p(np.asarray(movie_support, dtype=float))
        return cls(np.quantile(lu, qs).tolist(), np.quantile(lm, qs).tolist())

    def assign(self, user_support, movie_support) -> np.ndarray:
        lu = np.log1p(np.asarray(user_support, dtype=float))
        lm = np.log1p(np.asarray(movie_support, dtype=float))
        bu = np.searchsorted(self.user_edges, lu, side="right")
        bm = np.searchsorted(self.movie_edges, lm, side="right")
        return bu * (len(self.movie_edges) + 1) + bm

    def to_dict(self) -> dict:
        return {"user_edges": list(map(float, self.user_edges)),
                "movie_edges": list(map(float, self.movie_edges))}


def support_of(train, users, movies) -> tuple[np.ndarray, np.ndarray]:
    """(J_i, I_j) training supports for query rows; unknown indices give 0."""
    users = np.asarray(users, dtype=np.int64)
    movies = np.asarray(movies, dtype=np.int64)
    uc = np.zeros(users.size, dtype=np.int64)
    mc = np.zeros(movies.size, dtype=np.int64)
    ok = users < train.num_users
    uc[ok] = train.user_counts[users[ok]]
    ok = movies < train.num_movies
    mc[ok] = train.movie_counts[movies[ok]]
    return uc, mc


# ---------------------------------------------------------------------------
# blending


@dataclass
class BlendModel:
    members: list
    intercepts: np.ndarray  # (strata,)
    weights: np.ndarray  # (strata, members)
    ridge_lambda: float
    strata: Strata = field(default_factory=Strata.single)
    fit_log: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "blend", "members": list(self.members),
                "intercepts": self.intercepts.tolist(), "weights": self.weights.tolist(),
                "ridge_lambda": self.ridge_lambda, "strata": self.strata.to_dict(),
                "fit_log": self.fit_log}

    @classmethod
    def from_dict(cls, d: dict) -> "BlendModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported blend schema {d.get('schema_version')}")
        return cls(list(d["members"]), np.asarray(d["intercepts"], float),
                   np.asarray(d["weights"], float).reshape(len(d["intercepts"]), len(d["members"])),
                   float(d["ridge_lambda"]), Strata(**d["strata"]), d.get("fit_log", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def load_blend(path) -> BlendModel:
    with open(path, encoding="utf-8") as fh:
        return BlendModel.from_dict(json.load(fh))


def _ridge(X: np.ndarray, y: np.ndarray, lam: float):
    """Ridge with an unpenalised intercept; returns (b0, w, rank_deficient)."""
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    yc = y - ym
    m = X.shape[1]
    if lam > 0:
        w = np.linalg.solve(Xc.T @ Xc + lam * np.eye(m), Xc.T @ yc)
        deficient = False
    else:
        w, _, rank, _ = np.linalg.lstsq(Xc, yc, rcond=None)
        deficient = rank < m
    return float(ym - xm @ w), w, deficient


def _cv_lambda(X, y, grid, folds: int, seed: int) -> tuple[float, dict]:
    n = y.size
    k = min(folds, n)
    if k < 2:
        return float(grid[0]), {}
    fold = np.random.default_rng([seed, 7]).permutation(n) % k
    scores = {}
    for lam in grid:
        sse = 0.0
        for f in range(k):
            tr = fold != f
            b0, w, _ = _ridge(X[tr], y[tr], lam)
            e = y[~tr] - b0 - X[~tr] @ w
            sse += float(e @ e)
        scores[float(lam)] = math.sqrt(sse / n)
    best = min(scores, key=lambda lam: (scores[lam], -lam))
    return best, scores


def _stack(members) -> tuple[np.ndarray, list]:
    if not members:
        raise ValueError("need at least one member")
    first = members[0]
    for m in members[1:]:
        if not m.aligned_with(first.users, first.movies):
            raise ValueError(f"member {m.model_id!r} is not aligned with {first.model_id!r}")
    X = np.column_stack([m.values for m in members])
    ids = [m.model_id or f"m{k}" for k, m in enumerate(members)]
    return X, ids


def fit_blend(
    members: list[PredictionSet],
    truth,
    ridge_lambda: float | None = None,
    strata: Strata | None = None,
    support: tuple[np.ndarray, np.ndarray] | None = None,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    folds: int = 5,
    min_rows: int | None = None,
    seed: int = 0,
) -> BlendModel:
    """Ridge-regress the truth on member predictions, per stratum.

    Without ``ridge_lambda`` the penalty is chosen by ``folds``-fold cross
    validation over ``lambda_grid`` on all probe rows.  With strata,
    ``support`` gives (J_i, I_j) per row; strata with fewer than ``min_rows``
    rows (default members + 2) reuse the pooled weights.
    """
    X, ids = _stack(members)
    y = _values(truth)
    if y.size != X.shape[0]:
        raise ValueError("truth and member predictions differ in length")
    if _rows(truth) is not None and not members[0].aligned_with(*_rows(truth)):
        raise ValueError("members are not aligned with the truth rows")
    log = {}
    if ridge_lambda is None:
        ridge_lambda, scores = _cv_lambda(X, y, list(lambda_grid), folds, seed)
        log["cv_rmse"] = scores
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be >= 0")
    strata = strata or Strata.single()
    pooled = _ridge(X, y, ridge_lambda)
    flagged = bool(pooled[2])
    S = strata.count
    b0 = np.full(S, pooled[0])
    W = np.tile(pooled[1], (S, 1))
    if S > 1:
        if support is None:
            raise ValueError("stratified blending needs per-row support counts")
        cell = strata.assign(*support)
        need = min_rows if min_rows is not None else X.shape[1] + 2
        pooled_cells = []
        for s in range(S):
            rows = cell == s
            if rows.sum() < need:
                pooled_cells.append(s)
                continue
            b0[s], W[s], d = _ridge(X[rows], y[rows], ridge_lambda)
            flagged |= bool(d)
        log["pooled_strata"] = pooled_cells
        log["rows_per_stratum"] = np.bincount(cell, minlength=S).tolist()
        u, m = (np.asarray(x) for x in support)
        log["support_range"] = [[int(u.min()), int(u.max())], [int(m.min()), int(m.max())]]
    if flagged:
        log["min_norm_solution"] = True
        logger.info("blend design is rank deficient; used the minimum-norm solution")
    fitted = apply_blend(BlendModel(ids, b0, W, ridge_lambda, strata), members, support=support)
    log["fit_rmse"] = rmse(fitted.values, y)
    return BlendModel(ids, b0, W, float(ridge_lambda), strata, log)


def apply_blend(blend: BlendModel, members: list[PredictionSet],
                support: tuple[np.ndarray, np.ndarray] | None = None,
                clip_range: tuple[float, float] | None = None, split_id: str = "") -> PredictionSet:
    """Per-row combination with the row's stratum weights.

    Supports outside the fitted range fall into the nearest edge bin
    (searchsorted never leaves the grid); the count of such rows is logged.
    """
    X, ids = _stack(members)
    if ids != list(blend.members):
        raise ValueError(f"members {ids} do not match blend members {blend.members}")
    if blend.strata.count > 1:
        if support is None:
            raise ValueError("stratified blend needs per-row support counts")
        cell = blend.strata.assign(*support)
        outside = _outside_range(blend, support)
        if outside:
            logger.info("%d rows outside the fitted support range used the nearest stratum", outside)
    else:
        cell = np.zeros(X.shape[0], dtype=np.int64)
        outside = 0
    values = blend.intercepts[cell] + np.einsum("nm,nm->n", X, blend.weights[cell])
    if clip_range is not None:
        values = np.clip(values, *clip_range)
    first = members[0]
    return PredictionSet(first.users, first.movies, values, model_id="blend", split_id=split_id,
                         clipped=clip_range is not None, info={"nearest_bin_rows": outside})


def _outside_range(blend: BlendModel, support) -> int:
    lo_hi = blend.fit_log.get("support_range")
    if not lo_hi:
        return 0
    (ulo, uhi), (mlo, mhi) = lo_hi
    u, m = (np.asarray(x) for x in support)
    return int(((u < ulo) | (u > uhi) | (m < mlo) | (m > mhi)).sum())


def cross_validated_rmse(members: list[PredictionSet], truth, ridge_lambda: float | None = None,
                         strata: Strata | None = None, support=None, folds: int = 5,
                         seed: int = 0) -> float:
    """Held-out RMSE of the blend procedure over ``folds`` splits of the probe rows."""
    y = _values(truth)
    n = y.size
    k = min(folds, n)
    if k < 2:
        raise ValueError("need at least two rows for cross validation")
    fold = np.random.default_rng([seed, 8]).permutation(n) % k
    pred = np.zeros(n)
    for f in range(k):
        tr = np.flatnonzero(fold != f)
        te = np.flatnonzero(fold == f)
        sub = None if support is None else (np.asarray(support[0])[tr], np.asarray(support[1])[tr])
        blend = fit_blend([m.take(tr) for m in members], y[tr], ridge_lambda, strata, sub, seed=seed)
        sub = None if support is None else (np.asarray(support[0])[te], np.asarray(support[1])[te])
        pred[te] = apply_blend(blend, [m.take(te) for m in members], support=sub).values
    return rmse(pred, y)


def evaluation_report(pred: PredictionSet, truth, strata: Strata | None = None,
                      support=None, in_sample: bool = False) -> dict:
    """{rmse, n, per-stratum rmse, fallback counts} for a prediction set."""
    y = _values(truth)
    report = {"rmse": round(rmse(pred, truth), 6), "n": int(y.size), "model": pred.model_id,
              "fallbacks": int(pred.info.get("fallbacks", 0)), "in_sample": bool(in_sample)}
    if strata is not None and strata.count > 1 and support is not None:
        cell = strata.assign(*support)
        per = {}
        for s in range(strata.count):
            rows = cell == s
            if rows.any():
                per[str(s)] = round(rmse(pred.values[rows], y[rows]), 6)
        report["per_stratum_rmse"] = per
    return report
