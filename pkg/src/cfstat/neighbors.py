"""Movie-movie neighbourhood models on residuals.

Similarities are computed over common supports I(j, j') with sparse
products, shrunk by n/(n + lambda) and truncated to the ``top_M`` strongest
per movie.  Predictions either average a user's residuals over the nearest
rated movies, weighted by similarity, or use shared weights fitted by SGD.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .dataset import RatingsDataset
from .errors import DataFormatError, DivergenceError
from .factor import FitSchedule
from .predictions import PredictionSet

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MEASURES = ("pearson_movie_centered", "pearson_user_centered", "cosine")


@dataclass
class SimilarityTable:
    """Retained neighbours per movie in CSR layout.

    Row j lists its neighbours ordered by shrunk |s| descending, ties to the
    lower movie index.  ``raw`` is the similarity before shrinkage.
    """

    indptr: np.ndarray
    neighbors: np.ndarray
    s: np.ndarray
    raw: np.ndarray
    n: np.ndarray
    measure: str
    shrink_lambda: float
    top_M: int
    min_support: int
    undefined_pairs: int = 0

    @property
    def num_movies(self) -> int:
        return self.indptr.size - 1

    def row(self, j: int):
        lo, hi = self.indptr[j], self.indptr[j + 1]
        return self.neighbors[lo:hi], self.s[lo:hi]

    def pairs(self) -> dict:
        """{(j, j'): (s, n)} over all retained entries."""
        rows = np.repeat(np.arange(self.num_movies), np.diff(self.indptr))
        return {(int(a), int(b)): (float(x), int(c))
                for a, b, x, c in zip(rows, self.neighbors, self.s, self.n)}

    def header(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "similarity", "measure": self.measure,
                "shrink_lambda": self.shrink_lambda, "top_M": self.top_M,
                "min_support": self.min_support, "num_movies": self.num_movies,
                "undefined_pairs": self.undefined_pairs}

    def save(self, path) -> None:
        """Binary triples (j, j', s, n) plus a JSON header, as .npz."""
        rows = np.repeat(np.arange(self.num_movies, dtype=np.int32), np.diff(self.indptr))
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(self.header())), j=rows,
                     j2=self.neighbors, s=self.s, raw=self.raw, n=self.n)


def load_similarity(path) -> SimilarityTable:
    with np.load(path, allow_pickle=False) as z:
        head = json.loads(str(z["header"]))
        if head.get("schema_version") != SCHEMA_VERSION:
            raise DataFormatError(f"{path}: unsupported similarity schema")
        rows = z["j"]
        J = head["num_movies"]
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=J))])
        return SimilarityTable(indptr, z["j2"].astype(np.int32), z["s"], z["raw"], z["n"],
                               head["measure"], head["shrink_lambda"], head["top_M"],
                               head["min_support"], head.get("undefined_pairs", 0))


def _centered(res: RatingsDataset, measure: str) -> np.ndarray:
    x = res.values
    if measure == "cosine":
        return x.copy()
    if measure == "pearson_movie_centered":
        idx, counts = res.movies, res.movie_counts
    else:
        idx, counts = res.users, res.user_counts
    sums = np.bincount(idx, weights=x, minlength=counts.size)
    means = np.divide(sums, counts, out=np.zeros(counts.size), where=counts > 0)
    return x - means[idx]


def build_similarity(
    residuals: RatingsDataset,
    measure: str = "pearson_movie_centered",
    shrink_lambda: float = 0.0,
    top_M: int = 50,
    min_support: int = 4,
) -> SimilarityTable:
    """Shrunk movie-movie similarities over common supports.

    Centring means (movie or user) use each movie's or user's full set of
    ratings; the sums in numerator and denominators run over the users who
    rated both movies.  Pairs whose centred values vanish on the common
    support get s = 0 and are counted in ``undefined_pairs``.
    """
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    if shrink_lambda < 0:
        raise ValueError("shrink_lambda must be >= 0")
    if measure != "cosine" and min_support < 2:
        raise ValueError("Pearson similarities need min_support >= 2")
    if top_M < 1:
        raise ValueError("top_M must be >= 1")
    I, J = residuals.num_users, residuals.num_movies
    c = _centered(residuals, measure)
    shape = (I, J)
    C = sp.csc_matrix((c, (residuals.users, residuals.movies)), shape=shape)
    C2 = sp.csc_matrix((c * c, (residuals.users, residuals.movies)), shape=shape)
    M = sp.csc_matrix((np.ones(residuals.n), (residuals.users, residuals.movies)), shape=shape)

    num = (C.T @ C).tocsr()
    D = (C2.T @ M).tocsr()  # D[j, j'] = sum over I(j, j') of c_ij^2
    N = (M.T @ M).tocsr()
    N.setdiag(0)
    N.eliminate_zeros()
    N.sort_indices()

    indptr = [0]
    nb_all, s_all, raw_all, n_all = [], [], [], []
    undefined = 0
    for j in range(J):
        lo, hi = N.indptr[j], N.indptr[j + 1]
        cols = N.indices[lo:hi]
        cnt = N.data[lo:hi]
        keep = cnt >= min_support
        cols, cnt = cols[keep], cnt[keep]
        if cols.size == 0:
            indptr.append(indptr[-1])
            continue
        nums = np.asarray(num[j, cols].todense()).ravel()
        dj = np.asarray(D[j, cols].todense()).ravel()
        dk = np.asarray(D[cols, j].todense()).ravel()
        den = np.sqrt(dj * dk)
        ok = den > 0
        undefined += int((~ok).sum())
        raw = np.divide(nums, den, out=np.zeros(cols.size), where=ok)
        raw = np.clip(raw, -1.0, 1.0)
        shrunk = cnt / (cnt + shrink_lambda) * raw if shrink_lambda > 0 else raw
        order = np.lexsort((cols, -np.abs(shrunk)))[:top_M]
        nb_all.append(cols[order])
        s_all.append(shrunk[order])
        raw_all.append(raw[order])
        n_all.append(cnt[order])
        indptr.append(indptr[-1] + order.size)

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype)

    if undefined:
        # each unordered pair is visited twice
        logger.info("%d movie pairs with zero variance on their common support", undefined // 2)
    return SimilarityTable(np.asarray(indptr, dtype=np.int64), cat(nb_all, np.int32),
                           cat(s_all, float), cat(raw_all, float), cat(n_all, np.int64),
                           measure, float(shrink_lambda), int(top_M), int(min_support),
                           undefined // 2)


# ---------------------------------------------------------------------------
# prediction


@dataclass
class KnnModel:
    table: SimilarityTable
    K: int
    base: object | None = None  # any model with predict_values, or None for raw ratings
    weighting: str = "similarity_weights"
    exclude_negative: bool = True
    weights: np.ndarray | None = None  # aligned with table entries, global_weights only
    fit_log: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.weighting not in ("similarity_weights", "global_weights"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    def base_values(self, users, movies) -> np.ndarray:
        if self.base is None:
            return np.zeros(np.shape(users))
        return self.base.predict_values(users, movies)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "knn", "K": self.K,
                "weighting": self.weighting, "exclude_negative": self.exclude_negative,
                "table": self.table.header(),
                "weights": None if self.weights is None else self.weights.tolist(),
                "fit_log": self.fit_log}


def train_residuals(train: RatingsDataset, base) -> np.ndarray:
    r = train.values
    return r if base is None else r - base.predict_values(train.users, train.movies)


def similarity_neighbors(table: SimilarityTable, j: int, rated: np.ndarray, K: int,
                         exclude_negative: bool = True):
    """N(j; i): positions into ``rated`` (sorted movie ids) and their s.

    The K rated movies with the highest s; ties go to the lower index.
    """
    nb, s = table.row(j)
    common, pos_nb, pos_rated = np.intersect1d(nb, rated, assume_unique=True, return_indices=True)
    s = s[pos_nb]
    if exclude_negative:
        keep = s > 0
        common, s, pos_rated = common[keep], s[keep], pos_rated[keep]
    order = np.lexsort((common, -s))[:K]
    return pos_rated[order], s[order]


def global_neighbors(table: SimilarityTable, j: int, rated: np.ndarray, K: int):
    """N^K(j; i) = J(i) intersected with the first K table entries of movie j.

    Returns positions into ``rated`` and the table entry ids (weight slots).
    """
    lo = table.indptr[j]
    nb = table.neighbors[lo:min(lo + K, table.indptr[j + 1])]
    _, pos_nb, pos_rated = np.intersect1d(nb, rated, assume_unique=True, return_indices=True)
    order = np.argsort(pos_nb, kind="stable")
    return pos_rated[order], lo + pos_nb[order]


def predict_knn(model: KnnModel, users, movies, train: RatingsDataset,
                split_id: str = "") -> PredictionSet:
    """Baseline plus a neighbourhood estimate of the residual.

    Empty neighbourhoods (and, for similarity weights, a non-positive
    similarity sum) give a zero residual; these are counted in
    ``info['fallbacks']``.
    """
    users = np.asarray(users, dtype=np.int64)
    movies = np.asarray(movies, dtype=np.int64)
    res = train_residuals(train, model.base)
    est = np.zeros(users.size)
    fallbacks = 0
    for q, (i, j) in enumerate(zip(users.tolist(), movies.tolist())):
        if i >= train.num_users or j >= model.table.num_movies:
            fallbacks += 1
            continue
        lo, hi = train.user_ptr[i], train.user_ptr[i + 1]
        rated = train.movies[lo:hi]
        r = res[lo:hi]
        if model.weighting == "similarity_weights":
            pos, s = similarity_neighbors(model.table, j, rated, model.K, model.exclude_negative)
            tot = s.sum()
            if pos.size == 0 or tot <= 0:
                fallbacks += 1
                continue
            est[q] = s @ r[pos] / tot
        else:
            pos, slots = global_neighbors(model.table, j, rated, model.K)
            if pos.size == 0:
                fallbacks += 1
                continue
            est[q] = r[pos] @ model.weights[slots] / math.sqrt(pos.size)
    if fallbacks:
        logger.info("kNN fell back to the base model for %d of %d pairs", fallbacks, users.size)
    values = model.base_values(users, movies) + est
    return PredictionSet(users, movies, values, model_id=f"knn-{model.weighting}",
                         split_id=split_id, info={"fallbacks": fallbacks})


# ---------------------------------------------------------------------------
# global weights


@dataclass
class NeighborDesign:
    """Per-rating neighbour lists for the global-weights objective."""

    target: np.ndarray
    ptr: np.ndarray
    resid: np.ndarray
    slot: np.ndarray
    occurrences: np.ndarray


def neighbor_design(train: RatingsDataset, base, table: SimilarityTable, K: int) -> NeighborDesign:
    res = train_residuals(train, base)
    ptr = [0]
    nres, nslot = [], []
    for t in range(train.n):
        i, j = int(train.users[t]), int(train.movies[t])
        lo, hi = train.user_ptr[i], train.user_ptr[i + 1]
        pos, slots = global_neighbors(table, j, train.movies[lo:hi], K)
        nres.append(res[lo:hi][pos])
        nslot.append(slots)
        ptr.append(ptr[-1] + pos.size)
    resid = np.concatenate(nres) if nres else np.zeros(0)
    slot = np.concatenate(nslot).astype(np.int64) if nslot else np.zeros(0, np.int64)
    occ = np.bincount(slot, minlength=table.neighbors.size)
    return NeighborDesign(res, np.asarray(ptr, dtype=np.int64), resid, slot, occ)


def _scales(design: NeighborDesign) -> np.ndarray:
    n = np.diff(design.ptr).astype(float)
    return np.divide(1.0, np.sqrt(n), out=np.zeros_like(n), where=n > 0)


def _errors(design: NeighborDesign, w: np.ndarray):
    counts = np.diff(design.ptr)
    rows = np.repeat(np.arange(counts.size), counts)
    c = np.repeat(_scales(design), counts)
    pred = np.bincount(rows, weights=c * design.resid * w[design.slot], minlength=counts.size)
    return design.target - pred, rows, c


def global_weights_objective(design: NeighborDesign, w: np.ndarray, lambda_w: float) -> float:
    """sum_C (r - b - |N|^-1/2 sum (r' - b') w)^2 + lambda_w |w|^2."""
    e, _, _ = _errors(design, w)
    return float(e @ e + lambda_w * (w @ w))


def global_weights_gradient(design: NeighborDesign, w: np.ndarray, lambda_w: float) -> np.ndarray:
    e, rows, c = _errors(design, w)
    g = np.bincount(design.slot, weights=-2.0 * e[rows] * c * design.resid, minlength=w.size)
    return g + 2.0 * lambda_w * w


def fit_global_weights(
    train: RatingsDataset,
    table: SimilarityTable,
    K: int,
    lambda_w: float,
    schedule: FitSchedule | None = None,
    base=None,
) -> KnnModel:
    """Shared neighbour weights by SGD over C.

    The ridge term is split evenly over each weight's occurrences and
    applied as a proximal step, so every epoch descends on the full
    objective in expectation.  ``lambda_w = inf`` pins all weights at zero.
    """
    schedule = schedule or FitSchedule(max_epochs=100, eta=0.01, tol_obj=1e-8)
    if lambda_w < 0:
        raise ValueError("lambda_w must be >= 0")
    design = neighbor_design(train, base, table, K)
    w = np.zeros(table.neighbors.size)
    model = KnnModel(table, K, base=base, weighting="global_weights", weights=w)
    if math.isinf(lambda_w):
        model.fit_log = {"epochs": 0, "objective": float(design.target @ design.target)}
        return model
    shrink = np.divide(2.0 * lambda_w, design.occurrences,
                       out=np.zeros(w.size), where=design.occurrences > 0)
    rng = np.random.default_rng([schedule.seed, 3])
    history = [global_weights_objective(design, w, lambda_w)]
    eta = schedule.eta
    rises = 0
    epoch = 0
    for epoch in range(1, schedule.max_epochs + 1):
        _kernels.global_weights_epoch(rng.permutation(train.n), design.target, design.ptr,
                                      design.resid, design.slot, w, shrink, eta)
        eta *= schedule.eta_decay
        obj = global_weights_objective(design, w, lambda_w)
        if not math.isfinite(obj):
            raise DivergenceError("non-finite objective in global-weights fit; reduce eta")
        if epoch == 1 and obj > history[0] * (1 + schedule.divergence_tol):
            raise DivergenceError("first epoch increased the objective; reduce eta")
        lowest = min(history)
        rises = rises + 1 if (obj > history[-1] and obj > lowest * (1 + schedule.divergence_tol)) else 0
        if rises >= 3:
            raise DivergenceError("objective increased for 3 consecutive epochs")
        history.append(obj)
        if 0 <= history[-2] - obj <= schedule.tol_obj * max(history[-2], 1e-300):
            break
    model.fit_log = {"epochs": epoch, "objective": history[-1], "lambda_w": lambda_w}
    return model
