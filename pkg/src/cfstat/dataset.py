"""Sparse ratings storage, parsing, splitting and synthetic generation.

Ratings are stored once, sorted by user and then by movie within user.  A
second permutation gives the by-movie order, so either slice J(i) or I(j) is
a contiguous range of an index array.
"""

from __future__ import annotations

import csv
import datetime as _dt
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError

logger = logging.getLogger(__name__)

NO_DATE = np.iinfo(np.int32).min
_EPOCH = _dt.date(1970, 1, 1)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _parse_date(text: str) -> int:
    text = text.strip()
    if not text:
        return NO_DATE
    if text.lstrip("-").isdigit():
        return int(text)
    return (_dt.date.fromisoformat(text) - _EPOCH).days


class RatingsDataset:
    """Immutable (user, movie, rating[, date]) triplets with a dual index.

    Users and movies are dense 0-based indices.  External ids, when the data
    came from a file, are kept in ``user_ids`` / ``movie_ids`` so that
    ``user_ids[i]`` is the original id of dense user ``i``.

    Ratings parsed from files are stored as ``int8``.  Real-valued data
    (unclipped synthetic draws, residuals) keep ``float64`` and skip the
    ``1..K`` range check.
    """

    def __init__(
        self,
        users,
        movies,
        ratings,
        num_users: int | None = None,
        num_movies: int | None = None,
        K: int = 5,
        dates=None,
        user_ids=None,
        movie_ids=None,
    ):
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        ratings = np.asarray(ratings)
        if not (users.shape == movies.shape == ratings.shape) or users.ndim != 1:
            raise ValueError("users, movies and ratings must be 1-d arrays of equal length")
        if users.size and (users.min() < 0 or movies.min() < 0):
            raise ValueError("indices must be non-negative")

        self.num_users = int(num_users if num_users is not None else (users.max() + 1 if users.size else 0))
        self.num_movies = int(num_movies if num_movies is not None else (movies.max() + 1 if movies.size else 0))
        if users.size and (users.max() >= self.num_users or movies.max() >= self.num_movies):
            raise ValueError("index out of range for declared num_users/num_movies")
        self.K = int(K)

        if np.issubdtype(ratings.dtype, np.integer):
            if ratings.size and (ratings.min() < 1 or ratings.max() > self.K):
                bad = int(np.flatnonzero((ratings < 1) | (ratings > self.K))[0])
                raise DataFormatError(
                    f"rating {int(ratings[bad])} outside 1..{self.K} at row {bad}"
                )
            ratings = ratings.astype(np.int8)
        else:
            ratings = ratings.astype(np.float64)

        order = np.lexsort((movies, users))
        users, movies, ratings = users[order], movies[order], ratings[order]
        if dates is not None:
            dates = np.asarray(dates, dtype=np.int32)[order]

        dup = (np.diff(users) == 0) & (np.diff(movies) == 0)
        if dup.any():
            k = int(np.flatnonzero(dup)[0])
            u, m = int(users[k]), int(movies[k])
            uid = user_ids[u] if user_ids is not None else u
            mid = movie_ids[m] if movie_ids is not None else m
            raise DataFormatError(f"duplicate rating for user {uid}, movie {mid}")

        self.users = _frozen(users.astype(np.int32))
        self.movies = _frozen(movies.astype(np.int32))
        self.ratings = _frozen(ratings)
        self.dates = None if dates is None else _frozen(dates)
        self.user_ids = None if user_ids is None else _frozen(np.asarray(user_ids, dtype=np.int64))
        self.movie_ids = None if movie_ids is None else _frozen(np.asarray(movie_ids, dtype=np.int64))

        self.user_counts = _frozen(np.bincount(self.users, minlength=self.num_users).astype(np.int64))
        self.movie_counts = _frozen(np.bincount(self.movies, minlength=self.num_movies).astype(np.int64))
        self.user_ptr = _frozen(np.concatenate([[0], np.cumsum(self.user_counts)]))
        self.movie_ptr = _frozen(np.concatenate([[0], np.cumsum(self.movie_counts)]))
        # stable sort keeps users ascending inside each movie block
        self.by_movie = _frozen(np.argsort(self.movies, kind="stable").astype(np.int64))

    # -- basic accessors -------------------------------------------------

    def __len__(self) -> int:
        return int(self.ratings.size)

    @property
    def n(self) -> int:
        return len(self)

    @property
    def is_integer(self) -> bool:
        return np.issubdtype(self.ratings.dtype, np.integer)

    @property
    def values(self) -> np.ndarray:
        """Ratings as float64, in storage (user-major) order."""
        return self.ratings.astype(np.float64)

    def user_slice(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Movies J(i) rated by user ``i`` and the ratings given."""
        lo, hi = self.user_ptr[i], self.user_ptr[i + 1]
        return self.movies[lo:hi], self.ratings[lo:hi]

    def movie_slice(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Users I(j) who rated movie ``j`` and their ratings."""
        idx = self.by_movie[self.movie_ptr[j]:self.movie_ptr[j + 1]]
        return self.users[idx], self.ratings[idx]

    def iter_by_user(self) -> Iterable[tuple[int, int, float]]:
        for i in range(self.num_users):
            movies, vals = self.user_slice(i)
            for j, r in zip(movies, vals):
                yield i, int(j), r

    def iter_by_movie(self) -> Iterable[tuple[int, int, float]]:
        for j in range(self.num_movies):
            users, vals = self.movie_slice(j)
            for i, r in zip(users, vals):
                yield int(i), j, r

    def triplets(self) -> list[tuple[int, int, float]]:
        """Sorted list of (user, movie, rating); convenient for comparisons."""
        return [(int(u), int(m), r.item()) for u, m, r in zip(self.users, self.movies, self.ratings)]

    def to_dense(self, fill: float = np.nan) -> np.ndarray:
        out = np.full((self.num_users, self.num_movies), fill, dtype=np.float64)
        out[self.users, self.movies] = self.values
        return out

    def lookup(self, users, movies) -> np.ndarray:
        """Positions (storage order) of the given pairs, -1 where absent."""
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        inside = (users >= 0) & (users < self.num_users) & (movies >= 0) & (movies < self.num_movies)
        key = self.users.astype(np.int64) * self.num_movies + self.movies
        q = np.where(inside, users * self.num_movies + movies, -1)
        pos = np.searchsorted(key, q)
        pos_c = np.minimum(pos, max(len(key) - 1, 0))
        found = (pos < len(key)) & (key[pos_c] == q) & inside if len(key) else np.zeros(q.shape, bool)
        return np.where(found, pos_c, -1)

    # -- derived datasets -----------------------------------------------

    def _derive(self, mask=None, ratings=None) -> "RatingsDataset":
        sel = slice(None) if mask is None else mask
        return RatingsDataset(
            self.users[sel],
            self.movies[sel],
            self.ratings[sel] if ratings is None else np.asarray(ratings)[sel],
            num_users=self.num_users,
            num_movies=self.num_movies,
            K=self.K,
            dates=None if self.dates is None else self.dates[sel],
            user_ids=self.user_ids,
            movie_ids=self.movie_ids,
        )

    def subset(self, mask) -> "RatingsDataset":
        """Rows selected by a boolean mask; index space and id maps unchanged."""
        return self._derive(mask=np.asarray(mask, dtype=bool))

    def with_values(self, values) -> "RatingsDataset":
        """Same pairs with new real values (e.g. residuals), storage order."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.ratings.shape:
            raise ValueError("values must align with the dataset rows")
        return self._derive(ratings=values)

    def __repr__(self) -> str:
        return f"RatingsDataset(I={self.num_users}, J={self.num_movies}, N={self.n}, K={self.K})"


# ---------------------------------------------------------------------------
# parsing and writing


def _remap(raw: np.ndarray, known: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Dense indices for raw ids.  Ids in ``known`` keep their positions and
    unseen ids are appended in ascending order."""
    if known is None:
        ids, idx = np.unique(raw, return_inverse=True)
        return idx, ids
    known = np.asarray(known, dtype=np.int64)
    lookup = {int(v): k for k, v in enumerate(known)}
    extra = sorted({int(v) for v in np.unique(raw)} - lookup.keys())
    for v in extra:
        lookup[v] = len(lookup)
    ids = np.concatenate([known, np.asarray(extra, dtype=np.int64)])
    return np.fromiter((lookup[int(v)] for v in raw), dtype=np.int64, count=raw.size), ids


def _build(raw_users, raw_movies, ratings, dates, K, origin, id_maps) -> RatingsDataset:
    raw_users = np.asarray(raw_users, dtype=np.int64)
    raw_movies = np.asarray(raw_movies, dtype=np.int64)
    known_u, known_m = (None, None) if id_maps is None else id_maps
    u, user_ids = _remap(raw_users, known_u)
    m, movie_ids = _remap(raw_movies, known_m)

    # duplicate detection with file locations, before the dataset hides them
    key = u * max(len(movie_ids), 1) + m
    order = np.argsort(key, kind="stable")
    dup = np.flatnonzero(np.diff(key[order]) == 0)
    if dup.size:
        first, second = origin[order[dup[0]]], origin[order[dup[0] + 1]]
        raise DataFormatError(
            f"duplicate rating for user {raw_users[order[dup[0]]]}, movie "
            f"{raw_movies[order[dup[0]]]} at {second[0]}:{second[1]} "
            f"(first seen at {first[0]}:{first[1]})"
        )

    dates = np.asarray(dates, dtype=np.int64)
    integral = all(isinstance(r, (int, np.integer)) for r in ratings)
    has_dates = bool((dates != NO_DATE).any())
    return RatingsDataset(
        u, m, np.asarray(ratings, dtype=np.int64 if integral else float),
        num_users=len(user_ids), num_movies=len(movie_ids), K=K,
        dates=dates.astype(np.int32) if has_dates else None,
        user_ids=user_ids, movie_ids=movie_ids,
    )


def _check_rating(value: int, K: int, fname, lineno: int, line: str):
    if not 1 <= value <= K:
        raise DataFormatError(f"{fname}:{lineno}: rating {value} outside 1..{K}: {line!r}")


def parse_netflix_movie_files(directory, K: int = 5, id_maps=None) -> RatingsDataset:
    """Read a directory of per-movie Netflix files.

    Each file starts with ``<MovieID>:`` followed by ``UserID,Rating,Date``
    lines.  A single file may hold several movie blocks.  User and movie ids
    are remapped to dense 0-based indices (ascending original id order).
    """
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise DataFormatError(f"no movie files in {directory}")

    users, movies, ratings, dates, origin = [], [], [], [], []
    for path in files:
        movie = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                text = line.strip()
                if not text:
                    continue
                if text.endswith(":"):
                    try:
                        movie = int(text[:-1])
                    except ValueError:
                        raise DataFormatError(f"{path.name}:{lineno}: malformed movie header {text!r}") from None
                    continue
                if movie is None:
                    raise DataFormatError(f"{path.name}:{lineno}: rating line before any movie header")
                parts = text.split(",")
                if len(parts) not in (2, 3):
                    raise DataFormatError(f"{path.name}:{lineno}: malformed line {text!r}")
                try:
                    uid, val = int(parts[0]), int(parts[1])
                    day = _parse_date(parts[2]) if len(parts) == 3 else NO_DATE
                except ValueError:
                    raise DataFormatError(f"{path.name}:{lineno}: malformed line {text!r}") from None
                _check_rating(val, K, path.name, lineno, text)
                users.append(uid)
                movies.append(movie)
                ratings.append(val)
                dates.append(day)
                origin.append((path.name, lineno))
    if not ratings:
        raise DataFormatError(f"empty dataset in {directory}")
    ds = _build(users, movies, ratings, dates, K, origin, id_maps)
    logger.info("parsed %d ratings from %d files", ds.n, len(files))
    return ds


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _parse_value(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return float(text)


def parse_triplet_csv(path, K: int = 5, id_maps=None) -> RatingsDataset:
    """Read ``user,movie,rating[,date]`` rows.

    Integer ratings must lie in 1..K.  Real-valued entries (residuals,
    unrounded synthetic data) are accepted as-is and make the whole dataset
    real-valued.

    A first row whose first field is non-numeric is taken as a header.  Pass
    ``id_maps=(train.user_ids, train.movie_ids)`` to parse a probe or target
    file into an existing index space.
    """
    path = Path(path)
    users, movies, ratings, dates, origin = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and not _is_number(row[0].strip()):
                continue
            if len(row) not in (3, 4):
                raise DataFormatError(f"{path.name}:{lineno}: expected 3 or 4 fields, got {len(row)}")
            try:
                uid, mid = int(row[0]), int(row[1])
                val = _parse_value(row[2])
                day = _parse_date(row[3]) if len(row) == 4 else NO_DATE
            except ValueError:
                raise DataFormatError(f"{path.name}:{lineno}: malformed line {','.join(row)!r}") from None
            if isinstance(val, int):
                _check_rating(val, K, path.name, lineno, ",".join(row))
            users.append(uid)
            movies.append(mid)
            ratings.append(val)
            dates.append(day)
            origin.append((path.name, lineno))
    if not ratings:
        raise DataFormatError(f"empty dataset: {path}")
    return _build(users, movies, ratings, dates, K, origin, id_maps)


def parse_pairs_csv(path, id_maps, with_ids: bool = False):
    """Read ``user,movie[,...]`` query pairs into an existing index space.

    Ids not present in ``id_maps`` get indices past the known range, which
    predictors treat as unseen.  With ``with_ids`` the extended
    (user_ids, movie_ids) maps are returned as a third element.
    """
    raw_u, raw_m = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if lineno == 1 and not _is_number(row[0].strip()):
                continue
            try:
                raw_u.append(int(row[0]))
                raw_m.append(int(row[1]))
            except (ValueError, IndexError):
                raise DataFormatError(f"{Path(path).name}:{lineno}: malformed pair {','.join(row)!r}") from None
    u, uids = _remap(np.asarray(raw_u, dtype=np.int64), id_maps[0])
    m, mids = _remap(np.asarray(raw_m, dtype=np.int64), id_maps[1])
    if with_ids:
        return u, m, (uids, mids)
    return u, m


def write_triplet_csv(dataset: RatingsDataset, path, header: bool = True) -> None:
    """Write original ids (dense indices when no id maps exist)."""
    uids = dataset.user_ids if dataset.user_ids is not None else np.arange(dataset.num_users)
    mids = dataset.movie_ids if dataset.movie_ids is not None else np.arange(dataset.num_movies)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        with_dates = dataset.dates is not None
        if header:
            w.writerow(["user", "movie", "rating"] + (["date"] if with_dates else []))
        for k in range(dataset.n):
            r = dataset.ratings[k]
            row = [int(uids[dataset.users[k]]), int(mids[dataset.movies[k]]),
                   int(r) if dataset.is_integer else repr(float(r))]
            if with_dates:
                d = int(dataset.dates[k])
                row.append("" if d == NO_DATE else d)
            w.writerow(row)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    """Either ``fraction`` (uniform random holdout) or explicit ``pairs``."""

    fraction: float | None = None
    pairs: Sequence[tuple[int, int]] | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.fraction is None) == (self.pairs is None):
            raise ValueError("give exactly one of fraction or pairs")


def split(dataset: RatingsDataset, spec: SplitSpec) -> tuple[RatingsDataset, RatingsDataset]:
    """Partition C into (train, probe).  Both keep the full index space."""
    n = dataset.n
    if spec.fraction is not None:
        f = spec.fraction
        if not 0.0 < f < 1.0:
            raise ValueError(f"holdout fraction must be in (0, 1), got {f}")
        n_probe = int(round(f * n))
        if n_probe == 0 or n_probe == n:
            raise ValueError(f"fraction {f} leaves an empty side with N={n}")
        rng = np.random.default_rng(spec.seed)
        probe_mask = np.zeros(n, dtype=bool)
        probe_mask[rng.permutation(n)[:n_probe]] = True
    else:
        pairs = np.asarray(spec.pairs, dtype=np.int64).reshape(-1, 2)
        pos = dataset.lookup(pairs[:, 0], pairs[:, 1])
        if (pos < 0).any():
            bad = pairs[int(np.flatnonzero(pos < 0)[0])]
            raise ValueError(f"pair ({bad[0]}, {bad[1]}) is not a rated pair")
        probe_mask = np.zeros(n, dtype=bool)
        probe_mask[pos] = True
        if probe_mask.all():
            raise ValueError("explicit probe list covers every rating; train would be empty")
    return dataset.subset(~probe_mask), dataset.subset(probe_mask)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int
    num_movies: int
    rank: int = 0
    factor_std: float | Sequence[float] = 1.0
    mu: float = 3.6
    user_bias_std: float = 0.0
    movie_bias_std: float = 0.0
    noise_std: float = 0.0
    density: float = 1.0
    seed: int = 0
    clip_to_integers: bool = False
    K: int = 5
    # per-user scale on the movie effect, drawn uniformly from these values
    gamma_choices: Sequence[float] | None = None

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must be in (0, 1]")
        if self.rank < 0:
            raise ValueError("rank must be >= 0")
        if self.num_users < 1 or self.num_movies < 1:
            raise ValueError("need at least one user and one movie")
        if np.ndim(self.factor_std) and len(self.factor_std) != self.rank:
            raise ValueError("per-feature factor_std must have length rank")


@dataclass
class PlantedTruth:
    mu: float
    alpha: np.ndarray
    beta: np.ndarray
    U: np.ndarray
    V: np.ndarray
    gamma: np.ndarray | None = None

    def mean_matrix(self) -> np.ndarray:
        g = np.ones_like(self.alpha) if self.gamma is None else self.gamma
        return self.mu + self.alpha[:, None] + g[:, None] * self.beta[None, :] + self.U @ self.V.T


def generate_synthetic(spec: SyntheticSpec) -> tuple[RatingsDataset, PlantedTruth]:
    """Draw a planted biased low-rank model and observe a random subset.

    Each cell is observed independently with probability ``density``.  With
    ``clip_to_integers`` ratings are rounded and clipped into ``1..K``;
    otherwise they stay real-valued.
    """
    rng = np.random.default_rng(spec.seed)
    I, J, p = spec.num_users, spec.num_movies, spec.rank
    std = np.broadcast_to(np.asarray(spec.factor_std, dtype=float), (p,))
    # split the per-feature std evenly between the user and movie side
    side = np.sqrt(std)
    U = rng.standard_normal((I, p)) * side
    V = rng.standard_normal((J, p)) * side
    alpha = rng.standard_normal(I) * spec.user_bias_std
    beta = rng.standard_normal(J) * spec.movie_bias_std
    gamma = None
    if spec.gamma_choices is not None:
        gamma = rng.choice(np.asarray(spec.gamma_choices, dtype=float), size=I)
    truth = PlantedTruth(spec.mu, alpha, beta, U, V, gamma)

    observed = rng.random((I, J)) < spec.density
    if not observed.any():
        observed[rng.integers(I), rng.integers(J)] = True
    users, movies = np.nonzero(observed)
    mean = truth.mean_matrix()[users, movies]
    values = mean + rng.standard_normal(users.size) * spec.noise_std
    if spec.clip_to_integers:
        values = np.clip(np.rint(values), 1, spec.K).astype(np.int64)
    ds = RatingsDataset(users, movies, values, num_users=I, num_movies=J, K=spec.K)
    return ds, truth


# ---------------------------------------------------------------------------
# summaries


def _support_histogram(counts: np.ndarray) -> dict:
    top = max(int(counts.max()) if counts.size else 1, 1)
    edges = [0, 1] + [2 ** k for k in range(1, int(math.ceil(math.log2(top + 1))) + 1)]
    if edges[-1] <= top:
        edges.append(edges[-1] * 2)
    hist, _ = np.histogram(counts, bins=edges)
    return {"edges": edges, "counts": hist.tolist()}


def summary_stats(dataset: RatingsDataset) -> dict:
    """Global and per-group means and counts.

    ``std`` uses the population (1/N) convention, so it equals the in-sample
    RMSE of the constant predictor.  Groups without ratings get a NaN mean.
    """
    if dataset.n == 0:
        raise ValueError("summary of an empty dataset")
    r = dataset.values
    mean = float(r.mean())
    user_sum = np.bincount(dataset.users, weights=r, minlength=dataset.num_users)
    movie_sum = np.bincount(dataset.movies, weights=r, minlength=dataset.num_movies)
    with np.errstate(invalid="ignore", divide="ignore"):
        user_mean = user_sum / dataset.user_counts
        movie_mean = movie_sum / dataset.movie_counts
    return {
        "num_users": dataset.num_users,
        "num_movies": dataset.num_movies,
        "n": dataset.n,
        "K": dataset.K,
        "mean": mean,
        "std": float(np.sqrt(np.mean((r - mean) ** 2))),
        "user_mean": user_mean,
        "user_count": dataset.user_counts.copy(),
        "movie_mean": movie_mean,
        "movie_count": dataset.movie_counts.copy(),
        "user_support_hist": _support_histogram(dataset.user_counts),
        "movie_support_hist": _support_histogram(dataset.movie_counts),
    }


def summary_json(stats: dict) -> dict:
    """JSON-safe view of :func:`summary_stats` (per-group arrays summarised)."""
    out = {k: v for k, v in stats.items() if not isinstance(v, np.ndarray)}
    for key in ("user_count", "movie_count"):
        c = stats[key]
        out[key + "_min"] = int(c.min())
        out[key + "_max"] = int(c.max())
    return out
