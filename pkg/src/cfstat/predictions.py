"""Aligned prediction vectors and their on-disk form."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError


@dataclass
class PredictionSet:
    """Predicted ratings for (user, movie) rows in a split's canonical order.

    ``users`` and ``movies`` are dense indices.  ``info`` carries
    producer-specific diagnostics such as fallback counts.
    """

    users: np.ndarray
    movies: np.ndarray
    values: np.ndarray
    model_id: str = ""
    split_id: str = ""
    clipped: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.movies = np.asarray(self.movies, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if not (self.users.shape == self.movies.shape == self.values.shape):
            raise ValueError("users, movies and values must have equal length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("predictions must be finite")

    def __len__(self) -> int:
        return self.values.size

    def take(self, rows) -> "PredictionSet":
        return PredictionSet(self.users[rows], self.movies[rows], self.values[rows], self.model_id,
                             self.split_id, self.clipped, dict(self.info))

    def aligned_with(self, users, movies) -> bool:
        return (np.array_equal(self.users, np.asarray(users))
                and np.array_equal(self.movies, np.asarray(movies)))

    def sidecar(self) -> dict:
        return {"model_id": self.model_id, "split_id": self.split_id,
                "clipped": self.clipped, "n": len(self), **({"info": self.info} if self.info else {})}

    def write_csv(self, path, user_ids=None, movie_ids=None) -> None:
        """CSV ``user,movie,prediction``, mapping dense indices through the id arrays."""
        u = self.users if user_ids is None else np.asarray(user_ids)[self.users]
        m = self.movies if movie_ids is None else np.asarray(movie_ids)[self.movies]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "movie", "prediction"])
            for a, b, v in zip(u.tolist(), m.tolist(), self.values.tolist()):
                w.writerow([a, b, repr(v)])

    def write(self, path, user_ids=None, movie_ids=None) -> None:
        """CSV plus ``<path>.json`` metadata."""
        self.write_csv(path, user_ids, movie_ids)
        with open(sidecar_path(path), "w", encoding="utf-8") as fh:
            json.dump(self.sidecar(), fh, sort_keys=True)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_predictions(path, id_maps=None) -> PredictionSet:
    """Read a prediction CSV; ``id_maps`` = (user_ids, movie_ids) maps original
    ids back to dense indices."""
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (lineno == 1 and row[0].strip() == "user"):
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected user,movie,prediction")
            try:
                rows.append((int(row[0]), int(row[1]), float(row[2])))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    u = arr[:, 0].astype(np.int64)
    m = arr[:, 1].astype(np.int64)
    if id_maps is not None:
        u = _to_dense(u, id_maps[0], path, "user")
        m = _to_dense(m, id_maps[1], path, "movie")
    meta = {}
    sc = sidecar_path(path)
    if sc.exists():
        with open(sc, encoding="utf-8") as fh:
            meta = json.load(fh)
    return PredictionSet(u, m, arr[:, 2], model_id=meta.get("model_id", path.stem),
                         split_id=meta.get("split_id", ""), clipped=meta.get("clipped", False),
                         info=meta.get("info", {}))


def _to_dense(raw, ids, path, what):
    lookup = {int(v): k for k, v in enumerate(np.asarray(ids).tolist())}
    try:
        return np.array([lookup[int(x)] for x in raw], dtype=np.int64)
    except KeyError as exc:
        raise DataFormatError(f"{path}: unknown {what} id {exc.args[0]}") from None
