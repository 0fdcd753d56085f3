"""Restricted Boltzmann machine with softmax visible units and binary hidden units.

Each user is a separate RBM over the movies they rated; all users share the
weights W[j, f, k], visible biases b_vis[j, k] and hidden biases b_hid[f].
Ratings are stored as levels 1..K and handled internally as 0-based indices.

Energy of a (visible, hidden) configuration for a user with rated set J(i)::

    E(v, h) = - sum_j sum_k v_jk b_jk - sum_f h_f b_f - sum_j sum_f sum_k W_jfk h_f v_jk

The exact-likelihood helpers enumerate every visible configuration of the
user's rated movies and are only meant for tiny oracle instances.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .dataset import RatingsDataset
from .errors import DivergenceError
from .predictions import PredictionSet

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_PROPORTION_FLOOR = 1e-4


@dataclass
class RbmModel:
    W: np.ndarray  # (J, F, K)
    b_vis: np.ndarray  # (J, K)
    b_hid: np.ndarray  # (F,)
    cd_steps: int = 1
    fit_log: dict = field(default_factory=dict)

    def __post_init__(self):
        J, F, K = self.W.shape
        if F < 1:
            raise ValueError("need at least one hidden unit")
        if self.b_vis.shape != (J, K) or self.b_hid.shape != (F,):
            raise ValueError("bias shapes do not match W")

    @property
    def J(self) -> int:
        return self.W.shape[0]

    @property
    def F(self) -> int:
        return self.W.shape[1]

    @property
    def K(self) -> int:
        return self.W.shape[2]

    def copy(self) -> "RbmModel":
        return RbmModel(self.W.copy(), self.b_vis.copy(), self.b_hid.copy(), self.cd_steps,
                        dict(self.fit_log))

    def params(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.W, self.b_vis, self.b_hid

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "rbm", "J": self.J, "F": self.F,
                "K": self.K, "cd_steps": self.cd_steps, "W": self.W.ravel().tolist(),
                "b_vis": self.b_vis.ravel().tolist(), "b_hid": self.b_hid.tolist(),
                "fit_log": self.fit_log}

    @classmethod
    def from_dict(cls, d: dict) -> "RbmModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported rbm schema {d.get('schema_version')}")
        J, F, K = d["J"], d["F"], d["K"]
        return cls(np.asarray(d["W"], float).reshape(J, F, K),
                   np.asarray(d["b_vis"], float).reshape(J, K),
                   np.asarray(d["b_hid"], float), d.get("cd_steps", 1), d.get("fit_log", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def load_rbm(path) -> RbmModel:
    with open(path, encoding="utf-8") as fh:
        return RbmModel.from_dict(json.load(fh))


def init_rbm(train: RatingsDataset, F: int, K: int | None = None, seed: int = 0,
             init_std: float = 0.01, cd_steps: int = 1) -> RbmModel:
    """b_vis = log of each movie's rating-level proportions (floored at 1e-4),
    W ~ N(0, init_std^2), b_hid = 0."""
    K = K or train.K
    levels = _levels(train, K)
    J = train.num_movies
    counts = np.zeros((J, K))
    np.add.at(counts, (train.movies, levels), 1.0)
    tot = counts.sum(axis=1, keepdims=True)
    prop = np.divide(counts, tot, out=np.full_like(counts, 1.0 / K), where=tot > 0)
    b_vis = np.log(np.maximum(prop, _PROPORTION_FLOOR))
    rng = np.random.default_rng([seed, 4])
    W = rng.standard_normal((J, F, K)) * init_std
    return RbmModel(W, b_vis, np.zeros(F), cd_steps=cd_steps)


def _levels(train: RatingsDataset, K: int) -> np.ndarray:
    r = train.values
    lv = np.rint(r).astype(np.int64)
    if not np.array_equal(lv, r) or lv.min(initial=1) < 1 or lv.max(initial=1) > K:
        raise ValueError(f"RBM training needs integer ratings in 1..{K}")
    return lv - 1


# ---------------------------------------------------------------------------
# conditionals


def hidden_input(model: RbmModel, movies, levels) -> np.ndarray:
    """b_f + sum_{j in J(i)} W[j, f, k_j]."""
    return model.b_hid + model.W[movies, :, levels].sum(axis=0)


def hidden_given_visible(model: RbmModel, movies, levels) -> np.ndarray:
    """P(h_f = 1 | v) for one user; ``levels`` are 0-based rating indices."""
    return expit(hidden_input(model, np.asarray(movies), np.asarray(levels)))


def visible_logits(model: RbmModel, h, movies) -> np.ndarray:
    """b_j^k + sum_f h_f W[j, f, k] for each requested movie, shape (n, K)."""
    movies = np.asarray(movies)
    return model.b_vis[movies] + np.einsum("f,jfk->jk", np.asarray(h, float), model.W[movies])


def visible_given_hidden(model: RbmModel, h, movies) -> np.ndarray:
    """Softmax over rating levels for each movie; ``h`` may be binary or
    probabilities (mean field)."""
    return softmax(visible_logits(model, h, movies), axis=1)


def energy(model: RbmModel, movies, levels, h) -> float:
    movies = np.asarray(movies)
    levels = np.asarray(levels)
    h = np.asarray(h, float)
    return float(-model.b_vis[movies, levels].sum() - h @ model.b_hid
                 - h @ model.W[movies, :, levels].sum(axis=0))


def free_energy(model: RbmModel, movies, levels) -> float:
    """-log sum_h exp(-E(v, h))."""
    x = hidden_input(model, np.asarray(movies), np.asarray(levels))
    return float(-model.b_vis[movies, levels].sum() - np.logaddexp(0.0, x).sum())


# ---------------------------------------------------------------------------
# exact oracle (tiny instances only)


def _configs(n: int, K: int) -> np.ndarray:
    return np.array(list(itertools.product(range(K), repeat=n)), dtype=np.int64).reshape(-1, n)


def _user_exact(model: RbmModel, movies, levels):
    """log p(v) and the exact per-user gradient of it."""
    configs = _configs(len(movies), model.K)
    X = model.b_hid + model.W[movies[None, :], :, configs].sum(axis=1)  # (C, F)
    neg_f = model.b_vis[movies[None, :], configs].sum(axis=1) + np.logaddexp(0.0, X).sum(axis=1)
    logZ = logsumexp(neg_f)
    x = hidden_input(model, movies, levels)
    logp = -free_energy(model, movies, levels) - logZ
    prob = np.exp(neg_f - logZ)
    ph_model = expit(X)
    ph_data = expit(x)
    gW = np.zeros_like(model.W)
    gb = np.zeros_like(model.b_vis)
    for pos, j in enumerate(movies):
        gW[j, :, levels[pos]] += ph_data
        gb[j, levels[pos]] += 1.0
        onehot = np.zeros((configs.shape[0], model.K))
        onehot[np.arange(configs.shape[0]), configs[:, pos]] = 1.0
        gW[j] -= np.einsum("c,cf,ck->fk", prob, ph_model, onehot)
        gb[j] -= prob @ onehot
    gh = ph_data - prob @ ph_model
    return logp, (gW, gb, gh)


def _user_blocks(train: RatingsDataset, K: int):
    levels = _levels(train, K)
    for i in range(train.num_users):
        lo, hi = train.user_ptr[i], train.user_ptr[i + 1]
        if hi > lo:
            yield i, train.movies[lo:hi].astype(np.int64), levels[lo:hi]


def exact_log_likelihood(model: RbmModel, train: RatingsDataset) -> float:
    """Mean over users of log p(v_i), partition functions by full enumeration."""
    vals = [_user_exact(model, m, lv)[0] for _, m, lv in _user_blocks(train, model.K)]
    return float(np.mean(vals))


def exact_gradient(model: RbmModel, train: RatingsDataset):
    """Gradient of :func:`exact_log_likelihood` as (dW, db_vis, db_hid)."""
    acc = None
    n = 0
    for _, m, lv in _user_blocks(train, model.K):
        g = _user_exact(model, m, lv)[1]
        acc = g if acc is None else tuple(a + b for a, b in zip(acc, g))
        n += 1
    return tuple(a / n for a in acc)


# ---------------------------------------------------------------------------
# contrastive divergence


def _user_rng(seed: int, epoch: int, user: int) -> np.random.Generator:
    return np.random.default_rng([seed, 5, epoch, user])


def _sample_levels(rng, probs: np.ndarray) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[1] - 1)


def _user_cd(model: RbmModel, movies, levels, steps: int, rng, grads) -> None:
    """Accumulate one user's CD-k statistics into ``grads`` (dW, db_vis, db_hid).

    Data term uses hidden probabilities; the chain samples binary h and
    one-hot v over the user's rated movies.  The final model statistics are
    Rao-Blackwellised: given the last hidden sample the visible units are
    independent, so each movie's level is summed out against p(v_j | h) with
    the other movies held at their sampled levels.  This has the same
    expectation as the plain sampled statistics and far less variance.
    """
    gW, gb, gh = grads
    ph0 = expit(hidden_input(model, movies, levels))
    v = levels
    ph = ph0
    for _ in range(steps):
        h = (rng.random(model.F) < ph).astype(float)
        pv = visible_given_hidden(model, h, movies)
        v = _sample_levels(rng, pv)
        ph = expit(hidden_input(model, movies, v))
    # x[a, k] = hidden input with movie a switched to level k
    Wm = model.W[movies]  # (n, F, K)
    x = (hidden_input(model, movies, v)[None, :, None]
         - Wm[np.arange(movies.size), :, v][:, :, None] + Wm)
    np.add.at(gW, (movies, slice(None), levels), ph0)
    np.add.at(gW, movies, -pv[:, None, :] * expit(x))
    np.add.at(gb, (movies, levels), 1.0)
    np.add.at(gb, movies, -pv)
    gh += ph0 - ph


def cd_gradient(model: RbmModel, train: RatingsDataset, cd_steps: int | None = None,
                seed: int = 0, epoch: int = 0, users=None):
    """CD-k estimate of the mean per-user log-likelihood gradient.

    Sampling for user i draws from a stream keyed on (seed, epoch, i), so the
    result does not depend on the order users are visited.
    """
    steps = cd_steps or model.cd_steps
    if steps < 1:
        raise ValueError("cd_steps must be >= 1")
    grads = (np.zeros_like(model.W), np.zeros_like(model.b_vis), np.zeros_like(model.b_hid))
    wanted = None if users is None else set(int(u) for u in users)
    n = 0
    for i, m, lv in _user_blocks(train, model.K):
        if wanted is not None and i not in wanted:
            continue
        _user_cd(model, m, lv, steps, _user_rng(seed, epoch, i), grads)
        n += 1
    if n == 0:
        return grads
    return tuple(g / n for g in grads)


def train_cd(model: RbmModel, train: RatingsDataset, epochs: int = 10, eta: float = 0.01,
             cd_steps: int | None = None, minibatch: int | None = 100, seed: int = 0,
             monitor=None) -> RbmModel:
    """Contrastive-divergence training; returns a new model.

    Each minibatch applies ``eta`` times the minibatch-mean CD gradient, so
    the effective step per user is eta / minibatch.  ``minibatch=None`` uses
    one full batch per epoch.  ``monitor(model, epoch)`` is called after
    each epoch.
    """
    steps = cd_steps or model.cd_steps
    if steps < 1:
        raise ValueError("cd_steps must be >= 1")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    model = model.copy()
    model.cd_steps = steps
    blocks = list(_user_blocks(train, model.K))
    size = len(blocks) if minibatch is None else minibatch
    order_rng = np.random.default_rng([seed, 6])
    for epoch in range(epochs):
        order = order_rng.permutation(len(blocks)) if minibatch is not None else np.arange(len(blocks))
        for start in range(0, len(blocks), size):
            grads = (np.zeros_like(model.W), np.zeros_like(model.b_vis), np.zeros_like(model.b_hid))
            batch = order[start:start + size]
            for b in batch:
                i, m, lv = blocks[b]
                _user_cd(model, m, lv, steps, _user_rng(seed, epoch, i), grads)
            scale = eta / len(batch)
            model.W += scale * grads[0]
            model.b_vis += scale * grads[1]
            model.b_hid += scale * grads[2]
            if not (np.isfinite(model.W).all() and np.isfinite(model.b_vis).all()
                    and np.isfinite(model.b_hid).all()):
                raise DivergenceError(f"non-finite RBM parameters in epoch {epoch}; lower eta")
        if monitor is not None:
            monitor(model, epoch)
    model.fit_log = {"epochs": epochs, "eta": eta, "cd_steps": steps,
                     "minibatch": minibatch, "seed": seed}
    return model


# ---------------------------------------------------------------------------
# prediction


def expected_rating(model: RbmModel, movies, levels, targets) -> np.ndarray:
    """Mean-field E[r] for ``targets`` given a user's rated movies."""
    p = hidden_given_visible(model, movies, levels)
    probs = visible_given_hidden(model, p, targets)
    return probs @ np.arange(1, model.K + 1)


def exact_expected_rating(model: RbmModel, movies, levels, targets) -> np.ndarray:
    """E[r_ij | v] summing over all 2^F hidden states (tiny F only)."""
    H = np.array(list(itertools.product((0.0, 1.0), repeat=model.F)))
    x = hidden_input(model, np.asarray(movies), np.asarray(levels))
    logw = H @ x - np.logaddexp(0.0, x).sum()  # log p(h | v)
    w = np.exp(logw)
    ks = np.arange(1, model.K + 1)
    out = np.zeros(len(targets))
    for h, wh in zip(H, w):
        out += wh * (visible_given_hidden(model, h, targets) @ ks)
    return out


def predict_rbm(model: RbmModel, users, movies, train: RatingsDataset,
                split_id: str = "") -> PredictionSet:
    """Mean-field expected ratings; users without training ratings (or
    movies outside the model) get the training mean, counted in
    ``info['fallbacks']``."""
    users = np.asarray(users, dtype=np.int64)
    movies = np.asarray(movies, dtype=np.int64)
    levels = _levels(train, model.K)
    global_mean = float(train.values.mean()) if train.n else (model.K + 1) / 2
    out = np.full(users.size, global_mean)
    fallbacks = 0
    order = np.argsort(users, kind="stable")
    bounds = np.flatnonzero(np.diff(users[order])) + 1
    for grp in np.split(order, bounds):
        if grp.size == 0:
            continue
        i = int(users[grp[0]])
        lo, hi = (train.user_ptr[i], train.user_ptr[i + 1]) if i < train.num_users else (0, 0)
        tgt = movies[grp]
        ok = tgt < model.J
        if hi == lo:
            fallbacks += grp.size
            continue
        fallbacks += int((~ok).sum())
        if ok.any():
            rated = train.movies[lo:hi].astype(np.int64)
            out[grp[ok]] = expected_rating(model, rated, levels[lo:hi], tgt[ok])
    if fallbacks:
        logger.info("RBM used the global mean for %d of %d pairs", fallbacks, users.size)
    return PredictionSet(users, movies, out, model_id="rbm", split_id=split_id,
                         info={"fallbacks": fallbacks})

