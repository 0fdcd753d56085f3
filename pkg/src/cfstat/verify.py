"""Self-check suites comparing fitted quantities against independent oracles.

Each suite returns a list of :class:`Check` results.  The oracles here are
deliberately naive (dense matrices, explicit enumeration, plain loops).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .baseline import complete_objective, fit_penalized_complete, fit_twoway_sparse
from .dataset import RatingsDataset
from .factor import FitSchedule, fit_als_joint
from .neighbors import build_similarity
from .rbm import RbmModel, hidden_given_visible, visible_given_hidden
from .shrinkage import effective_df, perturbation_df


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)


def complete_dataset(R: np.ndarray) -> RatingsDataset:
    I, J = R.shape
    u, m = np.meshgrid(np.arange(I), np.arange(J), indexing="ij")
    return RatingsDataset(u.ravel(), m.ravel(), R.ravel().astype(float), num_users=I, num_movies=J)


def anova_suite(seed: int = 0, cases: int = 20) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        I, J = rng.integers(2, 13), rng.integers(2, 10)
        R = rng.normal(3.6, 1.0, size=(I, J))
        l1, l2 = rng.uniform(0, 10, size=2)
        closed = fit_penalized_complete(R, l1, l2)
        sparse = fit_twoway_sparse(complete_dataset(R), l1, l2, tol_obj=1e-14, max_iters=5000)
        sparse.lambda1, sparse.lambda2 = l1, l2
        worst = max(worst, abs(complete_objective(R, sparse) - complete_objective(R, closed)))
    return [Check("anova", "sparse fit matches closed form objective", worst <= 1e-8,
                  f"max |diff| = {worst:.3g}")]


def df_suite(seed: int = 0, cases: int = 10) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        I, J = int(rng.integers(2, 9)), int(rng.integers(2, 8))
        l1, l2 = rng.uniform(0, 10, size=2)
        worst = max(worst, abs(effective_df(I, J, l1, l2) - perturbation_df(I, J, l1, l2)))
    zero = all(effective_df(I, J, 0, 0) == I + J - 1 for I in range(1, 8) for J in range(1, 8))
    return [Check("df", "df formula matches perturbation trace", worst <= 1e-6, f"max |diff| = {worst:.3g}"),
            Check("df", "df equals I+J-1 without penalty", zero)]


def eckart_young_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((8, 6))
    s = np.linalg.svd(R, compute_uv=False)
    data = complete_dataset(R)
    worst = 0.0
    for k in range(1, 7):
        model = fit_als_joint(data, k, 0.0, 0.0, FitSchedule(max_epochs=5000, tol_obj=1e-15, seed=seed))
        e = data.values - model.predict_values(data.users, data.movies)
        worst = max(worst, abs(e @ e - float((s[k:] ** 2).sum())))
    return [Check("eckart-young", "ALS error equals truncated SVD error at every rank", worst <= 1e-6,
                  f"max |diff| = {worst:.3g}")]


def rbm_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    J, F, K = 2, 2, 3
    model = RbmModel(rng.standard_normal((J, F, K)), rng.standard_normal((J, K)), rng.standard_normal(F))
    movies = np.arange(J)
    states = list(itertools.product(range(K), repeat=J))
    hs = list(itertools.product((0, 1), repeat=F))
    # unnormalised joint exp(-E) written out term by term
    joint = np.zeros((len(states), len(hs)))
    for a, v in enumerate(states):
        for b, h in enumerate(hs):
            e = 0.0
            for j in range(J):
                e -= model.b_vis[j, v[j]]
                for f in range(F):
                    e -= model.W[j, f, v[j]] * h[f]
            for f in range(F):
                e -= model.b_hid[f] * h[f]
            joint[a, b] = np.exp(-e)
    worst = 0.0
    for a, v in enumerate(states):
        ph = hidden_given_visible(model, movies, np.array(v))
        cond = joint[a] / joint[a].sum()
        for f in range(F):
            brute = sum(c for c, h in zip(cond, hs) if h[f] == 1)
            worst = max(worst, abs(brute - ph[f]))
    for b, h in enumerate(hs):
        pv = visible_given_hidden(model, np.array(h, float), movies)
        col = joint[:, b] / joint[:, b].sum()
        for j in range(J):
            for k in range(K):
                brute = sum(c for c, v in zip(col, states) if v[j] == k)
                worst = max(worst, abs(brute - pv[j, k]))
    return [Check("rbm", "conditionals match the enumerated joint", worst <= 1e-10,
                  f"max |diff| = {worst:.3g}")]


def knn_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    I, J = 40, 20
    mask = rng.random((I, J)) < 0.6
    X = np.where(mask, rng.standard_normal((I, J)), np.nan)
    u, m = np.nonzero(mask)
    data = RatingsDataset(u, m, X[u, m], num_users=I, num_movies=J)
    lam = 3.0
    table = build_similarity(data, "pearson_movie_centered", lam, top_M=J, min_support=4)
    means = np.nanmean(X, axis=0)
    worst = 0.0
    missing = 0
    got = table.pairs()
    for a in range(J):
        for b in range(J):
            if a == b:
                continue
            both = mask[:, a] & mask[:, b]
            n = int(both.sum())
            if n < 4:
                continue
            x = X[both, a] - means[a]
            y = X[both, b] - means[b]
            den = np.sqrt((x * x).sum() * (y * y).sum())
            s = (x * y).sum() / den if den > 0 else 0.0
            s *= n / (n + lam)
            if (a, b) not in got:
                missing += 1
                continue
            worst = max(worst, abs(got[(a, b)][0] - s))
    return [Check("knn", "similarity table matches dense brute force", worst <= 1e-12 and missing == 0,
                  f"max |diff| = {worst:.3g}, missing = {missing}")]


SUITES = {
    "anova": anova_suite,
    "df": df_suite,
    "eckart-young": eckart_young_suite,
    "rbm": rbm_suite,
    "knn": knn_suite,
}


def run_suites(name: str = "all", seed: int = 0) -> list[Check]:
    names = list(SUITES) if name == "all" else [name]
    out = []
    for n in names:
        if n not in SUITES:
            raise ValueError(f"unknown suite {n!r}; choose from {', '.join(SUITES)} or all")
        out.extend(SUITES[n](seed=seed))
    return out
