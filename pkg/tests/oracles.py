"""Independent reference computations shared by the tests.

Everything here works on dense arrays with plain loops or direct linear
solves, so it shares no code path with the library under test.
"""

from __future__ import annotations

import itertools

import numpy as np

from cfstat.dataset import RatingsDataset


def complete(R: np.ndarray) -> RatingsDataset:
    I, J = R.shape
    u, m = np.meshgrid(np.arange(I), np.arange(J), indexing="ij")
    return RatingsDataset(u.ravel(), m.ravel(), R.ravel().astype(float), num_users=I, num_movies=J)


def from_dense(X: np.ndarray) -> RatingsDataset:
    """Dataset from a matrix with NaN marking unobserved cells."""
    u, m = np.nonzero(~np.isnan(X))
    return RatingsDataset(u, m, X[u, m], num_users=X.shape[0], num_movies=X.shape[1])


def random_sparse(rng, I, J, density, low=1, high=5, integer=True) -> np.ndarray:
    mask = rng.random((I, J)) < density
    # every user and movie keeps at least one rating
    mask[np.arange(I), rng.integers(0, J, I)] = True
    mask[rng.integers(0, I, J), np.arange(J)] = True
    if integer:
        vals = rng.integers(low, high + 1, (I, J)).astype(float)
    else:
        vals = rng.normal(3.6, 1.0, (I, J))
    return np.where(mask, vals, np.nan)


def twoway_normal_equations(X: np.ndarray, l1: float, l2: float):
    """Penalised two-way ANOVA by a direct solve on the (1+I+J) system."""
    I, J = X.shape
    rows = []
    y = []
    for i in range(I):
        for j in range(J):
            if np.isnan(X[i, j]):
                continue
            x = np.zeros(1 + I + J)
            x[0] = 1.0
            x[1 + i] = 1.0
            x[1 + I + j] = 1.0
            rows.append(x)
            y.append(X[i, j])
    A = np.array(rows)
    P = np.diag([0.0] + [l1] * I + [l2] * J)
    theta = np.linalg.lstsq(A.T @ A + P, A.T @ np.array(y), rcond=None)[0]
    mu, a, b = theta[0], theta[1:1 + I], theta[1 + I:]
    resid = np.array(y) - A @ theta
    return mu, a, b, float(resid @ resid + l1 * a @ a + l2 * b @ b)


def central_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(x)
        flat[k] = old - h
        fm = f(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def dense_similarity(X: np.ndarray, measure: str, lam: float, min_support: int):
    """All-pairs shrunk similarity from a NaN-masked residual matrix.

    Returns {(j, k): (s, n)} for ordered pairs with n >= min_support.
    """
    mask = ~np.isnan(X)
    if measure == "pearson_movie_centered":
        C = X - np.nanmean(X, axis=0)[None, :]
    elif measure == "pearson_user_centered":
        C = X - np.nanmean(X, axis=1)[:, None]
    else:
        C = X.copy()
    J = X.shape[1]
    out = {}
    for a in range(J):
        for b in range(J):
            if a == b:
                continue
            both = mask[:, a] & mask[:, b]
            n = int(both.sum())
            if n < min_support:
                continue
            x, y = C[both, a], C[both, b]
            den = np.sqrt((x * x).sum() * (y * y).sum())
            s = (x * y).sum() / den if den > 0 else 0.0
            out[(a, b)] = (s * n / (n + lam), n)
    return out


def dense_knn_predict(X: np.ndarray, sims: dict, top_M: int, K: int, i: int, j: int) -> float:
    """Similarity-weighted kNN residual estimate by explicit enumeration.

    The candidate set is the top_M partners of j by |s| (ties to the lower
    index), restricted to movies user i rated with s > 0; the K largest s
    are averaged with weights s.
    """
    partners = [(k, s) for (a, k), (s, n) in sims.items() if a == j]
    partners.sort(key=lambda t: (-abs(t[1]), t[0]))
    partners = partners[:top_M]
    cand = [(k, s) for k, s in partners if not np.isnan(X[i, k]) and s > 0]
    cand.sort(key=lambda t: (-t[1], t[0]))
    cand = cand[:K]
    tot = sum(s for _, s in cand)
    if not cand or tot <= 0:
        return 0.0
    return sum(s * X[i, k] for k, s in cand) / tot


def rbm_joint(W, b_vis, b_hid):
    """Enumerated exp(-E) over all visible level vectors and hidden states.

    Returns (visible_states, hidden_states, table) with table[a, b] the
    unnormalised weight of visible state a and hidden state b.
    """
    J, F, K = W.shape
    vs = list(itertools.product(range(K), repeat=J))
    hs = list(itertools.product((0, 1), repeat=F))
    table = np.zeros((len(vs), len(hs)))
    for a, v in enumerate(vs):
        for b, h in enumerate(hs):
            e = 0.0
            for j in range(J):
                e -= b_vis[j, v[j]]
                for f in range(F):
                    e -= W[j, f, v[j]] * h[f]
            for f in range(F):
                e -= b_hid[f] * h[f]
            table[a, b] = np.exp(-e)
    return vs, hs, table
