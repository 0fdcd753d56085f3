"""Compiled inner loops for the stochastic-gradient fits."""

import numpy as np
from numba import njit


@njit(cache=True)
def sgd_epoch(users, movies, resid, order, U, V, reg_u, reg_v, eta, k0, k1):
    """One pass of per-rating updates on features k0..k1-1.

    Both factor updates read the pre-update values.  The error uses every
    feature, so features outside the active range act as fixed offsets.
    """
    p = U.shape[1]
    for t in order:
        i = users[t]
        j = movies[t]
        pred = 0.0
        for k in range(p):
            pred += U[i, k] * V[j, k]
        e = resid[t] - pred
        for k in range(k0, k1):
            uo = U[i, k]
            vo = V[j, k]
            U[i, k] = uo + eta * (2.0 * e * vo - reg_u[i] * uo)
            V[j, k] = vo + eta * (2.0 * e * uo - reg_v[j] * vo)


@njit(cache=True)
def nsvd_epoch(user_ptr, movies, resid, user_order, U, V, Y,
               reg_u, reg_v, reg_y, eta, train_u, train_y):
    """One pass over users for the asymmetric factor model.

    The composite user factor z = u_i + |J(i)|^-1/2 sum_{J(i)} y is built once
    per user block.  u_i and v_j move after every rating (z follows u_i);
    the y gradient is accumulated over the block and applied at its end.
    """
    p = V.shape[1]
    z = np.empty(p)
    acc = np.empty(p)
    for i in user_order:
        lo = user_ptr[i]
        hi = user_ptr[i + 1]
        n = hi - lo
        if n == 0:
            continue
        s = 1.0 / np.sqrt(n)
        for k in range(p):
            tot = 0.0
            for t in range(lo, hi):
                tot += Y[movies[t], k]
            z[k] = U[i, k] + s * tot
            acc[k] = 0.0
        for t in range(lo, hi):
            j = movies[t]
            pred = 0.0
            for k in range(p):
                pred += V[j, k] * z[k]
            e = resid[t] - pred
            for k in range(p):
                vo = V[j, k]
                V[j, k] = vo + eta * (2.0 * e * z[k] - reg_v[j] * vo)
                acc[k] += 2.0 * e * vo
                if train_u:
                    du = eta * (2.0 * e * vo - reg_u[i] * U[i, k])
                    U[i, k] += du
                    z[k] += du
        if train_y:
            for t in range(lo, hi):
                jj = movies[t]
                for k in range(p):
                    Y[jj, k] += eta * (s * acc[k] - reg_y[jj] * Y[jj, k])


@njit(cache=True)
def global_weights_epoch(order, target, nb_ptr, nb_resid, nb_slot, w, shrink, eta):
    """Proximal SGD pass for shared neighbour weights.

    For rating t the neighbour residuals are nb_resid[nb_ptr[t]:nb_ptr[t+1]]
    and their weights w[nb_slot[...]].  The ridge term is applied in closed
    form (w <- (w + step) / (1 + shrink)), which stays stable for any
    penalty size.
    """
    for t in order:
        lo = nb_ptr[t]
        hi = nb_ptr[t + 1]
        n = hi - lo
        if n == 0:
            continue
        c = 1.0 / np.sqrt(n)
        pred = 0.0
        for q in range(lo, hi):
            pred += c * nb_resid[q] * w[nb_slot[q]]
        e = target[t] - pred
        for q in range(lo, hi):
            s = nb_slot[q]
            w[s] = (w[s] + eta * 2.0 * e * c * nb_resid[q]) / (1.0 + eta * shrink[s])
