"""Hot inner loops with a compiled (numba) and a pure-numpy implementation.

The public functions dispatch on :data:`seqmc._accel.USE_NUMBA`.  Both
implementations are importable directly (``*_numpy`` / ``*_numba``) so tests
and ``benchmarks/bench_kernels.py`` can compare them.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import USE_NUMBA, njit

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Gaussian column log likelihood and its gradient with respect to W


def loglik_grad_numpy(W, sigma2, batch):
    """Sum over columns of ``log N(m_O; 0, W_O W_O^T + sigma2 I)`` and d/dW.

    Columns are padded to a common observed count; padded slots get a unit
    diagonal, zero loading rows and zero values, so they only add a constant
    that is removed below.
    """
    S, D, K = W.shape
    ll = np.zeros(S)
    gW = np.zeros_like(W)
    if batch.n_obs == 0:
        return ll, gW
    idx, mask, m = batch.idx, batch.mask, batch.pvals
    n_cols, P = idx.shape
    fmask = mask.astype(float)
    WO = W[:, idx, :] * fmask[None, :, :, None]  # (S, C, P, K)
    Sig = WO @ np.swapaxes(WO, -1, -2)
    diag = np.where(mask, sigma2, 1.0)
    Sig[..., np.arange(P), np.arange(P)] += diag[None]
    L = _cholesky_or_jitter(Sig)
    Linv = np.linalg.solve(L, np.broadcast_to(np.eye(P), Sig.shape))
    Sinv = np.swapaxes(Linv, -1, -2) @ Linv
    alpha = np.einsum("scpq,cq->scp", Sinv, m)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=(-1, -2))
    quad = np.einsum("scp,cp->s", alpha, m)
    ll = -0.5 * quad - 0.5 * logdet - 0.5 * batch.n_obs * LOG_2PI
    G = alpha[..., :, None] * alpha[..., None, :] - Sinv
    gO = (G @ WO) * fmask[None, :, :, None]  # (S, C, P, K)
    onehot = np.zeros((n_cols * P, D))
    onehot[np.arange(n_cols * P), idx.ravel()] = fmask.ravel()
    gW = np.einsum("sjk,jd->sdk", gO.reshape(S, n_cols * P, K), onehot)
    return ll, gW


def _cholesky_or_jitter(Sig):
    try:
        return np.linalg.cholesky(Sig)
    except np.linalg.LinAlgError:
        from .model import jitter_cholesky

        out = np.empty_like(Sig)
        flat = Sig.reshape((-1,) + Sig.shape[-2:])
        fo = out.reshape(flat.shape)
        for i in range(flat.shape[0]):
            fo[i] = jitter_cholesky(flat[i])
        return out


@njit(cache=True)
def _loglik_grad_nb(W, sigma2, ptr, rows, vals):
    S, D, K = W.shape
    n_cols = ptr.shape[0] - 1
    ll = np.zeros(S)
    gW = np.zeros((S, D, K))
    ok = True
    for s in range(S):
        for c in range(n_cols):
            a = ptr[c]
            p = ptr[c + 1] - a
            if p == 0:
                continue
            # covariance block and its Cholesky factor (lower, in place)
            L = np.empty((p, p))
            for i in range(p):
                ri = rows[a + i]
                for j in range(i + 1):
                    rj = rows[a + j]
                    acc = 0.0
                    for k in range(K):
                        acc += W[s, ri, k] * W[s, rj, k]
                    L[i, j] = acc
                L[i, i] += sigma2
            for j in range(p):
                d = L[j, j]
                for k in range(j):
                    d -= L[j, k] * L[j, k]
                if d <= 0.0:
                    ok = False
                    d = 1e-300
                d = math.sqrt(d)
                L[j, j] = d
                for i in range(j + 1, p):
                    acc = L[i, j]
                    for k in range(j):
                        acc -= L[i, k] * L[j, k]
                    L[i, j] = acc / d
            # Sinv via L^{-1}
            Li = np.zeros((p, p))
            for j in range(p):
                Li[j, j] = 1.0 / L[j, j]
                for i in range(j + 1, p):
                    acc = 0.0
                    for k in range(j, i):
                        acc -= L[i, k] * Li[k, j]
                    Li[i, j] = acc / L[i, i]
            Sinv = np.zeros((p, p))
            for i in range(p):
                for j in range(i + 1):
                    acc = 0.0
                    for k in range(i, p):
                        acc += Li[k, i] * Li[k, j]
                    Sinv[i, j] = acc
                    Sinv[j, i] = acc
            alpha = np.zeros(p)
            quad = 0.0
            logdet = 0.0
            for i in range(p):
                acc = 0.0
                for j in range(p):
                    acc += Sinv[i, j] * vals[a + j]
                alpha[i] = acc
                quad += acc * vals[a + i]
                logdet += 2.0 * math.log(L[i, i])
            ll[s] += -0.5 * quad - 0.5 * logdet - 0.5 * p * 1.8378770664093453
            for i in range(p):
                ri = rows[a + i]
                for j in range(p):
                    gij = alpha[i] * alpha[j] - Sinv[i, j]
                    rj = rows[a + j]
                    for k in range(K):
                        gW[s, ri, k] += gij * W[s, rj, k]
    return ll, gW, ok


def loglik_grad_numba(W, sigma2, batch):
    W = np.ascontiguousarray(W, dtype=np.float64)
    ll, gW, ok = _loglik_grad_nb(W, float(sigma2), batch.ptr, batch.rows, batch.vals)
    if not ok:
        return loglik_grad_numpy(W, sigma2, batch)
    return ll, gW


# ---------------------------------------------------------------------------
# information-ratio tables from discretised predictive distributions


def info_tables_numpy(q, yvals, weights, discount):
    """Expected regret and mutual-information tables from per-sample predictives.

    ``q[s, a, b]`` is the mass of bin ``b`` for action ``a`` under posterior
    sample ``s``; ``yvals[a, b]`` the bin representative; ``weights`` the sample
    weights; ``discount[a]`` the factor applied to action ``a``'s reward.
    Returns ``(regret, info, best, r_star, mean_value)`` where ``best[s]`` is
    the optimal action index of sample ``s`` and ``mean_value[a]`` the
    undiscounted posterior-mean reward.
    """
    value = np.einsum("sab,ab->sa", q, yvals)  # undiscounted expected value per sample
    reward = value * discount[None, :]
    best = np.argmax(reward, axis=1)
    r_star = float(np.sum(weights * reward[np.arange(q.shape[0]), best]))
    mean_value = weights @ value
    regret = r_star - mean_value * discount
    stars, inv = np.unique(best, return_inverse=True)
    onehot = np.zeros((q.shape[0], stars.size))
    onehot[np.arange(q.shape[0]), inv] = weights
    p_star = onehot.sum(axis=0)  # (C,)
    p_y = np.einsum("s,sab->ab", weights, q)  # (A, B)
    joint = np.einsum("sc,sab->acb", onehot, q)  # (A, C, B)
    denom = p_star[None, :, None] * p_y[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(joint > 0, joint * np.log(joint / denom), 0.0)
    info = terms.sum(axis=(1, 2))
    return regret, info, best, r_star, mean_value


@njit(cache=True)
def _info_tables_nb(q, yvals, weights, discount):
    S, A, B = q.shape
    value = np.zeros((S, A))
    best = np.zeros(S, dtype=np.int64)
    r_star = 0.0
    for s in range(S):
        bi = 0
        bv = -np.inf
        for a in range(A):
            acc = 0.0
            for b in range(B):
                acc += q[s, a, b] * yvals[a, b]
            value[s, a] = acc
            rv = acc * discount[a]
            if rv > bv:
                bv = rv
                bi = a
        best[s] = bi
        r_star += weights[s] * bv
    mean_value = np.zeros(A)
    for a in range(A):
        acc = 0.0
        for s in range(S):
            acc += weights[s] * value[s, a]
        mean_value[a] = acc
    regret = np.empty(A)
    for a in range(A):
        regret[a] = r_star - mean_value[a] * discount[a]
    # compact labels for the optimal actions that occur
    label = np.full(A, -1, dtype=np.int64)
    n_star = 0
    for a in range(A):
        for s in range(S):
            if best[s] == a:
                label[a] = n_star
                n_star += 1
                break
    p_star = np.zeros(n_star)
    for s in range(S):
        p_star[label[best[s]]] += weights[s]
    info = np.zeros(A)
    joint = np.zeros((n_star, B))
    p_y = np.zeros(B)
    for a in range(A):
        joint[:, :] = 0.0
        p_y[:] = 0.0
        for s in range(S):
            c = label[best[s]]
            w = weights[s]
            for b in range(B):
                v = w * q[s, a, b]
                joint[c, b] += v
                p_y[b] += v
        acc = 0.0
        for c in range(n_star):
            for b in range(B):
                j = joint[c, b]
                if j > 0.0:
                    acc += j * math.log(j / (p_star[c] * p_y[b]))
        info[a] = acc
    return regret, info, best, r_star, mean_value


def info_tables_numba(q, yvals, weights, discount):
    return _info_tables_nb(
        np.ascontiguousarray(q, dtype=np.float64),
        np.ascontiguousarray(yvals, dtype=np.float64),
        np.ascontiguousarray(weights, dtype=np.float64),
        np.ascontiguousarray(discount, dtype=np.float64),
    )


if USE_NUMBA:
    loglik_grad = loglik_grad_numba
    info_tables = info_tables_numba
else:
    loglik_grad = loglik_grad_numpy
    info_tables = info_tables_numpy
