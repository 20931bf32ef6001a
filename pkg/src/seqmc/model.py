"""Gamma-process factor model: densities, covariance and Gaussian conditionals.

Columns of the preference matrix are modelled as ``m_n ~ N(0, W W^T + sigma^2 I)``
with a shrinking gamma prior on the loadings::

    W_dk | r_k, gamma   ~ G(gamma * r_k, gamma)
    r_k | gamma0, c0    ~ G(gamma0 / K, c0)
    gamma, gamma0, c0   ~ G(1, 1)

``G(a, b)`` is shape/rate.  ``sigma`` is a fixed user-supplied noise scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln

from . import kernels

LOG_2PI = math.log(2.0 * math.pi)


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a covariance block stays indefinite after maximum jitter."""


@dataclass(frozen=True)
class FactorParams:
    W: np.ndarray
    r: np.ndarray
    gamma: float
    gamma0: float
    c0: float
    sigma: float

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if W.ndim != 2 or W.shape[0] < 1 or W.shape[1] < 1:
            raise ValueError(f"W must be a non-empty D x K matrix, got shape {W.shape}")
        if r.shape != (W.shape[1],):
            raise ValueError(f"r must have length K={W.shape[1]}, got shape {r.shape}")
        if not np.all(W > 0) or not np.all(r > 0):
            raise ValueError("W and r must be strictly positive")
        for name in ("gamma", "gamma0", "c0", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "r", r)

    @property
    def D(self) -> int:
        return self.W.shape[0]

    @property
    def K(self) -> int:
        return self.W.shape[1]

    def to_log_vector(self) -> np.ndarray:
        """Flatten to the log-parameter layout ``[log W (row-major), log r, log gamma, log gamma0, log c0]``."""
        return np.log(np.concatenate([self.W.ravel(), self.r, [self.gamma, self.gamma0, self.c0]]))

    @classmethod
    def from_log_vector(cls, u: np.ndarray, D: int, K: int, sigma: float) -> "FactorParams":
        theta = np.exp(np.asarray(u, dtype=float))
        W, r, hyp = unpack(theta, D, K)
        return cls(W=W, r=r, gamma=float(hyp[0]), gamma0=float(hyp[1]), c0=float(hyp[2]), sigma=sigma)


@dataclass(frozen=True)
class FactorModel:
    """Model dimensions and the fixed noise scale shared by inference and policies."""

    D: int
    K: int
    sigma: float

    def __post_init__(self):
        if self.D < 1 or self.K < 1:
            raise ValueError("D and K must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def n_params(self) -> int:
        return n_params(self.D, self.K)


@dataclass(frozen=True)
class PartialColumn:
    observed_idx: np.ndarray
    observed_vals: np.ndarray
    dim: int

    def __post_init__(self):
        idx = np.asarray(self.observed_idx, dtype=np.int64).reshape(-1)
        vals = np.asarray(self.observed_vals, dtype=float).reshape(-1)
        if idx.shape != vals.shape:
            raise ValueError("observed_idx and observed_vals must have equal length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dim):
            raise ValueError("observed_idx must be strictly increasing and inside [0, dim)")
        object.__setattr__(self, "observed_idx", idx)
        object.__setattr__(self, "observed_vals", vals)

    @property
    def unobserved_idx(self) -> np.ndarray:
        keep = np.ones(self.dim, dtype=bool)
        keep[self.observed_idx] = False
        return np.flatnonzero(keep)


@dataclass(frozen=True)
class ConditionalGaussian:
    mean: np.ndarray
    cov: np.ndarray
    index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def n_params(D: int, K: int) -> int:
    return D * K + K + 3


def unpack(theta: np.ndarray, D: int, K: int):
    """Split flat parameter vector(s) into ``W``, ``r`` and the three hyperparameters.

    Works on a single vector or a leading batch axis.
    """
    theta = np.asarray(theta)
    lead = theta.shape[:-1]
    W = theta[..., : D * K].reshape(lead + (D, K))
    r = theta[..., D * K : D * K + K]
    hyp = theta[..., D * K + K :]
    return W, r, np.moveaxis(hyp, -1, 0)


def gamma_log_density(x, a, b):
    """Normalized log density of the shape/rate gamma distribution."""
    x, a, b = np.asarray(x, float), np.asarray(a, float), np.asarray(b, float)
    if np.any(x <= 0) or np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("gamma_log_density requires x, a, b > 0")
    out = a * np.log(b) - gammaln(a) + (a - 1.0) * np.log(x) - b * x
    return float(out) if out.ndim == 0 else out


def jitter_cholesky(A: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter from 1e-10 to 1e-4 of mean(diag)."""
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diagonal(A, axis1=-2, axis2=-1)))
    if not scale > 0:
        scale = 1.0
    eye = np.eye(A.shape[-1])
    jit = 1e-10
    while jit <= 1e-4 * (1 + 1e-9):
        try:
            return np.linalg.cholesky(A + jit * scale * eye)
        except np.linalg.LinAlgError:
            jit *= 10.0
    raise CholeskyError("covariance block not positive definite after maximum jitter (1e-4)")


def column_covariance(W: np.ndarray, sigma: float) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2:
        raise ValueError("W must be a 2-D matrix")
    S = W @ W.T
    S = 0.5 * (S + S.T)
    S[np.diag_indices_from(S)] += sigma**2
    return S


def conditional_gaussian(Sigma: np.ndarray, col: PartialColumn) -> ConditionalGaussian:
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.shape != (col.dim, col.dim):
        raise ValueError(f"Sigma shape {Sigma.shape} does not match column dim {col.dim}")
    O, U = col.observed_idx, col.unobserved_idx
    if O.size == 0:
        return ConditionalGaussian(np.zeros(col.dim), Sigma.copy(), U)
    L = jitter_cholesky(Sigma[np.ix_(O, O)])
    S_UO = Sigma[np.ix_(U, O)]
    # A = L^{-1} S_OU, so S_UO S_OO^{-1} S_OU = A^T A
    A = _tri_solve(L, S_UO.T)
    b = _tri_solve(L, col.observed_vals)
    mean = A.T @ b
    cov = Sigma[np.ix_(U, U)] - A.T @ A
    cov = 0.5 * (cov + cov.T)
    return ConditionalGaussian(mean, cov, U)


def _tri_solve(L, B):
    from scipy.linalg import solve_triangular

    return solve_triangular(L, B, lower=True, check_finite=False)


def sample_conditional(cg: ConditionalGaussian, rng: np.random.Generator) -> np.ndarray:
    n = cg.mean.shape[0]
    z = rng.standard_normal(n)
    if n == 0:
        return cg.mean.copy()
    try:
        L = np.linalg.cholesky(cg.cov)
    except np.linalg.LinAlgError:
        # degenerate covariance: symmetric square root with clipped spectrum
        w, V = np.linalg.eigh(0.5 * (cg.cov + cg.cov.T))
        L = V * np.sqrt(np.clip(w, 0.0, None))
    return cg.mean + L @ z


def effective_rank(r, rel_threshold: float) -> int:
    r = np.asarray(r, dtype=float)
    if r.size == 0:
        raise ValueError("effective_rank of an empty rate vector")
    if not 0 < rel_threshold < 1 + 1e-12:
        raise ValueError("rel_threshold must lie in (0, 1]")
    # small relative slack so a rate sitting exactly on the cutoff counts
    return int(np.count_nonzero(r >= rel_threshold * r.max() * (1.0 - 1e-12)))


# ---------------------------------------------------------------------------
# observed data in padded / CSR form


class ColumnBatch:
    """Observed entries of a D x N matrix grouped by column.

    Holds both a padded layout (for the batched numpy kernels) and a CSR layout
    (for the compiled kernels).  Columns without observations are dropped.
    """

    def __init__(self, D: int, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        if rows.size and (rows.min() < 0 or rows.max() >= D):
            raise ValueError("row index out of range")
        order = np.lexsort((rows, cols))
        rows, cols, vals = rows[order], cols[order], vals[order]
        self.D = D
        self.n_obs = rows.size
        ucols, starts, counts = np.unique(cols, return_index=True, return_counts=True)
        self.col_ids = ucols
        self.ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.rows = rows
        self.vals = vals
        n_cols, P = ucols.size, (int(counts.max()) if counts.size else 0)
        self.idx = np.zeros((n_cols, P), dtype=np.int64)
        self.pvals = np.zeros((n_cols, P))
        self.mask = np.zeros((n_cols, P), dtype=bool)
        slot = np.arange(rows.size) - np.repeat(self.ptr[:-1], counts)
        ci = np.repeat(np.arange(n_cols), counts)
        self.idx[ci, slot] = rows
        self.pvals[ci, slot] = vals
        self.mask[ci, slot] = True

    @classmethod
    def from_columns(cls, columns: Sequence[PartialColumn]) -> "ColumnBatch":
        if not columns:
            raise ValueError("need at least one column to infer the dimension")
        D = columns[0].dim
        rows, cols, vals = [], [], []
        for j, c in enumerate(columns):
            if c.dim != D:
                raise ValueError("all columns must share the same dimension")
            rows.append(c.observed_idx)
            cols.append(np.full(c.observed_idx.size, j))
            vals.append(c.observed_vals)
        return cls(D, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))

    @classmethod
    def from_masked(cls, values: np.ndarray, mask: np.ndarray) -> "ColumnBatch":
        rows, cols = np.nonzero(mask)
        return cls(values.shape[0], rows, cols, values[rows, cols])


def as_batch(columns) -> ColumnBatch:
    if isinstance(columns, ColumnBatch):
        return columns
    return ColumnBatch.from_columns(list(columns))


# ---------------------------------------------------------------------------
# log joint density


def log_prior_and_grad(theta: np.ndarray, D: int, K: int):
    """Prior log density of flat parameter vectors and its gradient in theta-space.

    ``theta`` has shape ``(S, D*K + K + 3)``; returns ``(S,)`` and ``(S, P)``.
    """
    W, r, (g, g0, c0) = unpack(theta, D, K)
    a = g[:, None] * r  # (S, K) shape of W columns
    logW = np.log(W)
    lp_W = (a * np.log(g)[:, None] - gammaln(a))[:, None, :] + (a[:, None, :] - 1.0) * logW - g[:, None, None] * W
    a0 = g0 / K
    logr = np.log(r)
    lp_r = a0[:, None] * np.log(c0)[:, None] - gammaln(a0)[:, None] + (a0[:, None] - 1.0) * logr - c0[:, None] * r
    lp = lp_W.sum(axis=(1, 2)) + lp_r.sum(axis=1) - g - g0 - c0

    dW = (a[:, None, :] - 1.0) / W - g[:, None, None]
    common = np.log(g)[:, None, None] - digamma(a)[:, None, :] + logW  # (S, D, K)
    dr = g[:, None] * common.sum(axis=1) + (a0[:, None] - 1.0) / r - c0[:, None]
    dg = (r[:, None, :] * (common + 1.0) - W).sum(axis=(1, 2)) - 1.0
    dg0 = (np.log(c0)[:, None] - digamma(a0)[:, None] + logr).sum(axis=1) / K - 1.0
    dc0 = K * a0 / c0 - r.sum(axis=1) - 1.0
    grad = np.concatenate([dW.reshape(W.shape[0], -1), dr, dg[:, None], dg0[:, None], dc0[:, None]], axis=1)
    return lp, grad


def log_joint_batch(theta: np.ndarray, batch: ColumnBatch, D: int, K: int, sigma: float, grad: bool = True):
    """Log joint (prior + column likelihoods) for a batch of parameter vectors.

    Returns ``(values, gradient)`` with the gradient taken in theta-space, or
    ``(values, None)`` when ``grad`` is false.
    """
    theta = np.atleast_2d(theta)
    lp, gp = log_prior_and_grad(theta, D, K)
    W = theta[:, : D * K].reshape(-1, D, K)
    ll, gW = kernels.loglik_grad(W, sigma**2, batch)
    val = lp + ll
    if not grad:
        return val, None
    gp[:, : D * K] += gW.reshape(theta.shape[0], -1)
    return val, gp


def log_joint(params: FactorParams, columns, K: int | None = None) -> float:
    """Log prior of ``params`` plus the Gaussian log likelihood of every column's observed entries."""
    if K is not None and K != params.K:
        raise ValueError(f"K={K} does not match W with {params.K} columns")
    batch = as_batch(columns)
    if batch.D != params.D:
        raise ValueError(f"columns have dim {batch.D} but W has {params.D} rows")
    theta = np.exp(params.to_log_vector())[None, :]
    val, _ = log_joint_batch(theta, batch, params.D, params.K, params.sigma, grad=False)
    return float(val[0])


# ---------------------------------------------------------------------------
# batched conditionals over all columns of a matrix


def _padded_blocks(mask: np.ndarray):
    """Per-column observed index blocks, padded to the largest observed count."""
    D, N = mask.shape
    counts = mask.sum(axis=0)
    P = int(counts.max()) if counts.size else 0
    idx = np.zeros((N, P), dtype=np.int64)
    pm = np.zeros((N, P), dtype=bool)
    for j in np.flatnonzero(counts):
        o = np.flatnonzero(mask[:, j])
        idx[j, : o.size] = o
        pm[j, : o.size] = True
    return idx, pm


def conditional_moments(Sigmas: np.ndarray, values: np.ndarray, mask: np.ndarray):
    """Entrywise conditional mean and variance of every cell given each column's observed cells.

    ``Sigmas`` is ``(S, D, D)`` (or a single ``(D, D)``); returns arrays of shape
    ``(S, D, N)``.  Observed cells get their observed value and zero variance.
    """
    single = np.ndim(Sigmas) == 2
    Sig = np.asarray(Sigmas, dtype=float)[None] if single else np.asarray(Sigmas, dtype=float)
    S, D, _ = Sig.shape
    N = mask.shape[1]
    idx, pm = _padded_blocks(mask)
    P = idx.shape[1]
    diag = np.diagonal(Sig, axis1=1, axis2=2)  # (S, D)
    mean = np.zeros((S, D, N))
    var = np.broadcast_to(diag[:, :, None], (S, D, N)).copy()
    if P > 0:
        m = np.where(pm, values[idx, np.arange(N)[:, None]], 0.0)  # (N, P)
        S_OD = Sig[:, idx, :] * pm[None, :, :, None]  # (S, N, P, D)
        S_OO = np.take_along_axis(S_OD, np.broadcast_to(idx[None, :, None, :], (S, N, P, P)), axis=3)
        S_OO = S_OO * pm[None, :, None, :]
        pad = ~pm
        eye = np.eye(P, dtype=bool)
        S_OO = S_OO + (pad[:, :, None] & eye)[None].astype(float)
        L = _batched_cholesky(S_OO)
        A = np.linalg.solve(L, S_OD)  # L^{-1} S_OD
        b = np.linalg.solve(L, np.broadcast_to(m[None, :, :, None], (S, N, P, 1)))[..., 0]
        mean = np.einsum("snpd,snp->sdn", A, b)
        var = var - np.einsum("snpd,snpd->sdn", A, A)
    var = np.clip(var, 0.0, None)
    obs = mask[None]
    mean = np.where(obs, values[None], mean)
    var = np.where(obs, 0.0, var)
    return (mean[0], var[0]) if single else (mean, var)


def _batched_cholesky(A: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        out = np.empty_like(A)
        flat_in = A.reshape((-1,) + A.shape[-2:])
        flat_out = out.reshape(flat_in.shape)
        for i in range(flat_in.shape[0]):
            flat_out[i] = jitter_cholesky(flat_in[i])
        return out


def sample_missing(Sigma: np.ndarray, values: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw every unobserved cell from its column's conditional Gaussian.

    Uses the joint-draw-then-correct construction: draw ``x ~ N(0, Sigma)`` for
    every column and shift the unobserved part by ``S_UO S_OO^{-1} (m_O - x_O)``,
    which has exactly the conditional law.  Observed cells are returned as is.
    """
    D, N = mask.shape
    L = jitter_cholesky(Sigma)
    X = L @ rng.standard_normal((D, N))
    idx, pm = _padded_blocks(mask)
    P = idx.shape[1]
    if P == 0:
        return X
    cols = np.arange(N)[:, None]
    resid = np.where(pm, values[idx, cols] - X[idx, cols], 0.0)  # (N, P)
    S_OD = Sigma[idx, :] * pm[:, :, None]  # (N, P, D)
    S_OO = np.take_along_axis(S_OD, np.broadcast_to(idx[:, None, :], (N, P, P)), axis=2) * pm[:, None, :]
    S_OO = S_OO + ((~pm)[:, :, None] & np.eye(P, dtype=bool)).astype(float)
    Lo = _batched_cholesky(S_OO)
    w = np.linalg.solve(Lo, resid[..., None])
    w = np.linalg.solve(np.swapaxes(Lo, -1, -2), w)[..., 0]  # S_OO^{-1} resid
    X = X + np.einsum("npd,np->dn", S_OD, w)
    return np.where(mask, values, X)
