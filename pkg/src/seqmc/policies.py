"""Action selection for sequential matrix completion.

Actions are ``(row, col)`` cells of a ``D x N`` matrix.  Everywhere ties are
broken towards the lexicographically smallest cell, which is the smallest
flat (row-major) index, so ``np.argmax``/``np.argmin`` give the right answer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import kernels
from .model import (
    ColumnBatch,
    PartialColumn,
    column_covariance,
    conditional_gaussian,
    conditional_moments,
    sample_missing,
)
from .svi import VariationalPosterior, sample_params


class NoActionAvailable(RuntimeError):
    pass


def discount(counts, beta: float) -> np.ndarray:
    """``beta ** counts`` with ``0 ** 0 == 1``."""
    return np.power(float(beta), np.asarray(counts, dtype=float))


class History:
    """Observed cells, their values and pull counts.

    ``values`` stores the undiscounted value of the first pull of each cell
    (observations are treated as exact); later pulls only bump ``counts``.
    """

    def __init__(self, D: int, N: int, beta: float = 0.0):
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        self.D, self.N, self.beta = D, N, float(beta)
        self.values = np.zeros((D, N))
        self.mask = np.zeros((D, N), dtype=bool)
        self.counts = np.zeros((D, N), dtype=np.int64)

    @property
    def shape(self):
        return (self.D, self.N)

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def record(self, action, reward: float) -> None:
        i, j = action
        f = self.beta ** self.counts[i, j] if self.counts[i, j] else 1.0
        if not self.mask[i, j]:
            if f == 0.0:
                raise ValueError("cannot recover a value from a fully discounted reward")
            self.values[i, j] = reward / f
            self.mask[i, j] = True
        self.counts[i, j] += 1

    def available(self) -> np.ndarray:
        if self.beta == 0.0:
            return self.counts == 0
        return np.ones((self.D, self.N), dtype=bool)

    def discount(self) -> np.ndarray:
        return discount(self.counts, self.beta)

    def observed(self) -> dict:
        rows, cols = np.nonzero(self.mask)
        return {(int(i), int(j)): float(self.values[i, j]) for i, j in zip(rows, cols)}

    def column(self, j: int) -> PartialColumn:
        o = np.flatnonzero(self.mask[:, j])
        return PartialColumn(o, self.values[o, j], self.D)

    def batch(self) -> ColumnBatch:
        return ColumnBatch.from_masked(self.values, self.mask)

    def copy(self) -> "History":
        h = History(self.D, self.N, self.beta)
        h.values, h.mask, h.counts = self.values.copy(), self.mask.copy(), self.counts.copy()
        return h


def _argmax_cell(scores: np.ndarray, allowed: np.ndarray):
    s = np.where(allowed, scores, -np.inf)
    flat = int(np.argmax(s))
    return divmod(flat, scores.shape[1])


# ---------------------------------------------------------------------------
# Thompson sampling


def thompson_select_batch(q: VariationalPosterior, sigma: float, history: History, n_obs: int, rng) -> list:
    """Pick ``n_obs`` cells, each the best cell of an independent posterior draw.

    Each draw samples parameters from ``q``, completes every column from its
    conditional Gaussian given the observed cells, and scores cells by their
    discounted sampled value.  Picked cells count as pulled for later picks.
    """
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    counts = history.counts.copy()
    allowed = history.available().copy()
    if history.beta == 0.0 and allowed.sum() < n_obs:
        raise NoActionAvailable(f"only {allowed.sum()} actions available for a batch of {n_obs}")
    picks = []
    for _ in range(n_obs):
        p = sample_params(q, sigma, rng)
        draw = sample_missing(column_covariance(p.W, sigma), history.values, history.mask, rng)
        a = _argmax_cell(draw * discount(counts, history.beta), allowed)
        picks.append(a)
        counts[a] += 1
        if history.beta == 0.0:
            allowed[a] = False
    return picks


# ---------------------------------------------------------------------------
# information ratio


@dataclass(frozen=True)
class BinGrid:
    lo: float
    hi: float
    n_bins: int = 32

    def __post_init__(self):
        if self.n_bins < 2 or not self.lo < self.hi:
            raise ValueError("BinGrid needs lo < hi and n_bins >= 2")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])


def _bin_masses(mean, sd, edges):
    """Gaussian mass per bin with both tails folded into the end bins.

    ``mean``/``sd`` broadcast against the leading axes of ``edges[..., :]``.
    Zero ``sd`` puts the whole mass in the bin containing the mean.
    """
    mean = np.asarray(mean, float)[..., None]
    sd = np.asarray(sd, float)[..., None]
    inner = edges[..., 1:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = (inner - mean) / sd
    zs = np.where(sd > 0, zs, np.where(inner > mean, np.inf, -np.inf))
    cdf = ndtr(zs)
    shape = cdf.shape[:-1] + (1,)
    cdf = np.concatenate([np.zeros(shape), cdf, np.ones(shape)], axis=-1)
    return np.diff(cdf, axis=-1)


def predictive_distribution(theta: np.ndarray, history: History, action, bins: BinGrid) -> np.ndarray:
    """Discretised predictive of one cell under covariance ``theta`` given its column's observations."""
    i, j = action
    col = history.column(j)
    if history.mask[i, j]:
        mean, sd = history.values[i, j], 0.0
    else:
        cg = conditional_gaussian(theta, col)
        k = int(np.searchsorted(cg.index, i))
        mean, sd = float(cg.mean[k]), float(np.sqrt(max(cg.cov[k, k], 0.0)))
    return _bin_masses(mean, sd, bins.edges)


@dataclass(frozen=True)
class InfoRatioTables:
    """Per-action expected regret and information gain, aligned with ``actions``.

    ``r_star`` and ``mean_value`` (undiscounted posterior-mean reward) allow the
    regret of an action to be recomputed after it has been pulled.
    """

    actions: np.ndarray  # (A, 2) rows of (row, col), lexicographically sorted
    regret: np.ndarray
    info: np.ndarray
    r_star: float
    mean_value: np.ndarray
    p_star: dict

    def as_dicts(self):
        keys = [tuple(map(int, a)) for a in self.actions]
        return dict(zip(keys, self.regret)), dict(zip(keys, self.info))


def approx_info_ratio(
    theta_samples,
    history: History,
    bins: BinGrid | None = None,
    beta: float | None = None,
    weights=None,
    n_bins: int = 32,
    max_candidates: int | None = None,
) -> InfoRatioTables:
    """Monte Carlo estimate of expected regret and information gain per available cell.

    ``theta_samples`` are column covariances drawn from the posterior with
    weights ``weights`` (uniform by default).  Unless ``bins`` fixes a common
    grid, each cell gets ``n_bins`` bins spanning its predictive mixture mean
    +/- 6 pooled standard deviations.  Bin centres stand in for the values
    ``y``.  With ``max_candidates`` only that many cells, ranked by their best
    per-sample expected reward, are scored.
    """
    Sig = np.asarray(theta_samples, dtype=float)
    if Sig.ndim == 2:
        Sig = Sig[None]
    S = Sig.shape[0]
    w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (S,) or abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError("weights must be a probability vector over the samples")
    beta = history.beta if beta is None else float(beta)

    allowed = history.available()
    mean, var = conditional_moments(Sig, history.values, history.mask)  # (S, D, N)
    rows, cols = np.nonzero(allowed)
    if rows.size == 0:
        raise NoActionAvailable("no available actions")
    mu = mean[:, rows, cols]  # (S, A)
    sd = np.sqrt(var[:, rows, cols])
    disc = discount(history.counts[rows, cols], beta)
    if max_candidates and rows.size > max_candidates:
        score = (mu * disc).max(axis=0)
        keep = np.sort(np.argsort(-score, kind="stable")[:max_candidates])
        rows, cols, mu, sd, disc = rows[keep], cols[keep], mu[:, keep], sd[:, keep], disc[keep]

    if bins is None:
        center = w @ mu
        pooled = np.sqrt(np.maximum(w @ (sd**2 + mu**2) - center**2, 0.0))
        half = np.where(pooled > 0, 6.0 * pooled, 1.0)
        edges = center[:, None] + half[:, None] * np.linspace(-1.0, 1.0, n_bins + 1)[None, :]
    else:
        edges = np.broadcast_to(bins.edges, (rows.size, bins.n_bins + 1))
    yvals = 0.5 * (edges[:, :-1] + edges[:, 1:])
    q = _bin_masses(mu, sd, edges[None])  # (S, A, B)

    regret, info, best, r_star, mean_value = kernels.info_tables(q, yvals, w, disc)
    if np.any(info < -1e-9):
        raise FloatingPointError(f"negative information gain {info.min():.3e}")
    info = np.clip(info, 0.0, None)
    regret = np.clip(regret, 0.0, None)
    actions = np.stack([rows, cols], axis=1)
    p_star: dict = {}
    for s, b in enumerate(best):
        key = (int(rows[b]), int(cols[b]))
        p_star[key] = p_star.get(key, 0.0) + float(w[s])
    return InfoRatioTables(actions, regret, info, float(r_star), np.asarray(mean_value), p_star)


def information_ratio(regret: np.ndarray, info: np.ndarray) -> np.ndarray:
    """``regret**2 / info`` with ``0`` for zero regret and ``inf`` for zero information."""
    regret = np.asarray(regret, float)
    info = np.asarray(info, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(info > 0, regret**2 / info, np.inf)
    return np.where(regret <= 0, 0.0, r)


def ids_select_batch(tables: InfoRatioTables, history: History, n_obs: int, beta: float | None = None) -> list:
    """Pick ``n_obs`` cells by repeatedly minimising the information ratio.

    Information gains stay fixed within the batch.  A picked cell's regret is
    recomputed with its incremented pull count; with ``beta == 0`` it simply
    leaves the candidate set.  If every remaining ratio is infinite the cell
    with least regret is taken.
    """
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    beta = history.beta if beta is None else float(beta)
    A = tables.actions.shape[0]
    regret = tables.regret.astype(float).copy()
    counts = history.counts[tables.actions[:, 0], tables.actions[:, 1]].copy()
    active = np.ones(A, dtype=bool)
    picks = []
    for _ in range(n_obs):
        if not active.any():
            raise NoActionAvailable("batch exhausted the candidate actions")
        ratio = np.where(active, information_ratio(regret, tables.info), np.inf)
        if np.isinf(ratio[active]).all():
            k = int(np.argmin(np.where(active, regret, np.inf)))
        else:
            k = int(np.argmin(ratio))
        picks.append((int(tables.actions[k, 0]), int(tables.actions[k, 1])))
        counts[k] += 1
        if beta == 0.0:
            active[k] = False
        else:
            regret[k] = max(tables.r_star - tables.mean_value[k] * beta ** counts[k], 0.0)
    return picks


# ---------------------------------------------------------------------------
# baselines


def random_select(history: History, rng):
    allowed = np.flatnonzero(history.available())
    if allowed.size == 0:
        raise NoActionAvailable("no available actions")
    return divmod(int(rng.choice(allowed)), history.N)


def oracle_select(true_cov: np.ndarray, history: History, rng):
    """Thompson-style pick using a known column covariance."""
    allowed = history.available()
    if not allowed.any():
        raise NoActionAvailable("no available actions")
    draw = sample_missing(np.asarray(true_cov, float), history.values, history.mask, rng)
    return _argmax_cell(draw * history.discount(), allowed)


def empirical_covariance(values: np.ndarray, mask: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Zero-mean row covariance from pairwise-complete observations.

    Entries backed by fewer than two complete column pairs are 0.  The raw
    estimate is projected onto the PSD cone before ``ridge * mean(diag)`` is
    added to the diagonal.
    """
    X = np.where(mask, values, 0.0)
    m = mask.astype(float)
    counts = m @ m.T
    with np.errstate(divide="ignore", invalid="ignore"):
        C = np.where(counts >= 2, (X @ X.T) / counts, 0.0)
    C = 0.5 * (C + C.T)
    if ridge > 0:
        w, V = np.linalg.eigh(C)
        C = (V * np.clip(w, 0.0, None)) @ V.T
        C = 0.5 * (C + C.T)
        C[np.diag_indices_from(C)] += ridge * float(np.mean(np.diag(C)))
    return C


def empirical_cov_select(history: History, rng, ridge: float = 0.1):
    """Thompson-style pick using the empirical covariance of the observed columns."""
    if not np.any(history.mask.sum(axis=1) >= 2):
        return random_select(history, rng)
    C = empirical_covariance(history.values, history.mask, ridge)
    if not np.mean(np.diag(C)) > 0:
        return random_select(history, rng)
    return oracle_select(C, history, rng)


def hard_impute(values: np.ndarray, mask: np.ndarray, rank: int, tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    """Iterative rank-``rank`` SVD imputation; observed cells are kept fixed.

    Convergence is linear, so the per-iteration relative change understates the
    remaining error by roughly the inverse contraction rate; hence the small ``tol``.
    """
    fill = float(values[mask].mean()) if mask.any() else 0.0
    cur = np.where(mask, values, fill)
    for _ in range(max_iter):
        U, s, Vt = np.linalg.svd(cur, full_matrices=False)
        low = (U[:, :rank] * s[:rank]) @ Vt[:rank]
        new = np.where(mask, values, low)
        change = np.linalg.norm(new - cur) / max(np.linalg.norm(cur), 1e-300)
        cur = new
        if change < tol:
            break
    return cur


def greedy_completion_select(history: History, rank: int):
    allowed = history.available()
    if not allowed.any():
        raise NoActionAvailable("no available actions")
    filled = hard_impute(history.values, history.mask, rank)
    return _argmax_cell(filled * history.discount(), allowed)
