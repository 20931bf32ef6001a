"""Simulation environment, pseudo-regret accounting and the experiment loop."""
from __future__ import annotations

import heapq
import logging
import math
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import policies as pol
from .model import FactorModel, column_covariance
from .svi import SviConfig, fit, sample_params

log = logging.getLogger(__name__)

POLICIES = ("ts", "ids", "oracle", "empirical", "greedy", "random")
MODEL_POLICIES = ("ts", "ids")
W_DISTS = ("uniform01", "beta25")


def horizon(K_star: int, N: int, D: int) -> int:
    """Number of observations ``K*(N + D - K*)``: the degrees of freedom of a rank-K* D x N matrix."""
    if min(K_star, N, D) < 1 or K_star > min(N, D):
        raise ValueError(f"need 1 <= K_star <= min(N, D); got K_star={K_star}, N={N}, D={D}")
    return K_star * (N + D - K_star)


def refit_batch_size(H: int, n_updates: int = 40) -> int:
    """Observations between posterior updates, ``ceil(H / 40)`` (so 2600 -> 65)."""
    return max(1, -(-H // n_updates))


def synth_generate(D: int, N: int, K_true: int, w_dist: str, sigma: float = math.sqrt(0.1), rng=None):
    """Draw a loading matrix ``W`` and a ``D x N`` matrix with columns ``N(0, W W^T + sigma^2 I)``."""
    rng = np.random.default_rng() if rng is None else rng
    if K_true > min(D, N) or K_true < 1:
        raise ValueError("need 1 <= K_true <= min(D, N)")
    if w_dist == "uniform01":
        W = rng.uniform(0.0, 1.0, (D, K_true))
    elif w_dist == "beta25":
        W = rng.beta(2.0, 5.0, (D, K_true))
    else:
        raise ValueError(f"unknown w_dist {w_dist!r}; expected one of {W_DISTS}")
    L = np.linalg.cholesky(column_covariance(W, sigma))
    M = L @ rng.standard_normal((D, N))
    return W, M


class Environment:
    """Reward oracle over a fixed true matrix with geometric discounting of repeat pulls."""

    def __init__(self, M, noise_sigma: float = 0.0, beta: float = 0.0, rng=None):
        self.M = np.asarray(M, dtype=float)
        if noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        self.noise_sigma = float(noise_sigma)
        self.beta = float(beta)
        self.pull_counts = np.zeros(self.M.shape, dtype=np.int64)
        self.rng = np.random.default_rng() if rng is None else rng

    @property
    def shape(self):
        return self.M.shape

    def expected_reward(self, action) -> float:
        i, j = action
        return float(self.M[i, j] * pol.discount(self.pull_counts[i, j], self.beta))

    def step(self, action) -> float:
        return step(self, action)


def step(env: Environment, action) -> float:
    """Pull ``action``: ``(M[a] + eps) * beta**count`` with ``eps ~ N(0, noise_sigma^2)``."""
    i, j = action
    if not (0 <= i < env.M.shape[0] and 0 <= j < env.M.shape[1]):
        raise IndexError(f"action {action} outside matrix of shape {env.M.shape}")
    eps = env.rng.normal(0.0, env.noise_sigma) if env.noise_sigma > 0 else 0.0
    reward = (env.M[i, j] + eps) * float(pol.discount(env.pull_counts[i, j], env.beta))
    env.pull_counts[i, j] += 1
    return float(reward)


def _optimal_sequence(M, T: int, beta: float) -> np.ndarray:
    """Discounted values of the best ``T`` pulls, in the order they are taken."""
    vals = np.asarray(M, dtype=float).ravel()
    if beta == 0.0:
        if T > vals.size:
            raise ValueError(f"horizon {T} exceeds the {vals.size} distinct entries available with beta=0")
        return -np.sort(-vals, kind="stable")[:T]
    # greedy over per-entry discount sequences; exact when every sequence is non-increasing (M >= 0)
    heap = [(-v, k, 0) for k, v in enumerate(vals)]
    heapq.heapify(heap)
    out = np.empty(T)
    for t in range(T):
        nv, k, c = heapq.heappop(heap)
        out[t] = -nv
        heapq.heappush(heap, (-(vals[k] * beta ** (c + 1)), k, c + 1))
    return out


def optimal_cumulative_reward(M, T: int, beta: float) -> float:
    """Largest expected total reward achievable in ``T`` pulls knowing ``M``."""
    if T == 0:
        return 0.0
    return float(_optimal_sequence(M, T, beta).sum())


@dataclass
class RunTrace:
    rows: np.ndarray
    cols: np.ndarray
    reward: np.ndarray
    expected_reward: np.ndarray
    cum_regret: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.rows.size)

    @property
    def steps(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)

    @property
    def actions(self) -> list:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    @classmethod
    def empty(cls) -> "RunTrace":
        z = np.zeros(0)
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), z, z.copy(), z.copy())


def pseudo_regret(trace: RunTrace, M, beta: float) -> np.ndarray:
    """Regret series of length ``len(trace) + 1``; entry ``t`` compares the first ``t`` pulls to the optimum."""
    T = len(trace)
    best = np.concatenate([[0.0], np.cumsum(_optimal_sequence(M, T, beta))]) if T else np.zeros(1)
    got = np.concatenate([[0.0], np.cumsum(trace.expected_reward)])
    return best - got


@dataclass(frozen=True)
class ExperimentConfig:
    D: int
    N: int
    K_model: int = 20
    K_true: int | None = None
    sigma: float = math.sqrt(0.1)
    beta: float = 0.0
    horizon_rank: int | None = None
    horizon_override: int | None = None
    warm_start_fraction: float = 0.02
    n_obs_per_refit: int | None = None
    policy: str = "ts"
    seed: int = 0
    svi: SviConfig = SviConfig()
    w_dist: str = "uniform01"
    noise_sigma: float = 0.0
    with_replacement: bool = False
    n_theta: int = 64
    n_bins: int = 32
    ids_candidates: int | None = 512
    greedy_rank: int | None = None
    dataset: str | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if not 0 < self.warm_start_fraction < 1:
            raise ValueError("warm_start_fraction must lie in (0, 1)")
        if self.horizon_override is not None and self.horizon_override > self.D * self.N:
            raise ValueError("horizon cannot exceed D*N")

    @property
    def H(self) -> int:
        if self.horizon_override is not None:
            return int(self.horizon_override)
        k = self.horizon_rank or self.K_true or self.K_model
        return horizon(min(k, self.D, self.N), self.N, self.D)

    @property
    def batch_size(self) -> int:
        return self.n_obs_per_refit or refit_batch_size(self.H)


def _stream(seed: int, *keys) -> np.random.Generator:
    words = [int(seed)] + [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(words))


class RefitError(RuntimeError):
    pass


def _refit(history: pol.History, model: FactorModel, cfg: ExperimentConfig, k: int, start):
    batch = history.batch()
    last = None
    for attempt in range(2):
        try:
            res = fit(batch, model, cfg.svi, _stream(cfg.seed, "svi", k, attempt), start=start)
            if not np.all(np.isfinite(res.posterior.mu)) or not np.all(np.isfinite(res.posterior.log_scale)):
                raise FloatingPointError("non-finite variational parameters")
            return res
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            last = exc
            log.warning("refit %d attempt %d failed: %s", k, attempt, exc)
            start = None
    raise RefitError(str(last))


def run_experiment(config: ExperimentConfig, env: Environment, true_cov=None) -> RunTrace:
    """Warm start, then alternate posterior refits with batches of policy picks up to the horizon.

    ``true_cov`` feeds the oracle policy; when omitted it is the second-moment
    matrix of the environment's full matrix.
    """
    cfg = config
    D, N = env.shape
    if (D, N) != (cfg.D, cfg.N):
        raise ValueError(f"environment shape {env.shape} does not match config ({cfg.D}, {cfg.N})")
    H = cfg.H
    history = pol.History(D, N, cfg.beta)
    model = FactorModel(D, cfg.K_model, cfg.sigma)
    rng_warm = _stream(cfg.seed, "warm")
    rng_pol = _stream(cfg.seed, "policy", cfg.policy)
    if cfg.policy == "oracle" and true_cov is None:
        true_cov = env.M @ env.M.T / N

    rows, cols, rewards, expected = [], [], [], []
    meta = {"policy": cfg.policy, "H": H, "refit_seconds": [], "aborted": False}

    def play(a):
        e = env.expected_reward(a)
        r = env.step(a)
        history.record(a, r)
        rows.append(a[0])
        cols.append(a[1])
        rewards.append(r)
        expected.append(e)

    n_warm = min(max(1, int(round(cfg.warm_start_fraction * H))), H)
    flat = rng_warm.choice(D * N, size=n_warm, replace=cfg.with_replacement)
    for f in flat:
        play(divmod(int(f), N))
    meta["n_warm"] = n_warm

    prev_u = None
    k = 0
    while len(rows) < H:
        b = min(cfg.batch_size, H - len(rows))
        if cfg.policy in MODEL_POLICIES:
            t0 = time.perf_counter()
            try:
                res = _refit(history, model, cfg, k, prev_u)
            except RefitError as exc:
                meta["aborted"] = True
                meta["error"] = str(exc)
                break
            prev_u = res.map_params.to_log_vector()
            q = res.posterior
            if cfg.policy == "ts":
                picks = pol.thompson_select_batch(q, cfg.sigma, history, b, rng_pol)
            else:
                thetas = np.stack(
                    [column_covariance(sample_params(q, cfg.sigma, rng_pol).W, cfg.sigma) for _ in range(cfg.n_theta)]
                )
                tables = pol.approx_info_ratio(
                    thetas, history, n_bins=cfg.n_bins, max_candidates=cfg.ids_candidates or None
                )
                picks = pol.ids_select_batch(tables, history, b)
            meta["refit_seconds"].append(time.perf_counter() - t0)
            log.info("%s refit %d: t=%d/%d, svi iters=%d", cfg.policy, k, len(rows), H, res.n_iter)
            for a in picks:
                play(a)
        else:
            for _ in range(b):
                play(_baseline_pick(cfg, history, rng_pol, true_cov))
        k += 1

    trace = RunTrace(
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(rewards, dtype=float),
        np.asarray(expected, dtype=float),
        np.zeros(len(rows)),
        meta,
    )
    trace.cum_regret = pseudo_regret(trace, env.M, cfg.beta)[1:]
    return trace


def _baseline_pick(cfg: ExperimentConfig, history: pol.History, rng, true_cov):
    if cfg.policy == "oracle":
        return pol.oracle_select(true_cov, history, rng)
    if cfg.policy == "empirical":
        return pol.empirical_cov_select(history, rng)
    if cfg.policy == "greedy":
        return pol.greedy_completion_select(history, cfg.greedy_rank or cfg.K_model)
    return pol.random_select(history, rng)


def run_synthetic(config: ExperimentConfig, run: int = 0) -> RunTrace:
    """Generate a synthetic matrix for ``(config.seed, K_true, run)`` and run ``config.policy`` on it.

    The matrix depends only on the seed, rank and run index, so every policy
    sees the same matrices.
    """
    if config.K_true is None:
        raise ValueError("synthetic runs need K_true")
    w_dist = config.w_dist
    if w_dist == "alternate":
        w_dist = W_DISTS[run % 2]
    rng = _stream(config.seed, "matrix", config.K_true, run)
    W, M = synth_generate(config.D, config.N, config.K_true, w_dist, config.sigma, rng)
    cfg = replace(config, seed=int(_stream(config.seed, "run", config.K_true, run).integers(2**62)))
    env = Environment(M, config.noise_sigma, config.beta, _stream(cfg.seed, "noise"))
    trace = run_experiment(cfg, env, true_cov=column_covariance(W, config.sigma))
    trace.meta.update(run=run, K_true=config.K_true, w_dist=w_dist)
    return trace


def aggregate_regret(traces) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of cumulative regret across runs, truncated to the shortest trace."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to aggregate")
    T = min(len(t) for t in traces)
    R = np.stack([t.cum_regret[:T] for t in traces])
    mean = R.mean(axis=0)
    se = R.std(axis=0, ddof=1) / math.sqrt(len(traces)) if len(traces) > 1 else np.zeros(T)
    return mean, se
