"""Stochastic variational inference for the gamma-process factor model.

The variational family is mean-field log-normal: every positive parameter
``theta_i = exp(u_i)`` with ``u_i ~ N(mu_i, exp(log_scale_i)^2)``.  Gradients
use the reparametrisation ``u = mu + exp(log_scale) * z``; the entropy of the
log-normal family is added in closed form, so only ``E_q[log p(theta, data)]``
is estimated by Monte Carlo.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import ColumnBatch, FactorModel, FactorParams, as_batch, log_joint_batch, unpack

log = logging.getLogger(__name__)

_HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)
# MAP ascent in theta space can push unused loadings toward zero without bound;
# flooring the log-parameters keeps exp(u) away from underflow.
LOG_PARAM_FLOOR = -30.0


@dataclass(frozen=True)
class VariationalPosterior:
    D: int
    K: int
    mu: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        P = self.D * self.K + self.K + 3
        mu = np.asarray(self.mu, dtype=float)
        ls = np.asarray(self.log_scale, dtype=float)
        if mu.shape != (P,) or ls.shape != (P,):
            raise ValueError(f"mu and log_scale must both have length D*K+K+3={P}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_scale", ls)

    @classmethod
    def centered_at(cls, params: FactorParams, log_scale: float = math.log(0.1)) -> "VariationalPosterior":
        mu = params.to_log_vector()
        return cls(params.D, params.K, mu, np.full(mu.shape, float(log_scale)))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def coordinates(self) -> list[str]:
        names = [f"W[{d},{k}]" for d in range(self.D) for k in range(self.K)]
        names += [f"r[{k}]" for k in range(self.K)]
        return names + ["gamma", "gamma0", "c0"]

    def mean(self) -> np.ndarray:
        """Posterior mean of every parameter (log-normal mean)."""
        return np.exp(self.mu + 0.5 * self.scale**2)

    def mean_params(self, sigma: float) -> FactorParams:
        return FactorParams.from_log_vector(np.log(self.mean()), self.D, self.K, sigma)

    def mean_rates(self) -> np.ndarray:
        _, r, _ = unpack(self.mean(), self.D, self.K)
        return r

    def entropy(self) -> float:
        """Entropy of the log-normal family in parameter space."""
        return float(np.sum(self.mu + self.log_scale) + self.mu.size * _HALF_LOG_2PIE)


@dataclass(frozen=True)
class AdaDeltaState:
    rho: float
    eps: float
    acc_grad_sq: np.ndarray
    acc_step_sq: np.ndarray

    @classmethod
    def zeros(cls, n: int, rho: float = 0.95, eps: float = 1e-6) -> "AdaDeltaState":
        return cls(rho, eps, np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class SviConfig:
    n_mc_samples: int = 8
    max_iters: int = 5000
    convergence_window: int = 50
    convergence_rel_tol: float = 1e-4
    rho: float = 0.95
    eps: float = 1e-6
    seed: int = 0
    map_iters: int = 2000
    init_log_scale: float = math.log(0.1)
    trace_path: str | None = None

    def __post_init__(self):
        if self.n_mc_samples < 1 or self.max_iters < 1 or self.convergence_window < 1 or self.map_iters < 1:
            raise ValueError("sample counts, iteration limits and window must be positive")
        if not 0 < self.convergence_rel_tol < 1:
            raise ValueError("convergence_rel_tol must lie in (0, 1)")
        if not 0 < self.rho < 1 or not self.eps > 0:
            raise ValueError("AdaDelta needs 0 < rho < 1 and eps > 0")


@dataclass
class FitResult:
    posterior: VariationalPosterior
    map_params: FactorParams
    elbo_trace: np.ndarray
    converged: bool
    n_iter: int
    extra: dict = field(default_factory=dict)


def adadelta_step(state: AdaDeltaState, grad: np.ndarray):
    """One AdaDelta update; returns the signed step (to be added for ascent) and the new state."""
    g = np.asarray(grad, dtype=float)
    rho, eps = state.rho, state.eps
    acc_g = rho * state.acc_grad_sq + (1.0 - rho) * g * g
    step = g * np.sqrt(state.acc_step_sq + eps) / np.sqrt(acc_g + eps)
    acc_s = rho * state.acc_step_sq + (1.0 - rho) * step * step
    return step, replace(state, acc_grad_sq=acc_g, acc_step_sq=acc_s)


def sample_params(q: VariationalPosterior, sigma: float, rng: np.random.Generator) -> FactorParams:
    z = rng.standard_normal(q.mu.size)
    return FactorParams.from_log_vector(q.mu + q.scale * z, q.D, q.K, sigma)


def _elbo_terms(q: VariationalPosterior, batch: ColumnBatch, sigma: float, z: np.ndarray, grad: bool = True):
    """ELBO estimate and its reparametrised gradient for fixed standard-normal draws ``z``."""
    s = q.scale
    u = q.mu[None, :] + s[None, :] * z
    val, g_theta = log_joint_batch(np.exp(u), batch, q.D, q.K, sigma, grad=grad)
    elbo = float(val.mean()) + q.entropy()
    if not grad:
        return elbo, None, None
    g_u = g_theta * np.exp(u)  # chain rule through theta = exp(u)
    g_mu = g_u.mean(axis=0) + 1.0
    g_ls = (g_u * z).mean(axis=0) * s + 1.0
    return elbo, g_mu, g_ls


def elbo_estimate(q: VariationalPosterior, columns, sigma: float, n: int, rng: np.random.Generator) -> float:
    """Monte Carlo ELBO: mean of ``log p(theta, data)`` over ``n`` draws plus the exact entropy of q."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = rng.standard_normal((n, q.mu.size))
    return _elbo_terms(q, as_batch(columns), sigma, z, grad=False)[0]


def elbo_gradient_estimate(q: VariationalPosterior, columns, sigma: float, n: int, rng: np.random.Generator):
    """Reparametrised ELBO gradient; returns ``(grad_mu, grad_log_scale)``.

    The entropy contribution (``+1`` per coordinate for both ``mu`` and
    ``log_scale``) is analytic; the rest averages ``n`` draws.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    z = rng.standard_normal((n, q.mu.size))
    _, g_mu, g_ls = _elbo_terms(q, as_batch(columns), sigma, z)
    return g_mu, g_ls


def map_objective(u: np.ndarray, batch: ColumnBatch, model: FactorModel, jacobian: bool = False):
    """Log joint at ``theta = exp(u)`` and its gradient with respect to ``u``.

    With ``jacobian`` the log-Jacobian ``sum(u)`` is added, giving the log
    density of the log-parameters (the zero-width limit of the ELBO).
    """
    u = np.atleast_2d(u)
    theta = np.exp(u)
    val, g = log_joint_batch(theta, batch, model.D, model.K, model.sigma)
    g = g * theta
    if jacobian:
        return val + u.sum(axis=1), g + 1.0
    return val, g


def default_start(batch: ColumnBatch, model: FactorModel, rng: np.random.Generator) -> np.ndarray:
    """Random log-parameter start scaled to the observed second moment."""
    D, K = model.D, model.K
    v = float(np.mean(batch.vals**2)) if batch.n_obs else 1.0
    w0 = math.sqrt(max(v - model.sigma**2, 0.1 * v, 1e-6) / K)
    logW = math.log(w0) + 0.3 * rng.standard_normal(D * K)
    logr = np.full(K, math.log(w0))
    return np.concatenate([logW, logr, np.zeros(3)])


def map_initialize(
    columns,
    model: FactorModel,
    iters: int,
    rng: np.random.Generator,
    start: np.ndarray | None = None,
    rho: float = 0.95,
    eps: float = 1e-6,
) -> FactorParams:
    """Approximate MAP estimate by AdaDelta ascent in log-parameter space.

    Starts from ``start`` (log-parameter vector) or a random data-scaled point and
    returns the best iterate seen, so the objective never ends below the start.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    batch = as_batch(columns)
    u = default_start(batch, model, rng) if start is None else np.array(start, dtype=float)
    state = AdaDeltaState.zeros(u.size, rho, eps)
    best_u, best_f = u.copy(), -np.inf
    for _ in range(iters):
        f, g = map_objective(u, batch, model)
        f, g = float(f[0]), g[0]
        if f > best_f:
            best_f, best_u = f, u.copy()
        step, state = adadelta_step(state, g)
        u = np.maximum(u + step, LOG_PARAM_FLOOR)
    f = float(map_objective(u, batch, model)[0][0])
    if f > best_f:
        best_u = u
    return FactorParams.from_log_vector(best_u, model.D, model.K, model.sigma)


def fit(
    columns,
    model: FactorModel,
    config: SviConfig = SviConfig(),
    rng: np.random.Generator | None = None,
    start: np.ndarray | None = None,
) -> FitResult:
    """MAP-centred initialisation followed by AdaDelta SVI on the ELBO.

    Stops after ``max_iters`` or when the moving average of the ELBO over
    ``convergence_window`` iterations changes by less than
    ``convergence_rel_tol`` (relative) from one iteration to the next.  Non-convergence is reported through
    ``FitResult.converged`` rather than raised.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    batch = as_batch(columns)
    map_params = map_initialize(batch, model, config.map_iters, rng, start=start, rho=config.rho, eps=config.eps)
    q = VariationalPosterior.centered_at(map_params, config.init_log_scale)
    P = q.mu.size
    st_mu = AdaDeltaState.zeros(P, config.rho, config.eps)
    st_ls = AdaDeltaState.zeros(P, config.rho, config.eps)
    trace = np.empty(config.max_iters)
    win = config.convergence_window
    converged = False
    fh = open(config.trace_path, "w") if config.trace_path else None
    try:
        if fh:
            fh.write("iter,elbo_estimate,step_norm\n")
        it = 0
        for it in range(1, config.max_iters + 1):
            z = rng.standard_normal((config.n_mc_samples, P))
            elbo, g_mu, g_ls = _elbo_terms(q, batch, model.sigma, z)
            d_mu, st_mu = adadelta_step(st_mu, g_mu)
            d_ls, st_ls = adadelta_step(st_ls, g_ls)
            q = VariationalPosterior(q.D, q.K, q.mu + d_mu, q.log_scale + d_ls)
            trace[it - 1] = elbo
            if fh:
                fh.write(f"{it},{elbo!r},{math.sqrt(float(d_mu @ d_mu + d_ls @ d_ls))!r}\n")
            if it > win:
                # consecutive window means differ by (newest - dropped) / win
                new = trace[it - win : it].mean()
                if abs(trace[it - 1] - trace[it - 1 - win]) < config.convergence_rel_tol * win * abs(new):
                    converged = True
                    break
    finally:
        if fh:
            fh.close()
    if not converged:
        log.debug("SVI stopped at max_iters=%d without meeting the convergence test", config.max_iters)
    return FitResult(q, map_params, trace[:it].copy(), converged, it)
