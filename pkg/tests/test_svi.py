import math

import numpy as np
import pytest
from scipy.special import logsumexp

from seqmc.model import ColumnBatch, FactorModel, FactorParams, log_joint, log_joint_batch
from seqmc.svi import (
    AdaDeltaState,
    SviConfig,
    VariationalPosterior,
    adadelta_step,
    elbo_estimate,
    elbo_gradient_estimate,
    fit,
    map_initialize,
    map_objective,
    sample_params,
)


def small_problem(seed=0, D=3, K=2, N=6, frac=0.7, sigma=0.5):
    rng = np.random.default_rng(seed)
    W = rng.random((D, 1))
    M = W @ rng.standard_normal((1, N)) + sigma * rng.standard_normal((D, N))
    mask = rng.random((D, N)) < frac
    return ColumnBatch.from_masked(M, mask), FactorModel(D, K, sigma)


def posterior(D, K, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    P = D * K + K + 3
    return VariationalPosterior(D, K, 0.3 * rng.standard_normal(P) - 0.5, np.full(P, math.log(scale)))


# sample_params


def test_sample_params_unit():
    q = VariationalPosterior(2, 1, np.zeros(6), np.full(6, -np.inf))
    p = sample_params(q, 0.3, np.random.default_rng(0))
    assert np.all(p.W == 1.0) and np.all(p.r == 1.0)
    assert p.gamma == p.gamma0 == p.c0 == 1.0 and p.sigma == 0.3


def test_sample_params_degenerate_gamma():
    mu = np.zeros(6)
    mu[3] = math.log(2.0)  # layout: W (2), r (1), gamma, gamma0, c0
    q = VariationalPosterior(2, 1, mu, np.full(6, -np.inf))
    assert sample_params(q, 1.0, np.random.default_rng(0)).gamma == 2.0


def test_sample_params_lognormal_mean():
    q = VariationalPosterior(1, 1, np.zeros(5), np.zeros(5))
    rng = np.random.default_rng(1)
    x = np.array([sample_params(q, 1.0, rng).W[0, 0] for _ in range(100_000)])
    se = x.std() / math.sqrt(x.size)
    assert abs(x.mean() - math.exp(0.5)) < 3 * se


def test_posterior_shape_checks():
    with pytest.raises(ValueError):
        VariationalPosterior(2, 2, np.zeros(8), np.zeros(9))
    q = posterior(2, 2)
    assert len(q.coordinates()) == q.mu.size == 2 * 2 + 2 + 3


# elbo


def test_elbo_zero_observations_is_nonpositive():
    q = posterior(2, 2, seed=3)
    empty = ColumnBatch(2, [], [], [])
    rng = np.random.default_rng(4)
    vals = np.array([elbo_estimate(q, empty, 0.5, 1, rng) for _ in range(10_000)])
    assert vals.mean() <= 3 * vals.std() / math.sqrt(vals.size)


def test_elbo_deterministic():
    batch, model = small_problem()
    q = posterior(model.D, model.K)
    a = elbo_estimate(q, batch, model.sigma, 16, np.random.default_rng(5))
    b = elbo_estimate(q, batch, model.sigma, 16, np.random.default_rng(5))
    assert a == b


def test_elbo_monte_carlo_rate():
    batch, model = small_problem(1)
    q = posterior(model.D, model.K, seed=1)
    rng = np.random.default_rng(6)
    sd1 = np.std([elbo_estimate(q, batch, model.sigma, 25, rng) for _ in range(50)])
    sd4 = np.std([elbo_estimate(q, batch, model.sigma, 100, rng) for _ in range(50)])
    assert sd4 / sd1 == pytest.approx(0.5, rel=0.2 + 0.2)  # 50 repetitions: sd of sd ~ 10% each


def test_elbo_below_importance_weighted_bound():
    # ELBO <= multi-sample importance bound <= log evidence
    batch, model = small_problem(2, D=1, K=1, N=4, frac=1.0)
    q = posterior(1, 1, seed=2, scale=0.5)
    rng = np.random.default_rng(7)
    z = rng.standard_normal((200_000, q.mu.size))
    u = q.mu + q.scale * z
    lp, _ = log_joint_batch(np.exp(u), batch, 1, 1, model.sigma, grad=False)
    # log q of theta = log normal density of u minus the Jacobian sum(u)
    lq = (-0.5 * z**2 - q.log_scale - 0.5 * math.log(2 * math.pi)).sum(axis=1) - u.sum(axis=1)
    logw = lp - lq
    iw = logsumexp(logw) - math.log(logw.size)
    elbo = elbo_estimate(q, batch, model.sigma, 20_000, rng)
    assert elbo <= iw + 3 * logw.std() / math.sqrt(20_000)


def test_analytic_entropy_matches_sampled_term():
    batch, model = small_problem(3)
    q = posterior(model.D, model.K, seed=3)
    rng = np.random.default_rng(8)
    z = rng.standard_normal((100_000, q.mu.size))
    u = q.mu + q.scale * z
    lq = (-0.5 * z**2 - q.log_scale - 0.5 * math.log(2 * math.pi)).sum(axis=1) - u.sum(axis=1)
    assert -lq.mean() == pytest.approx(q.entropy(), abs=4 * lq.std() / math.sqrt(lq.size))


# gradients


def test_gradient_map_limit():
    batch, model = small_problem(4)
    q = VariationalPosterior(model.D, model.K, posterior(model.D, model.K, 4).mu, np.full(model.n_params, math.log(1e-6)))
    g_mu, _ = elbo_gradient_estimate(q, batch, model.sigma, 4, np.random.default_rng(9))
    _, g_ref = map_objective(q.mu, batch, model, jacobian=True)
    np.testing.assert_allclose(g_mu, g_ref[0], rtol=1e-2, atol=1e-6)


def test_gradient_finite_difference_small():
    batch, model = small_problem(5, D=2, K=1, N=4)
    q = posterior(2, 1, seed=5, scale=0.2)
    n, seed, h = 4000, 11, 1e-4
    g_mu, g_ls = elbo_gradient_estimate(q, batch, model.sigma, n, np.random.default_rng(seed))
    for which, g in (("mu", g_mu), ("ls", g_ls)):
        for i in range(q.mu.size):
            vp = {"mu": q.mu.copy(), "ls": q.log_scale.copy()}
            vm = {"mu": q.mu.copy(), "ls": q.log_scale.copy()}
            vp[which][i] += h
            vm[which][i] -= h
            fp = elbo_estimate(VariationalPosterior(2, 1, vp["mu"], vp["ls"]), batch, model.sigma, n, np.random.default_rng(seed))
            fm = elbo_estimate(VariationalPosterior(2, 1, vm["mu"], vm["ls"]), batch, model.sigma, n, np.random.default_rng(seed))
            fd = (fp - fm) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-3, abs=1e-5), (which, i)


def test_gradient_deterministic():
    batch, model = small_problem(6)
    q = posterior(model.D, model.K, 6)
    a = elbo_gradient_estimate(q, batch, model.sigma, 8, np.random.default_rng(1))
    b = elbo_gradient_estimate(q, batch, model.sigma, 8, np.random.default_rng(1))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_gradient_unbiased():
    batch, model = small_problem(7, D=2, K=1, N=4)
    q = posterior(2, 1, seed=7, scale=0.2)
    rng = np.random.default_rng(12)
    singles = np.array([np.concatenate(elbo_gradient_estimate(q, batch, model.sigma, 1, rng)) for _ in range(10_000)])
    big = np.concatenate(elbo_gradient_estimate(q, batch, model.sigma, 10_000, rng))
    se = singles.std(axis=0) / math.sqrt(singles.shape[0])
    assert np.all(np.abs(singles.mean(axis=0) - big) <= 3 * math.sqrt(2) * se + 1e-12)


@pytest.mark.parametrize("n", [0, -1])
def test_estimators_reject_bad_n(n):
    batch, model = small_problem()
    q = posterior(model.D, model.K)
    with pytest.raises(ValueError):
        elbo_estimate(q, batch, model.sigma, n, np.random.default_rng(0))
    with pytest.raises(ValueError):
        elbo_gradient_estimate(q, batch, model.sigma, n, np.random.default_rng(0))


# adadelta


def test_adadelta_first_step():
    step, st = adadelta_step(AdaDeltaState.zeros(1), np.array([1.0]))
    assert step[0] == pytest.approx(math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6), rel=1e-12)
    assert step[0] == pytest.approx(0.004472, abs=1e-6)
    assert st.acc_grad_sq[0] == pytest.approx(0.05)


def test_adadelta_zero_gradient_decay():
    st = AdaDeltaState(0.95, 1e-6, np.array([2.0, 1.0]), np.array([0.5, 0.25]))
    step, new = adadelta_step(st, np.zeros(2))
    assert np.all(step == 0)
    np.testing.assert_allclose(new.acc_grad_sq, 0.95 * st.acc_grad_sq)
    np.testing.assert_allclose(new.acc_step_sq, 0.95 * st.acc_step_sq)


def test_adadelta_scale_invariance_large_c():
    g = np.array([0.3, -2.0, 5.0])
    s1, _ = adadelta_step(AdaDeltaState.zeros(3), g)
    s2, _ = adadelta_step(AdaDeltaState.zeros(3), 1e3 * g)
    # both are close to sign(g) * sqrt(eps / (1 - rho)); the ratio tends to 1
    np.testing.assert_allclose(s2 / s1, 1.0, rtol=0.05)
    assert np.all(np.sign(s2) == np.sign(g))


def test_adadelta_fuzz_stays_finite():
    rng = np.random.default_rng(13)
    st = AdaDeltaState.zeros(4)
    for _ in range(10_000):
        g = rng.uniform(-1e6, 1e6, 4) * (rng.random(4) < 0.7)
        step, st = adadelta_step(st, g)
        assert np.all(np.isfinite(step))
    assert np.all(st.acc_grad_sq >= 0) and np.all(st.acc_step_sq >= 0)
    assert np.all(np.isfinite(st.acc_grad_sq)) and np.all(np.isfinite(st.acc_step_sq))


# MAP


def test_map_improves_on_start():
    batch, model = small_problem(8)
    rng = np.random.default_rng(14)
    start = rng.standard_normal(model.n_params) * 0.5
    out = map_initialize(batch, model, 50, rng, start=start)
    p0 = FactorParams.from_log_vector(start, model.D, model.K, model.sigma)
    assert log_joint(out, batch) >= log_joint(p0, batch)
    with pytest.raises(ValueError):
        map_initialize(batch, model, 0, rng)


def test_map_recovers_rank_one_structure():
    corrs = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        D, N = 10, 40
        w = rng.random((D, 1)) + 0.2
        M = w @ rng.standard_normal((1, N)) + 0.3 * rng.standard_normal((D, N))
        batch = ColumnBatch.from_masked(M, np.ones((D, N), bool))
        model = FactorModel(D, 3, 0.3)
        est = map_initialize(batch, model, 400, rng)
        off = ~np.eye(D, dtype=bool)
        corrs.append(np.corrcoef((est.W @ est.W.T)[off], (w @ w.T)[off])[0, 1])
    assert np.mean(corrs) > 0.5


def test_map_without_data_matches_multistart():
    # the prior density is unbounded as loadings shrink, so every start runs
    # down to the log-parameter floor; long runs agree across restarts
    model = FactorModel(3, 2, 0.5)
    empty = ColumnBatch(3, [], [], [])
    rng = np.random.default_rng(15)
    out = log_joint(map_initialize(empty, model, 5000, rng), empty)
    best = max(
        log_joint(map_initialize(empty, model, 5000, np.random.default_rng(1000 + i)), empty) for i in range(20)
    )
    assert out >= best - 0.05 * abs(best)


# fit


def test_fit_elbo_trend_and_determinism(tmp_path):
    rng = np.random.default_rng(16)
    D, N = 10, 30
    W = rng.random((D, 3))
    M = W @ rng.standard_normal((3, N)) + 0.3 * rng.standard_normal((D, N))
    batch = ColumnBatch.from_masked(M, rng.random((D, N)) < 0.6)
    model = FactorModel(D, 3, 0.3)
    cfg = SviConfig(max_iters=400, map_iters=100, seed=3, trace_path=str(tmp_path / "t.csv"))
    a = fit(batch, model, cfg)
    b = fit(batch, model, SviConfig(max_iters=400, map_iters=100, seed=3))
    np.testing.assert_array_equal(a.posterior.mu, b.posterior.mu)
    np.testing.assert_array_equal(a.posterior.log_scale, b.posterior.log_scale)
    sm = np.convolve(a.elbo_trace, np.ones(50) / 50, mode="valid")
    assert sm[-1] >= sm[0]
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iter,elbo_estimate,step_norm" and len(lines) == a.n_iter + 1


def test_fit_reports_nonconvergence():
    batch, model = small_problem(9)
    res = fit(batch, model, SviConfig(max_iters=5, map_iters=5, convergence_window=50))
    assert not res.converged and res.n_iter == 5


def test_svi_config_validation():
    with pytest.raises(ValueError):
        SviConfig(n_mc_samples=0)
    with pytest.raises(ValueError):
        SviConfig(convergence_rel_tol=1.5)
    with pytest.raises(ValueError):
        SviConfig(rho=1.0)
