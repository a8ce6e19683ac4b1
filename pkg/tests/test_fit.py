import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import simulate_sample
from warpfield.fit import (FitContext, FitError, FittedModel, coefficient_uncertainty, fit,
                           inner_newton, log_det_plus, outer_optimize, penalized_loglik,
                           reml_objective)
from warpfield.gplik import CovModel, CovParams, SampleCov
from warpfield.postfit import predict_dspace, predict_vcov
from warpfield.warp import Warp, WarpSpec


@pytest.fixture(scope="module")
def expand_toy():
    rng = np.random.default_rng(7)
    x = rng.uniform(size=(10, 2))
    g = np.column_stack([2 * x, 0.8 * np.sin(3 * x[:, 0])])
    sample, _ = simulate_sample(g, 200, CovParams(1.0, 0.05, 1.0), seed=8, coords=x)
    warp = Warp(WarpSpec("expand", (6,)), x)
    ctx = FitContext(warp, CovModel(), sample)
    start = np.r_[np.log(2), np.log(2), 0, np.zeros(6), CovModel().initial(sample.V)]
    return ctx, start


@pytest.fixture(scope="module")
def deform_toy():
    rng = np.random.default_rng(11)
    x = rng.uniform(size=(10, 2))
    g = np.column_stack([2 * x[:, 0] + 0.5 * x[:, 1] ** 2, 2 * x[:, 1]])
    sample, _ = simulate_sample(g, 300, CovParams(1.0, 0.05, 1.0), seed=12, coords=x)
    warp = Warp(WarpSpec("deform", (6, 6)), x)
    ctx = FitContext(warp, CovModel(), sample)
    start = np.r_[np.log(2), np.log(2), 0, np.zeros(6), CovModel().initial(sample.V)]
    return ctx, start


def quad_oracle(beta, lam, ctx):
    S = np.zeros((ctx.n_beta, ctx.n_beta))
    for j, b in enumerate(ctx.penalties.blocks):
        S[b.start:b.stop, b.start:b.stop] += lam[j] * b.matrix
    return ctx.lik.loglik(beta) - 0.5 * beta @ S @ beta


class TestPenalizedLoglik:
    def test_dense_oracle(self, deform_toy, rng):
        ctx, start = deform_toy
        for _ in range(5):
            beta = start + rng.normal(scale=0.1, size=start.size)
            lam = np.exp(rng.normal(size=2))
            assert penalized_loglik(beta, lam, ctx) == pytest.approx(quad_oracle(beta, lam, ctx),
                                                                     abs=1e-10)

    def test_zero_lambda(self, deform_toy, rng):
        ctx, start = deform_toy
        beta = start + rng.normal(scale=0.1, size=start.size)
        assert penalized_loglik(beta, [1e-300, 1e-300], ctx) == pytest.approx(
            ctx.lik.loglik(beta), abs=1e-10)

    def test_zero_splines(self, deform_toy):
        ctx, start = deform_toy
        assert penalized_loglik(start, [1e6, 1e6], ctx) == ctx.lik(start, order=0)[0]

    def test_M_p_deform(self):
        x = np.random.default_rng(0).uniform(size=(12, 2))
        ctx = FitContext(Warp(WarpSpec("deform", (10, 10)), x), CovModel(),
                         SampleCov(np.eye(12), 10, x))
        _, Mp = log_det_plus(ctx.S_lambda([1.0, 2.0]))
        assert Mp == 3 + 3


class _Quadratic:
    """Concave quadratic objective with the FitContext calling convention."""

    def __init__(self, A, b):
        self.A, self.b = A, b
        self.lower = np.full(len(b), -np.inf)
        self.upper = np.full(len(b), np.inf)

    def clip(self, beta):
        return beta

    def __call__(self, beta, lam, order=2):
        val = -0.5 * beta @ self.A @ beta + self.b @ beta
        return val, self.b - self.A @ beta, -self.A


class TestInnerNewton:
    def test_quadratic_one_step(self, rng):
        B = rng.normal(size=(6, 6))
        q = _Quadratic(B @ B.T + np.eye(6), rng.normal(size=6))
        nr = inner_newton(np.zeros(0), np.zeros(6), q)
        np.testing.assert_allclose(nr.beta, np.linalg.solve(q.A, q.b), atol=1e-10)
        assert nr.iterations == 1 and nr.converged

    def test_simplex_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(size=(5, 2))
        sample, _ = simulate_sample(x * [2.0, 1.0], 200, CovParams(1.0, 0.2, 1.0), seed=6,
                                    coords=x)
        ctx = FitContext(Warp(WarpSpec("aniso"), x), CovModel(), sample)
        start = np.r_[np.log(2), 0, CovModel().initial(sample.V)]
        nr = inner_newton(np.zeros(0), start, ctx)
        obj = lambda b: -penalized_loglik(ctx.clip(b), np.zeros(0), ctx)  # noqa: E731
        best = np.inf
        b0 = start
        for _ in range(4):
            res = minimize(obj, b0, method="Nelder-Mead",
                           options={"maxiter": 20000, "maxfev": 20000, "xatol": 1e-9,
                                    "fatol": 1e-11})
            b0, best = res.x, min(best, res.fun)
        assert nr.converged
        assert abs(nr.value - (-best)) <= 1e-4

    def test_monotone(self, deform_toy):
        ctx, start = deform_toy
        nr = inner_newton([1.0, 1.0], start, ctx)
        assert nr.value >= penalized_loglik(start, [1.0, 1.0], ctx)
        assert nr.converged
        assert np.abs(nr.grad).max() <= 1e-6 * (1 + abs(nr.value))

    def test_bad_start(self, deform_toy):
        ctx, start = deform_toy
        bad = start.copy()
        bad[-3] = 1e4
        with pytest.raises(FitError):
            inner_newton([1.0, 1.0], bad, ctx)

    def test_non_increasing_in_lambda(self, deform_toy):
        ctx, start = deform_toy
        grid = np.exp(np.linspace(-4, 6, 6))
        for j in range(2):
            prev = np.inf
            beta = start
            for g in grid:
                lam = np.ones(2)
                lam[j] = g
                nr = inner_newton(lam, beta, ctx)
                beta = nr.beta
                assert nr.value <= prev + 1e-7
                prev = nr.value


class TestREML:
    def test_term_by_term(self, expand_toy):
        ctx, start = expand_toy
        basis = ctx.warp.bases[0]
        for loglam in np.linspace(-4, 8, 10):
            lam = np.array([np.exp(loglam)])
            r = reml_objective(lam, ctx, start)
            beta = r.newton.beta
            S = np.zeros((ctx.n_beta, ctx.n_beta))
            S[3:9, 3:9] = lam[0] * np.diag(np.abs(basis.Lambda_k))
            lp = ctx.lik.loglik(beta) - 0.5 * beta @ S @ beta
            ev = np.linalg.eigvalsh(S)
            pos = ev[ev > 1e-10 * ev.max()]
            Mp = ctx.n_beta - pos.size
            assert Mp == 3 + 3
            _, _, Hl = ctx.lik(beta)
            Hn = -(Hl - S)
            ld = np.linalg.slogdet(Hn + r.ridge * np.eye(ctx.n_beta))
            assert ld[0] == 1
            expected = lp + 0.5 * np.log(pos).sum() - 0.5 * ld[1] + 0.5 * Mp * np.log(2 * np.pi)
            assert r.value == pytest.approx(expected, abs=1e-8)

    def test_log_det_scaling(self, expand_toy):
        ctx, _ = expand_toy
        S = ctx.S_lambda([0.7])
        a, _ = log_det_plus(S)
        b, _ = log_det_plus(ctx.S_lambda([0.7 * 13.0]))
        assert b == pytest.approx(6 * np.log(13.0) + a, abs=1e-8)

    def test_log_det_plus_simple(self):
        val, Mp = log_det_plus(np.diag([2.0, 3.0, 0.0]))
        assert val == pytest.approx(np.log(6)) and Mp == 1

    def test_lambda_positive(self, expand_toy):
        ctx, start = expand_toy
        with pytest.raises(FitError):
            reml_objective([0.0], ctx, start)


@pytest.fixture(scope="module")
def outer(deform_toy):
    ctx, start = deform_toy
    return outer_optimize(ctx, start), ctx, start


class TestOuter:
    def test_first_order(self, outer):
        out, ctx, _ = outer
        rho = out.log_lambda
        h = 1e-3
        for j in range(2):
            if j in out.at_upper or j in out.at_lower:
                continue
            e = np.zeros(2)
            e[j] = h
            fp = reml_objective(np.exp(rho + e), ctx, out.reml.newton.beta).value
            fm = reml_objective(np.exp(rho - e), ctx, out.reml.newton.beta).value
            assert abs((fp - fm) / (2 * h)) <= 1e-3 * (1 + abs(out.reml.value))

    def test_history_monotone(self, outer):
        out, _, _ = outer
        assert np.all(np.diff(out.history) >= 0)

    def test_warm_start_independence(self, outer):
        out, ctx, start = outer
        lam = np.exp(out.log_lambda)
        cold = reml_objective(lam, ctx, start)
        assert abs(cold.value - out.reml.value) <= 1e-4

    def test_deterministic(self, outer):
        out, ctx, start = outer
        again = outer_optimize(ctx, start)
        np.testing.assert_array_equal(again.log_lambda, out.log_lambda)
        np.testing.assert_array_equal(again.reml.newton.beta, out.reml.newton.beta)

    def test_aniso_has_no_lambda(self, aniso_data):
        x, sample, _ = aniso_data
        ctx = FitContext(Warp(WarpSpec("aniso"), x), CovModel(), sample)
        with pytest.raises(FitError):
            outer_optimize(ctx, np.zeros(ctx.n_beta))


@pytest.fixture(scope="module")
def aniso(aniso_data):
    x, sample, _ = aniso_data
    return fit(x, sample, WarpSpec("aniso"))


class TestFit:
    def test_aniso_recovers_scales(self, aniso):
        a = aniso.alpha_hat()
        assert a[0] / a[1] == pytest.approx(4.0, rel=0.15)
        assert aniso.converged

    def test_gradient_at_optimum(self, aniso, aniso_data):
        ctx = FitContext(aniso.warp, aniso.cov, aniso_data[1])
        _, g, _ = ctx(aniso.beta, np.zeros(0))
        assert np.abs(g).max() <= 1e-5 * (1 + abs(aniso.loglik_value))

    def test_H_pd_and_inverse(self, aniso):
        C = coefficient_uncertainty(aniso)
        np.testing.assert_allclose(C @ aniso.H, np.eye(C.shape[0]), atol=1e-8)
        np.testing.assert_array_equal(aniso.H, aniso.H.T)

    def test_identity_H(self, aniso):
        m = FittedModel(aniso.spec, aniso.warp, aniso.cov, aniso.beta, aniso.lam,
                        np.eye(aniso.beta.size), None, 0.0, 0.0, 10, True)
        np.testing.assert_allclose(coefficient_uncertainty(m), np.eye(aniso.beta.size))

    def test_singular_H(self, aniso):
        H = np.zeros((aniso.beta.size,) * 2)
        m = FittedModel(aniso.spec, aniso.warp, aniso.cov, aniso.beta, aniso.lam, H, None,
                        0.0, 0.0, 10, True)
        with pytest.raises(FitError, match="smoothing|nugget"):
            coefficient_uncertainty(m)

    def test_standardize(self, aniso_data, aniso):
        x, sample, _ = aniso_data
        s = fit(x * 1000 + 5e5, sample, WarpSpec("aniso"), standardize=True)
        assert s.loglik_value == pytest.approx(aniso.loglik_value, abs=1e-5)
        a = predict_dspace(s, x * 1000 + 5e5).fitted
        b = predict_dspace(aniso, x).fitted
        # same map up to translation
        np.testing.assert_allclose(a - a.mean(0), b - b.mean(0), atol=1e-3)

    def test_rank_exceeds_sites(self, aniso_data):
        x, sample, _ = aniso_data
        with pytest.raises(Exception):
            fit(x, sample, WarpSpec("expand", (16,)))

    def test_correlation_mode(self, aniso_data):
        x, sample, _ = aniso_data
        m = fit(x, sample, WarpSpec("aniso"), correlation=True)
        assert m.cov_params.sigma2 == 1.0
        assert m.beta.size == 2 + 2


def test_bootstrap_se():
    # parametric bootstrap of an aniso fit on 6 sites
    rng = np.random.default_rng(21)
    x = rng.uniform(size=(6, 2))
    sample, _ = simulate_sample(x * [3.0, 1.0], 100, CovParams(1.0, 0.1, 1.0), seed=22, coords=x)
    model = fit(x, sample, WarpSpec("aniso"))
    new = np.array([x.mean(axis=0), 0.5 * (x[0] + x[1])])
    pred = predict_dspace(model, new, with_se=True)
    Sigma = predict_vcov(model)
    start = model.beta
    ctx_warp = model.warp
    draws = []
    boot = np.random.default_rng(23)
    for _ in range(200):
        Y = boot.multivariate_normal(np.zeros(6), Sigma, size=100, method="cholesky")
        s = SampleCov.from_observations(Y, x)
        ctx = FitContext(ctx_warp, model.cov, s)
        nr = inner_newton(np.zeros(0), start, ctx)
        draws.append(ctx_warp.transform(new, nr.beta[:2]))
    boot_se = np.std(draws, axis=0, ddof=1)
    np.testing.assert_allclose(pred.se, boot_se, rtol=0.25)
