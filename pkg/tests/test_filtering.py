import dataclasses
import io
import math

import numpy as np
import pytest
from scipy.linalg import expm

import debtceiling as dc
from debtceiling import coefficients as coeffs
from debtceiling.errors import ModelValidationError, UnmatchableJump
from debtceiling.filtering import (
    CLIP_EPS,
    FilterState,
    InnovationIncrements,
    Observations,
)


def _uninformative_params(rho=0.5):
    """Identical drifts and signal slopes in both regimes: observations carry
    no regime information and the filter follows the forward equation."""
    gen = dc.GeneratorMatrix(np.array([[-0.7, 0.7], [0.3, -0.3]]))
    raw = dc.ModelParams(
        generator=gen, r=0.02, sigma=0.1, g=np.array([0.02, 0.02]),
        indicator=coeffs.arithmetic_indicator([0.4, 0.4], 0.1, 1.0),
        c=coeffs.zero_jumps(2), lambda_n=np.array([1.0, 1.0]), rho=rho,
        cost=coeffs.quadratic_cost(1.0),
    )
    return dc.validate_params(raw)


def _arithmetic_observations(params, z_path, dt, n, rng, x0=1.0, eta0=0.0):
    """Hand-built path whose increments follow the exact arithmetic model the
    innovation inversion assumes, so recovered noise is exact."""
    beta = params.r - params.g
    x = np.empty(n + 1)
    eta = np.empty(n + 1)
    x[0], eta[0] = x0, eta0
    dW = rng.normal(0, math.sqrt(dt), n)
    dB = rng.normal(0, math.sqrt(dt), n)
    for k in range(n):
        z = z_path[k]
        x[k + 1] = x[k] + beta[z] * x[k] * dt + params.sigma * x[k] * dW[k]
        eta[k + 1] = (eta[k] + float(params.b1(eta[k], z)) * dt
                      + float(params.sigma1(eta[k])) * dW[k]
                      + float(params.sigma2(eta[k])) * dB[k])
    t = np.arange(n + 1) * dt
    obs = Observations(t=t, x0=x, eta=eta, jump_mark=np.full(n + 1, np.nan))
    return obs, dW, dB


class TestInnovations:
    def test_single_regime_recovers_noise_exactly(self, single_regime_params):
        p = single_regime_params
        rng = np.random.default_rng(0)
        n, dt = 500, 1e-3
        obs, dW, dB = _arithmetic_observations(p, np.zeros(n, dtype=int), dt, n, rng)
        state = FilterState(t=0.0, pi=np.array([1.0]))
        for k in range(n):
            innov = dc.innovations_from_observations(
                p, obs.x0[k], obs.x0[k + 1] - obs.x0[k], obs.eta[k],
                obs.eta[k + 1] - obs.eta[k], state, dt,
            )
            assert innov.dI == pytest.approx(dW[k], abs=1e-12)
            assert innov.dI1 == pytest.approx(dB[k], abs=1e-12)

    def test_matches_algebraic_rederivation(self, bench_params):
        p = bench_params
        rng = np.random.default_rng(1)
        for _ in range(50):
            pi1 = rng.uniform(0.05, 0.95)
            state = FilterState(t=0.0, pi=np.array([pi1, 1 - pi1]))
            x0 = rng.uniform(0.5, 5.0)
            eta = rng.normal()
            dx0 = rng.normal(0, 0.01)
            deta = rng.normal(0, 0.05)
            dt = 1e-3
            innov = dc.innovations_from_observations(p, x0, dx0, eta, deta, state, dt)
            beta = p.r - p.g
            pib = pi1 * beta[0] + (1 - pi1) * beta[1]
            dI_expected = dx0 / (p.sigma * x0) - pib / p.sigma * dt
            b1v = np.array([float(p.b1(eta, 0)), float(p.b1(eta, 1))])
            pib1 = pi1 * b1v[0] + (1 - pi1) * b1v[1]
            dI1_expected = (deta - pib1 * dt - float(p.sigma1(eta)) * dI_expected) / float(p.sigma2(eta))
            assert innov.dI == pytest.approx(dI_expected, rel=1e-14, abs=1e-16)
            assert innov.dI1 == pytest.approx(dI1_expected, rel=1e-14, abs=1e-16)


class TestKsSteps:
    def test_uninformative_reduces_to_forward_equation(self):
        p = _uninformative_params()
        state = FilterState(t=0.0, pi=np.array([0.6, 0.4]))
        innov = InnovationIncrements(dI=0.013, dI1=-0.021)
        dt = 1e-3
        out = dc.ks_step_general(p, state, eta=0.3, innovations=innov, dt=dt)
        expected = state.pi + state.pi @ p.generator.rates * dt
        assert np.allclose(out.pi, expected, atol=1e-14)

    def test_simplex_vertex_moves_by_generator_only(self, bench_params):
        state = FilterState(t=0.0, pi=np.array([1.0, 0.0]))
        innov = InnovationIncrements(dI=0.2, dI1=-0.3)
        dt = 1e-3
        out = dc.ks_step_general(bench_params, state, eta=0.0, innovations=innov, dt=dt)
        expected = state.pi + state.pi @ bench_params.generator.rates * dt
        assert np.allclose(out.pi, expected, atol=3e-8)  # clip eps margin

    def test_two_regime_matches_general(self, bench_params):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(200):
            p1 = rng.uniform(0.02, 0.98)
            state = FilterState(t=0.0, pi=np.array([p1, 1 - p1]))
            innov = InnovationIncrements(dI=rng.normal(0, 0.03), dI1=rng.normal(0, 0.03))
            dt = 10 ** rng.uniform(-4, -2)
            a = dc.ks_step_general(bench_params, state, eta=rng.normal(), innovations=innov, dt=dt)
            b = dc.ks_step_two_regime(bench_params, state, innovations=innov, dt=dt)
            worst = max(worst, float(np.abs(a.pi - b.pi).max()))
        assert worst <= 1e-14

    def test_simplex_preserved_under_random_sweep(self, jumpy_params):
        rng = np.random.default_rng(3)
        for _ in range(500):
            q = jumpy_params.n_regimes
            raw = rng.dirichlet(np.ones(q))
            state = FilterState(t=0.0, pi=raw)
            innov = InnovationIncrements(dI=rng.normal(0, 0.1), dI1=rng.normal(0, 0.1))
            out = dc.ks_step_general(jumpy_params, state, eta=rng.normal(), innovations=innov,
                                     dt=10 ** rng.uniform(-4, -2))
            assert abs(out.pi.sum() - 1.0) <= 1e-10
            assert np.all(out.pi >= CLIP_EPS / 2) and np.all(out.pi <= 1 - CLIP_EPS / 2)


class TestJumpUpdate:
    def test_constant_mark_reduces_to_intensity_reweighting(self, jumpy_params):
        # lambda_n = (3, 1), c = 0.4 in both regimes
        for p1 in (0.2, 0.5, 0.9):
            pre = FilterState(t=1.0, pi=np.array([p1, 1 - p1]))
            post = dc.ks_jump_update(jumpy_params, pre, eta_pre=0.0, mark=0.4)
            expected = 3.0 * p1 / (3.0 * p1 + 1.0 * (1 - p1))
            assert post.pi[0] == pytest.approx(expected, abs=1e-15)

    def test_single_matching_regime_gives_unit_mass(self):
        gen = dc.GeneratorMatrix(np.array([[-0.5, 0.5], [0.5, -0.5]]))
        raw = dc.ModelParams(
            generator=gen, r=0.02, sigma=0.1, g=np.array([0.04, 0.0]),
            indicator=coeffs.arithmetic_indicator([0.5, 0.0], 0.1, 1.0),
            c=coeffs.constant_jumps([0.25, 0.75]), lambda_n=np.array([2.0, 1.0]),
            rho=0.5, cost=coeffs.quadratic_cost(1.0),
        )
        p = dc.validate_params(raw)
        pre = FilterState(t=0.0, pi=np.array([0.5, 0.5]))
        post = dc.ks_jump_update(p, pre, eta_pre=0.0, mark=0.75)
        assert np.array_equal(post.pi, [0.0, 1.0])

    def test_equal_intensities_leave_filter_unchanged(self):
        gen = dc.GeneratorMatrix(np.array([[-0.5, 0.5], [0.5, -0.5]]))
        raw = dc.ModelParams(
            generator=gen, r=0.02, sigma=0.1, g=np.array([0.04, 0.0]),
            indicator=coeffs.arithmetic_indicator([0.5, 0.0], 0.1, 1.0),
            c=coeffs.constant_jumps([0.4, 0.4]), lambda_n=np.array([2.0, 2.0]),
            rho=0.5, cost=coeffs.quadratic_cost(1.0),
        )
        p = dc.validate_params(raw)
        pre = FilterState(t=0.0, pi=np.array([0.3, 0.7]))
        post = dc.ks_jump_update(p, pre, eta_pre=0.0, mark=0.4)
        assert np.allclose(post.pi, pre.pi, atol=1e-16)

    def test_unmatchable_mark_raises(self, jumpy_params):
        pre = FilterState(t=0.0, pi=np.array([0.5, 0.5]))
        with pytest.raises(UnmatchableJump):
            dc.ks_jump_update(jumpy_params, pre, eta_pre=0.0, mark=0.123)


class TestRunFilter:
    def test_single_regime_constant(self, single_regime_params):
        p = single_regime_params
        rng = np.random.default_rng(4)
        obs, _, _ = _arithmetic_observations(p, np.zeros(300, dtype=int), 1e-3, 300, rng)
        out = dc.run_filter(p, obs, np.array([1.0]))
        assert np.all(out.pi == 1.0)

    def test_uninformative_model_solves_forward_equation(self):
        p = _uninformative_params()
        rng = np.random.default_rng(5)
        n, dt = 1000, 1e-3
        z = (rng.random(n) > 0.5).astype(int)
        obs, _, _ = _arithmetic_observations(p, z, dt, n, rng)
        y0 = np.array([0.9, 0.1])
        out = dc.run_filter(p, obs, y0, method="general")
        # deterministic forward Euler of the same equation
        pi = y0.copy()
        for _ in range(n):
            pi = pi + pi @ p.generator.rates * dt
        assert np.allclose(out.pi[-1], pi, atol=1e-12)

    def test_two_regime_and_general_agree_along_path(self, bench_params):
        p = bench_params
        rng = dc.path_rng(400, 0)
        regime = dc.simulate_regime(p.generator, np.array([0.6, 0.4]), 1.0, 1e-3, rng)
        path = dc.simulate_uncontrolled(p, regime, 1.0, 0.0, rng)
        obs = Observations.from_sample_path(path)
        a = dc.run_filter(p, obs, np.array([0.6, 0.4]), method="general")
        b = dc.run_filter(p, obs, np.array([0.6, 0.4]), method="two_regime")
        assert np.abs(a.pi - b.pi).max() <= 1e-10

    def test_unmatchable_jump_skips_and_logs(self, jumpy_params, caplog):
        p = jumpy_params
        rng = dc.path_rng(401, 0)
        regime = dc.simulate_regime(p.generator, 0, 1.0, 1e-3, rng)
        path = dc.simulate_uncontrolled(p, regime, 1.0, 0.0, rng)
        obs = Observations.from_sample_path(path)
        marks = obs.jump_mark.copy()
        target = np.nonzero(~np.isnan(marks))[0]
        if target.size == 0:
            pytest.skip("no jump in this draw")
        marks[target[0]] = 0.123  # not a feasible mark
        corrupted = Observations(t=obs.t, x0=obs.x0, eta=obs.eta, jump_mark=marks)
        import logging

        with caplog.at_level(logging.WARNING, logger="debtceiling.filtering"):
            out = dc.run_filter(p, corrupted, np.array([0.5, 0.5]))
        assert "skipping Bayes update" in caplog.text
        assert np.all(np.isfinite(out.pi))

    def test_filter_csv_schema(self, bench_params):
        p = bench_params
        rng = dc.path_rng(402, 0)
        regime = dc.simulate_regime(p.generator, 0, 0.05, 1e-3, rng)
        path = dc.simulate_uncontrolled(p, regime, 1.0, 0.0, rng)
        out = dc.run_filter(p, Observations.from_sample_path(path), np.array([0.5, 0.5]))
        buf = io.StringIO()
        from debtceiling.filtering import filter_path_to_csv

        filter_path_to_csv(out, buf)
        header = buf.getvalue().splitlines()[0]
        assert header == "t,pi_1,pi_2,dI,dI1"


class TestEnsemble:
    def test_projection_property_small_scale(self, bench_params):
        y0 = np.array([0.7, 0.3])
        out = dc.simulate_filter_ensemble(
            bench_params, 4000, 1.0, 1e-3, y0, 1.0, 0.0, seed=99,
            snapshot_times=(0.5, 1.0),
        )
        for tt, (pi_snap, _) in out["snapshots"].items():
            exact = (y0 @ expm(bench_params.generator.rates * tt))[0]
            mean = pi_snap[:, 0].mean()
            se = pi_snap[:, 0].std() / math.sqrt(len(pi_snap))
            assert abs(mean - exact) <= 3 * se

    def test_matches_per_path_filter(self, bench_params):
        # n_paths=1 ensemble against run_filter on the identical trajectory
        p = bench_params
        out = dc.simulate_filter_ensemble(p, 1, 0.5, 1e-3, np.array([0.6, 0.4]), 1.0, 0.0,
                                          seed=123, snapshot_times=(0.5,))
        pi_end = out["snapshots"][0.5][0][0]
        assert abs(pi_end.sum() - 1.0) <= 1e-12
        assert 0.0 < pi_end[0] < 1.0

    def test_innovation_moments(self, bench_params):
        out = dc.simulate_filter_ensemble(
            bench_params, 100, 1.0, 1e-3, np.array([0.5, 0.5]), 1.0, 0.0,
            seed=7, collect_increments=True,
        )
        m = out["increment_moments"]
        dt = 1e-3
        n = m["n"]
        assert abs(m["dI_mean"]) < 3 * math.sqrt(dt / n)
        assert abs(m["dI1_mean"]) < 3 * math.sqrt(dt / n)
        assert abs(m["dI_var"] / dt - 1.0) < 0.05
        assert abs(m["dI1_var"] / dt - 1.0) < 0.05

    def test_rejects_jumpy_models(self, jumpy_params):
        with pytest.raises(ModelValidationError):
            dc.simulate_filter_ensemble(jumpy_params, 10, 0.1, 1e-3,
                                        np.array([0.5, 0.5]), 1.0, 0.0, seed=1)


class TestParticleOracle:
    def test_single_regime_constant(self, single_regime_params):
        p = single_regime_params
        rng = np.random.default_rng(8)
        obs, _, _ = _arithmetic_observations(p, np.zeros(200, dtype=int), 1e-3, 200, rng)
        out = dc.particle_filter_oracle(p, obs, np.array([1.0]), 10_000, dc.path_rng(8, 0))
        assert np.allclose(out.pi, 1.0, atol=1e-12)

    def test_uninformative_tracks_prior(self):
        p = _uninformative_params()
        rng = np.random.default_rng(9)
        n, dt = 500, 1e-3
        z = (rng.random(n) > 0.5).astype(int)
        obs, _, _ = _arithmetic_observations(p, z, dt, n, rng)
        y0 = np.array([0.9, 0.1])
        out = dc.particle_filter_oracle(p, obs, y0, 20_000, dc.path_rng(9, 0))
        prior = np.array([(y0 @ expm(p.generator.rates * t))[0] for t in obs.t])
        assert np.abs(out.pi[:, 0] - prior).max() <= 0.05

    def test_requires_contractual_particle_count(self, bench_params):
        obs = Observations(t=np.array([0.0, 1e-3]), x0=np.array([1.0, 1.0]),
                           eta=np.array([0.0, 0.0]), jump_mark=np.array([np.nan, np.nan]))
        with pytest.raises(ModelValidationError):
            dc.particle_filter_oracle(bench_params, obs, np.array([0.5, 0.5]), 100,
                                      dc.path_rng(1, 1))

    def test_agrees_with_recursion_diffusive(self, bench_params):
        p = bench_params
        rng = dc.path_rng(500, 0)
        regime = dc.simulate_regime(p.generator, np.array([0.7, 0.3]), 1.0, 1e-3, rng)
        path = dc.simulate_uncontrolled(p, regime, 1.0, 0.0, rng)
        obs = Observations.from_sample_path(path)
        ks = dc.run_filter(p, obs, np.array([0.7, 0.3]))
        pf = dc.particle_filter_oracle(p, obs, np.array([0.7, 0.3]), 10_000, dc.path_rng(500, 1))
        dist = np.abs(ks.pi - pf.pi).sum(axis=1).mean()
        assert dist <= 0.05

    def test_agrees_with_recursion_with_jumps(self, jumpy_params):
        p = jumpy_params
        rng = dc.path_rng(501, 0)
        regime = dc.simulate_regime(p.generator, np.array([0.5, 0.5]), 0.5, 1e-3, rng)
        path = dc.simulate_uncontrolled(p, regime, 1.0, 0.0, rng)
        obs = Observations.from_sample_path(path)
        ks = dc.run_filter(p, obs, np.array([0.5, 0.5]))
        pf = dc.particle_filter_oracle(p, obs, np.array([0.5, 0.5]), 20_000, dc.path_rng(501, 1))
        dist = np.abs(ks.pi - pf.pi).sum(axis=1).mean()
        assert dist <= 0.06
