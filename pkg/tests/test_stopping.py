import dataclasses
import math

import numpy as np
import pytest

import debtceiling as dc
from debtceiling import coefficients as coeffs
from debtceiling.errors import BoundaryNotFound, NoRoot, NotTwoRegime, ResolutionTooCoarse
from debtceiling.stopping import complementarity_residuals


@pytest.fixture(scope="module")
def bounds(bench_params):
    return dc.one_dim_bounds(bench_params)


@pytest.fixture(scope="module")
def surface(bench_params, bounds):
    grid = dc.build_grid(bench_params, bounds, 120, 120)
    return dc.solve_variational_inequality(bench_params, grid)


@pytest.fixture(scope="module")
def boundary(bench_params, surface, bounds):
    return dc.extract_boundary(bench_params, surface, bounds)


class TestBuildGrid:
    def test_four_times_rule(self, bench_params, bounds):
        grid = dc.build_grid(bench_params, bounds, 150, 150)
        assert grid.u[-1] == pytest.approx(math.log(4.0 * bounds.x_star_upper))
        assert grid.u[0] == pytest.approx(math.log(1e-3 * bounds.x_star_lower))

    def test_spacings(self, bench_params, bounds):
        grid = dc.build_grid(bench_params, bounds, 200, 200)
        assert grid.h_u == pytest.approx((grid.u[-1] - grid.u[0]) / 199)
        assert grid.h_y == pytest.approx((0.999 - 1e-3) / 199)

    def test_too_coarse_rejected(self, bench_params, bounds):
        with pytest.raises(ResolutionTooCoarse):
            dc.build_grid(bench_params, bounds, 50, 50)


class TestGeneratorApply:
    def test_constant_in_kernel(self, bench_params, surface):
        grid = surface.grid
        values = np.full(grid.shape, 3.7)
        for node in [(5, 0), (40, 60), (80, 119)]:
            assert dc.generator_apply(bench_params, grid, values, node) == pytest.approx(0.0, abs=1e-9)

    def test_linear_in_debt(self, bench_params, surface):
        grid = surface.grid
        x = grid.x
        values = np.tile(x[:, None], (1, len(grid.y)))
        g1, g2 = bench_params.g
        beta2 = bench_params.r - g2
        for node in [(30, 30), (60, 90), (90, 10)]:
            i, j = node
            exact = (beta2 + (g2 - g1) * grid.y[j]) * x[i]
            got = dc.generator_apply(bench_params, grid, values, node)
            # upwinded transport is first-order accurate on e^u
            assert abs(got - exact) <= 0.1 * grid.h_u * x[i]

    def test_linear_in_belief(self, bench_params, surface):
        grid = surface.grid
        values = np.tile(grid.y[None, :], (len(grid.x), 1))
        lam1 = bench_params.generator.rates[0, 1]
        lam2 = bench_params.generator.rates[1, 0]
        for node in [(30, 1), (60, 60), (90, 118)]:
            i, j = node
            exact = lam2 - (lam1 + lam2) * grid.y[j]
            got = dc.generator_apply(bench_params, grid, values, node)
            # one-sided differences are exact on linear functions
            assert got == pytest.approx(exact, abs=1e-9)


class TestSolve:
    def test_obstacle_ordering(self, surface):
        x = surface.grid.x[:, None]
        assert float(surface.v.min()) >= 0.0
        assert float((surface.v - x).max()) <= 1e-12

    def test_monotone_in_debt_and_belief(self, surface):
        tol = 10 * surface.stats["tol_psor"]
        assert float(np.diff(surface.v, axis=0).min()) >= -tol
        assert float(np.diff(surface.v, axis=1).max()) <= tol

    def test_complementarity_everywhere(self, bench_params, surface):
        pde, gap = complementarity_residuals(bench_params, surface)
        x = surface.grid.x[:, None]
        scale = 1.0 + x
        tol = surface.stats["tol_comp"]
        assert float((pde[1:-1, :] / scale[1:-1, :]).min()) >= -tol
        assert float(gap.min()) >= -1e-15
        comp = np.minimum(pde, gap)
        assert float((np.abs(comp[1:-1, :]) / scale[1:-1, :]).max()) <= tol

    def test_myopic_inclusion(self, bench_params, surface):
        # h'(x) < rho - beta2 - (g2-g1) y  =>  continuation
        zeta = dc.zeta_lower(bench_params, surface.grid.y)
        x = surface.grid.x
        for j in range(0, len(surface.grid.y), 13):
            inside = x < zeta[j]
            assert not surface.region[inside, j].any()

    def test_far_field_is_stopping(self, surface, bounds):
        x = surface.grid.x
        far = x >= bounds.x_star_upper * math.exp(surface.grid.h_u)
        assert surface.region[far, :].all()

    def test_warm_start_converges_to_same_surface(self, bench_params, surface, bounds):
        grid = surface.grid
        v0 = np.minimum(surface.v * 1.001, grid.x[:, None])
        again = dc.solve_variational_inequality(bench_params, grid, v0=v0)
        assert float(np.abs(again.v - surface.v).max()) <= 1e-6


class TestOneDimBounds:
    def test_closed_form_against_psor(self, bench_params):
        closed = dc.one_dim_bounds(bench_params, method="closed_form")
        psor = dc.one_dim_bounds(bench_params, method="psor", n_nodes=8001)
        assert closed.x_star_lower <= closed.x_star_upper
        assert abs(closed.x_star_lower - psor.x_star_lower) / closed.x_star_lower <= 1e-3
        assert abs(closed.x_star_upper - psor.x_star_upper) / closed.x_star_upper <= 1e-3

    def test_near_degenerate_growth_gap_collapses_bracket(self):
        gen = dc.GeneratorMatrix(np.array([[-0.5, 0.5], [0.5, -0.5]]))
        raw = dc.ModelParams(
            generator=gen, r=0.02, sigma=0.1, g=np.array([0.02 + 1e-9, 0.02]),
            indicator=coeffs.arithmetic_indicator([0.5, 0.0], 0.1, 1.0),
            c=coeffs.zero_jumps(2), lambda_n=np.array([1.0, 1.0]),
            rho=10.0, cost=coeffs.quadratic_cost(1.0),
        )
        p = dc.validate_params(raw)
        b = dc.one_dim_bounds(p)
        assert b.x_star_upper - b.x_star_lower <= 1e-6 * b.x_star_lower

    def test_no_root_when_discount_cannot_fund_particular_solution(self, bench_params):
        from debtceiling.stopping import _closed_form_threshold

        with pytest.raises(NoRoot):
            _closed_form_threshold(dataclasses.replace(bench_params, rho=0.01), 0.02)

    def test_requires_two_regime(self, single_regime_params):
        with pytest.raises(NotTwoRegime):
            dc.one_dim_bounds(single_regime_params)


class TestZetaLower:
    def test_quadratic_closed_inverse(self, bench_params):
        y = np.linspace(0.0, 1.0, 11)
        beta2 = bench_params.r - bench_params.g[1]
        gdiff = bench_params.g[1] - bench_params.g[0]
        expected = bench_params.rho - beta2 - gdiff * y
        assert np.allclose(dc.zeta_lower(bench_params, y), expected, rtol=1e-14)

    def test_bisection_fallback_residual(self, bench_params):
        cost = dataclasses.replace(bench_params.cost, h_prime_inverse=None)
        p = dataclasses.replace(bench_params, cost=cost)
        y = np.linspace(0.0, 1.0, 7)
        zeta = dc.zeta_lower(p, y)
        target = p.rho - (p.r - p.g[1]) - (p.g[1] - p.g[0]) * y
        residual = np.abs(np.asarray(p.cost.h_prime(zeta)) - target)
        assert residual.max() <= 1e-10


class TestExtractBoundary:
    def test_within_band_and_monotone(self, boundary, bounds, surface):
        lo = np.maximum(boundary.zeta, bounds.x_star_lower)
        h_u = surface.grid.h_u
        assert np.all(boundary.d >= lo - h_u * lo)
        assert np.all(boundary.d <= bounds.x_star_upper + h_u * bounds.x_star_upper)
        assert np.all(np.diff(boundary.d) >= -1e-12)

    def test_raw_boundary_within_slack_band(self, boundary, bounds, surface):
        h_u = surface.grid.h_u
        lo = np.maximum(boundary.zeta, bounds.x_star_lower)
        assert np.all(boundary.d_raw >= lo - h_u * lo)
        assert np.all(boundary.d_raw <= bounds.x_star_upper * (1.0 + h_u))

    def test_refinement_moves_boundary_less_than_two_cells(self, bench_params, bounds, surface, boundary):
        grid_fine = dc.build_grid(bench_params, bounds, 240, 120)
        fine = dc.solve_variational_inequality(bench_params, grid_fine)
        boundary_fine = dc.extract_boundary(bench_params, fine, bounds)
        d_coarse = np.interp(boundary_fine.y, boundary.y, boundary.d_raw)
        gap = np.abs(boundary_fine.d_raw - d_coarse)
        assert gap.max() <= 2.0 * surface.grid.h_u * boundary.d_raw.max()

    def test_missing_stop_nodes_raises(self, bench_params, surface, bounds):
        fake = dc.ValueSurface(grid=surface.grid, v=0.5 * surface.grid.x[:, None]
                               * np.ones_like(surface.v), region=np.zeros_like(surface.region))
        with pytest.raises(BoundaryNotFound):
            dc.extract_boundary(bench_params, fake, bounds)

    def test_lookup_interpolates_and_clamps(self, boundary):
        mid = boundary((boundary.y[3] + boundary.y[4]) / 2.0)
        assert min(boundary.d[3], boundary.d[4]) <= mid <= max(boundary.d[3], boundary.d[4])
        assert boundary(-0.5) == boundary.d[0]
        assert boundary(1.5) == boundary.d[-1]


class TestSmoothFit:
    def test_gradients_exact_inside_stopping_region(self, surface):
        x = surface.grid.x
        v = surface.v
        stop = surface.region
        found = 0
        for j in range(0, len(surface.grid.y) - 1, 7):
            rows = np.nonzero(stop[:-1, j] & stop[1:, j])[0]
            for i in rows[:3]:
                vx = (v[i + 1, j] - v[i, j]) / (x[i + 1] - x[i])
                assert vx == pytest.approx(1.0, abs=1e-12)
                if stop[i, j + 1]:
                    assert v[i, j + 1] - v[i, j] == pytest.approx(0.0, abs=1e-12)
                found += 1
        assert found > 0

    def test_report_finite_and_positive(self, surface):
        rep = dc.smooth_fit_report(surface)
        assert rep.max_err_vx > 0
        assert np.all(np.isfinite(rep.err_vx))
        assert np.all(np.isfinite(rep.err_vy))


class TestCsv:
    def test_surface_and_boundary_schemas(self, surface, boundary):
        import io

        from debtceiling.stopping import boundary_to_csv, surface_to_csv

        buf = io.StringIO()
        surface_to_csv(surface, buf)
        assert buf.getvalue().splitlines()[0] == "x,y,v,region"
        buf2 = io.StringIO()
        boundary_to_csv(boundary, buf2)
        assert buf2.getvalue().splitlines()[0] == "y,d,zeta_lower,x_star_lower,x_star_upper"
