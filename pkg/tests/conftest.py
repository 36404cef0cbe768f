import numpy as np
import pytest

import debtceiling as dc
from debtceiling import coefficients as coeffs


@pytest.fixture(scope="session")
def benchmark_cfg():
    return dc.benchmark_config()


@pytest.fixture(scope="session")
def bench_params(benchmark_cfg):
    return benchmark_cfg.params


@pytest.fixture(scope="session")
def jumpy_params():
    """Two-regime model with constant, regime-independent jump sizes and
    regime-dependent intensities (the constant-mark special case)."""
    gen = dc.GeneratorMatrix(np.array([[-0.5, 0.5], [0.5, -0.5]]))
    raw = dc.ModelParams(
        generator=gen,
        r=0.02,
        sigma=0.1,
        g=np.array([0.04, 0.0]),
        indicator=coeffs.arithmetic_indicator([0.96, 0.0], 0.1, 1.0),
        c=coeffs.constant_jumps([0.4, 0.4]),
        lambda_n=np.array([3.0, 1.0]),
        rho=0.5,
        cost=coeffs.quadratic_cost(1.0),
    )
    return dc.validate_params(raw)


@pytest.fixture(scope="session")
def single_regime_params():
    gen = dc.GeneratorMatrix(np.array([[0.0]]))
    raw = dc.ModelParams(
        generator=gen,
        r=0.05,
        sigma=0.2,
        g=np.array([0.02]),
        indicator=coeffs.arithmetic_indicator([0.1], 0.1, 1.0),
        c=coeffs.zero_jumps(1),
        lambda_n=np.array([1.0]),
        rho=1.0,
        cost=coeffs.quadratic_cost(1.0),
    )
    return dc.validate_params(raw)
