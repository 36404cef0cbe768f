"""Named catalogue of indicator, jump, and cost coefficient families.

Scenario configs select coefficient functions from this catalogue by name
rather than shipping arbitrary code.  Two indicator families are provided:

``arithmetic``
    b1(q, i) = b_i,  sigma1(q) = s1,  sigma2(q) = s2.

``geometric``
    b1(q, i) = b_i * q,  sigma1(q) = s1 * q,  sigma2(q) = s2 * q,
    valid on q > 0.

Both make the signal slope ``alpha(q, i)`` independent of q, which is the
setting in which the two-regime solvers apply.  Jump sizes are either
identically zero or constant per regime; holding costs are quadratic or
power-type.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ModelValidationError


@dataclass(frozen=True)
class IndicatorCoefficients:
    """Bundle of (b1, sigma1, sigma2) callables for the indicator diffusion.

    Attributes
    ----------
    b1 : callable (q, i) -> drift
    sigma1 : callable (q,) -> loading on the debt-ratio noise
    sigma2 : callable (q,) -> idiosyncratic volatility, must be positive
    alpha_constant : bool
        True when alpha(q, i) does not depend on q, so the filter's signal
        slope reduces to one number per regime.
    reference_q : float
        A point where the coefficient functions are well defined; used to
        evaluate regime-level constants when ``alpha_constant`` holds.
    kind : str
        Catalogue name, or "custom" for user-supplied callables.
    """

    b1: Callable
    sigma1: Callable
    sigma2: Callable
    alpha_constant: bool = False
    reference_q: float = 0.0
    kind: str = "custom"


def arithmetic_indicator(b1_levels: Sequence[float], sigma1: float, sigma2: float) -> IndicatorCoefficients:
    """Constant-coefficient indicator: drift per regime, constant volatilities."""
    if sigma1 <= 0 or sigma2 <= 0:
        raise ModelValidationError("arithmetic indicator requires sigma1 > 0 and sigma2 > 0")
    b = np.asarray(b1_levels, dtype=float)

    def b1(q, i):
        return b[i] * np.ones_like(np.asarray(q, dtype=float))

    return IndicatorCoefficients(
        b1=b1,
        sigma1=lambda q: np.full_like(np.asarray(q, dtype=float), float(sigma1)),
        sigma2=lambda q: np.full_like(np.asarray(q, dtype=float), float(sigma2)),
        alpha_constant=True,
        reference_q=0.0,
        kind="arithmetic",
    )


def geometric_indicator(b1_rates: Sequence[float], sigma1: float, sigma2: float) -> IndicatorCoefficients:
    """Proportional-coefficient indicator; state space restricted to q > 0."""
    if sigma1 <= 0 or sigma2 <= 0:
        raise ModelValidationError("geometric indicator requires sigma1 > 0 and sigma2 > 0")
    b = np.asarray(b1_rates, dtype=float)

    def b1(q, i):
        return b[i] * np.asarray(q, dtype=float)

    return IndicatorCoefficients(
        b1=b1,
        sigma1=lambda q: float(sigma1) * np.asarray(q, dtype=float),
        sigma2=lambda q: float(sigma2) * np.asarray(q, dtype=float),
        alpha_constant=True,
        reference_q=1.0,
        kind="geometric",
    )


def zero_jumps(n_regimes: int) -> Callable:
    """Jump-size function that is identically zero (purely diffusive indicator)."""

    def c(q, i):
        return np.zeros_like(np.asarray(q, dtype=float))

    return c


def constant_jumps(sizes: Sequence[float]) -> Callable:
    """Jump size depends on the regime only, not on the indicator level."""
    s = np.asarray(sizes, dtype=float)

    def c(q, i):
        return s[i] * np.ones_like(np.asarray(q, dtype=float))

    return c


@dataclass(frozen=True)
class CostFunction:
    """Holding cost h with derivatives and its growth envelope constants.

    The envelope ``K_o * (x+)^gamma - K <= h(x) <= K * (1 + |x|^gamma)``
    together with ``|h'| <= K1 (1 + |x|^(gamma-1))`` and
    ``|h''| <= K2 (1 + |x|^max(gamma-2, 0))`` is asserted on a sample grid at
    validation time.
    """

    h: Callable
    h_prime: Callable
    h_second: Callable
    gamma: float
    K_o: float
    K: float
    K1: float
    K2: float
    h_prime_inverse: Optional[Callable] = None
    kind: str = "custom"
    params: dict = field(default_factory=dict)


def quadratic_cost(curvature: float = 1.0) -> CostFunction:
    """h(x) = curvature * x^2 / 2, the closed-form-friendly benchmark cost."""
    if curvature <= 0:
        raise ModelValidationError("quadratic cost requires curvature > 0")
    th = float(curvature)
    return CostFunction(
        h=lambda x: 0.5 * th * np.square(x),
        h_prime=lambda x: th * np.asarray(x, dtype=float),
        h_second=lambda x: th * np.ones_like(np.asarray(x, dtype=float)),
        gamma=2.0,
        K_o=th / 4.0,
        K=th + 1.0,
        K1=th,
        K2=th,
        h_prime_inverse=lambda u: np.asarray(u, dtype=float) / th,
        kind="quadratic",
        params={"curvature": th},
    )


def power_cost(scale: float, gamma: float) -> CostFunction:
    """h(x) = scale * (x+)^gamma / gamma for gamma >= 2 (twice differentiable at 0)."""
    if gamma < 2.0:
        raise ModelValidationError("power cost requires gamma >= 2 for a bounded second derivative at 0")
    if scale <= 0:
        raise ModelValidationError("power cost requires scale > 0")
    k, g = float(scale), float(gamma)

    def h(x):
        xp = np.maximum(np.asarray(x, dtype=float), 0.0)
        return k * xp**g / g

    def hp(x):
        xp = np.maximum(np.asarray(x, dtype=float), 0.0)
        return k * xp ** (g - 1.0)

    def hpp(x):
        xp = np.maximum(np.asarray(x, dtype=float), 0.0)
        return k * (g - 1.0) * xp ** (g - 2.0)

    return CostFunction(
        h=h,
        h_prime=hp,
        h_second=hpp,
        gamma=g,
        K_o=k / (2.0 * g),
        K=k / g + 1.0,
        K1=k,
        K2=k * (g - 1.0),
        h_prime_inverse=lambda u: (np.asarray(u, dtype=float) / k) ** (1.0 / (g - 1.0)),
        kind="power",
        params={"scale": k, "gamma": g},
    )


def indicator_from_config(spec: dict, n_regimes: int) -> IndicatorCoefficients:
    kind = spec.get("kind")
    if kind == "arithmetic":
        return arithmetic_indicator(spec["b1"], spec["sigma1"], spec["sigma2"])
    if kind == "geometric":
        return geometric_indicator(spec["b1"], spec["sigma1"], spec["sigma2"])
    raise ModelValidationError(f"unknown indicator kind: {kind!r}")


def jumps_from_config(spec: dict, n_regimes: int) -> Callable:
    kind = spec.get("kind", "none")
    if kind == "none":
        return zero_jumps(n_regimes)
    if kind == "constant":
        sizes = spec["sizes"]
        if len(sizes) != n_regimes:
            raise ModelValidationError("jump sizes must list one value per regime")
        return constant_jumps(sizes)
    raise ModelValidationError(f"unknown jump kind: {kind!r}")


def cost_from_config(spec: dict) -> CostFunction:
    kind = spec.get("kind")
    if kind == "quadratic":
        return quadratic_cost(spec.get("curvature", 1.0))
    if kind == "power":
        return power_cost(spec["scale"], spec["gamma"])
    raise ModelValidationError(f"unknown cost kind: {kind!r}")
