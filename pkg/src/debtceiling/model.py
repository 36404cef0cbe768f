"""Hidden-regime model: parameters, validation, and full-information simulation.

The state is a finite-state Markov chain Z (the unobserved economic regime),
the debt-to-GDP ratio X0 (geometric diffusion whose drift r - g(Z) switches
with the regime), and a macroeconomic indicator eta (jump-diffusion whose
drift, jump intensity, and jump sizes depend on Z).  Everything here runs
under full information; the observation-side machinery lives in
:mod:`debtceiling.filtering`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from .coefficients import CostFunction, IndicatorCoefficients
from .errors import (
    DegenerateSigma2,
    DiscountTooSmall,
    ModelValidationError,
    NonConservativeGenerator,
    NonConvexCost,
    NotTwoRegime,
    StepTooCoarse,
)

logger = logging.getLogger(__name__)

GENERATOR_ROW_TOL = 1e-10
GROWTH_RATIO_BOUND = 1e6


@dataclass(frozen=True)
class GeneratorMatrix:
    """Transition-rate matrix of the regime chain.

    Off-diagonal entries are nonnegative transition intensities; each row
    sums to zero.  The model proper has at least two regimes, but a single
    degenerate regime is accepted so that known-regime reductions can be
    exercised directly.
    """

    rates: np.ndarray

    def __post_init__(self):
        rates = np.atleast_2d(np.asarray(self.rates, dtype=float))
        object.__setattr__(self, "rates", rates)
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1]:
            raise NonConservativeGenerator("generator matrix must be square")
        q = rates.shape[0]
        off = rates[~np.eye(q, dtype=bool)]
        if off.size and off.min() < 0:
            raise NonConservativeGenerator("off-diagonal intensities must be nonnegative")
        row_sums = rates.sum(axis=1)
        scale = max(1.0, float(np.abs(rates).max()))
        if np.abs(row_sums).max() > GENERATOR_ROW_TOL * scale:
            raise NonConservativeGenerator(
                f"generator rows must sum to zero (max |row sum| = {np.abs(row_sums).max():.3g})"
            )

    @property
    def n_regimes(self) -> int:
        return self.rates.shape[0]

    def stationary_distribution(self) -> np.ndarray:
        """Left null vector of the rate matrix, normalized to the simplex."""
        q = self.n_regimes
        a = np.vstack([self.rates.T, np.ones(q)])
        b = np.zeros(q + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(a, b, rcond=None)
        return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()

    def transition_matrix(self, dt: float) -> np.ndarray:
        """P(dt) = expm(rates * dt)."""
        from scipy.linalg import expm

        return expm(self.rates * dt)


@dataclass(frozen=True)
class ModelParams:
    """All model constants plus derived fields populated by :func:`validate_params`.

    Parameters
    ----------
    generator : GeneratorMatrix
    r : float
        Real interest rate on debt (>= 0).
    sigma : float
        Debt-ratio volatility (> 0).
    g : array of shape (Q,)
        GDP growth rate per regime.
    indicator : IndicatorCoefficients
        Drift and volatility functions (b1, sigma1, sigma2) of the indicator.
    c : callable (q, i) -> jump size
        Indicator jump amplitude per regime; identically zero disables jumps.
    lambda_n : array of shape (Q,)
        Jump-clock intensity per regime (> 0).
    rho : float
        Discount rate.
    cost : CostFunction
    assume_novikov : bool
        Integrability of the signal slope along paths is declared, not
        checked; a runtime warning fires when |alpha| exceeds
        ``alpha_warn_bound`` on simulated paths.

    Derived (after validation): ``beta`` = r - g per regime, and in the
    two-regime diffusive setting ``alpha``, ``theta2``, and ``rho_o``.
    """

    generator: GeneratorMatrix
    r: float
    sigma: float
    g: np.ndarray
    indicator: IndicatorCoefficients
    c: Callable
    lambda_n: np.ndarray
    rho: float
    cost: CostFunction
    assume_novikov: bool = True
    alpha_warn_bound: float = 100.0
    # populated by validate_params
    validated: bool = False
    beta: Optional[np.ndarray] = None
    jumps_possible: bool = True
    two_regime: bool = False
    alpha: Optional[np.ndarray] = None
    theta2: Optional[float] = None
    rho_o: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float))
        object.__setattr__(self, "lambda_n", np.asarray(self.lambda_n, dtype=float))

    @property
    def n_regimes(self) -> int:
        return self.generator.n_regimes

    @property
    def b1(self) -> Callable:
        return self.indicator.b1

    @property
    def sigma1(self) -> Callable:
        return self.indicator.sigma1

    @property
    def sigma2(self) -> Callable:
        return self.indicator.sigma2

    def require_two_regime(self, what: str) -> None:
        if not (self.validated and self.two_regime):
            raise NotTwoRegime(f"{what} requires validated two-regime diffusive parameters")


def alpha_fn(params: ModelParams, q, i: int):
    """Signal slope of the indicator observation for regime i.

    alpha(q, i) = (b1(q, i) - beta_i * sigma1(q) / sigma) / sigma2(q).
    """
    qa = np.asarray(q, dtype=float)
    s2 = np.asarray(params.sigma2(qa), dtype=float)
    if np.any(s2 <= 0):
        raise DegenerateSigma2(f"sigma2(q) <= 0 at q={qa!r}")
    beta_i = params.r - params.g[i]
    return (np.asarray(params.b1(qa, i), dtype=float) - beta_i * np.asarray(params.sigma1(qa), dtype=float) / params.sigma) / s2


def rho_floor(params: ModelParams) -> float:
    """Admissibility floor for the discount rate in the two-regime setting.

    Six-term maximum; the discount rate must exceed its positive part.
    """
    if params.n_regimes != 2:
        raise NotTwoRegime("rho_floor is defined for exactly two regimes")
    if not params.indicator.alpha_constant:
        raise NotTwoRegime("rho_floor requires a q-independent signal slope")
    qr = params.indicator.reference_q
    a1 = float(alpha_fn(params, qr, 0))
    a2 = float(alpha_fn(params, qr, 1))
    g1, g2 = params.g[0], params.g[1]
    beta2 = params.r - g2
    sig2 = params.sigma**2
    gamma = params.cost.gamma
    lam1 = params.generator.rates[0, 1]
    lam2 = params.generator.rates[1, 0]
    theta2 = 0.5 * ((g1 - g2) ** 2 / sig2 + (a1 - a2) ** 2)
    gv = max(2.0, gamma)
    terms = (
        beta2 + 0.5 * sig2,
        gamma * beta2 + 0.5 * sig2 * gamma * (gamma - 1.0),
        2.0 * beta2 + sig2,
        24.0 * theta2 - (lam1 + lam2),
        4.0 * beta2 + 6.0 * sig2,
        4.0 * beta2 * gv + 2.0 * sig2 * gv * (4.0 * gv - 1.0),
    )
    return max(terms)


def _check_cost(cost: CostFunction, grid: np.ndarray) -> None:
    h0 = float(cost.h(0.0))
    if abs(h0) > 1e-12:
        raise NonConvexCost(f"h(0) must be 0, got {h0:.3g}")
    h = np.asarray(cost.h(grid), dtype=float)
    hp = np.asarray(cost.h_prime(grid), dtype=float)
    hpp = np.asarray(cost.h_second(grid), dtype=float)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(hp)) and np.all(np.isfinite(hpp))):
        raise NonConvexCost("cost function not finite on the validation grid")
    if np.any(hpp <= 0):
        raise NonConvexCost("h'' must be positive (strict convexity)")
    if np.any(hp < -1e-12):
        raise NonConvexCost("h' must be nonnegative on [0, inf)")
    gam = cost.gamma
    lower = cost.K_o * np.maximum(grid, 0.0) ** gam - cost.K
    upper = cost.K * (1.0 + np.abs(grid) ** gam)
    if np.any(h < lower - 1e-9) or np.any(h > upper + 1e-9):
        raise NonConvexCost("h violates its growth envelope on the validation grid")
    if np.any(np.abs(hp) > cost.K1 * (1.0 + np.abs(grid) ** (gam - 1.0)) + 1e-9):
        raise NonConvexCost("h' violates its growth bound")
    if np.any(np.abs(hpp) > cost.K2 * (1.0 + np.abs(grid) ** max(gam - 2.0, 0.0)) + 1e-9):
        raise NonConvexCost("h'' violates its growth bound")


def _check_indicator(params: ModelParams, qgrid: np.ndarray) -> bool:
    """Sample continuity/growth requirements; returns True if jumps can occur."""
    s1 = np.asarray(params.sigma1(qgrid), dtype=float)
    s2 = np.asarray(params.sigma2(qgrid), dtype=float)
    if np.any(~np.isfinite(s1)) or np.any(s1 <= 0):
        raise ModelValidationError("sigma1 must be finite and positive on the validation grid")
    if np.any(~np.isfinite(s2)) or np.any(s2 <= 0):
        raise DegenerateSigma2("sigma2 must be finite and positive on the validation grid")
    jumps = False
    for i in range(params.n_regimes):
        b = np.asarray(params.b1(qgrid, i), dtype=float)
        cc = np.asarray(params.c(qgrid, i), dtype=float)
        if np.any(~np.isfinite(b)) or np.any(~np.isfinite(cc)):
            raise ModelValidationError(f"b1 or c not finite on the validation grid for regime {i}")
        growth = (b**2 + s1**2 + s2**2 + cc**2) / (1.0 + qgrid**2)
        if growth.max() > GROWTH_RATIO_BOUND:
            raise ModelValidationError("indicator coefficients exceed the linear-growth envelope")
        if np.any(cc != 0.0):
            jumps = True
    return jumps


def validate_params(raw: ModelParams, q_grid: Optional[np.ndarray] = None) -> ModelParams:
    """Check structural assumptions and return params with derived fields set.

    Raises
    ------
    NonConservativeGenerator, NonConvexCost, ModelValidationError,
    DegenerateSigma2 : on structural violations.
    DiscountTooSmall : in the two-regime diffusive setting, when
        rho <= max(rho_o, 0).
    """
    if raw.sigma <= 0:
        raise ModelValidationError("sigma must be positive")
    if raw.r < 0:
        raise ModelValidationError("r must be nonnegative")
    q = raw.n_regimes
    if raw.g.shape != (q,):
        raise ModelValidationError("g must have one entry per regime")
    if raw.lambda_n.shape != (q,) or np.any(raw.lambda_n <= 0):
        raise ModelValidationError("lambda_n must be positive, one entry per regime")
    if not np.all(np.isfinite(raw.g)):
        raise ModelValidationError("g must be finite")

    if q_grid is None:
        if raw.indicator.kind == "geometric":
            q_grid = np.geomspace(1e-3, 1e3, 41)
        else:
            q_grid = np.linspace(-50.0, 50.0, 41)
    x_grid = np.linspace(0.0, 50.0, 101)

    _check_cost(raw.cost, x_grid)
    jumps_possible = _check_indicator(raw, q_grid)

    beta = raw.r - raw.g
    two_regime = bool(q == 2 and raw.indicator.alpha_constant and not jumps_possible and raw.g[1] < raw.g[0])

    alpha = None
    theta2 = None
    rho_o = None
    if two_regime:
        qr = raw.indicator.reference_q
        alpha = np.array([float(alpha_fn(raw, qr, 0)), float(alpha_fn(raw, qr, 1))])
        theta2 = 0.5 * ((raw.g[0] - raw.g[1]) ** 2 / raw.sigma**2 + (alpha[0] - alpha[1]) ** 2)
        rho_o = rho_floor(raw)
        if raw.rho <= max(rho_o, 0.0):
            raise DiscountTooSmall(
                f"rho = {raw.rho:.6g} must exceed the floor max(rho_o, 0) = {max(rho_o, 0.0):.6g}"
            )
    if raw.rho <= 0:
        raise ModelValidationError("rho must be positive")

    return replace(
        raw,
        validated=True,
        beta=beta,
        jumps_possible=jumps_possible,
        two_regime=two_regime,
        alpha=alpha,
        theta2=theta2,
        rho_o=rho_o,
    )


@dataclass(frozen=True)
class RegimePath:
    """Exact regime trajectory: event times plus its projection on a uniform grid.

    ``z[k]`` is the regime at t_k (right-continuous convention); within a
    simulation step coefficients are frozen at the left grid endpoint, so the
    pre-jump regime seen by the indicator's jump marks is ``z[k]`` for any
    event inside (t_k, t_{k+1}].
    """

    dt: float
    horizon: float
    z0: int
    z: np.ndarray
    event_times: np.ndarray
    event_states: np.ndarray

    def project(self, dt: float) -> "RegimePath":
        """Re-project the same event history onto a different uniform grid."""
        return _project_events(self.z0, self.event_times, self.event_states, self.horizon, dt)


def _project_events(z0, times, states, horizon, dt) -> RegimePath:
    n = int(round(horizon / dt))
    z = np.empty(n + 1, dtype=np.int64)
    current = z0
    k0 = 0
    for t_ev, s_ev in zip(times, states):
        k1 = min(int(math.floor(t_ev / dt)) + 1, n + 1)
        if k1 > k0:
            z[k0:k1] = current
            k0 = k1
        current = s_ev
        if k0 > n:
            break
    if k0 <= n:
        z[k0:] = current
    return RegimePath(dt=dt, horizon=horizon, z0=z0, z=z, event_times=np.asarray(times, dtype=float),
                      event_states=np.asarray(states, dtype=np.int64))


def simulate_regime(
    gen: GeneratorMatrix,
    y0,
    horizon: float,
    dt: float,
    rng: np.random.Generator,
) -> RegimePath:
    """Sample an exact continuous-time chain path and project it to the dt grid.

    Parameters
    ----------
    y0 : int or simplex vector
        Fixed initial state, or distribution to draw it from.
    """
    if dt <= 0 or horizon <= 0:
        raise ModelValidationError("dt and horizon must be positive")
    q = gen.n_regimes
    if np.isscalar(y0) and not isinstance(y0, float):
        z0 = int(y0)
    elif np.ndim(y0) == 0:
        z0 = int(y0)
    else:
        w = np.asarray(y0, dtype=float)
        if w.shape != (q,) or abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
            raise ModelValidationError("y0 must be a state index or a probability vector over regimes")
        z0 = int(rng.choice(q, p=w / w.sum()))
    times: List[float] = []
    states: List[int] = []
    t = 0.0
    current = z0
    while True:
        rate = -gen.rates[current, current]
        if rate <= 0:
            break
        t = t + rng.exponential(1.0 / rate)
        if t >= horizon:
            break
        probs = gen.rates[current].copy()
        probs[current] = 0.0
        probs = probs / rate
        current = int(rng.choice(q, p=probs))
        times.append(t)
        states.append(current)
    return _project_events(z0, np.array(times), np.array(states, dtype=np.int64), horizon, dt)


@dataclass(frozen=True)
class SamplePath:
    """Aligned full-information trajectory on a uniform grid.

    Gaussian increments are retained so coupled-refinement and
    reconstruction tests can replay the exact same noise.
    """

    t: np.ndarray
    z: np.ndarray
    x0: np.ndarray
    eta: np.ndarray
    jumps: List[Tuple[float, float]]
    jump_mark: np.ndarray
    dW: np.ndarray
    dB: np.ndarray
    seed: object = None

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])


def simulate_uncontrolled(
    params: ModelParams,
    regime_path: RegimePath,
    x0: float,
    eta0: float,
    rng: np.random.Generator,
    dW: Optional[np.ndarray] = None,
    dB: Optional[np.ndarray] = None,
    seed_record: object = None,
) -> SamplePath:
    """Advance (X0, eta) along a regime path.

    X0 moves by exact log-Euler with the regime frozen over each step (so it
    stays positive pathwise); eta moves by Euler-Maruyama plus jump marks.
    The indicator's jump clock is simulated by thinning against the envelope
    max_i lambda_n(i); an accepted event contributes a mark
    c(eta_pre, z_left) and is recorded at the end of its step (marks of zero
    size produce no observable jump).
    """
    if not params.validated:
        raise ModelValidationError("params must pass validate_params before simulation")
    dt = regime_path.dt
    beta_max = float(np.abs(params.r - params.g).max())
    if dt * beta_max > 0.1:
        raise StepTooCoarse(f"dt * max|beta| = {dt * beta_max:.3g} exceeds 0.1")
    n = len(regime_path.z) - 1
    z = regime_path.z
    if dW is None:
        dW = rng.normal(0.0, math.sqrt(dt), n)
    if dB is None:
        dB = rng.normal(0.0, math.sqrt(dt), n)
    if len(dW) != n or len(dB) != n:
        raise ModelValidationError("injected increments must have one entry per step")

    # candidate jump times from the envelope intensity, thinned by regime
    lam_bar = float(params.lambda_n.max())
    candidates = []
    t_cand = 0.0
    while True:
        t_cand += rng.exponential(1.0 / lam_bar)
        if t_cand >= regime_path.horizon:
            break
        candidates.append(t_cand)
    accept_u = rng.random(len(candidates))

    x = np.empty(n + 1)
    eta = np.empty(n + 1)
    jump_mark = np.full(n + 1, np.nan)
    x[0], eta[0] = float(x0), float(eta0)
    if x[0] <= 0:
        raise ModelValidationError("x0 must be positive")
    jumps: List[Tuple[float, float]] = []
    cand_idx = 0
    half_var = 0.5 * params.sigma**2
    alpha_max_seen = 0.0
    for k in range(n):
        zi = int(z[k])
        beta_k = params.r - params.g[zi]
        x[k + 1] = x[k] * math.exp((beta_k - half_var) * dt + params.sigma * dW[k])
        eta_pre = (
            eta[k]
            + float(params.b1(eta[k], zi)) * dt
            + float(params.sigma1(eta[k])) * dW[k]
            + float(params.sigma2(eta[k])) * dB[k]
        )
        t_hi = (k + 1) * dt
        mark_total = 0.0
        while cand_idx < len(candidates) and candidates[cand_idx] <= t_hi:
            if accept_u[cand_idx] < params.lambda_n[zi] / lam_bar:
                mark = float(params.c(eta_pre + mark_total, zi))
                if mark != 0.0:
                    jumps.append((candidates[cand_idx], mark))
                    mark_total += mark
            cand_idx += 1
        eta[k + 1] = eta_pre + mark_total
        if mark_total != 0.0:
            jump_mark[k + 1] = mark_total
        if params.assume_novikov and (k % 64 == 0):
            a = max(abs(float(alpha_fn(params, eta[k], i))) for i in range(params.n_regimes))
            alpha_max_seen = max(alpha_max_seen, a)
    if alpha_max_seen > params.alpha_warn_bound:
        logger.warning(
            "observed |alpha| up to %.3g exceeds the declared bound %.3g; "
            "the declared integrability assumption may be fragile here",
            alpha_max_seen,
            params.alpha_warn_bound,
        )
    t = np.arange(n + 1) * dt
    return SamplePath(t=t, z=z.copy(), x0=x, eta=eta, jumps=jumps, jump_mark=jump_mark,
                      dW=dW, dB=dB, seed=seed_record)


def path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    """Counter-based stream for one path: order-independent across paths."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(path_index,))
    return np.random.Generator(np.random.Philox(ss))


def _fmt(v: float) -> str:
    return repr(float(v))


def path_to_csv(path: SamplePath, file) -> None:
    """Write the observation schema: t, z, x0, eta, jump_mark."""
    w = csv.writer(file)
    w.writerow(["t", "z", "x0", "eta", "jump_mark"])
    for k in range(len(path.t)):
        mark = "" if np.isnan(path.jump_mark[k]) else _fmt(path.jump_mark[k])
        w.writerow([_fmt(path.t[k]), int(path.z[k]), _fmt(path.x0[k]), _fmt(path.eta[k]), mark])
