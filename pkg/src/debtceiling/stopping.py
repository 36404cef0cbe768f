"""Two-dimensional optimal stopping solver and free-boundary extraction.

The auxiliary stopping problem is solved on a log-debt x belief grid as the
obstacle problem

    min{ (L - rho) v + x h'(x),  x - v } = 0,       v <= x,

by projected SOR on an upwinded finite-difference operator.  The extracted
belief-dependent threshold d(y) (the optimal debt ceiling) is clamped to its
provable band: below by the myopic level zeta(y) and the pessimistic-drift
one-dimensional threshold, above by the optimistic-drift threshold.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numba import njit

from .errors import (
    BoundaryNotFound,
    ModelValidationError,
    NoConvergence,
    NoRoot,
    ResolutionTooCoarse,
)
from .model import ModelParams

MIN_NODES = 100
DEFAULT_OMEGA = 1.5
DEFAULT_TOL_PSOR = 1e-9
DEFAULT_TOL_COMP = 1e-6
DEFAULT_MAX_SWEEPS = 100_000
STOP_LABEL_TOL = 1e-12
X_DOMAIN_LOWER_FACTOR = 1e-3
X_DOMAIN_UPPER_FACTOR = 4.0


@dataclass(frozen=True)
class Grid2D:
    """Uniform grid in (u, y) with u = ln x."""

    u: np.ndarray
    y: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return np.exp(self.u)

    @property
    def h_u(self) -> float:
        return float(self.u[1] - self.u[0])

    @property
    def h_y(self) -> float:
        return float(self.y[1] - self.y[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.u), len(self.y)


@dataclass(frozen=True)
class OneDimBounds:
    """Belief-free threshold bracket for the debt ceiling."""

    x_star_lower: float
    x_star_upper: float
    details: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.x_star_lower, self.x_star_upper))


@dataclass
class ValueSurface:
    """Converged obstacle-problem solution with stop/continue labels."""

    grid: Grid2D
    v: np.ndarray
    region: np.ndarray  # True where stopping (v == obstacle)
    stats: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FreeBoundary:
    """Belief-dependent debt ceiling d(y), clamped to its provable band."""

    y: np.ndarray
    d: np.ndarray
    d_raw: np.ndarray
    zeta: np.ndarray
    x_star_lower: float
    x_star_upper: float

    def __call__(self, yq):
        """Lookup by linear interpolation; beliefs outside the grid clamp."""
        return np.interp(np.asarray(yq, dtype=float), self.y, self.d)


def build_grid(
    params: ModelParams,
    bounds: OneDimBounds,
    n_u: int,
    n_y: int,
    y_lo: float = 1e-3,
    y_hi: float = 0.999,
) -> Grid2D:
    """Grid covering [ln(1e-3 x_lower), ln(4 x_upper)] x [y_lo, y_hi]."""
    if n_u < MIN_NODES or n_y < MIN_NODES:
        raise ResolutionTooCoarse(f"need at least {MIN_NODES} nodes per axis, got {n_u}x{n_y}")
    if not (0.0 < y_lo <= 1e-3 and 1.0 - 1e-3 <= y_hi < 1.0):
        raise ModelValidationError("belief grid must satisfy y_lo <= 1e-3 and y_hi >= 0.999 inside (0,1)")
    u_min = math.log(X_DOMAIN_LOWER_FACTOR * bounds.x_star_lower)
    u_max = math.log(X_DOMAIN_UPPER_FACTOR * bounds.x_star_upper)
    return Grid2D(u=np.linspace(u_min, u_max, n_u), y=np.linspace(y_lo, y_hi, n_y))


def _stencil(params: ModelParams, grid: Grid2D):
    """Upwinded operator weights; at belief edges the degenerate diffusion is
    dropped and only the inward transport keeps a one-sided stencil."""
    params.require_two_regime("the stopping solver")
    x = grid.x
    y = grid.y
    hu, hy = grid.h_u, grid.h_y
    X, Y = np.meshgrid(x, y, indexing="ij")
    g1, g2 = params.g[0], params.g[1]
    beta2 = params.r - g2
    drift_u = beta2 + (g2 - g1) * Y - 0.5 * params.sigma**2
    drift_y = params.generator.rates[1, 0] - (params.generator.rates[0, 1] + params.generator.rates[1, 0]) * Y
    diff_y = params.theta2 * Y**2 * (1.0 - Y) ** 2
    diff_y[:, 0] = 0.0
    diff_y[:, -1] = 0.0

    aE = 0.5 * params.sigma**2 / hu**2 + np.maximum(drift_u, 0.0) / hu
    aW = 0.5 * params.sigma**2 / hu**2 + np.maximum(-drift_u, 0.0) / hu
    aN = diff_y / hy**2 + np.maximum(drift_y, 0.0) / hy
    aS = diff_y / hy**2 + np.maximum(-drift_y, 0.0) / hy
    # no outward one-sided transport at the belief edges
    aS[:, 0] = 0.0
    aN[:, -1] = 0.0
    return X, Y, aW, aE, aS, aN


def generator_apply(params: ModelParams, grid: Grid2D, values: np.ndarray, node: Tuple[int, int]) -> float:
    """Discrete diffusion generator at one interior node (upwinded transport)."""
    i, j = node
    n_u, n_y = grid.shape
    if not (1 <= i <= n_u - 2):
        raise ModelValidationError("generator_apply needs an interior log-debt index")
    X, Y, aW, aE, aS, aN = _stencil(params, grid)
    out = aE[i, j] * values[i + 1, j] + aW[i, j] * values[i - 1, j] - (aE[i, j] + aW[i, j]) * values[i, j]
    if j > 0:
        out += aS[i, j] * (values[i, j - 1] - values[i, j])
    if j < n_y - 1:
        out += aN[i, j] * (values[i, j + 1] - values[i, j])
    return float(out)


def apply_generator_field(params: ModelParams, grid: Grid2D, values: np.ndarray) -> np.ndarray:
    """Vectorized discrete generator on interior log-debt rows."""
    X, Y, aW, aE, aS, aN = _stencil(params, grid)
    out = np.zeros_like(values)
    out[1:-1, :] = aE[1:-1, :] * values[2:, :] + aW[1:-1, :] * values[:-2, :]
    out[:, 1:] += aS[:, 1:] * values[:, :-1]
    out[:, :-1] += aN[:, :-1] * values[:, 1:]
    out -= (aE + aW + aS + aN) * values
    out[0, :] = 0.0
    out[-1, :] = 0.0
    return out


@njit(cache=True)
def _psor_sweep(v, obstacle, f, aW, aE, aS, aN, diag, omega):
    n_u, n_y = v.shape
    max_update = 0.0
    for i in range(1, n_u - 1):
        for j in range(n_y):
            rhs = f[i, j] + aW[i, j] * v[i - 1, j] + aE[i, j] * v[i + 1, j]
            if j > 0:
                rhs += aS[i, j] * v[i, j - 1]
            if j < n_y - 1:
                rhs += aN[i, j] * v[i, j + 1]
            v_new = (1.0 - omega) * v[i, j] + omega * rhs / diag[i, j]
            if v_new > obstacle[i, j]:
                v_new = obstacle[i, j]
            delta = abs(v_new - v[i, j])
            if delta > max_update:
                max_update = delta
            v[i, j] = v_new
    return max_update


def _residuals(v, obstacle, f, aW, aE, aS, aN, diag):
    av = diag * v
    av[1:-1, :] -= aW[1:-1, :] * v[:-2, :] + aE[1:-1, :] * v[2:, :]
    tmp = np.zeros_like(v)
    tmp[:, 1:] = aS[:, 1:] * v[:, :-1]
    av -= tmp
    tmp = np.zeros_like(v)
    tmp[:, :-1] = aN[:, :-1] * v[:, 1:]
    av -= tmp
    pde = f - av  # discrete (L - rho) v + x h'(x)
    gap = obstacle - v
    return pde, gap


def solve_variational_inequality(
    params: ModelParams,
    grid: Grid2D,
    omega: float = DEFAULT_OMEGA,
    tol_psor: float = DEFAULT_TOL_PSOR,
    tol_comp: float = DEFAULT_TOL_COMP,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    v0: Optional[np.ndarray] = None,
    comp_check_every: int = 25,
) -> ValueSurface:
    """Projected SOR solve of the stopping obstacle problem.

    Converged when the sup-norm sweep update falls below ``tol_psor`` and
    every node satisfies complementarity within ``tol_comp * (1 + x)``.
    The iteration starts at the obstacle (or a warm start) and moves
    monotonically down onto the solution.
    """
    X, Y, aW, aE, aS, aN = _stencil(params, grid)
    diag = params.rho + aE + aW + aS + aN
    f = X * np.asarray(params.cost.h_prime(X), dtype=float)
    obstacle = X.copy()
    v = obstacle.copy() if v0 is None else np.minimum(np.asarray(v0, dtype=float).copy(), obstacle)
    v[0, :] = 0.0
    v[-1, :] = obstacle[-1, :]

    t_start = time.perf_counter()
    sweeps = 0
    converged = False
    comp_max_rel = np.inf
    while sweeps < max_sweeps:
        sweeps += 1
        max_update = _psor_sweep(v, obstacle, f, aW, aE, aS, aN, diag, omega)
        if max_update < tol_psor and (sweeps % comp_check_every == 0 or sweeps < comp_check_every):
            pde, gap = _residuals(v, obstacle, f, aW, aE, aS, aN, diag)
            comp = np.minimum(pde, gap)
            comp_max_rel = float((np.abs(comp[1:-1, :]) / (1.0 + obstacle[1:-1, :])).max())
            if comp_max_rel <= tol_comp:
                converged = True
                break
    if not converged:
        pde, gap = _residuals(v, obstacle, f, aW, aE, aS, aN, diag)
        comp = np.minimum(pde, gap)
        worst = float((np.abs(comp[1:-1, :]) / (1.0 + obstacle[1:-1, :])).max())
        raise NoConvergence(
            f"PSOR did not converge in {max_sweeps} sweeps (worst scaled residual {worst:.3g})",
            worst_residual=worst,
            sweeps=sweeps,
        )
    pde, gap = _residuals(v, obstacle, f, aW, aE, aS, aN, diag)
    region = gap <= STOP_LABEL_TOL * (1.0 + obstacle)
    stats = {
        "sweeps": sweeps,
        "omega": omega,
        "tol_psor": tol_psor,
        "tol_comp": tol_comp,
        "comp_max_rel": comp_max_rel,
        "pde_min": float(pde[1:-1, :].min()),
        "gap_min": float(gap.min()),
        "elapsed_s": time.perf_counter() - t_start,
    }
    return ValueSurface(grid=grid, v=v, region=region, stats=stats)


def complementarity_residuals(params: ModelParams, surface: ValueSurface):
    """(pde, gap) residual fields of a surface under the discrete operator."""
    X, Y, aW, aE, aS, aN = _stencil(params, surface.grid)
    diag = params.rho + aE + aW + aS + aN
    f = X * np.asarray(params.cost.h_prime(X), dtype=float)
    return _residuals(surface.v, X.copy(), f, aW, aE, aS, aN, diag)


# ---------------------------------------------------------------------------
# one-dimensional bounding thresholds
# ---------------------------------------------------------------------------

@njit(cache=True)
def _psor_sweep_1d(v, obstacle, f, aW, aE, diag, omega):
    n = v.shape[0]
    max_update = 0.0
    for i in range(1, n - 1):
        rhs = f[i] + aW * v[i - 1] + aE * v[i + 1]
        v_new = (1.0 - omega) * v[i] + omega * rhs / diag
        if v_new > obstacle[i]:
            v_new = obstacle[i]
        delta = abs(v_new - v[i])
        if delta > max_update:
            max_update = delta
        v[i] = v_new
    return max_update


def _closed_form_threshold(params: ModelParams, b_drift: float) -> float:
    """Smooth-fit threshold for quadratic cost and geometric drift b."""
    curv = params.cost.params["curvature"]
    sig2 = params.sigma**2
    if params.rho <= 2.0 * b_drift + sig2:
        raise NoRoot(
            f"rho = {params.rho:.6g} <= 2 b + sigma^2 = {2 * b_drift + sig2:.6g}: no particular solution"
        )
    kappa = curv / (params.rho - 2.0 * b_drift - sig2)
    qq = b_drift - 0.5 * sig2
    m_plus = (-qq + math.sqrt(qq * qq + 2.0 * sig2 * params.rho)) / sig2
    if m_plus <= 2.0:
        raise NoRoot("smooth-fit exponent <= 2: no positive threshold")
    x_star = (m_plus - 1.0) / (kappa * (m_plus - 2.0))
    if not (x_star > 0.0 and math.isfinite(x_star)):
        raise NoRoot("smooth-fit system has no positive solution")
    return x_star


def _threshold_from_gap(x: np.ndarray, v: np.ndarray, window: Tuple[int, int] = (3, 14)) -> float:
    """Sub-cell threshold via least squares on sqrt(gap), which is asymptotically
    linear near the quadratic obstacle contact."""
    g = x - v
    binding = np.nonzero(g <= 1e-10 * (1.0 + x))[0]
    binding = binding[binding > 0]
    if binding.size == 0:
        raise BoundaryNotFound("one-dimensional solve produced no stopping node")
    k = int(binding[0])
    j0, j1 = window
    lo = max(k - j1, 1)
    hi = k - j0 + 1
    if hi - lo < 3:
        return float(x[k])
    idx = np.arange(lo, hi)
    gg = g[idx]
    if np.any(gg <= 0):
        return float(x[k])
    coeffs = np.polyfit(x[idx], np.sqrt(gg), 2)
    roots = np.roots(coeffs)
    roots = roots[np.isreal(roots)].real
    cand = roots[(roots > x[idx[-1]]) & (roots < x[min(k + 3, len(x) - 1)])]
    if cand.size == 0:
        return float(x[k])
    return float(cand.min())


def _one_dim_psor_threshold(
    params: ModelParams,
    b_drift: float,
    n_nodes: int,
    omega: float = 1.7,
    tol: float = 1e-12,
    max_sweeps: int = 2_000_000,
) -> float:
    """Threshold of the 1D stopping problem with geometric drift b, by PSOR."""
    hp = params.cost.h_prime
    target = params.rho - b_drift
    anchor = float(_invert_h_prime(params, max(target, 1e-12)))
    u = np.linspace(math.log(1e-3 * anchor), math.log(8.0 * anchor), n_nodes)
    hu = u[1] - u[0]
    x = np.exp(u)
    drift_u = b_drift - 0.5 * params.sigma**2
    aE = 0.5 * params.sigma**2 / hu**2 + max(drift_u, 0.0) / hu
    aW = 0.5 * params.sigma**2 / hu**2 + max(-drift_u, 0.0) / hu
    diag = params.rho + aE + aW
    f = x * np.asarray(hp(x), dtype=float)
    obstacle = x.copy()
    v = obstacle.copy()
    v[0] = 0.0
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        if _psor_sweep_1d(v, obstacle, f, aW, aE, diag, omega) < tol:
            break
    else:
        raise NoConvergence("one-dimensional PSOR did not converge", sweeps=sweeps)
    return _threshold_from_gap(x, v)


def one_dim_bounds(
    params: ModelParams,
    method: str = "auto",
    n_nodes: int = 16_001,
) -> OneDimBounds:
    """Threshold bracket from the two belief-free problems.

    The lower threshold uses the pessimistic geometric drift beta2 (it lower
    bounds the ceiling); the upper one uses the optimistic drift
    beta2 + (g2 - g1).  For quadratic cost the smooth-fit system is solved
    in closed form; otherwise (or on request) by a fine one-dimensional
    PSOR with sub-cell contact extraction.
    """
    params.require_two_regime("one_dim_bounds")
    beta2 = params.r - params.g[1]
    drift_lower = beta2
    drift_upper = beta2 + (params.g[1] - params.g[0])
    details: dict = {"method": method}
    if method == "auto":
        method = "closed_form" if params.cost.kind == "quadratic" else "psor"
    if method == "closed_form":
        if params.cost.kind != "quadratic":
            raise ModelValidationError("closed-form thresholds exist for quadratic cost only")
        lower = _closed_form_threshold(params, drift_lower)
        upper = _closed_form_threshold(params, drift_upper)
        details["closed_form"] = (lower, upper)
    else:
        lower = _one_dim_psor_threshold(params, drift_lower, n_nodes)
        upper = _one_dim_psor_threshold(params, drift_upper, n_nodes)
        details["psor"] = (lower, upper)
        details["n_nodes"] = n_nodes
    if not lower <= upper:
        raise NoRoot(f"threshold bracket inverted: lower={lower:.6g} > upper={upper:.6g}")
    return OneDimBounds(x_star_lower=lower, x_star_upper=upper, details=details)


def _invert_h_prime(params: ModelParams, target, tol: float = 1e-12):
    """Monotone inverse of h' (closed form when the cost supplies one)."""
    if params.cost.h_prime_inverse is not None:
        return params.cost.h_prime_inverse(target)
    hp = params.cost.h_prime
    t = np.atleast_1d(np.asarray(target, dtype=float))
    out = np.empty_like(t)
    for idx, ti in enumerate(t):
        lo, hi = 0.0, 1.0
        while float(hp(hi)) < ti:
            hi *= 2.0
            if hi > 1e12:
                raise NoRoot(f"h' never reaches {ti:.6g}")
        while hi - lo > tol * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            if float(hp(mid)) < ti:
                lo = mid
            else:
                hi = mid
        out[idx] = 0.5 * (lo + hi)
    return out if np.ndim(target) else float(out[0])


def zeta_lower(params: ModelParams, y):
    """Myopic lower bound of the ceiling: (h')^{-1}(rho - beta2 - (g2-g1) y)."""
    params.require_two_regime("zeta_lower")
    beta2 = params.r - params.g[1]
    target = params.rho - beta2 - (params.g[1] - params.g[0]) * np.asarray(y, dtype=float)
    if np.any(target < 0):
        raise ModelValidationError("rho too small for the myopic bound to be defined")
    return _invert_h_prime(params, target)


def extract_boundary(
    params: ModelParams,
    surface: ValueSurface,
    bounds: OneDimBounds,
    tol_stop_rel: float = 1e-8,
) -> FreeBoundary:
    """First stopping level per belief column, interpolated and clamped.

    Per column the raw threshold is the first (ascending x) level where the
    gap x - v falls to ``tol_stop_rel * (1 + x)``, refined by linear
    interpolation of the gap between the bracketing nodes; it is then
    clamped to [zeta(y) v lower threshold, upper threshold].
    """
    x = surface.grid.x
    y = surface.grid.y
    n_y = len(y)
    d_raw = np.empty(n_y)
    tol = tol_stop_rel * (1.0 + x)
    for j in range(n_y):
        gap = x - surface.v[:, j]
        hit = np.nonzero(gap <= tol)[0]
        hit = hit[hit > 0]
        if hit.size == 0:
            raise BoundaryNotFound(f"no stopping node in belief column y={y[j]:.6g}")
        k = int(hit[0])
        g_left, g_right = gap[k - 1], gap[k]
        denom = g_left - g_right
        frac = (g_left - tol[k]) / denom if denom > 0 else 1.0
        d_raw[j] = x[k - 1] + (x[k] - x[k - 1]) * min(max(frac, 0.0), 1.0)
    zeta = np.asarray(zeta_lower(params, y), dtype=float)
    lo = np.maximum(zeta, bounds.x_star_lower)
    d = np.clip(d_raw, lo, bounds.x_star_upper)
    drops = np.diff(d)
    if np.any(drops < -1e-9 * (1.0 + d[:-1])):
        worst = float(drops.min())
        raise BoundaryNotFound(f"extracted ceiling is not monotone (worst adjacent drop {worst:.3g})")
    return FreeBoundary(
        y=y.copy(), d=d, d_raw=d_raw, zeta=zeta,
        x_star_lower=bounds.x_star_lower, x_star_upper=bounds.x_star_upper,
    )


@dataclass(frozen=True)
class SmoothFitReport:
    """One-sided gradient diagnostics at the boundary, column by column."""

    err_vx: np.ndarray
    err_vy: np.ndarray

    @property
    def max_err_vx(self) -> float:
        return float(self.err_vx.max())

    @property
    def max_err_vy(self) -> float:
        return float(self.err_vy.max())


def smooth_fit_report(surface: ValueSurface, boundary: Optional[FreeBoundary] = None) -> SmoothFitReport:
    """One-sided |v_x - 1| and |v_y| just inside the continuation region.

    Uses the last two continuation nodes of each column for v_x (backward
    difference) and the adjacent belief column (one step deeper into the
    continuation region) for v_y.
    """
    x = surface.grid.x
    y = surface.grid.y
    v = surface.v
    h_y = surface.grid.h_y
    n_y = len(y)
    err_vx = np.zeros(n_y)
    err_vy = np.zeros(max(n_y - 1, 1))
    for j in range(n_y):
        gap = x - v[:, j]
        hit = np.nonzero(gap <= 1e-8 * (1.0 + x))[0]
        hit = hit[hit > 0]
        if hit.size == 0:
            raise BoundaryNotFound(f"no stopping node in belief column y={y[j]:.6g}")
        k = int(hit[0])
        if k >= 2:
            vx = (v[k - 1, j] - v[k - 2, j]) / (x[k - 1] - x[k - 2])
            err_vx[j] = abs(vx - 1.0)
        if j < n_y - 1:
            err_vy[j] = abs((v[k - 1, j + 1] - v[k - 1, j]) / h_y)
    return SmoothFitReport(err_vx=err_vx, err_vy=err_vy)


def _fmt(v: float) -> str:
    return repr(float(v))


def surface_to_csv(surface: ValueSurface, file) -> None:
    """Long-format export: x, y, v, region."""
    w = csv.writer(file)
    w.writerow(["x", "y", "v", "region"])
    x = surface.grid.x
    y = surface.grid.y
    for i in range(len(x)):
        for j in range(len(y)):
            w.writerow([_fmt(x[i]), _fmt(y[j]), _fmt(surface.v[i, j]),
                        "stop" if surface.region[i, j] else "continue"])


def boundary_to_csv(boundary: FreeBoundary, file) -> None:
    w = csv.writer(file)
    w.writerow(["y", "d", "zeta_lower", "x_star_lower", "x_star_upper"])
    for j in range(len(boundary.y)):
        w.writerow([
            _fmt(boundary.y[j]), _fmt(boundary.d[j]), _fmt(boundary.zeta[j]),
            _fmt(boundary.x_star_lower), _fmt(boundary.x_star_upper),
        ])
