"""Conditional regime distribution from observed (X0, eta).

Implements the Kushner-Stratonovich recursion driven by the two innovation
increments, in the general Q-state jump form and in the scalar two-regime
diffusive reduction, plus a bootstrap particle filter used as an independent
oracle.  Between indicator jumps the filter diffuses; at a jump it is
reweighted by the Bayes rule on the observed mark.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from .errors import (
    DegenerateSigma2,
    ModelValidationError,
    NotTwoRegime,
    UnmatchableJump,
    WeightCollapse,
)
from .model import ModelParams, SamplePath, alpha_fn

logger = logging.getLogger(__name__)

CLIP_EPS = 1e-8
MARK_MATCH_TOL = 1e-9
SIMPLEX_TOL = 1e-10


@dataclass(frozen=True)
class FilterState:
    """Point on the probability simplex over regimes at a given time."""

    t: float
    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        object.__setattr__(self, "pi", pi)
        if abs(pi.sum() - 1.0) > SIMPLEX_TOL or np.any(pi < 0) or np.any(pi > 1):
            raise ModelValidationError(f"filter state off the simplex: {pi!r}")


@dataclass(frozen=True)
class InnovationIncrements:
    """One step of the two innovation Brownian motions."""

    dI: float
    dI1: float


@dataclass(frozen=True)
class Observations:
    """Observable columns of a trajectory; deliberately carries no regime data."""

    t: np.ndarray
    x0: np.ndarray
    eta: np.ndarray
    jump_mark: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @classmethod
    def from_sample_path(cls, path: SamplePath) -> "Observations":
        return cls(t=path.t, x0=path.x0, eta=path.eta, jump_mark=path.jump_mark)

    @classmethod
    def from_csv(cls, file) -> "Observations":
        """Read the path export schema, consuming only observable columns."""
        reader = csv.DictReader(file)
        t, x0, eta, marks = [], [], [], []
        for row in reader:
            t.append(float(row["t"]))
            x0.append(float(row["x0"]))
            eta.append(float(row["eta"]))
            m = row.get("jump_mark", "")
            marks.append(float(m) if m not in ("", None) else np.nan)
        return cls(t=np.array(t), x0=np.array(x0), eta=np.array(eta), jump_mark=np.array(marks))


@dataclass(frozen=True)
class FilterPath:
    """Filtered trajectory: pi[k] is the conditional distribution at t[k].

    dI/dI1 hold the innovation increment over the step ending at each row
    (zero in the first row).
    """

    t: np.ndarray
    pi: np.ndarray
    dI: np.ndarray
    dI1: np.ndarray


def innovations_from_observations(
    params: ModelParams,
    x0: float,
    dx0: float,
    eta: float,
    deta_cont: float,
    state: FilterState,
    dt: float,
) -> InnovationIncrements:
    """Invert the observation dynamics for the innovation increments.

    dI  = dX0 / (sigma X0) - pi(beta)/sigma * dt
    dI1 = (deta_cont - pi(b1(eta, .)) dt - sigma1(eta) dI) / sigma2(eta)

    ``deta_cont`` excludes any jump mark.
    """
    if x0 <= 0:
        raise ModelValidationError("X0 must be positive")
    beta = params.r - params.g
    pib = float(state.pi @ beta)
    dI = dx0 / (params.sigma * x0) - pib / params.sigma * dt
    s2 = float(params.sigma2(eta))
    if s2 <= 0:
        raise DegenerateSigma2(f"sigma2({eta}) <= 0")
    b1_all = np.array([float(params.b1(eta, i)) for i in range(params.n_regimes)])
    pib1 = float(state.pi @ b1_all)
    s1 = float(params.sigma1(eta))
    dI1 = (deta_cont - pib1 * dt - s1 * dI) / s2
    return InnovationIncrements(dI=dI, dI1=dI1)


def ks_step_general(
    params: ModelParams,
    state: FilterState,
    eta: float,
    innovations: InnovationIncrements,
    dt: float,
    clip_eps: float = CLIP_EPS,
) -> FilterState:
    """One Euler step of the general filter recursion between jump times.

    Drift combines the chain generator with the jump-intensity compensator;
    the two diffusion terms load on the innovation increments through the
    regime spreads of beta and of the signal slope alpha(eta, .).
    """
    pi = state.pi
    q = params.n_regimes
    beta = params.r - params.g
    lam_n = params.lambda_n
    c_vals = np.array([float(params.c(eta, i)) for i in range(q)])
    active = (c_vals != 0.0).astype(float)
    alph = np.array([float(alpha_fn(params, eta, i)) for i in range(q)])

    gen_drift = pi @ params.generator.rates
    comp = lam_n * active
    jump_drift = -pi * (comp - float(pi @ comp))
    pib = float(pi @ beta)
    pia = float(pi @ alph)
    diff_I = pi * (beta - pib) / params.sigma
    diff_I1 = pi * (alph - pia)
    pi_new = pi + (gen_drift + jump_drift) * dt + diff_I * innovations.dI + diff_I1 * innovations.dI1
    pi_new = np.clip(pi_new, clip_eps, 1.0 - clip_eps)
    pi_new = pi_new / pi_new.sum()
    return FilterState(t=state.t + dt, pi=pi_new)


def ks_step_two_regime(
    params: ModelParams,
    state: FilterState,
    innovations: InnovationIncrements,
    dt: float,
    clip_eps: float = CLIP_EPS,
) -> FilterState:
    """Scalar Euler step of the two-regime diffusive reduction.

    dp = [lam2 - (lam1+lam2) p] dt + p(1-p) [ (beta1-beta2)/sigma dI
                                              + (alpha1-alpha2) dI1 ].
    """
    params.require_two_regime("ks_step_two_regime")
    lam1 = params.generator.rates[0, 1]
    lam2 = params.generator.rates[1, 0]
    beta = params.beta
    a1, a2 = params.alpha
    p = float(state.pi[0])
    drift = lam2 - (lam1 + lam2) * p
    diff = p * (1.0 - p)
    p_new = p + drift * dt + diff * ((beta[0] - beta[1]) / params.sigma * innovations.dI + (a1 - a2) * innovations.dI1)
    p_new = min(max(p_new, clip_eps), 1.0 - clip_eps)
    return FilterState(t=state.t + dt, pi=np.array([p_new, 1.0 - p_new]))


def ks_jump_update(
    params: ModelParams,
    state_pre: FilterState,
    eta_pre: float,
    mark: float,
    tol_match: float = MARK_MATCH_TOL,
) -> FilterState:
    """Bayes reweighting of the filter at an observed indicator jump.

    pi(i) <- lam_n(i) pi-(i) 1{mark = c(eta-, i)} / normalizer.  Mark
    matching uses a relative tolerance to guard replayed data; simulated
    marks match exactly.
    """
    if mark == 0.0:
        raise ModelValidationError("a jump mark must be nonzero")
    q = params.n_regimes
    c_vals = np.array([float(params.c(eta_pre, i)) for i in range(q)])
    matched = np.abs(mark - c_vals) <= tol_match * max(1.0, abs(mark))
    matched &= c_vals != 0.0
    if not matched.any():
        raise UnmatchableJump(
            f"mark {mark!r} matches no regime jump size (candidates {c_vals!r})"
        )
    weights = params.lambda_n * state_pre.pi * matched
    total = weights.sum()
    if total <= 0:
        raise UnmatchableJump("all matching regimes have zero filter mass")
    return FilterState(t=state_pre.t, pi=weights / total)


def run_filter(
    params: ModelParams,
    observations: Observations,
    y0,
    method: str = "auto",
    clip_eps: float = CLIP_EPS,
) -> FilterPath:
    """Filter a full observation path.

    Between jump rows the diffusive recursion advances on the innovation
    increments computed from the observed increments; at a jump row the
    continuous step uses the mark-free part of the eta increment and the
    Bayes update is applied at the pre-jump indicator level.  An unmatched
    mark on ingested data skips the update and logs the event.
    """
    if not params.validated:
        raise ModelValidationError("params must pass validate_params")
    if method == "auto":
        method = "two_regime" if params.two_regime else "general"
    if method == "two_regime":
        params.require_two_regime("run_filter(method='two_regime')")

    t = observations.t
    n = len(t) - 1
    dt = observations.dt
    q = params.n_regimes
    pi0 = np.asarray(y0, dtype=float)
    state = FilterState(t=float(t[0]), pi=pi0)
    pi_out = np.empty((n + 1, q))
    dI_out = np.zeros(n + 1)
    dI1_out = np.zeros(n + 1)
    pi_out[0] = state.pi
    for k in range(n):
        mark = observations.jump_mark[k + 1]
        has_jump = not np.isnan(mark)
        dx0 = observations.x0[k + 1] - observations.x0[k]
        deta = observations.eta[k + 1] - observations.eta[k]
        deta_cont = deta - (mark if has_jump else 0.0)
        innov = innovations_from_observations(
            params, observations.x0[k], dx0, observations.eta[k], deta_cont, state, dt
        )
        if method == "two_regime":
            state = ks_step_two_regime(params, state, innov, dt, clip_eps)
        else:
            state = ks_step_general(params, state, observations.eta[k], innov, dt, clip_eps)
        if has_jump:
            eta_pre = observations.eta[k + 1] - mark
            try:
                state = ks_jump_update(params, state, eta_pre, mark)
            except UnmatchableJump as exc:
                logger.warning("skipping Bayes update at t=%.6g: %s", t[k + 1], exc)
        pi_out[k + 1] = state.pi
        dI_out[k + 1] = innov.dI
        dI1_out[k + 1] = innov.dI1
    return FilterPath(t=t.copy(), pi=pi_out, dI=dI_out, dI1=dI1_out)


def particle_filter_oracle(
    params: ModelParams,
    observations: Observations,
    y0,
    n_particles: int,
    rng: np.random.Generator,
    resample_fraction: float = 0.5,
) -> FilterPath:
    """Bootstrap particle filter over the hidden regime.

    Regime particles propagate by the exact one-step chain kernel; weights
    multiply the joint Gaussian likelihood of the two observed increments
    (correlated through the shared debt-ratio noise), the jump-survival
    factor, and the mark likelihood at jump rows; systematic resampling
    triggers when the effective sample size drops below
    ``resample_fraction * n_particles``.
    """
    if n_particles < 10_000:
        raise ModelValidationError("the oracle contract requires n_particles >= 10000")
    if not params.validated:
        raise ModelValidationError("params must pass validate_params")
    t = observations.t
    n = len(t) - 1
    dt = observations.dt
    q = params.n_regimes
    trans = params.generator.transition_matrix(dt)
    cum_trans = np.cumsum(trans, axis=1)
    beta = params.r - params.g

    pi0 = np.asarray(y0, dtype=float)
    z = rng.choice(q, size=n_particles, p=pi0 / pi0.sum())
    w = np.full(n_particles, 1.0 / n_particles)
    pi_out = np.empty((n + 1, q))
    pi_out[0] = pi0
    for k in range(n):
        u = rng.random(n_particles)
        z = (u[:, None] < cum_trans[z]).argmax(axis=1)

        x_k = observations.x0[k]
        eta_k = observations.eta[k]
        dx0 = observations.x0[k + 1] - x_k
        mark = observations.jump_mark[k + 1]
        has_jump = not np.isnan(mark)
        deta_cont = observations.eta[k + 1] - eta_k - (mark if has_jump else 0.0)

        s1 = float(params.sigma1(eta_k))
        s2 = float(params.sigma2(eta_k))
        b1_all = np.array([float(params.b1(eta_k, i)) for i in range(q)])
        mu_x = beta[z] * x_k * dt
        dw_implied = (dx0 - mu_x) / (params.sigma * x_k)
        res2 = deta_cont - b1_all[z] * dt - s1 * dw_implied
        logw = -0.5 * dw_implied**2 / dt - 0.5 * res2**2 / (s2**2 * dt)

        if params.jumps_possible:
            c_pre_level = observations.eta[k + 1] - mark if has_jump else eta_k
            c_all = np.array([float(params.c(c_pre_level, i)) for i in range(q)])
            active_k = np.array([float(params.c(eta_k, i)) != 0.0 for i in range(q)])
            logw -= params.lambda_n[z] * active_k[z] * dt
            if has_jump:
                matched = np.abs(mark - c_all) <= MARK_MATCH_TOL * max(1.0, abs(mark))
                matched &= c_all != 0.0
                with np.errstate(divide="ignore"):
                    logw += np.where(matched[z], np.log(params.lambda_n[z]), -np.inf)

        logw = logw - logw.max() if np.isfinite(logw.max()) else logw
        w = w * np.exp(logw)
        total = w.sum()
        if not np.isfinite(total) or total <= 0.0:
            raise WeightCollapse(f"particle weights underflowed at t={t[k + 1]:.6g}")
        w = w / total
        ess = 1.0 / float(w @ w)
        if ess < resample_fraction * n_particles:
            pos = (rng.random() + np.arange(n_particles)) / n_particles
            idx = np.searchsorted(np.cumsum(w), pos)
            z = z[np.minimum(idx, n_particles - 1)]
            w = np.full(n_particles, 1.0 / n_particles)
        pi_out[k + 1] = np.bincount(z, weights=w, minlength=q)
    return FilterPath(t=t.copy(), pi=pi_out, dI=np.zeros(n + 1), dI1=np.zeros(n + 1))


def simulate_filter_ensemble(
    params: ModelParams,
    n_paths: int,
    horizon: float,
    dt: float,
    y0,
    x0: float,
    eta0: float,
    seed: int,
    snapshot_times: Sequence[float] = (),
    collect_increments: bool = False,
) -> dict:
    """Simulate hidden-regime paths and filter them, vectorized across paths.

    Supports diffusive-indicator models (no jump marks); regimes advance by
    the exact one-step chain kernel, which shares the law of the
    event-driven sampler at grid times.  Returns snapshots of (pi, z) at the
    requested times and, optionally, pooled innovation-increment moments.

    Randomness comes from one counter-based stream keyed by ``seed``;
    results are reproducible for a fixed (seed, n_paths).
    """
    if not params.validated:
        raise ModelValidationError("params must pass validate_params")
    if params.jumps_possible:
        raise ModelValidationError("ensemble kernel supports diffusive-indicator models only")
    q = params.n_regimes
    n_steps = int(round(horizon / dt))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed)))
    trans = params.generator.transition_matrix(dt)
    cum_trans = np.cumsum(trans, axis=1)
    beta = params.r - params.g
    pi0 = np.asarray(y0, dtype=float)

    z = rng.choice(q, size=n_paths, p=pi0 / pi0.sum())
    x = np.full(n_paths, float(x0))
    eta = np.full(n_paths, float(eta0))
    pi = np.tile(pi0, (n_paths, 1))
    sd = math.sqrt(dt)
    snap_idx = {int(round(tt / dt)): tt for tt in snapshot_times}
    snapshots: Dict[float, Tuple[np.ndarray, np.ndarray]] = {}
    inc_stats = np.zeros(6)  # sums / sums of squares / counts for dI, dI1

    for k in range(n_steps):
        dW = rng.normal(0.0, sd, n_paths)
        dB = rng.normal(0.0, sd, n_paths)
        beta_z = beta[z]
        x_new = x * np.exp((beta_z - 0.5 * params.sigma**2) * dt + params.sigma * dW)
        s1 = np.asarray(params.sigma1(eta), dtype=float)
        s2 = np.asarray(params.sigma2(eta), dtype=float)
        b1_mat = np.stack([np.asarray(params.b1(eta, i), dtype=float) for i in range(q)], axis=1)
        eta_new = eta + b1_mat[np.arange(n_paths), z] * dt + s1 * dW + s2 * dB

        dx = x_new - x
        deta = eta_new - eta
        pib = pi @ beta
        dI = dx / (params.sigma * x) - pib / params.sigma * dt
        pib1 = np.einsum("nq,nq->n", pi, b1_mat)
        dI1 = (deta - pib1 * dt - s1 * dI) / s2

        alph = np.stack([np.asarray(alpha_fn(params, eta, i), dtype=float) for i in range(q)], axis=1)
        pia = np.einsum("nq,nq->n", pi, alph)
        gen_drift = pi @ params.generator.rates
        pi = pi + gen_drift * dt + pi * (beta[None, :] - pib[:, None]) / params.sigma * dI[:, None] \
            + pi * (alph - pia[:, None]) * dI1[:, None]
        pi = np.clip(pi, CLIP_EPS, 1.0 - CLIP_EPS)
        pi = pi / pi.sum(axis=1, keepdims=True)

        u = rng.random(n_paths)
        z = (u[:, None] < cum_trans[z]).argmax(axis=1)
        x, eta = x_new, eta_new
        if collect_increments:
            inc_stats += np.array([dI.sum(), (dI**2).sum(), dI1.sum(), (dI1**2).sum(), n_paths, 0.0])
        if (k + 1) in snap_idx:
            snapshots[snap_idx[k + 1]] = (pi.copy(), z.copy())

    out = {"snapshots": snapshots, "x": x, "eta": eta, "pi": pi, "z": z}
    if collect_increments:
        n_inc = inc_stats[4]
        out["increment_moments"] = {
            "dI_mean": inc_stats[0] / n_inc,
            "dI_var": inc_stats[1] / n_inc - (inc_stats[0] / n_inc) ** 2,
            "dI1_mean": inc_stats[2] / n_inc,
            "dI1_var": inc_stats[3] / n_inc - (inc_stats[2] / n_inc) ** 2,
            "n": n_inc,
        }
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def filter_path_to_csv(fp: FilterPath, file) -> None:
    """Write t, pi_1..pi_Q, dI, dI1."""
    q = fp.pi.shape[1]
    w = csv.writer(file)
    w.writerow(["t"] + [f"pi_{i + 1}" for i in range(q)] + ["dI", "dI1"])
    for k in range(len(fp.t)):
        w.writerow([_fmt(fp.t[k])] + [_fmt(v) for v in fp.pi[k]] + [_fmt(fp.dI[k]), _fmt(fp.dI1[k])])
