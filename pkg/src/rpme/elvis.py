"""Maximum-entropy moment test: TS_n = n inf_gamma hbar' OmegaInv hbar.

The tilted per-household moment averages come from the sampler's recorded
streams, so every objective evaluation is a cheap deterministic replay.
The minimization runs a convex warm start (sample log-partition), a
two-step GMM seed, differential evolution over a box, and a
derivative-free local polish; the statistic is the smallest objective
value seen anywhere, compared against a chi-square with one degree of
freedom per centering moment.
"""

from dataclasses import dataclass, field
import math
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp
from scipy.stats import chi2

from .panel import EffectivePricePanel, ModelSpec, Observation
from .moments import MomentSpec
from .sampler import ChainConfig, MomentIntegrator, _derive_key

DEFAULT_BOX = 50.0
PINV_RTOL = 1e-10


@dataclass
class TestResult:
    """Outcome of a TS_n minimization."""

    ts: float
    q: int
    p_value: float
    gamma_hat: np.ndarray
    evaluations: int
    warm_start: np.ndarray
    converged: bool = True
    per_household_moments: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ts = max(float(self.ts), 0.0)
        self.p_value = float(chi2.sf(self.ts, self.q))


def _as_integrator(data, cfg: ChainConfig, mspec: MomentSpec,
                   spec: ModelSpec, e_next=None) -> MomentIntegrator:
    if isinstance(data, MomentIntegrator):
        return data
    if isinstance(data, EffectivePricePanel):
        data = data.observations()
    return MomentIntegrator(list(data), spec, mspec, cfg, e_next=e_next)


def generalized_inverse(omega: np.ndarray,
                        rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix.

    Eigenvalues below rtol * max eigenvalue are truncated to zero;
    asymmetry beyond 1e-8 (relative) is an error.
    """
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise ValueError("generalized_inverse needs a square matrix")
    scale = max(1.0, float(np.abs(omega).max()))
    if np.abs(omega - omega.T).max() > 1e-8 * scale:
        raise ValueError("matrix is not symmetric")
    sym = 0.5 * (omega + omega.T)
    vals, vecs = np.linalg.eigh(sym)
    cut = rtol * max(vals.max(initial=0.0), 0.0)
    inv = np.where(vals > cut, 1.0 / np.where(vals > cut, vals, 1.0), 0.0)
    return (vecs * inv) @ vecs.T


def sample_moment_and_variance(data, gamma: np.ndarray, cfg: ChainConfig,
                               mspec: MomentSpec, spec: ModelSpec):
    """(hbar, Omega) at gamma: mean and centered covariance over households."""
    integ = _as_integrator(data, cfg, mspec, spec)
    h = integ.h_matrix(np.asarray(gamma, dtype=float))
    hbar = h.mean(axis=0)
    centered = h - hbar
    omega = centered.T @ centered / h.shape[0]
    return hbar, 0.5 * (omega + omega.T)


def _ts_value(h: np.ndarray) -> float:
    n = h.shape[0]
    hbar = h.mean(axis=0)
    centered = h - hbar
    omega = centered.T @ centered / n
    omega = 0.5 * (omega + omega.T)
    return float(n * hbar @ generalized_inverse(omega) @ hbar)


def objective(gamma: np.ndarray, data, cfg: ChainConfig, mspec: MomentSpec,
              spec: ModelSpec) -> float:
    """n * hbar(gamma)' OmegaInv(gamma) hbar(gamma)."""
    integ = _as_integrator(data, cfg, mspec, spec)
    return _ts_value(integ.h_matrix(np.asarray(gamma, dtype=float)))


def convex_warm_start(data, cfg: ChainConfig, mspec: MomentSpec,
                      spec: ModelSpec, max_cycles: int = 4,
                      tol: float = 1e-4):
    """Minimize the sample log-partition by coordinate descent.

    (1/n) sum_i log E_eta[exp(gamma'g_M)|x_i] is convex in gamma; its
    minimizer solves the first-order centering condition and seeds the
    global phase.  Returns (gamma0, diverged).
    """
    integ = _as_integrator(data, cfg, mspec, spec)
    g = integ.thinned_moments(max_states=512)  # [n, K, q]
    n, _, q = g.shape
    gamma = np.zeros(q)
    terms = np.zeros(g.shape[:2])  # gamma'g per (household, state)

    def value_for(k, xk):
        delta = terms + (xk - gamma[k]) * g[:, :, k]
        return float(np.mean(logsumexp(delta, axis=1)))

    diverged = False
    for _ in range(max_cycles):
        moved = 0.0
        for k in range(q):
            span = 8.0
            lo, hi = gamma[k] - span, gamma[k] + span
            while True:
                res = optimize.minimize_scalar(
                    lambda xk: value_for(k, xk), bounds=(lo, hi),
                    method="bounded", options={"xatol": 1e-5})
                xk = float(res.x)
                at_edge = min(xk - lo, hi - xk) < 1e-3 * (hi - lo)
                if not at_edge:
                    break
                span *= 4.0
                if span > 1e6:
                    diverged = True
                    xk = float(np.clip(xk, -1e6, 1e6))
                    break
                lo, hi = xk - span, xk + span
            moved = max(moved, abs(xk - gamma[k]))
            terms += (xk - gamma[k]) * g[:, :, k]
            gamma[k] = xk
        if moved < tol or diverged:
            break
    return gamma, diverged


def _two_step_gmm(integ: MomentIntegrator, box: float, seed_key: int,
                  counter: list) -> np.ndarray:
    """Minimize hbar'hbar, then one re-weighted pass from that point."""
    q = integ.q

    def identity_obj(gamma):
        counter[0] += 1
        hbar = integ.h_matrix(gamma).mean(axis=0)
        return float(hbar @ hbar)

    res1 = optimize.differential_evolution(
        identity_obj, [(-box, box)] * q, maxiter=8, popsize=6, tol=1e-7,
        seed=seed_key, polish=False, init="latinhypercube")
    gamma1 = res1.x
    hbar, omega = _moments_at(integ, gamma1)
    weight = generalized_inverse(omega)

    def weighted_obj(gamma):
        counter[0] += 1
        hb = integ.h_matrix(gamma).mean(axis=0)
        return float(hb @ weight @ hb)

    res2 = optimize.minimize(weighted_obj, gamma1, method="COBYQA",
                             options={"maxfev": 25 * q})
    return np.clip(res2.x, -box, box)


def _moments_at(integ: MomentIntegrator, gamma: np.ndarray):
    h = integ.h_matrix(gamma)
    hbar = h.mean(axis=0)
    centered = h - hbar
    omega = centered.T @ centered / h.shape[0]
    return hbar, 0.5 * (omega + omega.T)


def minimize_ts(data, cfg: ChainConfig, mspec: MomentSpec, spec: ModelSpec,
                box: float = DEFAULT_BOX, include_moments: bool = False,
                de_maxiter: int = 12, de_popsize: int = 7,
                local_budget: int = 60) -> TestResult:
    """Global + local minimization of the sample objective.

    Differential evolution over [-box, box]^q seeded with 0, the convex
    warm start and the two-step GMM point, then a derivative-free local
    polish; the box doubles (up to three times) if the minimizer pins to
    its boundary.  TS_n is the smallest value seen at any evaluation.
    """
    integ = _as_integrator(data, cfg, mspec, spec)
    q = integ.q
    n = integ.n
    evals = [0]
    best = {"ts": math.inf, "gamma": np.zeros(q)}

    def ts_at(gamma):
        gamma = np.asarray(gamma, dtype=float)
        evals[0] += 1
        val = _ts_value(integ.h_matrix(gamma))
        if val < best["ts"]:
            best["ts"] = val
            best["gamma"] = gamma.copy()
        return val

    warm, diverged = convex_warm_start(integ, cfg, mspec, spec)
    warm_clipped = np.clip(warm, -box, box)
    gmm_seed = _two_step_gmm(integ, box, _derive_key(cfg.seed, 0, 3) % 2**31,
                             evals)

    boundary = False
    cur_box = box
    for expansion in range(4):
        seeds = [np.zeros(q), np.clip(warm_clipped, -cur_box, cur_box),
                 np.clip(gmm_seed, -cur_box, cur_box),
                 np.clip(best["gamma"], -cur_box, cur_box)]
        rng = np.random.default_rng(_derive_key(cfg.seed, expansion, 4))
        n_pop = max(5, de_popsize * q)
        init = np.vstack(seeds + [rng.uniform(-cur_box, cur_box,
                                              size=(n_pop - len(seeds), q))])
        result = optimize.differential_evolution(
            ts_at, [(-cur_box, cur_box)] * q, maxiter=de_maxiter,
            popsize=de_popsize, tol=1e-6, init=init, polish=False,
            seed=_derive_key(cfg.seed, expansion, 5) % 2**31)
        optimize.minimize(ts_at, best["gamma"], method="COBYQA",
                          bounds=optimize.Bounds(-cur_box * np.ones(q),
                                                 cur_box * np.ones(q)),
                          options={"maxfev": local_budget * q})
        boundary = bool(np.any(np.abs(best["gamma"]) > 0.98 * cur_box))
        if not boundary:
            break
        cur_box *= 2.0

    gamma_hat = best["gamma"]
    hbar, omega = _moments_at(integ, gamma_hat)
    eigvals = np.linalg.eigvalsh(omega)
    result = TestResult(
        ts=best["ts"], q=q, p_value=0.0, gamma_hat=gamma_hat,
        evaluations=evals[0], warm_start=warm,
        converged=not (boundary or diverged),
        per_household_moments=integ.h_matrix(gamma_hat).copy()
        if include_moments else None,
        diagnostics={
            "omega_eig_min": float(eigvals.min()),
            "omega_eig_max": float(eigvals.max()),
            "box": cur_box,
            "boundary": boundary,
            "warm_start_diverged": diverged,
            "n": n,
            "acceptance_rate_mean": float(integ.acceptance_rates.mean()),
        })
    return result


def confidence_set(data, cfg: ChainConfig, mspec: MomentSpec,
                   spec: ModelSpec, theta_grid: Sequence,
                   build_mspec, alpha: float = 0.05,
                   box: float = DEFAULT_BOX, **opt_kw):
    """Invert the test over a theta grid: accept iff TS <= chi2 critical.

    ``build_mspec(theta)`` maps a grid point to the full MomentSpec (same
    component structure for every theta, so the streams are reused).
    Returns (accepted thetas, TestResult list, critical value).
    """
    thetas = list(theta_grid)
    if not thetas:
        raise ValueError("empty theta grid")
    integ = _as_integrator(data, cfg, build_mspec(thetas[0]), spec)
    q_ext = integ.q
    crit = float(chi2.ppf(1.0 - alpha, q_ext))
    accepted, results = [], []
    for theta in thetas:
        integ.update_theta(build_mspec(theta))
        res = minimize_ts(integ, cfg, integ.mspec, spec, box=box, **opt_kw)
        results.append(res)
        if res.ts <= crit:
            accepted.append(theta)
    return accepted, results, crit
