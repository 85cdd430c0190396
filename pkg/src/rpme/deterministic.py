"""Deterministic rationalizability tests: Afriat feasibility, grid scans, GARP.

All tests run on effective prices.  Feasibility is decided by a linear
program that minimizes the worst normalized violation of the Afriat
system; a data set passes when that minimum is <= 1e-9 (each inequality
is normalized by max(1, |rho_t'(c_t - c_s)|) so the tolerance is scale
free).  The LP always returns a witness (v, lambda) alongside the verdict.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .panel import Model, ModelSpec

FEAS_RTOL = 1e-9

DEFAULT_GRID = np.round(np.arange(0.10, 1.0 + 1e-12, 0.05), 10)


@dataclass(frozen=True)
class AfriatResult:
    """Outcome of one Afriat feasibility LP."""

    feasible: bool
    v: np.ndarray
    lam: Optional[np.ndarray]
    margin: float  # negative of the minimized worst normalized violation
    d: Optional[float] = None
    d_b: Optional[float] = None
    v_b: Optional[np.ndarray] = None


@dataclass(frozen=True)
class GarpResult:
    consistent: bool
    violating_cycle: Optional[tuple[int, ...]]


@dataclass(frozen=True)
class BrowningResult:
    """Grid scan of Afriat feasibility over candidate discount factors."""

    passes: bool
    passing_d: np.ndarray
    grid: np.ndarray


@dataclass(frozen=True)
class SlacknessReport:
    epsilon: np.ndarray  # [T, T], diagonal is nan
    min_epsilon: float
    beta_c: float
    beta_p: float
    max_safe_perturbation: float


def _pair_gaps(rho: np.ndarray, c: np.ndarray) -> np.ndarray:
    """a[t, s] = rho_t'(c_t - c_s)."""
    inner = rho @ c.T  # inner[t, s] = rho_t'c_s
    return np.diag(inner)[:, None] - inner


def afriat_feasible(rho, c, spec: ModelSpec, d=None, rtol: float = FEAS_RTOL) -> AfriatResult:
    """Decide Afriat-system feasibility by LP and return a witness.

    Static: exists v >= 1, lam >= 1 with v_t - v_s >= lam_t rho_t'(c_t-c_s).
    ED (fixed d): exists v >= 1 with v_t - v_s >= rho_t'(c_t-c_s)/d^t.
    Collective (fixed pair d=(d_a, d_b)): exists v_a, v_b >= 1 with
    d_a^t(v_at-v_as) + d_b^t(v_bt-v_bs) >= rho_t'(c_t-c_s).

    The LP minimizes the worst normalized violation m (bounded below by -1);
    feasible iff the optimum is <= rtol.
    """
    rho = np.asarray(rho, dtype=float)
    c = np.asarray(c, dtype=float)
    if rho.ndim != 2 or rho.shape != c.shape:
        raise ValueError(f"rho/c must be matching [T, L] arrays, "
                         f"got {rho.shape} vs {c.shape}")
    T = rho.shape[0]
    a = _pair_gaps(rho, c)
    model = spec.model

    if model is Model.COLLECTIVE:
        if d is None:
            raise ValueError("collective feasibility needs a (d_a, d_b) pair")
        d_a, d_b = (float(d[0]), float(d[1])) if np.ndim(d) else (float(d), float(d))
        return _collective_lp(a, T, d_a, d_b, rtol)

    if model in (Model.ED, Model.ED_IU):
        if d is None:
            raise ValueError(f"{model.value} feasibility needs a discount factor d")
        d = float(d)
        if not 0.0 < d <= 1.0:
            raise ValueError(f"d must lie in (0, 1], got {d}")
        b = a / d ** np.arange(T)[:, None]
        # Rows: -v_t + v_s - m*norm <= -b[t,s]; variables [v (T), m].
        n_pairs = T * (T - 1)
        A = np.zeros((n_pairs, T + 1))
        rhs = np.zeros(n_pairs)
        k = 0
        for t in range(T):
            for s in range(T):
                if s == t:
                    continue
                norm = max(1.0, abs(b[t, s]))
                A[k, t] = -1.0
                A[k, s] = 1.0
                A[k, T] = -norm
                rhs[k] = -b[t, s]
                k += 1
        obj = np.zeros(T + 1)
        obj[T] = 1.0
        bounds = [(1.0, None)] * T + [(-1.0, None)]
        res = linprog(obj, A_ub=A, b_ub=rhs, bounds=bounds, method="highs")
        if res.status != 0:
            raise RuntimeError(f"feasibility LP failed: {res.message}")
        m = float(res.x[T])
        return AfriatResult(feasible=m <= rtol, v=res.x[:T].copy(),
                            lam=np.ones(T), margin=-m, d=d)

    # Static: variables [v (T), lam (T), m].
    n_pairs = T * (T - 1)
    A = np.zeros((n_pairs, 2 * T + 1))
    rhs = np.zeros(n_pairs)
    k = 0
    for t in range(T):
        for s in range(T):
            if s == t:
                continue
            norm = max(1.0, abs(a[t, s]))
            A[k, t] = -1.0
            A[k, s] = 1.0
            A[k, T + t] = a[t, s]
            A[k, 2 * T] = -norm
            k += 1
    obj = np.zeros(2 * T + 1)
    obj[2 * T] = 1.0
    bounds = [(1.0, None)] * (2 * T) + [(-1.0, None)]
    res = linprog(obj, A_ub=A, b_ub=rhs, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"feasibility LP failed: {res.message}")
    m = float(res.x[2 * T])
    return AfriatResult(feasible=m <= rtol, v=res.x[:T].copy(),
                        lam=res.x[T:2 * T].copy(), margin=-m)


def _collective_lp(a: np.ndarray, T: int, d_a: float, d_b: float,
                   rtol: float) -> AfriatResult:
    # Variables [v_a (T), v_b (T), m]; rows
    # -d_a^t(v_at - v_as) - d_b^t(v_bt - v_bs) - m*norm <= -a[t,s].
    n_pairs = T * (T - 1)
    A = np.zeros((n_pairs, 2 * T + 1))
    rhs = np.zeros(n_pairs)
    k = 0
    for t in range(T):
        wa, wb = d_a ** t, d_b ** t
        for s in range(T):
            if s == t:
                continue
            norm = max(1.0, abs(a[t, s]))
            A[k, t] = -wa
            A[k, s] = wa
            A[k, T + t] = -wb
            A[k, T + s] = wb
            A[k, 2 * T] = -norm
            rhs[k] = -a[t, s]
            k += 1
    obj = np.zeros(2 * T + 1)
    obj[2 * T] = 1.0
    bounds = [(1.0, None)] * (2 * T) + [(-1.0, None)]
    res = linprog(obj, A_ub=A, b_ub=rhs, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"feasibility LP failed: {res.message}")
    m = float(res.x[2 * T])
    return AfriatResult(feasible=m <= rtol, v=res.x[:T].copy(), lam=None,
                        margin=-m, d=d_a, d_b=d_b, v_b=res.x[T:2 * T].copy())


def browning_grid_test(rho, c, spec: ModelSpec, grid: Optional[Sequence[float]] = None,
                       grid_b: Optional[Sequence[float]] = None) -> BrowningResult:
    """Scan Afriat feasibility over a discount-factor grid.

    ED passes iff some grid point is feasible; the collective variant scans
    the (d_a, d_b) product grid and records passing d_a values.  The static
    model has no discount factor and reduces to a single feasibility test.
    """
    grid = DEFAULT_GRID if grid is None else np.asarray(list(grid), dtype=float)
    if grid.size == 0:
        raise ValueError("empty discount grid")
    if np.any((grid <= 0) | (grid > 1)):
        raise ValueError("grid values must lie in (0, 1]")

    if spec.model is Model.STATIC:
        res = afriat_feasible(rho, c, spec)
        passing = np.array([1.0]) if res.feasible else np.array([])
        return BrowningResult(passes=res.feasible, passing_d=passing,
                              grid=np.array([1.0]))

    if spec.model is Model.COLLECTIVE:
        grid_b = grid if grid_b is None else np.asarray(list(grid_b), dtype=float)
        passing = []
        for da in grid:
            if any(afriat_feasible(rho, c, spec, d=(da, db)).feasible
                   for db in grid_b):
                passing.append(da)
        passing = np.array(passing)
        return BrowningResult(passes=passing.size > 0, passing_d=passing, grid=grid)

    # ED scan: the system at fixed d has unit lambda, so LP feasibility
    # "worst normalized violation <= rtol" is equivalent to plain
    # difference-constraint feasibility after granting each inequality its
    # normalized slack.  Bellman-Ford decides that in O(T^3) per grid point,
    # which is what makes million-household replication sweeps practical.
    from . import _mcmc

    rho = np.asarray(rho, dtype=float)
    c = np.asarray(c, dtype=float)
    a = _pair_gaps(rho, c)
    powers = np.arange(rho.shape[0], dtype=float)[:, None]
    passing = []
    for d in grid:
        b = a / float(d) ** powers
        slack = FEAS_RTOL * np.maximum(1.0, np.abs(b))
        ok, _ = _mcmc.potentials_feasible(b - slack, 0.0)
        if ok:
            passing.append(float(d))
    passing = np.array(passing)
    return BrowningResult(passes=passing.size > 0, passing_d=passing, grid=grid)


def check_garp(rho, c, strict_rtol: float = 1e-12) -> GarpResult:
    """Test the generalized axiom of revealed preference.

    t directly reveals-preferred s when rho_t'c_t >= rho_t'c_s, strictly so
    when the gap exceeds strict_rtol * rho_t'c_t.  Consistency fails when the
    transitive closure contains t ->* s together with a strict s -> t edge;
    the reported cycle lists periods in order, closing back to the first.
    """
    rho = np.asarray(rho, dtype=float)
    c = np.asarray(c, dtype=float)
    if rho.ndim != 2 or rho.shape != c.shape:
        raise ValueError(f"rho/c must be matching [T, L] arrays, "
                         f"got {rho.shape} vs {c.shape}")
    T = rho.shape[0]
    inner = rho @ c.T
    own = np.diag(inner)
    weak = own[:, None] >= inner  # weak[t, s]: t directly r.p. to s
    strict = (own[:, None] - inner) > strict_rtol * own[:, None]
    np.fill_diagonal(strict, False)

    reach = weak.copy()
    np.fill_diagonal(reach, True)
    for k in range(T):  # Floyd-Warshall boolean closure
        reach |= reach[:, k][:, None] & reach[k, :][None, :]

    for t in range(T):
        for s in range(T):
            if t != s and reach[t, s] and strict[s, t]:
                return GarpResult(consistent=False,
                                  violating_cycle=_weak_path(weak, t, s) + (t,))
    return GarpResult(consistent=True, violating_cycle=None)


def _weak_path(weak: np.ndarray, t: int, s: int) -> tuple[int, ...]:
    """Shortest directed path t -> ... -> s in the weak relation (BFS)."""
    if t == s:
        return (t,)
    T = weak.shape[0]
    prev = {t: None}
    frontier = [t]
    while frontier:
        nxt = []
        for u in frontier:
            for w in range(T):
                if w != u and weak[u, w] and w not in prev:
                    prev[w] = u
                    if w == s:
                        path = [s]
                        while prev[path[-1]] is not None:
                            path.append(prev[path[-1]])
                        return tuple(reversed(path))
                    nxt.append(w)
        frontier = nxt
    raise RuntimeError("closure claimed a path the weak relation lacks")


def slackness_bound(rho, c, witness: AfriatResult, spec: ModelSpec,
                    rtol: float = FEAS_RTOL) -> SlacknessReport:
    """Measure how robust a rationalizing witness is to measurement error.

    epsilon[t, s] = (delta_t/lam_t)(v_t - v_s) - rho_t'(c_t - c_s) must be
    nonnegative for a valid witness; the report's max_safe_perturbation is
    the largest common error magnitude alpha with
    min epsilon >= 6 * max(alpha*beta_c, alpha*beta_p, alpha^2), where
    beta_c, beta_p are the largest Euclidean norms of the quantity and
    price vectors.
    """
    rho = np.asarray(rho, dtype=float)
    c = np.asarray(c, dtype=float)
    T = rho.shape[0]
    a = _pair_gaps(rho, c)
    if spec.model is Model.COLLECTIVE:
        if witness.v_b is None or witness.d_b is None:
            raise ValueError("collective slackness needs a collective witness")
        da = witness.d ** np.arange(T)
        db = witness.d_b ** np.arange(T)
        gaps = (da[:, None] * (witness.v[:, None] - witness.v[None, :])
                + db[:, None] * (witness.v_b[:, None] - witness.v_b[None, :]))
        eps = gaps - a
    else:
        lam = np.ones(T) if witness.lam is None else witness.lam
        delta = np.ones(T) if witness.d is None else witness.d ** np.arange(T)
        eps = (delta / lam)[:, None] * (witness.v[:, None] - witness.v[None, :]) - a
    np.fill_diagonal(eps, np.nan)
    min_eps = float(np.nanmin(eps))
    norms = max(1.0, float(np.nanmax(np.abs(a))))
    if min_eps < -rtol * norms:
        raise ValueError(f"witness violates the Afriat system "
                         f"(min slack {min_eps:.3e})")
    min_eps = max(min_eps, 0.0)
    beta_c = float(np.max(np.linalg.norm(c, axis=1)))
    beta_p = float(np.max(np.linalg.norm(rho, axis=1)))
    m = min_eps / 6.0
    alpha = min(m / beta_c if beta_c > 0 else np.inf,
                m / beta_p if beta_p > 0 else np.inf,
                np.sqrt(m))
    return SlacknessReport(epsilon=eps, min_epsilon=min_eps, beta_c=beta_c,
                           beta_p=beta_p, max_safe_perturbation=float(alpha))
