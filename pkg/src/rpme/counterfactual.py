"""Out-of-sample demand bounds by test inversion.

The latent system gains a period T+1 with a counterfactual price vector
and no observed quantity.  A hypothesis theta about the extra period
(mean demand, an expenditure quantile, a budget share) enters as one
more centering moment, and the support set collects every theta the
extended test fails to reject.  Chains are run once per household; the
theta grid is swept by replaying the recorded raw features.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.stats import chi2

from .elvis import TestResult, minimize_ts
from .moments import (AverageVarian, BudgetShare, MomentSpec, QuantileVarian)
from .panel import (EffectivePricePanel, ModelSpec, Observation, Panel,
                    effective_prices)
from .sampler import ChainConfig, MomentIntegrator, _derive_key

MOMENT_KINDS = ("avg-varian", "quantile-varian", "budget-share")

# Kinds whose centering moment is affine in the latent draw, so the
# non-rejected set is convex and edge bisection is licensed.
_AFFINE_KINDS = ("avg-varian",)

_PRICE_KEY_PURPOSE = 6
_BISECT_ROUNDS = 10


@dataclass(frozen=True)
class CounterfactualQuery:
    """One out-of-sample question: price regime, moment kind, grid.

    ``rho_T1`` is a positive length-L vector shared by all households,
    an [n, L] array of household-specific regimes, or a callable
    ``f(rng) -> [L]`` sampled i.i.d. across households.  ``extra_support``
    pins counterfactual expenditure rho'_{T+1} c*_{T+1} to a constant
    (scalar or per-household array); without it the extra period is
    expenditure-free.
    """

    rho_T1: Union[np.ndarray, Sequence[float], Callable]
    theta_grid: Sequence
    moment_kind: str = "avg-varian"
    alpha: float = 0.05
    extra_support: Optional[Union[float, np.ndarray]] = None
    phi: float = 0.5
    good: int = 0

    def __post_init__(self):
        if self.moment_kind not in MOMENT_KINDS:
            raise ValueError(f"unknown moment_kind {self.moment_kind!r}; "
                             f"valid: {MOMENT_KINDS}")
        if len(list(self.theta_grid)) == 0:
            raise ValueError("theta_grid must be nonempty")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 < self.phi < 1.0:
            raise ValueError("phi must lie in (0, 1)")

    def component(self, theta):
        if self.moment_kind == "avg-varian":
            return AverageVarian(theta=theta)
        if self.moment_kind == "quantile-varian":
            return QuantileVarian(e_bar=float(theta), phi=self.phi)
        return BudgetShare(good=self.good, theta=float(theta))

    @property
    def affine(self) -> bool:
        return self.moment_kind in _AFFINE_KINDS


@dataclass
class SupportSet:
    """Accepted grid with the evidence behind it."""

    thetas: list
    ts: np.ndarray
    p_values: np.ndarray
    accepted_mask: np.ndarray
    critical_value: float
    dof: int
    alpha: float
    connected: Optional[bool]
    lower: Optional[np.ndarray]
    upper: Optional[np.ndarray]
    results: tuple = field(repr=False, default=())

    @property
    def accepted(self) -> list:
        return [t for t, ok in zip(self.thetas, self.accepted_mask) if ok]

    @property
    def empty(self) -> bool:
        return not bool(self.accepted_mask.any())


def _rho_next_rows(query: CounterfactualQuery, n: int, n_goods: int,
                   seed: int) -> np.ndarray:
    src = query.rho_T1
    if callable(src):
        rng = np.random.default_rng(_derive_key(seed, 0, _PRICE_KEY_PURPOSE))
        rows = np.array([np.asarray(src(rng), dtype=float).reshape(-1)
                         for _ in range(n)])
    else:
        arr = np.asarray(src, dtype=float)
        if arr.ndim == 1:
            rows = np.broadcast_to(arr, (n, arr.size)).copy()
        else:
            rows = arr.copy()
    if rows.shape != (n, n_goods):
        raise ValueError(f"rho_T1 rows have shape {rows.shape}, "
                         f"expected {(n, n_goods)}")
    if not np.all(rows > 0):
        raise ValueError("counterfactual prices must be strictly positive")
    return rows


def _extended_observations(data, query: CounterfactualQuery,
                           spec: ModelSpec, seed: int) -> list[Observation]:
    if isinstance(data, Panel):
        data = effective_prices(data, spec)
    if isinstance(data, EffectivePricePanel):
        n = data.panel.n_households
        rows = _rho_next_rows(query, n, data.panel.n_goods, seed)
        return [data.household(i, rho_next=rows[i]) for i in range(n)]
    obs = list(data)
    rows = _rho_next_rows(query, len(obs), obs[0].c.shape[1], seed)
    return [Observation(household_id=x.household_id, rho=x.rho, c=x.c,
                        rho_next=rows[i]) for i, x in enumerate(obs)]


def _extended_mspec(query: CounterfactualQuery, mspec: MomentSpec,
                    theta) -> MomentSpec:
    tokens = mspec.support_constraints
    if query.extra_support is not None and "walras_next" not in tokens:
        tokens = tokens + ("walras_next",)
    return MomentSpec(mspec.components + (query.component(theta),), tokens)


def _e_next(query: CounterfactualQuery, n: int):
    if query.extra_support is None:
        return None
    arr = np.asarray(query.extra_support, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if arr.shape != (n,) or not np.all(arr > 0):
        raise ValueError("extra_support must be a positive scalar or a "
                         "positive length-n array")
    return arr


def _integrator(data, query: CounterfactualQuery, cfg: ChainConfig,
                mspec: MomentSpec, spec: ModelSpec,
                theta) -> MomentIntegrator:
    obs = _extended_observations(data, query, spec, cfg.seed)
    return MomentIntegrator(obs, spec, _extended_mspec(query, mspec, theta),
                            cfg, e_next=_e_next(query, len(obs)))


def extended_test(data, query: CounterfactualQuery, theta, cfg: ChainConfig,
                  mspec: MomentSpec, spec: ModelSpec, **opt_kw) -> TestResult:
    """Full test outcome for a single counterfactual hypothesis."""
    integ = _integrator(data, query, cfg, mspec, spec, theta)
    return minimize_ts(integ, cfg, integ.mspec, spec, **opt_kw)


def extended_ts(data, query: CounterfactualQuery, theta, cfg: ChainConfig,
                mspec: MomentSpec, spec: ModelSpec, **opt_kw) -> float:
    """TS_n for the RP system augmented with the extra period and theta."""
    return extended_test(data, query, theta, cfg, mspec, spec, **opt_kw).ts


def _theta_matrix(thetas: list) -> np.ndarray:
    return np.array([np.atleast_1d(np.asarray(t, dtype=float))
                     for t in thetas])


def _connected(mask: np.ndarray) -> bool:
    idx = np.flatnonzero(mask)
    return idx.size == 0 or int(idx[-1] - idx[0]) + 1 == idx.size


def support_set(data, query: CounterfactualQuery, cfg: ChainConfig,
                mspec: MomentSpec, spec: ModelSpec, **opt_kw) -> SupportSet:
    """Invert the extended test over the query's theta grid.

    Every grid point is tested against the chi-square critical value at
    the extended dof.  For affine moment kinds the two boundary edges of
    the accepted run are refined by bisection (the non-rejected set is
    convex there), tightening the reported per-coordinate bounds beyond
    the grid resolution.
    """
    thetas = list(query.theta_grid)
    integ = _integrator(data, query, cfg, mspec, spec, thetas[0])
    dof = integ.q
    crit = float(chi2.ppf(1.0 - query.alpha, dof))

    def ts_at(theta) -> TestResult:
        integ.update_theta(_extended_mspec(query, mspec, theta))
        return minimize_ts(integ, cfg, integ.mspec, spec, **opt_kw)

    results = [ts_at(t) for t in thetas]
    ts = np.array([r.ts for r in results])
    pv = np.array([r.p_value for r in results])
    mask = ts <= crit

    connected = None
    if query.affine:
        connected = _connected(mask)
        if not connected:
            warnings.warn("accepted grid for an affine counterfactual "
                          "moment has interior gaps; consider longer "
                          "chains or a finer grid", RuntimeWarning)

    lower = upper = None
    if mask.any():
        pts = _theta_matrix(thetas)[mask]
        lower, upper = pts.min(axis=0), pts.max(axis=0)
        if query.affine and connected:
            lo_edge, hi_edge = _refine_edges(thetas, mask, ts_at, crit)
            if lo_edge is not None:
                lower = np.minimum(lower, lo_edge)
            if hi_edge is not None:
                upper = np.maximum(upper, hi_edge)

    return SupportSet(thetas=thetas, ts=ts, p_values=pv, accepted_mask=mask,
                      critical_value=crit, dof=dof, alpha=query.alpha,
                      connected=connected, lower=lower, upper=upper,
                      results=tuple(results))


def _bisect(inside: np.ndarray, outside: np.ndarray, ts_at, crit: float,
            rounds: int = _BISECT_ROUNDS) -> np.ndarray:
    """Last accepted point on the segment from inside toward outside."""
    a, b = inside.astype(float), outside.astype(float)
    for _ in range(rounds):
        mid = 0.5 * (a + b)
        if ts_at(mid).ts <= crit:
            a = mid
        else:
            b = mid
    return a


def _refine_edges(thetas: list, mask: np.ndarray, ts_at, crit: float):
    pts = _theta_matrix(thetas)
    idx = np.flatnonzero(mask)
    lo_edge = hi_edge = None
    first, last = int(idx[0]), int(idx[-1])
    if first > 0:
        lo_edge = _bisect(pts[first], pts[first - 1], ts_at, crit)
    if last < len(thetas) - 1:
        hi_edge = _bisect(pts[last], pts[last + 1], ts_at, crit)
    return lo_edge, hi_edge
