"""Moment components for the simulation-based rationalizability test.

Two families of restrictions:

* g_I — the Afriat inequalities written as indicator moments taking values
  in {0, -1}; the sampler enforces them as support restrictions, so they
  carry no tilting parameter and no degrees of freedom.
* g_M — centering moments (measurement-error assumptions, martingale
  increments, recoverability and counterfactual contrasts).  Their total
  dimension q is the chi-square degrees of freedom of the test.

Components that depend on a sweep parameter theta expose the raw chain
feature they center (discount factor, consumption slice, counterfactual
expenditure...), which lets confidence sets reuse one simulated chain per
household across an entire theta grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import ClassVar, Optional, Sequence

import numpy as np

from .panel import LatentDraw, Model, ModelSpec, Observation

FEAS_RTOL = 1e-9

# Raw-feature codes shared with the sampler kernels.
RAW_D = 0
RAW_CONS_LEVEL = 1
RAW_CONS_CHANGE = 2
RAW_CONS_NEXT = 3
RAW_EXP_NEXT = 4
RAW_SHARE_NEXT = 5

# Base (theta-free) component codes shared with the sampler kernels.
BASE_BUDGET = 0
BASE_TREMBLE = 1
BASE_MISPERCEPTION = 2
BASE_LOGPRICE = 3
BASE_INSTRUMENT = 4
BASE_MARTINGALE = 5


class MomentNameError(ValueError):
    """Unknown moment name in a CLI/config moment list."""


def _wc(x: Observation, e: LatentDraw) -> np.ndarray:
    return np.zeros_like(x.c) if e.w_c is None else e.w_c


def _wp(x: Observation, e: LatentDraw) -> np.ndarray:
    return np.zeros_like(x.rho) if e.w_p is None else e.w_p


@dataclass(frozen=True)
class Component:
    """Base class; concrete components override the class attributes below."""

    name: ClassVar[str] = ""
    category: ClassVar[str] = "measurement"
    base_code: ClassVar[Optional[int]] = None
    raw_kind: ClassVar[Optional[int]] = None

    @property
    def is_base(self) -> bool:
        return self.raw_kind is None

    def dim(self, T: int, L: int) -> int:
        raise NotImplementedError

    def values(self, x: Observation, e: LatentDraw) -> np.ndarray:
        raise NotImplementedError

    def raw_dim(self, T: int, L: int) -> int:
        return 0

    def center(self, raw: np.ndarray) -> np.ndarray:
        """Map recorded raw features [K, raw_dim] to moments [K, dim]."""
        raise NotImplementedError

    def centering(self, T: int, L: int):
        """Closed-form centering per raw coordinate, for the chain weight.

        Returns (code, a, b) arrays: code 0 reads centered = raw - a,
        code 1 reads 1{raw <= a} - b, code 2 reads 1{a <= raw <= b} - 1.
        The default certifies center() as affine by probing it and
        refuses components where the probe fails.
        """
        rd = self.raw_dim(T, L)
        at_zero = np.asarray(self.center(np.zeros(rd)), dtype=float)
        at_one = np.asarray(self.center(np.ones(rd)), dtype=float)
        if not np.allclose(at_one - at_zero, 1.0):
            raise NotImplementedError(f"{self.name} must override "
                                      "centering()")
        return (np.zeros(rd, dtype=np.int64), -at_zero.reshape(-1),
                np.zeros(rd))


@dataclass(frozen=True)
class BudgetNeutrality(Component):
    """E[rho_t' w_c_t] = 0: consumption error orthogonal to the budget."""

    name: ClassVar[str] = "budget-neutrality"
    base_code: ClassVar[int] = BASE_BUDGET

    def dim(self, T, L):
        return T

    def values(self, x, e):
        return np.einsum("tl,tl->t", x.rho, _wc(x, e))


@dataclass(frozen=True)
class TremblingHand(Component):
    """E[w_c_t] = 0 componentwise."""

    name: ClassVar[str] = "trembling-hand"
    base_code: ClassVar[int] = BASE_TREMBLE

    def dim(self, T, L):
        return T * L

    def values(self, x, e):
        return _wc(x, e).reshape(-1)


@dataclass(frozen=True)
class PriceMisperception(Component):
    """E[w_p_t] = 0 componentwise."""

    name: ClassVar[str] = "price-misperception"
    base_code: ClassVar[int] = BASE_MISPERCEPTION

    def dim(self, T, L):
        return T * L

    def values(self, x, e):
        return _wp(x, e).reshape(-1)


@dataclass(frozen=True)
class LogPriceCentering(Component):
    """E[log rho_t - log rho*_t] = 0 componentwise."""

    name: ClassVar[str] = "log-price"
    base_code: ClassVar[int] = BASE_LOGPRICE

    def dim(self, T, L):
        return T * L

    def values(self, x, e):
        rho_star = x.rho - _wp(x, e)
        if np.any(rho_star <= 0):
            from .panel import SupportViolation
            raise SupportViolation("log-price moment hit a nonpositive true price")
        return (np.log(x.rho) - np.log(rho_star)).reshape(-1)


@dataclass(frozen=True)
class Instrument(Component):
    """E[z_t' w_c_t] = 0 for observable instruments z [T, L]."""

    z: np.ndarray = None
    name: ClassVar[str] = "instrument"
    base_code: ClassVar[int] = BASE_INSTRUMENT

    def __post_init__(self):
        if self.z is None:
            raise ValueError("instrument component needs a z array")
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))

    def dim(self, T, L):
        if self.z.shape != (T, L):
            raise ValueError(f"instrument z must be [T, L] = ({T}, {L})")
        return T

    def values(self, x, e):
        return np.einsum("tl,tl->t", self.z, _wc(x, e))


@dataclass(frozen=True)
class MartingaleIncrements(Component):
    """E[lam_{t+1} - lam_t] = 0 for the income-uncertainty multipliers."""

    name: ClassVar[str] = "martingale-increments"
    base_code: ClassVar[int] = BASE_MARTINGALE

    def dim(self, T, L):
        return T - 1

    def values(self, x, e):
        if e.lam is None:
            raise ValueError("martingale increments need lam in the draw")
        return np.diff(e.lam[: x.n_periods])


@dataclass(frozen=True)
class InequalityWithSlack(Component):
    """E[g(x, e) - s] = 0 with latent slack s >= 0 turns g into E[g] >= 0."""

    inner: Component = None
    name: ClassVar[str] = "inequality"

    def __post_init__(self):
        if self.inner is None or not self.inner.is_base:
            raise ValueError("inequality wrapper needs a theta-free inner component")

    @property
    def is_base(self) -> bool:
        return True

    def dim(self, T, L):
        return self.inner.dim(T, L)

    def values(self, x, e):
        vals = self.inner.values(x, e)
        if e.slack is None or e.slack.shape[0] < vals.shape[0]:
            raise ValueError("draw carries no slack vector for inequality moments")
        return vals - e.slack[: vals.shape[0]]


@dataclass(frozen=True)
class MeanDiscount(Component):
    """E[d - theta] = 0: recoverability of the mean discount factor."""

    theta: float = 0.0
    name: ClassVar[str] = "mean-discount"
    category: ClassVar[str] = "recoverability"
    raw_kind: ClassVar[int] = RAW_D

    def dim(self, T, L):
        return 1

    def raw_dim(self, T, L):
        return 1

    def values(self, x, e):
        if e.d is None:
            raise ValueError("mean-discount needs d in the draw")
        return np.array([e.d - self.theta])

    def center(self, raw):
        return raw - self.theta


@dataclass(frozen=True)
class DiscountSupport(Component):
    """E[1{lo <= d <= hi} - 1] = 0: the discount factor lives in [lo, hi]."""

    lo: float = 0.0
    hi: float = 1.0
    name: ClassVar[str] = "discount-support"
    category: ClassVar[str] = "recoverability"
    raw_kind: ClassVar[int] = RAW_D

    def dim(self, T, L):
        return 1

    def raw_dim(self, T, L):
        return 1

    def values(self, x, e):
        if e.d is None:
            raise ValueError("discount-support needs d in the draw")
        return np.array([float(self.lo <= e.d <= self.hi) - 1.0])

    def center(self, raw):
        return ((raw >= self.lo) & (raw <= self.hi)).astype(float) - 1.0

    def centering(self, T, L):
        return (np.array([2], dtype=np.int64), np.array([self.lo]),
                np.array([self.hi]))


@dataclass(frozen=True)
class ExpectedTrueConsumption(Component):
    """E[c*_tau - theta] = 0 for one period's true consumption vector."""

    tau: int = 0
    theta: np.ndarray = None
    name: ClassVar[str] = "expected-consumption"
    category: ClassVar[str] = "recoverability"
    raw_kind: ClassVar[int] = RAW_CONS_LEVEL

    def __post_init__(self):
        object.__setattr__(self, "theta",
                           np.asarray(self.theta, dtype=float).reshape(-1))

    def dim(self, T, L):
        if not 0 <= self.tau < T:
            raise ValueError(f"tau={self.tau} outside the panel's periods")
        return L

    def raw_dim(self, T, L):
        return L

    def values(self, x, e):
        return (x.c[self.tau] - _wc(x, e)[self.tau]) - self.theta

    def center(self, raw):
        return raw - self.theta


@dataclass(frozen=True)
class ConsumptionChange(Component):
    """E[c*_{tau+1} - c*_tau - theta] = 0."""

    tau: int = 0
    theta: np.ndarray = None
    name: ClassVar[str] = "consumption-change"
    category: ClassVar[str] = "recoverability"
    raw_kind: ClassVar[int] = RAW_CONS_CHANGE

    def __post_init__(self):
        object.__setattr__(self, "theta",
                           np.asarray(self.theta, dtype=float).reshape(-1))

    def dim(self, T, L):
        if not 0 <= self.tau < T - 1:
            raise ValueError(f"tau={self.tau} has no successor period")
        return L

    def raw_dim(self, T, L):
        return L

    def values(self, x, e):
        c_star = x.c - _wc(x, e)
        return (c_star[self.tau + 1] - c_star[self.tau]) - self.theta

    def center(self, raw):
        return raw - self.theta


@dataclass(frozen=True)
class AverageVarian(Component):
    """E[c*_{T+1} - theta] = 0: mean counterfactual demand."""

    theta: np.ndarray = None
    name: ClassVar[str] = "average-varian"
    category: ClassVar[str] = "counterfactual"
    raw_kind: ClassVar[int] = RAW_CONS_NEXT

    def __post_init__(self):
        object.__setattr__(self, "theta",
                           np.asarray(self.theta, dtype=float).reshape(-1))

    def dim(self, T, L):
        return L

    def raw_dim(self, T, L):
        return L

    def values(self, x, e):
        if e.c_star_next is None:
            raise ValueError("average-varian needs c_star_next in the draw")
        return e.c_star_next - self.theta

    def center(self, raw):
        return raw - self.theta


@dataclass(frozen=True)
class QuantileVarian(Component):
    """E[1{rho*_{T+1}'c*_{T+1} <= e_bar} - phi] = 0."""

    e_bar: float = 0.0
    phi: float = 0.5
    name: ClassVar[str] = "quantile-varian"
    category: ClassVar[str] = "counterfactual"
    raw_kind: ClassVar[int] = RAW_EXP_NEXT

    def dim(self, T, L):
        return 1

    def raw_dim(self, T, L):
        return 1

    def values(self, x, e):
        if e.c_star_next is None or x.rho_next is None:
            raise ValueError("quantile-varian needs the counterfactual extension")
        spent = float(x.rho_next @ e.c_star_next)
        return np.array([float(spent <= self.e_bar) - self.phi])

    def center(self, raw):
        return (raw <= self.e_bar).astype(float) - self.phi

    def centering(self, T, L):
        return (np.array([1], dtype=np.int64), np.array([self.e_bar]),
                np.array([self.phi]))


@dataclass(frozen=True)
class BudgetShare(Component):
    """E[rho*_{T+1,g} c*_{T+1,g} / (rho*_{T+1}'c*_{T+1}) - theta] = 0."""

    good: int = 0
    theta: float = 0.0
    name: ClassVar[str] = "budget-share"
    category: ClassVar[str] = "counterfactual"
    raw_kind: ClassVar[int] = RAW_SHARE_NEXT

    def dim(self, T, L):
        if not 0 <= self.good < L:
            raise ValueError(f"good={self.good} outside the good set")
        return 1

    def raw_dim(self, T, L):
        return 1

    def values(self, x, e):
        if e.c_star_next is None or x.rho_next is None:
            raise ValueError("budget-share needs the counterfactual extension")
        total = float(x.rho_next @ e.c_star_next)
        if total <= 0:
            from .panel import SupportViolation
            raise SupportViolation("budget-share hit zero counterfactual expenditure")
        share = float(x.rho_next[self.good] * e.c_star_next[self.good]) / total
        return np.array([share - self.theta])

    def center(self, raw):
        return raw - self.theta


# Support-constraint tokens understood by the sampler.
SUPPORT_TOKENS = ("w_p_zero", "w_c_zero", "walras_true", "lambda0_one",
                  "walras_next")


@dataclass(frozen=True)
class MomentSpec:
    """Centering-moment list plus support constraints for the sampler.

    ``support_constraints`` defaults to survey data with exact prices
    (w_p = 0).  ``walras_true`` switches the sampler to experiment mode
    (true quantities or prices uniform on the observed budgets).
    """

    components: tuple
    support_constraints: tuple[str, ...] = ("w_p_zero",)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a moment spec needs at least one component")
        object.__setattr__(self, "components", comps)
        toks = tuple(self.support_constraints)
        for tok in toks:
            if tok not in SUPPORT_TOKENS:
                raise ValueError(f"unknown support constraint {tok!r}; "
                                 f"valid: {SUPPORT_TOKENS}")
        object.__setattr__(self, "support_constraints", toks)

    def q(self, T: int, L: int) -> int:
        return int(sum(comp.dim(T, L) for comp in self.components))

    @property
    def experiment_mode(self) -> bool:
        return "walras_true" in self.support_constraints

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(comp.name for comp in self.components)

    def base_components(self):
        return tuple(c for c in self.components if c.is_base)

    def theta_components(self):
        return tuple(c for c in self.components if not c.is_base)

    def slack_dim(self, T: int, L: int) -> int:
        return sum(c.dim(T, L) for c in self.components
                   if isinstance(c, InequalityWithSlack))


def evaluate_g_M(x: Observation, e: LatentDraw, mspec: MomentSpec) -> np.ndarray:
    """Evaluate the stacked centering moments for one draw."""
    return np.concatenate([np.atleast_1d(comp.values(x, e))
                           for comp in mspec.components])


def evaluate_g_R(x: Observation, e: LatentDraw, mspec: MomentSpec) -> np.ndarray:
    """Recoverability components only."""
    vals = [comp.values(x, e) for comp in mspec.components
            if comp.category == "recoverability"]
    return np.concatenate(vals) if vals else np.zeros(0)


def evaluate_g_C(x: Observation, e: LatentDraw, mspec: MomentSpec) -> np.ndarray:
    """Counterfactual components only."""
    vals = [comp.values(x, e) for comp in mspec.components
            if comp.category == "counterfactual"]
    return np.concatenate(vals) if vals else np.zeros(0)


def pair_indices(T: int) -> list[tuple[int, int]]:
    """Ordered (t, s) pairs indexing g_I, lexicographic with t != s."""
    return [(t, s) for t in range(T) for s in range(T) if s != t]


def _extended_arrays(x: Observation, e: LatentDraw):
    """True prices/quantities over observed periods plus any T+1 extension."""
    c_star = x.c - _wc(x, e)
    rho_star = x.rho - _wp(x, e)
    if x.rho_next is not None:
        if e.c_star_next is None:
            raise ValueError("observation has a counterfactual price but the draw "
                             "lacks c_star_next")
        c_star = np.vstack([c_star, e.c_star_next])
        rho_star = np.vstack([rho_star, x.rho_next])
    return rho_star, c_star


def inequality_slacks(x: Observation, e: LatentDraw, spec: ModelSpec) -> np.ndarray:
    """Normalized Afriat slacks, one per ordered (t, s) pair.

    Entry (t, s) is [v_t - v_s - (lam_t/delta_t) rho*_t'(c*_t - c*_s)]
    normalized by max(1, |rhs|); the collective model uses the two-member
    weighted utility gap instead.
    """
    rho_star, c_star = _extended_arrays(x, e)
    T_eff = rho_star.shape[0]
    if e.v.shape[0] != T_eff:
        raise ValueError(f"v has length {e.v.shape[0]}, expected {T_eff}")
    inner = rho_star @ c_star.T
    gaps = np.diag(inner)[:, None] - inner  # rho*_t'(c*_t - c*_s)

    if spec.model is Model.COLLECTIVE:
        if e.v_b is None or e.d is None or e.d_b is None:
            raise ValueError("collective draws need v_b, d and d_b")
        da = e.d ** np.arange(T_eff)
        db = e.d_b ** np.arange(T_eff)
        lhs = (da[:, None] * (e.v[:, None] - e.v[None, :])
               + db[:, None] * (e.v_b[:, None] - e.v_b[None, :]))
        raw = lhs - gaps
        scale = np.maximum(1.0, np.abs(gaps))
    else:
        lam = np.ones(T_eff) if e.lam is None else e.lam
        if spec.model is Model.STATIC:
            delta = np.ones(T_eff)
        else:
            if e.d is None:
                raise ValueError("discounted draws need d")
            delta = e.d ** np.arange(T_eff)
        coef = lam / delta
        rhs = coef[:, None] * gaps
        raw = (e.v[:, None] - e.v[None, :]) - rhs
        scale = np.maximum(1.0, np.abs(rhs))
    out = raw / scale
    return np.array([out[t, s] for t, s in pair_indices(T_eff)])


def evaluate_g_I(x: Observation, e: LatentDraw, spec: ModelSpec,
                 rtol: float = FEAS_RTOL) -> np.ndarray:
    """Afriat inequality indicators: 0 where satisfied, -1 where violated."""
    slacks = inequality_slacks(x, e, spec)
    return np.where(slacks >= -rtol, 0.0, -1.0)


# ---------------------------------------------------------------------------
# CLI-facing moment-name registry

def _parse_floats(arg: str) -> list[float]:
    return [float(tok) for tok in arg.split(":") if tok != ""]


def _mk_simple(cls):
    def make(arg):
        if arg:
            raise MomentNameError(f"{cls.name} takes no arguments")
        return cls()
    return make


def _mk_mean_discount(arg):
    vals = _parse_floats(arg)
    if len(vals) != 1:
        raise MomentNameError("mean-discount takes one value: mean-discount=THETA")
    return MeanDiscount(theta=vals[0])


def _mk_discount_support(arg):
    vals = _parse_floats(arg)
    if len(vals) != 2:
        raise MomentNameError("discount-support takes lo:hi")
    return DiscountSupport(lo=vals[0], hi=vals[1])


def _mk_expected_consumption(arg):
    vals = _parse_floats(arg)
    if len(vals) < 2:
        raise MomentNameError("expected-consumption takes tau:theta_1:...:theta_L")
    return ExpectedTrueConsumption(tau=int(vals[0]), theta=vals[1:])


def _mk_consumption_change(arg):
    vals = _parse_floats(arg)
    if len(vals) < 2:
        raise MomentNameError("consumption-change takes tau:theta_1:...:theta_L")
    return ConsumptionChange(tau=int(vals[0]), theta=vals[1:])


def _mk_average_varian(arg):
    vals = _parse_floats(arg)
    if not vals:
        raise MomentNameError("average-varian takes theta_1:...:theta_L")
    return AverageVarian(theta=vals)


def _mk_quantile_varian(arg):
    vals = _parse_floats(arg)
    if len(vals) != 2:
        raise MomentNameError("quantile-varian takes e_bar:phi")
    return QuantileVarian(e_bar=vals[0], phi=vals[1])


def _mk_budget_share(arg):
    vals = _parse_floats(arg)
    if len(vals) != 2:
        raise MomentNameError("budget-share takes good:theta")
    return BudgetShare(good=int(vals[0]), theta=vals[1])


MOMENT_REGISTRY = {
    "budget-neutrality": _mk_simple(BudgetNeutrality),
    "trembling-hand": _mk_simple(TremblingHand),
    "price-misperception": _mk_simple(PriceMisperception),
    "log-price": _mk_simple(LogPriceCentering),
    "martingale-increments": _mk_simple(MartingaleIncrements),
    "mean-discount": _mk_mean_discount,
    "discount-support": _mk_discount_support,
    "expected-consumption": _mk_expected_consumption,
    "consumption-change": _mk_consumption_change,
    "average-varian": _mk_average_varian,
    "quantile-varian": _mk_quantile_varian,
    "budget-share": _mk_budget_share,
}


def parse_moment_tokens(tokens: Sequence[str]) -> tuple[Component, ...]:
    """Turn CLI tokens like ['budget-neutrality', 'mean-discount=0.9'] into
    components, raising MomentNameError (listing valid names) on unknowns."""
    comps = []
    for tok in tokens:
        name, _, arg = tok.partition("=")
        name = name.strip()
        if name not in MOMENT_REGISTRY:
            raise MomentNameError(
                f"unknown moment {name!r}; valid names: "
                + ", ".join(sorted(MOMENT_REGISTRY)))
        comps.append(MOMENT_REGISTRY[name](arg.strip()))
    return tuple(comps)
