"""Latent-variable sampler: eta-tilde chains restricted to the Afriat cone.

The user measure eta-tilde lives on boxes around the observed data:
utility levels v in [0, v_cap], true consumption in a band around observed
consumption (survey mode) or on the Walras budget (experiment mode),
discount factors in the model's support, multipliers in (0, lam_cap] and
inequality slacks in [0, slack_cap].  Survey mode weights the base measure
by exp(-||g_M||^2 / eta_scale) over the theta-free moments; experiment
mode is uniform over GARP-consistent true prices or quantities.

Chains are generated once per household (recording moments, raw theta
features and the tilt log-uniforms) and the exponential tilt by
exp(gamma'g_M) is replayed over the record, so the GMM objective is a
cheap deterministic function of gamma.
"""

from dataclasses import dataclass
import math
from typing import Optional, Sequence

import numpy as np

from . import _mcmc
from .panel import LatentDraw, Model, ModelSpec, Observation
from .deterministic import FEAS_RTOL, afriat_feasible, DEFAULT_GRID
from .moments import (InequalityWithSlack, MomentSpec, evaluate_g_I,
                      evaluate_g_M)

ETA_GAUSSIAN = "gaussian"
ETA_UNIFORM = "uniform"
_ETA_ALIASES = {
    "gaussian": ETA_GAUSSIAN,
    "gaussianmomentweight": ETA_GAUSSIAN,
    "uniform": ETA_UNIFORM,
    "uniformonconstraint": ETA_UNIFORM,
}

MODEL_CODES = {Model.STATIC: 0, Model.ED: 1, Model.ED_IU: 2,
               Model.COLLECTIVE: 3}


class InfeasibleHouseholdError(RuntimeError):
    """No latent point satisfies the support constraints for a household."""

    def __init__(self, household_id, message):
        super().__init__(message)
        self.household_id = household_id


@dataclass(frozen=True)
class ChainConfig:
    """MCMC settings; defaults follow the cl=10000 / burn-in 1000 runs."""

    chain_length: int = 10000
    burn_in: int = 1000
    thinning: int = 1
    seed: int = 0
    eta_kind: str = ETA_GAUSSIAN
    eta_scale: float = 1.0
    eta_span: float = 1.0       # w^c box half-width multiplier
    lam_cap: float = 10.0
    slack_cap: float = 50.0
    next_cap_mult: float = 4.0  # counterfactual consumption box multiplier
    descent_steps: int = 200    # greedy ||g_M||^2 refinement of e0
    record_states_every: int = 0

    def __post_init__(self):
        if self.chain_length <= 0:
            raise ValueError("chain_length must be positive")
        if not 0 <= self.burn_in < self.chain_length:
            raise ValueError("need 0 <= burn_in < chain_length")
        if self.thinning <= 0:
            raise ValueError("thinning must be positive")
        key = str(self.eta_kind).lower().replace("_", "").replace("-", "")
        if key not in _ETA_ALIASES:
            raise ValueError(f"unknown eta_kind {self.eta_kind!r}; "
                             f"use {ETA_GAUSSIAN!r} or {ETA_UNIFORM!r}")
        object.__setattr__(self, "eta_kind", _ETA_ALIASES[key])
        if self.eta_scale <= 0 or self.eta_span <= 0:
            raise ValueError("eta_scale and eta_span must be positive")


@dataclass(frozen=True)
class StepInterval:
    """Closed step range [lo, hi]; empty when lo > hi."""

    lo: float
    hi: float

    @property
    def empty(self) -> bool:
        return self.lo > self.hi

    def contains(self, value: float, atol: float = 0.0) -> bool:
        return self.lo - atol <= value <= self.hi + atol


@dataclass(frozen=True)
class Direction:
    """Hit-and-run direction over the (v, c*) coordinates."""

    v: np.ndarray
    c: np.ndarray
    v_b: Optional[np.ndarray] = None


def _derive_key(seed: int, household_id: int, purpose: int = 0) -> int:
    """Stable 31-bit stream key from (seed, household, purpose)."""
    z = (int(seed) * 0x9E3779B97F4A7C15
         + int(household_id) * 0xBF58476D1CE4E5B9
         + purpose * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    z ^= z >> 31
    return int(z & 0x7FFFFFFF)


# ---------------------------------------------------------------------------
# geometry: boxes and proposal scales defining eta-tilde's support

class _Geometry:
    """Per-household boxes for the survey-mode latent state."""

    def __init__(self, x: Observation, spec: ModelSpec, mspec: MomentSpec,
                 cfg: ChainConfig, e_next: Optional[float] = None):
        rho = np.asarray(x.rho, dtype=float)
        c = np.asarray(x.c, dtype=float)
        t_obs, n_goods = c.shape
        self.has_next = x.rho_next is not None
        tt = t_obs + (1 if self.has_next else 0)
        self.tt, self.t_obs, self.n_goods = tt, t_obs, n_goods
        self.walras_next = ("walras_next" in mspec.support_constraints
                            and self.has_next)
        if "walras_next" in mspec.support_constraints and not self.has_next:
            raise ValueError("walras_next requires a counterfactual price row")
        if self.walras_next and e_next is None:
            raise ValueError("walras_next requires the counterfactual "
                             "expenditure level e_next")
        self.e_next = e_next

        self.rho_ext = np.vstack([rho, x.rho_next]) if self.has_next else rho
        self.e_obs = np.einsum("tl,tl->t", rho, c)

        c_lo = np.zeros((tt, n_goods))
        c_hi = np.zeros((tt, n_goods))
        w_scale = np.zeros((tt, n_goods))
        if "w_c_zero" in mspec.support_constraints:
            c_lo[:t_obs] = c
            c_hi[:t_obs] = c
        else:
            band = cfg.eta_span * (c.mean(axis=1, keepdims=True) + c)
            c_lo[:t_obs] = np.maximum(0.0, c - band)
            c_hi[:t_obs] = c + band
            w_scale[:t_obs] = np.minimum(
                band, 1.0 / (np.maximum(rho, 1e-300) * math.sqrt(n_goods)))
        if self.has_next:
            top = cfg.next_cap_mult * c_hi[:t_obs].max(axis=0)
            if self.walras_next:
                ray = _walras_ray_point(c_hi[:t_obs], self.rho_ext[tt - 1],
                                        e_next)
                top = np.maximum(top, 2.0 * ray)
            c_hi[t_obs] = np.maximum(top, 1.0)
            w_scale[t_obs] = c_hi[t_obs] / 8.0
        self.c_lo, self.c_hi, self.w_scale = c_lo, c_hi, w_scale

        max_b = float(np.einsum("tl,tl->t", self.rho_ext,
                                c_hi).max()) if tt else 1.0
        d_lo = spec.d_support[0]
        if spec.model is Model.STATIC:
            head = max_b
        elif spec.model is Model.ED_IU:
            head = max_b * cfg.lam_cap / d_lo ** (tt - 1)
        else:
            head = max_b / d_lo ** (tt - 1)
        self.v_cap = 2.0 * tt * (1.0 + head)

    def walras_ray(self) -> np.ndarray:
        """Extension-row bundle on the expenditure plane, along mean c."""
        return _walras_ray_point(self.c_hi[: self.t_obs],
                                 self.rho_ext[self.tt - 1], self.e_next)


def _walras_ray_point(c_hi_obs: np.ndarray, rho_next: np.ndarray,
                      e_next: float) -> np.ndarray:
    u = np.maximum(c_hi_obs.mean(axis=0), 1e-12)
    return u * (e_next / float(rho_next @ u))


def _base_tables(mspec: MomentSpec, t_obs: int, n_goods: int):
    """Kernel tables: base codes, instrument stack, slack map, column maps."""
    bc_code, bc_aux, z_rows = [], [], []
    slack2g = []
    cols_base, cols_theta = [], []
    raw_kind, raw_aux = [], []
    th_code, th_a, th_b = [], [], []
    pos = 0
    base_pos = 0
    theta_pos = 0
    for comp in mspec.components:
        dim = comp.dim(t_obs, n_goods)
        if comp.is_base:
            inner = comp.inner if isinstance(comp, InequalityWithSlack) else comp
            bc_code.append(inner.base_code)
            if inner.base_code == 4:  # instrument: stack its z matrix
                bc_aux.append(len(z_rows))
                z_rows.append(np.asarray(inner.z, dtype=float))
            else:
                bc_aux.append(0)
            if isinstance(comp, InequalityWithSlack):
                slack2g.extend(range(base_pos, base_pos + dim))
            cols_base.extend(range(pos, pos + dim))
            base_pos += dim
        else:
            raw_kind.append(comp.raw_kind)
            aux = getattr(comp, "tau", getattr(comp, "good", 0))
            raw_aux.append(int(aux) if aux is not None else 0)
            code, a, b = comp.centering(t_obs, n_goods)
            th_code.extend(np.asarray(code, dtype=np.int64))
            th_a.extend(np.asarray(a, dtype=float))
            th_b.extend(np.asarray(b, dtype=float))
            cols_theta.extend(range(pos, pos + dim))
            theta_pos += dim
        pos += dim
    z_all = (np.stack(z_rows) if z_rows
             else np.zeros((0, t_obs, n_goods)))
    return (np.array(bc_code, dtype=np.int64),
            np.array(bc_aux, dtype=np.int64), z_all,
            np.array(slack2g, dtype=np.int64),
            np.array(raw_kind, dtype=np.int64),
            np.array(raw_aux, dtype=np.int64),
            np.array(th_code, dtype=np.int64),
            np.array(th_a, dtype=float),
            np.array(th_b, dtype=float),
            np.array(cols_base, dtype=np.int64),
            np.array(cols_theta, dtype=np.int64))


def _validate_components(mspec: MomentSpec, spec: ModelSpec,
                         has_next: bool) -> None:
    for comp in mspec.components:
        name = comp.name
        if name == "martingale" and spec.model is not Model.ED_IU:
            raise ValueError("martingale increments require the "
                             "income-uncertainty model")
        if comp.raw_kind == 0 and not spec.model.discounted:
            raise ValueError(f"{name} needs a model with a discount factor")
        if comp.raw_kind in (3, 4, 5) and not has_next:
            raise ValueError(f"{name} needs a counterfactual price row "
                             "(rho_next) on the observation")


# ---------------------------------------------------------------------------
# packed-state conversion

def _state_layout(tt: int, n_goods: int, model: Model, nslk: int):
    has_vb = model is Model.COLLECTIVE
    has_lam = model in (Model.STATIC, Model.ED_IU)
    dim = tt * (1 + has_vb + has_lam) + tt * n_goods + 2 + nslk
    return has_vb, has_lam, dim


def _pack_draw(e: LatentDraw, x: Observation, spec: ModelSpec,
               nslk: int) -> np.ndarray:
    tt = e.v.shape[0]
    n_goods = x.c.shape[1]
    has_vb, has_lam, dim = _state_layout(tt, n_goods, spec.model, nslk)
    parts = [e.v]
    if has_vb:
        parts.append(e.v_b)
    if has_lam:
        parts.append(np.ones(tt) if e.lam is None else e.lam)
    c_star = x.c - (np.zeros_like(x.c) if e.w_c is None else e.w_c)
    if tt > x.c.shape[0]:
        c_star = np.vstack([c_star, e.c_star_next])
    parts.append(c_star.reshape(-1))
    parts.append(np.array([1.0 if e.d is None else e.d,
                           1.0 if e.d_b is None else e.d_b]))
    if nslk:
        parts.append(e.slack[:nslk])
    state = np.concatenate([np.asarray(p, dtype=float).reshape(-1)
                            for p in parts])
    if state.shape[0] != dim:
        raise ValueError(f"draw does not match the state layout "
                         f"({state.shape[0]} != {dim})")
    return state


def _unpack_draw(state: np.ndarray, x: Observation, spec: ModelSpec,
                 tt: int, nslk: int) -> LatentDraw:
    t_obs, n_goods = x.c.shape
    has_vb, has_lam, _ = _state_layout(tt, n_goods, spec.model, nslk)
    j = 0
    v = state[j:j + tt].copy(); j += tt
    v_b = None
    if has_vb:
        v_b = state[j:j + tt].copy(); j += tt
    lam = None
    if has_lam:
        lam = state[j:j + tt].copy(); j += tt
    c_star = state[j:j + tt * n_goods].reshape(tt, n_goods).copy()
    j += tt * n_goods
    d = float(state[j]); j += 1
    d_b = float(state[j]); j += 1
    slack = state[j:j + nslk].copy() if nslk else None
    w_c = x.c - c_star[:t_obs]
    c_next = c_star[t_obs] if tt > t_obs else None
    return LatentDraw(v=v, lam=lam,
                      d=d if spec.model.discounted else None,
                      w_c=w_c, w_p=np.zeros_like(x.rho), v_b=v_b,
                      d_b=d_b if spec.model is Model.COLLECTIVE else None,
                      c_star_next=c_next, slack=slack)


# ---------------------------------------------------------------------------
# closed-form step intervals (reference implementations)

def alpha_interval(e: LatentDraw, xi: Direction, x: Observation,
                   d: Optional[float] = None,
                   spec: Optional[ModelSpec] = None) -> StepInterval:
    """Feasible step range for e + alpha*xi over the (v, c*) coordinates.

    Intersects the sign-constraint bounds (v, c* >= 0) with the Afriat
    bounds; 0 is always inside when e is feasible.
    """
    spec = spec or ModelSpec()
    from .moments import _extended_arrays
    rho_star, c_star = _extended_arrays(x, e)
    tt = rho_star.shape[0]
    lo, hi = -math.inf, math.inf

    def bound(val, step):
        nonlocal lo, hi
        if step > 1e-14:
            lo = max(lo, -val / step)
        elif step < -1e-14:
            hi = min(hi, -val / step)

    for arr, xi_arr in ((e.v, xi.v), (c_star, xi.c)) + (
            ((e.v_b, xi.v_b),) if xi.v_b is not None else ()):
        for val, step in zip(np.ravel(arr), np.ravel(xi_arr)):
            bound(val, step)

    inner = rho_star @ c_star.T
    cross = rho_star @ xi.c.T
    gaps = np.diag(inner)[:, None] - inner
    dgaps = np.diag(cross)[:, None] - cross
    d_use = d if d is not None else (e.d if e.d is not None else 1.0)
    for t in range(tt):
        for s in range(tt):
            if s == t:
                continue
            if spec.model is Model.COLLECTIVE:
                wa, wb = d_use ** t, (e.d_b if e.d_b is not None else 1.0) ** t
                f = (wa * (e.v[t] - e.v[s]) + wb * (e.v_b[t] - e.v_b[s])
                     - gaps[t, s])
                g = (wa * (xi.v[t] - xi.v[s]) + wb * (xi.v_b[t] - xi.v_b[s])
                     - dgaps[t, s])
            else:
                lam_t = 1.0 if e.lam is None else e.lam[t]
                coef = lam_t if spec.model is Model.STATIC \
                    else lam_t / d_use ** t
                f = e.v[t] - e.v[s] - coef * gaps[t, s]
                g = xi.v[t] - xi.v[s] - coef * dgaps[t, s]
            bound(f, g)
    return StepInterval(lo, hi)


def discount_interval(e: LatentDraw, x: Observation,
                      spec: Optional[ModelSpec] = None) -> StepInterval:
    """Discount factors in d_support keeping (v, c*) Afriat-feasible.

    Inverts d^t (v_t - v_s) >= lam_t rho*_t'(c*_t - c*_s) pairwise via the
    exponent 1/t; rows with t = 0 carry no discount information.
    """
    spec = spec or ModelSpec()
    from .moments import _extended_arrays
    rho_star, c_star = _extended_arrays(x, e)
    tt = rho_star.shape[0]
    inner = rho_star @ c_star.T
    gaps = np.diag(inner)[:, None] - inner
    lo, hi = spec.d_support
    for t in range(1, tt):
        lam_t = 1.0 if e.lam is None else e.lam[t]
        for s in range(tt):
            if s == t:
                continue
            r = e.v[t] - e.v[s]
            qv = lam_t * gaps[t, s]
            if r > 1e-14 and qv > 0.0:
                lo = max(lo, (qv / r) ** (1.0 / t))
            elif r < -1e-14:
                if qv >= 0.0:
                    return StepInterval(1.0, 0.0)  # empty
                hi = min(hi, (qv / r) ** (1.0 / t))
            elif abs(r) <= 1e-14 and qv > 1e-12 * max(1.0, abs(gaps[t, s])):
                return StepInterval(1.0, 0.0)
    if lo > hi and e.d is not None and \
            spec.d_support[0] <= e.d <= spec.d_support[1]:
        return StepInterval(e.d, e.d)  # rounding collapse keeps current d
    return StepInterval(lo, hi)


# ---------------------------------------------------------------------------
# initial points

def _bf_margin(b: np.ndarray) -> tuple[bool, np.ndarray]:
    """Potentials for v_t - v_s >= b[t,s] with every pair strictly slack.

    Bisects the largest uniform margin delta keeping b + delta feasible
    and returns that shifted system's potentials, so the original system
    holds with slack >= delta everywhere.  A chain started on a tight
    face can wedge itself into a zero-length-chord corner; an interior
    point makes that a measure-zero event.
    """
    ok, v = _mcmc.potentials_feasible(b, 0.0)
    tt = b.shape[0]
    if not ok or tt < 2:
        return ok, v
    off = ~np.eye(tt, dtype=bool)
    hi = float(np.min(-(b + b.T)[off])) / 2.0  # 2-cycle cap on the margin
    if not np.isfinite(hi) or hi <= 0.0:
        return True, v
    lo = 0.0
    for _ in range(16):
        mid = 0.5 * (lo + hi)
        ok2, v2 = _mcmc.potentials_feasible(b + mid, 0.0)
        if ok2:
            lo, v = mid, v2
        else:
            hi = mid
    return True, v


def _initial_state_survey(x: Observation, spec: ModelSpec, mspec: MomentSpec,
                          cfg: ChainConfig, geo: _Geometry) -> np.ndarray:
    tt, t_obs, n_goods = geo.tt, geo.t_obs, geo.n_goods
    rho_ext = geo.rho_ext
    d_lo, d_hi = spec.d_support
    d_mid = 0.5 * (d_lo + d_hi)
    c_pinned = "w_c_zero" in mspec.support_constraints
    tr = np.arange(tt, dtype=float)

    def try_cstar(c_star, d_list=None):
        """Find (v[, v_b], lam, d) rationalizing c_star, or None."""
        inner = rho_ext @ c_star.T
        gaps = np.diag(inner)[:, None] - inner
        if d_list is None:
            d_list = [d_mid] + [d for d in DEFAULT_GRID
                                if d_lo - 1e-12 <= d <= d_hi + 1e-12]
        if spec.model in (Model.ED, Model.ED_IU):
            for d in d_list:
                ok, v = _bf_margin(gaps / (float(d) ** tr)[:, None])
                if ok:
                    return v, None, np.ones(tt), float(d), 1.0
        elif spec.model is Model.STATIC:
            res = afriat_feasible(rho_ext, c_star, spec)
            if res.feasible:
                return res.v, None, res.lam, 1.0, 1.0
        else:  # collective
            (da_lo, da_hi), (db_lo, db_hi) = spec.d_support_pair
            corners_a = sorted({da_lo, 0.5 * (da_lo + da_hi), da_hi})
            corners_b = sorted({db_lo, 0.5 * (db_lo + db_hi), db_hi})
            pairs = [(da, db) for da in corners_a for db in corners_b]
            if d_list is not None:
                pairs = [(float(np.clip(d, da_lo, da_hi)),
                          float(np.clip(d, db_lo, db_hi)))
                         for d in d_list] + pairs
            for da, db in pairs:
                res = afriat_feasible(rho_ext, c_star, spec, d=(da, db))
                if res.feasible:
                    return res.v, res.v_b, np.ones(tt), da, db
        return None

    def ext_row(d, kappa):
        """Extension-row bundle consistent with the candidate's demand rule."""
        if geo.walras_next:
            return geo.walras_ray()
        row = kappa * float(d) ** tt / (n_goods * rho_ext[t_obs])
        return np.clip(row, geo.c_lo[t_obs], geo.c_hi[t_obs])

    def log_demand_candidates():
        """Equal-budget-share draws: the demand of a log-period utility.

        c*_{t,l} = kappa d^t / (L rho_{t,l}) is rationalizable at every d
        with strictly slack inequalities (log is strictly concave), which
        keeps the feasibility check honest after box clipping.  kappa and
        d are fitted to the observed expenditure path so the draw stays
        near the data.
        """
        log_e = np.log(geo.e_obs)
        t_idx = np.arange(t_obs, dtype=float)
        if spec.model is Model.STATIC:
            d_cands = [1.0]
        else:
            slope = (np.polyfit(t_idx, log_e, 1)[0] if t_obs > 1 else 0.0)
            d_fit = float(np.clip(np.exp(slope), d_lo, d_hi))
            d_cands = list(dict.fromkeys([d_fit, d_mid, d_hi, d_lo]))
        for d in d_cands:
            if spec.model is Model.COLLECTIVE:
                da = db = d
                path = da ** t_idx + db ** t_idx
            else:
                path = float(d) ** t_idx
            kappa = float(np.exp(np.mean(log_e - np.log(path))))
            c_star = kappa * path[:, None] / (n_goods * rho_ext[:t_obs])
            c_star = np.clip(c_star, geo.c_lo[:t_obs], geo.c_hi[:t_obs])
            if tt > t_obs:
                c_star = np.vstack([c_star, ext_row(d, kappa)])
            d_list = [1.0] if spec.model is Model.STATIC else [d]
            yield c_star, d_list

    # exact-data attempt: c* = c (plus a plane point for the extension row)
    c_try = np.array(x.c, dtype=float)
    if tt > t_obs:
        ext = geo.walras_ray() if geo.walras_next else \
            0.5 * (geo.c_lo[t_obs] + geo.c_hi[t_obs])
        c_try = np.vstack([c_try, ext])
    witness = try_cstar(c_try)
    c_star = c_try

    if witness is None and not c_pinned:
        for cand, d_list in log_demand_candidates():
            witness = try_cstar(cand, d_list)
            if witness is not None:
                c_star = cand
                break

    if witness is None and not c_pinned:
        # identical-bundle fallback: equal rows make every gap vanish, so
        # v = 1 works for any d.  walras_next pins the common bundle's
        # scale; clipping to the boxes can then reintroduce gaps, which the
        # witness search re-checks.
        u = np.maximum(x.c.mean(axis=0), 1e-12)
        if geo.walras_next:
            rho_next = rho_ext[tt - 1]
            u = u * (geo.e_next / float(rho_next @ u))
        c_star = np.clip(np.tile(u, (tt, 1)), geo.c_lo, geo.c_hi)
        if geo.walras_next:
            c_star[tt - 1] = u  # inside its box by construction
        witness = try_cstar(c_star)
    if witness is None:
        raise InfeasibleHouseholdError(
            x.household_id,
            f"household {x.household_id}: no latent point satisfies the "
            f"support constraints (model {spec.model.value})")

    v, v_b, lam, d, d_b = witness
    if spec.model is Model.ED_IU:
        lam = np.ones(tt)
    v = np.clip(v, 0.0, geo.v_cap)
    if v_b is not None:
        v_b = np.clip(v_b, 0.0, geo.v_cap)
    if spec.model is Model.STATIC and lam.max() > cfg.lam_cap:
        # the static system is homogeneous in (v, lam): rescale jointly
        # rather than clipping lam alone, which would break feasibility
        sc = cfg.lam_cap / lam.max()
        lam = lam * sc
        v = v * sc
    lam = np.clip(lam, 1e-8, cfg.lam_cap)

    nslk = mspec.slack_dim(t_obs, n_goods)
    w_c = x.c - c_star[:t_obs]
    draw = LatentDraw(v=v, lam=lam if spec.model in (Model.STATIC, Model.ED_IU)
                      else None,
                      d=d if spec.model.discounted else None,
                      w_c=w_c, w_p=np.zeros_like(x.rho),
                      v_b=v_b,
                      d_b=d_b if spec.model is Model.COLLECTIVE else None,
                      c_star_next=c_star[t_obs] if tt > t_obs else None,
                      slack=np.zeros(nslk) if nslk else None)
    state = _pack_draw(draw, x, spec, nslk)
    if nslk:  # exact minimizers of (inner - s)^2 given the witness
        g_inner = []
        for comp in mspec.base_components():
            if isinstance(comp, InequalityWithSlack):
                g_inner.extend(np.atleast_1d(comp.inner.values(x, draw)))
        s_opt = np.clip(np.asarray(g_inner), 0.0, cfg.slack_cap)
        state[-nslk:] = s_opt
    return state


def _experiment_sides(mspec: MomentSpec):
    """vary_price flag for UniformOnConstraint, from the support tokens."""
    toks = mspec.support_constraints
    has_wc = "w_c_zero" in toks
    has_wp = "w_p_zero" in toks
    if has_wc == has_wp:
        raise ValueError("experiment mode needs exactly one of w_c_zero "
                         "(vary prices) or w_p_zero (vary quantities)")
    return 1 if has_wc else 0


def _initial_state_experiment(x: Observation, vary_price: int) -> np.ndarray:
    """Common-ray bundles/prices: Walras-exact and GARP-consistent."""
    rho = np.asarray(x.rho, dtype=float)
    c = np.asarray(x.c, dtype=float)
    e_obs = np.einsum("tl,tl->t", rho, c)
    ones = np.ones(c.shape[1])
    if vary_price:
        y = (e_obs / (c @ ones))[:, None] * ones[None, :]
    else:
        y = (e_obs / (rho @ ones))[:, None] * ones[None, :]
    return y


def initial_point(x: Observation, spec: ModelSpec, mspec: MomentSpec,
                  cfg: Optional[ChainConfig] = None,
                  e_next: Optional[float] = None) -> LatentDraw:
    """Feasible starting draw, refined toward small ||g_M||^2.

    Survey mode first tries the observed data as true data over a coarse
    discount grid, then an identical-bundle fallback; a short greedy
    descent then shrinks the moment norm.  Experiment mode returns
    common-ray true prices/quantities (Walras and GARP exact).
    """
    cfg = cfg or ChainConfig()
    if mspec.experiment_mode:
        vary_price = _experiment_sides(mspec)
        y = _initial_state_experiment(x, vary_price)
        if vary_price:
            return LatentDraw(v=np.ones(x.n_periods),
                              w_c=np.zeros_like(x.c), w_p=x.rho - y)
        return LatentDraw(v=np.ones(x.n_periods), w_c=x.c - y,
                          w_p=np.zeros_like(x.rho))

    geo = _Geometry(x, spec, mspec, cfg, e_next=e_next)
    state = _initial_state_survey(x, spec, mspec, cfg, geo)
    nslk = mspec.slack_dim(geo.t_obs, geo.n_goods)
    if cfg.descent_steps > 0 and cfg.eta_kind == ETA_GAUSSIAN:
        tables = _base_tables(mspec, geo.t_obs, geo.n_goods)
        bc_code, bc_aux, z_all, slack2g = tables[:4]
        raw_kind, raw_aux, th_code, th_a, th_b = tables[4:9]
        qb = sum(comp.dim(geo.t_obs, geo.n_goods)
                 for comp in mspec.base_components())
        states = state[None, :].copy()
        _mcmc.survey_descent(
            geo.rho_ext[None], np.asarray(x.c, float)[None],
            geo.e_obs[None],
            np.array([_derive_key(cfg.seed, x.household_id, 1)],
                     dtype=np.int64),
            states, MODEL_CODES[spec.model],
            spec.d_support[0], spec.d_support[1],
            *(spec.d_support_pair[1] if spec.model is Model.COLLECTIVE
              else spec.d_support),
            np.array([geo.v_cap]), cfg.lam_cap,
            geo.c_lo[None], geo.c_hi[None], cfg.slack_cap,
            geo.w_scale[None], cfg.eta_scale, bc_code, bc_aux, z_all,
            slack2g, raw_kind, raw_aux, th_code, th_a, th_b, qb,
            1 if geo.walras_next else 0, cfg.descent_steps)
        state = states[0]
    return _unpack_draw(state, x, spec, geo.tt, nslk)


# ---------------------------------------------------------------------------
# the stream-recording integrator

class MomentIntegrator:
    """Recorded eta-tilde streams for a set of households.

    ``h_matrix(gamma)`` replays the exponential tilt by exp(gamma'g_M)
    over each household's record and returns the per-household averaged
    moment matrix [n, q], deterministic given (seed, household ids, gamma).
    """

    def __init__(self, observations: Sequence[Observation], spec: ModelSpec,
                 mspec: MomentSpec, cfg: ChainConfig,
                 e_next: Optional[np.ndarray] = None):
        self.observations = list(observations)
        if not self.observations:
            raise ValueError("integrator needs at least one household")
        # Fix the reduction order by household id so results do not depend
        # on how the caller happened to arrange the panel.
        order = np.argsort([x.household_id for x in self.observations],
                           kind="stable")
        self.observations = [self.observations[i] for i in order]
        if e_next is not None:
            ev = np.asarray(e_next, dtype=float)
            if ev.ndim > 0 and ev.size == len(self.observations):
                e_next = ev[order]
        self.spec = spec
        self.mspec = mspec
        self.cfg = cfg
        x0 = self.observations[0]
        self.t_obs, self.n_goods = x0.c.shape
        self.n = len(self.observations)
        self.q = mspec.q(self.t_obs, self.n_goods)
        has_next = x0.rho_next is not None
        _validate_components(mspec, spec, has_next)
        (self._bc_code, self._bc_aux, self._z_all, self._slack2g,
         self._raw_kind, self._raw_aux, self._th_code, self._th_a,
         self._th_b, self._cols_base,
         self._cols_theta) = _base_tables(mspec, self.t_obs, self.n_goods)
        self.qb = len(self._cols_base)
        self.qt = len(self._cols_theta)
        self._g_theta = None

        eta_code = 1 if cfg.eta_kind == ETA_GAUSSIAN else 0
        self._eta_code = eta_code
        self._e_next = e_next
        cl = cfg.chain_length
        if mspec.experiment_mode:
            self._run_experiment(eta_code)
        else:
            self._run_survey(eta_code, e_next)
        self._h_cache = {}

    # -- stream generation -------------------------------------------------
    def _run_survey(self, eta_code: int, e_next) -> None:
        cfg, spec, mspec = self.cfg, self.spec, self.mspec
        n, cl = self.n, cfg.chain_length
        e_next = (np.full(n, np.nan) if e_next is None
                  else np.broadcast_to(np.asarray(e_next, float), (n,)))
        geos = []
        for i, x in enumerate(self.observations):
            ev = None if np.isnan(e_next[i]) else float(e_next[i])
            geos.append(_Geometry(x, spec, mspec, cfg, e_next=ev))
        geo0 = geos[0]
        tt = geo0.tt
        if any(g.tt != tt for g in geos):
            raise ValueError("households disagree on the horizon")
        self.tt = tt
        self.walras_next = geo0.walras_next
        nslk = mspec.slack_dim(self.t_obs, self.n_goods)
        self.nslk = nslk

        rho_all = np.stack([g.rho_ext for g in geos])
        c_all = np.stack([np.asarray(x.c, float)
                          for x in self.observations])
        e_obs_all = np.stack([g.e_obs for g in geos])
        v_caps = np.array([g.v_cap for g in geos])
        c_lo_all = np.stack([g.c_lo for g in geos])
        c_hi_all = np.stack([g.c_hi for g in geos])
        w_scale_all = np.stack([g.w_scale for g in geos])
        self._geos = geos
        self._rho_all = rho_all

        states = np.stack([
            _initial_state_survey(x, spec, mspec, cfg, g)
            for x, g in zip(self.observations, geos)])
        keys = np.array([_derive_key(cfg.seed, x.household_id)
                         for x in self.observations], dtype=np.int64)
        if cfg.descent_steps > 0 and eta_code == 1:
            dkeys = np.array([_derive_key(cfg.seed, x.household_id, 1)
                              for x in self.observations], dtype=np.int64)
            db_lo, db_hi = (spec.d_support_pair[1]
                            if spec.model is Model.COLLECTIVE
                            else spec.d_support)
            _mcmc.survey_descent(
                rho_all, c_all, e_obs_all, dkeys, states,
                MODEL_CODES[spec.model], spec.d_support[0],
                spec.d_support[1], db_lo, db_hi, v_caps, cfg.lam_cap,
                c_lo_all, c_hi_all, cfg.slack_cap, w_scale_all,
                cfg.eta_scale, self._bc_code, self._bc_aux, self._z_all,
                self._slack2g, self._raw_kind, self._raw_aux,
                self._th_code, self._th_a, self._th_b, self.qb,
                1 if self.walras_next else 0, cfg.descent_steps)

        qr = sum(comp.raw_dim(self.t_obs, self.n_goods)
                 for comp in mspec.theta_components())
        self.qr = qr
        g_out = np.zeros((self.n, cl, self.qb), dtype=np.float32)
        raw_out = np.zeros((self.n, cl, qr), dtype=np.float32)
        logu_out = np.zeros((self.n, cl), dtype=np.float32)
        n_rec = (cl + cfg.record_states_every - 1) // cfg.record_states_every \
            if cfg.record_states_every > 0 else 0
        state_out = np.zeros((self.n, n_rec, states.shape[1]))
        acc = np.zeros((self.n, 2), dtype=np.int64)
        db_lo, db_hi = (spec.d_support_pair[1]
                        if spec.model is Model.COLLECTIVE
                        else spec.d_support)
        _mcmc.survey_streams(
            rho_all, c_all, e_obs_all, keys, states,
            MODEL_CODES[spec.model], spec.d_support[0], spec.d_support[1],
            db_lo, db_hi, v_caps, cfg.lam_cap, c_lo_all, c_hi_all,
            cfg.slack_cap, w_scale_all, eta_code, cfg.eta_scale,
            self._bc_code, self._bc_aux, self._z_all, self._slack2g,
            self._raw_kind, self._raw_aux, self._th_code, self._th_a,
            self._th_b, 1 if self.walras_next else 0,
            cl, g_out, raw_out, logu_out, state_out,
            cfg.record_states_every, acc)
        self._g_base = g_out
        self._raw = raw_out
        self._logu = logu_out
        self._state_rec = state_out
        self._acc = acc

    def _run_experiment(self, eta_code: int) -> None:
        cfg, mspec = self.cfg, self.mspec
        if mspec.theta_components():
            raise ValueError("theta-indexed moments are not available in "
                             "experiment mode")
        vary_price = _experiment_sides(mspec)
        self.vary_price = vary_price
        self.tt = self.t_obs
        self.walras_next = False
        self.nslk = 0
        self.qr = 0
        cl = cfg.chain_length
        rho_all = np.stack([np.asarray(x.rho, float)
                            for x in self.observations])
        c_all = np.stack([np.asarray(x.c, float) for x in self.observations])
        if not vary_price and np.any(rho_all <= 0):
            raise ValueError("experiment mode needs strictly positive prices")
        if vary_price and np.any(c_all <= 0):
            raise ValueError("price misperception on the Walras budget needs "
                             "strictly positive quantities")
        y_all = np.stack([
            _initial_state_experiment(x, vary_price)
            for x in self.observations])
        keys = np.array([_derive_key(cfg.seed, x.household_id)
                         for x in self.observations], dtype=np.int64)
        g_out = np.zeros((self.n, cl, self.qb), dtype=np.float32)
        logu_out = np.zeros((self.n, cl), dtype=np.float32)
        n_rec = (cl + cfg.record_states_every - 1) // cfg.record_states_every \
            if cfg.record_states_every > 0 else 0
        state_out = np.zeros((self.n, n_rec, self.t_obs * self.n_goods))
        acc = np.zeros((self.n, 2), dtype=np.int64)
        _mcmc.experiment_streams(rho_all, c_all, keys, y_all, vary_price,
                                 eta_code, cfg.eta_scale, self._bc_code,
                                 self._bc_aux, self._z_all, cl, g_out,
                                 logu_out, state_out,
                                 cfg.record_states_every, acc)
        self._g_base = g_out
        self._raw = np.zeros((self.n, cl, 0), dtype=np.float32)
        self._logu = logu_out
        self._state_rec = state_out
        self._acc = acc
        self._y_final = y_all
        self._rho_all = rho_all

    # -- theta handling ----------------------------------------------------
    def _theta_matrix(self) -> np.ndarray:
        if self._g_theta is None:
            blocks = []
            pos = 0
            for comp in self.mspec.theta_components():
                rd = comp.raw_dim(self.t_obs, self.n_goods)
                raw = self._raw[:, :, pos:pos + rd].astype(np.float64)
                blocks.append(comp.center(raw))
                pos += rd
            self._g_theta = (np.concatenate(blocks, axis=2).astype(np.float32)
                             if blocks else
                             np.zeros((self.n, self.cfg.chain_length, 0),
                                      dtype=np.float32))
        return self._g_theta

    def update_theta(self, mspec: MomentSpec) -> None:
        """Move to a new theta, re-running chains only when needed.

        The new spec must match the old one componentwise up to theta
        (same types, taus, goods and support constraints).  Under the
        uniform weight the recorded streams do not depend on theta and
        the swap is free; under the Gaussian weight the theta components
        enter the chain's stationary density, so the survey is re-run
        with the same per-household seeds (results therefore do not
        depend on the order thetas are visited in).
        """
        old, new = self.mspec.components, mspec.components
        if len(old) != len(new) or any(
                type(a) is not type(b) or a.is_base != b.is_base
                for a, b in zip(old, new)):
            raise ValueError("update_theta must keep the component structure")
        if mspec.support_constraints != self.mspec.support_constraints:
            raise ValueError("update_theta cannot change support constraints")
        tabs = _base_tables(mspec, self.t_obs, self.n_goods)
        th_code, th_a, th_b = tabs[6], tabs[7], tabs[8]
        rerun = (self._eta_code == 1 and th_code.size > 0 and not (
            np.array_equal(th_code, self._th_code)
            and np.array_equal(th_a, self._th_a)
            and np.array_equal(th_b, self._th_b)))
        self.mspec = mspec
        self._th_code, self._th_a, self._th_b = th_code, th_a, th_b
        if rerun:
            self._run_survey(self._eta_code, self._e_next)
        self._g_theta = None
        self._h_cache.clear()

    # -- evaluation ----------------------------------------------------------
    def h_matrix(self, gamma: np.ndarray) -> np.ndarray:
        """Tilted per-household moment averages [n, q] at this gamma."""
        gamma = np.asarray(gamma, dtype=float).reshape(-1)
        if gamma.shape[0] != self.q:
            raise ValueError(f"gamma has length {gamma.shape[0]}, "
                             f"expected {self.q}")
        key = gamma.tobytes()
        cached = self._h_cache.get(key)
        if cached is not None:
            return cached
        g_theta = self._theta_matrix()
        h_blocks = np.zeros((self.n, self.qb + self.qt))
        _mcmc.tilt_replay(self._g_base, g_theta, self._logu,
                          np.ascontiguousarray(gamma[self._cols_base]),
                          np.ascontiguousarray(gamma[self._cols_theta]),
                          self.cfg.burn_in, self.cfg.thinning, h_blocks)
        h = np.zeros((self.n, self.q))
        h[:, self._cols_base] = h_blocks[:, :self.qb]
        h[:, self._cols_theta] = h_blocks[:, self.qb:]
        if len(self._h_cache) > 64:
            self._h_cache.clear()
        self._h_cache[key] = h
        return h

    def hbar(self, gamma: np.ndarray) -> np.ndarray:
        return self.h_matrix(gamma).mean(axis=0)

    def thinned_moments(self, max_states: int = 512) -> np.ndarray:
        """Post-burn-in moment draws [n, K, q] under eta-tilde (gamma = 0).

        Thinned to at most ``max_states`` states per household; used by the
        convex warm start's sample log-partition.
        """
        cl, burn = self.cfg.chain_length, self.cfg.burn_in
        step = max(self.cfg.thinning,
                   -(-(cl - burn) // max_states))  # ceil division
        idx = np.arange(burn, cl, step)
        g = np.empty((self.n, idx.size, self.q))
        g[:, :, self._cols_base] = self._g_base[:, idx, :]
        g[:, :, self._cols_theta] = self._theta_matrix()[:, idx, :]
        return g

    @property
    def acceptance_rates(self) -> np.ndarray:
        """Per-household fraction of accepted (v, c*) proposals."""
        with np.errstate(invalid="ignore"):
            return self._acc[:, 1] / np.maximum(self._acc[:, 0], 1)

    def sampled_states(self, household: int) -> list[LatentDraw]:
        """Decoded states recorded every ``record_states_every`` steps."""
        if self.cfg.record_states_every <= 0:
            raise ValueError("chain was run without state recording")
        x = self.observations[household]
        rows = self._state_rec[household]
        if self.mspec.experiment_mode:
            out = []
            for row in rows:
                y = row.reshape(self.t_obs, self.n_goods)
                if self.vary_price:
                    out.append(LatentDraw(v=np.ones(self.t_obs),
                                          w_c=np.zeros_like(x.c),
                                          w_p=x.rho - y))
                else:
                    out.append(LatentDraw(v=np.ones(self.t_obs),
                                          w_c=x.c - y,
                                          w_p=np.zeros_like(x.rho)))
            return out
        return [_unpack_draw(row, x, self.spec, self.tt, self.nslk)
                for row in rows]


def mh_weighted_average(x: Observation, gamma: np.ndarray, cfg: ChainConfig,
                        mspec: MomentSpec, spec: ModelSpec,
                        e_next: Optional[float] = None) -> np.ndarray:
    """Tilted moment average h~_M(x; gamma) for a single household."""
    integ = MomentIntegrator([x], spec, mspec, cfg,
                             e_next=None if e_next is None
                             else np.array([e_next]))
    return integ.h_matrix(np.asarray(gamma, dtype=float))[0]


# ---------------------------------------------------------------------------
# rejection-sampling oracle

def rejection_sampler(x: Observation, cfg: ChainConfig, mspec: MomentSpec,
                      spec: ModelSpec, count: int,
                      e_next: Optional[float] = None) -> list:
    """i.i.d. draws from eta-tilde by proposing from the box measure.

    Small instances only: proposals are uniform on the same boxes the
    chain uses, weighted by the Gaussian moment factor when applicable,
    and kept only when every Afriat/sign constraint holds.
    """
    if count == 0:
        return []
    if count < 0:
        raise ValueError("count must be nonnegative")
    rng = np.random.default_rng(_derive_key(cfg.seed, x.household_id, 2))
    draws: list = []
    proposed = 0

    if mspec.experiment_mode:
        vary_price = _experiment_sides(mspec)
        rho = np.asarray(x.rho, float)
        c = np.asarray(x.c, float)
        t_obs, n_goods = c.shape
        e_obs = np.einsum("tl,tl->t", rho, c)
        from .deterministic import check_garp
        while len(draws) < count:
            if proposed >= 10_000_000 and len(draws) / proposed < 1e-6:
                raise RuntimeError("rejection oracle timed out: acceptance "
                                   "rate below 1e-6 after 1e7 proposals")
            w = rng.exponential(size=(t_obs, n_goods))
            w /= w.sum(axis=1, keepdims=True)
            proposed += 1
            if vary_price:
                y = w * e_obs[:, None] / c
                ok = check_garp(y, c).consistent
            else:
                y = w * e_obs[:, None] / rho
                ok = check_garp(rho, y).consistent
            if not ok:
                continue
            if vary_price:
                draws.append(LatentDraw(v=np.ones(t_obs),
                                        w_c=np.zeros_like(c), w_p=rho - y))
            else:
                draws.append(LatentDraw(v=np.ones(t_obs), w_c=c - y,
                                        w_p=np.zeros_like(rho)))
        return draws

    geo = _Geometry(x, spec, mspec, cfg, e_next=e_next)
    if geo.walras_next:
        raise ValueError("the rejection oracle does not support the "
                         "walras_next restriction")
    tt, t_obs, n_goods = geo.tt, geo.t_obs, geo.n_goods
    nslk = mspec.slack_dim(t_obs, n_goods)
    has_lam = spec.model in (Model.STATIC, Model.ED_IU)
    gaussian = cfg.eta_kind == ETA_GAUSSIAN
    d_lo, d_hi = spec.d_support
    db_lo, db_hi = (spec.d_support_pair[1]
                    if spec.model is Model.COLLECTIVE else spec.d_support)

    while len(draws) < count:
        if proposed >= 10_000_000 and len(draws) / max(proposed, 1) < 1e-6:
            raise RuntimeError("rejection oracle timed out: acceptance rate "
                               "below 1e-6 after 1e7 proposals")
        proposed += 1
        v = rng.uniform(0.0, geo.v_cap, size=tt)
        v_b = rng.uniform(0.0, geo.v_cap, size=tt) \
            if spec.model is Model.COLLECTIVE else None
        lam = None
        if has_lam:
            lam = rng.uniform(1e-8, cfg.lam_cap, size=tt)
            if spec.model is Model.ED_IU:
                lam[0] = 1.0
        c_star = rng.uniform(geo.c_lo, geo.c_hi)
        d = rng.uniform(d_lo, d_hi) if spec.model.discounted else None
        d_b = rng.uniform(db_lo, db_hi) \
            if spec.model is Model.COLLECTIVE else None
        slack = rng.uniform(0.0, cfg.slack_cap, size=nslk) if nslk else None
        draw = LatentDraw(v=v, lam=lam, d=d,
                          w_c=x.c - c_star[:t_obs],
                          w_p=np.zeros_like(x.rho), v_b=v_b, d_b=d_b,
                          c_star_next=c_star[t_obs] if tt > t_obs else None,
                          slack=slack)
        if gaussian:
            g = evaluate_g_M(x, draw, mspec)
            if rng.uniform() >= math.exp(-float(g @ g) / cfg.eta_scale):
                continue
        if np.any(evaluate_g_I(x, draw, spec) != 0.0):
            continue
        draws.append(draw)
    return draws


