"""Synthetic CES consumption panels and a replication harness.

Four stock generating processes share one demand rule: each decision
maker buys c*_{t,l} = (rho_{t,l} / d^t)^(-1/sigma) and the observed
quantity is c = c* times an i.i.d. multiplicative perturbation on
[0.97, 1.03].  DGP1/DGP2 are single exponential discounters (d uniform
on [0.8, 1], respectively d = 1); DGP3/DGP4 are two-member households
whose members discount differently and split prices by bargaining
weight (equal split for DGP3, weights uniform on [1/3, 2/3] for DGP4),
with only the summed quantities and prices observed.

``replicate`` repeats generation + test and reports a rejection rate
with its Monte-Carlo standard error.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .deterministic import browning_grid_test
from .elvis import TestResult, minimize_ts
from .moments import BudgetNeutrality, MomentSpec
from .panel import EffectivePricePanel, Model, ModelSpec, Panel, effective_prices
from .sampler import ChainConfig

DGP_KINDS = ("DGP1", "DGP2", "DGP3", "DGP4", "CustomCES")

SIGMA_RANGE = (1.0 / 15.0, 100.0)
PERTURBATION_RANGE = (0.97, 1.03)
PRICE_LOG_SD = 0.3


@dataclass(frozen=True)
class DgpSpec:
    """Configuration of one synthetic panel draw.

    ``price_source`` is either None (prices i.i.d. log-normal with log
    standard deviation ``price_log_sd`` around 1) or a [rows, L] matrix /
    path to a whitespace/comma-delimited file of positive price vectors,
    from which each (household, period) cell samples a row uniformly
    with repetition.  ``d_range``/``sigma_range`` only apply to the
    CustomCES kind; the named DGPs pin their own laws.
    """

    kind: str = "DGP1"
    n: int = 2000
    t_obs: int = 4
    n_goods: int = 17
    price_source: Optional[Union[str, np.ndarray]] = None
    perturbation: bool = True
    seed: int = 0
    price_log_sd: float = PRICE_LOG_SD
    d_range: tuple[float, float] = (0.8, 1.0)
    sigma_range: tuple[float, float] = SIGMA_RANGE

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ValueError(f"unknown DGP kind {self.kind!r}; expected one of "
                             + ", ".join(DGP_KINDS))
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.t_obs < 2:
            raise ValueError("a panel needs at least 2 periods")
        if self.n_goods < 1:
            raise ValueError("a panel needs at least 1 good")
        for name in ("d_range", "sigma_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi")


def _price_matrix(spec: DgpSpec) -> Optional[np.ndarray]:
    src = spec.price_source
    if src is None:
        return None
    if isinstance(src, (str, bytes)):
        mat = np.loadtxt(src, delimiter=None if str(src).endswith(".txt") else ",",
                         ndmin=2)
    else:
        mat = np.asarray(src, dtype=float)
    if mat.ndim != 2 or mat.shape[1] != spec.n_goods:
        raise ValueError(f"price matrix must be [rows, {spec.n_goods}], "
                         f"got shape {mat.shape}")
    if not np.all(mat > 0):
        raise ValueError("price source contains a nonpositive price")
    return mat


def _draw_prices(spec: DgpSpec, rng: np.random.Generator) -> np.ndarray:
    mat = _price_matrix(spec)
    if mat is None:
        return rng.lognormal(0.0, spec.price_log_sd,
                             size=(spec.n, spec.t_obs, spec.n_goods))
    rows = rng.integers(0, mat.shape[0], size=(spec.n, spec.t_obs))
    return mat[rows]


def _ces_demand(rho: np.ndarray, d: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """c*_{t,l} = (rho_{t,l}/d^t)^(-1/sigma); broadcasts over households."""
    t_obs = rho.shape[-2]
    powers = d[..., None, None] ** np.arange(t_obs)[:, None]
    return (rho / powers) ** (-1.0 / sigma)


def generate_with_truth(spec: DgpSpec) -> tuple[Panel, dict]:
    """Draw a panel plus the latent magnitudes that produced it.

    The truth dict always holds ``c_true`` [n, T, L]; single-agent kinds
    add ``d`` and ``sigma`` [n], the couple kinds add per-member
    ``d_a``/``d_b``, ``sigma`` [n, L, 2], bargaining weights ``mu`` and
    member quantities ``c_a``/``c_b``.
    """
    rng = np.random.default_rng(spec.seed)
    rho = _draw_prices(spec, rng)
    n, T, L = rho.shape
    truth: dict = {}

    if spec.kind in ("DGP1", "DGP2", "CustomCES"):
        if spec.kind == "DGP2":
            d = np.ones(n)
        else:
            lo, hi = (0.8, 1.0) if spec.kind == "DGP1" else spec.d_range
            d = rng.uniform(lo, hi, size=n)
        s_lo, s_hi = SIGMA_RANGE if spec.kind != "CustomCES" else spec.sigma_range
        sigma = rng.uniform(s_lo, s_hi, size=n)
        c_true = _ces_demand(rho, d, sigma[:, None, None])
        truth.update(d=d, sigma=sigma)
    else:  # DGP3 / DGP4: two members behind one observed aggregate
        d_a = rng.uniform(0.1, 1.0, size=n)
        d_b = rng.uniform(0.99, 1.0, size=n)
        sigma = rng.uniform(*SIGMA_RANGE, size=(n, L, 2))
        if spec.kind == "DGP3":
            mu = np.full((n, T, L), 0.5)
        else:
            mu = rng.uniform(1.0 / 3.0, 2.0 / 3.0, size=(n, T, L))
        c_a = _ces_demand(mu * rho, d_a, sigma[:, None, :, 0])
        c_b = _ces_demand((1.0 - mu) * rho, d_b, sigma[:, None, :, 1])
        c_true = c_a + c_b
        truth.update(d_a=d_a, d_b=d_b, sigma=sigma, mu=mu, c_a=c_a, c_b=c_b)

    truth["c_true"] = c_true
    c_obs = c_true.copy()
    if spec.perturbation:
        c_obs *= rng.uniform(*PERTURBATION_RANGE, size=c_true.shape)

    panel = Panel(prices=rho, quantities=c_obs,
                  interest_rates=np.zeros((n, T)),
                  household_ids=np.arange(n), periods=np.arange(T),
                  goods=np.arange(L))
    return panel, truth


def generate(spec: DgpSpec) -> Panel:
    """Draw one synthetic panel (prices are already effective prices)."""
    return generate_with_truth(spec)[0]


# ---------------------------------------------------------------------------
# replication harness

@dataclass(frozen=True)
class BrowningTest:
    """Per-household deterministic grid scan; rejects when no grid d works."""

    spec: ModelSpec = field(default_factory=lambda: ModelSpec(model=Model.ED))
    grid: Optional[Sequence[float]] = None


@dataclass(frozen=True)
class ElvisTest:
    """Panel-level moment test; rejects when p_value < alpha.

    ``mspec`` defaults to mean budget neutrality with exact prices;
    ``options`` is forwarded to the minimizer (box, budgets...).
    """

    spec: ModelSpec = field(default_factory=lambda: ModelSpec(model=Model.ED))
    mspec: Optional[MomentSpec] = None
    cfg: ChainConfig = field(default_factory=ChainConfig)
    alpha: float = 0.05
    options: dict = field(default_factory=dict)

    def resolved_mspec(self) -> MomentSpec:
        if self.mspec is not None:
            return self.mspec
        return MomentSpec(components=(BudgetNeutrality(),),
                          support_constraints=("w_p_zero",))


@dataclass(frozen=True)
class ReplicationResult:
    """Rejection rate over replications with its MC standard error.

    For the Browning test, ``per_rep`` holds each replication's fraction
    of failing households and ``rate`` their mean; for the moment test,
    ``per_rep`` holds 0/1 rejection flags and ``ts``/``p_values`` the
    statistic per replication.
    """

    rate: float
    stderr: float
    per_rep: np.ndarray
    ts: Optional[np.ndarray] = None
    p_values: Optional[np.ndarray] = None
    results: Optional[tuple] = None


def _browning_rep(panel: Panel, test: BrowningTest) -> float:
    epanel = effective_prices(panel, test.spec)
    fails = 0
    for x in epanel.observations():
        if not browning_grid_test(x.rho, x.c, test.spec, grid=test.grid).passes:
            fails += 1
    return fails / panel.n_households


def _elvis_rep(panel: Panel, test: ElvisTest, cfg: ChainConfig) -> TestResult:
    epanel = effective_prices(panel, test.spec)
    return minimize_ts(epanel, cfg, test.resolved_mspec(), test.spec,
                       **test.options)


def replicate(dgp: DgpSpec, m: int,
              test: Union[BrowningTest, ElvisTest]) -> ReplicationResult:
    """Repeat generate-and-test ``m`` times.

    Replication r uses dgp seed ``dgp.seed + r`` (and chain seed
    ``cfg.seed + r`` for the moment test), so any subset of replications
    can be reproduced independently.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if isinstance(test, BrowningTest):
        per_rep = np.empty(m)
        for r in range(m):
            panel = generate(replace(dgp, seed=dgp.seed + r))
            per_rep[r] = _browning_rep(panel, test)
        rate = float(per_rep.mean())
        stderr = float(per_rep.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
        return ReplicationResult(rate=rate, stderr=stderr, per_rep=per_rep)

    if not isinstance(test, ElvisTest):
        raise TypeError(f"unsupported test {type(test).__name__}")
    rejects = np.empty(m)
    ts = np.empty(m)
    pv = np.empty(m)
    results = []
    for r in range(m):
        panel = generate(replace(dgp, seed=dgp.seed + r))
        res = _elvis_rep(panel, test, replace(test.cfg, seed=test.cfg.seed + r))
        results.append(res)
        ts[r] = res.ts
        pv[r] = res.p_value
        rejects[r] = 1.0 if res.p_value < test.alpha else 0.0
    rate = float(rejects.mean())
    stderr = float(np.sqrt(max(rate * (1.0 - rate), 0.0) / m))
    return ReplicationResult(rate=rate, stderr=stderr, per_rep=rejects,
                             ts=ts, p_values=pv, results=tuple(results))
