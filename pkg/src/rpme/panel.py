"""Panel containers, CSV ingestion and price/quantity transformations.

The long CSV format is one row per (household, period, good):

    household,period,good,price,quantity,interest_rate

Lines starting with ``#`` are comments.  Every household must report the
same period set and the same good set; prices are strictly positive,
quantities nonnegative with at least one positive entry per period, and
interest rates (optional for static data) must exceed -1 and be constant
within a (household, period) cell.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np


class Model(str, Enum):
    """Rationalizability model variants."""

    STATIC = "static"
    ED = "ed"
    ED_IU = "ed-iu"
    COLLECTIVE = "collective"

    @property
    def discounted(self) -> bool:
        """Whether the model deflates prices by compounded interest."""
        return self is not Model.STATIC


class PanelFormatError(ValueError):
    """The CSV panel violates the format contract (bad value, missing cell...)."""


class SupportViolation(ValueError):
    """A latent draw leaves the admissible support (negative c*, nonpositive rho*...)."""


def _parse_model(value) -> Model:
    if isinstance(value, Model):
        return value
    try:
        return Model(str(value).lower())
    except ValueError:
        raise ValueError(
            f"unknown model {value!r}; expected one of "
            + ", ".join(m.value for m in Model)
        ) from None


@dataclass(frozen=True)
class ModelSpec:
    """Model variant plus discount-factor support.

    ``d_support`` is a closed interval inside (0, 1].  For the collective
    model it bounds member A and ``d_support_b`` (defaulting to the same
    interval) bounds member B.
    """

    model: Model = Model.ED
    d_support: tuple[float, float] = (0.1, 1.0)
    d_support_b: Optional[tuple[float, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "model", _parse_model(self.model))
        for name, iv in (("d_support", self.d_support),
                         ("d_support_b", self.d_support_b)):
            if iv is None:
                continue
            lo, hi = float(iv[0]), float(iv[1])
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1, got {iv}")
            object.__setattr__(self, name, (lo, hi))

    @property
    def d_support_pair(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return self.d_support, self.d_support_b or self.d_support


@dataclass(frozen=True)
class Observation:
    """One household's effective prices and observed quantities.

    ``rho`` and ``c`` are [T, L].  ``rho_next`` optionally appends a
    counterfactual effective price vector for an unobserved period T+1
    (no quantities exist for it).
    """

    rho: np.ndarray
    c: np.ndarray
    household_id: int = 0
    rho_next: Optional[np.ndarray] = None

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if rho.ndim != 2 or rho.shape != c.shape:
            raise ValueError(f"rho/c must be matching [T, L] arrays, "
                             f"got {rho.shape} vs {c.shape}")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "c", c)
        if self.rho_next is not None:
            nxt = np.asarray(self.rho_next, dtype=float).reshape(-1)
            if nxt.shape[0] != rho.shape[1]:
                raise ValueError("rho_next length must equal the number of goods")
            if not np.all(nxt > 0):
                raise ValueError("rho_next must be strictly positive")
            object.__setattr__(self, "rho_next", nxt)

    @property
    def n_periods(self) -> int:
        return self.rho.shape[0]

    @property
    def n_goods(self) -> int:
        return self.rho.shape[1]


@dataclass(frozen=True)
class LatentDraw:
    """Latent magnitudes (v, lambda, d, w_c, w_p) for one household.

    Fields may be omitted where a model pins them (lam=None means the
    unit vector, d=None means undiscounted).  ``v_b``/``d_b`` hold the
    second member's values under the collective model.  ``c_star_next``
    is the unobserved-period consumption of a counterfactual extension,
    and ``slack`` the nonnegative slack vector of inequality moments.
    """

    v: np.ndarray
    lam: Optional[np.ndarray] = None
    d: Optional[float] = None
    w_c: Optional[np.ndarray] = None
    w_p: Optional[np.ndarray] = None
    v_b: Optional[np.ndarray] = None
    d_b: Optional[float] = None
    c_star_next: Optional[np.ndarray] = None
    slack: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(-1))
        for name in ("lam", "v_b", "c_star_next", "slack"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name,
                                   np.asarray(val, dtype=float).reshape(-1))
        for name in ("w_c", "w_p"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=float)
                if val.ndim != 2:
                    raise ValueError(f"{name} must be a [T, L] array")
                object.__setattr__(self, name, val)
        if self.lam is not None and self.lam.shape != self.v.shape:
            raise ValueError("lam must match v in length")
        if self.v_b is not None and self.v_b.shape != self.v.shape:
            raise ValueError("v_b must match v in length")
        for name in ("d", "d_b"):
            val = getattr(self, name)
            if val is not None:
                val = float(val)
                if not (0.0 < val <= 1.0):
                    raise ValueError(f"{name} must lie in (0, 1], got {val}")
                object.__setattr__(self, name, val)


@dataclass(frozen=True)
class Panel:
    """Balanced consumption panel.

    prices, quantities: [n, T, L]; interest_rates: [n, T] (NaN = not
    reported); household_ids: [n] original labels in sorted order;
    periods: [T] original labels; goods: [L] original labels.
    """

    prices: np.ndarray
    quantities: np.ndarray
    interest_rates: np.ndarray
    household_ids: np.ndarray
    periods: np.ndarray
    goods: np.ndarray
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        p = np.asarray(self.prices, dtype=float)
        q = np.asarray(self.quantities, dtype=float)
        r = np.asarray(self.interest_rates, dtype=float)
        if p.ndim != 3 or p.shape != q.shape:
            raise ValueError("prices/quantities must be matching [n, T, L] arrays")
        if r.shape != p.shape[:2]:
            raise ValueError("interest_rates must be [n, T]")
        if not np.all(p > 0):
            raise ValueError("prices must be strictly positive")
        if np.any(q < 0):
            raise ValueError("quantities must be nonnegative")
        if np.any(np.all(q <= 0, axis=2)):
            raise ValueError("each (household, period) needs a positive quantity")
        finite_r = r[np.isfinite(r)]
        if finite_r.size and np.any(finite_r <= -1):
            raise ValueError("interest rates must exceed -1")
        object.__setattr__(self, "prices", p)
        object.__setattr__(self, "quantities", q)
        object.__setattr__(self, "interest_rates", r)
        object.__setattr__(self, "household_ids",
                           np.asarray(self.household_ids, dtype=np.int64))
        object.__setattr__(self, "periods", np.asarray(self.periods))
        object.__setattr__(self, "goods", np.asarray(self.goods))

    @property
    def n_households(self) -> int:
        return self.prices.shape[0]

    @property
    def n_periods(self) -> int:
        return self.prices.shape[1]

    @property
    def n_goods(self) -> int:
        return self.prices.shape[2]


@dataclass(frozen=True)
class EffectivePricePanel:
    """Prices deflated to period-0 units, ready for rationalizability tests."""

    rho: np.ndarray  # [n, T, L]
    panel: Panel
    spec: ModelSpec

    def household(self, i: int, rho_next: Optional[np.ndarray] = None) -> Observation:
        return Observation(rho=self.rho[i], c=self.panel.quantities[i],
                           household_id=int(self.panel.household_ids[i]),
                           rho_next=rho_next)

    def observations(self) -> list[Observation]:
        return [self.household(i) for i in range(self.panel.n_households)]


_COLUMNS = ("household", "period", "good", "price", "quantity", "interest_rate")


def _err(line: int, msg: str) -> PanelFormatError:
    return PanelFormatError(f"line {line}: {msg}")


def load_panel(path) -> Panel:
    """Read a long-format CSV panel, validating as it goes.

    Raises PanelFormatError with the offending physical line number for
    malformed rows, nonpositive prices, negative quantities, rates <= -1,
    duplicate cells, and for households missing (period, good) cells.
    Differing interest rates across households in the same period are
    allowed but reported in ``Panel.warnings``.
    """
    rows = {}  # (household, period, good) -> (price, quantity, rate, line)
    header = None
    col = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, raw in enumerate(csv.reader(fh), start=1):
            if not raw or (raw[0].lstrip().startswith("#")):
                continue
            if all(not cell.strip() for cell in raw):
                continue
            if header is None:
                header = [h.strip() for h in raw]
                extra = set(header) - set(_COLUMNS)
                missing = set(_COLUMNS) - set(header)
                if missing or extra:
                    raise _err(lineno, f"expected columns {list(_COLUMNS)}, got {header}")
                col = {name: header.index(name) for name in _COLUMNS}
                continue
            if len(raw) != len(header):
                raise _err(lineno, f"expected {len(header)} fields, got {len(raw)}")
            try:
                hh = int(raw[col["household"]])
                t = int(raw[col["period"]])
            except ValueError:
                raise _err(lineno, "household and period must be integers") from None
            good = raw[col["good"]].strip()
            try:
                price = float(raw[col["price"]])
                qty = float(raw[col["quantity"]])
            except ValueError:
                raise _err(lineno, "price and quantity must be numeric") from None
            rate_raw = raw[col["interest_rate"]].strip()
            rate = np.nan if rate_raw == "" else float(rate_raw)
            if not price > 0:
                raise _err(lineno, f"nonpositive price {price} "
                                   f"(household {hh}, period {t}, good {good})")
            if qty < 0:
                raise _err(lineno, f"negative quantity {qty} "
                                   f"(household {hh}, period {t}, good {good})")
            if np.isfinite(rate) and rate <= -1:
                raise _err(lineno, f"interest rate {rate} <= -1 "
                                   f"(household {hh}, period {t})")
            key = (hh, t, good)
            if key in rows:
                raise _err(lineno, f"duplicate cell household {hh}, period {t}, "
                                   f"good {good} (first seen line {rows[key][3]})")
            rows[key] = (price, qty, rate, lineno)
    if header is None:
        raise PanelFormatError("empty panel file")
    if not rows:
        raise PanelFormatError("panel has a header but no data rows")

    households = sorted({k[0] for k in rows})
    periods = sorted({k[1] for k in rows})
    goods = sorted({k[2] for k in rows})
    n, T, L = len(households), len(periods), len(goods)

    prices = np.empty((n, T, L))
    qty = np.empty((n, T, L))
    rates = np.full((n, T), np.nan)
    for i, hh in enumerate(households):
        for ti, t in enumerate(periods):
            cell_rate = None
            cell_rate_line = None
            for gi, g in enumerate(goods):
                item = rows.get((hh, t, g))
                if item is None:
                    raise PanelFormatError(
                        f"household {hh} is missing period {t}, good {g}; "
                        f"every household must cover the full period x good grid")
                prices[i, ti, gi], qty[i, ti, gi], rate, line = item
                if cell_rate is None:
                    cell_rate, cell_rate_line = rate, line
                else:
                    same = (np.isnan(rate) and np.isnan(cell_rate)) or rate == cell_rate
                    if not same:
                        raise _err(line, f"interest rate {rate} differs from "
                                         f"{cell_rate} (line {cell_rate_line}) within "
                                         f"household {hh}, period {t}")
            rates[i, ti] = cell_rate
    if np.any(np.all(qty <= 0, axis=2)):
        bad = np.argwhere(np.all(qty <= 0, axis=2))[0]
        raise PanelFormatError(
            f"household {households[bad[0]]}, period {periods[bad[1]]}: "
            f"all-zero quantity vector")

    warn = []
    for ti, t in enumerate(periods):
        finite = rates[:, ti][np.isfinite(rates[:, ti])]
        if finite.size and np.unique(finite).size > 1:
            warn.append(f"interest rates differ across households in period {t}")

    return Panel(prices=prices, quantities=qty, interest_rates=rates,
                 household_ids=np.array(households), periods=np.array(periods),
                 goods=np.array(goods), warnings=tuple(warn))


def save_panel(panel: Panel, path) -> None:
    """Write a panel back to CSV; numeric content round-trips bit-exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_COLUMNS)
        for i, hh in enumerate(panel.household_ids):
            for ti, t in enumerate(panel.periods):
                rate = panel.interest_rates[i, ti]
                rate_s = "" if not np.isfinite(rate) else repr(float(rate))
                for gi, g in enumerate(panel.goods):
                    writer.writerow([int(hh), int(t), g,
                                     repr(float(panel.prices[i, ti, gi])),
                                     repr(float(panel.quantities[i, ti, gi])),
                                     rate_s])


def effective_prices(panel: Panel, spec: ModelSpec) -> EffectivePricePanel:
    """Deflate spot prices to period-0 units.

    Static: rho_t = p_t.  Discounted models: rho_t = p_t / prod_{j<=t}(1+r_j)
    with the empty product at t = 0.  Missing interest rates are an error
    for discounted models.
    """
    p = panel.prices
    if not spec.model.discounted:
        return EffectivePricePanel(rho=p.copy(), panel=panel, spec=spec)
    r = panel.interest_rates
    if np.any(~np.isfinite(r[:, 1:])):
        raise ValueError(f"model {spec.model.value} needs interest rates for "
                         f"every period after the first")
    if np.any(r[:, 1:] <= -1):
        raise ValueError("interest rates must exceed -1")
    growth = np.ones_like(r)
    growth[:, 1:] = np.cumprod(1.0 + r[:, 1:], axis=1)
    return EffectivePricePanel(rho=p / growth[:, :, None], panel=panel, spec=spec)


def true_quantities(x: Observation, e: LatentDraw):
    """Recover (c*, rho*) = (c - w_c, rho - w_p) from a latent draw.

    Returns (c_star, rho_star, valid); ``valid`` is False when c* has a
    negative component or rho* a nonpositive one (the draw then lies
    outside the admissible support).
    """
    c_star = x.c if e.w_c is None else x.c - e.w_c
    rho_star = x.rho if e.w_p is None else x.rho - e.w_p
    valid = bool(np.all(c_star >= 0) and np.all(rho_star > 0))
    return np.asarray(c_star, dtype=float), np.asarray(rho_star, dtype=float), valid
