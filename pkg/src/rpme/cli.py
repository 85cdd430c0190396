"""Command-line front end: det-test, elvis-test, mc, counterfactual, garp.

Each run resolves a flat key/value configuration from an optional TOML
file plus command-line flags (flags win), validates every key before
any computation starts, echoes the fully-resolved configuration for
provenance, and writes JSON/CSV artifacts into the output directory.

Exit codes: 0 = run completed (whatever the statistical outcome),
2 = configuration error, 3 = data error.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from .counterfactual import MOMENT_KINDS, CounterfactualQuery, SupportSet, \
    support_set
from .deterministic import browning_grid_test, check_garp
from .moments import MomentNameError, MomentSpec, SUPPORT_TOKENS, \
    parse_moment_tokens
from .montecarlo import BrowningTest, DgpSpec, ElvisTest, replicate
from .elvis import minimize_ts
from .panel import Model, ModelSpec, PanelFormatError, effective_prices, \
    load_panel
from .sampler import ChainConfig

ENV_THREADS = "RP_ELVIS_THREADS"


class ConfigError(ValueError):
    """Bad key, value or combination in the resolved configuration."""


class DataError(ValueError):
    """The panel (or another input file) is missing or malformed."""


# ---------------------------------------------------------------------------
# configuration schemas: key -> (default, type, help)
# ``list`` values are lists of strings; None defaults mean "optional".

_COMMON = {
    "out": ("runs", str, "output directory for artifacts"),
    "seed": (0, int, "top-level seed; all randomness derives from it"),
    "threads": (None, int,
                f"numba thread cap (fallback: ${ENV_THREADS})"),
}

_CHAIN = {
    "chain_length": (10000, int, "states per household chain (cl)"),
    "burn_in": (1000, int, "discarded prefix of each chain"),
    "thinning": (1, int, "keep every k-th post-burn-in state"),
    "eta_kind": ("gaussian", str, "gaussian | uniform"),
    "eta_scale": (1.0, float, "scale inside exp(-||g||^2/scale)"),
}

_MODEL = {
    "model": ("ed", str, "static | ed | ed-iu | collective"),
    "d_lo": (0.1, float, "discount-factor support lower end"),
    "d_hi": (1.0, float, "discount-factor support upper end"),
    "d_lo_b": (None, float, "member-B support lower end (collective)"),
    "d_hi_b": (None, float, "member-B support upper end (collective)"),
}

_SCHEMAS = {
    "det-test": {
        **_COMMON,
        "panel": (None, str, "panel CSV path"),
        "model": ("ed", str, "static | ed | collective"),
        "d_lo": (0.1, float, "discount grid lower end"),
        "d_hi": (1.0, float, "discount grid upper end"),
        "grid_step": (0.05, float, "discount grid spacing"),
        "report_cycles": (False, bool, "add a GARP cycle column"),
    },
    "garp": {
        **_COMMON,
        "panel": (None, str, "panel CSV path"),
        "model": ("static", str, "deflation convention for prices"),
    },
    "elvis-test": {
        **_COMMON, **_MODEL, **_CHAIN,
        "panel": (None, str, "panel CSV path"),
        "moments": (["budget-neutrality"], list, "moment component tokens"),
        "support": (["w_p_zero"], list, "support-constraint tokens"),
        "alpha": (0.05, float, "rejection level"),
        "box": (50.0, float, "gamma search box half-width"),
    },
    "mc": {
        **_COMMON, **_MODEL, **_CHAIN,
        "dgp": ("DGP2", str, "DGP1 | DGP2 | DGP3 | DGP4 | CustomCES"),
        "n": (500, int, "households per replication"),
        "m": (50, int, "replications"),
        "t_obs": (4, int, "periods"),
        "n_goods": (17, int, "goods"),
        "test": ("elvis", str, "browning | elvis"),
        "grid_step": (0.05, float, "browning grid spacing"),
        "alpha": (0.05, float, "rejection level (elvis)"),
        "price_log_sd": (0.3, float, "synthetic price dispersion"),
        "perturbation": (True, bool, "multiplicative observation error"),
        "box": (50.0, float, "gamma search box half-width"),
    },
    "counterfactual": {
        **_COMMON, **_MODEL, **_CHAIN,
        "panel": (None, str, "panel CSV path"),
        "moments": (["budget-neutrality"], list, "base moment tokens"),
        "support": (["w_p_zero"], list, "support-constraint tokens"),
        "rho_t1": (None, str, "out-of-sample prices: inline list or file"),
        "moment": ("avg-varian", str, " | ".join(MOMENT_KINDS)),
        "theta_grid": (None, str, "lo:hi:step scalar grid"),
        "theta_base": (None, str,
                       "inline vector scaled by the grid (avg-varian)"),
        "alpha": (0.05, float, "inversion level"),
        "phi": (0.5, float, "quantile level (quantile-varian)"),
        "good": (0, int, "good index (budget-share)"),
        "e_next": (None, float, "pin counterfactual expenditure"),
        "box": (50.0, float, "gamma search box half-width"),
    },
}

_REQUIRED = {
    "det-test": ("panel",),
    "garp": ("panel",),
    "elvis-test": ("panel",),
    "mc": (),
    "counterfactual": ("panel", "rho_t1", "theta_grid"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rpme",
        description="Revealed-preference rationalizability tests under "
                    "measurement error")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in _SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run-config file")
        for key, (default, typ, help_text) in schema.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_true",
                               default=None, help=help_text)
            elif typ is list:
                p.add_argument(flag, dest=key, nargs="+", default=None,
                               help=help_text)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None,
                               help=help_text)
    return parser


def _read_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None


def _coerce(key: str, value, typ):
    if typ is list:
        if not (isinstance(value, (list, tuple))
                and all(isinstance(v, str) for v in value)):
            raise ConfigError(f"{key} must be a list of strings")
        return list(value)
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge config file and flags into a validated flat dict (flags win)."""
    schema = _SCHEMAS[command]
    file_cfg = _read_toml(args.config) if args.config else {}
    unknown = sorted(set(file_cfg) - set(schema))
    if unknown:
        raise ConfigError(
            f"unknown config keys: {', '.join(unknown)}; valid keys: "
            + ", ".join(sorted(schema)))
    resolved = {}
    for key, (default, typ, _) in schema.items():
        flag_val = getattr(args, key)
        if flag_val is not None:
            resolved[key] = flag_val
        elif key in file_cfg:
            resolved[key] = _coerce(key, file_cfg[key], typ)
        else:
            resolved[key] = default
    for key in _REQUIRED[command]:
        if resolved[key] is None:
            raise ConfigError(f"{key} is required (flag --"
                              + key.replace("_", "-") + " or config key)")
    return resolved


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(json.dumps(v) for v in value) + "]"
    return json.dumps(str(value))


def echo_config(command: str, resolved: dict, out_dir: Path) -> Path:
    """Print and persist the fully-resolved config; the file reloads as-is."""
    lines = [f"# rpme {command} -- resolved configuration"]
    for key in _SCHEMAS[command]:
        value = resolved[key]
        if value is None:
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    path = out_dir / "resolved_config.toml"
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# shared builders

def _load_panel_checked(path: str):
    if not os.path.exists(path):
        raise DataError(f"panel file not found: {path}")
    try:
        return load_panel(path)
    except PanelFormatError as exc:
        raise DataError(f"{path}: {exc}") from None


def _model_spec(cfg: dict) -> ModelSpec:
    b = None
    if cfg.get("d_lo_b") is not None or cfg.get("d_hi_b") is not None:
        b = (cfg.get("d_lo_b") or cfg["d_lo"],
             cfg.get("d_hi_b") or cfg["d_hi"])
    try:
        return ModelSpec(model=cfg["model"],
                         d_support=(cfg.get("d_lo", 0.1),
                                    cfg.get("d_hi", 1.0)),
                         d_support_b=b)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _chain_config(cfg: dict) -> ChainConfig:
    try:
        return ChainConfig(chain_length=cfg["chain_length"],
                           burn_in=cfg["burn_in"], thinning=cfg["thinning"],
                           seed=cfg["seed"], eta_kind=cfg["eta_kind"],
                           eta_scale=cfg["eta_scale"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _moment_spec(cfg: dict) -> MomentSpec:
    try:
        comps = parse_moment_tokens(cfg["moments"])
        return MomentSpec(comps, tuple(cfg["support"]))
    except MomentNameError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _set_threads(cfg: dict) -> None:
    value = cfg.get("threads")
    if value is None:
        env = os.environ.get(ENV_THREADS)
        if env is None:
            return
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"${ENV_THREADS} must be an integer, "
                              f"got {env!r}") from None
    if value < 1:
        raise ConfigError("threads must be at least 1")
    import numba
    numba.set_num_threads(min(value, numba.config.NUMBA_NUM_THREADS))


def _timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(
        timespec="seconds")


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _write_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True)
                    + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _parse_inline_or_file(text: str, what: str) -> np.ndarray:
    toks = text.replace(":", ",").split(",")
    try:
        return np.array([float(t) for t in toks if t.strip() != ""])
    except ValueError:
        pass
    if not os.path.exists(text):
        raise DataError(f"{what} file not found: {text}")
    try:
        return np.loadtxt(text, delimiter=None if text.endswith(".txt")
                          else ",", ndmin=1)
    except ValueError as exc:
        raise DataError(f"{what} file {text}: {exc}") from None


def _scalar_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError("theta_grid must look like lo:hi:step")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError("theta_grid must be numeric lo:hi:step") from None
    if step <= 0 or hi < lo:
        raise ConfigError("theta_grid needs step > 0 and hi >= lo")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(count)


# ---------------------------------------------------------------------------
# plot-data emission

def emit_plot_data(results, out_dir) -> list[Path]:
    """Write figure-ready tidy CSVs for mc or counterfactual results.

    Accepts a list of ``{"dgp", "n", "rate", "stderr"}`` rows (one CSV
    row per (dgp, n)), a list of ``(x, SupportSet)`` pairs from a sweep
    (one row per x with per-coordinate lower/upper bounds, ``NA`` where
    the accepted set is empty), or a single SupportSet (theta rows).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(results, SupportSet):
        path = out_dir / "support_set.csv"
        _write_csv(path, ["theta", "ts", "p_value", "accepted"],
                   _support_rows(results))
        return [path]
    results = list(results)
    if results and isinstance(results[0], dict):
        path = out_dir / "rejection_rates.csv"
        _write_csv(path, ["dgp", "n", "rate", "stderr"],
                   [[r["dgp"], r["n"], repr(float(r["rate"])),
                     repr(float(r["stderr"]))] for r in results])
        return [path]
    k = max((1 if ss.lower is None else len(ss.lower)
             for _, ss in results), default=1)
    header = (["x"] + [f"lower_{j}" for j in range(k)]
              + [f"upper_{j}" for j in range(k)])
    rows = []
    for x, ss in results:
        if ss.lower is None:
            rows.append([repr(float(x))] + ["NA"] * (2 * k))
        else:
            rows.append([repr(float(x))]
                        + [repr(float(v)) for v in np.atleast_1d(ss.lower)]
                        + [repr(float(v)) for v in np.atleast_1d(ss.upper)])
    path = out_dir / "support_bounds.csv"
    _write_csv(path, header, rows)
    return [path]


def _support_rows(ss: SupportSet) -> list[list]:
    rows = []
    for theta, ts, pv, ok in zip(ss.thetas, ss.ts, ss.p_values,
                                 ss.accepted_mask):
        vec = np.atleast_1d(np.asarray(theta, dtype=float))
        label = ";".join(repr(float(v)) for v in vec)
        rows.append([label, repr(float(ts)), repr(float(pv)), int(ok)])
    return rows


# ---------------------------------------------------------------------------
# subcommands

def _run_det_test(cfg: dict, out_dir: Path) -> None:
    panel = _load_panel_checked(cfg["panel"])
    spec = _model_spec({**cfg, "d_lo_b": None, "d_hi_b": None})
    step = cfg["grid_step"]
    if step <= 0:
        raise ConfigError("grid_step must be positive")
    count = int(np.floor((cfg["d_hi"] - cfg["d_lo"]) / step + 1e-9)) + 1
    grid = np.round(cfg["d_lo"] + step * np.arange(count), 10)
    epanel = effective_prices(panel, spec)
    rows, fails = [], 0
    for x in epanel.observations():
        res = browning_grid_test(x.rho, x.c, spec, grid=grid)
        fails += not res.passes
        cycle = ""
        if cfg["report_cycles"]:
            garp = check_garp(x.rho, x.c)
            if garp.violating_cycle is not None:
                cyc = garp.violating_cycle
                cycle = ">".join(str(t) for t in cyc)
        rows.append([x.household_id, int(res.passes),
                     ";".join(repr(float(d)) for d in res.passing_d), cycle])
    _write_csv(out_dir / "det_test.csv",
               ["household", "pass", "passing_d", "cycle"], rows)
    _write_json({
        "command": "det-test", "model": spec.model.value,
        "n": panel.n_households, "grid": [float(d) for d in grid],
        "fraction_failing": fails / panel.n_households,
        "seed": cfg["seed"], "timestamp": _timestamp(),
    }, out_dir / "result.json")


def _run_garp(cfg: dict, out_dir: Path) -> None:
    panel = _load_panel_checked(cfg["panel"])
    spec = _model_spec({**cfg, "d_lo": 0.1, "d_hi": 1.0,
                        "d_lo_b": None, "d_hi_b": None})
    epanel = effective_prices(panel, spec)
    rows, bad = [], 0
    for x in epanel.observations():
        res = check_garp(x.rho, x.c)
        bad += not res.consistent
        cycle = ""
        if res.violating_cycle is not None:
            cyc = res.violating_cycle
            cycle = ">".join(str(t) for t in cyc)
        rows.append([x.household_id, int(res.consistent), cycle])
    _write_csv(out_dir / "garp.csv", ["household", "consistent", "cycle"],
               rows)
    _write_json({
        "command": "garp", "model": spec.model.value,
        "n": panel.n_households,
        "fraction_inconsistent": bad / panel.n_households,
        "seed": cfg["seed"], "timestamp": _timestamp(),
    }, out_dir / "result.json")


def _run_elvis_test(cfg: dict, out_dir: Path) -> None:
    panel = _load_panel_checked(cfg["panel"])
    spec = _model_spec(cfg)
    mspec = _moment_spec(cfg)
    chain = _chain_config(cfg)
    epanel = effective_prices(panel, spec)
    res = minimize_ts(epanel, chain, mspec, spec, box=cfg["box"],
                      include_moments=True)
    doc = {
        "ts": res.ts, "dof": res.q, "p_value": res.p_value,
        "gamma_hat": res.gamma_hat, "converged": res.converged,
        "n": panel.n_households, "chain_length": chain.chain_length,
        "seed": chain.seed, "model": spec.model.value,
        "moments": list(cfg["moments"]),
        "alpha": cfg["alpha"], "reject": bool(res.p_value < cfg["alpha"]),
        "diagnostics": res.diagnostics, "timestamp": _timestamp(),
    }
    _write_json(doc, out_dir / "result.json")
    h = res.per_household_moments
    _write_csv(out_dir / "household_moments.csv",
               ["household"] + [f"h_{j}" for j in range(h.shape[1])],
               [[int(panel.household_ids[i])]
                + [repr(float(v)) for v in h[i]] for i in range(h.shape[0])])


def _run_mc(cfg: dict, out_dir: Path) -> None:
    if cfg["test"] not in ("browning", "elvis"):
        raise ConfigError("test must be browning or elvis")
    model = cfg["model"]
    if model == "ed" and cfg["dgp"] in ("DGP3", "DGP4"):
        model = "collective"  # couples need the summed-inequality test
    spec = _model_spec({**cfg, "model": model})
    try:
        dgp = DgpSpec(kind=cfg["dgp"], n=cfg["n"], t_obs=cfg["t_obs"],
                      n_goods=cfg["n_goods"], seed=cfg["seed"],
                      perturbation=cfg["perturbation"],
                      price_log_sd=cfg["price_log_sd"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["test"] == "browning":
        step = cfg["grid_step"]
        count = int(np.floor((cfg["d_hi"] - cfg["d_lo"]) / step + 1e-9)) + 1
        grid = np.round(cfg["d_lo"] + step * np.arange(count), 10)
        test = BrowningTest(spec=spec, grid=grid)
    else:
        test = ElvisTest(spec=spec, cfg=_chain_config(cfg),
                         alpha=cfg["alpha"], options={"box": cfg["box"]})
    rep = replicate(dgp, cfg["m"], test)
    rows = []
    for r in range(cfg["m"]):
        row = [r, repr(float(rep.per_rep[r]))]
        if rep.ts is not None:
            row += [repr(float(rep.ts[r])), repr(float(rep.p_values[r]))]
        rows.append(row)
    header = ["replication", "outcome"] + (
        ["ts", "p_value"] if rep.ts is not None else [])
    _write_csv(out_dir / "replications.csv", header, rows)
    doc = {
        "command": "mc", "dgp": cfg["dgp"], "test": cfg["test"],
        "model": spec.model.value, "n": cfg["n"], "m": cfg["m"],
        "rate": rep.rate, "stderr": rep.stderr,
        "chain_length": cfg["chain_length"], "seed": cfg["seed"],
        "alpha": cfg["alpha"], "timestamp": _timestamp(),
    }
    _write_json(doc, out_dir / "result.json")
    emit_plot_data([{"dgp": cfg["dgp"], "n": cfg["n"], "rate": rep.rate,
                     "stderr": rep.stderr}], out_dir)


def _run_counterfactual(cfg: dict, out_dir: Path) -> None:
    panel = _load_panel_checked(cfg["panel"])
    spec = _model_spec(cfg)
    mspec = _moment_spec(cfg)
    chain = _chain_config(cfg)
    rho_t1 = _parse_inline_or_file(cfg["rho_t1"], "rho_t1")
    scalars = _scalar_grid(cfg["theta_grid"])
    if cfg["moment"] == "avg-varian":
        base = (np.ones(panel.n_goods) if cfg["theta_base"] is None
                else _parse_inline_or_file(cfg["theta_base"], "theta_base"))
        if base.shape != (panel.n_goods,):
            raise ConfigError(f"theta_base must have {panel.n_goods} entries")
        grid = [s * base for s in scalars]
    else:
        grid = list(scalars)
    try:
        query = CounterfactualQuery(
            rho_T1=rho_t1, theta_grid=grid, moment_kind=cfg["moment"],
            alpha=cfg["alpha"], extra_support=cfg["e_next"],
            phi=cfg["phi"], good=cfg["good"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ss = support_set(panel, query, chain, mspec, spec,
                     box=cfg["box"])
    _write_csv(out_dir / "counterfactual.csv",
               ["theta", "ts", "p_value", "accepted"], _support_rows(ss))
    doc = {
        "command": "counterfactual", "moment": cfg["moment"],
        "model": spec.model.value, "n": panel.n_households,
        "chain_length": chain.chain_length, "seed": chain.seed,
        "alpha": ss.alpha, "critical_value": ss.critical_value,
        "dof": ss.dof, "empty": ss.empty, "connected": ss.connected,
        "lower": None if ss.lower is None else ss.lower,
        "upper": None if ss.upper is None else ss.upper,
        "accepted": [np.atleast_1d(t) for t in ss.accepted],
        "moments": list(cfg["moments"]), "timestamp": _timestamp(),
    }
    _write_json(doc, out_dir / "result.json")
    emit_plot_data(ss, out_dir)


_HANDLERS = {
    "det-test": _run_det_test,
    "garp": _run_garp,
    "elvis-test": _run_elvis_test,
    "mc": _run_mc,
    "counterfactual": _run_counterfactual,
}


def run(argv=None) -> int:
    """Parse argv, run the subcommand, map errors to exit codes."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        cfg = resolve_config(args.command, args)
        _set_threads(cfg)
        out_dir = Path(cfg["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        echo_config(args.command, cfg, out_dir)
        _HANDLERS[args.command](cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
