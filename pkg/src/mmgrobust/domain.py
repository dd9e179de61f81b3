"""Configuration types for the multi-microgrid system and their validation.

Units: power in MW, energy in MWh, prices in $/MWh, SOC as a fraction of
capacity. Every series is stored as a tuple of floats so configs are
hashable, comparable and safe to share between workers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Literal, Sequence

import numpy as np
import yaml

log = logging.getLogger(__name__)

SeriesKind = Literal["demand", "res", "price"]


class ConfigError(ValueError):
    """Raised when a config document is malformed or violates an invariant.

    ``path`` names the offending entry, e.g. ``mgs[2].esses[0].eta_c``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _floats(values: Sequence[float]) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class HorizonSpec:
    T: int
    dt: float = 1.0


@dataclass(frozen=True)
class DgParams:
    a_g: float
    b_g: float
    p_min: float
    p_max: float
    r_up: float
    r_dn: float
    R_up: float
    R_dn: float


@dataclass(frozen=True)
class EssParams:
    a_e: float
    B_e: float
    eta_c: float
    eta_d: float
    pc_max: float
    pd_max: float
    soc_min: float
    soc_max: float
    soc_ref: float


@dataclass(frozen=True)
class FlexLoadParams:
    """Dispatchable load; ``rd_max``/``cd_max`` are per-hour caps."""

    a_fd: float
    rd_max: tuple[float, ...]
    cd_max: tuple[float, ...]
    e_shed: float


@dataclass(frozen=True)
class UncertainSeries:
    """Hourly forecast mean with absolute upward/downward confidence deviations."""

    mean: tuple[float, ...]
    dev_plus: tuple[float, ...]
    dev_minus: tuple[float, ...]

    @classmethod
    def from_percent(cls, mean: Sequence[float], plus_pct: float, minus_pct: float) -> "UncertainSeries":
        m = _floats(mean)
        return cls(m, _floats(abs(v) * plus_pct / 100.0 for v in m), _floats(abs(v) * minus_pct / 100.0 for v in m))

    @classmethod
    def constant(cls, value: float, T: int, plus: float = 0.0, minus: float = 0.0) -> "UncertainSeries":
        return cls((float(value),) * T, (float(plus),) * T, (float(minus),) * T)

    def __len__(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class MgConfig:
    id: str
    dgs: tuple[DgParams, ...]
    esses: tuple[EssParams, ...]
    flex: FlexLoadParams | None
    demand: UncertainSeries
    wind: tuple[UncertainSeries, ...] = ()
    pv: tuple[UncertainSeries, ...] = ()
    p_pso_max: float = 0.0

    @property
    def res(self) -> tuple[UncertainSeries, ...]:
        return self.wind + self.pv


@dataclass(frozen=True)
class MarketParams:
    gamma_buy: UncertainSeries
    gamma_sell: UncertainSeries
    tau: float = 0.0
    alpha: float = 1.0
    eps: float = 0.005
    lambda0: str | float | tuple[float, ...] = "mean"
    p0: float = 0.5
    max_iter: int = 5000


@dataclass(frozen=True)
class MmgConfig:
    horizon: HorizonSpec
    mgs: tuple[MgConfig, ...]
    market: MarketParams

    @property
    def M(self) -> int:
        return len(self.mgs)

    def replace_market(self, **changes: Any) -> "MmgConfig":
        """Copy with some market parameters overridden, re-validated."""
        from dataclasses import replace

        cfg = replace(self, market=replace(self.market, **changes))
        validate(cfg)
        return cfg


def expand_bounds(series: UncertainSeries, kind: SeriesKind) -> tuple[np.ndarray, np.ndarray]:
    """Return the ``(+1 level, -1 level)`` hourly values of an uncertain series.

    For demand and prices the +1 level is the upper confidence bound. For
    renewables the +1 level is the generation dip (``mean - dev_minus``)
    because it raises the reserve requirement, and the -1 level is the
    generation surge (``mean + dev_plus``).
    """
    mean = np.asarray(series.mean, dtype=float)
    plus = np.asarray(series.dev_plus, dtype=float)
    minus = np.asarray(series.dev_minus, dtype=float)
    if kind == "res":
        return mean - minus, mean + plus
    if kind in ("demand", "price"):
        return mean + plus, mean - minus
    raise ValueError(f"unknown series kind {kind!r}")


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _check(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _validate_series(s: UncertainSeries, T: int, path: str) -> None:
    for name in ("mean", "dev_plus", "dev_minus"):
        values = getattr(s, name)
        _check(len(values) == T, f"{path}.{name}", f"expected {T} values, got {len(values)}")
        _check(all(np.isfinite(values)), f"{path}.{name}", "non-finite value")
    _check(min(s.dev_plus) >= 0 and min(s.dev_minus) >= 0, path, "deviations must be >= 0")


def validate(cfg: MmgConfig) -> MmgConfig:
    T, dt = cfg.horizon.T, cfg.horizon.dt
    _check(isinstance(T, int) and T >= 1, "horizon.T", "T must be an integer >= 1")
    _check(dt > 0, "horizon.dt", "dt must be > 0")
    _check(len(cfg.mgs) >= 1, "mgs", "at least one microgrid is required")

    mk = cfg.market
    _validate_series(mk.gamma_buy, T, "market.gamma_buy")
    _validate_series(mk.gamma_sell, T, "market.gamma_sell")
    buy_hi, buy_lo = expand_bounds(mk.gamma_buy, "price")
    sell_hi, sell_lo = expand_bounds(mk.gamma_sell, "price")
    buy_mean, sell_mean = np.asarray(mk.gamma_buy.mean), np.asarray(mk.gamma_sell.mean)
    # buy and sell prices share one uncertainty factor, so compare level by level
    for label, b, s in (("mean", buy_mean, sell_mean), ("+1", buy_hi, sell_hi), ("-1", buy_lo, sell_lo)):
        bad = np.nonzero(b <= s)[0]
        _check(bad.size == 0, "market.gamma_sell",
               f"gamma_sell must be below gamma_buy at every hour ({label} level violates at t={bad[:5].tolist()})")
    _check(mk.tau >= 0, "market.tau", "tau must be >= 0")
    _check(mk.alpha > 0, "market.alpha", "alpha must be > 0")
    _check(mk.eps > 0, "market.eps", "eps must be > 0")
    _check(0 < mk.p0 <= 1, "market.p0", "p0 must lie in (0, 1]")
    _check(int(mk.max_iter) >= 1, "market.max_iter", "max_iter must be >= 1")
    if isinstance(mk.lambda0, str):
        _check(mk.lambda0 in ("mean", "buy", "sell"), "market.lambda0", "expected mean|buy|sell or a number")
    elif isinstance(mk.lambda0, tuple):
        _check(len(mk.lambda0) == T, "market.lambda0", f"expected {T} values")

    ids = set()
    for m, mg in enumerate(cfg.mgs):
        p = f"mgs[{m}]"
        _check(mg.id not in ids, f"{p}.id", f"duplicate id {mg.id!r}")
        ids.add(mg.id)
        _check(mg.p_pso_max >= 0, f"{p}.p_pso_max", "must be >= 0")
        _validate_series(mg.demand, T, f"{p}.demand")
        for kind in ("wind", "pv"):
            for i, s in enumerate(getattr(mg, kind)):
                _validate_series(s, T, f"{p}.{kind}[{i}]")
        for g, dg in enumerate(mg.dgs):
            q = f"{p}.dgs[{g}]"
            _check(dg.a_g >= 0, f"{q}.a_g", "must be >= 0")
            _check(0 <= dg.p_min <= dg.p_max, q, "require 0 <= p_min <= p_max")
            for name in ("r_up", "r_dn", "R_up", "R_dn"):
                _check(getattr(dg, name) >= 0, f"{q}.{name}", "must be >= 0")
        for e, ess in enumerate(mg.esses):
            q = f"{p}.esses[{e}]"
            _check(ess.a_e >= 0, f"{q}.a_e", "must be >= 0")
            _check(ess.B_e > 0, f"{q}.B_e", "must be > 0")
            _check(0 < ess.eta_c <= 1 and 0 < ess.eta_d <= 1, q, "efficiencies must lie in (0, 1]")
            _check(ess.pc_max >= 0 and ess.pd_max >= 0, q, "power limits must be >= 0")
            _check(0 <= ess.soc_min <= ess.soc_ref <= ess.soc_max <= 1, q,
                   "require 0 <= soc_min <= soc_ref <= soc_max <= 1")
        if mg.flex is not None:
            q = f"{p}.flex"
            _check(mg.flex.a_fd >= 0, f"{q}.a_fd", "must be >= 0")
            _check(len(mg.flex.rd_max) == T and len(mg.flex.cd_max) == T, q, f"caps must have {T} values")
            _check(min(mg.flex.rd_max) >= 0 and min(mg.flex.cd_max) >= 0, q, "caps must be >= 0")
            _check(mg.flex.e_shed >= 0, f"{q}.e_shed", "must be >= 0")

        peak = max(np.add(mg.demand.mean, mg.demand.dev_plus))
        supply = sum(d.p_max for d in mg.dgs) + sum(e.pd_max for e in mg.esses) + mg.p_pso_max
        if supply + 1e-9 < peak:
            log.warning("%s: peak demand %.3f MW exceeds DG+ESS+trade capacity %.3f MW", mg.id, peak, supply)
    return cfg


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _series_from(node: Any, T: int, path: str) -> UncertainSeries:
    if not isinstance(node, dict) or "mean" not in node:
        raise ConfigError(path, "expected a mapping with a 'mean' entry")
    mean = node["mean"]
    if isinstance(mean, (int, float)):
        mean = [mean] * T
    mean = _floats(mean)

    def dev(abs_key: str, pct_key: str) -> tuple[float, ...]:
        if abs_key in node and pct_key in node:
            raise ConfigError(f"{path}.{abs_key}", f"give either {abs_key} or {pct_key}, not both")
        if pct_key in node:
            return _floats(abs(v) * float(node[pct_key]) / 100.0 for v in mean)
        val = node.get(abs_key, 0.0)
        if isinstance(val, (int, float)):
            return (float(val),) * len(mean)
        return _floats(val)

    return UncertainSeries(mean, dev("dev_plus", "dev_plus_pct"), dev("dev_minus", "dev_minus_pct"))


def _broadcast(val: Any, T: int) -> tuple[float, ...]:
    if isinstance(val, (int, float)):
        return (float(val),) * T
    return _floats(val)


def _get(node: dict, key: str, path: str, default: Any = ...) -> Any:
    if key in node:
        return node[key]
    if default is ...:
        raise ConfigError(f"{path}.{key}", "missing required entry")
    return default


def _make(cls, node: Any, path: str, **extra):
    if not isinstance(node, dict):
        raise ConfigError(path, "expected a mapping")
    names = [f for f in cls.__dataclass_fields__ if f not in extra]
    unknown = set(node) - set(names)
    if unknown:
        raise ConfigError(path, f"unknown entries {sorted(unknown)}")
    kwargs = {}
    for n in names:
        try:
            kwargs[n] = float(_get(node, n, path))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.{n}", f"expected a number ({exc})") from None
    return cls(**kwargs, **extra)


def config_from_dict(doc: Any) -> MmgConfig:
    if not isinstance(doc, dict):
        raise ConfigError("", "config document must be a mapping")
    hz = _get(doc, "horizon", "")
    T = _get(hz, "T", "horizon")
    if not isinstance(T, int) or isinstance(T, bool):
        raise ConfigError("horizon.T", "must be an integer")
    horizon = HorizonSpec(T=T, dt=float(hz.get("dt", 1.0)))

    mk = _get(doc, "market", "")
    lam0 = mk.get("lambda0", "mean")
    if isinstance(lam0, list):
        lam0 = _floats(lam0)
    elif isinstance(lam0, (int, float)):
        lam0 = float(lam0)
    market = MarketParams(
        gamma_buy=_series_from(_get(mk, "gamma_buy", "market"), T, "market.gamma_buy"),
        gamma_sell=_series_from(_get(mk, "gamma_sell", "market"), T, "market.gamma_sell"),
        tau=float(mk.get("tau", 0.0)),
        alpha=float(mk.get("alpha", 1.0)),
        eps=float(mk.get("eps", 0.005)),
        lambda0=lam0,
        p0=float(mk.get("p0", 0.5)),
        max_iter=int(mk.get("max_iter", 5000)),
    )

    mgs = []
    raw_mgs = _get(doc, "mgs", "")
    if not isinstance(raw_mgs, list):
        raise ConfigError("mgs", "expected a list")
    for m, node in enumerate(raw_mgs):
        p = f"mgs[{m}]"
        if not isinstance(node, dict):
            raise ConfigError(p, "expected a mapping")
        flex = None
        if node.get("flex") is not None:
            fx = node["flex"]
            flex = FlexLoadParams(
                a_fd=float(_get(fx, "a_fd", f"{p}.flex")),
                rd_max=_broadcast(_get(fx, "rd_max", f"{p}.flex"), T),
                cd_max=_broadcast(_get(fx, "cd_max", f"{p}.flex"), T),
                e_shed=float(_get(fx, "e_shed", f"{p}.flex")),
            )
        mgs.append(MgConfig(
            id=str(node.get("id", f"MG{m + 1}")),
            dgs=tuple(_make(DgParams, d, f"{p}.dgs[{i}]") for i, d in enumerate(node.get("dgs") or [])),
            esses=tuple(_make(EssParams, e, f"{p}.esses[{i}]") for i, e in enumerate(node.get("esses") or [])),
            flex=flex,
            demand=_series_from(_get(node, "demand", p), T, f"{p}.demand"),
            wind=tuple(_series_from(s, T, f"{p}.wind[{i}]") for i, s in enumerate(node.get("wind") or [])),
            pv=tuple(_series_from(s, T, f"{p}.pv[{i}]") for i, s in enumerate(node.get("pv") or [])),
            p_pso_max=float(node.get("p_pso_max", 0.0)),
        ))
    return validate(MmgConfig(horizon=horizon, mgs=tuple(mgs), market=market))


def load_config(text: str) -> MmgConfig:
    """Parse and validate a YAML config document."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"malformed config document: {exc}") from None
    return config_from_dict(doc)


def load_config_file(path) -> MmgConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror or exc}") from exc
    return load_config(text)


def _series_dict(s: UncertainSeries) -> dict:
    return {"mean": list(s.mean), "dev_plus": list(s.dev_plus), "dev_minus": list(s.dev_minus)}


def config_to_dict(cfg: MmgConfig) -> dict:
    mk = cfg.market
    lam0 = list(mk.lambda0) if isinstance(mk.lambda0, tuple) else mk.lambda0
    mgs = []
    for mg in cfg.mgs:
        node: dict[str, Any] = {
            "id": mg.id,
            "p_pso_max": mg.p_pso_max,
            "dgs": [dict(vars(d)) for d in mg.dgs],
            "esses": [dict(vars(e)) for e in mg.esses],
            "demand": _series_dict(mg.demand),
            "wind": [_series_dict(s) for s in mg.wind],
            "pv": [_series_dict(s) for s in mg.pv],
        }
        if mg.flex is not None:
            node["flex"] = {"a_fd": mg.flex.a_fd, "rd_max": list(mg.flex.rd_max),
                            "cd_max": list(mg.flex.cd_max), "e_shed": mg.flex.e_shed}
        mgs.append(node)
    return {
        "horizon": {"T": cfg.horizon.T, "dt": cfg.horizon.dt},
        "market": {
            "gamma_buy": _series_dict(mk.gamma_buy), "gamma_sell": _series_dict(mk.gamma_sell),
            "tau": mk.tau, "alpha": mk.alpha, "eps": mk.eps, "lambda0": lam0,
            "p0": mk.p0, "max_iter": mk.max_iter,
        },
        "mgs": mgs,
    }


def dump_config(cfg: MmgConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
