"""Orthogonal-array scenario design and realization of uncertain inputs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .domain import MmgConfig, expand_bounds

# L8(2^7). The first five columns reproduce the PSO, MG1..MG4 design of the
# case study row for row; columns 6 and 7 complete the standard array.
L8 = np.array(
    [
        [+1, +1, +1, +1, +1, +1, +1],
        [+1, +1, +1, -1, -1, -1, -1],
        [+1, -1, -1, +1, +1, -1, -1],
        [+1, -1, -1, -1, -1, +1, +1],
        [-1, +1, -1, +1, -1, +1, -1],
        [-1, +1, -1, -1, +1, -1, +1],
        [-1, -1, +1, +1, -1, -1, +1],
        [-1, -1, +1, -1, +1, +1, -1],
    ],
    dtype=int,
)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Scenario:
    """One realization of all uncertain inputs; arrays are read-only.

    ``wind[m]`` and ``pv[m]`` have shape ``(units, T)``.
    """

    h: int
    demand: np.ndarray  # (M, T)
    wind: tuple[np.ndarray, ...]
    pv: tuple[np.ndarray, ...]
    gamma_buy: np.ndarray  # (T,)
    gamma_sell: np.ndarray  # (T,)

    def net_load(self, m: int) -> np.ndarray:
        """Demand of MG ``m`` minus all its renewable output, per hour."""
        return self.demand[m] - self.wind[m].sum(axis=0) - self.pv[m].sum(axis=0)


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: tuple[Scenario, ...]
    levels: np.ndarray  # (H, 1 + M), PSO column first

    @property
    def H(self) -> int:
        return len(self.scenarios) - 1

    @property
    def T(self) -> int:
        return self.scenarios[0].gamma_buy.shape[0]

    def gamma_buy(self) -> np.ndarray:
        """Grid buy price per ``(t, h)``."""
        return np.stack([s.gamma_buy for s in self.scenarios], axis=1)

    def gamma_sell(self) -> np.ndarray:
        return np.stack([s.gamma_sell for s in self.scenarios], axis=1)

    def mg_level(self, m: int, h: int) -> int:
        """Level of MG ``m`` in scenario ``h`` (0 for the base case)."""
        return 0 if h == 0 else int(self.levels[h - 1, 1 + m])

    def base_only(self) -> "ScenarioSet":
        return ScenarioSet(self.scenarios[:1], self.levels[:0])


def build_orthogonal_array(num_factors: int) -> np.ndarray:
    """First ``num_factors`` columns of the L8(2^7) two-level array (8 rows)."""
    if not 1 <= num_factors <= L8.shape[1]:
        raise ValueError(
            f"L8(2^7) supports 1..7 factors, got {num_factors}; "
            "systems with more than 6 microgrids need a larger orthogonal array"
        )
    out = L8[:, :num_factors].copy()
    out.setflags(write=False)
    return out


def _pick(level: int, plus: np.ndarray, minus: np.ndarray, mean: np.ndarray) -> np.ndarray:
    if level == 0:
        return mean
    return plus if level > 0 else minus


def realize_scenarios(config: MmgConfig, levels: np.ndarray | None = None) -> ScenarioSet:
    """Turn the level matrix into H+1 concrete scenarios (h=0 is the mean case).

    A microgrid at level +1 sees its demand at the upper bound and every
    renewable unit at its low-generation bound for all hours; level -1 is the
    reverse. The PSO column moves both grid prices to their upper (+1) or
    lower (-1) bounds.
    """
    M = config.M
    if levels is None:
        levels = build_orthogonal_array(1 + M)
    levels = np.asarray(levels, dtype=int)
    if levels.ndim != 2 or levels.shape[1] != 1 + M:
        raise ValueError(f"level matrix must have {1 + M} columns (PSO + {M} MGs), got shape {levels.shape}")
    if not np.all(np.isin(levels, (-1, 1))):
        raise ValueError("level entries must be +1 or -1")

    mk = config.market
    gb = (*expand_bounds(mk.gamma_buy, "price"), np.asarray(mk.gamma_buy.mean, float))
    gs = (*expand_bounds(mk.gamma_sell, "price"), np.asarray(mk.gamma_sell.mean, float))
    dem = [(*expand_bounds(mg.demand, "demand"), np.asarray(mg.demand.mean, float)) for mg in config.mgs]
    wind = [[(*expand_bounds(s, "res"), np.asarray(s.mean, float)) for s in mg.wind] for mg in config.mgs]
    pv = [[(*expand_bounds(s, "res"), np.asarray(s.mean, float)) for s in mg.pv] for mg in config.mgs]
    T = config.horizon.T

    rows = [np.zeros(1 + M, dtype=int)] + list(levels)
    scenarios = []
    for h, row in enumerate(rows):
        pso = row[0]
        scenarios.append(Scenario(
            h=h,
            demand=_frozen([_pick(row[1 + m], *dem[m]) for m in range(M)]),
            wind=tuple(_frozen(np.reshape([_pick(row[1 + m], *u) for u in wind[m]], (-1, T))) for m in range(M)),
            pv=tuple(_frozen(np.reshape([_pick(row[1 + m], *u) for u in pv[m]], (-1, T))) for m in range(M)),
            gamma_buy=_frozen(_pick(pso, *gb)),
            gamma_sell=_frozen(_pick(pso, *gs)),
        ))
    lv = levels.copy()
    lv.setflags(write=False)
    return ScenarioSet(tuple(scenarios), lv)


def deterministic_scenarios(config: MmgConfig) -> ScenarioSet:
    """Scenario set holding only the mean-forecast base case."""
    return realize_scenarios(config).base_only()


def scenarios_to_csv(config: MmgConfig, scen: ScenarioSet) -> str:
    """One row per (scenario, hour, quantity)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["h", "t", "quantity", "value"])
    for s in scen.scenarios:
        for t in range(scen.T):
            w.writerow([s.h, t + 1, "gamma_buy", f"{s.gamma_buy[t]:.6g}"])
            w.writerow([s.h, t + 1, "gamma_sell", f"{s.gamma_sell[t]:.6g}"])
            for m, mg in enumerate(config.mgs):
                w.writerow([s.h, t + 1, f"{mg.id}.demand", f"{s.demand[m, t]:.6g}"])
                for i in range(s.wind[m].shape[0]):
                    w.writerow([s.h, t + 1, f"{mg.id}.wind[{i}]", f"{s.wind[m][i, t]:.6g}"])
                for i in range(s.pv[m].shape[0]):
                    w.writerow([s.h, t + 1, f"{mg.id}.pv[{i}]", f"{s.pv[m][i, t]:.6g}"])
    return buf.getvalue()
