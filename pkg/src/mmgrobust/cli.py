"""Command-line entry point: run a clearing mode, sweep a parameter, inspect inputs."""

from __future__ import annotations

import csv
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import click
import numpy as np

from .centralized import CentralInfeasible, CentralOutcome, solve_centralized
from .domain import ConfigError, MmgConfig, load_config_file
from .market import MarketOutcome, clear_market, run_isolated
from .scenarios import deterministic_scenarios, realize_scenarios, scenarios_to_csv
from .subproblem import MgDispatch, SubproblemInfeasible, dispatch_rows, solve_mg

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_NONCONVERGED = 0, 2, 3, 4
ZERO_CUTOFF = 1e-12
MODES = ("cooperative", "isolated", "deterministic", "centralized")

log = logging.getLogger("mmgrobust")


def bundled_config_path() -> Path:
    return Path(str(resources.files("mmgrobust") / "data" / "case_study.yaml"))


def fmt(v: Any) -> str:
    """Six significant digits; solver round-off below ``ZERO_CUTOFF`` prints as 0."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if abs(v) < ZERO_CUTOFF:
            return "0"
        s = f"{float(v):.6g}"
        return "0" if s == "-0" else s
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) for x in r])


@dataclass
class RunSpec:
    """Everything that determines one run."""

    config: Path
    mode: str = "cooperative"
    overrides: dict[str, Any] = field(default_factory=dict)
    out: Path = Path("out")
    unclamped: bool = False
    include_fees: bool | None = None
    grid_cap: float | None = None
    seed: int = 0  # no solver step is randomized; recorded for provenance of the run

    def load(self) -> MmgConfig:
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {', '.join(MODES)}")
        cfg = load_config_file(self.config)
        ov = {k: v for k, v in self.overrides.items() if v is not None}
        if ov:
            cfg = cfg.replace_market(**ov)
        return cfg


@dataclass
class RunResult:
    mode: str
    config: MmgConfig
    dispatches: list[MgDispatch]
    market: MarketOutcome | None = None
    central: CentralOutcome | None = None

    @property
    def p0(self) -> float:
        return self.config.market.p0

    @property
    def converged(self) -> bool:
        return self.market is None or self.market.converged

    def pso_split(self) -> tuple[float, float, float]:
        if self.market is not None:
            return self.market.pso_income_split()
        if self.central is not None:
            inc = self.central.pso_income
            H = inc.shape[1] - 1
            base = float(inc[:, 0].sum())
            ex = float((inc[:, 1:].mean(axis=1) - inc[:, 0]).sum()) if H else 0.0
            return base, ex, base + (1 - self.p0) * ex
        return 0.0, 0.0, 0.0

    def summary_rows(self):
        for d in self.dispatches:
            yield d.mg_id, d.cost_energy, d.cost_reserve, d.cost_expected
        yield ("PSO", *self.pso_split())

    @property
    def total_mg_cost(self) -> float:
        return float(sum(d.cost_expected for d in self.dispatches))


def execute(spec: RunSpec) -> RunResult:
    cfg = spec.load()
    if spec.mode == "deterministic":
        scen = deterministic_scenarios(cfg)
    else:
        scen = realize_scenarios(cfg)
    if spec.mode in ("cooperative", "deterministic"):
        out = clear_market(cfg, scen, projected=not spec.unclamped)
        return RunResult(spec.mode, cfg, out.dispatches, market=out)
    if spec.mode == "isolated":
        return RunResult(spec.mode, cfg, run_isolated(cfg, scen))
    cen = solve_centralized(cfg, scen, include_fees=spec.include_fees, grid_cap=spec.grid_cap)
    return RunResult(spec.mode, cfg, cen.dispatches, central=cen)


def write_outputs(res: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    T, S = res.dispatches[0].vars.buy.shape
    if res.market is not None:
        write_csv(out / "trace.csv", ["k", "mismatch", "objective"],
                  ((r.k, r.mismatch, r.system_objective) for r in res.market.iterations))
        lam = res.market.final_prices.lambda_eq
        tau = res.market.tau
    elif res.central is not None:
        write_csv(out / "trace.csv", ["k", "mismatch", "objective"], [(1, 0.0, res.central.objective)])
        lam, tau = res.central.prices, res.central.tau
    else:
        write_csv(out / "trace.csv", ["k", "mismatch", "objective"], [])
        lam, tau = None, 0.0

    rows = []
    for t in range(T):
        for h in range(S):
            if lam is None:
                d = res.dispatches[0]
                rows.append((t + 1, h, "", d.beta_buy[t, h], d.beta_sell[t, h]))
            else:
                rows.append((t + 1, h, lam[t, h], lam[t, h] + tau, lam[t, h] - tau))
    write_csv(out / "prices.csv", ["t", "h", "lambda_eq", "beta_buy", "beta_sell"], rows)

    if res.market is not None:
        gbuy, gsell = res.market.grid_buy, res.market.grid_sell
    elif res.central is not None:
        gbuy, gsell = res.central.grid_buy, res.central.grid_sell
    else:
        gbuy = sum(d.vars.buy for d in res.dispatches)
        gsell = sum(d.vars.sell for d in res.dispatches)
    rows = []
    for t in range(T):
        for h in range(S):
            for d in res.dispatches:
                rows.append((t + 1, h, d.mg_id, d.vars.buy[t, h], d.vars.sell[t, h]))
            rows.append((t + 1, h, "GRID", gbuy[t, h], gsell[t, h]))
    write_csv(out / "trades.csv", ["t", "h", "entity", "buy", "sell"], rows)

    write_csv(out / "dispatch.csv", ["mg", "t", "h", "device", "value"],
              ((d.mg_id, *r) for d in res.dispatches for r in dispatch_rows(d)))

    p0 = res.p0
    cost_rows = [(d.mg_id, "cost", d.cost_energy, d.cost_reserve, d.cost_expected) for d in res.dispatches]
    cost_rows.append(("PSO", "income", *res.pso_split()))
    write_csv(out / "costs.csv", ["entity", "kind", "C_E", "C_R", "C_exp"], cost_rows)
    write_csv(out / "summary.csv", ["entity", "C_E", "C_R", "C_exp"], res.summary_rows())
    if res.central is not None:
        c = res.central
        write_csv(out / "duals.csv", ["t", "h", "dual", "price"],
                  ((t + 1, h, c.duals[t, h], c.prices[t, h]) for t in range(T) for h in range(S)))
    log.info("wrote results to %s (p0=%g)", out, p0)


def _run_and_report(spec: RunSpec) -> int:
    try:
        res = execute(spec)
    except ConfigError as exc:
        click.echo(f"error: invalid configuration: {exc}", err=True)
        return EXIT_VALIDATION
    except (SubproblemInfeasible, CentralInfeasible) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INFEASIBLE
    write_outputs(res, spec.out)
    if res.market is not None:
        click.echo(f"{spec.mode}: {res.market.message}; objective {res.market.objective:.6g}")
    elif res.central is not None:
        click.echo(f"centralized: objective {res.central.objective:.6g}")
    else:
        click.echo(f"isolated: total expected MG cost {res.total_mg_cost:.6g}")
    if not res.converged:
        click.echo("error: market did not converge; outputs hold the last iterate", err=True)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _parse_lambda0(value: str | None):
    if value is None:
        return None
    if value in ("mean", "buy", "sell"):
        return value
    try:
        return float(value)
    except ValueError:
        raise click.BadParameter("use mean, buy, sell or a number") from None


def _parse_values(text: str) -> list[float]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise click.BadParameter("at least one value is required")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise click.BadParameter(f"not a comma-separated list of numbers: {text!r}") from None


def market_options(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
                     help="YAML system description (defaults to the bundled case study)."),
        click.option("--alpha", type=float, default=None, help="Sub-gradient step size ($/MWh per MW)."),
        click.option("--eps", type=float, default=None, help="Convergence threshold on the imbalance (MW)."),
        click.option("--tau", type=float, default=None, help="Service fee charged on every MG trade ($/MWh)."),
        click.option("--p0", type=float, default=None, help="Weight of the base case in the expected cost."),
        click.option("--lambda0", type=str, default=None, help="Initial price: mean, buy, sell or a number."),
        click.option("--max-iter", type=int, default=None, help="Iteration cap of the clearing loop."),
        click.option("--seed", type=int, default=0, show_default=True,
                     help="Recorded with the run; every solver step is deterministic."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _spec(config_path, mode, out, alpha, eps, tau, p0, lambda0, max_iter, seed, **extra) -> RunSpec:
    ov = dict(alpha=alpha, eps=eps, tau=tau, p0=p0, lambda0=_parse_lambda0(lambda0), max_iter=max_iter)
    return RunSpec(config=config_path or bundled_config_path(), mode=mode, overrides=ov, out=Path(out),
                   seed=seed, **extra)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose: int) -> None:
    """Robust day-ahead scheduling and internal market clearing for networked microgrids."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("run")
@market_options
@click.option("--mode", type=click.Choice(MODES), default="cooperative", show_default=True,
              help="cooperative: iterative clearing; isolated: grid prices only; deterministic: "
                   "mean forecast only; centralized: pooled reference solve.")
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True,
              help="Directory receiving the CSV files.")
@click.option("--unclamped", is_flag=True, help="Carry the unprojected price between iterations.")
@click.option("--include-fees/--no-fees", default=None,
              help="Centralized mode: charge the service fee on MG trades (default: when tau > 0).")
@click.option("--grid-cap", type=float, default=None, help="Centralized mode: grid exchange limit (MW).")
def run_cmd(config_path, alpha, eps, tau, p0, lambda0, max_iter, seed, mode, out, unclamped, include_fees,
            grid_cap):
    """Run one scheduling mode and write trace, prices, trades, dispatch, costs and summary CSVs."""
    spec = _spec(config_path, mode, out, alpha, eps, tau, p0, lambda0, max_iter, seed, unclamped=unclamped,
                 include_fees=include_fees, grid_cap=grid_cap)
    sys.exit(_run_and_report(spec))


main.add_command(run_cmd, "clear")


@main.command("central")
@market_options
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True,
              help="Directory receiving the CSV files.")
@click.option("--include-fees/--no-fees", default=None, help="Charge the service fee on MG trades.")
@click.option("--grid-cap", type=float, default=None, help="Grid exchange limit per hour and scenario (MW).")
def central_cmd(config_path, alpha, eps, tau, p0, lambda0, max_iter, seed, out, include_fees, grid_cap):
    """Solve the pooled problem of all microgrids; also writes duals.csv."""
    spec = _spec(config_path, "centralized", out, alpha, eps, tau, p0, lambda0, max_iter, seed,
                 include_fees=include_fees, grid_cap=grid_cap)
    sys.exit(_run_and_report(spec))


@main.command("sweep")
@market_options
@click.option("--param", type=click.Choice(["alpha", "p0"]), required=True, help="Parameter to vary.")
@click.option("--values", "values_text", required=True, help="Comma-separated values, e.g. 0.5,1,2,4.")
@click.option("--out", type=click.Path(file_okay=False), default="sweep", show_default=True,
              help="Directory receiving sweep.csv and one subdirectory per point.")
def sweep_cmd(config_path, alpha, eps, tau, p0, lambda0, max_iter, seed, param, values_text, out):
    """Repeat a run over several step sizes or base-case weights.

    The alpha sweep records iterations to convergence; the p0 sweep compares
    cooperative and isolated total cost per microgrid.
    """
    values = _parse_values(values_text)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = _spec(config_path, "cooperative", out, alpha, eps, tau, p0, lambda0, max_iter, seed)
    rows, header = [], None
    status = EXIT_OK
    for v in values:
        point = out / f"{param}={fmt(v)}"
        ov = dict(base.overrides, **{param: v})
        try:
            if param == "alpha":
                res = execute(RunSpec(base.config, "cooperative", ov, point, seed=seed))
                write_outputs(res, point)
                header = ["alpha", "iterations", "converged", "objective"]
                rows.append((v, res.market.num_iterations, int(res.market.converged), res.market.objective))
                if not res.market.converged:
                    status = EXIT_NONCONVERGED
            else:
                coop = execute(RunSpec(base.config, "cooperative", ov, point / "cooperative", seed=seed))
                iso = execute(RunSpec(base.config, "isolated", ov, point / "isolated", seed=seed))
                write_outputs(coop, point / "cooperative")
                write_outputs(iso, point / "isolated")
                header = ["p0"]
                row = [v]
                for dc, di in zip(coop.dispatches, iso.dispatches):
                    header += [f"{dc.mg_id}_cooperative", f"{dc.mg_id}_isolated", f"{dc.mg_id}_reduction_pct"]
                    row += [dc.cost_expected, di.cost_expected, _reduction(dc.cost_expected, di.cost_expected)]
                header += ["total_cooperative", "total_isolated", "total_reduction_pct"]
                row += [coop.total_mg_cost, iso.total_mg_cost, _reduction(coop.total_mg_cost, iso.total_mg_cost)]
                rows.append(row)
                if not coop.converged:
                    status = EXIT_NONCONVERGED
        except ConfigError as exc:
            click.echo(f"error: {param}={fmt(v)}: invalid configuration: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except (SubproblemInfeasible, CentralInfeasible) as exc:
            click.echo(f"error: {param}={fmt(v)}: {exc}", err=True)
            sys.exit(EXIT_INFEASIBLE)
    write_csv(out / "sweep.csv", header, rows)
    click.echo(f"wrote {out / 'sweep.csv'} ({len(rows)} points)")
    sys.exit(status)


def _reduction(coop: float, iso: float) -> float:
    return 100.0 * (iso - coop) / abs(iso) if iso else 0.0


@main.group("scenarios")
def scenarios_grp():
    """Inspect the uncertainty scenarios."""


@scenarios_grp.command("dump")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="YAML system description (defaults to the bundled case study).")
@click.option("--out", type=click.Path(dir_okay=False), default="-", show_default=True,
              help="Output CSV file, or - for stdout.")
def scenarios_dump(config_path, out):
    """Write every scenario's demand, renewable output and grid prices as CSV."""
    try:
        cfg = load_config_file(config_path or bundled_config_path())
    except ConfigError as exc:
        click.echo(f"error: invalid configuration: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    text = scenarios_to_csv(cfg, realize_scenarios(cfg))
    if out == "-":
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)


@main.group("mg")
def mg_grp():
    """Single-microgrid tools."""


@mg_grp.command("solve")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="YAML system description (defaults to the bundled case study).")
@click.option("--mg", "mg_id", required=True, help="Microgrid id (or 1-based position).")
@click.option("--beta-buy", type=float, default=None, help="Flat purchase price (default: grid buy price).")
@click.option("--beta-sell", type=float, default=None, help="Flat sale price (default: grid sell price).")
@click.option("--p0", type=float, default=None, help="Weight of the base case in the expected cost.")
@click.option("--deterministic", is_flag=True, help="Use the mean forecast only.")
@click.option("--out", type=click.Path(dir_okay=False), default="-", show_default=True,
              help="Output CSV file, or - for stdout.")
def mg_solve(config_path, mg_id, beta_buy, beta_sell, p0, deterministic, out):
    """Solve one microgrid at fixed trading prices and print its dispatch (t, h, device, value)."""
    try:
        cfg = load_config_file(config_path or bundled_config_path())
        if p0 is not None:
            cfg = cfg.replace_market(p0=p0)
    except ConfigError as exc:
        click.echo(f"error: invalid configuration: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    ids = [mg.id for mg in cfg.mgs]
    if mg_id in ids:
        m = ids.index(mg_id)
    elif mg_id.isdigit() and 1 <= int(mg_id) <= len(ids):
        m = int(mg_id) - 1
    else:
        click.echo(f"error: unknown microgrid {mg_id!r}; choose from {', '.join(ids)}", err=True)
        sys.exit(EXIT_VALIDATION)
    scen = deterministic_scenarios(cfg) if deterministic else realize_scenarios(cfg)
    bb = scen.gamma_buy() if beta_buy is None else np.full((scen.T, scen.H + 1), beta_buy)
    bs = scen.gamma_sell() if beta_sell is None else np.full((scen.T, scen.H + 1), beta_sell)
    try:
        d = solve_mg(cfg.mgs[m], scen, m, bb, bs, cfg.market.p0, cfg.horizon.dt)
    except SubproblemInfeasible as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    lines = ["t,h,device,value"] + [",".join(fmt(x) for x in r) for r in dispatch_rows(d)]
    text = "\n".join(lines) + "\n"
    if out == "-":
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)


if __name__ == "__main__":  # pragma: no cover
    main()
