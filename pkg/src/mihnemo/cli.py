"""Command-line front end: scenario runs, scheme comparison and sweep tables.

Exit codes: 0 success, 2 usage error, 3 scenario parse error (including a
missing file), 4 scenario validation error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .hpd import Scheme
from .radio import RadioModel, SmoothingConfig, path_loss_rss, shadowed_rss, smooth
from .scenario import (
    ScenarioConfig,
    ScenarioParseError,
    ScenarioValidationError,
    apply_overrides,
    load_scenario,
)
from .simcore import SCHEMES, RunMetrics, run
from .timing import (
    CellEdgeUnreachable,
    LatencyProfile,
    alpha_coefficient,
    alpha_to_db,
    anticipation_times,
    beta_error_impact,
    confidence_level,
    l3_latency,
    time_for_alpha,
)

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_VALIDATION = 0, 2, 3, 4
WORKERS_ENV = "MIHNEMO_WORKERS"

SUMMARY_HEADER = ("point,seed,scheme,emitted,delivered,lost,max_gap_s,handoff_latency_s,"
                  "switches,teardowns,t_lgd_s,t_lsi_s,t_ld_s")
AGGREGATE_HEADER = "point,scheme,runs,lost_mean,lost_ci95,latency_mean_s,latency_ci95_s,seamless_runs"
LATENCY_HEADER = "rtt_ar_ha_ms,t_dad_ms,rtt_mr_ar_ms,t_l2_ms,t_l3_ms,t_ho_ms"
LOSS_HEADER = "t_ho_ms,rate_pps,lost_packets"
ALPHA_HEADER = "beta,v_mps,t_s,alpha,alpha_db,status"
RSS_HEADER = "time_s,distance_m,mean_dbm,raw_dbm,smoothed_d1,smoothed_d0.1,smoothed_d0.01"
CONFIDENCE_HEADER = "trigger,v_mps,alpha,start_rss_dbm,time_interval_s,confidence"
BETA_HEADER = "beta_true,delta_beta,v_mps,error_s,status"


class UsageError(Exception):
    pass


def _fmt(x: float | None, digits: int = 6) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.{digits}f}"


def _frange(start: float, stop: float, step: float) -> list[float]:
    n = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(n + 1)]


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


def _pmap(fn, items: list) -> list:
    """Order-preserving map, parallel across processes when workers > 1."""
    n = _workers()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- argument parsing


def parse_grid(items: list[str] | None) -> dict[str, list[str]]:
    grid: dict[str, list[str]] = {}
    for item in items or []:
        key, sep, values = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise UsageError(f"--grid expects key=a,b,c, got {item!r}")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"--grid {key} has no values")
        grid[key] = vals
    return grid


def parse_seeds(tokens: list[str] | None) -> list[int] | None:
    if not tokens:
        return None
    seeds: list[int] = []
    try:
        for tok in tokens:
            for part in tok.split(","):
                if "-" in part.strip("-"):
                    lo, hi = part.split("-", 1)
                    seeds.extend(range(int(lo), int(hi) + 1))
                elif part:
                    seeds.append(int(part))
    except ValueError as exc:
        raise UsageError(f"bad seed list {tokens!r}") from exc
    return seeds


def _float_axis(grid: dict[str, list[str]], key: str, default: list[float]) -> list[float]:
    if key not in grid:
        return default
    try:
        return [float(v) for v in grid[key]]
    except ValueError as exc:
        raise UsageError(f"--grid {key}: {exc}") from exc


def _check_keys(grid: dict[str, list[str]], allowed: set[str]) -> None:
    unknown = sorted(set(grid) - allowed)
    if unknown:
        raise UsageError(f"unknown grid key(s) {', '.join(unknown)}; expected {sorted(allowed)}")


# ---------------------------------------------------------------- simulation commands


def _points(cfg: ScenarioConfig, grid: dict[str, list[str]]) -> list[tuple[str, ScenarioConfig]]:
    if not grid:
        return [("default", cfg)]
    keys = sorted(grid)
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        label = "_".join(f"{k}-{v}" for k, v in zip(keys, combo))
        out.append((label, apply_overrides(cfg, dict(zip(keys, combo)))))
    return out


def _simulate(job: tuple[ScenarioConfig, bool]) -> dict:
    cfg, full = job
    m = run(cfg)
    result = {"summary": m.summary(), "throughput": m.throughput_csv(), "triggers": m.triggers_jsonl(),
              "decisions": m.decisions_jsonl()}
    if full:
        result.update(packets=m.packet_csv(), rss=m.rss_csv(), bindings=m.bindings_jsonl())
    return result


def _summary_row(point: str, s: dict) -> str:
    return ",".join([
        point, str(s["seed"]), s["scheme"], str(s["emitted"]), str(s["delivered"]), str(s["lost"]),
        _fmt(s["max_gap_s"], 9), _fmt(s["handoff_latency_s"], 9), str(s["switches"]), str(s["teardowns"]),
        _fmt(s["t_lgd"], 3), _fmt(s["t_lsi"], 3), _fmt(s["t_ld"], 3),
    ])


def _ci95(values: list[float]) -> float:
    """Half-width of a normal-approximation 95% interval on the mean."""
    if len(values) < 2:
        return 0.0
    return 1.96 * statistics.stdev(values) / math.sqrt(len(values))


def _simulation_jobs(args, schemes) -> tuple[list, list]:
    cfg = load_scenario(args.scenario)
    grid = parse_grid(args.grid)
    seeds = parse_seeds(args.seed) or [cfg.seed]
    meta, jobs = [], []
    for label, point in _points(cfg, grid):
        for seed in seeds:
            for scheme in schemes or [point.scheme]:
                meta.append((label, seed, scheme))
                jobs.append(point.with_(seed=seed, scheme=scheme))
    return meta, jobs


def cmd_run(args) -> int:
    schemes = [Scheme(args.scheme)] if args.scheme else None
    meta, jobs = _simulation_jobs(args, schemes)
    results = _pmap(_simulate, [(j, True) for j in jobs])
    out = Path(args.out)
    rows = [SUMMARY_HEADER]
    for (label, seed, _), res in zip(meta, results):
        scheme = res["summary"]["scheme"]
        d = out / label / f"seed-{seed}" / scheme
        _write(d / "packets.csv", res["packets"])
        _write(d / "throughput.csv", res["throughput"])
        _write(d / "rss.csv", res["rss"])
        _write(d / "triggers.jsonl", res["triggers"])
        _write(d / "decisions.jsonl", res["decisions"])
        _write(d / "bindings.jsonl", res["bindings"])
        rows.append(_summary_row(label, res["summary"]))
    _write(out / "summary.csv", "\n".join(rows) + "\n")
    print("\n".join(rows))
    return EXIT_OK


def cmd_compare(args) -> int:
    schemes = [Scheme(args.scheme)] if args.scheme else list(SCHEMES)
    meta, jobs = _simulation_jobs(args, schemes)
    results = _pmap(_simulate, [(j, False) for j in jobs])
    out = Path(args.out)
    rows = [SUMMARY_HEADER]
    by_point: dict[tuple[str, str], list[dict]] = {}
    for (label, seed, scheme), res in zip(meta, results):
        d = out / label / f"seed-{seed}"
        _write(d / f"throughput-{scheme.value}.csv", res["throughput"])
        _write(d / f"triggers-{scheme.value}.jsonl", res["triggers"])
        _write(d / f"decisions-{scheme.value}.jsonl", res["decisions"])
        rows.append(_summary_row(label, res["summary"]))
        by_point.setdefault((label, scheme.value), []).append(res["summary"])
    _write(out / "summary.csv", "\n".join(rows) + "\n")
    agg = [AGGREGATE_HEADER]
    for (label, scheme), sums in by_point.items():
        lost = [float(s["lost"]) for s in sums]
        lat = [s["handoff_latency_s"] for s in sums]
        seamless = sum(s["lost"] == 0 and s["handoff_latency_s"] == 0.0 for s in sums)
        agg.append(",".join([label, scheme, str(len(sums)), _fmt(statistics.fmean(lost), 3), _fmt(_ci95(lost), 3),
                             _fmt(statistics.fmean(lat), 6), _fmt(_ci95(lat), 6), str(seamless)]))
    _write(out / "aggregate.csv", "\n".join(agg) + "\n")
    print("\n".join(agg))
    return EXIT_OK


# ---------------------------------------------------------------- sweep tables


def latency_budget_rows(grid: dict[str, list[str]]) -> list[str]:
    _check_keys(grid, {"rtt_ar_ha", "t_dad", "rtt_mr_ar", "t_l2"})
    rtt_ar_ha = _float_axis(grid, "rtt_ar_ha", _frange(0.04, 0.20, 0.02))
    t_dad = _float_axis(grid, "t_dad", [0.25, 0.5])
    rtt_mr_ar = _float_axis(grid, "rtt_mr_ar", [0.01, 0.15])
    t_l2 = _float_axis(grid, "t_l2", [0.05, 0.4])
    rows = [LATENCY_HEADER]
    for a, dad, m, l2 in itertools.product(rtt_ar_ha, t_dad, rtt_mr_ar, t_l2):
        t_l3 = l3_latency(LatencyProfile(t_dad=dad, rtt_mr_ar=m, rtt_ar_ha=a))
        rows.append(",".join(_fmt(x * 1e3, 3) for x in (a, dad, m, l2, t_l3, l2 + t_l3)))
    return rows


def packet_loss_rows(grid: dict[str, list[str]]) -> list[str]:
    _check_keys(grid, {"t_ho", "rate"})
    t_ho = _float_axis(grid, "t_ho", _frange(0.0, 1.0, 0.05))
    rate = _float_axis(grid, "rate", [31.25, 62.5, 125.0, 250.0])
    rows = [LOSS_HEADER]
    for t, r in itertools.product(t_ho, rate):
        if t < 0 or r < 0:
            raise UsageError("t_ho and rate must be >= 0")
        rows.append(f"{t * 1e3:.3f},{r:.3f},{math.floor(r * t + 1e-9)}")
    return rows


def alpha_sweep_rows(cfg: ScenarioConfig, grid: dict[str, list[str]]) -> list[str]:
    _check_keys(grid, {"beta", "v", "t"})
    betas = _float_axis(grid, "beta", [2.0, 2.5, 3.0, 3.25, 3.5])
    speeds = _float_axis(grid, "v", [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0])
    times = _float_axis(grid, "t", _frange(0.05, 1.25, 0.05))
    cell = cfg.cell(cfg.initial_cell)
    rows = [ALPHA_HEADER]
    for beta in betas:
        model = RadioModel.from_coverage(cell.coverage, beta=beta, d0=cfg.radio.d0, p_th=cfg.radio.p_th)
        for v, t in itertools.product(speeds, times):
            try:
                a = alpha_coefficient(model, v, t)
                rows.append(f"{beta:.3f},{v:.3f},{t:.3f},{a:.9f},{alpha_to_db(a):.6f},ok")
            except CellEdgeUnreachable:
                rows.append(f"{beta:.3f},{v:.3f},{t:.3f},nan,nan,unreachable")
    return rows


def rss_smoothing_rows(cfg: ScenarioConfig, grid: dict[str, list[str]], seed: int) -> list[str]:
    _check_keys(grid, {"sigma", "beta", "v"})
    sigma = _float_axis(grid, "sigma", [4.0])[0]
    beta = _float_axis(grid, "beta", [3.0])[0]
    v = _float_axis(grid, "v", [25.0])[0]
    cell = cfg.cell(cfg.initial_cell)
    model = RadioModel.from_coverage(cell.coverage, beta=beta, d0=cfg.radio.d0, p_th=cfg.radio.p_th,
                                     sigma=sigma, noise_seed=seed)
    x0, y0 = cfg.mobility.position(0.0)
    d_start = max(math.hypot(x0 - cell.center[0], y0 - cell.center[1]), model.d0)
    deltas = (1.0, 0.1, 0.01)
    state: list[float | None] = [None, None, None]
    rows = [RSS_HEADER]
    n = int(math.floor(cfg.duration / cfg.poll + 1e-9))
    for k in range(n + 1):
        t = k * cfg.poll
        d = d_start + v * t
        raw = shadowed_rss(model, d, k)
        for i, dl in enumerate(deltas):
            state[i] = raw if state[i] is None else smooth(SmoothingConfig(dl), state[i], raw)
        rows.append(f"{t:.3f},{d:.3f},{path_loss_rss(model, d):.6f},{raw:.6f},"
                    + ",".join(f"{s:.6f}" for s in state))
    return rows


def confidence_rows(cfg: ScenarioConfig, grid: dict[str, list[str]], seed: int) -> list[str]:
    _check_keys(grid, {"alpha_lgd", "alpha_lsi", "v", "trials"})
    lgd_alphas = _float_axis(grid, "alpha_lgd", [1.5, 2.0, 2.5, 3.0, 3.5, 4.0])
    lsi_alphas = _float_axis(grid, "alpha_lsi", [1.05, 1.1, 1.2, 1.3, 1.4, 1.5])
    v = _float_axis(grid, "v", [25.0])[0]
    trials = int(_float_axis(grid, "trials", [1000.0])[0])
    cell = cfg.cell(cfg.initial_cell)
    model = RadioModel.from_coverage(cell.coverage, beta=cfg.radio.beta, d0=cfg.radio.d0, p_th=cfg.radio.p_th,
                                     sigma=cfg.radio.sigma if cell.sigma is None else cell.sigma, noise_seed=seed)
    smoothing = SmoothingConfig(cfg.delta)
    budget = anticipation_times(cfg.profile_for(cfg.cells[-1].link_type), cfg.margins)
    rows = [CONFIDENCE_HEADER]
    for trigger, alphas, t_budget in (("LGD", lgd_alphas, budget.t_lgd), ("LSI", lsi_alphas, budget.t_lsi)):
        # fixed start RSS: the adaptive trigger level at v; the factor sets the interval
        start = model.p_th + alpha_to_db(alpha_coefficient(model, v, t_budget))
        for a in alphas:
            interval = time_for_alpha(model, v, a)
            conf = confidence_level(model, v, start, interval, trials, poll=cfg.poll, smoothing=smoothing, seed=seed)
            rows.append(f"{trigger},{v:.3f},{a:.4f},{start:.6f},{interval:.6f},{conf:.6f}")
    return rows


def beta_error_rows(cfg: ScenarioConfig, grid: dict[str, list[str]]) -> list[str]:
    _check_keys(grid, {"beta", "delta_beta", "v"})
    betas = _float_axis(grid, "beta", [2.0, 3.0, 4.0])
    deltas = _float_axis(grid, "delta_beta", _frange(-1.0, 1.0, 0.25))
    speeds = _float_axis(grid, "v", [10.0, 25.0])
    cell = cfg.cell(cfg.initial_cell)
    profile = cfg.profile_for(cfg.cells[-1].link_type)
    rows = [BETA_HEADER]
    for beta, db, v in itertools.product(betas, deltas, speeds):
        model = RadioModel.from_coverage(cell.coverage, beta=beta, d0=cfg.radio.d0, p_th=cfg.radio.p_th)
        try:
            err = beta_error_impact(model, beta + db, v, profile, cfg.margins)
        except CellEdgeUnreachable:
            rows.append(f"{beta:.3f},{db:.3f},{v:.3f},nan,unreachable")
            continue
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        # exact zero at delta_beta=0 up to float noise
        err = 0.0 if abs(err) < 1e-12 else err
        rows.append(f"{beta:.3f},{db:.3f},{v:.3f},{err:.9f},ok")
    return rows


def _table_command(name: str, builder):
    def cmd(args) -> int:
        grid = parse_grid(args.grid)
        rows = builder(args, grid)
        _write(Path(args.out) / f"{name}.csv", "\n".join(rows) + "\n")
        print("\n".join(rows))
        return EXIT_OK
    return cmd


def _seed(args, cfg: ScenarioConfig) -> int:
    seeds = parse_seeds(args.seed)
    return seeds[0] if seeds else cfg.seed


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "latency-budget": _table_command("latency-budget", lambda a, g: latency_budget_rows(g)),
    "packet-loss": _table_command("packet-loss", lambda a, g: packet_loss_rows(g)),
    "alpha-sweep": _table_command("alpha-sweep", lambda a, g: alpha_sweep_rows(load_scenario(a.scenario), g)),
    "rss-smoothing": _table_command(
        "rss-smoothing", lambda a, g: rss_smoothing_rows(cfg := load_scenario(a.scenario), g, _seed(a, cfg))),
    "confidence": _table_command(
        "confidence", lambda a, g: confidence_rows(cfg := load_scenario(a.scenario), g, _seed(a, cfg))),
    "beta-error": _table_command("beta-error", lambda a, g: beta_error_rows(load_scenario(a.scenario), g)),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mihnemo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", default=None, help="scenario file or bundled name (default baseline)")
        p.add_argument("--seed", nargs="+", default=None, help="seeds, e.g. 1 2 3 or 1-20")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--grid", action="append", default=None, metavar="KEY=A,B,C",
                       help="parameter grid axis or override (repeatable)")
        if name in ("run", "compare"):
            p.add_argument("--scheme", choices=[s.value for s in Scheme], default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioParseError as exc:
        print(f"scenario parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ScenarioValidationError as exc:
        print(f"scenario validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
