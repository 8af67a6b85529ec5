"""Command line front end: single runs, sweep suites, traversability probes.

Suite outputs are reproducible down to the byte for a fixed config and seed
list, independent of --workers, because every run is seeded on its own and
rows are sorted before writing.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .sim import (
    FOV_PRESETS,
    SCENARIOS,
    ConfigError,
    build_world,
    default_config,
    normalize_config,
    report_json,
    run_scenario,
    traversability,
)

SUMMARY_COLUMNS = (
    "scenario,fov,delta,seed,agent,tau,l,t,vbar,vmax,dmin,domin,sr_acc,sr_conv,sr_safe"
)

# keys consumed by the driver, not by the simulator
SUITE_KEYS = ("scenarios", "fovs", "deltas", "seeds")


def _fmt_cell(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return "%.9g" % x
    return str(x)


def _fov_label(fov) -> str:
    for name, tup in FOV_PRESETS.items():
        if tuple(fov) == tup:
            return name
    return "x".join("%.9g" % v for v in fov)


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def split_suite_keys(raw: dict) -> tuple[dict, dict]:
    sweep = {k: raw.pop(k) for k in SUITE_KEYS if k in raw}
    return sweep, raw


def _echo_config(out: Path, cfg: dict, sweep: dict | None = None) -> None:
    doc = dict(cfg)
    if sweep:
        doc.update(sweep)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_run_dir(run_dir: Path, report) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.json").write_text(report_json(report))
    header = "t,x,y,z,vx,vy,vz,ax,ay,az,yaw"
    for k, agent in enumerate(report.agents):
        rows = [header]
        for row in agent.trajectory:
            rows.append(",".join("%.9g" % v for v in row))
        (run_dir / f"traj_{k}.csv").write_text("\n".join(rows) + "\n")


def summary_rows(report, fov_label: str) -> list[str]:
    rows = []
    for k, a in enumerate(report.agents):
        cells = [
            report.scenario,
            fov_label,
            _fmt_cell(float(report.delta)),
            str(report.seed),
            str(k),
            _fmt_cell(report.tau),
            _fmt_cell(a.l),
            _fmt_cell(a.t),
            _fmt_cell(a.vbar),
            _fmt_cell(a.vmax),
            _fmt_cell(a.dmin),
            _fmt_cell(a.domin),
            _fmt_cell(a.sr_acc),
            _fmt_cell(a.sr_conv),
            _fmt_cell(a.sr_safe),
        ]
        rows.append(",".join(cells))
    return rows


def _one_run(job) -> tuple[tuple, list[str]]:
    cfg, seed, run_dir = job
    report = run_scenario(cfg, seed)
    label = _fov_label(cfg["fov"])
    if run_dir is not None:
        write_run_dir(Path(run_dir), report)
    key = (cfg["scenario"], label, float(cfg["delta"]), seed)
    return key, summary_rows(report, label)


def cmd_run(args) -> int:
    raw = load_config(args.config)
    raw.pop("seeds", None)
    if args.occlusion:
        raw["occlusion"] = True
    cfg = normalize_config(raw)
    out = Path(args.out)
    _echo_config(out, cfg)
    t0 = time.perf_counter()
    report = run_scenario(cfg, args.seed)
    wall = time.perf_counter() - t0
    write_run_dir(out, report)
    (out / "summary.csv").write_text(
        "\n".join([SUMMARY_COLUMNS, *summary_rows(report, _fov_label(cfg["fov"]))]) + "\n"
    )
    (out / "timing.txt").write_text("wall_seconds %.3f\n" % wall)
    n_conv = sum(a.sr_conv for a in report.agents)
    n_safe = sum(a.sr_safe for a in report.agents)
    print(
        f"{cfg['scenario']} seed {args.seed}: {n_conv}/{len(report.agents)} converged, "
        f"{n_safe}/{len(report.agents)} safe, tau {_fmt_cell(report.tau)}, "
        f"t_end {report.t_end:.1f} s -> {out}"
    )
    return 0


def cmd_suite(args) -> int:
    raw = load_config(args.config)
    if args.occlusion:
        raw["occlusion"] = True
    sweep, base = split_suite_keys(raw)
    scenarios = sweep.get("scenarios", [base.get("scenario", "circle")])
    fovs = sweep.get("fovs", ["lim", "half", "full", "2d"])
    deltas = sweep.get("deltas", [0.2, 0.5, 1.0])
    seeds = sweep.get("seeds", list(range(5)))
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    out = Path(args.out)

    jobs = []
    for scen in scenarios:
        for fov in fovs:
            for delta in deltas:
                cfg = dict(base)
                cfg.update(scenario=scen, fov=fov, delta=delta)
                cfg = normalize_config(cfg)
                label = _fov_label(cfg["fov"])
                for seed in seeds:
                    run_dir = out / "runs" / f"{scen}_{label}_d{_fmt_cell(float(delta))}_s{seed}"
                    jobs.append((cfg, int(seed), str(run_dir)))

    _echo_config(
        out,
        normalize_config(dict(base)),
        {"scenarios": list(scenarios), "fovs": list(fovs), "deltas": list(deltas), "seeds": list(seeds)},
    )
    t0 = time.perf_counter()
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_one_run, jobs))
    else:
        results = [_one_run(j) for j in jobs]
    wall = time.perf_counter() - t0

    results.sort(key=lambda kr: kr[0])
    lines = [SUMMARY_COLUMNS]
    for _, rows in results:
        lines.extend(rows)
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    (out / "timing.txt").write_text(
        "wall_seconds %.3f\nruns %d\nworkers %d\n" % (wall, len(jobs), args.workers)
    )
    print(f"{len(jobs)} runs, {len(lines) - 1} agent rows -> {out / 'summary.csv'}")
    return 0


def cmd_traversability(args) -> int:
    raw = load_config(args.config)
    raw.pop("seeds", None)
    cfg = normalize_config(raw)
    world = build_world(cfg, args.seed)
    tau = traversability(world, args.trials, rng=np.random.default_rng(args.seed + 1))
    print("tau %.9g" % tau)
    return 0


def cmd_list_scenarios(_args) -> int:
    for name in SCENARIOS:
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="irbl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario and write report + trajectories")
    p.add_argument("config", help="JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out/run")
    p.add_argument("--occlusion", action="store_true", help="hide sensed points behind obstacles")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="sweep scenario x fov x delta x seed, write summary.csv")
    p.add_argument("config", help="JSON config file (may carry scenarios/fovs/deltas/seeds lists)")
    p.add_argument("--out", default="out/suite")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--occlusion", action="store_true")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("traversability", help="estimate the mean free path of the environment")
    p.add_argument("config", help="JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=10_000)
    p.set_defaults(func=cmd_traversability)

    p = sub.add_parser("list-scenarios", help="print the built-in scenario generators")
    p.set_defaults(func=cmd_list_scenarios)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
