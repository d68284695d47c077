"""Scenario orchestration: per-seed runs, CSV/JSON persistence, normalisation and sweeps."""
from __future__ import annotations

import csv
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import theory_report
from .config import RunConfig, parse_config
from .engine import MetricsRecord, run
from .errors import ConfigError, DivergenceError, InputError
from .problems import build_problem

log = logging.getLogger(__name__)


class BaselineError(LookupError):
    """The normalisation baseline is missing or never reached its target."""


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MetricsRecord.header())
        for r in records:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in r.to_row()])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [MetricsRecord.from_row(row) for row in csv.DictReader(fh)]


def time_to_target(records, target, loss0):
    """Simulated time at which the loss first reaches ``target``.

    Interpolates linearly between the bracketing rounds; the run start
    ``(0, loss0)`` serves as round zero.
    """
    prev_t, prev_loss = 0.0, loss0
    if loss0 <= target:
        return 0.0
    for r in records:
        if r.loss <= target:
            if prev_loss == r.loss:
                return r.sim_time
            frac = (prev_loss - target) / (prev_loss - r.loss)
            return prev_t + frac * (r.sim_time - prev_t)
        prev_t, prev_loss = r.sim_time, r.loss
    return None


def first_reaching(records, target):
    for r in records:
        if r.loss <= target:
            return r
    return None


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _run_seed(config_data, seed, track):
    config = parse_config(config_data)
    problem = build_problem(config.problem_spec())
    try:
        result = run(problem, config.hyper_params(), config.strategy_config(),
                     config.latency_model(), config.n_workers, seed, config.stop_rule(),
                     track=track)
        return seed, result, None
    except DivergenceError as exc:
        return seed, None, exc


def run_scenario(config: RunConfig, out_dir=None, jobs: int = 1) -> dict:
    """Run every seed, write ``metrics_<scenario>_<seed>.csv`` and ``summary_<scenario>.json``."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(config.problem_spec())
    loss0 = problem.loss(problem.initial_model())
    target = config.stop.target_loss
    data = config.model_dump()
    track = config.theory

    if jobs > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_seed, itertools.repeat(data), config.seeds,
                                     itertools.repeat(track)))
    else:
        outcomes = [_run_seed(data, s, track) for s in config.seeds]

    per_seed, survivors = [], []
    for seed, result, error in outcomes:
        records = result.records if result is not None else error.records
        write_metrics_csv(out / f"metrics_{config.scenario}_{seed}.csv", records)
        row = {"seed": seed, "diverged": error is not None, "rounds": len(records)}
        if error is not None:
            log.warning("scenario %s seed %s diverged: %s", config.scenario, seed, error)
        else:
            survivors.append(result)
            last = records[-1]
            row.update(final_loss=last.loss, sim_time=last.sim_time, uploads=last.uploads,
                       downloads=last.downloads, discarded=last.discarded,
                       warnings=result.warnings)
            hit = first_reaching(records, target) if target is not None else None
            row.update(
                time_to_target=time_to_target(records, target, loss0) if target is not None else None,
                comm_to_target=(hit.uploads + hit.downloads) if hit else None,
                uploads_to_target=hit.uploads if hit else None,
                downloads_to_target=hit.downloads if hit else None,
            )
        per_seed.append(row)

    alive = [r for r in per_seed if not r["diverged"]]
    strategy = config.strategy_config()
    summary = {
        "scenario": config.scenario,
        "strategy": {"kind": strategy.kind, "k0": strategy.k0, "a": strategy.a},
        "n_workers": config.n_workers,
        "loss0": loss0,
        "target_loss": target,
        "seeds": list(config.seeds),
        "diverged_count": len(per_seed) - len(alive),
        "reached_count": sum(r.get("time_to_target") is not None for r in alive),
        "time_to_target": _mean(r.get("time_to_target") for r in alive),
        "comm_to_target": _mean(r.get("comm_to_target") for r in alive),
        "uploads_to_target": _mean(r.get("uploads_to_target") for r in alive),
        "downloads_to_target": _mean(r.get("downloads_to_target") for r in alive),
        "final_loss": _mean(r.get("final_loss") for r in alive),
        "per_seed": per_seed,
    }
    if track and survivors:
        h = config.hyper
        summary["theory"] = theory_report(problem, survivors, h.batch_size, strategy.k0,
                                          h.local_steps, h.lr, config.n_workers)
    with open(out / f"summary_{config.scenario}.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=_json_default)
    return summary


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def load_summaries(directory) -> dict:
    out = {}
    for path in sorted(Path(directory).glob("summary_*.json")):
        with open(path) as fh:
            s = json.load(fh)
        out[s["scenario"]] = s
    return out


def normalize_times(summaries: dict, baseline: str) -> dict:
    """Divide every time-to-target by the baseline's seed-averaged time-to-target."""
    if baseline not in summaries:
        raise BaselineError(f"baseline scenario {baseline!r} not found")
    base = summaries[baseline].get("time_to_target")
    if base is None or not base > 0:
        raise BaselineError(f"baseline scenario {baseline!r} never reached its target")
    out = {}
    for name, s in summaries.items():
        t = s.get("time_to_target")
        out[name] = {**s, "time_to_target": None if t is None else t / base,
                     "normalized_by": baseline}
    return out


def parse_grid(spec: str) -> dict:
    """Parse ``"k0=2,3;a=-2,-1"`` into ``{"k0": [2, 3], "a": [-2.0, -1.0]}``."""
    grid = {}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep or key not in ("k0", "a"):
            raise ConfigError(f"bad grid entry {part!r}; expected k0=... or a=...", "grid")
        cast = int if key == "k0" else float
        try:
            grid[key] = [cast(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad value in {part!r}", f"grid.{key}") from exc
        if not grid[key]:
            raise ConfigError("empty value list", f"grid.{key}")
    if not grid:
        raise ConfigError("empty grid", "grid")
    return grid


SWEEP_COLUMNS = ["scenario", "k0", "a", "time_to_target", "comm_to_target", "final_loss",
                 "diverged_count", "reached_count", "rank_time", "rank_comm"]


def _rank(rows, key):
    order = sorted(range(len(rows)), key=lambda i: (rows[i][key] is None, rows[i][key] or 0.0, i))
    for pos, i in enumerate(order, 1):
        rows[i][f"rank_{key.split('_')[0]}"] = pos


def sweep(config: RunConfig, grid: dict, out_dir=None, jobs: int = 1) -> list[dict]:
    """One scenario per (k0, a) cell, ranked by time- and communication-to-target."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    k0s = grid.get("k0") or [config.strategy.k0]
    offsets = grid.get("a") or [config.strategy.a]
    if not k0s or not offsets:
        raise InputError("empty sweep grid")
    base = config.model_dump()
    rows = []
    for k0, a in itertools.product(k0s, offsets):
        name = f"{config.scenario}_k{k0}_a{a:g}" if a is not None else f"{config.scenario}_k{k0}"
        data = {**base, "scenario": name,
                "strategy": {**base["strategy"], "k0": k0, "a": a}}
        row = {"scenario": name, "k0": k0, "a": a}
        try:
            summary = run_scenario(parse_config(data), out, jobs=jobs)
            row.update({k: summary[k] for k in ("time_to_target", "comm_to_target", "final_loss",
                                                "diverged_count", "reached_count")})
        except (ConfigError, InputError) as exc:
            log.warning("sweep cell %s failed: %s", name, exc)
            row.update(time_to_target=None, comm_to_target=None, final_loss=None,
                       diverged_count=len(config.seeds), reached_count=0)
        rows.append(row)
    _rank(rows, "time_to_target")
    _rank(rows, "comm_to_target")
    rows.sort(key=lambda r: (r["rank_time"], r["rank_comm"]))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep_table.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in SWEEP_COLUMNS})
    return rows


def all_diverged(summary: dict) -> bool:
    return summary["diverged_count"] == len(summary["seeds"])
