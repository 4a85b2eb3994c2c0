"""Command implementations shared by the CLI and the HTTP service.

Each command is driven by a ``RunManifest`` so any run can be replayed from its
manifest file.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .config import RunConfig, RunManifest, file_digest
from .mcts import generate
from .metrics import (METRIC_FIELDS, LatencyStats, MetricsRow, aggregate_by_planner,
                      compute_metrics, emit_csv, format_latency_table, latency_stats, read_csv)
from .planners import make_planner
from .policies import IdmParams
from .scenario import FAMILIES, Scenario, build_scene, generate_scenario_suite, load_scenario, save_scenario
from .scorer import ScoreModel, save_dataset
from .sim import run_closed_loop, expert_oracle
from .training import DatasetConfig, fit_records, scenario_samples

log = logging.getLogger(__name__)

INDEX_NAME = "index.json"
OUTPUT_ROOT_ENV = "TREEPLAN_OUTPUT_ROOT"


class MissingArtifact(FileNotFoundError):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# -- suites ---------------------------------------------------------------------------

def gen_scenarios(manifest: RunManifest) -> list[Path]:
    opts = manifest.options
    families = tuple(opts.get("families") or FAMILIES)
    suite = generate_scenario_suite(manifest.seed, int(opts.get("count", 0)), families,
                                    float(opts.get("duration", 30.0)), float(opts.get("warmup", 4.0)))
    out = Path(manifest.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    files = []
    for sc in suite:
        path = out / f"{sc.id}.json"
        save_scenario(sc, path)
        files.append(path)
    index = {"format": "treeplan-suite", "seed": manifest.seed, "families": list(families),
             "count": len(files), "scenarios": [p.name for p in files]}
    (out / INDEX_NAME).write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    return files


def suite_files(suite: str | Path) -> list[Path]:
    root = Path(suite)
    if root.is_file():
        return [root]
    if not root.is_dir():
        raise MissingArtifact(f"scenario suite not found: {root}")
    index = root / INDEX_NAME
    if index.exists():
        names = json.loads(index.read_text(encoding="utf-8"))["scenarios"]
        files = [root / n for n in names]
    else:
        files = sorted(p for p in root.glob("*.json") if p.name not in (INDEX_NAME, "manifest.json"))
    missing = [str(p) for p in files if not p.exists()]
    if missing:
        raise MissingArtifact(f"suite index lists missing files: {', '.join(missing[:3])}")
    return files


def load_suite(suite: str | Path) -> list[Scenario]:
    return [load_scenario(p) for p in suite_files(suite)]


def _map(fn, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=1))


# -- simulate -----------------------------------------------------------------------

@dataclass(frozen=True)
class _SimTask:
    path: str
    planner: str
    config: RunConfig
    model_path: str | None
    seed: int
    expert: bool


def _scenario_idm(cfg: RunConfig, scenario: Scenario) -> IdmParams:
    base = cfg.idm_params()
    return replace(base, **scenario.idm) if scenario.idm else base


def _simulate_one(task: _SimTask) -> tuple[str, str, dict, list[float]]:
    scenario = load_scenario(task.path)
    cfg = task.config
    model = ScoreModel.load(task.model_path) if task.model_path else None
    planner = make_planner(task.planner, mdp_cfg=cfg.mdp_config(), search_cfg=cfg.search_config(),
                           idm=_scenario_idm(cfg, scenario), rollout=cfg.search.rollout,
                           padding=cfg.search.padding, model=model, seed=task.seed)
    rollout = run_closed_loop(scenario, planner, cfg.sim.duration, cfg.sim.replan_hz, cfg.mdp_config())
    expert = expert_oracle(scenario) if task.expert else None
    row = compute_metrics(rollout, expert)
    return scenario.id, rollout.to_jsonl(), row.as_dict(), [lat * 1e3 for lat in rollout.latencies]


def simulate(manifest: RunManifest, jobs: int = 1) -> list[MetricsRow]:
    if manifest.planner == "tree-irl" and not manifest.model:
        raise MissingArtifact("planner tree-irl needs --model")
    if manifest.model and not Path(manifest.model).exists():
        raise MissingArtifact(f"score model not found: {manifest.model}")
    if manifest.model and manifest.model_sha256 and file_digest(manifest.model) != manifest.model_sha256:
        log.warning("score model %s differs from the one recorded in the manifest", manifest.model)
    files = suite_files(manifest.suite)
    out = Path(manifest.output)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    tasks = [_SimTask(str(p), manifest.planner, manifest.config, manifest.model, manifest.seed,
                      bool(manifest.options.get("expert", True))) for p in files]
    results = _map(_simulate_one, tasks, jobs)
    rows, lat_rows = [], []
    for sid, text, row, lats in results:
        (out / "logs" / f"{sid}.jsonl").write_text(text, encoding="utf-8")
        rows.append(MetricsRow(**row))
        lat_rows.extend({"scenario_id": sid, "cycle": i, "latency_ms": lat} for i, lat in enumerate(lats))
    emit_csv([r.as_dict() for r in rows], out / "metrics.csv", METRIC_FIELDS)
    if rows:
        summary = aggregate_by_planner(rows)
        emit_csv(summary, out / "summary.csv")
    # Wall-clock latency varies run to run, so it lives apart from the deterministic outputs.
    emit_csv(lat_rows, out / "latency.csv", ["scenario_id", "cycle", "latency_ms"])
    failed = [r.scenario_id for r in rows if r.failed]
    if failed:
        log.warning("planner failed on %d scenario(s): %s", len(failed), ", ".join(failed[:5]))
    return rows


# -- train-scorer ---------------------------------------------------------------------

@dataclass(frozen=True)
class _TrainTask:
    path: str
    index: int
    config: RunConfig
    seed: int


def _samples_one(task: _TrainTask) -> tuple[list[dict], int]:
    scenario = load_scenario(task.path)
    cfg = task.config
    mdp = cfg.mdp_config(delta=cfg.train.delta)
    return scenario_samples(scenario, task.index, mdp, cfg.search_config(), cfg.policies(),
                            DatasetConfig(sample_every=cfg.train.sample_every, seed=task.seed))


def train_scorer(manifest: RunManifest, jobs: int = 1) -> dict:
    files = suite_files(manifest.suite)
    out = Path(manifest.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    cfg = manifest.config
    tasks = [_TrainTask(str(p), i, cfg, manifest.seed) for i, p in enumerate(files)]
    records, dropped = [], 0
    for recs, d in _map(_samples_one, tasks, jobs):
        records.extend(recs)
        dropped += d
    if cfg.train.max_samples is not None:
        records = records[:cfg.train.max_samples]
    save_dataset(out / "dataset.jsonl", records)
    report = fit_records(records, cfg.train_hyper(manifest.seed))
    report.result.model.save(out / "model.txt")
    curve = report.result
    n = max(len(curve.train_loss), len(curve.val_loss))
    emit_csv([{"epoch": i,
               "train_loss": curve.train_loss[i] if i < len(curve.train_loss) else None,
               "val_loss": curve.val_loss[i] if i < len(curve.val_loss) else None}
              for i in range(n)], out / "curves.csv", ["epoch", "train_loss", "val_loss"])
    summary = report.summary() | {"dropped": dropped}
    (out / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return summary


# -- benchmark ----------------------------------------------------------------------

BENCH_CONFIGS = {
    "n400-k100-idm": {"iterations": 400, "top_k": 100, "rollout": "idm", "padding": "idm"},
    "n400-k1-idm": {"iterations": 400, "top_k": 1, "rollout": "idm", "padding": "idm"},
    "n400-k100-cs": {"iterations": 400, "top_k": 100, "rollout": "cs", "padding": "cs"},
    "n0-k1-idm": {"iterations": 0, "top_k": 1, "rollout": "idm", "padding": "idm"},
}
DEFAULT_BENCH = ("n400-k100-idm", "n0-k1-idm")


def pin_single_thread() -> None:
    for var in ("NUMBA_NUM_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    if hasattr(os, "sched_setaffinity"):
        try:
            cpus = sorted(os.sched_getaffinity(0))
            os.sched_setaffinity(0, {cpus[0]})
        except OSError:
            pass


def time_generation(scenarios: Sequence[Scenario], cfg: RunConfig, seed: int = 0) -> list[float]:
    """Wall time (ms) of one trajectory-generation call per scenario at its initial state."""
    mdp = cfg.mdp_config()
    policies = cfg.policies()
    scenes = [build_scene(sc, 0.0, (sc.ego.x, sc.ego.v, sc.ego.a), mdp) for sc in scenarios]
    if scenes:
        generate(scenes[0], mdp, cfg.search_config(seed), policies)  # compile/load kernels untimed
    samples = []
    for i, scene in enumerate(scenes):
        scfg = cfg.search_config(seed + i)
        start = time.perf_counter()
        generate(scene, mdp, scfg, policies)
        samples.append((time.perf_counter() - start) * 1e3)
    return samples


def benchmark(manifest: RunManifest) -> dict[str, LatencyStats]:
    pin_single_thread()
    opts = manifest.options
    if manifest.suite:
        scenarios = load_suite(manifest.suite)
    else:
        scenarios = generate_scenario_suite(manifest.seed, int(opts.get("count", 100)))
    out = Path(manifest.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    names = list(opts.get("configs") or DEFAULT_BENCH)
    stats: dict[str, LatencyStats] = {}
    rows = []
    for name in names:
        if name not in BENCH_CONFIGS:
            raise ValueError(f"unknown benchmark config {name!r}; choose from {', '.join(BENCH_CONFIGS)}")
        cfg = manifest.config.with_overrides(search=BENCH_CONFIGS[name])
        samples = time_generation(scenarios, cfg, manifest.seed)
        rows.extend({"config": name, "scenario_id": sc.id, "latency_ms": s}
                    for sc, s in zip(scenarios, samples))
        if samples:
            stats[name] = latency_stats(samples)
    emit_csv(rows, out / "latency.csv", ["config", "scenario_id", "latency_ms"])
    if stats:
        (out / "latency_table.txt").write_text(format_latency_table(stats), encoding="utf-8")
    return stats


# -- report -------------------------------------------------------------------------

def _num(v: str):
    if v in ("", None):
        return None
    if v in ("true", "false"):
        return v == "true"
    try:
        return int(v)
    except ValueError:
        return float(v)


def load_metrics(run_dir: str | Path) -> list[MetricsRow]:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise MissingArtifact(f"no metrics.csv in {run_dir}")
    rows = []
    for rec in read_csv(path):
        vals = {k: (rec[k] if k in ("scenario_id", "planner") else _num(rec[k])) for k in METRIC_FIELDS}
        rows.append(MetricsRow(**vals))
    return rows


def run_latency(run_dir: str | Path) -> LatencyStats | None:
    path = Path(run_dir) / "latency.csv"
    if not path.exists():
        return None
    samples = [float(r["latency_ms"]) for r in read_csv(path)]
    return latency_stats(samples) if samples else None


REPORT_COLUMNS = ("planner", "n_scenarios", "front_collisions", "rear_collisions",
                  "speed_violation", "light_violations", "min_time_gap", "progress_ratio",
                  "comfortable", "max_abs_jerk", "min_accel", "max_accel", "l2_error",
                  "decel_delay", "accel_delay", "max_speed_error", "failed")


def report(run_dirs: Sequence[str | Path], out: str | Path | None = None) -> tuple[list[dict], str]:
    rows: list[MetricsRow] = []
    latencies: dict[str, LatencyStats] = {}
    for d in run_dirs:
        rs = load_metrics(d)
        rows.extend(rs)
        lat = run_latency(d)
        if lat is not None and rs:
            latencies[rs[0].planner] = lat
    if not rows:
        raise ValueError("no metric rows found in the given runs")
    table = aggregate_by_planner(rows)
    lines = ["  ".join(f"{c:>16s}" for c in REPORT_COLUMNS)]
    for rec in table:
        cells = []
        for c in REPORT_COLUMNS:
            v = rec.get(c)
            cells.append(f"{v:>16.4f}" if isinstance(v, float) else f"{str(v):>16s}")
        lines.append("  ".join(cells))
    text = "\n".join(lines) + "\n"
    if latencies:
        text += "\nPlanner latency per replan cycle\n" + format_latency_table(latencies)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        emit_csv(table, Path(out) / "report.csv", list(table[0]))
        (Path(out) / "report.txt").write_text(text, encoding="utf-8")
    return table, text


def describe_stats(stats: dict[str, LatencyStats]) -> dict:
    return {k: {f: getattr(v, f) for f in ("max", "p9999", "p99", "p50", "mean", "sd", "n")}
            for k, v in stats.items()}

