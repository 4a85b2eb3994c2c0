"""treeplan command line: gen-scenarios, simulate, train-scorer, benchmark, report, serve.

Exit codes: 0 success, 1 internal error, 2 usage, 3 missing artifact, 4 too little data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, RunManifest, file_digest, load_config, load_manifest
from .planners import PLANNERS
from .runner import (BENCH_CONFIGS, DEFAULT_BENCH, MissingArtifact, benchmark, describe_stats,
                     gen_scenarios, output_root, report, simulate, train_scorer)
from .metrics import format_latency_table
from .scenario import FAMILIES, ScenarioError
from .scorer import InsufficientData

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_DATA = 0, 1, 2, 3, 4

log = logging.getLogger("treeplan")


class UsageError(Exception):
    pass


def _search_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("search")
    g.add_argument("--iterations", type=int, help="MCTS iterations n (default 400)")
    g.add_argument("--top-k", type=int, help="trajectories k extracted from the tree (default 100)")
    g.add_argument("--c-puct", type=float, help="UCB exploration scale (default 1)")
    g.add_argument("--rollout", choices=("idm", "cs"), help="leaf rollout policy")
    g.add_argument("--padding", choices=("idm", "cs"), help="trajectory padding policy")
    g.add_argument("--delta", type=float, help="clearance buffer in metres (default 2)")


def _common(p: argparse.ArgumentParser, seed: bool = True, jobs: bool = True) -> None:
    p.add_argument("--out", help="output directory (default under $TREEPLAN_OUTPUT_ROOT or ./runs)")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--from-manifest", help="replay a previous run from its manifest (file or run dir)")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="parallel scenario workers")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="treeplan", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"treeplan {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenarios", help="write a seeded synthetic scenario suite")
    _common(p, jobs=False)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--family", action="append", choices=FAMILIES,
                   help="scenario family (repeatable; default: all)")
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--warmup", type=float, default=None)

    p = sub.add_parser("simulate", help="closed-loop evaluation of a planner over a suite")
    _common(p)
    p.add_argument("--planner", choices=PLANNERS)
    p.add_argument("--suite")
    p.add_argument("--model", help="score model file (required for tree-irl)")
    p.add_argument("--duration", type=float, help="seconds to simulate (default: scenario length)")
    p.add_argument("--replan-hz", type=float)
    p.add_argument("--no-expert", action="store_true", help="skip expert comparison metrics")
    _search_flags(p)

    p = sub.add_parser("train-scorer", help="build a labelled dataset from a suite and fit the scorer")
    _common(p)
    p.add_argument("--suite")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma-focal", type=float)
    p.add_argument("--sample-every", type=float, help="seconds between sampled expert states")
    p.add_argument("--max-samples", type=int)
    p.add_argument("--min-samples", type=int)
    _search_flags(p)

    p = sub.add_parser("benchmark", help="trajectory-generation latency on one CPU thread")
    _common(p, jobs=False)
    p.add_argument("--suite", help="scenario suite (default: generate --count scenarios)")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--bench", action="append", choices=sorted(BENCH_CONFIGS),
                   help=f"configuration to time (repeatable; default: {', '.join(DEFAULT_BENCH)})")

    p = sub.add_parser("report", help="aggregate metrics of one or more simulate runs")
    p.add_argument("runs", nargs="+", help="simulate output directories")
    p.add_argument("--out", help="directory for report.csv / report.txt")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    mdp = {"delta": getattr(args, "delta", None)}
    search = {"iterations": getattr(args, "iterations", None), "top_k": getattr(args, "top_k", None),
              "c_puct": getattr(args, "c_puct", None), "rollout": getattr(args, "rollout", None),
              "padding": getattr(args, "padding", None)}
    sim = {"duration": getattr(args, "duration", None) if args.command == "simulate" else None,
           "replan_hz": getattr(args, "replan_hz", None)}
    train = {"epochs": getattr(args, "epochs", None), "learning_rate": getattr(args, "lr", None),
             "gamma_focal": getattr(args, "gamma_focal", None),
             "sample_every": getattr(args, "sample_every", None),
             "max_samples": getattr(args, "max_samples", None),
             "min_samples": getattr(args, "min_samples", None)}
    return cfg.with_overrides(mdp=mdp, search=search, sim=sim, train=train)


def _default_out(command: str, seed: int, tag: str | None = None) -> str:
    name = f"{command}-{tag}-seed{seed}" if tag else f"{command}-seed{seed}"
    return str(output_root() / name)


def manifest_from_args(args) -> RunManifest:
    if args.from_manifest:
        m = load_manifest(args.from_manifest)
        if m.command != args.command:
            raise UsageError(f"manifest is for {m.command!r}, not {args.command!r}")
        if args.out:
            m = m.model_copy(update={"output": args.out})
        return m
    seed = 0 if args.seed is None else args.seed
    cfg = _config(args)
    cmd = args.command
    if cmd == "gen-scenarios":
        count = 100 if args.count is None else args.count
        if count < 0:
            raise UsageError("--count must be >= 0")
        opts = {"count": count, "families": args.family or list(FAMILIES),
                "duration": 30.0 if args.duration is None else args.duration,
                "warmup": 4.0 if args.warmup is None else args.warmup}
        return RunManifest(command=cmd, seed=seed, options=opts, config=cfg,
                           output=args.out or _default_out("scenarios", seed))
    if cmd == "simulate":
        if not args.planner or not args.suite:
            raise UsageError("simulate needs --planner and --suite")
        sha = None
        if args.model:
            if not Path(args.model).exists():
                raise MissingArtifact(f"score model not found: {args.model}")
            sha = file_digest(args.model)
        return RunManifest(command=cmd, planner=args.planner, suite=args.suite, seed=seed,
                           model=args.model, model_sha256=sha, config=cfg,
                           options={"expert": not args.no_expert},
                           output=args.out or _default_out("simulate", seed, args.planner))
    if cmd == "train-scorer":
        if not args.suite:
            raise UsageError("train-scorer needs --suite")
        return RunManifest(command=cmd, suite=args.suite, seed=seed, config=cfg,
                           output=args.out or _default_out("scorer", seed))
    if cmd == "benchmark":
        opts = {"count": 100 if args.count is None else args.count,
                "configs": args.bench or list(DEFAULT_BENCH)}
        return RunManifest(command=cmd, suite=args.suite, seed=seed, config=cfg, options=opts,
                           output=args.out or _default_out("benchmark", seed))
    raise UsageError(f"unknown command {cmd}")


def _run(args) -> int:
    if args.command == "report":
        _table, text = report(args.runs, args.out)
        sys.stdout.write(text)
        return EXIT_OK
    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return EXIT_OK

    manifest = manifest_from_args(args)
    jobs = max(1, getattr(args, "jobs", 1) or 1)
    if manifest.command == "gen-scenarios":
        files = gen_scenarios(manifest)
        print(f"wrote {len(files)} scenarios to {manifest.output}")
    elif manifest.command == "simulate":
        rows = simulate(manifest, jobs)
        front = sum(r.front_collisions for r in rows)
        failed = sum(r.failed for r in rows)
        comfy = sum(r.comfortable for r in rows)
        print(f"{manifest.planner}: {len(rows)} scenarios, {front} front collisions, "
              f"{comfy} comfortable, {failed} planner failures -> {manifest.output}")
    elif manifest.command == "train-scorer":
        summary = train_scorer(manifest, jobs)
        print(json.dumps(summary, indent=1, sort_keys=True))
    elif manifest.command == "benchmark":
        stats = benchmark(manifest)
        sys.stdout.write(format_latency_table(stats))
        (Path(manifest.output) / "latency_stats.json").write_text(
            json.dumps(describe_stats(stats), indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (UsageError, ConfigError) as e:
        print(f"treeplan: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, FileNotFoundError) as e:
        print(f"treeplan: missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except InsufficientData as e:
        print(f"treeplan: not enough data: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ScenarioError, ValueError) as e:
        print(f"treeplan: invalid input: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"treeplan: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
