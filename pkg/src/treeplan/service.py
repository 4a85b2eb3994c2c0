"""HTTP service over the planning core.

The CLI runs the same code in-process; this app is for driving the planner from
other processes.
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .config import ConfigError, RunConfig, validate_config
from .mdp import ScenarioInvalid
from .metrics import compute_metrics, latency_stats
from .planners import PLANNERS, make_planner
from .scenario import FAMILIES, Scenario, build_scene, generate_scenario_suite
from .scorer import ScoreModel
from .sim import expert_oracle, run_closed_loop

app = FastAPI(title="treeplan", version=__version__)


class EgoState(BaseModel):
    x: float
    v: float = Field(ge=0)
    a: float = 0.0


class PlanRequest(BaseModel):
    scenario: Scenario
    t: float = 0.0
    ego: Optional[EgoState] = None
    planner: Literal["idm", "cs", "mcts", "tree-irl"] = "mcts"
    model_path: Optional[str] = None
    seed: int = 0
    config: dict = Field(default_factory=dict)


class TrajectoryOut(BaseModel):
    t: list[float]
    x: list[float]
    v: list[float]
    a: list[float]
    jerk: list[float]
    pad_start: int


class PlanResponse(BaseModel):
    planner: str
    index: int
    score: Optional[float]
    n_candidates: int
    latency_ms: float
    trajectory: TrajectoryOut


class SimulateRequest(BaseModel):
    scenario: Scenario
    planner: Literal["idm", "cs", "mcts", "tree-irl"] = "mcts"
    model_path: Optional[str] = None
    seed: int = 0
    duration: Optional[float] = None
    config: dict = Field(default_factory=dict)


class SuiteRequest(BaseModel):
    seed: int = 0
    count: int = Field(10, ge=0, le=10_000)
    families: list[str] = Field(default_factory=lambda: list(FAMILIES))
    duration: float = Field(30.0, gt=0)
    warmup: float = Field(4.0, ge=0)


class LatencyRequest(BaseModel):
    samples_ms: list[float] = Field(min_length=1)


def _config(raw: dict) -> RunConfig:
    try:
        return validate_config(raw)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=str(e)) from None


def _planner(name: str, cfg: RunConfig, model_path: str | None, seed: int):
    model = None
    if model_path:
        if not Path(model_path).exists():
            raise HTTPException(status_code=404, detail=f"score model not found: {model_path}")
        model = ScoreModel.load(model_path)
    try:
        return make_planner(name, mdp_cfg=cfg.mdp_config(), search_cfg=cfg.search_config(),
                            idm=cfg.idm_params(), rollout=cfg.search.rollout,
                            padding=cfg.search.padding, model=model, seed=seed)
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e)) from None


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__, "planners": list(PLANNERS)}


@app.post("/plan", response_model=PlanResponse)
def plan(req: PlanRequest) -> PlanResponse:
    cfg = _config(req.config)
    planner = _planner(req.planner, cfg, req.model_path, req.seed)
    sc = req.scenario
    ego = req.ego or EgoState(x=sc.ego.x, v=sc.ego.v, a=sc.ego.a)
    try:
        scene = build_scene(sc, req.t, (ego.x, ego.v, ego.a), cfg.mdp_config())
        start = time.perf_counter()
        res = planner.plan(scene, 0)
        latency = (time.perf_counter() - start) * 1e3
    except (ScenarioInvalid, ValueError) as e:
        raise HTTPException(status_code=422, detail=str(e)) from None
    tr = res.trajectory
    return PlanResponse(
        planner=req.planner, index=res.index, score=res.score, n_candidates=res.n_candidates,
        latency_ms=latency,
        trajectory=TrajectoryOut(t=[float(v) for v in tr.t], x=tr.x.tolist(), v=tr.v.tolist(),
                                 a=tr.a.tolist(), jerk=tr.jerks.tolist(), pad_start=tr.pad_start))


@app.post("/simulate")
def simulate(req: SimulateRequest) -> dict:
    cfg = _config(req.config)
    planner = _planner(req.planner, cfg, req.model_path, req.seed)
    try:
        rollout = run_closed_loop(req.scenario, planner, req.duration, cfg.sim.replan_hz,
                                  cfg.mdp_config())
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e)) from None
    row = compute_metrics(rollout, expert_oracle(req.scenario))
    lat = rollout.latencies
    return {"metrics": row.as_dict(), "failure": rollout.failure, "n_ticks": len(rollout.ticks),
            "latency_ms_mean": 1e3 * sum(lat) / len(lat) if lat else None}


@app.post("/scenarios")
def scenarios(req: SuiteRequest) -> list[Scenario]:
    try:
        return generate_scenario_suite(req.seed, req.count, req.families, req.duration, req.warmup)
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e)) from None


@app.post("/latency")
def latency(req: LatencyRequest) -> dict:
    try:
        s = latency_stats(req.samples_ms)
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e)) from None
    return {"max": s.max, "p99.99": s.p9999, "p99": s.p99, "p50": s.p50, "mean": s.mean,
            "sd": s.sd, "n": s.n}
