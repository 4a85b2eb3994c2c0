"""Closed-loop execution of a planner against a log-playback world."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

from .mcts import Trajectory
from .mdp import MdpConfig, Scene, can_stop
from .policies import IdmParams, idm_accel
from .scenario import TRACE_DT, Scenario, build_scene, step_world

log = logging.getLogger(__name__)

TICK = TRACE_DT
EXPERT_IDM = IdmParams(a_max=1.2, b=1.5)
EXPERT_JERK_LIMIT = 4.0


@dataclass(frozen=True)
class PlanResult:
    trajectory: Trajectory
    index: int = 0
    score: float | None = None
    n_candidates: int = 1


class Planner(Protocol):
    name: str

    def plan(self, scene: Scene, tick: int) -> PlanResult: ...


@dataclass
class Tick:
    t: float
    x: float
    v: float
    a: float
    jerk: float
    mode: str  # "jerk" | "accel": how the executed 0.1 s segment was integrated
    traj_index: int | None = None
    score: float | None = None
    latency: float | None = None
    warmup: bool = False
    agents: dict[str, tuple[float, float, float, bool]] = field(default_factory=dict)
    light: str | None = None


@dataclass
class RolloutLog:
    scenario_id: str
    planner: str
    v_max: float
    stop_line: float | None = None
    ticks: list[Tick] = field(default_factory=list)
    failure: str | None = None

    @property
    def latencies(self) -> list[float]:
        return [tk.latency for tk in self.ticks if tk.latency is not None]

    def metric_ticks(self) -> list[Tick]:
        return [tk for tk in self.ticks if not tk.warmup]

    def to_jsonl(self, include_latency: bool = False) -> str:
        head = {"scenario_id": self.scenario_id, "planner": self.planner, "v_max": self.v_max,
                "stop_line": self.stop_line, "failure": self.failure, "n_ticks": len(self.ticks)}
        lines = [json.dumps(head, ensure_ascii=False)]
        for tk in self.ticks:
            rec = asdict(tk)
            if not include_latency:
                rec.pop("latency")
            rec["agents"] = {k: list(v) for k, v in sorted(tk.agents.items())}
            lines.append(json.dumps(rec, ensure_ascii=False))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path, include_latency: bool = False) -> None:
        Path(path).write_text(self.to_jsonl(include_latency), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> RolloutLog:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = json.loads(lines[0])
        out = cls(head["scenario_id"], head["planner"], head["v_max"], head.get("stop_line"),
                  failure=head.get("failure"))
        for ln in lines[1:]:
            rec = json.loads(ln)
            rec["agents"] = {k: tuple(v) for k, v in rec.get("agents", {}).items()}
            rec.setdefault("latency", None)
            out.ticks.append(Tick(**rec))
        return out

    @classmethod
    def load(cls, path: str | Path) -> RolloutLog:
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


def advance(x: float, v: float, a: float, traj: Trajectory, offset: float,
            dt: float = TICK, plan_dt: float = 0.5) -> tuple[float, float, float, float, str]:
    """Track ``traj`` exactly for ``dt`` starting ``offset`` seconds into it.

    Returns the next (x, v, a), the jerk over the tick and the segment mode.
    """
    seg = min(int((offset + 1e-9) // plan_dt), len(traj.jerks) - 1)
    if seg < traj.pad_start:
        j = float(traj.effective_jerks[seg])
        a_next = a + j * dt
        v_next = max(0.0, v + a * dt + 0.5 * j * dt * dt)
        x_next = max(x, x + v * dt + 0.5 * a * dt * dt + j * dt * dt * dt / 6.0)
        return x_next, v_next, a_next, j, "jerk"
    a_next = float(traj.a[seg + 1])
    v_next = max(0.0, v + a_next * dt)
    x_next = max(x, x + v * dt + 0.5 * a_next * dt * dt)
    return x_next, v_next, a_next, (a_next - a) / dt, "accel"


def _n_ticks(duration: float) -> int:
    return int(round(duration / TICK))


def run_closed_loop(scenario: Scenario, planner: Planner, duration: float | None = None,
                    replan_hz: float = 10.0, mdp_cfg: MdpConfig | None = None) -> RolloutLog:
    """Drive the ego with ``planner`` for ``duration`` seconds at 10 Hz.

    The planner sees the executed state; its trajectory is tracked perfectly.
    A planner exception truncates the log and records the failure.
    """
    mdp_cfg = mdp_cfg or MdpConfig()
    duration = scenario.duration if duration is None else duration
    if duration > scenario.duration + 1e-9:
        raise ValueError(f"duration {duration} exceeds scenario length {scenario.duration}")
    replan_every = max(1, int(round(1.0 / (replan_hz * TICK))))
    out = RolloutLog(scenario.id, planner.name, scenario.v_max,
                     scenario.light.stop_line if scenario.light else None)
    x, v, a = scenario.ego.x, scenario.ego.v, scenario.ego.a
    plan: PlanResult | None = None
    plan_t = 0.0
    for i in range(_n_ticks(duration)):
        t = round(i * TICK, 10)
        latency = None
        if i % replan_every == 0 or plan is None:
            scene = build_scene(scenario, t, (x, v, a), mdp_cfg)
            start = time.perf_counter()
            try:
                plan = planner.plan(scene, i)
            except Exception as e:  # noqa: BLE001 - any planner error ends the run
                log.warning("planner %s failed on %s at t=%.1f: %s", planner.name, scenario.id, t, e)
                out.failure = f"t={t:.1f}: {type(e).__name__}: {e}"
                break
            latency = time.perf_counter() - start
            plan_t = t
        world = step_world(scenario, t)
        x_n, v_n, a_n, j, mode = advance(x, v, a, plan.trajectory, t - plan_t)
        out.ticks.append(Tick(
            t=t, x=x, v=v, a=a, jerk=j, mode=mode, traj_index=plan.index, score=plan.score,
            latency=latency, warmup=t < scenario.warmup - 1e-9, agents=world,
            light=scenario.light.phase_at(t) if scenario.light else None))
        x, v, a = x_n, v_n, a_n
    return out


def expert_oracle(scenario: Scenario, duration: float | None = None,
                  params: IdmParams = EXPERT_IDM, jerk_limit: float = EXPERT_JERK_LIMIT,
                  length: float | None = None) -> RolloutLog:
    """Comfort-tuned IDM drive of the whole scenario, jerk-limited, used as ground truth.

    Red/yellow lights the ego can stop for act as a stopped lead at the stop line.
    Runs to the end of the agent traces by default so labels can look 8 s ahead.
    """
    length = MdpConfig().vehicle_length if length is None else length
    if duration is None:
        duration = scenario.duration + 8.0
    out = RolloutLog(scenario.id, "expert", scenario.v_max,
                     scenario.light.stop_line if scenario.light else None)
    x, v, a = scenario.ego.x, scenario.ego.v, scenario.ego.a
    for i in range(_n_ticks(duration) + 1):
        t = round(i * TICK, 10)
        world = step_world(scenario, t)
        gap = None
        v_lead = None
        for ax, av, _aa, in_path in world.values():
            if in_path and ax > x and (gap is None or ax - length - x < gap):
                gap, v_lead = ax - length - x, av
        phase = None
        if scenario.light is not None:
            phase = scenario.light.phase_at(t)
            line = scenario.light.stop_line
            if phase in ("red", "yellow") and can_stop(x, v, line) and (gap is None or line - x < gap):
                gap, v_lead = line - x, 0.0
        cmd = idm_accel(v, gap, v_lead, params, scenario.v_max)
        if v <= 0.0 and cmd < 0.0:
            cmd = 0.0
        step = jerk_limit * TICK
        a_n = min(max(cmd, a - step), a + step)
        v_n = max(0.0, v + a_n * TICK)
        x_n = max(x, x + v * TICK + 0.5 * a_n * TICK * TICK)
        out.ticks.append(Tick(t=t, x=x, v=v, a=a, jerk=(a_n - a) / TICK, mode="accel",
                              warmup=t < scenario.warmup - 1e-9, agents=world, light=phase))
        x, v, a = x_n, v_n, a_n
    return out
