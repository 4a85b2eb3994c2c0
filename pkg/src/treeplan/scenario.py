"""Scenario files, log-playback world, oracle predictions and the synthetic suite."""

from __future__ import annotations

import bisect
import json
import math
import random
from pathlib import Path
from typing import Iterable, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .mdp import AgentPrediction, MdpConfig, PredictionTable, Scene, TrafficLightState

FORMAT = "treeplan-scenario"
FORMAT_VERSION = 1
TRACE_DT = 0.1
PLAN_HORIZON = 8.0

FAMILIES = ("no-lead", "lead-const", "lead-brake", "stop-and-go", "cut-in", "red-light")


class ScenarioError(ValueError):
    """Scenario file could not be parsed or violates an invariant."""


class AgentTrace(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    t: tuple[float, ...]
    x: tuple[float, ...]
    v: tuple[float, ...]
    in_path: tuple[bool, ...]

    @model_validator(mode="after")
    def _check(self):
        n = len(self.t)
        if n == 0:
            raise ValueError("empty trace")
        if not (len(self.x) == len(self.v) == len(self.in_path) == n):
            raise ValueError("t, x, v and in_path must have equal length")
        for i in range(1, n):
            if not self.t[i] > self.t[i - 1]:
                raise ValueError(f"trace not time-sorted at index {i} (t={self.t[i]})")
        if not all(math.isfinite(x) for x in self.x):
            raise ValueError("non-finite offset in trace")
        return self


class PhaseChange(BaseModel):
    model_config = ConfigDict(frozen=True)

    t: float
    phase: Literal["red", "yellow", "green"]


class TrafficLight(BaseModel):
    model_config = ConfigDict(frozen=True)

    stop_line: float
    schedule: tuple[PhaseChange, ...]

    @field_validator("schedule")
    @classmethod
    def _sorted(cls, v):
        if not v:
            raise ValueError("schedule needs at least one phase")
        for i in range(1, len(v)):
            if not v[i].t > v[i - 1].t:
                raise ValueError(f"schedule not time-sorted at index {i}")
        return v

    def phase_at(self, t: float) -> str:
        phase = self.schedule[0].phase
        for change in self.schedule:
            if change.t <= t + 1e-9:
                phase = change.phase
            else:
                break
        return phase


class EgoInit(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float = 0.0
    v: float = Field(0.0, ge=0.0)
    a: float = 0.0


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True)

    format: Literal["treeplan-scenario"] = FORMAT
    version: int = FORMAT_VERSION
    id: str
    family: str = "custom"
    ego: EgoInit = EgoInit()
    path_length: float = Field(1000.0, gt=0)
    v_max: float = Field(..., gt=0)
    goal: float
    duration: float = Field(30.0, gt=0)
    warmup: float = Field(4.0, ge=0)
    light: TrafficLight | None = None
    agents: tuple[AgentTrace, ...] = ()
    idm: dict[str, float] | None = None

    @field_validator("version")
    @classmethod
    def _version(cls, v):
        if v != FORMAT_VERSION:
            raise ValueError(f"unsupported scenario version {v} (expected {FORMAT_VERSION})")
        return v


def _format_validation(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        return Scenario.model_validate(raw)
    except ValidationError as e:
        raise ScenarioError(f"{source}: {_format_validation(e)}") from e


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), str(path))


def dump_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario.model_dump(mode="json"), indent=1, ensure_ascii=False) + "\n"


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(dump_scenario(scenario), encoding="utf-8")


# -- log playback -----------------------------------------------------------------

def _sample(trace: AgentTrace, t: float) -> tuple[float, float, float, bool] | None:
    ts = trace.t
    if t < ts[0] - 1e-9 or t > ts[-1] + 1e-9:
        return None
    i = bisect.bisect_right(ts, t + 1e-9) - 1
    if i >= len(ts) - 1 or abs(ts[i] - t) <= 1e-9:
        i = min(i, len(ts) - 1)
        x, v, flag = trace.x[i], trace.v[i], trace.in_path[i]
    else:
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        x = trace.x[i] + w * (trace.x[i + 1] - trace.x[i])
        v = trace.v[i] + w * (trace.v[i + 1] - trace.v[i])
        flag = trace.in_path[i]
    if len(ts) > 1:
        j = min(max(i, 0), len(ts) - 2)
        a = (trace.v[j + 1] - trace.v[j]) / (ts[j + 1] - ts[j])
    else:
        a = 0.0
    return x, v, a, flag


def step_world(scenario: Scenario, t: float) -> dict[str, tuple[float, float, float, bool]]:
    """Agent states ``(x, v, a, in_path)`` at time ``t``, linearly interpolated.

    Agents whose trace does not cover ``t`` are absent.
    """
    end = scenario.duration + PLAN_HORIZON
    if t < -1e-9 or t > end + 1e-9:
        raise ValueError(f"t={t} outside the episode [0, {end}]")
    out = {}
    for trace in scenario.agents:
        s = _sample(trace, t)
        if s is not None:
            out[trace.id] = s
    return out


def predict(scenario: Scenario, t: float, cfg: MdpConfig | None = None) -> PredictionTable:
    """Oracle predictions: ground-truth playback on the MDP grid after ``t``."""
    cfg = cfg or MdpConfig()
    n = cfg.n_steps
    preds = []
    speeds = []
    for trace in scenario.agents:
        now = _sample(trace, t)
        xs, vs, flags = [], [], []
        last = now
        for j in range(1, n + 1):
            s = _sample(trace, t + j * cfg.dt)
            if s is None:
                # Outside the trace window the agent is off the path.
                ref = last if last is not None else (trace.x[0], trace.v[0], 0.0, False)
                xs.append(ref[0])
                vs.append(ref[1])
                flags.append(False)
            else:
                xs.append(s[0])
                vs.append(s[1])
                flags.append(s[3])
                last = s
        if not any(flags):
            continue
        preds.append(AgentPrediction(tuple(xs), tuple(vs), tuple(flags), agent_id=trace.id))
        speeds.append(now[1] if now is not None else vs[0])
    return PredictionTable(preds, cfg.dt, current_speeds=speeds)


def lights_at(scenario: Scenario, t: float) -> tuple[TrafficLightState, ...]:
    if scenario.light is None:
        return ()
    return (TrafficLightState(scenario.light.stop_line, scenario.light.phase_at(t)),)


def build_scene(scenario: Scenario, t: float, ego: tuple[float, float, float],
                cfg: MdpConfig | None = None) -> Scene:
    cfg = cfg or MdpConfig()
    world = step_world(scenario, t)
    return Scene(
        ego_x=ego[0], ego_v=ego[1], ego_a=ego[2],
        v_max=scenario.v_max, goal=scenario.goal,
        agents=tuple(world.values()),
        predictions=predict(scenario, t, cfg),
        lights=lights_at(scenario, t),
    )


# -- synthetic suite --------------------------------------------------------------

def _trace_from_profile(agent_id: str, x0: float, v0: float, accel_fn, end: float,
                        in_path_fn=lambda t: True) -> AgentTrace:
    """Integrate a piecewise acceleration profile at the trace resolution."""
    n = int(round(end / TRACE_DT))
    ts, xs, vs, flags = [], [], [], []
    x, v = x0, v0
    for i in range(n + 1):
        t = round(i * TRACE_DT, 10)
        ts.append(t)
        xs.append(round(x, 6))
        vs.append(round(v, 6))
        flags.append(bool(in_path_fn(t)))
        a = accel_fn(t, v)
        v_next = max(0.0, v + a * TRACE_DT)
        x += 0.5 * (v + v_next) * TRACE_DT
        v = v_next
    return AgentTrace(id=agent_id, t=tuple(ts), x=tuple(xs), v=tuple(vs), in_path=tuple(flags))


def _braking_feasible(gap: float, v_ego: float, v_lead: float, decel: float,
                      jerk: float = 2.0, a_min: float = -7.0, dt: float = 0.01) -> bool:
    """Can a jerk-limited ego braking at once stay behind a lead braking at ``decel``?"""
    x_e, v_e, a_e = 0.0, v_ego, 0.0
    x_l, v_l = gap, v_lead
    while v_e > 0:
        a_e = max(a_min, a_e - jerk * dt)
        v_e = max(0.0, v_e + a_e * dt)
        x_e += v_e * dt
        v_l = max(0.0, v_l - decel * dt)
        x_l += v_l * dt
        if x_l - x_e <= 0.5:
            return False
    return True


def _reach(v0: float, v_max: float, t: float, a_max: float = 2.0) -> float:
    """Distance covered in ``t`` seconds accelerating at ``a_max`` from ``v0`` up to ``v_max``."""
    t_acc = min(t, max(0.0, (v_max - v0) / a_max))
    v_top = v0 + a_max * t_acc
    return v0 * t_acc + 0.5 * a_max * t_acc * t_acc + v_top * (t - t_acc)


def generate_scenario(family: str, rng: random.Random, scenario_id: str,
                      duration: float = 30.0, warmup: float = 4.0) -> Scenario:
    if family not in FAMILIES:
        raise ValueError(f"unknown scenario family {family!r}; choose from {', '.join(FAMILIES)}")
    end = duration + PLAN_HORIZON
    length = MdpConfig().vehicle_length
    v_max = round(rng.uniform(10.0, 16.0), 3)
    v_ego = round(rng.uniform(0.0, min(15.0, v_max)), 3)
    goal = 1000.0
    agents: list[AgentTrace] = []
    light = None
    if family == "no-lead":
        pass
    elif family == "lead-const":
        gap = rng.uniform(5.0, 60.0)
        v_lead = rng.uniform(0.0, 15.0)
        agents.append(_trace_from_profile("lead", gap + length, v_lead, lambda t, v: 0.0, end))
    elif family == "lead-brake":
        while True:
            gap = rng.uniform(5.0, 60.0)
            v_lead = rng.uniform(5.0, 15.0)
            decel = rng.uniform(2.0, 4.0)
            if _braking_feasible(gap, v_ego, v_lead, decel):
                break
        t_brake = rng.uniform(warmup, warmup + 8.0)
        agents.append(_trace_from_profile(
            "lead", gap + length, v_lead,
            lambda t, v, tb=t_brake, d=decel: -d if t >= tb else 0.0, end))
    elif family == "stop-and-go":
        gap = rng.uniform(5.0, 60.0)
        v_lead = rng.uniform(5.0, 15.0)
        decel = rng.uniform(1.0, 4.0)
        period = rng.uniform(8.0, 14.0)
        t0 = rng.uniform(0.0, warmup)

        def stop_go(t, v, v_top=v_lead, d=decel, p=period, t0=t0):
            if t < t0:
                return 0.0
            phase = ((t - t0) % p) / p
            if phase < 0.5:
                return -d
            return 1.5 if v < v_top else 0.0
        agents.append(_trace_from_profile("lead", gap + length, v_lead, stop_go, end))
    elif family == "cut-in":
        t_cut = rng.uniform(warmup, warmup + 10.0)
        insert_gap = rng.uniform(3.0, 10.0)
        v_cut = rng.uniform(max(0.0, v_ego - 5.0), v_ego + 2.0)
        # Measure the insertion gap from the farthest point any planner can reach by t_cut
        # (full acceleration up to v_max), so the merge always lands ahead of the ego.
        x_cut = _reach(v_ego, v_max, t_cut) + insert_gap + length
        x0 = x_cut - v_cut * t_cut
        agents.append(_trace_from_profile(
            "cutin", x0, v_cut, lambda t, v: 0.0, end,
            in_path_fn=lambda t, tc=t_cut: t >= tc))
        if rng.random() < 0.5:
            gap = rng.uniform(30.0, 60.0)
            v_far = rng.uniform(v_cut, 15.0)
            agents.append(_trace_from_profile("lead", gap + length, v_far, lambda t, v: 0.0, end))
    elif family == "red-light":
        min_d = v_ego * v_ego / (2.0 * 2.0) + 10.0
        stop_line = rng.uniform(max(30.0, min_d), max(80.0, min_d + 20.0))
        t_green = rng.uniform(12.0, 40.0)
        light = TrafficLight(stop_line=round(stop_line, 3), schedule=(
            PhaseChange(t=0.0, phase="red"), PhaseChange(t=round(t_green, 3), phase="green")))
    return Scenario(
        id=scenario_id, family=family, ego=EgoInit(x=0.0, v=v_ego, a=0.0),
        v_max=v_max, goal=goal, duration=duration, warmup=warmup,
        light=light, agents=tuple(agents),
    )


def generate_scenario_suite(seed: int, count: int, families: Iterable[str] = FAMILIES,
                            duration: float = 30.0, warmup: float = 4.0) -> list[Scenario]:
    """Seeded suite cycling through ``families`` in order."""
    families = tuple(families)
    for f in families:
        if f not in FAMILIES:
            raise ValueError(f"unknown scenario family {f!r}; choose from {', '.join(FAMILIES)}")
    if count and not families:
        raise ValueError("no families selected")
    rng = random.Random(seed)
    out = []
    for i in range(count):
        fam = families[i % len(families)]
        out.append(generate_scenario(fam, rng, f"{fam}-{seed}-{i:04d}", duration, warmup))
    return out
