"""1-D longitudinal driving MDP: state, jerk actions, kinematic transition, reward.

Positions are front-bumper offsets along the reference path for every vehicle.
The lead block of a state stores the lead's *rear* bumper (front offset minus
``vehicle_length``), so ``x_lead - x_ego`` is the bumper-to-bumper gap that the
clearance, collision and stop terms of the reward reason about.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from ._kernels import pack_rows

ACTIONS: tuple[float, ...] = (-2.0, -1.0, 0.0, 1.0, 2.0)
NUM_ACTIONS = len(ACTIONS)
LATERAL_TOLERANCE = 2.0


class ContractViolation(ValueError):
    """Raised when an operation is called outside its precondition."""


class ScenarioInvalid(ValueError):
    """Raised when a scene cannot be turned into an initial state."""


class Lead(NamedTuple):
    x: float
    v: float
    a: float


class LongState(NamedTuple):
    x_ego: float
    v_ego: float
    a_ego: float
    lead: Lead | None
    t: float
    x_max: float
    v_max: float


@dataclass(frozen=True)
class RewardWeights:
    jerk: float = 0.05
    accel: float = 0.2
    speed: float = 0.1
    collision: float = 10.0
    clearance: float = 10.0
    stop: float = 0.1

    def __post_init__(self):
        for name in ("jerk", "accel", "speed", "collision", "clearance", "stop"):
            if getattr(self, name) < 0:
                raise ValueError(f"reward weight {name} must be >= 0")


@dataclass(frozen=True)
class MdpConfig:
    dt: float = 0.5
    horizon: float = 8.0
    gamma: float = 0.99
    accel_min: float = -7.0
    accel_max: float = 2.0
    alpha: float = 1.0 / 30.0
    delta: float = 2.0
    weights: RewardWeights = field(default_factory=RewardWeights)
    stop_speed_epsilon: float = 0.1
    # Flip the sign of the two stop-buffer terms (as-written sign is the default).
    negate_stop_term: bool = False
    vehicle_length: float = 4.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 or steps < 1:
            raise ValueError("horizon must be a positive multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def step_index(self, t: float) -> int:
        return int(round(t / self.dt))


@dataclass(frozen=True)
class AgentPrediction:
    """Predicted track of one agent on the MDP grid t = dt, 2dt, ..., horizon."""

    x: tuple[float, ...]
    v: tuple[float, ...]
    in_path: tuple[bool, ...]
    a: tuple[float, ...] | None = None
    agent_id: str = ""


class PredictionTable:
    """Per-step predictions for every agent, aligned with the MDP time grid.

    Row ``j`` of every agent holds its prediction at ``t = (j + 1) * dt``.
    Accelerations default to backward differences of the predicted speeds.
    """

    def __init__(self, agents: Sequence[AgentPrediction] = (), dt: float = 0.5,
                 current_speeds: Sequence[float] | None = None):
        self.agents = tuple(agents)
        self.dt = dt
        lengths = {len(p.x) for p in self.agents}
        if len(lengths) > 1:
            raise ValueError("all agents need the same number of prediction steps")
        self.n_steps = lengths.pop() if lengths else 0
        rows: list[list[tuple[float, float, float]]] = [[] for _ in range(self.n_steps)]
        for i, p in enumerate(self.agents):
            if len(p.v) != self.n_steps or len(p.in_path) != self.n_steps:
                raise ValueError(f"agent {p.agent_id or i}: ragged prediction")
            if not all(math.isfinite(x) for x in p.x):
                raise ValueError(f"agent {p.agent_id or i}: non-finite offset")
            accel = p.a
            if accel is None:
                v_prev = current_speeds[i] if current_speeds is not None else None
                accel = _diff_accel(p.v, dt, v_prev)
            for j in range(self.n_steps):
                if p.in_path[j]:
                    rows[j].append((p.x[j], p.v[j], accel[j]))
        for row in rows:
            row.sort()
        self._rows = [tuple(r) for r in rows]
        self._packed = None

    def packed(self):
        """Rows as padded arrays ``(x, v, counts)`` for the compiled kernels (cached)."""
        if self._packed is None:
            self._packed = pack_rows(self._rows)
        return self._packed

    def in_path_at(self, step: int) -> tuple[tuple[float, float, float], ...]:
        """In-path agents at MDP step ``step`` (1-based), sorted by offset."""
        if step < 1 or step > self.n_steps:
            if self.n_steps == 0:
                return ()
            raise ContractViolation(f"no prediction for step {step}")
        return self._rows[step - 1]


def _diff_accel(v: Sequence[float], dt: float, v_prev: float | None) -> tuple[float, ...]:
    out = []
    for j in range(len(v)):
        if j > 0:
            out.append((v[j] - v[j - 1]) / dt)
        elif v_prev is not None:
            out.append((v[0] - v_prev) / dt)
        elif len(v) > 1:
            out.append((v[1] - v[0]) / dt)
        else:
            out.append(0.0)
    return tuple(out)


def lead_lookup(x_ego_next: float, pred: PredictionTable, t_next: float,
                dt: float = 0.5) -> tuple[float, float, float] | None:
    """Closest in-path agent strictly ahead of ``x_ego_next`` at ``t_next``.

    Returns the agent's raw (front offset, speed, accel) or None.
    """
    step = int(round(t_next / dt))
    for cand in pred.in_path_at(step):
        if cand[0] > x_ego_next:
            return cand
    return None


def lead_from_agents(x_ego: float, agents, length: float) -> Lead | None:
    """Lead block from current agent states ``(x, v, a, in_path)`` rather than predictions."""
    best = None
    for x, v, a, in_path in agents:
        if in_path and x > x_ego and (best is None or x < best[0]):
            best = (x, v, a)
    if best is None:
        return None
    return Lead(best[0] - length, best[1], best[2])


def is_terminal(s: LongState, cfg: MdpConfig) -> bool:
    return s.t >= cfg.horizon - 1e-9


def transition(s: LongState, jerk: float, pred: PredictionTable,
               cfg: MdpConfig) -> tuple[LongState, float]:
    """Advance one ``dt`` under a jerk command.

    Returns the next state and the effective jerk after the acceleration clamp.
    """
    if s.t >= cfg.horizon - 1e-9:
        raise ContractViolation("transition from a terminal state")
    if jerk not in ACTIONS:
        raise ContractViolation(f"jerk {jerk!r} is not a valid action")
    dt = cfg.dt
    a = s.a_ego
    a_next = a + jerk * dt
    if a_next > cfg.accel_max:
        a_next = cfg.accel_max
    elif a_next < cfg.accel_min:
        a_next = cfg.accel_min
    j_eff = (a_next - a) / dt
    v = s.v_ego
    v_next = v + a * dt + 0.5 * j_eff * dt * dt
    if v_next < 0.0:
        v_next = 0.0
    x = s.x_ego
    x_next = x + v * dt + 0.5 * a * dt * dt + j_eff * dt * dt * dt / 6.0
    if x_next < x:
        x_next = x
    t_next = s.t + dt
    return LongState(x_next, v_next, a_next, _lead(x_next, pred, t_next, cfg),
                     t_next, s.x_max, s.v_max), j_eff


def transition_accel(s: LongState, accel_cmd: float, pred: PredictionTable,
                     cfg: MdpConfig) -> tuple[LongState, float]:
    """Advance one ``dt`` holding a (clipped) acceleration command constant."""
    if s.t >= cfg.horizon - 1e-9:
        raise ContractViolation("transition from a terminal state")
    dt = cfg.dt
    a_next = min(max(accel_cmd, cfg.accel_min), cfg.accel_max)
    v = s.v_ego
    v_next = v + a_next * dt
    if v_next < 0.0:
        v_next = 0.0
    x = s.x_ego
    x_next = x + v * dt + 0.5 * a_next * dt * dt
    if x_next < x:
        x_next = x
    t_next = s.t + dt
    return LongState(x_next, v_next, a_next, _lead(x_next, pred, t_next, cfg),
                     t_next, s.x_max, s.v_max), (a_next - s.a_ego) / dt


def _lead(x_ego: float, pred: PredictionTable, t: float, cfg: MdpConfig) -> Lead | None:
    if not pred.n_steps:
        return None
    found = lead_lookup(x_ego, pred, t, cfg.dt)
    if found is None:
        return None
    return Lead(found[0] - cfg.vehicle_length, found[1], found[2])


def cost(s: LongState, effective_jerk: float, cfg: MdpConfig) -> float:
    w = cfg.weights
    v = s.v_ego
    x = s.x_ego
    v_max = s.v_max
    total = w.jerk * effective_jerk * effective_jerk + w.accel * s.a_ego * s.a_ego
    speed_err = abs(v_max - v)
    total += w.speed * speed_err
    if speed_err < 0.5:
        total -= 2.0 * w.speed
    stopped = abs(v) < cfg.stop_speed_epsilon
    buffer = (v_max - 2.0 * v) * (-1.0 if cfg.negate_stop_term else 1.0)
    lead = s.lead
    if lead is not None:
        gap = lead.x - x
        if x >= lead.x:
            dv = lead.v - v
            total += w.collision * dv * dv
        if 0.0 < gap < cfg.delta:
            total += w.clearance * (gap - cfg.delta) ** 2
        if stopped and cfg.delta <= gap < 3.0:
            total += w.stop * buffer
    to_stop = s.x_max - x
    if x >= s.x_max:
        total += w.collision * v * v
    if 0.0 < to_stop < cfg.delta:
        total += w.clearance * to_stop * to_stop
    if stopped and 0.0 <= to_stop < 2.0:
        total += w.stop * buffer
    return total


def reward(s: LongState, a: float, s_next: LongState, effective_jerk: float,
           cfg: MdpConfig) -> float:
    """R(s, a, s') = -alpha * cost(s'); only the successor and effective jerk matter."""
    return -cfg.alpha * cost(s_next, effective_jerk, cfg)


@dataclass(frozen=True)
class TrafficLightState:
    stop_line: float
    phase: str  # "red" | "yellow" | "green"


@dataclass(frozen=True)
class Scene:
    """Planning-time snapshot: measured ego, current agents, predictions, map limits.

    ``agents`` holds ``(x, v, a, in_path)`` tuples of current agent states.
    """

    ego_x: float
    ego_v: float
    ego_a: float
    v_max: float
    goal: float
    agents: tuple[tuple[float, float, float, bool], ...] = ()
    predictions: PredictionTable = field(default_factory=PredictionTable)
    lights: tuple[TrafficLightState, ...] = ()
    ego_lateral: float = 0.0


def can_stop(x_ego: float, v_ego: float, stop_line: float, max_decel: float = 7.0) -> bool:
    """Stoppable iff the constant deceleration needed to halt at the line is within ``max_decel``."""
    d = stop_line - x_ego
    if d < 0:
        return False
    if v_ego <= 0:
        return True
    if d == 0:
        return False
    return v_ego * v_ego / (2.0 * d) <= max_decel


def init_state(scene: Scene, cfg: MdpConfig | None = None) -> LongState:
    cfg = cfg or MdpConfig()
    if abs(scene.ego_lateral) > LATERAL_TOLERANCE:
        raise ScenarioInvalid(
            f"ego is {scene.ego_lateral:.2f} m off the reference path (limit {LATERAL_TOLERANCE} m)")
    x_max = scene.goal
    for light in scene.lights:
        if light.phase in ("red", "yellow") and can_stop(
                scene.ego_x, scene.ego_v, light.stop_line, -cfg.accel_min):
            x_max = min(x_max, light.stop_line)
    a = min(max(scene.ego_a, cfg.accel_min), cfg.accel_max)
    return LongState(scene.ego_x, max(scene.ego_v, 0.0), a,
                     lead_from_agents(scene.ego_x, scene.agents, cfg.vehicle_length),
                     0.0, x_max, scene.v_max)
