"""Rollout, padding and prior policies for the tree search."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from . import _kernels

from .mdp import (
    NUM_ACTIONS,
    ContractViolation,
    LongState,
    MdpConfig,
    PredictionTable,
    reward,
    transition_accel,
)

ACCEL_MIN = -7.0
ACCEL_MAX = 2.0

AccelPolicy = Callable[[LongState], float]
PriorPolicy = Callable[[LongState], tuple[float, ...]]


@dataclass(frozen=True)
class IdmParams:
    """Intelligent driver model parameters; ``v0=None`` tracks the state's speed limit."""

    v0: float | None = None
    T: float = 1.5
    a_max: float = 2.0
    b: float = 2.0
    s0: float = 2.0
    exponent: float = 4.0

    def __post_init__(self):
        for name in ("T", "a_max", "b", "s0", "exponent"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IDM parameter {name} must be positive")
        if self.v0 is not None and self.v0 <= 0:
            raise ValueError("IDM parameter v0 must be positive")
        if self.b > 7:
            raise ValueError("IDM comfortable deceleration b must be <= 7")


def idm_accel(v_ego: float, gap: float | None, v_lead: float | None,
              params: IdmParams, v0: float | None = None) -> float:
    """IDM acceleration, clipped to the vehicle's acceleration bounds.

    ``v0`` is the fallback desired speed when ``params.v0`` is unset.
    """
    if params.v0 is not None:
        v0 = params.v0
    if v0 is None:
        raise ValueError("IDM needs a desired speed")
    free = 1.0 - (v_ego / v0) ** params.exponent if v0 > 0 else -1.0
    if gap is None:
        acc = params.a_max * free
    elif gap <= 0:
        return ACCEL_MIN
    else:
        dv = v_ego - v_lead
        s_star = params.s0 + v_ego * params.T + v_ego * dv / (2.0 * math.sqrt(params.a_max * params.b))
        # Desired gap never drops below the jam distance.
        if s_star < params.s0:
            s_star = params.s0
        ratio = s_star / gap  # a product overflows to inf (then clips) instead of raising
        acc = params.a_max * (free - ratio * ratio)
    if acc > ACCEL_MAX:
        return ACCEL_MAX
    if acc < ACCEL_MIN:
        return ACCEL_MIN
    return acc


class IdmPolicy:
    """Deterministic IDM acceleration policy on MDP states."""

    name = "idm"

    def __init__(self, params: IdmParams | None = None):
        self.params = params or IdmParams()

    def __call__(self, s: LongState) -> float:
        # The maximum offset (stop line or goal) acts as a stationary obstacle.
        gap = s.x_max - s.x_ego
        v_lead = 0.0
        lead = s.lead
        if lead is not None and lead.x - s.x_ego < gap:
            gap = lead.x - s.x_ego
            v_lead = lead.v
        return idm_accel(s.v_ego, gap, v_lead, self.params, s.v_max)


class ConstantSpeedPolicy:
    name = "cs"

    def __call__(self, s: LongState) -> float:
        return constant_speed_accel()


def constant_speed_accel() -> float:
    return 0.0


_UNIFORM = (1.0 / NUM_ACTIONS,) * NUM_ACTIONS


def uniform_prior(s: LongState | None = None) -> tuple[float, ...]:
    return _UNIFORM


class PolicyNetwork(Protocol):
    """Slot for a learned policy/value function: state -> (action prior, value)."""

    def __call__(self, s: LongState) -> tuple[tuple[float, ...], float]: ...


def learned_prior(network: PolicyNetwork) -> PriorPolicy:
    raise NotImplementedError("no learned policy ships with this package; use the uniform prior")


def rollout_return(s: LongState, policy: AccelPolicy, pred: PredictionTable,
                   cfg: MdpConfig) -> float:
    """Discounted return of following ``policy`` from ``s`` until the horizon."""
    if s.t >= cfg.horizon - 1e-9:
        raise ContractViolation("rollout from a terminal state")
    gamma = cfg.gamma
    total = 0.0
    discount = 1.0
    horizon = cfg.horizon - 1e-9
    while s.t < horizon:
        nxt, jerk = transition_accel(s, policy(s), pred, cfg)
        total += discount * reward(s, None, nxt, jerk, cfg)
        discount *= gamma
        s = nxt
    return total


def make_policy(name: str, idm: IdmParams | None = None) -> AccelPolicy:
    if name == "idm":
        return IdmPolicy(idm)
    if name == "cs":
        return ConstantSpeedPolicy()
    if name in ("learned", "rl"):
        raise NotImplementedError("learned rollout/padding policies are not available")
    raise ValueError(f"unknown policy {name!r}")


def kernel_consts(policy: AccelPolicy, cfg: MdpConfig) -> np.ndarray | None:
    """Constant vector for the compiled kernels, or None if ``policy`` has no kernel."""
    if isinstance(policy, IdmPolicy):
        p = policy.params
        idm = (1.0, p.T, p.a_max, p.s0, p.exponent, p.v0 if p.v0 is not None else -1.0,
               2.0 * math.sqrt(p.a_max * p.b))
    elif isinstance(policy, ConstantSpeedPolicy):
        idm = (0.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0)
    else:
        return None
    w = cfg.weights
    return np.array((
        cfg.dt, cfg.horizon - 1e-9, cfg.gamma, cfg.accel_min, cfg.accel_max, cfg.vehicle_length,
        w.jerk, w.accel, w.speed, w.collision, w.clearance, w.stop,
        cfg.delta, cfg.stop_speed_epsilon, -1.0 if cfg.negate_stop_term else 1.0, -cfg.alpha,
    ) + idm)


def make_rollout_evaluator(policy: AccelPolicy, pred: PredictionTable,
                           cfg: MdpConfig) -> Callable[[LongState], float]:
    """Return ``s -> rollout_return(s, policy, pred, cfg)``.

    IDM and constant-speed policies run through a compiled kernel (the hot path
    of the search); any other policy falls back to ``rollout_return``.
    """
    consts = kernel_consts(policy, cfg)
    if consts is None:
        return lambda s: rollout_return(s, policy, pred, cfg)
    rows_x, rows_v, counts = pred.packed()
    kernel = _kernels.rollout
    horizon = cfg.horizon - 1e-9

    def evaluate(s: LongState) -> float:
        if s.t >= horizon:
            raise ContractViolation("rollout from a terminal state")
        lead = s.lead
        if lead is None:
            return kernel(s.x_ego, s.v_ego, s.a_ego, s.t, False, 0.0, 0.0, s.x_max, s.v_max,
                          rows_x, rows_v, counts, consts)
        return kernel(s.x_ego, s.v_ego, s.a_ego, s.t, True, lead.x, lead.v, s.x_max, s.v_max,
                      rows_x, rows_v, counts, consts)

    return evaluate
