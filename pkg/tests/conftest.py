from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings

from treeplan import _kernels
from treeplan.mdp import AgentPrediction, LongState, Lead, MdpConfig, PredictionTable

settings.register_profile("default", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    _kernels.warm_up()


def state(x=0.0, v=10.0, a=0.0, lead=None, t=0.0, x_max=1e4, v_max=10.0) -> LongState:
    if lead is not None and not isinstance(lead, Lead):
        lead = Lead(*lead)
    return LongState(x, v, a, lead, t, x_max, v_max)


def table(agents, n_steps: int = 16, dt: float = 0.5) -> PredictionTable:
    """Agents as (x0, v, in_path) moving at constant speed; x is the front offset at t=0."""
    preds = []
    for i, (x0, v, in_path) in enumerate(agents):
        xs = tuple(x0 + v * dt * (j + 1) for j in range(n_steps))
        preds.append(AgentPrediction(xs, (v,) * n_steps, (in_path,) * n_steps,
                                     (0.0,) * n_steps, f"a{i}"))
    return PredictionTable(preds, dt)


@pytest.fixture
def cfg() -> MdpConfig:
    return MdpConfig()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[0][1:])):
        terminalreporter.write_line(line)
