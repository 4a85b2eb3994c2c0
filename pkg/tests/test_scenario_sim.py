from __future__ import annotations

import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treeplan.mcts import SearchConfig
from treeplan.mdp import MdpConfig
from treeplan.planners import make_planner, tick_seed
from treeplan.scenario import (FAMILIES, AgentTrace, EgoInit, PhaseChange, Scenario,
                               ScenarioError, TrafficLight, build_scene, dump_scenario,
                               generate_scenario, generate_scenario_suite, load_scenario,
                               parse_scenario, predict, save_scenario, step_world)
from treeplan.sim import EXPERT_JERK_LIMIT, RolloutLog, advance, expert_oracle, run_closed_loop


def const_trace(aid, x0, v, end=40.0, dt=0.1, in_path=True):
    n = int(round(end / dt)) + 1
    t = tuple(round(i * dt, 10) for i in range(n))
    return AgentTrace(id=aid, t=t, x=tuple(x0 + v * ti for ti in t), v=(v,) * n,
                      in_path=(in_path,) * n)


def scenario(**kw):
    base = dict(id="s", v_max=10.0, goal=1000.0, duration=10.0, warmup=0.0,
                ego=EgoInit(x=0.0, v=10.0, a=0.0))
    base.update(kw)
    return Scenario(**base)


# ---------------------------------------------------------------- file format

def test_scenario_round_trip(tmp_path):
    sc = generate_scenario("cut-in", random.Random(3), "c-1")
    p = tmp_path / "c.json"
    save_scenario(sc, p)
    assert load_scenario(p) == sc
    assert dump_scenario(load_scenario(p)) == dump_scenario(sc)


@pytest.mark.parametrize("raw, fragment", [
    ("{not json", "1:2"),
    (json.dumps({"id": "a", "v_max": 10, "goal": 100, "version": 2}), "version"),
    (json.dumps({"id": "a", "v_max": -1, "goal": 100}), "v_max"),
    (json.dumps({"id": "a", "v_max": 10, "goal": 100,
                 "agents": [{"id": "b", "t": [0, 0], "x": [0, 1], "v": [0, 0],
                             "in_path": [True, True]}]}), "time-sorted"),
    (json.dumps({"id": "a", "v_max": 10, "goal": 100,
                 "agents": [{"id": "b", "t": [0], "x": [0, 1], "v": [0], "in_path": [True]}]}),
     "equal length"),
    (json.dumps({"id": "a", "v_max": 10, "goal": 100, "bogus": 1, "ego": {"v": -1}}), "ego.v"),
])
def test_scenario_validation_errors(raw, fragment):
    with pytest.raises(ScenarioError) as e:
        parse_scenario(raw, "f.json")
    assert fragment in str(e.value)


def test_light_schedule():
    light = TrafficLight(stop_line=50.0, schedule=(PhaseChange(t=0, phase="red"),
                                                   PhaseChange(t=5, phase="green")))
    assert light.phase_at(4.9) == "red" and light.phase_at(5.0) == "green"
    with pytest.raises(ValueError):
        TrafficLight(stop_line=1.0, schedule=())


# ---------------------------------------------------------------- playback

def test_step_world_interpolates_and_omits_absent_agents():
    tr = AgentTrace(id="a", t=(1.0, 2.0), x=(10.0, 20.0), v=(10.0, 10.0), in_path=(True, True))
    sc = scenario(agents=(tr,))
    assert step_world(sc, 0.5) == {}
    x, v, a, flag = step_world(sc, 1.5)["a"]
    assert x == pytest.approx(15.0) and v == 10.0 and flag
    with pytest.raises(ValueError):
        step_world(sc, 100.0)


def test_predictions_are_ground_truth_on_the_grid():
    sc = scenario(agents=(const_trace("a", 30.0, 5.0),))
    pred = predict(sc, 2.0)
    assert pred.n_steps == 16
    assert pred.in_path_at(1)[0][0] == pytest.approx(30.0 + 5.0 * 2.5)
    assert pred.in_path_at(16)[0][0] == pytest.approx(30.0 + 5.0 * 10.0)


def test_cut_in_absent_before_merge():
    sc = generate_scenario("cut-in", random.Random(1), "c")
    cut = next(a for a in sc.agents if a.id == "cutin")
    t_merge = cut.t[cut.in_path.index(True)]
    assert t_merge > 0.5
    assert not step_world(sc, 0.0)["cutin"][3]
    pred = predict(sc, 0.0)
    for step in range(1, 17):
        xc = step_world(sc, step * 0.5)["cutin"][0]
        present = any(abs(r[0] - xc) < 1e-9 for r in pred.in_path_at(step))
        assert present == (step * 0.5 >= t_merge - 1e-9)


def test_suite_is_deterministic_and_cycles_families():
    a = generate_scenario_suite(7, 12)
    b = generate_scenario_suite(7, 12)
    assert [dump_scenario(s) for s in a] == [dump_scenario(s) for s in b]
    assert [s.family for s in a[:6]] == list(FAMILIES)
    assert a[0].id == "no-lead-7-0000"
    assert generate_scenario_suite(7, 0) == []
    with pytest.raises(ValueError):
        generate_scenario_suite(7, 3, ["bogus"])


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000), fam=st.sampled_from(FAMILIES))
def test_generated_scenarios_start_collision_free(seed, fam):
    sc = generate_scenario(fam, random.Random(seed), "x")
    for ax, _v, _a, in_path in step_world(sc, 0.0).values():
        if in_path:
            assert ax - 4.0 > sc.ego.x
    assert sc.agents == () or all(a.t[-1] >= sc.duration + 8.0 - 1e-6 for a in sc.agents)


# ---------------------------------------------------------------- closed loop

def test_constant_speed_without_lead_moves_linearly():
    sc = scenario(ego=EgoInit(x=3.0, v=8.0, a=0.0))
    rlog = run_closed_loop(sc, make_planner("cs"), duration=5.0)
    assert len(rlog.ticks) == 50
    last = rlog.ticks[-1]
    assert last.x == pytest.approx(3.0 + 8.0 * last.t, abs=1e-9)
    assert all(tk.a == 0.0 for tk in rlog.ticks)


def test_mcts_stops_behind_stopped_lead():
    sc = scenario(ego=EgoInit(v=10.0), agents=(const_trace("lead", 34.0, 0.0),), duration=15.0)
    rlog = run_closed_loop(sc, make_planner("mcts", search_cfg=SearchConfig(n=200)))
    last = rlog.ticks[-1]
    assert last.v < 0.5
    assert all(tk.x < 30.0 for tk in rlog.ticks)


def test_expert_is_jerk_limited_and_stops_at_red():
    light = TrafficLight(stop_line=60.0, schedule=(PhaseChange(t=0, phase="red"),))
    sc = scenario(light=light, duration=20.0)
    ex = expert_oracle(sc)
    assert max(abs(tk.jerk) for tk in ex.ticks) <= EXPERT_JERK_LIMIT + 1e-9
    assert all(tk.x <= 60.0 + 1e-6 for tk in ex.ticks)
    assert ex.ticks[-1].v < 0.1


def test_playback_ignores_the_ego():
    sc = generate_scenario("lead-const", random.Random(2), "p")
    a = run_closed_loop(sc, make_planner("cs"), duration=5.0)
    b = run_closed_loop(sc, make_planner("idm"), duration=5.0)
    assert [tk.agents for tk in a.ticks] == [tk.agents for tk in b.ticks]


def test_closed_loop_state_is_continuous():
    sc = generate_scenario("stop-and-go", random.Random(4), "c", duration=10.0)
    rlog = run_closed_loop(sc, make_planner("mcts", search_cfg=SearchConfig(n=100)))
    for prev, cur in zip(rlog.ticks, rlog.ticks[1:]):
        assert cur.a == pytest.approx(prev.a + prev.jerk * 0.1, abs=1e-9)
        assert cur.v >= 0.0 and cur.x >= prev.x


def test_warmup_ticks_are_flagged():
    sc = scenario(warmup=2.0, duration=4.0)
    rlog = run_closed_loop(sc, make_planner("cs"))
    assert sum(tk.warmup for tk in rlog.ticks) == 20
    assert len(rlog.metric_ticks()) == 20


def test_planner_failure_truncates_log():
    class Boom:
        name = "boom"

        def plan(self, scene, tick):
            raise RuntimeError("nope")

    rlog = run_closed_loop(scenario(), Boom())
    assert rlog.ticks == [] and "nope" in rlog.failure


def test_log_round_trip_excludes_latency():
    rlog = run_closed_loop(scenario(duration=1.0), make_planner("idm"))
    text = rlog.to_jsonl()
    assert "latency" not in text
    back = RolloutLog.from_jsonl(text)
    assert back.to_jsonl() == text
    assert len(rlog.latencies) == 10


def test_duration_beyond_scenario_is_rejected():
    with pytest.raises(ValueError):
        run_closed_loop(scenario(duration=2.0), make_planner("cs"), duration=3.0)


def test_advance_tracks_jerk_segments_exactly():
    sc = scenario()
    planner = make_planner("mcts", search_cfg=SearchConfig(n=50))
    tr = planner.plan(build_scene(sc, 0.0, (0.0, 10.0, 0.0)), 0).trajectory
    x, v, a = 0.0, 10.0, 0.0
    for i in range(5):
        x, v, a, _, mode = advance(x, v, a, tr, i * 0.1)
    if tr.pad_start > 0:
        assert mode == "jerk"
        assert x == pytest.approx(tr.x[1], abs=1e-9)
        assert v == pytest.approx(tr.v[1], abs=1e-9)


def test_tick_seed_is_shared_across_planners():
    assert tick_seed(3, 10) == tick_seed(3, 10) != tick_seed(3, 11)


def test_make_planner_errors():
    with pytest.raises(ValueError):
        make_planner("tree-irl")
    with pytest.raises(ValueError):
        make_planner("mcts", rollout="bogus")
    assert make_planner("mcts").search_cfg.k == 1
    assert MdpConfig().n_steps == 16
