from __future__ import annotations

import json

import numpy as np
import pytest

from treeplan.config import (ConfigError, RunConfig, RunManifest, load_config, load_manifest,
                             validate_config)
from treeplan.mcts import SearchConfig
from treeplan.scenario import generate_scenario_suite
from treeplan.scorer import TrainHyper
from treeplan.sim import expert_oracle
from treeplan.training import DatasetConfig, TRAIN_MDP, build_dataset, expert_future, fit_records


@pytest.fixture(scope="module")
def records():
    suite = generate_scenario_suite(4, 6, duration=12.0, warmup=2.0)
    recs, dropped = build_dataset(suite, TRAIN_MDP, SearchConfig(n=60, k=20))
    return recs, dropped


def test_expert_future_alignment():
    sc = generate_scenario_suite(1, 1)[0]
    ex = expert_oracle(sc)
    x, v, a = expert_future(ex.ticks, 10, 16, 5)
    assert len(x) == 17
    assert x[0] == ex.ticks[10].x and x[-1] == ex.ticks[90].x
    assert expert_future(ex.ticks, len(ex.ticks) - 3) is None


def test_dataset_records(records):
    recs, dropped = records
    assert len(recs) + dropped == 6 * 10
    for r in recs:
        f = np.asarray(r["features"])
        assert f.shape[1] == 8 and 2 <= len(f) <= 20
        assert 0 <= r["label"] < len(f)


def test_dataset_is_deterministic(records):
    suite = generate_scenario_suite(4, 6, duration=12.0, warmup=2.0)
    again, _ = build_dataset(suite, TRAIN_MDP, SearchConfig(n=60, k=20))
    assert [r["label"] for r in again] == [r["label"] for r in records[0]]


def test_fit_records_report(records):
    rep = fit_records(records[0], TrainHyper(epochs=50, min_samples=10))
    s = rep.summary()
    assert s["n_train"] + s["n_val"] == len(records[0])
    assert 0.0 <= s["val_top1"] <= s["val_top5"] <= 1.0
    assert s["final_train_loss"] <= rep.result.train_loss[0]


def test_dataset_config_defaults():
    assert DatasetConfig().sample_every == 1.0
    assert TRAIN_MDP.delta == 1.0


# ---------------------------------------------------------------- config

def test_defaults_resolve():
    cfg = RunConfig()
    assert cfg.mdp_config().delta == 2.0
    assert cfg.search_config(7) == SearchConfig(rng_seed=7)
    assert cfg.train_hyper().epochs == 500


@pytest.mark.parametrize("raw", [
    {"search": {"bogus": 1}},
    {"search": {"iterations": -1}},
    {"search": {"prior": "learned"}},
    {"search": {"evaluator": "critic"}},
    {"unknown": {}},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        validate_config(raw)


def test_overrides_ignore_none():
    cfg = RunConfig().with_overrides(search={"iterations": 10, "top_k": None})
    assert cfg.search.iterations == 10 and cfg.search.top_k == 100


def test_load_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"mdp": {"delta": 1.5}}))
    assert load_config(p).mdp_config().delta == 1.5
    assert load_config(None) == RunConfig()
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")


def test_manifest_round_trip(tmp_path):
    m = RunManifest(command="simulate", planner="mcts", suite="s", seed=3, output=str(tmp_path))
    m.save(tmp_path)
    back = load_manifest(tmp_path)
    assert back == m
    assert back.dumps() == m.dumps()
