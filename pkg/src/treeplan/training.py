"""Scorer training pipeline: expert drives -> MCTS candidate sets -> expert-nearest labels -> fit."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .mcts import Policies, SearchConfig, generate_from_state
from .mdp import MdpConfig, init_state
from .planners import tick_seed
from .scenario import Scenario, build_scene
from .scorer import (SampleDropped, TrainHyper, TrainResult, extract_features_batch,
                     label_expert_nearest, topk_accuracy, train)
from .sim import TICK, expert_oracle

log = logging.getLogger(__name__)

TRAIN_MDP = MdpConfig(delta=1.0)


@dataclass(frozen=True)
class DatasetConfig:
    sample_every: float = 1.0  # seconds between sampled expert states
    min_candidates: int = 2
    seed: int = 0


def expert_future(expert_ticks, i0: int, steps: int = 16, stride: int = 5):
    """Expert (x, v, a) on the plan grid t_i0 + 0.5 j, j = 0..steps; None if the log ends early."""
    last = i0 + steps * stride
    if last >= len(expert_ticks):
        return None
    sel = expert_ticks[i0:last + 1:stride]
    return (np.array([tk.x for tk in sel]), np.array([tk.v for tk in sel]),
            np.array([tk.a for tk in sel]))


def scenario_samples(scenario: Scenario, index: int, mdp_cfg: MdpConfig,
                     search_cfg: SearchConfig, policies: Policies,
                     cfg: DatasetConfig) -> tuple[list[dict], int]:
    """Labelled candidate sets along one expert drive, plus the count of dropped samples."""
    expert = expert_oracle(scenario)
    every = max(1, int(round(cfg.sample_every / TICK)))
    stride = int(round(mdp_cfg.dt / TICK))
    records, dropped = [], 0
    first = int(round(scenario.warmup / TICK))
    last = int(round(scenario.duration / TICK))
    for i in range(first, last, every):
        tk = expert.ticks[i]
        fut = expert_future(expert.ticks, i, mdp_cfg.n_steps, stride)
        if fut is None:
            break
        scene = build_scene(scenario, tk.t, (tk.x, tk.v, tk.a), mdp_cfg)
        root = init_state(scene, mdp_cfg)
        seed = tick_seed(cfg.seed, index * 100_000 + i)
        trajs, _ = generate_from_state(root, scene.predictions, mdp_cfg,
                                       replace(search_cfg, rng_seed=seed), policies)
        if len(trajs) < cfg.min_candidates:
            dropped += 1
            continue
        try:
            label = label_expert_nearest(trajs, fut[0], fut[1], scene.predictions,
                                         length=mdp_cfg.vehicle_length, expert_a=fut[2])
        except SampleDropped:
            dropped += 1
            continue
        records.append({"scenario": scenario.id, "t": tk.t, "label": label,
                        "features": extract_features_batch(trajs)})
    return records, dropped


def build_dataset(scenarios: Sequence[Scenario], mdp_cfg: MdpConfig = TRAIN_MDP,
                  search_cfg: SearchConfig = SearchConfig(), policies: Policies | None = None,
                  cfg: DatasetConfig = DatasetConfig()) -> tuple[list[dict], int]:
    policies = policies or Policies()
    records, dropped = [], 0
    for idx, sc in enumerate(scenarios):
        recs, d = scenario_samples(sc, idx, mdp_cfg, search_cfg, policies, cfg)
        records.extend(recs)
        dropped += d
    log.info("dataset: %d samples, %d dropped", len(records), dropped)
    return records, dropped


@dataclass
class TrainReport:
    result: TrainResult
    train_top1: float
    val_top1: float
    val_top5: float
    n_samples: int

    def summary(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_train": int(len(self.result.train_idx)),
            "n_val": int(len(self.result.val_idx)),
            "train_top1": self.train_top1,
            "val_top1": self.val_top1,
            "val_top5": self.val_top5,
            "final_train_loss": self.result.train_loss[-1] if self.result.train_loss else None,
            "final_val_loss": self.result.val_loss[-1] if self.result.val_loss else None,
        }


def fit_records(records: Sequence[dict], hyper: TrainHyper = TrainHyper()) -> TrainReport:
    feats = [np.asarray(r["features"], dtype=float) for r in records]
    labels = [int(r["label"]) for r in records]
    res = train(feats, labels, hyper)
    pick = lambda idx: ([feats[i] for i in idx], [labels[i] for i in idx])  # noqa: E731
    trf, trl = pick(res.train_idx)
    vaf, val = pick(res.val_idx)
    return TrainReport(res, topk_accuracy(res.model, trf, trl, 1),
                       topk_accuracy(res.model, vaf, val, 1),
                       topk_accuracy(res.model, vaf, val, 5), len(records))
