"""Run configuration (one JSON file, flags override) and the run manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .mcts import Policies, SearchConfig
from .mdp import MdpConfig, RewardWeights
from .policies import ConstantSpeedPolicy, IdmParams, IdmPolicy, uniform_prior
from .scorer import TrainHyper

MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WeightsSection(_Section):
    jerk: float = 0.05
    accel: float = 0.2
    speed: float = 0.1
    collision: float = 10.0
    clearance: float = 10.0
    stop: float = 0.1


class MdpSection(_Section):
    dt: float = 0.5
    horizon: float = 8.0
    gamma: float = 0.99
    accel_min: float = -7.0
    accel_max: float = 2.0
    alpha: float = 1.0 / 30.0
    delta: float = 2.0
    weights: WeightsSection = WeightsSection()
    stop_speed_epsilon: float = 0.1
    negate_stop_term: bool = False
    vehicle_length: float = 4.0


class SearchSection(_Section):
    iterations: int = Field(400, ge=0)
    top_k: int = Field(100, ge=1)
    c_puct: float = Field(1.0, gt=0)
    q_max: float = Field(1.0, gt=0)
    epsilon_low: float = 0.0
    epsilon_high: float = 0.001
    prior: Literal["uniform", "learned"] = "uniform"
    evaluator: Literal["rollout", "critic"] = "rollout"
    rollout: Literal["idm", "cs"] = "idm"
    padding: Literal["idm", "cs"] = "idm"

    @field_validator("prior")
    @classmethod
    def _no_learned_prior(cls, v):
        if v == "learned":
            raise ValueError("a learned prior needs a trained policy network, which is not shipped")
        return v

    @field_validator("evaluator")
    @classmethod
    def _no_critic(cls, v):
        if v == "critic":
            raise ValueError("critic leaf evaluation needs a trained value network, which is not shipped")
        return v


class IdmSection(_Section):
    v0: Optional[float] = None
    T: float = 1.5
    a_max: float = 2.0
    b: float = 2.0
    s0: float = 2.0
    exponent: float = 4.0


class SimSection(_Section):
    duration: Optional[float] = Field(None, gt=0)
    replan_hz: float = Field(10.0, gt=0)


class TrainSection(_Section):
    epochs: int = Field(500, ge=0)
    learning_rate: float = Field(0.1, gt=0)
    gamma_focal: float = Field(2.0, ge=0)
    val_fraction: float = Field(0.2, ge=0, lt=1)
    min_samples: int = Field(100, ge=1)
    decay: float = 0.9
    velocity_weight: float = 5.0
    sample_every: float = Field(1.0, gt=0)
    max_samples: Optional[int] = Field(None, ge=1)
    delta: float = 1.0


class RunConfig(_Section):
    mdp: MdpSection = MdpSection()
    search: SearchSection = SearchSection()
    idm: IdmSection = IdmSection()
    sim: SimSection = SimSection()
    train: TrainSection = TrainSection()

    def mdp_config(self, delta: float | None = None) -> MdpConfig:
        d = self.mdp.model_dump()
        d["weights"] = RewardWeights(**d["weights"])
        if delta is not None:
            d["delta"] = delta
        return MdpConfig(**d)

    def search_config(self, seed: int = 0) -> SearchConfig:
        s = self.search
        return SearchConfig(n=s.iterations, k=s.top_k, c_puct=s.c_puct, q_max=s.q_max,
                            epsilon_low=s.epsilon_low, epsilon_high=s.epsilon_high, rng_seed=seed)

    def idm_params(self) -> IdmParams:
        return IdmParams(**self.idm.model_dump())

    def policies(self) -> Policies:
        idm = IdmPolicy(self.idm_params())
        pick = {"idm": idm, "cs": ConstantSpeedPolicy()}
        return Policies(prior=uniform_prior, rollout=pick[self.search.rollout],
                        padding=pick[self.search.padding], evaluator=self.search.evaluator)

    def train_hyper(self, seed: int = 0) -> TrainHyper:
        t = self.train
        return TrainHyper(gamma_focal=t.gamma_focal, learning_rate=t.learning_rate,
                          epochs=t.epochs, seed=seed, val_fraction=t.val_fraction,
                          min_samples=t.min_samples, decay=t.decay,
                          velocity_weight=t.velocity_weight)

    def with_overrides(self, **sections: dict) -> RunConfig:
        """New config with ``None``-free per-section overrides applied."""
        data = self.model_dump()
        for name, values in sections.items():
            data[name].update({k: v for k, v in values.items() if v is not None})
        return validate_config(data)


def validate_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        msgs = [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]
        raise ConfigError("invalid configuration: " + "; ".join(msgs)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return validate_config(data)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunManifest(BaseModel):
    """Everything needed to re-run a command; written before any other output."""

    model_config = ConfigDict(extra="forbid")

    tool: str = "treeplan"
    version: str = __version__
    command: str
    planner: Optional[str] = None
    suite: Optional[str] = None
    seed: int = 0
    output: str
    model: Optional[str] = None
    model_sha256: Optional[str] = None
    options: dict = Field(default_factory=dict)
    config: RunConfig = RunConfig()

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=1, sort_keys=True) + "\n"

    def save(self, directory: str | Path) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def load_manifest(path: str | Path) -> RunManifest:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    try:
        return RunManifest.model_validate_json(p.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"{p}: not a valid run manifest ({e.error_count()} errors)") from None


def config_snapshot(cfg: RunConfig) -> dict:
    """Plain dict of the resolved dataclass configs, for human inspection."""
    return {"mdp": asdict(cfg.mdp_config()), "search": asdict(cfg.search_config()),
            "idm": asdict(cfg.idm_params())}
