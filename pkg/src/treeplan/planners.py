"""Planner roster for closed-loop runs: idm, cs, mcts (k=1) and tree-irl."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import _kernels
from .mcts import Policies, SearchConfig, generate_from_state
from .mdp import MdpConfig, Scene, init_state
from .policies import ConstantSpeedPolicy, IdmParams, IdmPolicy
from .scorer import ScoreModel, extract_features_batch, score_features, select_best
from .sim import PlanResult

PLANNERS = ("idm", "cs", "mcts", "tree-irl")


def tick_seed(seed: int, tick: int) -> int:
    """Per-replan search seed; equal for every planner sharing a run seed."""
    return (seed * 1_000_003 + tick) & 0xFFFFFFFFFFFFFFFF


@dataclass
class SearchPlanner:
    """Generate candidates with the tree search, then pick one.

    With ``model=None`` the first candidate (most-visited leaf) is taken.
    """

    name: str
    mdp_cfg: MdpConfig = field(default_factory=MdpConfig)
    search_cfg: SearchConfig = field(default_factory=SearchConfig)
    policies: Policies = field(default_factory=Policies)
    model: ScoreModel | None = None
    seed: int = 0

    def plan(self, scene: Scene, tick: int = 0) -> PlanResult:
        root = init_state(scene, self.mdp_cfg)
        cfg = replace(self.search_cfg, rng_seed=tick_seed(self.seed, tick))
        trajs, _ = generate_from_state(root, scene.predictions, self.mdp_cfg, cfg, self.policies)
        if self.model is None:
            return PlanResult(trajs[0], 0, None, len(trajs))
        feats = extract_features_batch(trajs)
        scores = score_features(feats, self.model)
        best = select_best(trajs, list(scores))
        return PlanResult(trajs[best], best, float(scores[best]), len(trajs))


def make_planner(name: str, *, mdp_cfg: MdpConfig | None = None,
                 search_cfg: SearchConfig | None = None, idm: IdmParams | None = None,
                 rollout: str = "idm", padding: str = "idm",
                 model: ScoreModel | None = None, seed: int = 0) -> SearchPlanner:
    mdp_cfg = mdp_cfg or MdpConfig()
    search_cfg = search_cfg or SearchConfig()
    _kernels.warm_up()
    idm_policy = IdmPolicy(idm)

    def pick(kind: str):
        if kind == "idm":
            return idm_policy
        if kind == "cs":
            return ConstantSpeedPolicy()
        raise ValueError(f"unknown rollout/padding policy {kind!r}")

    if name == "idm":
        # Standalone IDM is the search with no iterations and IDM padding.
        return SearchPlanner(name, mdp_cfg, replace(search_cfg, n=0, k=1),
                             Policies(rollout=idm_policy, padding=idm_policy), seed=seed)
    if name == "cs":
        cs = ConstantSpeedPolicy()
        return SearchPlanner(name, mdp_cfg, replace(search_cfg, n=0, k=1),
                             Policies(rollout=cs, padding=cs), seed=seed)
    if name == "mcts":
        return SearchPlanner(name, mdp_cfg, replace(search_cfg, k=1),
                             Policies(rollout=pick(rollout), padding=pick(padding)), seed=seed)
    if name == "tree-irl":
        if model is None:
            raise ValueError("tree-irl needs a trained score model")
        return SearchPlanner(name, mdp_cfg, search_cfg,
                             Policies(rollout=pick(rollout), padding=pick(padding)),
                             model=model, seed=seed)
    raise ValueError(f"unknown planner {name!r}; choose from {', '.join(PLANNERS)}")
