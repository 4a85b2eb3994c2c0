"""Monte Carlo tree search over jerk sequences, used as a trajectory generator.

The tree is the action-sequence tree of a deterministic MDP: a node is identified
by the jerk indices taken from the root, and stores the state reached, the
effective jerk and reward of the edge into it, and per-action N/Q statistics.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .mdp import (
    ACTIONS,
    NUM_ACTIONS,
    ContractViolation,
    Lead,
    LongState,
    MdpConfig,
    PredictionTable,
    Scene,
    init_state,
    reward,
    transition,
    transition_accel,
)
from . import _kernels
from .policies import (
    AccelPolicy,
    IdmPolicy,
    PriorPolicy,
    kernel_consts,
    make_rollout_evaluator,
    uniform_prior,
)

MAX_DEPTH = 16


@dataclass(frozen=True)
class SearchConfig:
    n: int = 400
    k: int = 100
    c_puct: float = 1.0
    q_max: float = 1.0
    epsilon_low: float = 0.0
    epsilon_high: float = 0.001
    rng_seed: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("iterations must be >= 0")
        if self.k < 1:
            raise ValueError("top-k must be >= 1")
        if self.c_puct <= 0:
            raise ValueError("c_puct must be positive")
        if self.q_max <= 0:
            raise ValueError("q_max must be positive")


@dataclass
class Policies:
    """Prior for selection, rollout policy for leaf evaluation, padding policy."""

    prior: PriorPolicy = uniform_prior
    rollout: AccelPolicy = field(default_factory=IdmPolicy)
    padding: AccelPolicy = field(default_factory=IdmPolicy)
    evaluator: str = "rollout"

    def __post_init__(self):
        if self.evaluator != "rollout":
            raise NotImplementedError(
                f"leaf evaluator {self.evaluator!r} needs a learned critic, which is not available")


class Node:
    __slots__ = ("state", "depth", "jerk", "effective_jerk", "reward", "prior",
                 "N", "Q", "children")

    def __init__(self, state: LongState, depth: int, prior: tuple[float, ...],
                 jerk: float = 0.0, effective_jerk: float = 0.0, reward: float = 0.0):
        self.state = state
        self.depth = depth
        self.jerk = jerk
        self.effective_jerk = effective_jerk
        self.reward = reward
        self.prior = prior
        self.N = [0] * NUM_ACTIONS
        self.Q = [0.0] * NUM_ACTIONS
        self.children: list[Node | None] = [None] * NUM_ACTIONS

    @property
    def visits(self) -> int:
        return sum(self.N)

    def is_leaf(self) -> bool:
        return not any(self.N)


class SearchTree:
    def __init__(self, root: Node):
        self.root = root
        self.iterations = 0

    def node(self, path: tuple[int, ...] = ()) -> Node:
        """Node reached by following action indices ``path`` from the root."""
        node = self.root
        for a in path:
            child = node.children[a]
            if child is None:
                raise KeyError(path)
            node = child
        return node

    def nodes(self) -> Iterator[tuple[tuple[int, ...], Node]]:
        stack = [((), self.root)]
        while stack:
            path, node = stack.pop()
            yield path, node
            for a in range(NUM_ACTIONS - 1, -1, -1):
                child = node.children[a]
                if child is not None:
                    stack.append((path + (a,), child))

    def most_visited_path(self) -> tuple[int, ...]:
        path: list[int] = []
        node = self.root
        while not node.is_leaf():
            a = _order_children(node)[0]
            path.append(a)
            node = node.children[a]
        return tuple(path)

    def best_root_action(self) -> int:
        return _order_children(self.root)[0]


def select_ucb(node: Node, cfg: SearchConfig, rng: random.Random,
               prior: tuple[float, ...] | None = None) -> int:
    """PUCT argmax with per-action uniform tie-breaking noise; returns an action index."""
    prior = node.prior if prior is None else prior
    N = node.N
    Q = node.Q
    total = N[0] + N[1] + N[2] + N[3] + N[4] + 1
    c = cfg.c_puct
    inv_q = 1.0 / cfg.q_max
    lo = cfg.epsilon_low
    span = cfg.epsilon_high - lo
    rand = rng.random
    best = -math.inf
    best_a = 0
    for a in range(NUM_ACTIONS):
        u = Q[a] * inv_q + c * prior[a] * math.sqrt(total / (N[a] + 1)) + lo + span * rand()
        if u > best:
            best = u
            best_a = a
    return best_a


def search(root: LongState, pred: PredictionTable, mdp_cfg: MdpConfig,
           search_cfg: SearchConfig, policies: Policies | None = None) -> SearchTree:
    if root.t >= mdp_cfg.horizon - 1e-9:
        raise ContractViolation("search from a terminal state")
    policies = policies or Policies()
    rng = random.Random(search_cfg.rng_seed)
    prior_fn = policies.prior
    evaluate = make_rollout_evaluator(policies.rollout, pred, mdp_cfg)
    gamma = mdp_cfg.gamma
    horizon = mdp_cfg.horizon - 1e-9
    tree = SearchTree(Node(root, 0, tuple(prior_fn(root))))
    path: list[tuple[Node, int]] = []
    for _ in range(search_cfg.n):
        path.clear()
        node = tree.root
        v = 0.0
        while True:
            if node.state.t >= horizon:
                v = 0.0
                break
            a = select_ucb(node, search_cfg, rng)
            path.append((node, a))
            if node.N[a] == 0:
                s = node.state
                s_next, j_eff = transition(s, ACTIONS[a], pred, mdp_cfg)
                r = reward(s, ACTIONS[a], s_next, j_eff, mdp_cfg)
                child = Node(s_next, node.depth + 1,
                             tuple(prior_fn(s_next)) if s_next.t < horizon else node.prior,
                             ACTIONS[a], j_eff, r)
                node.children[a] = child
                v = 0.0 if s_next.t >= horizon else evaluate(s_next)
                break
            node = node.children[a]
        for parent, a in reversed(path):
            q = parent.children[a].reward + gamma * v
            n = parent.N[a] + 1
            parent.N[a] = n
            parent.Q[a] += (q - parent.Q[a]) / n
            v = q
        tree.iterations += 1
    return tree


def _order_children(node: Node) -> list[int]:
    return sorted((a for a in range(NUM_ACTIONS) if node.N[a] > 0),
                  key=lambda a: (-node.N[a], a))


def top_k_leaves(tree: SearchTree, k: int) -> list[tuple[int, ...]]:
    """First ``k`` leaves of a DFS visiting children by decreasing visit count."""
    leaves: list[tuple[int, ...]] = []
    stack: list[tuple[tuple[int, ...], Node]] = [((), tree.root)]
    while stack and len(leaves) < k:
        path, node = stack.pop()
        order = _order_children(node)
        if not order:
            leaves.append(path)
            continue
        for a in reversed(order):
            stack.append((path + (a,), node.children[a]))
    return leaves


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Full-horizon plan on the MDP grid.

    Index ``j`` is time ``t0 + j*dt``; ``jerks[j]``/``effective_jerks[j]`` drive
    step j -> j+1. Steps before ``pad_start`` follow tree jerk actions, later
    steps hold the padding policy's acceleration constant. ``lead_x`` is the
    lead's rear offset (NaN without a lead).
    """

    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    jerks: np.ndarray
    effective_jerks: np.ndarray
    lead_x: np.ndarray
    lead_v: np.ndarray
    x_max: float
    v_max: float
    pad_start: int
    path: tuple[int, ...] = ()
    t0: float = 0.0
    dt: float = 0.5

    def __len__(self) -> int:
        return len(self.x)

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.x))

    @property
    def states(self) -> tuple[LongState, ...]:
        out = []
        for j in range(len(self.x)):
            lead = None
            if not math.isnan(self.lead_x[j]):
                lead = Lead(float(self.lead_x[j]), float(self.lead_v[j]), 0.0)
            out.append(LongState(float(self.x[j]), float(self.v[j]), float(self.a[j]), lead,
                                 self.t0 + j * self.dt, self.x_max, self.v_max))
        return tuple(out)

    def to_dict(self) -> dict:
        def arr(a):
            return [None if math.isnan(v) else float(v) for v in a]

        return {"x": arr(self.x), "v": arr(self.v), "a": arr(self.a), "jerks": arr(self.jerks),
                "effective_jerks": arr(self.effective_jerks), "lead_x": arr(self.lead_x),
                "lead_v": arr(self.lead_v), "x_max": self.x_max, "v_max": self.v_max,
                "pad_start": self.pad_start, "path": list(self.path), "t0": self.t0, "dt": self.dt}

    def same_as(self, other: Trajectory) -> bool:
        return self.to_dict() == other.to_dict()


def pad_trajectory(tree: SearchTree, leaf_path: tuple[int, ...], padding: AccelPolicy,
                   pred: PredictionTable, cfg: MdpConfig) -> Trajectory:
    """Tree prefix along ``leaf_path`` followed by ``padding`` until the horizon."""
    if len(leaf_path) > MAX_DEPTH:
        raise ContractViolation("leaf deeper than the horizon")
    root = tree.root.state
    n = int(round((cfg.horizon - root.t) / cfg.dt)) + 1
    xs = np.empty(n)
    vs = np.empty(n)
    accs = np.empty(n)
    jerks = np.empty(n - 1)
    eff = np.empty(n - 1)
    lead_x = np.full(n, np.nan)
    lead_v = np.full(n, np.nan)
    node = tree.root
    j = 0
    _store(node.state, j, xs, vs, accs, lead_x, lead_v)
    for a in leaf_path:
        node = node.children[a]
        jerks[j] = node.jerk
        eff[j] = node.effective_jerk
        j += 1
        _store(node.state, j, xs, vs, accs, lead_x, lead_v)
    start = j
    if start < n - 1:
        consts = kernel_consts(padding, cfg)
        if consts is not None:
            rows_x, rows_v, counts = pred.packed()
            _kernels.pad(xs, vs, accs, eff, lead_x, lead_v, start, node.state.t,
                         root.x_max, root.v_max, rows_x, rows_v, counts, consts)
        else:
            s = node.state
            while j < n - 1:
                s, je = transition_accel(s, padding(s), pred, cfg)
                eff[j] = je
                j += 1
                _store(s, j, xs, vs, accs, lead_x, lead_v)
        jerks[start:] = eff[start:]
    return Trajectory(xs, vs, accs, jerks, eff, lead_x, lead_v, root.x_max, root.v_max,
                      start, tuple(leaf_path), root.t, cfg.dt)


def _store(s: LongState, j: int, xs, vs, accs, lead_x, lead_v) -> None:
    xs[j] = s.x_ego
    vs[j] = s.v_ego
    accs[j] = s.a_ego
    if s.lead is not None:
        lead_x[j] = s.lead.x
        lead_v[j] = s.lead.v


def generate_from_state(root: LongState, pred: PredictionTable, mdp_cfg: MdpConfig,
                        search_cfg: SearchConfig, policies: Policies | None = None,
                        ) -> tuple[list[Trajectory], SearchTree]:
    policies = policies or Policies()
    tree = search(root, pred, mdp_cfg, search_cfg, policies)
    trajs = [pad_trajectory(tree, p, policies.padding, pred, mdp_cfg)
             for p in top_k_leaves(tree, search_cfg.k)]
    return trajs, tree


def generate(scene: Scene, mdp_cfg: MdpConfig, search_cfg: SearchConfig,
             policies: Policies | None = None) -> list[Trajectory]:
    """Candidate trajectories for a scene: init state, search, top-k leaves, padding."""
    root = init_state(scene, mdp_cfg)
    trajs, _ = generate_from_state(root, scene.predictions, mdp_cfg, search_cfg, policies)
    return trajs
