"""Linear max-ent IRL trajectory scorer trained with a focal softmax loss."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mcts import Trajectory
from .mdp import PredictionTable

FEATURE_NAMES = (
    "mean_abs_jerk",
    "mean_abs_accel",
    "mean_abs_speed_error",
    "progress",
    "min_lead_gap",
    "clearance_violation",
    "stop_distance_error",
    "overspeed_fraction",
)
NO_LEAD_GAP = 1e6
MODEL_FORMAT = "treeplan-score-model"


class SampleDropped(Exception):
    """Every candidate collides with a predicted agent; the sample carries no label."""


class TrainingError(RuntimeError):
    pass


class InsufficientData(TrainingError):
    """Fewer usable samples than the trainer requires."""


def extract_features_batch(trajs: Sequence[Trajectory], delta: float = 2.0) -> np.ndarray:
    """Feature matrix (len(trajs), 8) for candidates sharing one time grid."""
    if not trajs:
        return np.zeros((0, len(FEATURE_NAMES)))
    X = np.stack([t.x for t in trajs])
    V = np.stack([t.v for t in trajs])
    A = np.stack([t.a for t in trajs])
    J = np.stack([t.effective_jerks for t in trajs])
    LX = np.stack([t.lead_x for t in trajs])
    x_max = np.array([t.x_max for t in trajs])[:, None]
    v_max = np.array([t.v_max for t in trajs])[:, None]
    dt = trajs[0].dt
    n = J.shape[1]

    mean_jerk = np.abs(J).sum(axis=1) / n
    mean_accel = np.abs(A[:, 1:]).sum(axis=1) / n
    mean_speed_err = np.abs(V[:, 1:] - v_max).sum(axis=1) / n
    progress = X[:, -1] - X[:, 0]
    gaps = LX[:, 1:] - X[:, 1:]
    has_lead = ~np.isnan(gaps)
    min_gap = np.where(has_lead, gaps, NO_LEAD_GAP).min(axis=1)
    lead_short = np.where(has_lead, np.maximum(delta - np.where(has_lead, gaps, delta), 0.0), 0.0)
    line_short = np.maximum(delta - (x_max - X[:, 1:]), 0.0)
    clearance = (lead_short + line_short).sum(axis=1) * dt
    end_gap = LX[:, -1] - X[:, -1]
    ahead = np.minimum(x_max[:, 0] - X[:, -1], np.where(np.isnan(end_gap), np.inf, end_gap))
    stop_err = np.where((V[:, -1] < 0.1) & (ahead < 50.0), np.abs(ahead - delta), 0.0)
    overspeed = (V[:, 1:] > v_max).sum(axis=1) / n
    return np.column_stack([mean_jerk, mean_accel, mean_speed_err, progress, min_gap,
                            clearance, stop_err, overspeed])


def extract_features(traj: Trajectory, delta: float = 2.0) -> np.ndarray:
    return extract_features_batch([traj], delta)[0]


@dataclass
class ScoreModel:
    weights: np.ndarray
    bias: float = 0.0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(len(FEATURE_NAMES)))
    scale: np.ndarray = field(default_factory=lambda: np.ones(len(FEATURE_NAMES)))
    clip_hi: np.ndarray = field(default_factory=lambda: np.full(len(FEATURE_NAMES), np.inf))
    feature_names: tuple[str, ...] = FEATURE_NAMES
    gamma_focal: float = 2.0
    decay: float = 0.9
    velocity_weight: float = 5.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.mean = np.asarray(self.mean, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        self.clip_hi = np.asarray(self.clip_hi, dtype=float)
        d = len(self.feature_names)
        for name in ("weights", "mean", "scale", "clip_hi"):
            if getattr(self, name).shape != (d,):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected ({d},)")
        if np.any(self.scale <= 0):
            raise ValueError("normalization scales must be positive")

    @property
    def dim(self) -> int:
        return len(self.feature_names)

    def normalize(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats, dtype=float)
        if feats.shape[-1] != self.dim:
            raise ValueError(f"feature dimension {feats.shape[-1]} != model dimension {self.dim}")
        return (np.minimum(feats, self.clip_hi) - self.mean) / self.scale

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dump_model(self), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ScoreModel:
        return parse_model(Path(path).read_text(encoding="utf-8"))


def passthrough_model() -> ScoreModel:
    """All-zero weights: every candidate scores the same, so the first one wins."""
    return ScoreModel(weights=np.zeros(len(FEATURE_NAMES)))


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def dump_model(model: ScoreModel) -> str:
    lines = [
        f"# trajectory score model: z = weights . (min(f, clip_hi) - mean) / scale + bias",
        f"format = {MODEL_FORMAT}",
        "version = 1",
        f"features = {','.join(model.feature_names)}",
        f"weights = {_floats(model.weights)}",
        f"bias = {float(model.bias)!r}",
        f"mean = {_floats(model.mean)}",
        f"scale = {_floats(model.scale)}",
        f"clip_hi = {_floats(model.clip_hi)}",
        f"gamma_focal = {float(model.gamma_focal)!r}",
        f"decay = {float(model.decay)!r}",
        f"velocity_weight = {float(model.velocity_weight)!r}",
    ]
    return "\n".join(lines) + "\n"


def parse_model(text: str) -> ScoreModel:
    kv: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"model line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    if kv.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a score model file (format={kv.get('format')!r})")
    try:
        vec = lambda k: [float(v) for v in kv[k].split(",")]  # noqa: E731
        return ScoreModel(
            weights=vec("weights"), bias=float(kv["bias"]), mean=vec("mean"),
            scale=vec("scale"), clip_hi=vec("clip_hi"),
            feature_names=tuple(kv["features"].split(",")),
            gamma_focal=float(kv["gamma_focal"]), decay=float(kv["decay"]),
            velocity_weight=float(kv["velocity_weight"]),
        )
    except KeyError as e:
        raise ValueError(f"model file missing key {e}") from e


def score_features(feats: np.ndarray, model: ScoreModel) -> np.ndarray:
    return model.normalize(feats) @ model.weights + model.bias


def score(trajs: Sequence[Trajectory], model: ScoreModel, delta: float = 2.0) -> list[float]:
    if not trajs:
        return []
    return [float(z) for z in score_features(extract_features_batch(trajs, delta), model)]


def select_best(trajs: Sequence, scores: Sequence[float]) -> int:
    """Index of the highest score; the lowest index wins ties."""
    if not len(trajs):
        raise ValueError("no candidates to select from")
    if len(scores) != len(trajs):
        raise ValueError("one score per candidate required")
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best


def in_collision(xs: Sequence[float], pred: PredictionTable, length: float = 4.0) -> bool:
    """Does a plan (offsets at t = 0, dt, ...) overlap any in-path predicted agent?"""
    for j in range(1, min(len(xs) - 1, pred.n_steps) + 1):
        x = xs[j]
        for ax, _v, _a in pred.in_path_at(j):
            if ax - length <= x <= ax:
                return True
    return False


def expert_distance(xs, vs, expert_x, expert_v, decay: float = 0.9,
                    velocity_weight: float = 5.0) -> float:
    total = 0.0
    w = 1.0
    for x, v, xe, ve in zip(xs, vs, expert_x, expert_v):
        total += w * ((x - xe) ** 2 + velocity_weight * (v - ve) ** 2)
        w *= decay
    return total


def label_expert_nearest(candidates: Sequence[Trajectory], expert_x: Sequence[float],
                         expert_v: Sequence[float], pred: PredictionTable | None = None,
                         decay: float = 0.9, velocity_weight: float = 5.0,
                         length: float = 4.0, expert_a: Sequence[float] | None = None) -> int:
    """Index of the non-colliding candidate closest to the expert (decayed, speed-weighted L2).

    Exact distance ties (common when the speed floor makes plans coincide in x and v)
    go to the candidate whose acceleration profile is closest to ``expert_a`` when
    given, then to the lowest index.
    """
    if not candidates:
        raise ValueError("no candidates")
    keep = [i for i, c in enumerate(candidates)
            if pred is None or not in_collision(c.x, pred, length)]
    if not keep:
        raise SampleDropped("all candidates collide with predicted agents")
    dist = [expert_distance(candidates[i].x, candidates[i].v, expert_x, expert_v, decay,
                            velocity_weight) for i in keep]
    best_d = min(dist)
    tied = [i for i, d in zip(keep, dist) if d <= best_d * (1.0 + 1e-9) + 1e-12]
    if len(tied) == 1 or expert_a is None:
        return tied[0]
    w = decay ** np.arange(len(expert_a))
    ea = np.asarray(expert_a, dtype=float)
    acc_d = [float(np.sum(w * (candidates[i].a[:len(ea)] - ea) ** 2)) for i in tied]
    return tied[int(np.argmin(acc_d))]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(z, dtype=float)))


def _dloss_dz_label(om, ps, lps, gamma):
    """(dL/dp) * p for the labelled candidate; the first term vanishes as p -> 1."""
    safe = np.where(om > 0, om, 1.0)
    first = np.where(om > 0, gamma * safe ** (gamma - 1.0) * lps * ps, 0.0)
    return first - om ** gamma


def focal_loss(scores, label: int, gamma_focal: float = 2.0) -> tuple[float, np.ndarray]:
    """Loss -(1 - p)^g log p of the labelled candidate and its gradient w.r.t. the scores."""
    z = np.asarray(scores, dtype=float)
    logp = _log_softmax(z)
    p = np.exp(logp)
    ps, lps = p[label], logp[label]
    one_minus = 1.0 - ps
    loss = -(one_minus ** gamma_focal) * lps
    onehot = np.zeros_like(z)
    onehot[label] = 1.0
    grad = float(_dloss_dz_label(np.asarray(one_minus), ps, lps, gamma_focal)) * (onehot - p)
    return float(max(loss, 0.0)), grad


@dataclass(frozen=True)
class TrainHyper:
    gamma_focal: float = 2.0
    learning_rate: float = 0.1
    epochs: int = 500
    seed: int = 0
    val_fraction: float = 0.2
    min_samples: int = 100
    decay: float = 0.9
    velocity_weight: float = 5.0


@dataclass
class TrainResult:
    model: ScoreModel
    train_loss: list[float]
    val_loss: list[float]
    train_idx: np.ndarray
    val_idx: np.ndarray


def _batch_loss(W, X, y, mask, gamma):
    """Mean focal loss and weight gradient over padded candidate sets."""
    z = X @ W
    z = np.where(mask, z, -np.inf)
    logp = _log_softmax(z)
    p = np.where(mask, np.exp(logp), 0.0)
    rows = np.arange(len(y))
    ps = p[rows, y]
    lps = logp[rows, y]
    om = 1.0 - ps
    losses = -(om ** gamma) * lps
    onehot = np.zeros_like(p)
    onehot[rows, y] = 1.0
    gz = _dloss_dz_label(om, ps, lps, gamma)[:, None] * (onehot - p)
    grad = np.einsum("nk,nkd->d", gz, X) / len(y)
    return float(np.mean(losses)), grad


def pad_features(samples: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    k = max(len(f) for f in samples)
    d = samples[0].shape[1]
    X = np.zeros((len(samples), k, d))
    mask = np.zeros((len(samples), k), dtype=bool)
    for i, f in enumerate(samples):
        X[i, :len(f)] = f
        mask[i, :len(f)] = True
    return X, mask


def fit_normalization(samples: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-feature (mean, scale, clip_hi) from training candidate sets.

    The softmax only sees differences inside a candidate set, so the scale is the
    pooled within-set standard deviation rather than the global one. Lead-free
    sentinels are clipped to the largest real value seen.
    """
    allf = np.concatenate(samples, axis=0)
    d = allf.shape[1]
    real = allf < NO_LEAD_GAP * 0.5
    clip_hi = np.full(d, np.inf)
    for j in range(d):
        if real[:, j].any() and not real[:, j].all():
            clip_hi[j] = float(allf[real[:, j], j].max())
    mean = np.zeros(d)
    scale = np.ones(d)
    ss = np.zeros(d)
    dof = 0
    for f in samples:
        c = np.minimum(f, clip_hi)
        ss += ((c - c.mean(axis=0)) ** 2).sum(axis=0)
        dof += len(c) - 1
    for j in range(d):
        if not real[:, j].any():
            continue
        mean[j] = float(np.minimum(allf[:, j], clip_hi[j]).mean())
        sd = math.sqrt(ss[j] / dof) if dof > 0 else 0.0
        scale[j] = sd if sd > 1e-9 else 1.0
    return mean, scale, clip_hi


def train(features: Sequence[np.ndarray], labels: Sequence[int],
          hyper: TrainHyper = TrainHyper(),
          feature_names: Sequence[str] = FEATURE_NAMES) -> TrainResult:
    """Full-batch gradient descent on the mean focal loss.

    ``features[i]`` is a (k_i, d) array of candidate features, ``labels[i]`` the
    expert-nearest index.
    """
    n = len(features)
    if n < hyper.min_samples:
        raise InsufficientData(f"need at least {hyper.min_samples} usable samples, got {n}")
    if len(labels) != n:
        raise ValueError("one label per sample required")
    rng = np.random.default_rng(hyper.seed)
    order = rng.permutation(n)
    n_val = int(round(n * hyper.val_fraction))
    val_idx = np.sort(order[:n_val])
    train_idx = np.sort(order[n_val:])
    tr = [np.asarray(features[i], dtype=float) for i in train_idx]
    mean, scale, clip_hi = fit_normalization(tr)
    model = ScoreModel(weights=rng.normal(0.0, 0.01, size=tr[0].shape[1]), mean=mean,
                       scale=scale, clip_hi=clip_hi, feature_names=tuple(feature_names),
                       gamma_focal=hyper.gamma_focal,
                       decay=hyper.decay, velocity_weight=hyper.velocity_weight)
    Xtr, mtr = pad_features([model.normalize(f) for f in tr])
    ytr = np.asarray([labels[i] for i in train_idx])
    if n_val:
        Xva, mva = pad_features([model.normalize(np.asarray(features[i], dtype=float)) for i in val_idx])
        yva = np.asarray([labels[i] for i in val_idx])
    W = model.weights.copy()
    train_curve, val_curve = [], []
    for epoch in range(hyper.epochs):
        loss, grad = _batch_loss(W, Xtr, ytr, mtr, hyper.gamma_focal)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite loss at epoch {epoch}: loss={loss}, |w|={np.linalg.norm(W)}")
        train_curve.append(loss)
        if n_val:
            val_curve.append(_batch_loss(W, Xva, yva, mva, hyper.gamma_focal)[0])
        W = W - hyper.learning_rate * grad
    model.weights = W
    if hyper.epochs:
        train_curve.append(_batch_loss(W, Xtr, ytr, mtr, hyper.gamma_focal)[0])
        if n_val:
            val_curve.append(_batch_loss(W, Xva, yva, mva, hyper.gamma_focal)[0])
    return TrainResult(model, train_curve, val_curve, train_idx, val_idx)


def topk_accuracy(model: ScoreModel, features: Sequence[np.ndarray], labels: Sequence[int],
                  k: int = 1) -> float:
    if not len(features):
        return 0.0
    hits = 0
    for f, y in zip(features, labels):
        z = score_features(np.asarray(f, dtype=float), model)
        # Stable sort keeps the lowest index first among ties, matching select_best.
        ranked = np.argsort(-z, kind="stable")[:k]
        hits += int(y in ranked)
    return hits / len(features)


# -- dataset persistence ------------------------------------------------------------

def save_dataset(path: str | Path, records: Sequence[dict]) -> None:
    """One JSON object per line: scenario, t, label, features (k x d), feature names."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            out = dict(rec)
            out["features"] = [[float(v) for v in row] for row in np.asarray(rec["features"])]
            fh.write(json.dumps(out, ensure_ascii=False) + "\n")


def load_dataset(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rec["features"] = np.asarray(rec["features"], dtype=float)
                out.append(rec)
    return out
