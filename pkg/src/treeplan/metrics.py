"""Closed-loop metrics over rollout logs, aggregation, latency statistics and CSV export."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .sim import RolloutLog, Tick

CAR_LENGTH = 4.0
MOVING_SPEED = 0.01
SPEED_LIMIT_SLACK = 0.1
TIME_GAP_SPEED_FLOOR = 0.1
ONSET_ACCEL = 0.5
ONSET_HOLD = 0.3
PROGRESS_FLOOR = 0.1


@dataclass(frozen=True)
class ComfortBounds:
    accel_min: float = -4.05
    accel_max: float = 2.40
    jerk_abs: float = 4.13


@dataclass
class MetricsRow:
    scenario_id: str
    planner: str
    n_ticks: int
    failed: bool
    front_collisions: int
    rear_collisions: int
    speed_violation: float
    min_time_gap: float  # inf when no lead was ever present
    light_violations: int
    min_jerk: float
    max_jerk: float
    min_accel: float
    max_accel: float
    max_abs_jerk: float
    comfortable: bool
    progress_ratio: float | None = None
    l2_error: float | None = None
    decel_delay: float | None = None
    accel_delay: float | None = None
    max_speed_error: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_FIELDS = tuple(f.name for f in fields(MetricsRow))


def _overlaps(x_ego: float, x_agent: float, length: float) -> bool:
    # Both cars occupy [front - length, front].
    return abs(x_agent - x_ego) < length


def count_collisions(ticks: Sequence[Tick], length: float = CAR_LENGTH) -> tuple[int, int]:
    """(front, rear) collision counts; each agent counts at most once per kind.

    Front: the ego front reaches into an agent ahead while the ego is moving.
    Rear: an agent behind reaches into the ego rear.
    """
    front: set[str] = set()
    rear: set[str] = set()
    for tk in ticks:
        for aid, (ax, _av, _aa, in_path) in tk.agents.items():
            if not in_path or not _overlaps(tk.x, ax, length):
                continue
            if ax >= tk.x:
                if tk.v > MOVING_SPEED:
                    front.add(aid)
            else:
                rear.add(aid)
    return len(front), len(rear)


def min_time_gap(ticks: Sequence[Tick], length: float = CAR_LENGTH) -> float:
    best = math.inf
    for tk in ticks:
        gaps = [ax - length - tk.x for ax, _v, _a, in_path in tk.agents.values()
                if in_path and ax > tk.x]
        if gaps:
            best = min(best, max(min(gaps), 0.0) / max(tk.v, TIME_GAP_SPEED_FLOOR))
    return best


def light_violations(ticks: Sequence[Tick], stop_line: float | None) -> int:
    """Stop-line crossings by the ego front during red."""
    if stop_line is None:
        return 0
    count = 0
    for prev, cur in zip(ticks, ticks[1:]):
        if prev.light == "red" and prev.x < stop_line <= cur.x:
            count += 1
    return count


def onset_time(ticks: Sequence[Tick], sign: float, threshold: float = ONSET_ACCEL,
               hold: float = ONSET_HOLD, dt: float = 0.1) -> float | None:
    """First tick time from which sign*accel > threshold holds for ``hold`` seconds."""
    need = max(1, int(round(hold / dt)))
    run = 0
    for i, tk in enumerate(ticks):
        if sign * tk.a > threshold:
            run += 1
            if run == need:
                return ticks[i - need + 1].t
        else:
            run = 0
    return None


def _delay(ego: float | None, expert: float | None) -> float | None:
    if ego is None and expert is None:
        return 0.0
    if ego is None or expert is None:
        return None
    return ego - expert


def compute_metrics(log: RolloutLog, expert: RolloutLog | None = None,
                    bounds: ComfortBounds = ComfortBounds(),
                    length: float = CAR_LENGTH) -> MetricsRow:
    ticks = log.metric_ticks()
    front, rear = count_collisions(ticks, length)
    jerks = [tk.jerk for tk in ticks] or [0.0]
    accels = [tk.a for tk in ticks] or [0.0]
    comfortable = (min(accels) >= bounds.accel_min and max(accels) <= bounds.accel_max
                   and max(abs(j) for j in jerks) <= bounds.jerk_abs)
    row = MetricsRow(
        scenario_id=log.scenario_id,
        planner=log.planner,
        n_ticks=len(ticks),
        failed=log.failure is not None,
        front_collisions=front,
        rear_collisions=rear,
        speed_violation=(sum(tk.v > log.v_max + SPEED_LIMIT_SLACK for tk in ticks) / len(ticks)
                         if ticks else 0.0),
        min_time_gap=min_time_gap(ticks, length),
        light_violations=light_violations(log.ticks, log.stop_line),
        min_jerk=min(jerks),
        max_jerk=max(jerks),
        min_accel=min(accels),
        max_accel=max(accels),
        max_abs_jerk=max(abs(j) for j in jerks),
        comfortable=comfortable,
    )
    if expert is None or not ticks:
        return row

    by_t = {round(tk.t, 6): tk for tk in expert.ticks}
    pairs = [(tk, by_t[round(tk.t, 6)]) for tk in ticks if round(tk.t, 6) in by_t]
    if not pairs:
        return row
    ego_dist = pairs[-1][0].x - pairs[0][0].x
    exp_dist = pairs[-1][1].x - pairs[0][1].x
    if exp_dist < PROGRESS_FLOOR and ego_dist < PROGRESS_FLOOR:
        row.progress_ratio = 1.0
    else:
        row.progress_ratio = max(ego_dist, 0.0) / max(exp_dist, PROGRESS_FLOOR)
    row.l2_error = sum(abs(e.x - x.x) for e, x in pairs) / len(pairs)
    ego_ticks = [e for e, _ in pairs]
    exp_ticks = [x for _, x in pairs]
    row.decel_delay = _delay(onset_time(ego_ticks, -1.0), onset_time(exp_ticks, -1.0))
    row.accel_delay = _delay(onset_time(ego_ticks, 1.0), onset_time(exp_ticks, 1.0))
    v_ref = max(max(x.v for x in exp_ticks), TIME_GAP_SPEED_FLOOR)
    row.max_speed_error = max(abs(e.v - x.v) for e, x in pairs) / v_ref
    return row


def aggregate(rows: Sequence[MetricsRow]) -> dict[str, float | int | str]:
    """Per-metric means over scenarios; flags become rates, counts become per-scenario rates.

    Undefined (None) and infinite entries are skipped; ``<name>_n`` is not reported.
    """
    if not rows:
        raise ValueError("cannot aggregate an empty set of rows")
    planners = sorted({r.planner for r in rows})
    out: dict[str, float | int | str] = {"planner": ",".join(planners), "n_scenarios": len(rows)}
    for name in METRIC_FIELDS:
        if name in ("scenario_id", "planner"):
            continue
        vals = [getattr(r, name) for r in rows]
        vals = [float(v) for v in vals if v is not None and math.isfinite(float(v))]
        out[name] = sum(vals) / len(vals) if vals else math.nan
    return out


def aggregate_by_planner(rows: Iterable[MetricsRow]) -> list[dict]:
    groups: dict[str, list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault(r.planner, []).append(r)
    return [aggregate(groups[p]) for p in sorted(groups)]


@dataclass(frozen=True)
class LatencyStats:
    max: float
    p9999: float
    p99: float
    p50: float
    mean: float
    sd: float
    n: int


def nearest_rank(sorted_samples: Sequence[float], pct: float) -> float:
    n = len(sorted_samples)
    rank = max(1, math.ceil(pct / 100.0 * n - 1e-9))
    return sorted_samples[min(rank, n) - 1]


def latency_stats(samples_ms: Sequence[float]) -> LatencyStats:
    if not len(samples_ms):
        raise ValueError("no latency samples")
    xs = sorted(float(s) for s in samples_ms)
    if xs[0] <= 0:
        raise ValueError("latency samples must be positive")
    n = len(xs)
    mean = math.fsum(xs) / n
    sd = math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / n)
    return LatencyStats(max=xs[-1], p9999=nearest_rank(xs, 99.99), p99=nearest_rank(xs, 99),
                        p50=nearest_rank(xs, 50), mean=mean, sd=sd, n=n)


def format_latency_table(stats: Mapping[str, LatencyStats]) -> str:
    """Max/P99.99/P99/P50/Average rows (ms), one column per configuration."""
    names = list(stats)
    width = max([18] + [len(n) + 2 for n in names])
    lines = ["Latency (ms)".ljust(14) + "".join(n.rjust(width) for n in names)]
    for label, attr in (("Max", "max"), ("P99.99", "p9999"), ("P99", "p99"),
                        ("P50", "p50"), ("Average", "mean")):
        lines.append(label.ljust(14) + "".join(f"{getattr(stats[n], attr):{width}.2f}" for n in names))
    lines.append("mean ± sd".ljust(14) + "".join(
        f"{stats[n].mean:.2f} ± {stats[n].sd:.2f}".rjust(width) for n in names))
    lines.append("samples".ljust(14) + "".join(str(stats[n].n).rjust(width) for n in names))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(table: Sequence[Mapping], path: str | Path,
             fieldnames: Sequence[str] | None = None) -> None:
    """Write rows as CSV with a header; an empty table gives the header only."""
    if fieldnames is None:
        fieldnames = list(table[0]) if table else list(METRIC_FIELDS)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(fieldnames)
        for row in table:
            w.writerow([_cell(row.get(k)) for k in fieldnames])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
