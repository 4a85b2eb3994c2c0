"""Compiled inner loops for the search hot path.

Each kernel mirrors a pure-Python reference in ``mdp``/``policies`` operation
for operation; the test suite pins them together.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Layout of the ``consts`` vector shared by the kernels.
C_DT, C_HORIZON, C_GAMMA, C_LO, C_HI, C_LENGTH = 0, 1, 2, 3, 4, 5
C_WJERK, C_WACCEL, C_WSPEED, C_WCOLL, C_WCLEAR, C_WSTOP = 6, 7, 8, 9, 10, 11
C_DELTA, C_EPS, C_SIGN, C_NEG_ALPHA = 12, 13, 14, 15
C_MODE, C_T, C_AMAX, C_S0, C_EXPO, C_V0, C_TWO_SQRT_AB = 16, 17, 18, 19, 20, 21, 22
N_CONSTS = 23

ACCEL_MIN = -7.0
ACCEL_MAX = 2.0


@njit(cache=True)
def _cost(x, v, a, jerk, has_lead, lx, lv, x_max, v_max, c):
    total = c[C_WJERK] * jerk * jerk + c[C_WACCEL] * a * a
    speed_err = abs(v_max - v)
    total += c[C_WSPEED] * speed_err
    if speed_err < 0.5:
        total -= 2.0 * c[C_WSPEED]
    stopped = abs(v) < c[C_EPS]
    buffer = (v_max - 2.0 * v) * c[C_SIGN]
    delta = c[C_DELTA]
    if has_lead:
        gap = lx - x
        if x >= lx:
            dv = lv - v
            total += c[C_WCOLL] * dv * dv
        if 0.0 < gap < delta:
            total += c[C_WCLEAR] * (gap - delta) ** 2
        if stopped and delta <= gap < 3.0:
            total += c[C_WSTOP] * buffer
    to_stop = x_max - x
    if x >= x_max:
        total += c[C_WCOLL] * v * v
    if 0.0 < to_stop < delta:
        total += c[C_WCLEAR] * to_stop * to_stop
    if stopped and 0.0 <= to_stop < 2.0:
        total += c[C_WSTOP] * buffer
    return total


@njit(cache=True)
def _idm(x, v, has_lead, lx, lv, x_max, v_max, c):
    v0 = c[C_V0]
    if v0 <= 0.0:
        v0 = v_max
    if v0 > 0:
        free = 1.0 - (v / v0) ** c[C_EXPO]
    else:
        free = -1.0
    gap = x_max - x
    v_obs = 0.0
    if has_lead and lx - x < gap:
        gap = lx - x
        v_obs = lv
    if gap <= 0:
        return ACCEL_MIN
    s0 = c[C_S0]
    s_star = s0 + v * c[C_T] + v * (v - v_obs) / c[C_TWO_SQRT_AB]
    if s_star < s0:
        s_star = s0
    acc = c[C_AMAX] * (free - (s_star / gap) ** 2)
    if acc > ACCEL_MAX:
        return ACCEL_MAX
    if acc < ACCEL_MIN:
        return ACCEL_MIN
    return acc


@njit(cache=True)
def rollout(x, v, a, t, has_lead, lx, lv, x_max, v_max, rows_x, rows_v, counts, c):
    """Discounted return of the IDM (mode 1) or constant-speed (mode 0) policy."""
    dt = c[C_DT]
    horizon = c[C_HORIZON]
    gamma = c[C_GAMMA]
    length = c[C_LENGTH]
    neg_alpha = c[C_NEG_ALPHA]
    n_pred = counts.shape[0]
    total = 0.0
    discount = 1.0
    while t < horizon:
        if c[C_MODE] == 1.0:
            acc = _idm(x, v, has_lead, lx, lv, x_max, v_max, c)
        else:
            acc = 0.0
        a_next = min(max(acc, c[C_LO]), c[C_HI])
        v_next = v + a_next * dt
        if v_next < 0.0:
            v_next = 0.0
        x_next = x + v * dt + 0.5 * a_next * dt * dt
        if x_next < x:
            x_next = x
        t = t + dt
        jerk = (a_next - a) / dt
        x = x_next
        v = v_next
        a = a_next
        has_lead = False
        if n_pred > 0:
            step = int(round(t / dt)) - 1
            for i in range(counts[step]):
                if rows_x[step, i] > x:
                    has_lead = True
                    lx = rows_x[step, i] - length
                    lv = rows_v[step, i]
                    break
        total += discount * (neg_alpha * _cost(x, v, a, jerk, has_lead, lx, lv, x_max, v_max, c))
        discount *= gamma
    return total


def pack_rows(rows) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ragged per-step agent rows -> padded (steps, agents) arrays plus counts."""
    n = len(rows)
    width = max((len(r) for r in rows), default=0) or 1
    xs = np.zeros((n, width))
    vs = np.zeros((n, width))
    counts = np.zeros(n, dtype=np.int64)
    for j, row in enumerate(rows):
        counts[j] = len(row)
        for i, (x, v, _a) in enumerate(row):
            xs[j, i] = x
            vs[j, i] = v
    return xs, vs, counts


@njit(cache=True)
def pad(xs, vs, accs, jerks, lead_x, lead_v, start, t, x_max, v_max,
        rows_x, rows_v, counts, c):
    """Extend a trajectory in place from index ``start`` under the IDM/CS policy.

    ``lead_x``/``lead_v`` hold the lead's rear offset and speed, NaN when absent.
    """
    dt = c[C_DT]
    length = c[C_LENGTH]
    n_pred = counts.shape[0]
    n = xs.shape[0]
    for j in range(start, n - 1):
        x = xs[j]
        v = vs[j]
        a = accs[j]
        has_lead = not np.isnan(lead_x[j])
        if c[C_MODE] == 1.0:
            acc = _idm(x, v, has_lead, lead_x[j], lead_v[j], x_max, v_max, c)
        else:
            acc = 0.0
        a_next = min(max(acc, c[C_LO]), c[C_HI])
        v_next = v + a_next * dt
        if v_next < 0.0:
            v_next = 0.0
        x_next = x + v * dt + 0.5 * a_next * dt * dt
        if x_next < x:
            x_next = x
        t = t + dt
        xs[j + 1] = x_next
        vs[j + 1] = v_next
        accs[j + 1] = a_next
        jerks[j] = (a_next - a) / dt
        lead_x[j + 1] = np.nan
        lead_v[j + 1] = np.nan
        if n_pred > 0:
            step = int(round(t / dt)) - 1
            for i in range(counts[step]):
                if rows_x[step, i] > x_next:
                    lead_x[j + 1] = rows_x[step, i] - length
                    lead_v[j + 1] = rows_v[step, i]
                    break


_warm = False


def warm_up() -> None:
    """Load (or compile) every kernel once so the first timed call pays no JIT cost."""
    global _warm
    if _warm:
        return
    c = np.zeros(N_CONSTS)
    c[C_DT], c[C_HORIZON], c[C_GAMMA], c[C_LO], c[C_HI] = 0.5, 1.0, 0.99, ACCEL_MIN, ACCEL_MAX
    c[C_MODE], c[C_T], c[C_AMAX], c[C_S0], c[C_EXPO], c[C_TWO_SQRT_AB] = 1.0, 1.5, 2.0, 2.0, 4.0, 4.0
    rows_x, rows_v, counts = pack_rows([()])
    rollout(0.0, 1.0, 0.0, 0.0, False, 0.0, 0.0, 100.0, 10.0, rows_x, rows_v, counts, c)
    xs = np.zeros(3)
    nan = np.full(3, np.nan)
    pad(xs, xs.copy(), xs.copy(), np.zeros(2), nan, nan.copy(), 0, 0.0, 100.0, 10.0,
        rows_x, rows_v, counts, c)
    _warm = True
