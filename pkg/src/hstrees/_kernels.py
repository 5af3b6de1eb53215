"""Numba kernels for the event-driven hard-sphere flow.

All geometry is 64-bit floats.  Status codes and event kinds are shared
with dynamics.py; the wrappers there translate them into exceptions and
value objects.
"""
import numpy as np
from numba import njit

OK = 0
GRAZE = 1
NEAR_MULTIPLE = 2
EVENT_CAP = 3

KIND_NONE = -1
KIND_PAIR = 0
KIND_WALL = 1


@njit(cache=True)
def next_event_kernel(q, p, L, a, horizon, eps_graze, eps_time):
    """Earliest pair or wall contact strictly before `horizon`.

    Returns (status, t, kind, i, j).  For pair events j is the partner
    index; for wall events j encodes axis*2 + (0 for the low face, 1 for
    the high face).  Pair contacts solve |dq + dp t| = a with the
    approach condition; wall contacts are linear crossings of the a/2
    margin.  Two candidate times closer than eps_time, a candidate
    within eps_time of the horizon, or a grazing contact all yield a
    singular status.
    """
    n = q.shape[0]
    best = np.inf
    second = np.inf
    kind = KIND_NONE
    bi = -1
    bj = -1
    best_disc = 0.0
    best_v2 = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            b = 0.0
            v2 = 0.0
            c = 0.0
            for d in range(3):
                dq = q[i, d] - q[j, d]
                dp = p[i, d] - p[j, d]
                b += dq * dp
                v2 += dp * dp
                c += dq * dq
            c -= a * a
            if b >= 0.0 or v2 == 0.0:
                continue
            if c < 0.0:
                c = 0.0  # rounding at contact
            disc = b * b - v2 * c
            if disc <= 0.0:
                continue
            tc = c / (-b + np.sqrt(disc))
            if tc < best:
                second = best
                best = tc
                kind = KIND_PAIR
                bi = i
                bj = j
                best_disc = disc
                best_v2 = v2
            elif tc < second:
                second = tc
    half = 0.5 * a
    for i in range(n):
        for d in range(3):
            pd = p[i, d]
            if pd < 0.0:
                tc = (q[i, d] - half) / (-pd)
                face = 2 * d
            elif pd > 0.0:
                tc = (L[d] - half - q[i, d]) / pd
                face = 2 * d + 1
            else:
                continue
            if tc < 0.0:
                tc = 0.0
            if tc < best:
                second = best
                best = tc
                kind = KIND_WALL
                bi = i
                bj = face
            elif tc < second:
                second = tc
    if kind == KIND_NONE or best >= horizon:
        return OK, horizon, KIND_NONE, -1, -1
    if second - best < eps_time:
        return NEAR_MULTIPLE, best, kind, bi, bj
    if horizon - best < eps_time:
        return NEAR_MULTIPLE, best, kind, bi, bj
    if kind == KIND_PAIR:
        # normal relative speed at contact is sqrt(disc)/a
        if np.sqrt(best_disc) < eps_graze * np.sqrt(best_v2) * a:
            return GRAZE, best, kind, bi, bj
    else:
        d = bj // 2
        sp = 0.0
        for dd in range(3):
            sp += p[bi, dd] * p[bi, dd]
        if abs(p[bi, d]) < eps_graze * np.sqrt(sp):
            return GRAZE, best, kind, bi, bj
    return OK, best, kind, bi, bj


@njit(cache=True)
def advance_kernel(q, p, L, a, duration, eps_graze, eps_time, max_events,
                   ev_t, ev_kind, ev_i, ev_j, ev_w, fr_q, fr_p):
    """Run the event loop forward by `duration`, mutating q and p.

    Events and post-event snapshots are written into the provided
    buffers (ev_* of length >= max_events; fr_q/fr_p shaped
    (max_events, n, 3)).  Returns (status, n_events).
    """
    n = q.shape[0]
    half = 0.5 * a
    t_now = 0.0
    n_ev = 0
    while True:
        status, te, kind, i, j = next_event_kernel(
            q, p, L, a, duration - t_now, eps_graze, eps_time)
        if status != OK:
            return status, n_ev
        if kind == KIND_NONE:
            rem = duration - t_now
            for ii in range(n):
                for d in range(3):
                    q[ii, d] += p[ii, d] * rem
            return OK, n_ev
        if n_ev >= max_events:
            return EVENT_CAP, n_ev
        if n_ev > 0 and te < eps_time:
            return NEAR_MULTIPLE, n_ev
        for ii in range(n):
            for d in range(3):
                q[ii, d] += p[ii, d] * te
        t_abs = t_now + te
        if kind == KIND_PAIR:
            wx = q[i, 0] - q[j, 0]
            wy = q[i, 1] - q[j, 1]
            wz = q[i, 2] - q[j, 2]
            wn = np.sqrt(wx * wx + wy * wy + wz * wz)
            wx /= wn
            wy /= wn
            wz /= wn
            lam = (wx * (p[i, 0] - p[j, 0]) + wy * (p[i, 1] - p[j, 1])
                   + wz * (p[i, 2] - p[j, 2]))
            p[i, 0] -= lam * wx
            p[i, 1] -= lam * wy
            p[i, 2] -= lam * wz
            p[j, 0] += lam * wx
            p[j, 1] += lam * wy
            p[j, 2] += lam * wz
            ev_w[n_ev, 0] = wx
            ev_w[n_ev, 1] = wy
            ev_w[n_ev, 2] = wz
        else:
            d = j // 2
            if j % 2 == 0:
                q[i, d] = half
                sgn = 1.0
            else:
                q[i, d] = L[d] - half
                sgn = -1.0
            p[i, d] = -p[i, d]
            ev_w[n_ev, 0] = 0.0
            ev_w[n_ev, 1] = 0.0
            ev_w[n_ev, 2] = 0.0
            ev_w[n_ev, d] = sgn
        ev_t[n_ev] = t_abs
        ev_kind[n_ev] = kind
        ev_i[n_ev] = i
        ev_j[n_ev] = j
        for ii in range(n):
            for d in range(3):
                fr_q[n_ev, ii, d] = q[ii, d]
                fr_p[n_ev, ii, d] = p[ii, d]
        n_ev += 1
        t_now = t_abs
