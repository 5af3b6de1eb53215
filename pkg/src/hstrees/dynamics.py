"""Event-driven hard-sphere flow in a rectangular box with specular walls.

Particles are spheres of diameter `a` and unit mass.  Positions live in
[0, L] per axis with a wall margin of a/2 on each face.  The flow
free-streams between events and applies the elastic pair rule or the
specular wall rule at each contact.  Configurations that come too close
to a singular event (grazing contact, near-simultaneous events, runaway
event counts) are rejected via SingularSample rather than resolved.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._kernels import KIND_NONE, KIND_PAIR, KIND_WALL


class InvalidCollision(ValueError):
    """Collision rule applied to a non-incoming momentum pair."""


class SingularSample(Exception):
    """Trajectory hit a tolerance-rejected singular configuration."""

    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


_STATUS_REASON = {
    _kernels.GRAZE: "Graze",
    _kernels.NEAR_MULTIPLE: "NearMultiple",
    _kernels.EVENT_CAP: "EventCapExceeded",
}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with side lengths `lengths` and sphere diameter `a`."""

    lengths: tuple
    a: float

    def __post_init__(self):
        L = np.asarray(self.lengths, dtype=float)
        if L.shape != (3,) or not np.all(L > 0):
            raise ValueError("lengths must be three positive reals")
        if not 0 < self.a < L.min():
            raise ValueError("need 0 < a < min box side")
        object.__setattr__(self, "lengths", tuple(float(x) for x in L))

    @property
    def L(self):
        return np.array(self.lengths)


@dataclass(frozen=True)
class Tolerances:
    """Rejection thresholds for singular trajectories.

    eps_graze bounds the relative normal speed at a contact, eps_time is
    the minimum event separation as a fraction of the trajectory
    duration, max_events caps the number of events per call.
    """

    eps_graze: float = 1e-9
    eps_time: float = 1e-12
    max_events: int = 10000

    def __post_init__(self):
        if self.eps_graze <= 0 or self.eps_time <= 0 or self.max_events <= 0:
            raise ValueError("tolerances must be strictly positive")


@dataclass
class Configuration:
    """Ordered particle states: q and p are (n, 3) float arrays."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float)).copy()
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float)).copy()
        if self.q.shape != self.p.shape or self.q.shape[1] != 3:
            raise ValueError("q and p must both have shape (n, 3)")
        if not (np.isfinite(self.q).all() and np.isfinite(self.p).all()):
            raise ValueError("non-finite state")

    @property
    def n(self):
        return self.q.shape[0]

    def copy(self):
        return Configuration(self.q, self.p)


@dataclass(frozen=True)
class Event:
    """One event: a pair contact, a wall bounce, or the horizon.

    For pair events `omega` is the contact unit vector (q_i - q_j)/a and
    j is the partner.  For wall events `omega` is the inward face normal
    and j encodes the face as axis*2 + side.  kind "none" marks the
    horizon with i = j = -1.
    """

    time: float
    kind: str
    i: int
    j: int
    omega: tuple


@dataclass
class EventLog:
    events: list = field(default_factory=list)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, k):
        return self.events[k]

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("time,kind,i,j,wx,wy,wz\n")
            for e in self.events:
                f.write("%.17g,%s,%d,%d,%.17g,%.17g,%.17g\n"
                        % (e.time, e.kind, e.i, e.j, *e.omega))


def resolve_pair_collision(p_i, p_j, omega):
    """Elastic hard-sphere exchange of the normal momentum component.

    Requires an incoming pair, (p_i - p_j) . omega < 0.
    """
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    omega = np.asarray(omega, dtype=float)
    lam = omega @ (p_i - p_j)
    if lam >= 0:
        raise InvalidCollision("pair not incoming: omega . dp = %g" % lam)
    return p_i - lam * omega, p_j + lam * omega


def resolve_wall_collision(p_in, normal, tol=Tolerances()):
    """Specular reflection off a wall with inward unit normal."""
    p_in = np.asarray(p_in, dtype=float)
    normal = np.asarray(normal, dtype=float)
    comp = normal @ p_in
    if comp >= 0:
        raise InvalidCollision("not moving into wall: n . p = %g" % comp)
    if abs(comp) < tol.eps_graze * np.linalg.norm(p_in):
        raise SingularSample("Graze")
    return p_in - 2.0 * comp * normal


def _wall_normal(face):
    d, side = divmod(face, 2)
    nrm = np.zeros(3)
    nrm[d] = 1.0 if side == 0 else -1.0
    return nrm


def _event_from_kernel(t, kind, i, j, q=None, a=None):
    if kind == KIND_NONE:
        return Event(t, "none", -1, -1, (0.0, 0.0, 0.0))
    if kind == KIND_WALL:
        return Event(t, "wall", i, j, tuple(_wall_normal(j)))
    w = (q[i] - q[j]) / a
    return Event(t, "pair", i, j, tuple(w))


def next_event(c, box, horizon, tol=Tolerances()):
    """Earliest event of the configuration within `horizon`.

    Returns an Event; kind "none" if nothing happens before the horizon.
    Raises SingularSample on grazing or near-simultaneous contacts.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    eps_t = tol.eps_time * horizon
    status, t, kind, i, j = _kernels.next_event_kernel(
        c.q, c.p, box.L, box.a, horizon, tol.eps_graze, eps_t)
    if status != _kernels.OK:
        raise SingularSample(_STATUS_REASON[status])
    if kind == KIND_PAIR:
        qc = c.q + c.p * t
        return _event_from_kernel(t, kind, i, j, qc, box.a)
    return _event_from_kernel(t, kind, i, j)


def _advance_arrays(q, p, box, duration, tol):
    """In-place event loop on raw arrays.

    Returns (status, events, frames) where events is a list of Event
    with absolute times and frames is the list of post-event (q, p)
    snapshots.  status is a kernel code; callers translate.
    """
    n = q.shape[0]
    eps_t = tol.eps_time * duration if duration > 0 else tol.eps_time
    cap = min(64, tol.max_events)
    q0 = q.copy()
    p0 = p.copy()
    while True:
        ev_t = np.empty(cap)
        ev_kind = np.empty(cap, dtype=np.int64)
        ev_i = np.empty(cap, dtype=np.int64)
        ev_j = np.empty(cap, dtype=np.int64)
        ev_w = np.empty((cap, 3))
        fr_q = np.empty((cap, n, 3))
        fr_p = np.empty((cap, n, 3))
        status, n_ev = _kernels.advance_kernel(
            q, p, box.L, box.a, duration, tol.eps_graze, eps_t, cap,
            ev_t, ev_kind, ev_i, ev_j, ev_w, fr_q, fr_p)
        if status == _kernels.EVENT_CAP and cap < tol.max_events:
            cap = min(cap * 4, tol.max_events)
            q[:] = q0
            p[:] = p0
            continue
        break
    events = []
    frames = []
    for k in range(n_ev):
        kind = "pair" if ev_kind[k] == KIND_PAIR else "wall"
        events.append(Event(ev_t[k], kind, int(ev_i[k]), int(ev_j[k]),
                            tuple(ev_w[k])))
        frames.append((fr_q[k].copy(), fr_p[k].copy()))
    return status, events, frames


_SCRATCH = {}


def _flow_arrays(q, p, box, duration, tol):
    """Fast path: forward event loop mutating q and p in place.

    No event or frame collection; reuses scratch buffers keyed by cap.
    Returns a kernel status code.  Retries with larger buffers when the
    event count overflows, up to tol.max_events.
    """
    eps_t = tol.eps_time * duration if duration > 0 else tol.eps_time
    cap = min(128, tol.max_events)
    q0 = q.copy()
    p0 = p.copy()
    n = q.shape[0]
    while True:
        key = (cap, n)
        bufs = _SCRATCH.get(key)
        if bufs is None:
            bufs = (np.empty(cap), np.empty(cap, dtype=np.int64),
                    np.empty(cap, dtype=np.int64),
                    np.empty(cap, dtype=np.int64), np.empty((cap, 3)),
                    np.empty((cap, n, 3)), np.empty((cap, n, 3)))
            _SCRATCH[key] = bufs
        status, _ = _kernels.advance_kernel(
            q, p, box.L, box.a, duration, tol.eps_graze, eps_t, cap, *bufs)
        if status == _kernels.EVENT_CAP and cap < tol.max_events:
            cap = min(cap * 4, tol.max_events)
            q[:] = q0
            p[:] = p0
            continue
        return status


def advance(c, box, duration, tol=Tolerances()):
    """Flow the configuration forward by `duration`.

    Returns (final Configuration, EventLog).  The stored state at each
    event time is the outgoing one.  Raises SingularSample when the
    trajectory is tolerance-rejected.
    """
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    out = c.copy()
    if duration == 0:
        return out, EventLog()
    status, events, _ = _advance_arrays(out.q, out.p, box, duration, tol)
    if status != _kernels.OK:
        raise SingularSample(_STATUS_REASON[status])
    return out, EventLog(events)


def backward(c, box, duration, tol=Tolerances()):
    """Flow backward by `duration` via momentum-reversal conjugation."""
    rev = Configuration(c.q, -c.p)
    out, _ = advance(rev, box, duration, tol)
    return Configuration(out.q, -out.p)


def is_admissible(c, box, slack=1e-9):
    """Pairwise gaps >= a and wall margins >= a/2, with relative slack
    so that exact contacts round-trip as admissible."""
    a = box.a
    lo = a / 2 * (1 - slack)
    if np.any(c.q < lo) or np.any(c.q > box.L - lo):
        return False
    n = c.n
    amin2 = (a * (1 - slack)) ** 2
    for i in range(n):
        d2 = np.sum((c.q[i + 1:] - c.q[i]) ** 2, axis=1)
        if np.any(d2 < amin2):
            return False
    return True


def classify_singular(c, box, tol=Tolerances(), horizon=1.0):
    """Classify the configuration's next event: Ok, Graze or NearMultiple."""
    try:
        next_event(c, box, horizon, tol)
    except SingularSample as e:
        return e.reason
    return "Ok"
