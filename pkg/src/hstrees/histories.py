"""Collision histories: backward trajectories with particle creations.

A history starts from n particles at time t and runs backward to 0.
At each node time t_k a new particle (label n+k) is inserted in contact
with its progenitor line j_k at position xi_{j_k}(t_k) + a omega_k with
momentum phat_k, and the enlarged system continues backward.  Each node
carries the signed factor B_k = a^2 omega_k . (phat_k - pi_{j_k}(t_k));
B_k > 0 means the creation is an outgoing collision configuration (the
backward flow scatters the pair immediately), B_k < 0 an incoming one.

The module also classifies creations by whether the created particle
meets another sphere of the history outside its creation (a
"recollision") and builds the measure-preserving partner history that
cancels a recolliding one: the creation is erased and re-inserted at
the recollision contact, leaving the trajectory below unchanged.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, dynamics
from .dynamics import Configuration, SingularSample, Tolerances
from .trees import Tree


class PartnerConstructionFailed(Exception):
    pass


@dataclass(frozen=True)
class NodeVars:
    """Per-node creation variables: times (m,), omegas (m,3), phats (m,3).

    Times are strictly decreasing and positive.
    """

    times: np.ndarray
    omegas: np.ndarray
    phats: np.ndarray

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        omegas = np.asarray(self.omegas, dtype=float).reshape(len(times), 3)
        phats = np.asarray(self.phats, dtype=float).reshape(len(times), 3)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "phats", phats)
        if np.any(np.diff(times) >= 0) or (len(times) and times[-1] <= 0):
            raise ValueError("creation times must be strictly decreasing > 0")

    @property
    def m(self):
        return len(self.times)

    @classmethod
    def empty(cls):
        return cls(np.empty(0), np.empty((0, 3)), np.empty((0, 3)))


@dataclass(frozen=True)
class CreationRecord:
    k: int            # node index, 1-based
    s: float          # creation time t_k
    prog_row: int     # progenitor row, 0-based
    new_row: int      # created particle row, 0-based
    omega: np.ndarray
    phat: np.ndarray
    b: float


@dataclass(frozen=True)
class EventRecord:
    """A flow event in real history time (pair or wall)."""

    s: float
    kind: str
    i: int
    j: int
    omega: np.ndarray      # pair: (q_i - q_j)/a; wall: inward normal
    q_i: np.ndarray
    q_j: np.ndarray
    p_above_i: np.ndarray  # real-time momenta on the s > event side
    p_above_j: np.ndarray
    p_below_i: np.ndarray
    p_below_j: np.ndarray


@dataclass(frozen=True)
class RecollisionRecord:
    node: int
    partner_row: int
    s: float
    direction: str         # "backward" (incoming node) | "forward" (outgoing)
    omega: np.ndarray      # from partner to the created/ghost particle
    p_created: np.ndarray  # created or ghost particle momentum at s
    p_partner: np.ndarray


@dataclass
class History:
    tree: Tree
    t: float
    box: dynamics.Box
    start: Configuration
    nodevars: NodeVars
    status: str = "Valid"
    reason: str = ""
    b_factors: np.ndarray = None
    creations: list = field(default_factory=list)
    events: list = field(default_factory=list)
    segments: list = None       # per row: list of (s_lo, s_hi, q_lo, p)
    final_q: np.ndarray = None
    final_p: np.ndarray = None

    @property
    def n(self):
        return self.start.n

    @property
    def m(self):
        return self.tree.m

    def lifetime(self, row):
        """Existence interval [0, s_top] of a particle row."""
        if row < self.n:
            return 0.0, self.t
        return 0.0, self.nodevars.times[row - self.n]


def _segment_above(segs, s):
    """Segment covering times just above s (intervals read [s_lo, s_hi))."""
    for seg in segs:
        if seg[0] <= s < seg[1]:
            return seg
    if segs and s >= segs[-1][1]:
        return segs[-1]
    raise ValueError("no segment above s=%g" % s)


def _segment_below(segs, s):
    for seg in segs:
        if seg[0] < s <= seg[1]:
            return seg
    if segs and s <= segs[0][0]:
        return segs[0]
    raise ValueError("no segment below s=%g" % s)


def position_at(h, row, s, side="above"):
    segs = h.segments[row]
    seg = _segment_above(segs, s) if side == "above" else _segment_below(segs, s)
    s_lo, _, q_lo, p = seg
    return q_lo + p * (s - s_lo)


def momentum_at(h, row, s, side="above"):
    segs = h.segments[row]
    seg = _segment_above(segs, s) if side == "above" else _segment_below(segs, s)
    return seg[3]


_FLOW_REASON = {
    _kernels.GRAZE: "SingularFlow",
    _kernels.NEAR_MULTIPLE: "SingularFlow",
    _kernels.EVENT_CAP: "EventCapExceeded",
}


def _rejected(h, reason):
    h.status = "Rejected"
    h.reason = reason
    return h


def _collect_leg(h, q_start, p_start, q_end, p_end, events, frames, s_hi):
    """Append one backward leg's segments and events in real time.

    The leg was simulated with reversed momenta over tau in [0, dur];
    real time is s = s_hi - tau.  `p_start`/`p_end` are real momenta.
    Segments are stored as (s_lo, s_hi, q_at_s_lo, p_real).
    """
    nrows = q_end.shape[0]
    cur_tau = 0.0
    cur_prev = -p_start  # reversed momenta on the current interval
    for e, (fq, fp) in zip(events, frames):
        s_ev = s_hi - e.time
        if e.time > cur_tau:
            for r in range(nrows):
                h.segments[r].append(
                    (s_ev, s_hi - cur_tau, fq[r].copy(), -cur_prev[r]))
        if e.kind == "pair":
            i, j = e.i, e.j
            h.events.append(EventRecord(
                s=s_ev, kind="pair", i=i, j=j,
                omega=np.array(e.omega), q_i=fq[i].copy(), q_j=fq[j].copy(),
                p_above_i=-cur_prev[i].copy(), p_above_j=-cur_prev[j].copy(),
                p_below_i=-fp[i].copy(), p_below_j=-fp[j].copy()))
        else:
            i = e.i
            h.events.append(EventRecord(
                s=s_ev, kind="wall", i=i, j=e.j,
                omega=np.array(e.omega), q_i=fq[i].copy(), q_j=fq[i].copy(),
                p_above_i=-cur_prev[i].copy(), p_above_j=-cur_prev[i].copy(),
                p_below_i=-fp[i].copy(), p_below_j=-fp[i].copy()))
        cur_tau = e.time
        cur_prev = fp
    s_lo = s_hi - (cur_tau if not events else 0.0)  # placeholder, fixed below
    # final interval down to the leg end
    s_end = s_hi - (cur_tau)
    # duration of the leg equals s_hi - s_leg_lo; the end state q_end is
    # the position at the leg's lower edge
    # (the caller knows the edge; we infer it from q_end and momenta)
    # Append using the true lower edge supplied via p_end consistency:
    # the interval is [s_leg_lo, s_hi - cur_tau].
    return cur_tau, cur_prev


def build_history(z_n, t, tree, nv, box, tol=Tolerances(),
                  record_segments=True):
    """Realize the collision history of `tree` with node variables `nv`.

    Runs the backward flow from time t, inserting particle n+k at each
    nv.times[k-1].  Returns a History; invalid node variables yield
    status "Rejected" with a reason instead of raising.
    """
    n = z_n.n
    m = tree.m
    if tree.n != n or nv.m != m:
        raise ValueError("tree/nodevars inconsistent with configuration")
    if t <= 0:
        raise ValueError("need t > 0")
    if nv.m and nv.times[0] >= t:
        raise ValueError("creation times must lie below t")
    h = History(tree=tree, t=t, box=box, start=z_n.copy(), nodevars=nv,
                b_factors=np.zeros(m),
                segments=[[] for _ in range(n + m)] if record_segments
                else None)
    gap_eps = tol.eps_time * t
    bounds = np.concatenate(([t], nv.times, [0.0]))
    if np.any(-np.diff(bounds) < gap_eps):
        return _rejected(h, "SingularFlow")

    q = z_n.q.copy()
    p = z_n.p.copy()
    a = box.a
    for k in range(1, m + 2):
        s_hi = bounds[k - 1]
        s_lo = bounds[k]
        dur = s_hi - s_lo
        pr = -p
        if record_segments:
            q_start = q.copy()
            p_start = p.copy()
            status, events, frames = dynamics._advance_arrays(
                q, pr, box, dur, tol)
        else:
            status = dynamics._flow_arrays(q, pr, box, dur, tol)
            events = frames = None
        p = -pr
        if status != _kernels.OK:
            return _rejected(h, _FLOW_REASON[status])
        if record_segments:
            _append_leg_segments(h, q_start, p_start, q, p, events, frames,
                                 s_hi, s_lo)
        if k == m + 1:
            break
        # insert particle n+k at contact with its progenitor
        jk = tree.js[k - 1]
        omega = nv.omegas[k - 1]
        phat = nv.phats[k - 1]
        q_new = q[jk - 1] + a * omega
        lo = a / 2 * (1 - 1e-9)
        if np.any(q_new < lo) or np.any(q_new > box.L - lo):
            return _rejected(h, "WallViolationAtCreation")
        d2 = np.sum((q - q_new) ** 2, axis=1)
        d2[jk - 1] = np.inf  # contact with the progenitor is exact
        if np.any(d2 < (a * (1 - 1e-9)) ** 2):
            return _rejected(h, "OverlapAtCreation")
        dp = phat - p[jk - 1]
        bdot = omega @ dp
        if abs(bdot) < tol.eps_graze * max(np.linalg.norm(dp), 1.0):
            return _rejected(h, "Graze")
        b_k = a * a * bdot
        h.b_factors[k - 1] = b_k
        h.creations.append(CreationRecord(
            k=k, s=s_lo, prog_row=jk - 1, new_row=n + k - 1,
            omega=omega.copy(), phat=phat.copy(), b=b_k))
        q = np.vstack([q, q_new])
        p = np.vstack([p, phat])
    h.final_q = q
    h.final_p = p
    if record_segments:
        for segs in h.segments:
            segs.sort(key=lambda s: s[0])
    return h


def _append_leg_segments(h, q_start, p_start, q_end, p_end, events, frames,
                         s_hi, s_lo):
    """Record segments and events of one backward leg in real time.

    Simulated (reversed) time tau in [0, s_hi - s_lo] maps to real time
    s = s_hi - tau; reversed momenta are the negated real ones.
    """
    nrows = q_end.shape[0]
    cur_tau = 0.0
    cur_p_rev = -p_start
    for e, (fq, fp) in zip(events, frames):
        s_ev = s_hi - e.time
        if e.time > cur_tau:
            for r in range(nrows):
                h.segments[r].append(
                    (s_ev, s_hi - cur_tau, fq[r].copy(),
                     -cur_p_rev[r].copy()))
        if e.kind == "pair":
            i, j = e.i, e.j
            h.events.append(EventRecord(
                s=s_ev, kind="pair", i=i, j=j,
                omega=np.array(e.omega), q_i=fq[i].copy(), q_j=fq[j].copy(),
                p_above_i=-cur_p_rev[i].copy(),
                p_above_j=-cur_p_rev[j].copy(),
                p_below_i=-fp[i].copy(), p_below_j=-fp[j].copy()))
        else:
            i = e.i
            h.events.append(EventRecord(
                s=s_ev, kind="wall", i=i, j=e.j,
                omega=np.array(e.omega), q_i=fq[i].copy(), q_j=fq[i].copy(),
                p_above_i=-cur_p_rev[i].copy(),
                p_above_j=-cur_p_rev[i].copy(),
                p_below_i=-fp[i].copy(), p_below_j=-fp[i].copy()))
        cur_tau = e.time
        cur_p_rev = fp
    if s_hi - cur_tau > s_lo:
        for r in range(nrows):
            h.segments[r].append(
                (s_lo, s_hi - cur_tau, q_end[r].copy(),
                 -cur_p_rev[r].copy()))


def weight(h):
    """Signed product of the node B factors (1 for m = 0)."""
    if h.status != "Valid":
        raise ValueError("weight of a rejected history is 0 by contract")
    return float(np.prod(h.b_factors)) if h.m else 1.0


def final_configuration(h):
    if h.status != "Valid":
        raise ValueError("rejected history has no final configuration")
    return Configuration(h.final_q, h.final_p)


def classify_creation(h, k):
    return "Outgoing" if h.b_factors[k - 1] > 0 else "Incoming"


def _first_creation_by(h, label):
    """Time of the first node (going backward) whose progenitor is
    `label`, or 0.0 when that particle creates nothing."""
    for r, j in enumerate(h.tree.js, start=1):
        if j == label:
            return h.nodevars.times[r - 1]
    return 0.0


def _is_creation_scatter(h, ev, tie_eps):
    """Pair events at a creation instant between the created pair are
    part of the creation itself, not recollisions."""
    for cr in h.creations:
        if abs(ev.s - cr.s) <= tie_eps and \
                {ev.i, ev.j} == {cr.prog_row, cr.new_row}:
            return True
    return False


def detect_recollision(h, k, tol=Tolerances()):
    """First extra contact of the particle created at node k.

    Incoming node: scan the actual backward flow of particle n+k from
    t_k down to its first own creation (or 0) for a pair event
    (direction "backward").  Outgoing node: free-stream a ghost copy of
    the creation state forward to t, with wall bounces, and report its
    first contact with the recorded trajectories (direction "forward").
    Returns a RecollisionRecord or None.  Contacts too close to a
    creation instant raise SingularSample.
    """
    if h.status != "Valid":
        raise ValueError("cannot scan a rejected history")
    if h.segments is None:
        raise ValueError("history was built without segments")
    n = h.n
    row = n + k - 1
    t_k = h.nodevars.times[k - 1]
    tie_eps = tol.eps_time * h.t
    if classify_creation(h, k) == "Incoming":
        s_lo = _first_creation_by(h, n + k)
        best = None
        for ev in h.events:
            if ev.kind != "pair" or row not in (ev.i, ev.j):
                continue
            if not s_lo + tie_eps < ev.s < t_k - tie_eps:
                if s_lo < ev.s < t_k and not _is_creation_scatter(
                        h, ev, tie_eps):
                    raise SingularSample("TieAtCreation")
                continue
            if _is_creation_scatter(h, ev, tie_eps):
                continue
            if best is None or ev.s > best.s:
                best = ev
        if best is None:
            return None
        if row == best.i:
            partner, w = best.j, np.array(best.omega)
            p_cre, p_par = best.p_above_i, best.p_above_j
        else:
            partner, w = best.i, -np.array(best.omega)
            p_cre, p_par = best.p_above_j, best.p_above_i
        return RecollisionRecord(node=k, partner_row=partner, s=best.s,
                                 direction="backward", omega=w,
                                 p_created=p_cre.copy(),
                                 p_partner=p_par.copy())
    # outgoing: ghost forward free flight (single-particle flow, walls on)
    cr = h.creations[k - 1]
    q0 = (position_at(h, cr.prog_row, t_k, side="above")
          + h.box.a * cr.omega).reshape(1, 3)
    p0 = cr.phat.reshape(1, 3).copy()
    status, events, frames = dynamics._advance_arrays(
        q0.copy(), p0.copy(), h.box, h.t - t_k, tol)
    if status != _kernels.OK:
        raise SingularSample(_FLOW_REASON[status])
    # ghost segments in real time s = t_k + tau
    gsegs = []
    cur_tau = 0.0
    cur_q = q0[0].copy()
    cur_p = p0[0].copy()
    for e, (fq, fp) in zip(events, frames):
        if e.time > cur_tau:
            gsegs.append((t_k + cur_tau, t_k + e.time, cur_q, cur_p))
        cur_q = fq[0].copy()
        cur_p = fp[0].copy()
        cur_tau = e.time
    if h.t - t_k > cur_tau:
        gsegs.append((t_k + cur_tau, h.t, cur_q, cur_p))
    a = h.box.a
    best = None  # (s, row, q_ghost, p_ghost, q_other, p_other)
    for r in range(len(h.segments)):
        if r == row:
            continue
        for (g_lo, g_hi, gq, gp) in gsegs:
            for (o_lo, o_hi, oq, op) in h.segments[r]:
                lo = max(g_lo, o_lo)
                hi = min(g_hi, o_hi)
                if hi <= lo:
                    continue
                dq = (gq + gp * (lo - g_lo)) - (oq + op * (lo - o_lo))
                dv = gp - op
                v2 = dv @ dv
                if v2 == 0.0:
                    continue
                bq = dq @ dv
                cq = dq @ dq - a * a
                disc = bq * bq - v2 * cq
                if disc <= 0:
                    continue
                sq = np.sqrt(disc)
                u1 = (-bq - sq) / v2  # approaching root
                s_c = lo + u1
                if u1 < -tie_eps or s_c > hi + tie_eps:
                    continue
                s_c = min(max(s_c, lo), hi)
                if s_c <= t_k + tie_eps:
                    continue
                if best is None or s_c < best[0]:
                    qg = gq + gp * (s_c - g_lo)
                    qo = oq + op * (s_c - o_lo)
                    best = (s_c, r, qg, gp.copy(), qo, op.copy())
    if best is None:
        return None
    s_c, r, qg, pg, qo, po = best
    for cr2 in h.creations:
        if abs(s_c - cr2.s) <= tie_eps:
            raise SingularSample("TieAtCreation")
    w = (qg - qo) / a
    w /= np.linalg.norm(w)
    if abs(w @ (pg - po)) < tol.eps_graze * max(np.linalg.norm(pg - po), 1.0):
        raise SingularSample("Graze")
    return RecollisionRecord(node=k, partner_row=r, s=s_c,
                             direction="forward", omega=w,
                             p_created=pg, p_partner=po)


def cancellation_partner(h, rec, tol=Tolerances()):
    """Build the history that cancels a recolliding one.

    The creation of node `rec.node` is erased and the particle is
    instead created at the recollision contact (time rec.s, line of the
    recollision partner, direction rec.omega, momentum rec.p_created);
    node order and progenitor labels are rebuilt from the new creation
    times.  Returns (partner History, new slot k*).
    """
    if h.status != "Valid":
        raise PartnerConstructionFailed("input history not valid")
    n = h.n
    m = h.m
    k = rec.node
    # creation entries as (time, progenitor token, omega, phat, token)
    # tokens: roots are labels 1..n; node r's particle is token n+r
    entries = []
    for r in range(1, m + 1):
        if r == k:
            prow = rec.partner_row
            token = prow + 1 if prow < n else n + (prow - n + 1)
            entries.append([rec.s, token, rec.omega.copy(),
                            rec.p_created.copy(), n + r])
        else:
            entries.append([h.nodevars.times[r - 1], h.tree.js[r - 1],
                            h.nodevars.omegas[r - 1].copy(),
                            h.nodevars.phats[r - 1].copy(), n + r])
    order = sorted(range(m), key=lambda idx: -entries[idx][0])
    times = np.array([entries[idx][0] for idx in order])
    if np.any(np.diff(times) >= 0):
        raise PartnerConstructionFailed("degenerate creation times")
    relabel = {}
    for new_r, idx in enumerate(order, start=1):
        relabel[entries[idx][4]] = n + new_r
    js = []
    for new_r, idx in enumerate(order, start=1):
        tok = entries[idx][1]
        j_new = tok if tok <= n else relabel[tok]
        if not 1 <= j_new <= n + new_r - 1:
            raise PartnerConstructionFailed("invalid progenitor relabeling")
        js.append(j_new)
    k_star = order.index(k - 1) + 1
    new_tree = Tree(n, tuple(js))
    new_nv = NodeVars(times,
                      np.array([entries[idx][2] for idx in order]),
                      np.array([entries[idx][3] for idx in order]))
    partner = build_history(h.start, h.t, new_tree, new_nv, h.box, tol,
                            record_segments=h.segments is not None)
    if partner.status != "Valid":
        raise PartnerConstructionFailed(
            "rebuilt history rejected: %s" % partner.reason)
    return partner, k_star


def to_json(h, path=None):
    """Debug dump of a history (segments, events, weights, status)."""
    doc = {
        "tree": h.tree.serialize(),
        "t": h.t,
        "status": h.status,
        "reason": h.reason,
        "b_factors": [float(b) for b in h.b_factors],
        "creations": [
            {"k": c.k, "s": c.s, "prog_row": c.prog_row,
             "new_row": c.new_row, "omega": c.omega.tolist(),
             "phat": c.phat.tolist(), "b": c.b} for c in h.creations],
        "events": [
            {"s": e.s, "kind": e.kind, "i": e.i, "j": e.j,
             "omega": np.asarray(e.omega).tolist()} for e in h.events],
        "segments": None if h.segments is None else [
            [{"s_lo": s[0], "s_hi": s[1], "q_lo": s[2].tolist(),
              "p": s[3].tolist()} for s in segs] for segs in h.segments],
        "final_q": None if h.final_q is None else h.final_q.tolist(),
        "final_p": None if h.final_p is None else h.final_p.tolist(),
    }
    text = json.dumps(doc, indent=1)
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text
