"""Signed Monte Carlo estimators for time-evolved correlation functions.

Two independent routes to rho_n(z_n, t) are provided: direct
marginalization (complete to the full particle number, flow the whole
system backward, evaluate the initial density) and the finite tree
expansion (sum of signed collision-history integrals).  On top of
these sit checkers for the single-particle integration identity, the
recollision cancellation, the collision operator and the
integrated-along-trajectory hierarchy.

Momentum proposals are always the Maxwellian of the measure, so the
momentum factors of the initial density cancel against the proposals
exactly (conservation of energy along the flow); the per-sample weight
keeps only volume, spatial, indicator and B factors.  Samples whose
node variables fall outside the admissible creation domain count as
exact zeros; tolerance-rejected (singular) samples count as zeros too
and are reported in n_rejected.
"""
from dataclasses import dataclass, replace
from math import factorial, sqrt

import numpy as np

from . import densities, histories, mc, trees
from .dynamics import Box, Configuration, SingularSample, Tolerances
from .dynamics import advance, backward, is_admissible, _flow_arrays
from ._kernels import OK as _OK
from .trees import Tree


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything a reproducible estimator run needs."""

    measure: densities.InitialMeasure
    box: Box
    z_n: Configuration
    t: float
    seed: int = 0
    tol: Tolerances = Tolerances()
    n_samples: int = 100000
    processes: int = 1

    @property
    def n(self):
        return self.z_n.n


def draw_evaluation_point(measure, box, n, rng):
    """Generic admissible evaluation point with Maxwellian momenta."""
    while True:
        q = rng.uniform(box.a / 2, box.L - box.a / 2, size=(n, 3))
        p = rng.normal(scale=1.0 / np.sqrt(measure.beta), size=(n, 3))
        z = Configuration(q, p)
        if is_admissible(z, box):
            return z


def _h_fixed(measure, p):
    return float(np.prod(densities.h_beta(p, measure.beta)))


def _uniform_sphere(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _node_proposal(rng, m, t, beta):
    """Times as sorted uniforms, directions uniform on the sphere,
    momenta Maxwellian; the compensating weight is t^m/m! (4 pi)^m."""
    times = np.sort(rng.uniform(0.0, t, size=m))[::-1]
    omegas = rng.normal(size=(m, 3))
    omegas /= np.linalg.norm(omegas, axis=1)[:, None]
    phats = rng.normal(scale=1.0 / np.sqrt(beta), size=(m, 3))
    return times, omegas, phats


_DOMAIN_ZERO = ("OverlapAtCreation", "WallViolationAtCreation")


def _history_sample(rng, measure, box, tol, z_q, z_p, t, tree, h_fixed):
    """One fused draw of a tree integrand: node variables, backward
    history, and a one-draw completion of the time-zero correlation.

    Returns (value, rejected).
    """
    m = tree.m
    if m:
        times, omegas, phats = _node_proposal(rng, m, t, measure.beta)
        if np.any(np.diff(times) >= 0) or times[-1] <= 0 or times[0] >= t:
            return 0.0, 1
        nv = histories.NodeVars(times, omegas, phats)
    else:
        nv = histories.NodeVars.empty()
    h = histories.build_history(Configuration(z_q, z_p), t, tree, nv, box,
                                tol, record_segments=False)
    if h.status != "Valid":
        if h.reason in _DOMAIN_ZERO:
            return 0.0, 0
        return 0.0, 1
    w = (t ** m / factorial(m)) * (4 * np.pi) ** m
    if m:
        w *= float(np.prod(h.b_factors))
    v, rej = densities.rho0_point_sample(measure, rng, h.final_q, h_fixed,
                                         box)
    return w * v, rej


@dataclass(frozen=True)
class _TreeSample:
    measure: densities.InitialMeasure
    box: Box
    tol: Tolerances
    z_q: np.ndarray
    z_p: np.ndarray
    t: float
    tree: Tree
    h_fixed: float

    def __call__(self, rng, idx):
        return _history_sample(rng, self.measure, self.box, self.tol,
                               self.z_q, self.z_p, self.t, self.tree,
                               self.h_fixed)


def tree_value(tree, spec, n_samples=None, tag=None):
    """Estimate the signed integral attached to one tree."""
    n = spec.n
    if tree.n != n:
        raise ValueError("tree root count must match the evaluation point")
    ns = n_samples or spec.n_samples
    cap = spec.measure.max_particles()
    if n + tree.m > cap:
        return mc.Estimate(0.0, 0.0, 1, 0, spec.seed)
    if spec.t == 0 and tree.m > 0:
        return mc.Estimate(0.0, 0.0, 1, 0, spec.seed)
    if tree.m == 0:
        # the history is the plain backward flow: do it once
        z0 = backward(spec.z_n, spec.box, spec.t, spec.tol)
        return densities.rho0_oracle(
            spec.measure, z0, spec.box, n_samples=ns, seed=spec.seed,
            processes=spec.processes)
    fn = _TreeSample(spec.measure, spec.box, spec.tol,
                     spec.z_n.q.copy(), spec.z_n.p.copy(), spec.t, tree,
                     _h_fixed(spec.measure, spec.z_n.p))
    est = mc.run_samples(fn, ns, spec.seed, tag or "tree" + tree.serialize(),
                         processes=spec.processes)
    return densities.fold_norm_error(est, spec.measure)


def rho_series(spec, n_samples=None):
    """Finite tree expansion of rho_n(z_n, t), all trees enumerated."""
    n = spec.n
    cap = spec.measure.max_particles()
    terms = []
    breakdown = {}
    for m in range(0, max(cap - n, 0) + 1):
        for tr in trees.enumerate_trees(n, m):
            est = tree_value(tr, spec, n_samples=n_samples)
            breakdown[tr.serialize()] = est
            terms.append(est)
    if not terms:
        return mc.Estimate(0.0, 0.0, 1, 0, spec.seed)
    out = mc.combine_sum(terms, seed=spec.seed, breakdown=breakdown)
    return out


@dataclass(frozen=True)
class _DirectSample:
    measure: densities.InitialMeasure
    box: Box
    tol: Tolerances
    z_q: np.ndarray
    z_p: np.ndarray
    t: float
    h_fixed: float

    def __call__(self, rng, idx):
        meas = self.measure
        n = self.z_q.shape[0]
        if meas.variant == "grand_canonical":
            kmax = meas.n_max - n
            k = int(rng.integers(0, kmax + 1))
            count_w = (kmax + 1) * meas.activity ** (n + k) / factorial(k)
        else:
            k = meas.N - n
            count_w = meas.prefactor(n)
        qy, py, vol = densities.sample_completion(meas, rng, k, self.box)
        if k and not densities._completion_admissible(qy, self.z_q, self.box):
            return 0.0, 0
        q = np.vstack([self.z_q, qy])
        p = np.vstack([self.z_p, py])
        pr = -p
        status = _flow_arrays(q, pr, self.box, self.t, self.tol)
        if status != _OK:
            return 0.0, 1
        g0 = meas.spatial_factor(q, self.box)
        val = (count_w * vol * self.h_fixed * g0
               / meas.require_norm().value)
        return val, 0


def rho_direct(spec, n_samples=None):
    """Direct marginalization: complete, flow the full system backward
    by t, evaluate the initial density."""
    meas = spec.measure
    n = spec.n
    ns = n_samples or spec.n_samples
    if n > meas.max_particles():
        return mc.Estimate(0.0, 0.0, 1, 0, spec.seed)
    if meas.variant != "grand_canonical" and n == meas.N:
        z0 = backward(spec.z_n, spec.box, spec.t, spec.tol)
        val = meas.prefactor(n) * meas.density_f0(z0, spec.box) \
            / meas.require_norm().value
        return densities.fold_norm_error(
            mc.Estimate(val, 0.0, 1, 0, spec.seed), meas)
    fn = _DirectSample(meas, spec.box, spec.tol, spec.z_n.q.copy(),
                       spec.z_n.p.copy(), spec.t,
                       _h_fixed(meas, spec.z_n.p))
    est = mc.run_samples(fn, ns, spec.seed, "direct",
                         processes=spec.processes)
    return densities.fold_norm_error(est, meas)


@dataclass(frozen=True)
class _ITLhsSample:
    """Fused draw of the z_{n+1} integral of a tree value with n+1 roots."""

    measure: densities.InitialMeasure
    box: Box
    tol: Tolerances
    z_q: np.ndarray
    z_p: np.ndarray
    t: float
    tree: Tree
    h_fixed: float   # momentum factors of the n fixed particles only

    def __call__(self, rng, idx):
        box = self.box
        q1 = rng.uniform(box.a / 2, box.L - box.a / 2, size=(1, 3))
        p1 = rng.normal(scale=1.0 / np.sqrt(self.measure.beta), size=(1, 3))
        vol = float(np.prod(box.L - box.a))
        if not densities._completion_admissible(q1, self.z_q, box):
            return 0.0, 0
        zq = np.vstack([self.z_q, q1])
        zp = np.vstack([self.z_p, p1])
        v, rej = _history_sample(rng, self.measure, box, self.tol, zq, zp,
                                 self.t, self.tree, self.h_fixed)
        return vol * v, rej


def verify_integration_step(source_tree, spec, n_samples=None):
    """Compare the one-particle integral of an (n+1)-root tree value
    with its rewrite into n-root trees.

    Returns a dict with "lhs", "rhs" Estimates and the rewrite pieces.
    Canonical measures only (the integer discard weight uses N).
    """
    meas = spec.measure
    if meas.variant == "grand_canonical":
        raise ValueError("integration-step check needs a canonical measure")
    n = spec.n
    if source_tree.n != n + 1:
        raise ValueError("source tree must have n+1 root lines")
    m = source_tree.m
    if n + 1 + m > meas.N:
        raise ValueError("need n+1+m <= N")
    ns = n_samples or spec.n_samples
    fn = _ITLhsSample(meas, spec.box, spec.tol, spec.z_n.q.copy(),
                      spec.z_n.p.copy(), spec.t, source_tree,
                      _h_fixed(meas, spec.z_n.p))
    lhs = densities.fold_norm_error(
        mc.run_samples(fn, ns, spec.seed, "itlhs" + source_tree.serialize(),
                       processes=spec.processes), meas)
    ell = trees.ell(source_tree)
    pieces = {}
    terms = []
    coeffs = []
    if ell == m + 1:
        t2 = trees.discard_trivial(source_tree)
        est = tree_value(t2, spec, n_samples=ns,
                         tag="itrhs_discard" + t2.serialize())
        pieces["discard " + t2.serialize()] = est
        terms.append(est)
        coeffs.append(float(meas.N - n - m))
    for k in range(1, ell + 1):
        for i in range(1, n + k):
            t1 = trees.attach(source_tree, k, i)
            est = tree_value(t1, spec, n_samples=ns,
                             tag="itrhs_attach%d_%d" % (k, i))
            pieces["attach k=%d i=%d -> %s" % (k, i, t1.serialize())] = est
            terms.append(est)
            coeffs.append(1.0)
    rhs = mc.combine_sum(terms, coeffs=coeffs, seed=spec.seed,
                         breakdown=pieces)
    return {"lhs": lhs, "rhs": rhs, "pieces": pieces}


@dataclass(frozen=True)
class _CancelSample:
    """Tree integrand restricted to recolliding histories of one node."""

    measure: densities.InitialMeasure
    box: Box
    tol: Tolerances
    z_q: np.ndarray
    z_p: np.ndarray
    t: float
    tree: Tree
    node: int
    want: str        # "minus" (incoming recollision) | "plus" (outgoing)
    h_fixed: float

    def __call__(self, rng, idx):
        m = self.tree.m
        times, omegas, phats = _node_proposal(rng, m, self.t,
                                              self.measure.beta)
        if np.any(np.diff(times) >= 0) or times[-1] <= 0 \
                or times[0] >= self.t:
            return 0.0, 1
        nv = histories.NodeVars(times, omegas, phats)
        h = histories.build_history(
            Configuration(self.z_q, self.z_p), self.t, self.tree, nv,
            self.box, self.tol, record_segments=True)
        if h.status != "Valid":
            return (0.0, 0) if h.reason in _DOMAIN_ZERO else (0.0, 1)
        cls = histories.classify_creation(h, self.node)
        if (self.want == "minus") != (cls == "Incoming"):
            return 0.0, 0
        try:
            rec = histories.detect_recollision(h, self.node, self.tol)
        except SingularSample:
            return 0.0, 1
        if rec is None:
            return 0.0, 0
        w = (self.t ** m / factorial(m)) * (4 * np.pi) ** m \
            * float(np.prod(h.b_factors))
        v, rej = densities.rho0_point_sample(self.measure, rng, h.final_q,
                                             self.h_fixed, self.box)
        return w * v, rej


def cancellation_bucket(tree_prime, node, want, spec, n_samples=None):
    """Estimate the tree integral restricted to histories whose given
    node recollides (want="minus": incoming, "plus": outgoing)."""
    ns = n_samples or spec.n_samples
    fn = _CancelSample(spec.measure, spec.box, spec.tol, spec.z_n.q.copy(),
                       spec.z_n.p.copy(), spec.t, tree_prime, node, want,
                       _h_fixed(spec.measure, spec.z_n.p))
    est = mc.run_samples(
        fn, ns, spec.seed, "cancel_%s_%d_" % (want, node)
        + tree_prime.serialize(), processes=spec.processes)
    return densities.fold_norm_error(est, spec.measure)


def verify_cancellation(tree_prime, node, spec, n_samples=None,
                        n_antisym=0):
    """Zero test of the recollision cancellation at one (tree, node).

    Estimates the tree integral restricted to incoming recollisions of
    the node and, from an independent stream, the one restricted to
    outgoing recollisions; the measure-preserving partner map predicts
    their sum is zero (no pairing is used, so the test is not
    circular).  Optionally also runs the per-sample anti-symmetry
    check on n_antisym paired histories.
    """
    minus = cancellation_bucket(tree_prime, node, "minus", spec,
                                n_samples=n_samples)
    plus = cancellation_bucket(tree_prime, node, "plus", spec,
                               n_samples=n_samples)
    total = mc.combine_sum([minus, plus], seed=spec.seed,
                           breakdown={"minus": minus, "plus": plus})
    out = {"minus": minus, "plus": plus, "total": total}
    if n_antisym:
        out["antisymmetry"] = antisymmetry_check(tree_prime, node, spec,
                                                 n_target=n_antisym)
    return out


def verify_cancellation_family(source_tree, spec, n_samples=None):
    """Summed zero test over the whole rewrite family of a source tree.

    For an (n+1)-root source tree, sums the restricted integrals
    V|_{R+} + V|_{R-} of every attached rewrite tree at its attached
    node.  Returns {"total": Estimate, "buckets": dict}.
    """
    n = spec.n
    if source_tree.n != n + 1:
        raise ValueError("source tree must have n+1 root lines")
    ell = trees.ell(source_tree)
    buckets = {}
    terms = []
    for k in range(1, ell + 1):
        for i in range(1, n + k):
            tp = trees.attach(source_tree, k, i)
            for want in ("plus", "minus"):
                est = cancellation_bucket(tp, k, want, spec,
                                          n_samples=n_samples)
                buckets["%s k=%d i=%d %s" % (tp.serialize(), k, i, want)] \
                    = est
                terms.append(est)
    total = mc.combine_sum(terms, seed=spec.seed, breakdown=buckets)
    return {"total": total, "buckets": buckets}


def _density_kernel(measure, q, p, box):
    """Unnormalized symmetric density used for the per-sample
    anti-symmetry check (shared by a history and its partner)."""
    return (measure.sector_weight(q.shape[0])
            * float(np.prod(densities.h_beta(p, measure.beta)))
            * measure.spatial_factor(q, box))


def antisymmetry_check(tree_prime, node, spec, n_target=100,
                       max_tries=200000):
    """Sample recolliding incoming histories and compare each with its
    partner: reduced weights sign(B_node) prod_{r != node} B_r times
    the shared time-zero density must cancel exactly.

    Returns a dict with counts and the list of relative violations.
    """
    meas = spec.measure
    box = spec.box
    tol = spec.tol
    m = tree_prime.m
    found = 0
    tol_rejected = 0
    violations = []
    tries = 0
    while found < n_target and tries < max_tries:
        tries += 1
        rng = np.random.default_rng(
            [spec.seed, mc.stream_id("antisym"), tries])
        times, omegas, phats = _node_proposal(rng, m, spec.t, meas.beta)
        if np.any(np.diff(times) >= 0) or times[-1] <= 0:
            continue
        nv = histories.NodeVars(times, omegas, phats)
        h = histories.build_history(spec.z_n, spec.t, tree_prime, nv, box,
                                    tol, record_segments=True)
        if h.status != "Valid" or h.b_factors[node - 1] >= 0:
            continue
        try:
            rec = histories.detect_recollision(h, node, tol)
        except SingularSample:
            tol_rejected += 1
            continue
        if rec is None or rec.direction != "backward":
            continue
        try:
            partner, k_star = histories.cancellation_partner(h, rec, tol)
        except histories.PartnerConstructionFailed:
            tol_rejected += 1
            continue
        found += 1
        red_h = np.sign(h.b_factors[node - 1]) * np.prod(
            np.delete(h.b_factors, node - 1)) * _density_kernel(
                meas, h.final_q, h.final_p, box)
        red_p = np.sign(partner.b_factors[k_star - 1]) * np.prod(
            np.delete(partner.b_factors, k_star - 1)) * _density_kernel(
                meas, partner.final_q, partner.final_p, box)
        denom = max(abs(red_h), 1e-300)
        violations.append(abs(red_h + red_p) / denom)
    return {"n_found": found, "n_tries": tries,
            "n_tol_rejected": tol_rejected,
            "violations": np.array(violations)}


@dataclass(frozen=True)
class _QSample:
    """Fused draw of the collision operator at (z_n, t)."""

    measure: densities.InitialMeasure
    box: Box
    tol: Tolerances
    z_q: np.ndarray
    z_p: np.ndarray
    t: float
    inner: str       # "direct" | "series"
    h_fixed: float

    def _inner_sample(self, rng, zq, zp, h_fixed):
        """One-draw estimate of rho_{n+1}(zq, zp, t)."""
        meas = self.measure
        if self.t == 0.0:
            return densities.rho0_point_sample(meas, rng, zq, h_fixed,
                                               self.box)
        if self.inner == "direct":
            fn = _DirectSample(meas, self.box, self.tol, zq, zp, self.t,
                               h_fixed)
            return fn(rng, 0)
        total = 0.0
        rej = 0
        cap = meas.max_particles()
        n1 = zq.shape[0]
        for m in range(0, cap - n1 + 1):
            for tr in trees.enumerate_trees(n1, m):
                v, r = _history_sample(rng, meas, self.box, self.tol, zq,
                                       zp, self.t, tr, h_fixed)
                total += v
                rej += r
        return total, min(rej, 1)

    def __call__(self, rng, idx):
        box = self.box
        meas = self.measure
        n = self.z_q.shape[0]
        a = box.a
        j = int(rng.integers(0, n))
        omega = _uniform_sphere(rng)
        q_new = self.z_q[j] + a * omega
        lo = a / 2 * (1 - 1e-9)
        if np.any(q_new < lo) or np.any(q_new > box.L - lo):
            return 0.0, 0
        d2 = np.sum((self.z_q - q_new) ** 2, axis=1)
        d2[j] = np.inf
        if np.any(d2 < (a * (1 - 1e-9)) ** 2):
            return 0.0, 0
        phat = rng.normal(scale=1.0 / np.sqrt(meas.beta), size=3)
        factor = n * 4 * np.pi * a * a * float(omega @ (phat - self.z_p[j]))
        zq = np.vstack([self.z_q, q_new[None, :]])
        zp = np.vstack([self.z_p, phat[None, :]])
        v, rej = self._inner_sample(rng, zq, zp, self.h_fixed)
        return factor * v, rej


def collision_operator(spec, inner="direct", n_samples=None):
    """Estimate (Q rho_{n+1})(z_n, t)."""
    meas = spec.measure
    n = spec.n
    if n + 1 > meas.max_particles():
        return mc.Estimate(0.0, 0.0, 1, 0, spec.seed)
    ns = n_samples or spec.n_samples
    fn = _QSample(meas, spec.box, spec.tol, spec.z_n.q.copy(),
                  spec.z_n.p.copy(), spec.t, inner,
                  _h_fixed(meas, spec.z_n.p))
    est = mc.run_samples(fn, ns, spec.seed, "qop", processes=spec.processes)
    return densities.fold_norm_error(est, meas)


def bbgky_residual(spec, t_grid, n_samples=None, inner="direct"):
    """Check rho_n(T_t z_n, t) - rho_n(z_n, 0) against the time
    integral of the collision operator along the trajectory.

    t_grid must start at 0.  The time integral uses the trapezoid rule
    on the grid refined by interval midpoints; the difference between
    the refined and unrefined trapezoid sums up to each grid time is
    reported as the quadrature bound.  Returns a list of per-grid-point
    dicts.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] != 0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing and start at 0")
    ns = n_samples or spec.n_samples
    mids = 0.5 * (t_grid[:-1] + t_grid[1:])
    fine = np.sort(np.concatenate([t_grid, mids]))
    coarse_pos = np.searchsorted(fine, t_grid)
    # rho at the moving point, rho at time zero, Q along the trajectory
    rho0_est = densities.rho0_oracle(
        spec.measure, spec.z_n, spec.box, n_samples=ns, seed=spec.seed,
        processes=spec.processes)
    q_ests = []
    rho_ests = [rho0_est]
    for r, s in enumerate(fine):
        z_s = advance(spec.z_n, spec.box, float(s), spec.tol)[0] if s > 0 \
            else spec.z_n
        sub = replace(spec, z_n=z_s, t=float(s), seed=spec.seed + 1000 + r)
        q_ests.append(collision_operator(sub, inner=inner, n_samples=ns))
        if s > 0 and r in coarse_pos:
            rho_ests.append(rho_series(sub, n_samples=ns))
    qv = np.array([e.value for e in q_ests])

    def trapz_to(grid, values, stop):
        sel = grid <= stop + 1e-15
        return float(np.trapezoid(values[sel], grid[sel]))

    results = []
    for r, s in enumerate(t_grid):
        if r == 0:
            results.append({"t": 0.0, "lhs": mc.Estimate(
                0.0, 0.0, 1, 0, spec.seed), "rhs": mc.Estimate(
                0.0, 0.0, 1, 0, spec.seed), "residual": 0.0,
                "stderr": 0.0, "quad_bound": 0.0})
            continue
        lhs = mc.combine_sum([rho_ests[r], rho0_est], coeffs=[1.0, -1.0],
                             seed=spec.seed)
        val = trapz_to(fine, qv, s)
        coarse_val = trapz_to(t_grid, qv[coarse_pos], s)
        quad_bound = abs(val - coarse_val)
        # trapezoid weights on the fine grid for the stderr
        stop = coarse_pos[r] + 1
        dt = np.diff(fine[:stop])
        wts = np.zeros(stop)
        wts[:-1] += dt / 2
        wts[1:] += dt / 2
        q_std = sqrt(float(np.sum(
            (wts * [e.stderr for e in q_ests[:stop]]) ** 2)))
        rhs = mc.Estimate(val, q_std,
                          sum(e.n_samples for e in q_ests[:stop]),
                          sum(e.n_rejected for e in q_ests[:stop]),
                          spec.seed)
        resid = lhs.value - rhs.value
        results.append({
            "t": float(s), "lhs": lhs, "rhs": rhs, "residual": resid,
            "stderr": sqrt(lhs.stderr ** 2 + rhs.stderr ** 2),
            "quad_bound": quad_bound})
    return results
