"""Deterministic oracles used by the estimator and acceptance suites."""
import numpy as np
from numpy.polynomial.hermite import hermgauss
from numpy.polynomial.legendre import leggauss

from hstrees import densities, dynamics
from hstrees._kernels import OK as _OK
from hstrees.dynamics import Tolerances


def tree_value_quadrature(measure, box, z1, t, nt=12, ncos=8, nphi=8,
                          nh=6, tol=Tolerances()):
    """Tensor-grid quadrature of the one-root, one-node tree value.

    Needs a two-particle canonical measure: the created pair exhausts
    it, so the time-zero correlation is a pointwise evaluation and the
    whole integral is over (t_1, omega, phat) only.  Gauss-Legendre in
    t_1 and cos(theta), midpoint in phi, Gauss-Hermite in each phat
    component (absorbing the Maxwellian of the created momentum, which
    by energy conservation is the time-zero Maxwellian surplus).

    The creation-time flow of the root particle is hoisted out of the
    direction/momentum loops and the pair leg runs on the flow kernel
    directly, mirroring the history builder's backward convention.
    """
    if measure.variant == "grand_canonical" or measure.N != 2:
        raise ValueError("oracle needs a two-particle canonical measure")
    if z1.n != 1:
        raise ValueError("oracle needs a single root particle")
    a = box.a
    beta = measure.beta
    h_fixed = float(densities.h_beta(z1.p[0], beta))
    z_norm = measure.require_norm().value
    xt, wt = leggauss(nt)
    t_nodes = 0.5 * t * (xt + 1.0)
    t_wts = 0.5 * t * wt
    xc, wc = leggauss(ncos)
    phis = 2 * np.pi * (np.arange(nphi) + 0.5) / nphi
    wphi = 2 * np.pi / nphi
    xh, wh = hermgauss(nh)
    p_nodes = xh * np.sqrt(2.0 / beta)
    w_mom = wh / np.sqrt(np.pi)
    omegas = []
    for c, w2 in zip(xc, wc):
        s = np.sqrt(1.0 - c * c)
        for phi in phis:
            omegas.append((np.array([s * np.cos(phi), s * np.sin(phi), c]),
                           w2 * wphi))
    phats = []
    for i in range(nh):
        for j in range(nh):
            for k in range(nh):
                phats.append((np.array([p_nodes[i], p_nodes[j],
                                        p_nodes[k]]),
                              w_mom[i] * w_mom[j] * w_mom[k]))
    lo = a / 2 * (1 - 1e-9)
    hi = box.L - lo
    total = 0.0
    q_pair = np.empty((2, 3))
    p_pair = np.empty((2, 3))
    for t1, w1 in zip(t_nodes, t_wts):
        # root particle flowed backward from t to the creation time
        q_root = z1.q.copy()
        pr = -z1.p.copy()
        if dynamics._flow_arrays(q_root, pr, box, t - t1, tol) != _OK:
            continue
        p_root = -pr
        for omega, w_dir in omegas:
            q_new = q_root[0] + a * omega
            if np.any(q_new < lo) or np.any(q_new > hi):
                continue
            for phat, wp in phats:
                b = a * a * float(omega @ (phat - p_root[0]))
                q_pair[0] = q_root[0]
                q_pair[1] = q_new
                p_pair[0] = -p_root[0]
                p_pair[1] = -phat
                if dynamics._flow_arrays(q_pair, p_pair, box, t1,
                                         tol) != _OK:
                    continue
                g0 = measure.spatial_factor(q_pair, box)
                total += (w1 * w_dir * wp * b
                          * 2.0 * h_fixed * g0 / z_norm)
    return total
