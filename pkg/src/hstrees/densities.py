"""Initial measures, their normalizations, and time-zero correlations.

Supported variants (all with Maxwellian momenta at inverse temperature
beta and hard-core plus wall-margin admissibility):

- "equilibrium": spatially uniform.
- "perturbed": spatial factor g(q) = prod_i (1 + lam cos(2 pi w.q_i/L)).
- "perturbed_rough": same with sign(cos(...)): bounded, discontinuous.
- "grand_canonical": particle number 0..n_max with activity weights
  z^n/n!, each sector carrying the product density above.

Densities are stored unnormalized; `calibrate` estimates the partition
constant by Monte Carlo once and caches it with its standard error.
"""
from dataclasses import dataclass, field
from math import factorial, perm

import numpy as np

from . import mc
from .dynamics import Configuration


class PackingTooTight(Exception):
    pass


VARIANTS = ("equilibrium", "perturbed", "perturbed_rough", "grand_canonical")


def h_beta(p, beta):
    """Maxwellian momentum density, unit mass per particle."""
    p = np.asarray(p, dtype=float)
    e = np.sum(p * p, axis=-1)
    return (beta / (2 * np.pi)) ** 1.5 * np.exp(-0.5 * beta * e)


def _free_positions_admissible(q, box, slack=1e-9):
    a = box.a
    lo = a / 2 * (1 - slack)
    if np.any(q < lo) or np.any(q > box.L - lo):
        return False
    amin2 = (a * (1 - slack)) ** 2
    for i in range(q.shape[0]):
        if np.any(np.sum((q[i + 1:] - q[i]) ** 2, axis=1) < amin2):
            return False
    return True


@dataclass
class InitialMeasure:
    variant: str
    beta: float
    N: int = None            # canonical particle number
    lam: float = 0.0
    wavevector: tuple = (1, 0, 0)
    activity: float = None   # grand canonical
    n_max: int = None
    norm: mc.Estimate = None  # set by calibrate()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError("unknown variant %r" % self.variant)
        if self.variant == "grand_canonical":
            if self.activity is None or self.n_max is None:
                raise ValueError("grand canonical needs activity and n_max")
        elif self.N is None:
            raise ValueError("canonical variant needs N")
        if abs(self.lam) >= 1:
            raise ValueError("need |lam| < 1")

    def max_particles(self):
        return self.n_max if self.variant == "grand_canonical" else self.N

    def spatial_factor(self, q, box):
        """Product of per-particle spatial perturbation factors."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if q.shape[0] == 0 or self.lam == 0 or self.variant == "equilibrium":
            return 1.0
        w = np.asarray(self.wavevector, dtype=float)
        phase = 2 * np.pi * (q @ (w / box.L))
        c = np.cos(phase)
        if self.variant == "perturbed_rough":
            c = np.sign(c)
        return float(np.prod(1 + self.lam * c))

    def sector_weight(self, n):
        """Activity factor of the n-particle sector (1 for canonical)."""
        if self.variant == "grand_canonical":
            return self.activity ** n
        return 1.0

    def density_f0(self, z, box):
        """Unnormalized density at a Configuration (0 if inadmissible)."""
        n = z.n
        if self.variant != "grand_canonical" and n != self.N:
            raise ValueError("canonical density needs exactly N particles")
        if self.variant == "grand_canonical" and n > self.n_max:
            return 0.0
        if not _free_positions_admissible(z.q, box):
            return 0.0
        return float(self.sector_weight(n) * np.prod(h_beta(z.p, self.beta))
                     * self.spatial_factor(z.q, box))

    def log_density_f0(self, z, box):
        v = self.density_f0(z, box)
        return -np.inf if v == 0 else float(np.log(v))

    def prefactor(self, n):
        """Combinatorial marginalization prefactor N...(N-n+1)."""
        if self.variant == "grand_canonical":
            return 1.0
        return float(perm(self.N, n))

    def calibrate(self, box, n_samples=200000, seed=12345, processes=1):
        """Estimate and cache the normalization constant.

        Canonical: Z = integral of g over admissible positions.
        Grand canonical: the activity sum of those sector integrals
        with 1/n! weights.
        """
        vol = float(np.prod(box.L - box.a))
        if self.variant == "grand_canonical":
            terms = [mc.Estimate(1.0, 0.0, 1, 0, seed)]  # empty sector
            for k in range(1, self.n_max + 1):
                est = mc.run_samples(
                    _NormSample(self, box, k), n_samples, seed,
                    "norm_k%d" % k, processes=processes)
                coeff = self.activity ** k * vol ** k / factorial(k)
                terms.append(mc.scale(est, coeff))
            self.norm = mc.combine_sum(terms, seed=seed)
        else:
            est = mc.run_samples(
                _NormSample(self, box, self.N), n_samples, seed, "norm",
                processes=processes)
            self.norm = mc.scale(est, vol ** self.N)
        if self.norm.value <= 0:
            raise PackingTooTight("normalization estimate not positive")
        return self.norm

    def require_norm(self):
        if self.norm is None:
            raise ValueError("measure not calibrated")
        return self.norm


@dataclass(frozen=True)
class _NormSample:
    """Picklable one-draw integrand for the normalization constant."""

    measure: InitialMeasure
    box: object
    k: int

    def __call__(self, rng, idx):
        box = self.box
        q = rng.uniform(box.a / 2, box.L - box.a / 2, size=(self.k, 3))
        if not _free_positions_admissible(q, box):
            return 0.0, 1
        return self.measure.spatial_factor(q, box), 0


def sample_completion(measure, rng, k, box):
    """Proposal draw of k extra particles: positions uniform over the
    margin-shrunk box, momenta Maxwellian.  Returns (q, p, volume)."""
    q = rng.uniform(box.a / 2, box.L - box.a / 2, size=(k, 3))
    p = rng.normal(scale=1.0 / np.sqrt(measure.beta), size=(k, 3))
    vol = float(np.prod(box.L - box.a)) ** k
    return q, p, vol


def rho0_point_sample(measure, rng, q_fixed, h_fixed, box):
    """One-draw unbiased estimate of rho0_{n'} at fixed positions.

    q_fixed are the n' fixed particle positions (assumed mutually
    admissible); h_fixed is the product of their Maxwellian momentum
    factors.  The completion's momentum factors cancel the proposal
    exactly, so only volume, spatial and indicator factors remain.
    Returns (value, rejected).
    """
    n1 = q_fixed.shape[0]
    cap = measure.max_particles()
    if n1 > cap:
        return 0.0, 0
    z_norm = measure.require_norm().value
    g_fixed = measure.spatial_factor(q_fixed, box)
    if measure.variant == "grand_canonical":
        kmax = cap - n1
        k = int(rng.integers(0, kmax + 1))
        qy, _, vol = sample_completion(measure, rng, k, box)
        if k and not _completion_admissible(qy, q_fixed, box):
            return 0.0, 1
        val = (measure.activity ** n1 * h_fixed * g_fixed
               * (kmax + 1) * measure.activity ** k / factorial(k)
               * vol * measure.spatial_factor(qy, box) / z_norm)
        return val, 0
    k = measure.N - n1
    qy, _, vol = sample_completion(measure, rng, k, box)
    if k and not _completion_admissible(qy, q_fixed, box):
        return 0.0, 1
    val = (measure.prefactor(n1) * h_fixed * g_fixed * vol
           * measure.spatial_factor(qy, box) / z_norm)
    return val, 0


def _completion_admissible(qy, q_fixed, box, slack=1e-9):
    amin2 = (box.a * (1 - slack)) ** 2
    for i in range(qy.shape[0]):
        if np.any(np.sum((qy[i + 1:] - qy[i]) ** 2, axis=1) < amin2):
            return False
        if q_fixed.shape[0] and np.any(
                np.sum((q_fixed - qy[i]) ** 2, axis=1) < amin2):
            return False
    return True


def sample_conditional(measure, z_n, k, box, rng, max_tries=100):
    """Draw an admissible k-particle completion of z_n by rejection.

    Returns (q, p, weight, tries) where weight is the spatial density
    factor of the completed configuration relative to the proposal.
    Raises PackingTooTight when the acceptance rate collapses.
    """
    for tries in range(1, max_tries + 1):
        qy, py, _ = sample_completion(measure, rng, k, box)
        if _completion_admissible(qy, z_n.q, box):
            g = measure.spatial_factor(qy, box)
            return qy, py, g, tries
    raise PackingTooTight("no admissible completion in %d tries" % max_tries)


@dataclass(frozen=True)
class _Rho0Sample:
    measure: InitialMeasure
    box: object
    q_fixed: np.ndarray
    h_fixed: float

    def __call__(self, rng, idx):
        return rho0_point_sample(self.measure, rng, self.q_fixed,
                                 self.h_fixed, self.box)


def fold_norm_error(est, measure):
    """Add the cached normalization's relative error in quadrature."""
    norm = measure.require_norm()
    rel = norm.stderr / norm.value
    extra = abs(est.value) * rel
    return mc.Estimate(est.value, float(np.hypot(est.stderr, extra)),
                       est.n_samples, est.n_rejected, est.seed,
                       est.breakdown)


def rho0_oracle(measure, z_n, box, n_samples=100000, seed=0, processes=1):
    """MC estimate of the time-zero correlation function at z_n."""
    n = z_n.n
    if n > measure.max_particles():
        return mc.Estimate(0.0, 0.0, 1, 0, seed)
    if not _free_positions_admissible(z_n.q, box):
        return mc.Estimate(0.0, 0.0, 1, 0, seed)
    h_fixed = float(np.prod(h_beta(z_n.p, measure.beta)))
    if measure.variant != "grand_canonical" and n == measure.N:
        # no completion integral left
        val = (measure.prefactor(n) * h_fixed
               * measure.spatial_factor(z_n.q, box)
               / measure.require_norm().value)
        return fold_norm_error(mc.Estimate(val, 0.0, 1, 0, seed), measure)
    est = mc.run_samples(
        _Rho0Sample(measure, box, z_n.q.copy(), h_fixed),
        n_samples, seed, "rho0", processes=processes)
    return fold_norm_error(est, measure)
