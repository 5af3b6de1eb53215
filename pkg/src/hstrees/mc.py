"""Monte Carlo plumbing: deterministic streams, estimates, map-reduce.

Every sample i of an estimator draws from an independent RNG seeded by
(master seed, stream tag, i), so results are bit-identical across
chunkings and process counts: values are always reduced in index order
with compensated summation.
"""
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from math import fsum, sqrt

import numpy as np


def stream_id(tag):
    """Stable 32-bit id for a named estimator stream."""
    return zlib.crc32(tag.encode())


def sample_rng(seed, tag, idx):
    return np.random.default_rng([seed, stream_id(tag), idx])


@dataclass
class Estimate:
    """Signed MC result with error bar and provenance."""

    value: float
    stderr: float
    n_samples: int
    n_rejected: int
    seed: int
    breakdown: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "value": self.value, "stderr": self.stderr,
            "n_samples": self.n_samples, "n_rejected": self.n_rejected,
            "seed": self.seed,
            "breakdown": {k: (v.to_dict() if isinstance(v, Estimate) else v)
                          for k, v in self.breakdown.items()},
        }


def from_values(values, n_rejected, seed, breakdown=None):
    """Estimate from per-sample values (rejected samples enter as 0)."""
    m = len(values)
    if m == 0:
        raise ValueError("no samples")
    mean = fsum(values) / m
    if m > 1:
        var = fsum((v - mean) ** 2 for v in values) / (m * (m - 1))
    else:
        var = 0.0
    return Estimate(value=mean, stderr=sqrt(var), n_samples=m,
                    n_rejected=n_rejected, seed=seed,
                    breakdown=breakdown or {})


def combine_sum(estimates, coeffs=None, seed=0, breakdown=None):
    """Exact linear combination with errors added in quadrature."""
    if coeffs is None:
        coeffs = [1.0] * len(estimates)
    value = fsum(c * e.value for c, e in zip(coeffs, estimates))
    stderr = sqrt(fsum((c * e.stderr) ** 2
                       for c, e in zip(coeffs, estimates)))
    return Estimate(value=value, stderr=stderr,
                    n_samples=sum(e.n_samples for e in estimates),
                    n_rejected=sum(e.n_rejected for e in estimates),
                    seed=seed, breakdown=breakdown or {})


def scale(est, c):
    return Estimate(value=c * est.value, stderr=abs(c) * est.stderr,
                    n_samples=est.n_samples, n_rejected=est.n_rejected,
                    seed=est.seed, breakdown=est.breakdown)


def _run_range(args):
    fn, seed, tag, start, stop = args
    vals = np.empty(stop - start)
    rej = 0
    for i in range(start, stop):
        v, rejected = fn(sample_rng(seed, tag, i), i)
        vals[i - start] = v
        rej += rejected
    return start, vals, rej


def run_samples(fn, n_samples, seed, tag, processes=1, chunk_size=None):
    """Map fn(rng, idx) -> (value, rejected) over idx = 0..n_samples-1.

    Returns an Estimate.  fn must be picklable when processes > 1.
    The reduction is over per-index values in index order, so the
    result does not depend on chunk_size or processes.
    """
    if chunk_size is None:
        chunk_size = max(1, n_samples // max(4 * processes, 1))
    ranges = [(fn, seed, tag, s, min(s + chunk_size, n_samples))
              for s in range(0, n_samples, chunk_size)]
    values = np.empty(n_samples)
    n_rejected = 0
    if processes <= 1:
        results = map(_run_range, ranges)
    else:
        pool = ProcessPoolExecutor(max_workers=processes)
        try:
            results = list(pool.map(_run_range, ranges))
        finally:
            pool.shutdown()
    for start, vals, rej in results:
        values[start:start + len(vals)] = vals
        n_rejected += rej
    return from_values(values, n_rejected, seed)
