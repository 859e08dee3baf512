"""Distribution Metrics

Particle-set comparison metrics: the identity-coupling quadratic Wasserstein
surrogate, exact sorted-coupling W2^2 in 1-D, MMD, moment errors, and
discrete KL / Jensen-Shannon divergences.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.special import rel_entr

from kernels import RbfKernel
from targets import ContractViolation

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-12


@dataclass(frozen=True)
class DiscreteDist:
    """Probability vector over a finite alphabet."""
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise ContractViolation("A discrete distribution is a nonempty probability vector")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > NORMALIZATION_TOLERANCE:
            raise ContractViolation(f"Probabilities must be >= 0 and sum to 1, got sum {probs.sum()!r}")
        object.__setattr__(self, "probs", probs)


DistLike = Union[DiscreteDist, np.ndarray, list, tuple]


def _as_probs(p1: DistLike, p2: DistLike) -> Tuple[np.ndarray, np.ndarray]:
    a = p1 if isinstance(p1, DiscreteDist) else DiscreteDist(p1)
    b = p2 if isinstance(p2, DiscreteDist) else DiscreteDist(p2)
    if a.probs.shape != b.probs.shape:
        raise ContractViolation("Distributions live on different alphabets")
    return a.probs, b.probs


def kl_discrete(p1: DistLike, p2: DistLike) -> float:
    """KL(p1 || p2) in nats; +inf when p1 puts mass where p2 has none."""
    a, b = _as_probs(p1, p2)
    return float(np.sum(rel_entr(a, b)))


def jsd_discrete(p1: DistLike, p2: DistLike) -> float:
    """Jensen-Shannon divergence in bits, so it lies in [0, 1]."""
    a, b = _as_probs(p1, p2)
    mid = 0.5 * (a + b)
    value = 0.5 * np.sum(rel_entr(a, mid)) + 0.5 * np.sum(rel_entr(b, mid))
    return float(value / np.log(2.0))


def _particle_matrix(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values[:, None] if values.ndim == 1 else values


def w2_quadratic(prev: np.ndarray, cur: np.ndarray) -> float:
    """
    Quadratic Wasserstein surrogate (1/M) sum_i |theta_i - theta_i_prev|^2.

    Restricting the dual potential to quadratics collapses W2^2 to
    E|theta - theta_prev|^2 under the coupling that pairs particle i across
    steps. This upper-bounds the true W2^2 between the two empirical measures.
    """
    prev, cur = _particle_matrix(prev), _particle_matrix(cur)
    if prev.shape != cur.shape:
        raise ContractViolation(f"Particle sets differ in shape: {prev.shape} vs {cur.shape}")
    return float(np.mean(np.sum((cur - prev) ** 2, axis=1)))


def w2_sorted_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W2^2 between two equal-size 1-D empirical measures (monotone coupling)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ContractViolation("Sorted coupling needs particle sets of equal size")
    return float(np.mean((np.sort(a) - np.sort(b)) ** 2))


def mmd_squared(a: np.ndarray, b: np.ndarray, kernel: RbfKernel, unbiased: bool = True) -> float:
    """
    Squared maximum mean discrepancy between two sample sets.

    The default U-statistic drops the diagonal of the within-set Gram matrices;
    `unbiased=False` gives the V-statistic, which is exactly 0 for identical sets.
    """
    a, b = _particle_matrix(a), _particle_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ContractViolation("Sample sets have different dimensions")
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise ContractViolation("MMD needs at least two samples per set")
    k_aa, k_bb, k_ab = kernel.gram(a), kernel.gram(b), kernel.gram(a, b)
    if unbiased:
        within_a = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
        within_b = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    else:
        within_a = k_aa.mean()
        within_b = k_bb.mean()
    return float(within_a + within_b - 2.0 * k_ab.mean())


def moment_errors(particles: np.ndarray, true_mean: np.ndarray, true_cov: np.ndarray) -> Tuple[float, float]:
    """
    Euclidean error of the particle mean and Frobenius error of the unbiased
    sample covariance. The covariance error is NaN when M < 2.
    """
    particles = _particle_matrix(particles)
    true_mean = np.atleast_1d(np.asarray(true_mean, dtype=float))
    true_cov = np.atleast_2d(np.asarray(true_cov, dtype=float))
    dim = particles.shape[1]
    if true_mean.shape != (dim,) or true_cov.shape != (dim, dim):
        raise ContractViolation(f"Reference moments do not match particle dimension {dim}")
    mean_err = float(np.linalg.norm(particles.mean(axis=0) - true_mean))
    if particles.shape[0] < 2:
        return mean_err, float("nan")
    sample_cov = np.atleast_2d(np.cov(particles, rowvar=False, ddof=1))
    return mean_err, float(np.linalg.norm(sample_cov - true_cov, ord="fro"))
