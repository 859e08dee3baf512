"""RBF kernel and median-heuristic bandwidth for the Stein direction."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from targets import ContractViolation

logger = logging.getLogger(__name__)

FALLBACK_BANDWIDTH_SQ = 1.0


@dataclass(frozen=True)
class RbfKernel:
    """k(x, y) = exp(-|x - y|^2 / bandwidth_sq)."""
    bandwidth_sq: float = 1.0

    def __post_init__(self):
        if not (self.bandwidth_sq > 0 and np.isfinite(self.bandwidth_sq)):
            raise ContractViolation(f"Squared bandwidth must be positive, got {self.bandwidth_sq}")

    def gram(self, x: np.ndarray, y: np.ndarray = None) -> np.ndarray:
        """Kernel matrix K[i, j] = k(x_i, y_j)."""
        y = x if y is None else y
        return np.exp(-cdist(x, y, "sqeuclidean") / self.bandwidth_sq)


def _check_pair(x: np.ndarray, y: np.ndarray):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ContractViolation(f"Kernel arguments must be vectors of equal length, got {x.shape} and {y.shape}")
    return x, y


def rbf_eval(kernel: RbfKernel, x: np.ndarray, y: np.ndarray) -> float:
    x, y = _check_pair(x, y)
    return float(np.exp(-np.sum((x - y) ** 2) / kernel.bandwidth_sq))


def rbf_grad_x(kernel: RbfKernel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """grad_x k(x, y) = -(2 / bandwidth_sq) (x - y) k(x, y)."""
    x, y = _check_pair(x, y)
    return (-2.0 / kernel.bandwidth_sq) * (x - y) * rbf_eval(kernel, x, y)


def median_heuristic(particles: np.ndarray) -> float:
    """
    Squared bandwidth med^2 / log(M + 1).

    med is the lower-middle order statistic of the distances between distinct
    particle pairs. A single particle or a zero median falls back to 1.0.
    """
    particles = np.asarray(particles, dtype=float)
    if particles.ndim != 2 or particles.shape[0] < 1:
        raise ContractViolation(f"Expected a nonempty (M, r) particle matrix, got shape {particles.shape}")
    count = particles.shape[0]
    if count < 2:
        return FALLBACK_BANDWIDTH_SQ
    distances = pdist(particles)
    middle = (distances.size - 1) // 2
    med = np.partition(distances, middle)[middle]
    if med <= 0:
        return FALLBACK_BANDWIDTH_SQ
    return float(med ** 2 / np.log(count + 1))
