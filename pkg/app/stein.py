"""Kernelized Stein Direction

The empirical Stein direction moves particles along the RKHS-restricted
steepest descent direction of KL(q || p). The kernelized Stein discrepancy
built from the same operator measures how far a particle set is from p.
"""

import logging

import numpy as np
from scipy.spatial.distance import cdist

from kernels import RbfKernel
from targets import ContractViolation, TargetModel

logger = logging.getLogger(__name__)


def _check_inputs(particles: np.ndarray, model: TargetModel, grads: np.ndarray = None):
    particles = model.check_particles(particles)
    if grads is not None:
        grads = np.asarray(grads, dtype=float)
        if grads.shape != particles.shape:
            raise ContractViolation(f"Gradients {grads.shape} do not match particles {particles.shape}")
    return particles, grads


def kernel_drive(particles: np.ndarray, kernel: RbfKernel, grads: np.ndarray) -> np.ndarray:
    """(1/M) sum_j k(theta_j, theta_i) grads[j]: the kernel-smoothed score term."""
    gram = kernel.gram(particles)
    return gram.T @ grads / particles.shape[0]


def kernel_repulsion(particles: np.ndarray, kernel: RbfKernel) -> np.ndarray:
    """(1/M) sum_j grad_{theta_j} k(theta_j, theta_i), which pushes particles apart."""
    gram = kernel.gram(particles)
    scale = 2.0 / kernel.bandwidth_sq
    return scale * (particles * gram.sum(axis=0)[:, None] - gram.T @ particles) / particles.shape[0]


def stein_direction(particles: np.ndarray, model: TargetModel, kernel: RbfKernel, grads: np.ndarray) -> np.ndarray:
    """
    Empirical Stein direction for every particle.

    Args:
        particles: (M, r) particle matrix
        model: target the gradients belong to (used for shape checks)
        kernel: RBF kernel
        grads: (M, r) full or minibatch gradients of log p at each particle

    Returns:
        (M, r) matrix whose row i is
        (1/M) sum_j [k(theta_j, theta_i) grads[j] + grad_{theta_j} k(theta_j, theta_i)]
    """
    particles, grads = _check_inputs(particles, model, grads)
    return kernel_drive(particles, kernel, grads) + kernel_repulsion(particles, kernel)


def stein_kernel_matrix(particles: np.ndarray, scores: np.ndarray, kernel: RbfKernel) -> np.ndarray:
    """
    Stein kernel u(theta_i, theta_j) for every pair.

    u(x, y) = s(x).s(y) k + s(x).grad_y k + s(y).grad_x k + trace(grad_x grad_y k)
    """
    dim = particles.shape[1]
    bw = kernel.bandwidth_sq
    sq_dists = cdist(particles, particles, "sqeuclidean")
    gram = np.exp(-sq_dists / bw)
    # cross[i, j] = s_i . theta_j
    cross = scores @ particles.T
    own = np.diag(cross)
    score_term = (scores @ scores.T) * gram
    grad_y_term = (2.0 / bw) * gram * (own[:, None] - cross)
    grad_x_term = -(2.0 / bw) * gram * (cross.T - own[None, :])
    trace_term = gram * (2.0 * dim / bw - 4.0 * sq_dists / bw ** 2)
    return score_term + grad_y_term + grad_x_term + trace_term


def ksd_u_statistic(particles: np.ndarray, model: TargetModel, kernel: RbfKernel) -> float:
    """
    Unbiased (U-statistic) kernelized Stein discrepancy.

    Averages the Stein kernel over ordered pairs i != j. Being a U-statistic
    it can come out slightly negative when the particles fit the target well.
    """
    particles, _ = _check_inputs(particles, model)
    count = particles.shape[0]
    if count < 2:
        raise ContractViolation("KSD needs at least two particles")
    matrix = stein_kernel_matrix(particles, model.score(particles), kernel)
    return float((matrix.sum() - np.trace(matrix)) / (count * (count - 1)))
