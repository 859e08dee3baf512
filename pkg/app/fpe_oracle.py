"""Fokker-Planck / JKO Oracle

One-dimensional ground truth for the samplers: an explicit finite-volume
Fokker-Planck solver and a discrete JKO step (KL plus scaled squared
Wasserstein proximity), both on a uniform grid.

Densities are piecewise constant on grid cells. W2^2 between two such
densities is computed exactly from their piecewise-linear quantile functions.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
from scipy.linalg import LinAlgError, solve
from scipy.special import logsumexp, rel_entr
from scipy.stats import norm

from targets import ContractViolation, TargetModel
from tools.datasets import write_csv_atomic

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-10
STEP_DRIFT_LIMIT = 1e-8
DRIFT_RATE_LIMIT = 1e-6


class SolverError(RuntimeError):
    """Raised when a grid solver breaks its stability or conservation guarantees"""
    pass


class JKOConvergenceError(SolverError):
    """Raised when the JKO inner solver hits its iteration cap"""

    def __init__(self, message: str, last_objective: float):
        super().__init__(message)
        self.last_objective = last_objective


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid of `cells` cells on [left, right]."""
    left: float
    right: float
    cells: int

    def __post_init__(self):
        if not self.right > self.left:
            raise ContractViolation(f"Grid needs right > left, got [{self.left}, {self.right}]")
        if self.cells < 8:
            raise ContractViolation(f"Grid needs at least 8 cells, got {self.cells}")

    @property
    def dx(self) -> float:
        return (self.right - self.left) / self.cells

    @property
    def edges(self) -> np.ndarray:
        return self.left + self.dx * np.arange(self.cells + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.left + self.dx * (np.arange(self.cells) + 0.5)

    def refine(self, factor: int) -> "Grid1D":
        return Grid1D(self.left, self.right, self.cells * factor)


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative cell densities with sum(values) * dx = 1."""
    grid: Grid1D
    values: np.ndarray
    clipped: int = field(default=0, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.cells,):
            raise ContractViolation(f"Density has {values.shape} values for {self.grid.cells} cells")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ContractViolation("Density values must be finite and nonnegative")
        mass = values.sum() * self.grid.dx
        if abs(mass - 1.0) > MASS_TOLERANCE:
            raise ContractViolation(f"Density integrates to {mass!r}, expected 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_masses(cls, grid: Grid1D, masses: np.ndarray, clipped: int = 0) -> "GridDensity":
        masses = np.clip(np.asarray(masses, dtype=float), 0.0, None)
        total = masses.sum()
        if not total > 0:
            raise ContractViolation("Cannot normalize a density with zero mass")
        return cls(grid, masses / total / grid.dx, clipped)

    @classmethod
    def from_log_density(cls, grid: Grid1D, log_values: np.ndarray) -> "GridDensity":
        """Normalize exp(log_values) by grid quadrature."""
        log_values = np.asarray(log_values, dtype=float)
        log_masses = log_values + math.log(grid.dx)
        return cls.from_masses(grid, np.exp(log_masses - logsumexp(log_masses)))

    @classmethod
    def gaussian(cls, grid: Grid1D, mean: float = 0.0, std: float = 1.0) -> "GridDensity":
        """Exact cell masses of N(mean, std^2), renormalized to the grid."""
        return cls.from_masses(grid, np.diff(norm.cdf(grid.edges, loc=mean, scale=std)))

    @property
    def masses(self) -> np.ndarray:
        return self.values * self.grid.dx

    def mean(self) -> float:
        return float(np.sum(self.masses * self.grid.centers))

    def variance(self) -> float:
        """Variance of the piecewise-constant density (includes the dx^2/12 in-cell term)."""
        centers = self.grid.centers
        mean = self.mean()
        return float(np.sum(self.masses * (centers - mean) ** 2) + self.grid.dx ** 2 / 12.0)

    def coarsen(self, factor: int) -> "GridDensity":
        """Merge every `factor` adjacent cells."""
        if self.grid.cells % factor:
            raise ContractViolation(f"{self.grid.cells} cells do not split into groups of {factor}")
        coarse = Grid1D(self.grid.left, self.grid.right, self.grid.cells // factor)
        return GridDensity.from_masses(coarse, self.masses.reshape(-1, factor).sum(axis=1))

    def to_csv(self, path: Path) -> Path:
        """Two-column snapshot: cell center, density."""
        return write_csv_atomic(path, ["center", "density"], zip(self.grid.centers, self.values))


@dataclass(frozen=True)
class DiffusionSpec:
    """d(theta) = F(theta) dt + g dW in 1-D, with D = g^2 / 2."""
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: float = 1.0

    def __post_init__(self):
        if self.diffusion < 0:
            raise ContractViolation(f"Diffusion constant must be >= 0, got {self.diffusion}")

    @classmethod
    def langevin(cls, model: TargetModel) -> "DiffusionSpec":
        """First-order Langevin dynamics F = -U'(theta), g = sqrt(2)."""
        if model.dim != 1:
            raise ContractViolation("The grid oracle is one-dimensional")
        return cls(drift=lambda x: model.score(np.asarray(x, dtype=float)[:, None])[:, 0], diffusion=1.0)

    @classmethod
    def ornstein_uhlenbeck(cls) -> "DiffusionSpec":
        return cls(drift=lambda x: -np.asarray(x, dtype=float), diffusion=1.0)


def stable_timestep(spec: DiffusionSpec, grid: Grid1D) -> float:
    """Largest dt allowed by dt <= dx^2 / (2D + |F|_max dx)."""
    max_drift = float(np.max(np.abs(spec.drift(grid.edges))))
    denominator = 2.0 * spec.diffusion + max_drift * grid.dx
    return math.inf if denominator == 0 else grid.dx ** 2 / denominator


def fp_solve_1d(spec: DiffusionSpec, init: GridDensity, grid: Grid1D, T: float, dt: float) -> GridDensity:
    """
    Evolve d(rho)/dt = -d(rho F)/d(theta) + D d^2(rho)/d(theta)^2 to time T.

    Explicit finite volumes: upwind advective flux, centered diffusive flux,
    zero flux through both boundaries. The mass is renormalized at the end and
    the accumulated drift is logged.

    Raises:
        SolverError: when dt breaks the stability bound or mass drifts too far
    """
    if init.grid != grid:
        raise ContractViolation("Initial density lives on a different grid")
    if T < 0 or dt <= 0:
        raise ContractViolation(f"Need T >= 0 and dt > 0, got T={T}, dt={dt}")
    bound = stable_timestep(spec, grid)
    if dt > bound:
        raise SolverError(f"dt={dt:.3g} exceeds the explicit stability bound {bound:.3g}")
    if T == 0:
        return init

    steps = max(1, math.ceil(T / dt - 1e-9))
    dt = T / steps
    dx = grid.dx
    face_drift = np.asarray(spec.drift(grid.edges[1:-1]), dtype=float)
    if not np.all(np.isfinite(face_drift)):
        raise SolverError("Drift is not finite on the grid")
    forward, backward = np.maximum(face_drift, 0.0), np.minimum(face_drift, 0.0)
    diffusion = spec.diffusion / dx
    ratio = dt / dx

    rho = init.values.copy()
    flux = np.zeros(grid.cells + 1)
    mass = rho.sum() * dx
    for _ in range(steps):
        flux[1:-1] = forward * rho[:-1] + backward * rho[1:] - diffusion * (rho[1:] - rho[:-1])
        rho -= ratio * (flux[1:] - flux[:-1])
        new_mass = rho.sum() * dx
        if abs(new_mass - mass) > STEP_DRIFT_LIMIT:
            raise SolverError(f"Mass drifted by {abs(new_mass - mass):.3g} in one step")
        mass = new_mass

    drift = abs(mass - 1.0)
    if drift > DRIFT_RATE_LIMIT * max(T, 1.0):
        raise SolverError(f"Mass drifted by {drift:.3g} over T={T}")
    if drift > 0:
        logger.debug(f"Fokker-Planck solve renormalized a mass drift of {drift:.3g}")
    return GridDensity.from_masses(grid, np.clip(rho, 0.0, None) * dx)


def tv_distance(a: GridDensity, b: GridDensity) -> float:
    """(1/2) sum |a_i - b_i| dx."""
    if a.grid != b.grid:
        raise ContractViolation("Densities live on different grids")
    return float(0.5 * np.sum(np.abs(a.values - b.values)) * a.grid.dx)


def histogram(particles: np.ndarray, grid: Grid1D) -> GridDensity:
    """Normalized cell counts; particles outside the grid go to the nearest end cell."""
    values = np.asarray(particles, dtype=float)
    if values.ndim == 2:
        if values.shape[1] != 1:
            raise ContractViolation("Histograms are one-dimensional")
        values = values[:, 0]
    if values.size == 0:
        raise ContractViolation("Cannot histogram an empty particle set")
    outside = int(np.sum((values < grid.left) | (values > grid.right)))
    if outside:
        logger.warning(f"Histogram clipped {outside} particle(s) outside [{grid.left}, {grid.right}]")
    cells = np.clip(np.floor((values - grid.left) / grid.dx).astype(np.intp), 0, grid.cells - 1)
    counts = np.bincount(cells, minlength=grid.cells).astype(float)
    return GridDensity.from_masses(grid, counts, clipped=outside)


@dataclass
class _QuantilePieces:
    """Intervals of u in [0, 1] on which both quantile functions are linear."""
    cell: np.ndarray
    length: np.ndarray
    offset: np.ndarray
    alpha: np.ndarray
    beta_length: np.ndarray


def _cell_bounds(masses: np.ndarray):
    ends = np.cumsum(masses)
    ends[-1] = 1.0
    starts = np.concatenate(([0.0], ends[:-1]))
    return starts, ends, ends - starts


def _quantile_pieces(w_a: np.ndarray, w_b: np.ndarray, grid: Grid1D) -> _QuantilePieces:
    starts_a, ends_a, width_a = _cell_bounds(w_a)
    starts_b, ends_b, width_b = _cell_bounds(w_b)
    knots = np.unique(np.concatenate(([0.0, 1.0], ends_a, ends_b)))
    knots = knots[(knots >= 0.0) & (knots <= 1.0)]
    start, length = knots[:-1], np.diff(knots)
    keep = length > 0
    start, length = start[keep], length[keep]
    mid = start + 0.5 * length
    last = grid.cells - 1
    ia = np.minimum(np.searchsorted(ends_a, mid, side="right"), last)
    ib = np.minimum(np.searchsorted(ends_b, mid, side="right"), last)
    dx, edges = grid.dx, grid.edges
    offset_a = start - starts_a[ia]
    offset_b = start - starts_b[ib]
    q_a = edges[ia] + dx * offset_a / width_a[ia]
    q_b = edges[ib] + dx * offset_b / width_b[ib]
    # beta * length, formed from length / width so tiny cells cannot overflow
    beta_length = dx * (length / width_a[ia]) - dx * (length / width_b[ib])
    return _QuantilePieces(ia, length, offset_a, q_a - q_b, beta_length)


def _w2_value(pieces: _QuantilePieces) -> float:
    a, bl, length = pieces.alpha, pieces.beta_length, pieces.length
    return float(np.sum(length * (a ** 2 + a * bl + bl ** 2 / 3.0)))


def _w2_gradient(pieces: _QuantilePieces, w_a: np.ndarray, grid: Grid1D) -> np.ndarray:
    """
    Gradient of W2^2(b, a) with respect to the cell masses of a (on the simplex,
    up to an additive constant).
    """
    a, bl, length, offset = pieces.alpha, pieces.beta_length, pieces.length, pieces.offset
    cells = grid.cells
    integral = np.bincount(pieces.cell, length * (a + 0.5 * bl), minlength=cells)
    moment = np.bincount(
        pieces.cell,
        length * (a * offset + 0.5 * a * length + 0.5 * bl * offset + bl * length / 3.0),
        minlength=cells,
    )
    _, _, width = _cell_bounds(w_a)
    positive = width > 0
    per_cell = np.divide(integral, width, out=np.zeros(cells), where=positive)
    tail = np.cumsum(per_cell[::-1])[::-1] - per_cell
    own = np.divide(moment, width ** 2, out=np.zeros(cells), where=positive)
    return -2.0 * grid.dx * (tail + own)


def w2_grid(a: GridDensity, b: GridDensity) -> float:
    """Exact W2^2 between two piecewise-constant densities on the same grid."""
    if a.grid != b.grid:
        raise ContractViolation("Densities live on different grids")
    return _w2_value(_quantile_pieces(a.masses, b.masses, a.grid))


class _JKOObjective:
    """KL(w || target) + W2^2(prev, w) / (2h) over cell masses w."""

    def __init__(self, prev: np.ndarray, target: np.ndarray, h: float, grid: Grid1D):
        self.prev = prev
        self.target = target
        self.log_target = np.log(target)
        self.scale = 1.0 / (2.0 * h)
        self.grid = grid

    def value(self, w: np.ndarray) -> float:
        kl = float(np.sum(rel_entr(w, self.target)))
        return kl + self.scale * _w2_value(_quantile_pieces(w, self.prev, self.grid))

    def w2_gradient(self, w: np.ndarray) -> np.ndarray:
        total = w.sum()
        unit = w / total
        grad = _w2_gradient(_quantile_pieces(unit, self.prev, self.grid), unit, self.grid)
        return (grad - unit @ grad) / total

    def gradient(self, w: np.ndarray) -> np.ndarray:
        kl_grad = np.log(w) - self.log_target + 1.0
        return kl_grad + self.scale * self.w2_gradient(w)

    def scaled_hessian(self, w: np.ndarray, step: float = 1e-5) -> np.ndarray:
        """diag(w) H diag(w), with the W2 block from central differences of its gradient."""
        cells = w.size
        hessian = np.empty((cells, cells))
        for j in range(cells):
            bumped_up, bumped_down = w.copy(), w.copy()
            bumped_up[j] *= 1.0 + step
            bumped_down[j] *= 1.0 - step
            hessian[:, j] = w * (self.w2_gradient(bumped_up) - self.w2_gradient(bumped_down)) / (2.0 * step)
        hessian = self.scale * 0.5 * (hessian + hessian.T)
        hessian[np.diag_indices(cells)] += w
        return hessian


def _newton_log_direction(hessian: np.ndarray, residual: np.ndarray, w: np.ndarray) -> Optional[np.ndarray]:
    """Solve hessian z = -residual subject to w.z = 0 with symmetric diagonal scaling."""
    diagonal = np.diag(hessian)
    if np.any(diagonal <= 0):
        return None
    scale = 1.0 / np.sqrt(diagonal)
    cells = w.size
    system = np.zeros((cells + 1, cells + 1))
    system[:cells, :cells] = scale[:, None] * hessian * scale[None, :]
    system[:cells, cells] = system[cells, :cells] = scale * w
    rhs = np.concatenate((-scale * residual, [0.0]))
    try:
        solution = solve(system, rhs, assume_a="sym")
    except (LinAlgError, ValueError):
        return None
    direction = scale * solution[:cells]
    return direction if np.all(np.isfinite(direction)) else None


def jko_step_1d(
    prev: GridDensity,
    target_log_density: np.ndarray,
    h: float,
    tol: float = 1e-8,
    max_iter: int = 100,
    history: Optional[List[float]] = None,
) -> GridDensity:
    """
    One JKO step: argmin over grid densities rho of KL(rho || p) + W2^2(prev, rho) / (2h).

    The minimizer is found with multiplicative updates w <- w exp(t z) / Z,
    where z is the Newton direction of the (convex) objective expressed in log
    coordinates and t comes from a backtracking line search, so the objective
    never increases. Iteration stops once max_i w_i |g_i - <w, g>| <= tol.

    Args:
        prev: previous density
        target_log_density: unnormalized log p at the grid centers
        h: proximity step
        history: optional list receiving the objective after every inner iteration

    Raises:
        JKOConvergenceError: when max_iter iterations do not reach tol
    """
    grid = prev.grid
    if h <= 0:
        raise ContractViolation(f"JKO step size must be positive, got {h}")
    log_target = np.asarray(target_log_density, dtype=float) + math.log(grid.dx)
    if log_target.shape != (grid.cells,) or not np.all(np.isfinite(log_target)):
        raise ContractViolation("Target log-density must be finite on every grid cell")
    target = np.exp(log_target - logsumexp(log_target))

    objective = _JKOObjective(prev.masses, target, h, grid)
    w = 0.999999 * prev.masses + 1e-6 * target
    w /= w.sum()
    current = objective.value(w)
    if history is not None:
        history.append(current)

    for iteration in range(1, max_iter + 1):
        grad = objective.gradient(w)
        residual = w * (grad - w @ grad)
        stationarity = float(np.max(np.abs(residual)))
        if stationarity <= tol:
            logger.debug(f"JKO converged after {iteration - 1} iterations (objective {current:.10g})")
            return GridDensity.from_masses(grid, w)

        direction = _newton_log_direction(objective.scaled_hessian(w), residual, w)
        if direction is None or residual @ direction >= 0:
            direction = -(grad - w @ grad)
        slope = float(residual @ direction)
        if -slope <= 1e-14 * max(1.0, abs(current)):
            # Newton decrement below the objective's rounding level
            logger.debug(f"JKO numerically stationary after {iteration - 1} iterations (residual {stationarity:.3g})")
            return GridDensity.from_masses(grid, w)

        step = 1.0
        accepted = False
        for _ in range(60):
            trial = w * np.exp(np.clip(step * direction, -50.0, 50.0))
            trial /= trial.sum()
            value = objective.value(trial)
            if value <= current + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted or value >= current:
            # Line search stalled: only numerically stationary points are accepted
            if stationarity <= math.sqrt(tol):
                logger.debug(f"JKO line search stalled at stationarity {stationarity:.3g}; accepting")
                return GridDensity.from_masses(grid, w)
            raise JKOConvergenceError(
                f"JKO line search stalled at stationarity {stationarity:.3g}", last_objective=current
            )
        if value > current:
            raise SolverError("JKO objective increased")
        w, current = trial, value
        if history is not None:
            history.append(current)

    raise JKOConvergenceError(f"JKO did not converge in {max_iter} iterations", last_objective=current)


def gibbs_density(grid: Grid1D, model: TargetModel) -> GridDensity:
    """Discretized exp(-U) / Z with Z from grid quadrature."""
    if model.dim != 1:
        raise ContractViolation("The grid oracle is one-dimensional")
    return GridDensity.from_log_density(grid, model.log_density(grid.centers[:, None]))
