"""Validation Suites

Named invariant checks behind `validate <suite>`. Each suite returns a list
of CheckResult; the command passes only when every check passes.
"""

import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List

import numpy as np

from fpe_oracle import (
    DiffusionSpec,
    Grid1D,
    GridDensity,
    fp_solve_1d,
    gibbs_density,
    histogram,
    jko_step_1d,
    stable_timestep,
    tv_distance,
)
from metrics import jsd_discrete, kl_discrete, w2_quadratic, w2_sorted_1d
from samplers import SamplerConfig, init_particles, po_sgmcmc_step, sgld_step, svgd_step
from targets import (
    DoubleWellTarget,
    GaussianMixtureTarget,
    GaussianTarget,
    LogisticRegressionTarget,
    TargetModel,
    potential_energy,
    stochastic_grad,
)
from tools.datasets import Dataset

logger = logging.getLogger(__name__)

GRADCHECK_FLOOR = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check(name: str, passed: bool, detail: str) -> CheckResult:
    result = CheckResult(name, bool(passed), detail)
    log = logger.info if result.passed else logger.warning
    log(f"{name}: {'pass' if result.passed else 'FAIL'} ({detail})")
    return result


# gradcheck

def shipped_targets(seed: int = 0) -> List[TargetModel]:
    """One instance of every shipped target, the logistic one on a small random dataset."""
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((6, 4))
    labels = np.where(rng.uniform(size=6) < 0.5, -1.0, 1.0)
    return [
        GaussianTarget(dim=3, mean=[0.5, -1.0, 2.0], variance=[1.0, 0.5, 2.0]),
        GaussianMixtureTarget(dim=2, separation=1.5),
        DoubleWellTarget(dim=2),
        LogisticRegressionTarget(Dataset(features, labels), prior_precision=0.5),
    ]


def finite_difference_error(model: TargetModel, theta: np.ndarray, step: float = 1e-6) -> float:
    """
    Relative error |analytic - numeric| / |numeric| of the gradient of log p.

    Central differences of -U use a per-coordinate step of step * (1 + |theta_j|).
    """
    theta = np.asarray(theta, dtype=float)
    numeric = np.empty(model.dim)
    for j in range(model.dim):
        bump = np.zeros(model.dim)
        bump[j] = step * (1.0 + abs(theta[j]))
        numeric[j] = (potential_energy(model, theta - bump) - potential_energy(model, theta + bump)) / (2 * bump[j])
    analytic = model.grad_log_density(theta)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), GRADCHECK_FLOOR))


def minibatch_bias(model: LogisticRegressionTarget, theta: np.ndarray, batch_size: int) -> float:
    """Largest absolute gap between the exhaustive average of stochastic_grad over all batches and the full gradient."""
    batches = list(itertools.combinations(range(model.dataset_size), batch_size))
    average = np.mean([stochastic_grad(model, theta, np.array(b)) for b in batches], axis=0)
    full = model.grad_log_density(theta)
    return float(np.max(np.abs(average - full)))


def suite_gradcheck(points: int = 100, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for model in shipped_targets(seed):
        worst = max(finite_difference_error(model, rng.standard_normal(model.dim)) for _ in range(points))
        results.append(_check(f"finite-difference {model.name}", worst <= 1e-5, f"max rel err {worst:.2e}"))
    logistic = shipped_targets(seed)[-1]
    worst = max(minibatch_bias(logistic, rng.standard_normal(logistic.dim), 2) for _ in range(10))
    results.append(_check("minibatch unbiasedness N=6 n=2", worst <= 1e-12, f"max abs diff {worst:.2e}"))
    return results


# fpe

def suite_fpe() -> List[CheckResult]:
    results = []

    grid = Grid1D(-12.0, 12.0, 480)
    heat = DiffusionSpec(drift=lambda x: np.zeros_like(x), diffusion=1.0)
    start = GridDensity.gaussian(grid, 0.0, 1.0)
    spread = fp_solve_1d(heat, start, grid, 1.0, stable_timestep(heat, grid))
    growth = spread.variance() - start.variance()
    results.append(_check("heat equation variance growth", abs(growth - 2.0) <= 0.04, f"growth {growth:.4f}, expected 2"))

    grid = Grid1D(-6.0, 6.0, 3000)
    ou = DiffusionSpec.ornstein_uhlenbeck()
    gibbs = GridDensity.gaussian(grid, 0.0, 1.0)
    after = fp_solve_1d(ou, gibbs, grid, 1.0, stable_timestep(ou, grid))
    tv = tv_distance(gibbs, after)
    results.append(_check("Ornstein-Uhlenbeck stationarity", tv < 1e-3, f"TV {tv:.2e} over T=1"))

    well = DoubleWellTarget(dim=1)
    spec = DiffusionSpec.langevin(well)
    grid = Grid1D(-3.5, 3.5, 700)
    relaxed = fp_solve_1d(spec, GridDensity.gaussian(grid, 0.0, 1.0), grid, 8.0, stable_timestep(spec, grid))
    tv = tv_distance(relaxed, gibbs_density(grid, well))
    results.append(_check("double-well relaxation to Gibbs", tv < 0.02, f"TV {tv:.2e} at T=8"))

    results.append(sgld_double_well_check())
    return results


def sgld_double_well_check(chains: int = 1000, snapshots: int = 100, seed: int = 0) -> CheckResult:
    """Pooled SGLD samples on the double well against the long-time Fokker-Planck density."""
    well = DoubleWellTarget(dim=1)
    config = SamplerConfig(stepsize=0.01, particles=chains, seed=seed)
    state = init_particles(config, well)
    samples = []
    for _ in range(2000):
        state = sgld_step(state, well, config)
    for _ in range(snapshots):
        for _ in range(100):
            state = sgld_step(state, well, config)
        samples.append(state.current[:, 0].copy())

    fine = Grid1D(-3.0, 3.0, 600)
    spec = DiffusionSpec.langevin(well)
    stationary = fp_solve_1d(spec, GridDensity.gaussian(fine), fine, 10.0, stable_timestep(spec, fine))
    coarse = stationary.coarsen(10)
    tv = tv_distance(histogram(np.concatenate(samples), coarse.grid), coarse)
    return _check("SGLD vs Fokker-Planck on the double well", tv < 0.05, f"TV {tv:.3f} from {chains * snapshots} samples")


# jko

JKO_GRID = Grid1D(-4.0, 4.0, 100)


def jko_flow(prev: GridDensity, log_target: np.ndarray, h: float, steps: int) -> GridDensity:
    for _ in range(steps):
        prev = jko_step_1d(prev, log_target, h)
    return prev


def jko_vs_fokker_planck(h: float, total_time: float, refine: int = 10) -> float:
    """TV between K = T/h JKO steps and the Fokker-Planck solution at T, Ornstein-Uhlenbeck from N(1.5, 0.5^2)."""
    grid = JKO_GRID
    steps = int(round(total_time / h))
    log_target = -0.5 * grid.centers ** 2
    jko = jko_flow(GridDensity.gaussian(grid, 1.5, 0.5), log_target, h, steps)
    fine = grid.refine(refine)
    ou = DiffusionSpec.ornstein_uhlenbeck()
    exact = fp_solve_1d(ou, GridDensity.gaussian(fine, 1.5, 0.5), fine, steps * h, stable_timestep(ou, fine))
    return tv_distance(jko, exact.coarsen(refine))


def suite_jko() -> List[CheckResult]:
    grid = Grid1D(-5.0, 5.0, 100)
    results = []
    log_target = -0.25 * (grid.centers ** 2 - 1.0) ** 2
    start = GridDensity.gaussian(grid, 1.0, 0.7)
    target = GridDensity.from_log_density(grid, log_target)

    tv = tv_distance(jko_step_1d(start, log_target, 1e6), target)
    results.append(_check("large h reaches the target", tv < 1e-3, f"TV {tv:.2e}"))
    tv = tv_distance(jko_step_1d(start, log_target, 1e-8), start)
    results.append(_check("small h stays at prev", tv < 1e-3, f"TV {tv:.2e}"))

    history: List[float] = []
    jko_step_1d(start, log_target, 0.05, history=history)
    monotone = all(b <= a for a, b in zip(history, history[1:]))
    results.append(_check("objective non-increasing", monotone, f"{len(history)} objective values"))

    tv = jko_vs_fokker_planck(0.01, 0.5)
    results.append(_check("50 JKO steps vs Fokker-Planck at T=0.5", tv <= 0.05, f"TV {tv:.4f}"))
    errors = [jko_vs_fokker_planck(h, 0.48) for h in (0.04, 0.02, 0.01)]
    decreasing = errors[0] > errors[1] > errors[2]
    results.append(_check("TV shrinks as h halves", decreasing, ", ".join(f"{e:.4f}" for e in errors)))
    return results


# momentum-equivalence

def _loop_median_bandwidth(particles: np.ndarray) -> float:
    count = len(particles)
    if count < 2:
        return 1.0
    distances = sorted(
        math.sqrt(sum((a - b) ** 2 for a, b in zip(particles[i], particles[j])))
        for i in range(count) for j in range(i + 1, count)
    )
    median = distances[(len(distances) - 1) // 2]
    if median <= 0:
        return 1.0
    return median ** 2 / math.log(count + 1)


def reference_momentum_svgd(particles: np.ndarray, score: Callable[[np.ndarray], np.ndarray],
                            stepsize: float, momentum: float, steps: int) -> np.ndarray:
    """
    Polyak-momentum SVGD written out pair by pair:
    v <- mu v + h phi(theta), theta <- theta + v.
    """
    theta = [np.array(row, dtype=float) for row in particles]
    velocity = [np.zeros_like(row) for row in theta]
    count = len(theta)
    for _ in range(steps):
        bandwidth = _loop_median_bandwidth(np.array(theta))
        phi = []
        for i in range(count):
            total = np.zeros_like(theta[i])
            for j in range(count):
                diff = theta[j] - theta[i]
                k = math.exp(-float(diff @ diff) / bandwidth)
                total += k * score(theta[j]) - (2.0 / bandwidth) * k * diff
            phi.append(total / count)
        velocity = [momentum * v + stepsize * p for v, p in zip(velocity, phi)]
        theta = [t + v for t, v in zip(theta, velocity)]
    return np.array(theta)


def suite_momentum_equivalence(seed: int = 0) -> List[CheckResult]:
    model = GaussianTarget(dim=5, mean=[1.0, -0.5, 0.0, 2.0, 0.5], variance=[1.0, 2.0, 0.5, 1.5, 1.0])
    config = SamplerConfig(stepsize=0.05, momentum=0.1, noise_scale=0.0, particles=20, seed=seed)
    state = init_particles(config, model)
    start = state.current.copy()
    for _ in range(100):
        state = po_sgmcmc_step(state, model, config)
    reference = reference_momentum_svgd(start, lambda t: model.grad_log_density(t), 0.05, 0.1, 100)
    gap = float(np.max(np.abs(state.current - reference)))
    results = [_check("PO-SG-MCMC (sigma=0) vs momentum SVGD, 100 steps", gap <= 1e-12, f"max |diff| {gap:.2e}")]

    plain = replace(config, momentum=0.0)
    po_state = svgd_state = init_particles(plain, model)
    worst = 0.0
    for _ in range(100):
        po_state = po_sgmcmc_step(po_state, model, plain)
        svgd_state = svgd_step(svgd_state, model, plain)
        worst = max(worst, float(np.max(np.abs(po_state.current - svgd_state.current))))
    results.append(_check("PO-SG-MCMC (sigma=0, mu=0) vs SVGD", worst <= 1e-15, f"max |diff| {worst:.2e}"))
    return results


# lemma2

def random_distributions(rng: np.random.Generator, count: int, size: int) -> List[np.ndarray]:
    probs = rng.dirichlet(np.ones(size), size=count)
    return [row / row.sum() for row in probs]


def suite_lemma2(trials: int = 1000, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    nonnegative, identity, convex = True, True, True
    for _ in range(trials):
        size = int(rng.integers(2, 11))
        p, q, p2, q2 = random_distributions(rng, 4, size)
        kl, jsd = kl_discrete(p, q), jsd_discrete(p, q)
        nonnegative &= kl >= 0 and jsd >= 0
        identity &= kl_discrete(p, p) == 0 and jsd_discrete(p, p) == 0
        identity &= kl > 1e-12 and jsd > 1e-12
        mixed = kl_discrete(0.5 * (p + p2), 0.5 * (q + q2))
        convex &= mixed <= 0.5 * (kl + kl_discrete(p2, q2)) + 1e-12
    results = [
        _check("KL and JSD nonnegative", nonnegative, f"{trials} random pairs"),
        _check("zero iff equal", identity, f"{trials} random pairs"),
        _check("KL midpoint convexity", convex, f"{trials} random triples"),
    ]

    bounded, shift_exact = True, True
    for _ in range(500):
        count = int(rng.integers(1, 30))
        prev, cur = rng.standard_normal(count), rng.standard_normal(count) * rng.uniform(0.1, 3.0)
        bounded &= w2_quadratic(prev, cur) >= w2_sorted_1d(prev, cur) - 1e-12
        ordered = np.sort(prev)
        shifted = ordered + rng.normal()
        shift_exact &= abs(w2_quadratic(ordered, shifted) - w2_sorted_1d(ordered, shifted)) <= 1e-12
    results.append(_check("identity-coupling W2 upper-bounds sorted W2", bounded, "500 random pairs"))
    results.append(_check("equality under index-wise shift", shift_exact, "500 random pairs"))
    return results


SUITES: Dict[str, Callable[[], List[CheckResult]]] = {
    "gradcheck": suite_gradcheck,
    "fpe": suite_fpe,
    "jko": suite_jko,
    "momentum-equivalence": suite_momentum_equivalence,
    "lemma2": suite_lemma2,
}


class UnknownSuiteError(KeyError):
    """Raised when `validate` is asked for a suite that does not exist"""
    pass


def cmd_validate(suite: str) -> List[CheckResult]:
    if suite not in SUITES:
        raise UnknownSuiteError(f"Unknown suite '{suite}', expected one of {', '.join(SUITES)}")
    logger.info(f"Running validation suite '{suite}'")
    return SUITES[suite]()
