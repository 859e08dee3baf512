"""Particle Samplers

SGLD, SGHMC, SVGD and particle-optimized SG-MCMC (SVGD driven by a noisy
Stein direction plus Polyak momentum), sharing one seeded run loop.

Every Gaussian draw comes from a stream keyed by (seed, purpose, iteration);
row i of a draw belongs to particle i. A step therefore depends only on its
inputs, never on how many threads or runs share the process.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from kernels import RbfKernel, median_heuristic
from stein import stein_direction
from targets import ContractViolation, MinibatchSchedule, TargetModel

logger = logging.getLogger(__name__)

SAMPLER_IDS = ("sgld", "sghmc", "svgd", "po_sgmcmc")

INIT_STREAM = 1
NOISE_STREAM = 2

ADAGRAD_DECAY = 0.9
ADAGRAD_FUDGE = 1e-6


class DivergenceError(ArithmeticError):
    """Raised when a step produces non-finite particles"""

    def __init__(self, message: str, particle_index: int, iteration: int):
        super().__init__(message)
        self.particle_index = particle_index
        self.iteration = iteration
        self.trace: Optional["RunTrace"] = None


@dataclass(frozen=True)
class SamplerConfig:
    """
    Sampler hyperparameters.

    stepsize: h; momentum: mu in [0, 1); noise_scale / noise_decay: sigma_l = sigma_0 / l^gamma;
    friction: SGHMC B; inject_noise=False zeroes every Gaussian draw (test hook).
    """
    stepsize: float = 0.1
    momentum: float = 0.1
    noise_scale: float = 0.1
    noise_decay: float = 0.55
    friction: float = 1.0
    batch_size: int = 32
    seed: int = 0
    particles: int = 20
    hook_every: int = 10
    adagrad: bool = False
    inject_noise: bool = True

    def __post_init__(self):
        checks = [
            (self.stepsize >= 0 and np.isfinite(self.stepsize), "stepsize must be finite and >= 0"),
            (0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)"),
            (self.noise_scale >= 0, "noise_scale must be >= 0"),
            (self.noise_decay >= 0, "noise_decay must be >= 0"),
            (self.friction > 0, "friction must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (0 <= self.seed < 2 ** 64, "seed must be a 64-bit unsigned integer"),
            (self.particles >= 1, "particles must be >= 1"),
            (self.hook_every >= 1, "hook_every must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ContractViolation(f"Invalid sampler config: {message}")

    def noise_level(self, iteration: int) -> float:
        """sigma_l = sigma_0 / max(l, 1)^gamma."""
        return self.noise_scale / max(iteration, 1) ** self.noise_decay


@dataclass(frozen=True)
class GaussianInit:
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class PointMassInit:
    point: np.ndarray


@dataclass
class SamplerState:
    """Particles at the current and previous iterate plus per-sampler auxiliaries."""
    current: np.ndarray
    previous: np.ndarray
    momentum: np.ndarray
    iteration: int = 0
    seed: int = 0
    adagrad_history: Optional[np.ndarray] = None


def gaussian_block(config: SamplerConfig, iteration: int, shape, stream: int = NOISE_STREAM) -> np.ndarray:
    """Standard normal draws for one iteration; row i belongs to particle i."""
    if not config.inject_noise:
        return np.zeros(shape)
    rng = np.random.default_rng([config.seed, stream, iteration])
    return rng.standard_normal(shape)


def init_particles(config: SamplerConfig, model: TargetModel, init=None) -> SamplerState:
    """
    Draw M initial particles.

    `init` may be a GaussianInit, a PointMassInit or None (the model's prior
    when it has one, otherwise N(0, I)).
    """
    shape = (config.particles, model.dim)
    rng = np.random.default_rng([config.seed, INIT_STREAM])
    if isinstance(init, PointMassInit):
        point = np.asarray(init.point, dtype=float)
        if point.shape != (model.dim,):
            raise ContractViolation(f"Point mass has shape {point.shape}, model dimension is {model.dim}")
        particles = np.tile(point, (config.particles, 1))
    elif isinstance(init, GaussianInit):
        particles = init.mean + init.std * rng.standard_normal(shape)
    elif init is None and model.prior is not None:
        particles = model.prior.sample(rng, config.particles)
    elif init is None:
        particles = rng.standard_normal(shape)
    else:
        raise ContractViolation(f"Unsupported init spec {init!r}")
    return SamplerState(
        current=particles,
        previous=particles.copy(),
        momentum=np.zeros(shape),
        iteration=0,
        seed=config.seed,
    )


def _finite_or_raise(particles: np.ndarray, iteration: int, sampler: str) -> np.ndarray:
    bad_rows = np.flatnonzero(~np.all(np.isfinite(particles), axis=1))
    if bad_rows.size:
        raise DivergenceError(
            f"{sampler} diverged at iteration {iteration} (particle {bad_rows[0]}); reduce the stepsize",
            particle_index=int(bad_rows[0]),
            iteration=iteration,
        )
    return particles


def _scores(model: TargetModel, particles: np.ndarray, batch, iteration: int, sampler: str) -> np.ndarray:
    return _finite_or_raise(model.raw_score(particles, batch), iteration, sampler)


def _adagrad(state: SamplerState, direction: np.ndarray):
    """AdaGrad rescaling with exponentially decayed history (plain sum on the first step)."""
    if state.adagrad_history is None:
        history = direction ** 2
    else:
        history = ADAGRAD_DECAY * state.adagrad_history + (1 - ADAGRAD_DECAY) * direction ** 2
    return direction / (ADAGRAD_FUDGE + np.sqrt(history)), history


def sgld_step(state: SamplerState, model: TargetModel, config: SamplerConfig, batch=None) -> SamplerState:
    """theta <- theta - h grad U~(theta) + sqrt(2h) delta, every particle an independent chain."""
    iteration = state.iteration + 1
    theta = state.current
    grads = _scores(model, theta, batch, iteration, "sgld")
    noise = gaussian_block(config, iteration, theta.shape)
    h = config.stepsize
    updated = theta + h * grads + np.sqrt(2.0 * h) * noise
    return replace(state, current=_finite_or_raise(updated, iteration, "sgld"), previous=theta, iteration=iteration)


def sghmc_step(state: SamplerState, model: TargetModel, config: SamplerConfig, batch=None) -> SamplerState:
    """
    Euler step of second-order Langevin dynamics.

    theta <- theta + q h;  q <- q - (B q + grad U~(theta)) h + sqrt(2 B h) delta,
    both right-hand sides evaluated at the old (theta, q).
    """
    iteration = state.iteration + 1
    theta, q = state.current, state.momentum
    grads = _scores(model, theta, batch, iteration, "sghmc")
    noise = gaussian_block(config, iteration, theta.shape)
    h, friction = config.stepsize, config.friction
    updated = _finite_or_raise(theta + q * h, iteration, "sghmc")
    q_next = _finite_or_raise(q - (friction * q - grads) * h + np.sqrt(2.0 * friction * h) * noise, iteration, "sghmc")
    return replace(state, current=updated, previous=theta, momentum=q_next, iteration=iteration)


def _stein_update(state: SamplerState, model: TargetModel, batch, iteration: int, sampler: str) -> np.ndarray:
    theta = state.current
    kernel = RbfKernel(median_heuristic(theta))
    logger.debug(f"{sampler} iteration {iteration}: bandwidth^2={kernel.bandwidth_sq:.6g}")
    grads = _scores(model, theta, batch, iteration, sampler)
    return stein_direction(theta, model, kernel, grads)


def svgd_step(state: SamplerState, model: TargetModel, config: SamplerConfig, batch=None) -> SamplerState:
    """theta_i <- theta_i + h phi(theta_i), bandwidth re-chosen by the median heuristic each step."""
    iteration = state.iteration + 1
    theta = state.current
    direction = _stein_update(state, model, batch, iteration, "svgd")
    history = state.adagrad_history
    if config.adagrad:
        direction, history = _adagrad(state, direction)
    updated = theta + config.stepsize * direction
    return replace(state, current=_finite_or_raise(updated, iteration, "svgd"), previous=theta,
                   iteration=iteration, adagrad_history=history)


def po_sgmcmc_step(state: SamplerState, model: TargetModel, config: SamplerConfig, batch=None) -> SamplerState:
    """
    Particle-optimized SG-MCMC step.

    theta_i <- theta_i + h (phi(theta_i) + sigma_l delta_i) + mu (theta_i - theta_i_prev)

    The Stein term enters with a plus sign (ascent, as in SVGD). With sigma_0 = 0
    this is SVGD with Polyak momentum, and with mu = 0 as well it is SVGD.
    """
    iteration = state.iteration + 1
    theta = state.current
    phi = _stein_update(state, model, batch, iteration, "po_sgmcmc")
    noise = gaussian_block(config, iteration, theta.shape)
    direction = phi + config.noise_level(iteration) * noise
    history = state.adagrad_history
    if config.adagrad:
        direction, history = _adagrad(state, direction)
    updated = theta + config.stepsize * direction + config.momentum * (theta - state.previous)
    return replace(state, current=_finite_or_raise(updated, iteration, "po_sgmcmc"), previous=theta,
                   iteration=iteration, adagrad_history=history)


STEP_FUNCTIONS: Dict[str, Callable[..., SamplerState]] = {
    "sgld": sgld_step,
    "sghmc": sghmc_step,
    "svgd": svgd_step,
    "po_sgmcmc": po_sgmcmc_step,
}


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    wall_time: float
    metric: str
    value: float
    seed: int
    sampler: str


@dataclass
class RunTrace:
    """Append-only metric records; iterations strictly increase within each metric."""
    sampler: str
    seed: int
    records: List[TraceRecord] = field(default_factory=list)
    _last: Dict[str, int] = field(default_factory=dict, repr=False)

    def append(self, iteration: int, metric: str, value: float, wall_time: float = 0.0):
        if iteration <= self._last.get(metric, -1):
            raise ContractViolation(f"Trace for '{metric}' must have increasing iterations, got {iteration}")
        self._last[metric] = iteration
        self.records.append(TraceRecord(iteration, wall_time, metric, float(value), self.seed, self.sampler))

    def stream(self, metric: str) -> List[TraceRecord]:
        return [record for record in self.records if record.metric == metric]

    def __len__(self):
        return len(self.records)


MetricHook = Callable[[SamplerState], float]


def run(
    sampler: str,
    model: TargetModel,
    config: SamplerConfig,
    iterations: int,
    hooks: Optional[Mapping[str, MetricHook]] = None,
    init=None,
    state: Optional[SamplerState] = None,
):
    """
    Run a sampler for a fixed number of iterations.

    Minibatches come from a shuffled-epoch schedule seeded by the config.
    Hooks are evaluated after every `config.hook_every`-th iteration.

    Returns:
        (RunTrace, final SamplerState)

    Raises:
        DivergenceError: with the trace gathered so far attached as `.trace`
    """
    if sampler not in STEP_FUNCTIONS:
        raise ContractViolation(f"Unknown sampler '{sampler}', expected one of {', '.join(SAMPLER_IDS)}")
    if iterations < 0:
        raise ContractViolation(f"Iteration budget must be >= 0, got {iterations}")
    step = STEP_FUNCTIONS[sampler]
    hooks = dict(hooks or {})
    state = state if state is not None else init_particles(config, model, init)
    schedule = MinibatchSchedule(model.dataset_size, config.batch_size, config.seed)
    trace = RunTrace(sampler=sampler, seed=config.seed)

    logger.info(f"Running {sampler} (seed={config.seed}, M={state.current.shape[0]}) for {iterations} iterations")
    started = time.perf_counter()
    for _ in range(iterations):
        try:
            state = step(state, model, config, schedule.next_batch())
        except DivergenceError as e:
            logger.warning(f"{sampler} seed {config.seed}: {e}")
            e.trace = trace
            raise
        if state.iteration % config.hook_every == 0:
            elapsed = time.perf_counter() - started
            for name, hook in hooks.items():
                trace.append(state.iteration, name, hook(state), wall_time=elapsed)
    logger.info(f"Finished {sampler} seed {config.seed} in {time.perf_counter() - started:.2f}s")
    return trace, state
