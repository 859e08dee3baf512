"""Unit tests for the particle samplers and the run loop"""

import sys
import os
from dataclasses import replace

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from samplers import (
    DivergenceError,
    GaussianInit,
    PointMassInit,
    SamplerConfig,
    gaussian_block,
    init_particles,
    po_sgmcmc_step,
    run,
    sghmc_step,
    sgld_step,
    svgd_step,
)
from targets import ContractViolation, GaussianTarget, LogisticRegressionTarget
from tools.datasets import Dataset
from validation import reference_momentum_svgd

QUIET = dict(inject_noise=False)


class TestSamplerConfig:
    """Hyperparameter ranges"""

    @pytest.mark.parametrize("override", [
        dict(stepsize=-0.1), dict(momentum=1.0), dict(momentum=-0.1), dict(noise_scale=-1.0),
        dict(noise_decay=-0.5), dict(friction=0.0), dict(batch_size=0), dict(particles=0), dict(hook_every=0),
    ])
    def test_rejects_out_of_range(self, override):
        with pytest.raises(ContractViolation):
            SamplerConfig(**override)

    def test_noise_schedule(self):
        config = SamplerConfig(noise_scale=0.1, noise_decay=0.55)
        assert config.noise_level(0) == 0.1
        assert config.noise_level(1) == 0.1
        assert config.noise_level(100) == pytest.approx(0.1 / 100 ** 0.55)


class TestInitParticles:

    def test_seeded(self):
        config = SamplerConfig(seed=11, particles=30)
        model = GaussianTarget(dim=2)
        np.testing.assert_array_equal(init_particles(config, model).current, init_particles(config, model).current)

    def test_gaussian_init_mean(self):
        config = SamplerConfig(seed=1, particles=1000)
        state = init_particles(config, GaussianTarget(dim=2), GaussianInit(0.0, 1.0))
        assert np.all(np.abs(state.current.mean(axis=0)) < 0.1)

    def test_point_mass(self):
        state = init_particles(SamplerConfig(particles=4), GaussianTarget(dim=2), PointMassInit(np.array([1.5, -2.0])))
        np.testing.assert_array_equal(state.current, np.tile([1.5, -2.0], (4, 1)))

    def test_previous_equals_current(self):
        state = init_particles(SamplerConfig(), GaussianTarget(dim=3))
        np.testing.assert_array_equal(state.previous, state.current)
        assert state.iteration == 0
        assert not np.any(state.momentum)

    def test_logistic_prior_scale(self):
        data = Dataset(np.ones((4, 2)), [1, -1, 1, -1])
        config = SamplerConfig(seed=2, particles=2000)
        state = init_particles(config, LogisticRegressionTarget(data, prior_precision=0.25))
        assert state.current.std() == pytest.approx(2.0, rel=0.05)


class TestNoiseStreams:

    def test_block_depends_only_on_seed_and_iteration(self):
        config = SamplerConfig(seed=5)
        np.testing.assert_array_equal(gaussian_block(config, 3, (4, 2)), gaussian_block(config, 3, (4, 2)))
        assert not np.array_equal(gaussian_block(config, 3, (4, 2)), gaussian_block(config, 4, (4, 2)))

    def test_noise_hook_zeroes_draws(self):
        assert not np.any(gaussian_block(SamplerConfig(inject_noise=False), 1, (3, 3)))


class TestSgld:

    def test_zero_stepsize(self):
        model = GaussianTarget(dim=2)
        config = SamplerConfig(stepsize=0.0, particles=5)
        state = init_particles(config, model)
        after = sgld_step(state, model, config)
        np.testing.assert_array_equal(after.current, state.current)
        assert after.iteration == 1

    def test_noise_free_step_is_gradient_descent(self):
        model = GaussianTarget(dim=2, mean=[1.0, -1.0])
        config = SamplerConfig(stepsize=0.05, particles=3, **QUIET)
        state = init_particles(config, model)
        after = sgld_step(state, model, config)
        expected = state.current - 0.05 * (state.current - model.mean)
        np.testing.assert_allclose(after.current, expected, rtol=0, atol=1e-15)

    def test_translation_equivariance(self):
        config = SamplerConfig(stepsize=0.01, particles=8, seed=3)
        base, shifted = GaussianTarget(dim=1), GaussianTarget(dim=1, mean=4.0)
        a = init_particles(config, base, GaussianInit(0.0, 1.0))
        b = init_particles(config, shifted, GaussianInit(4.0, 1.0))
        for _ in range(50):
            a, b = sgld_step(a, base, config), sgld_step(b, shifted, config)
        np.testing.assert_allclose(b.current, a.current + 4.0, rtol=0, atol=1e-12)

    def test_divergence_reports_particle(self):
        model = GaussianTarget()
        config = SamplerConfig(stepsize=0.1, particles=3, **QUIET)
        state = init_particles(config, model, PointMassInit(np.array([0.0])))
        state.current[2, 0] = 1e308
        with pytest.raises(DivergenceError) as info:
            sgld_step(state, model, replace(config, stepsize=1e10))
        assert info.value.particle_index == 2
        assert info.value.iteration == 1

    @pytest.mark.slow
    def test_stationary_variance(self):
        """1-D N(0,1), h=1e-3, 2e5 steps; 50 independent chains pooled"""
        model = GaussianTarget()
        config = SamplerConfig(stepsize=1e-3, particles=50, seed=0)
        state = init_particles(config, model)
        total, total_sq, count = 0.0, 0.0, 0
        for _ in range(200_000):
            state = sgld_step(state, model, config)
            total += state.current.sum()
            total_sq += (state.current ** 2).sum()
            count += state.current.size
        variance = total_sq / count - (total / count) ** 2
        assert 0.9 <= variance <= 1.1


class TestSghmc:

    def test_first_noise_free_step(self):
        model = GaussianTarget(dim=2, mean=[0.5, 0.0])
        config = SamplerConfig(stepsize=0.1, particles=3, **QUIET)
        state = init_particles(config, model)
        after = sghmc_step(state, model, config)
        np.testing.assert_array_equal(after.current, state.current)
        np.testing.assert_allclose(after.momentum, model.score(state.current) * 0.1, rtol=0, atol=1e-16)

    def test_ballistic_motion_without_force(self):
        model = GaussianTarget(dim=1, variance=1e300)
        config = SamplerConfig(stepsize=0.5, friction=1e-300, particles=2, **QUIET)
        state = init_particles(config, model, PointMassInit(np.array([0.0])))
        state.momentum[:] = 2.0
        after = sghmc_step(state, model, config)
        np.testing.assert_array_equal(after.current, np.full((2, 1), 1.0))

    @pytest.mark.slow
    def test_stationary_variance(self):
        """1-D N(0,1), h=1e-3, B=1; 50 chains x 2e5 steps pooled after burn-in"""
        model = GaussianTarget()
        config = SamplerConfig(stepsize=1e-3, friction=1.0, particles=50, seed=1)
        state = init_particles(config, model)
        for _ in range(10_000):
            state = sghmc_step(state, model, config)
        samples = []
        for step in range(200_000):
            state = sghmc_step(state, model, config)
            if step % 10 == 0:
                samples.append(state.current[:, 0].copy())
        assert 0.85 <= np.var(np.concatenate(samples)) <= 1.15


class TestSvgd:

    def test_single_particle_is_gradient_ascent(self):
        model = GaussianTarget(dim=2, mean=[1.0, 2.0])
        config = SamplerConfig(stepsize=0.1, particles=1)
        state = init_particles(config, model)
        after = svgd_step(state, model, config)
        np.testing.assert_allclose(after.current, state.current + 0.1 * model.score(state.current), atol=1e-15)

    def test_reflection_symmetry(self):
        model = GaussianTarget()
        config = SamplerConfig(stepsize=0.2, particles=2)
        state = init_particles(config, model, PointMassInit(np.array([0.0])))
        state.current[:] = [[-0.3], [0.3]]
        state.previous[:] = state.current
        for _ in range(500):
            state = svgd_step(state, model, config)
        assert abs(state.current[0, 0] + state.current[1, 0]) <= 1e-10

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(3))
    def test_moments(self, seed):
        model = GaussianTarget()
        config = SamplerConfig(stepsize=0.1, particles=50, seed=seed)
        _, state = run("svgd", model, config, 2000, init=GaussianInit(0.0, 1.0))
        assert abs(state.current.mean()) < 0.05
        assert 0.85 <= state.current.var() <= 1.1


class TestPoSgmcmc:

    def test_reduces_to_svgd(self):
        model = GaussianTarget(dim=3, mean=[0.0, 1.0, -1.0])
        config = SamplerConfig(stepsize=0.1, momentum=0.0, noise_scale=0.0, particles=10, seed=7)
        po = svgd = init_particles(config, model)
        for _ in range(50):
            po, svgd = po_sgmcmc_step(po, model, config), svgd_step(svgd, model, config)
            assert np.max(np.abs(po.current - svgd.current)) <= 1e-15

    def test_matches_momentum_svgd(self):
        model = GaussianTarget(dim=5, mean=[1.0, -0.5, 0.0, 2.0, 0.5])
        config = SamplerConfig(stepsize=0.05, momentum=0.1, noise_scale=0.0, particles=20, seed=3)
        state = init_particles(config, model)
        start = state.current.copy()
        for _ in range(100):
            state = po_sgmcmc_step(state, model, config)
        reference = reference_momentum_svgd(start, model.grad_log_density, 0.05, 0.1, 100)
        assert np.max(np.abs(state.current - reference)) <= 1e-12

    def test_first_step_has_no_momentum(self):
        model = GaussianTarget(dim=2)
        config = SamplerConfig(stepsize=0.1, momentum=0.9, noise_scale=0.0, particles=6)
        state = init_particles(config, model)
        np.testing.assert_array_equal(
            po_sgmcmc_step(state, model, config).current,
            svgd_step(state, model, replace(config, momentum=0.0)).current,
        )

    def test_adagrad_bounds_the_step(self):
        model = GaussianTarget(dim=2)
        config = SamplerConfig(stepsize=0.01, momentum=0.0, particles=5, adagrad=True)
        state = init_particles(config, model, GaussianInit(50.0, 1.0))
        after = po_sgmcmc_step(state, model, config)
        # the first AdaGrad step divides each coordinate by its own magnitude
        assert np.max(np.abs(after.current - state.current)) <= 0.01 + 1e-9
        assert after.adagrad_history is not None

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(3))
    def test_moments(self, seed):
        model = GaussianTarget()
        config = SamplerConfig(stepsize=0.1, momentum=0.1, noise_scale=0.1, noise_decay=0.55, particles=50, seed=seed)
        _, state = run("po_sgmcmc", model, config, 2000, init=GaussianInit(0.0, 1.0))
        assert abs(state.current.mean()) < 0.1
        assert 0.8 <= state.current.var() <= 1.2


class TestRun:

    def test_zero_iterations(self):
        model = GaussianTarget()
        config = SamplerConfig(particles=4)
        initial = init_particles(config, model)
        trace, state = run("sgld", model, config, 0, hooks={"mean": lambda s: s.current.mean()}, state=initial)
        assert len(trace) == 0
        assert state is initial

    def test_hook_cadence(self):
        config = SamplerConfig(particles=4, hook_every=10)
        trace, _ = run("sghmc", GaussianTarget(), config, 100, hooks={"mean": lambda s: s.current.mean()})
        assert [r.iteration for r in trace.stream("mean")] == list(range(10, 101, 10))

    @pytest.mark.parametrize("sampler", ["sgld", "sghmc", "svgd", "po_sgmcmc"])
    def test_same_seed_same_trace(self, sampler):
        data = Dataset(np.random.default_rng(0).standard_normal((40, 3)), np.tile([1, -1], 20))
        model = LogisticRegressionTarget(data)
        config = SamplerConfig(particles=5, batch_size=8, stepsize=0.01, seed=42)
        hooks = {"norm": lambda s: float(np.linalg.norm(s.current))}
        first, _ = run(sampler, model, config, 30, hooks=hooks)
        second, _ = run(sampler, model, config, 30, hooks=hooks)
        assert [(r.iteration, r.value) for r in first.records] == [(r.iteration, r.value) for r in second.records]

    def test_unknown_sampler(self):
        with pytest.raises(ContractViolation):
            run("hmc", GaussianTarget(), SamplerConfig(), 10)

    def test_divergence_keeps_partial_trace(self):
        config = SamplerConfig(stepsize=3.0, particles=2, hook_every=1, **QUIET)
        model = GaussianTarget(variance=1e-3)
        with pytest.raises(DivergenceError) as info:
            run("sgld", model, config, 1000, hooks={"mean": lambda s: s.current.mean()})
        assert info.value.trace is not None
        assert len(info.value.trace) == info.value.iteration - 1


if __name__ == "__main__":
    print("Running samplers tests (slow calibration runs skipped)...")
    sys.exit(pytest.main([__file__, "-m", "not slow", "-q"]))
