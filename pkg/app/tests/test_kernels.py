"""Unit tests for the RBF kernel and bandwidth rule"""

import math
import sys
import os

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from kernels import RbfKernel, median_heuristic, rbf_eval, rbf_grad_x
from targets import ContractViolation


class TestRbfKernel:

    def test_self_similarity(self):
        x = np.array([0.3, -2.0])
        assert rbf_eval(RbfKernel(0.7), x, x) == 1.0

    def test_unit_distance(self):
        assert rbf_eval(RbfKernel(1.0), np.array([0.0]), np.array([1.0])) == pytest.approx(math.exp(-1.0))

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        kernel = RbfKernel(1.3)
        for _ in range(100):
            x, y = rng.standard_normal(3), rng.standard_normal(3)
            assert rbf_eval(kernel, x, y) == rbf_eval(kernel, y, x)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            rbf_eval(RbfKernel(), np.zeros(2), np.zeros(3))

    def test_bandwidth_must_be_positive(self):
        with pytest.raises(ContractViolation):
            RbfKernel(0.0)

    def test_gram_properties(self):
        particles = np.random.default_rng(1).standard_normal((15, 4))
        gram = RbfKernel(2.0).gram(particles)
        np.testing.assert_array_equal(gram, gram.T)
        np.testing.assert_array_equal(np.diag(gram), np.ones(15))
        assert np.all((gram > 0) & (gram <= 1))


class TestRbfGradient:

    def test_zero_at_coincidence(self):
        x = np.array([1.0, 2.0])
        np.testing.assert_array_equal(rbf_grad_x(RbfKernel(), x, x), np.zeros(2))

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        kernel = RbfKernel(1.7)
        step = 1e-6
        for _ in range(20):
            x, y = rng.standard_normal(3), rng.standard_normal(3)
            numeric = np.array([
                (rbf_eval(kernel, x + step * e, y) - rbf_eval(kernel, x - step * e, y)) / (2 * step)
                for e in np.eye(3)
            ])
            analytic = rbf_grad_x(kernel, x, y)
            assert np.linalg.norm(analytic - numeric) <= 1e-6 * max(np.linalg.norm(analytic), 1e-3)

    def test_antisymmetry(self):
        x, y = np.array([0.5, -1.0]), np.array([2.0, 0.25])
        kernel = RbfKernel(0.9)
        np.testing.assert_allclose(rbf_grad_x(kernel, x, y), -rbf_grad_x(kernel, y, x), rtol=0, atol=1e-16)


class TestMedianHeuristic:

    def test_three_points(self):
        assert median_heuristic(np.array([[0.0], [1.0], [2.0]])) == pytest.approx(1.0 / math.log(4.0))

    def test_single_particle_fallback(self):
        assert median_heuristic(np.array([[3.0, 4.0]])) == 1.0

    def test_identical_particles_fallback(self):
        assert median_heuristic(np.ones((6, 2))) == 1.0

    def test_even_count_uses_lower_middle(self):
        # distances {1, 2, 3, 1, 2, 1}: sorted 1,1,1,2,2,3, lower middle = 1
        particles = np.array([[0.0], [1.0], [2.0], [3.0]])
        assert median_heuristic(particles) == pytest.approx(1.0 / math.log(5.0))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        particles = rng.standard_normal((11, 3))
        assert median_heuristic(particles) == median_heuristic(particles[rng.permutation(11)])


if __name__ == "__main__":
    print("Running kernels tests...")

    test = TestRbfKernel()
    test.test_self_similarity()
    print("✓ test_self_similarity passed")
    test.test_unit_distance()
    print("✓ test_unit_distance passed")
    test.test_symmetry()
    print("✓ test_symmetry passed")
    test.test_dimension_mismatch()
    print("✓ test_dimension_mismatch passed")
    test.test_bandwidth_must_be_positive()
    print("✓ test_bandwidth_must_be_positive passed")
    test.test_gram_properties()
    print("✓ test_gram_properties passed")

    test = TestRbfGradient()
    test.test_zero_at_coincidence()
    print("✓ test_zero_at_coincidence passed")
    test.test_finite_differences()
    print("✓ test_finite_differences passed")
    test.test_antisymmetry()
    print("✓ test_antisymmetry passed")

    test = TestMedianHeuristic()
    test.test_three_points()
    print("✓ test_three_points passed")
    test.test_single_particle_fallback()
    print("✓ test_single_particle_fallback passed")
    test.test_identical_particles_fallback()
    print("✓ test_identical_particles_fallback passed")
    test.test_even_count_uses_lower_middle()
    print("✓ test_even_count_uses_lower_middle passed")
    test.test_permutation_invariance()
    print("✓ test_permutation_invariance passed")

    print("\nAll kernels tests passed! ✓")
