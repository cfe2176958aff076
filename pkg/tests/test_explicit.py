import math

import chex
import jax.numpy as jnp
import numpy as np
import pytest

from jfom.certificates import FeatureBasis
from jfom.explicit import (
    LibraryTable,
    MixtureTrial,
    NormKind,
    TestFamily,
    brute_force_mixture,
    explicit_objective,
    mixture_pair,
    optimize_mixture,
    project_to_simplex,
    refine_tests,
    residual_vector,
    restricted_value,
    simplex_grid,
    tabulate,
)
from jfom.measures import Provenance, realized_cost
from jfom.rollout import ControlParameterization, Partition, segmented_rollout

CONTROLS = (-1.0, -0.5, 0.0, 0.5)


@pytest.fixture
def library(lqr1d):
    pairs = []
    for value in CONTROLS:
        theta = ControlParameterization.constant(lqr1d, 1, [value])
        _, pair = segmented_rollout(lqr1d, theta, Partition.uniform(0.0, 1.0, 1), step=0.05)
        pairs.append(pair)
    return pairs


def _synthetic(norm_kind=NormKind.MAX_ABS):
    return LibraryTable(jnp.array([1.0, 2.0, 3.0]), jnp.array([[1.0], [-1.0], [0.5]]), 1.0, norm_kind)


class TestTestFamily:

    def test_norms(self):
        r = jnp.array([3.0, -4.0])
        assert float(TestFamily.polynomial(1, 1).norm(r)) == 4.0
        assert float(TestFamily.polynomial(1, 1, 'euclidean').norm(r)) == 5.0

    def test_norm_kind_parse(self):
        assert NormKind.parse('inf') == NormKind.MAX_ABS
        assert NormKind.parse('max-abs') == NormKind.MAX_ABS
        assert NormKind.parse('Euclidean') == NormKind.EUCLIDEAN
        assert NormKind.parse(1) == NormKind.EUCLIDEAN
        with pytest.raises(ValueError):
            NormKind.parse('l1')

    def test_refine_keeps_prefix(self):
        tests = TestFamily.polynomial(1, 1)
        refined = refine_tests(tests, 3)
        assert refined.size == math.comb(2 + 3, 3)
        assert refined.basis.exponents[:tests.size] == tests.basis.exponents
        assert refined.basis.degree == 3
        assert refine_tests(refined, 3) is refined

    def test_refine_rejects_bad_requests(self):
        with pytest.raises(ValueError, match='below the current degree'):
            refine_tests(TestFamily.polynomial(1, 2), 1)
        with pytest.raises(ValueError, match='only polynomial'):
            refine_tests(TestFamily(FeatureBasis.radial(1, [(0.0, )], 1.0)), 2)


class TestResidualVector:

    def test_exact_library_has_zero_residuals(self, lqr1d, library):
        tests = TestFamily.polynomial(1, 2)
        for pair in library:
            residual = residual_vector(pair, lqr1d.initial_measure, tests, lqr1d)
            chex.assert_shape(residual.vector, (6, ))
            # the constant test sees only the mass balance
            assert float(residual.vector[0]) == pytest.approx(0.0, abs=1e-14)
            assert residual.norm <= 1e-9

    def test_refined_residual_extends_and_grows(self, lqr1d, library):
        # lose a tenth of the occupation mass so that time-dependent tests see a residual
        pair = library[0]._replace(occupation=library[0].occupation.scaled(0.9))
        tests = TestFamily.polynomial(1, 1)
        refined = refine_tests(tests, 3)
        coarse = residual_vector(pair, lqr1d.initial_measure, tests, lqr1d)
        fine = residual_vector(pair, lqr1d.initial_measure, refined, lqr1d)
        np.testing.assert_allclose(fine.vector[:tests.size], coarse.vector, atol=1e-14)
        assert coarse.norm > 0.01
        assert fine.norm >= coarse.norm

    def test_mixture_is_linear(self, lqr1d, library):
        tests = TestFamily.polynomial(1, 2, 'euclidean')
        mu0 = lqr1d.initial_measure
        # a non-exact component
        library = [library[0]._replace(occupation=library[0].occupation.scaled(0.8))] + library[1:]
        weights = jnp.array([0.1, 0.2, 0.3, 0.4])
        pair = mixture_pair(MixtureTrial.new(library, weights))
        assert pair.provenance == Provenance.EXPLICIT_MIXTURE
        assert pair.source.startswith('mixture:')
        table = tabulate(library, tests, lqr1d, mu0)
        assert realized_cost(pair, lqr1d) == pytest.approx(float(table.cost(weights)), abs=1e-12)
        np.testing.assert_allclose(residual_vector(pair, mu0, tests, lqr1d).vector, table.residual(weights),
                                   atol=1e-12)
        for lam in (0.0, 0.5, 3.0):
            value = explicit_objective(MixtureTrial.new(library, weights), tests, lam, lqr1d, mu0)
            assert value == pytest.approx(float(table.objective(weights, lam)), abs=1e-12)

    def test_weights_must_carry_the_initial_mass(self, library):
        trial = MixtureTrial.new(library, [0.5, 0.4, 0.0, 0.0])
        with pytest.raises(ValueError, match='initial mass'):
            mixture_pair(trial)

    def test_trial_validation(self, library):
        with pytest.raises(ValueError):
            MixtureTrial.new([], [])
        with pytest.raises(ValueError):
            MixtureTrial.new(library, [1.0])
        with pytest.raises(ValueError):
            MixtureTrial.new(library, [1.5, -0.5, 0.0, 0.0])
        uniform = MixtureTrial.uniform(library)
        chex.assert_trees_all_close(uniform.weights, jnp.full(4, 0.25))

    def test_objective_rejects_negative_penalty(self, lqr1d, library):
        with pytest.raises(ValueError):
            explicit_objective(MixtureTrial.uniform(library), TestFamily.polynomial(1, 1), -1.0, lqr1d,
                               lqr1d.initial_measure)

    def test_tabulate(self, lqr1d, library):
        table = tabulate(library, TestFamily.polynomial(1, 2), lqr1d, lqr1d.initial_measure)
        assert table.n_components == 4
        # x(t) = 1 + u t, l = x^2 + u^2; the trapezoid rule overshoots int x^2 by u^2 h^2 / 6
        h = 0.05
        expected = [(1 + u + u * u / 3 + u * u * h * h / 6) + u * u for u in CONTROLS]
        np.testing.assert_allclose(table.J, expected, atol=1e-12)
        with pytest.raises(ValueError):
            tabulate([], TestFamily.polynomial(1, 1), lqr1d, lqr1d.initial_measure)


class TestMixtureOptimization:

    @pytest.mark.parametrize('v, mass, expected', [
        ([0.5, 0.5], 1.0, [0.5, 0.5]),
        ([2.0, 0.0], 1.0, [1.0, 0.0]),
        ([-1.0, -1.0, -1.0], 1.0, [1 / 3, 1 / 3, 1 / 3]),
        ([3.0, 0.0], 2.0, [2.0, 0.0]),
    ])
    def test_project_to_simplex(self, v, mass, expected):
        chex.assert_trees_all_close(project_to_simplex(jnp.array(v), mass), jnp.array(expected), atol=1e-12)

    def test_simplex_grid(self):
        grid = simplex_grid(3, 0.5)
        assert grid.shape == (6, 3)
        np.testing.assert_allclose(grid.sum(axis=1), 1.0)
        with pytest.raises(ValueError):
            simplex_grid(3, 0.3)

    def test_brute_force(self):
        result = brute_force_mixture(_synthetic(), lam=1.0)
        assert result.value == pytest.approx(1.5, abs=1e-12)
        assert result.residual_norm == pytest.approx(0.0, abs=1e-12)

    def test_optimizer_matches_grid_oracle(self):
        result = optimize_mixture(_synthetic(), lam=1.0)
        assert result.value == pytest.approx(1.5, abs=2e-2)
        assert float(jnp.sum(result.weights)) == pytest.approx(1.0, abs=1e-9)
        assert bool(jnp.all(result.weights >= 0))
        assert result.iterations == 2000

    def test_optimizer_without_penalty_picks_cheapest(self):
        result = optimize_mixture(_synthetic(), lam=0.0)
        assert result.J == pytest.approx(1.0, abs=2e-2)
        with pytest.raises(ValueError):
            optimize_mixture(_synthetic(), lam=-1.0)

    def test_optimizer_on_library(self, lqr1d, library):
        table = tabulate(library, TestFamily.polynomial(1, 2), lqr1d, lqr1d.initial_measure)
        result = optimize_mixture(table, lam=10.0, iterations=500)
        assert result.value <= float(jnp.min(table.J)) + 1e-2
        assert result.residual_norm <= 1e-3


class TestRestrictedValue:

    def test_max_abs(self):
        table = _synthetic()
        assert restricted_value(table, 0.0).value == pytest.approx(1.5, abs=1e-9)
        assert restricted_value(table, 10.0).value == pytest.approx(1.0, abs=1e-9)
        with pytest.raises(ValueError):
            restricted_value(table, -0.1)

    def test_infeasible(self):
        table = LibraryTable(jnp.array([1.0, 2.0]), jnp.array([[1.0], [2.0]]), 1.0, NormKind.MAX_ABS)
        result = restricted_value(table, 0.5)
        assert result.value == math.inf
        assert bool(jnp.all(jnp.isnan(result.weights)))

    def test_euclidean(self):
        result = restricted_value(_synthetic(NormKind.EUCLIDEAN), 0.1)
        assert result.value == pytest.approx(1.45, abs=1e-3)
        assert result.residual_norm <= 0.1 + 1e-6
