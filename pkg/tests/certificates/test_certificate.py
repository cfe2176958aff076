import math

import chex
import jax.numpy as jnp
import numpy as np
import pytest

from jfom.certificates import (
    Certificate,
    FeatureBasis,
    SamplePlan,
    assemble_blockwise,
    block_running_slacks,
    block_terminal_slacks,
    c1_norm,
    certified_lower_bound,
    estimate_feasibility,
    evaluate,
    fit_certificate,
    gradient_bound,
    perturbation_degrade,
    running_slack,
    shifted_cost_margins,
    terminal_slack,
    time_shift,
    validate_certificate,
)
from jfom.errors import ValidationError
from jfom.measures import BoundaryMeasure
from jfom.problems import PerturbationBudget, RiccatiOracle, make_unicycle_avoid, perturb
from tests import helpers


def _constant(value, eps=0.0, eps_T=0.0):
    return Certificate.new(FeatureBasis.polynomial(1, 0), [value], eps, eps_T)


class TestCertificate:

    def test_new_validates(self):
        basis = FeatureBasis.polynomial(1, 2)
        with pytest.raises(ValueError, match='does not match basis size'):
            Certificate.new(basis, jnp.zeros(3))
        with pytest.raises(ValueError):
            Certificate.new(basis, jnp.zeros(basis.size), eps=-0.1)
        with pytest.raises(ValueError):
            Certificate.new(basis, jnp.zeros(basis.size), eps_T=math.inf)

    def test_evaluate(self):
        # v = 1 + 2 t x
        cert = Certificate.new(FeatureBasis.polynomial(1, 2), [1.0, 0.0, 0.0, 0.0, 2.0, 0.0])
        fv = evaluate(cert, 0.5, [3.0])
        assert float(fv.value) == pytest.approx(4.0)
        assert float(fv.dt) == pytest.approx(6.0)
        chex.assert_trees_all_close(fv.grad_x, jnp.array([1.0]))
        batch = evaluate(cert, jnp.array([0.0, 1.0]), jnp.array([[1.0], [1.0]]))
        chex.assert_trees_all_close(batch.value, jnp.array([1.0, 3.0]))

    def test_block_of_single_certificate(self):
        cert = _constant(1.0)
        assert cert.block(0) is cert
        with pytest.raises(ValueError):
            cert.block(1)


class TestFeasibility:

    def test_zero_certificate(self, lqr1d, plan):
        report = estimate_feasibility(Certificate.zeros(FeatureBasis.polynomial(1, 2)), lqr1d, plan)
        assert report.eps_hat == 0.0
        assert report.eps_T_hat == 0.0
        assert report.min_terminal_slack == 0.0
        assert report.plan_hash == plan.hash
        assert report.n_running == plan.draw(lqr1d).n_running

    def test_running_slack_is_cost_when_certificate_is_zero(self, lqr1d):
        cert = Certificate.zeros(FeatureBasis.tensor(1, 2, 2))
        t = jnp.array([0.1, 0.7])
        x = jnp.array([[1.0], [-2.0]])
        u = jnp.array([[0.5], [1.0]])
        chex.assert_trees_all_close(running_slack(cert, lqr1d, t, x, u), jnp.array([1.25, 5.0]))

    def test_constant_offset_violates_terminal_constraint(self, lqr1d, plan):
        cert = Certificate.new(FeatureBasis.polynomial(1, 2), [0.3, 0.0, 0.0, 0.0, 0.0, 0.0])
        report = estimate_feasibility(cert, lqr1d, plan)
        assert report.eps_hat == 0.0
        assert report.eps_T_hat == pytest.approx(0.3)
        assert float(terminal_slack(cert, lqr1d, jnp.array([1.0]))) == pytest.approx(-0.3)
        with pytest.raises(ValidationError):
            validate_certificate(cert, lqr1d, plan)
        declared = cert.with_tolerances(0.0, 0.3)
        validate_certificate(declared, lqr1d, plan)
        running, terminal = shifted_cost_margins(declared, lqr1d, plan)
        assert running >= 0.0
        assert terminal == pytest.approx(0.0, abs=1e-15)

    def test_terminal_slack_point_and_batch_shapes(self, lqr1d, lqr2d):
        square = Certificate.new(FeatureBasis.from_exponents(1, [[0, 2]]), [1.0])
        batch = jnp.array([0.5, -1.0, 2.0])
        s = terminal_slack(square, lqr1d, batch)
        assert s.shape == (3, )
        chex.assert_trees_all_close(s, -batch**2)
        chex.assert_trees_all_close(terminal_slack(square, lqr1d, batch[:, None]), s)
        assert jnp.ndim(terminal_slack(square, lqr1d, jnp.array(2.0))) == 0
        norm = Certificate.new(FeatureBasis.from_exponents(2, [[0, 2, 0], [0, 0, 2]]), [1.0, 1.0])
        point = terminal_slack(norm, lqr2d, jnp.array([1.0, 2.0]))
        assert jnp.ndim(point) == 0
        assert float(point) == pytest.approx(-5.0)
        with pytest.raises(ValueError, match='do not match'):
            terminal_slack(norm, lqr2d, jnp.arange(4.0))
        with pytest.raises(ValueError, match='do not match'):
            terminal_slack(norm, lqr2d, jnp.ones((2, 3)))

    def test_exact_subsolution(self, lqr1d, plan):
        report = validate_certificate(helpers.feasible_quadratic(1), lqr1d, plan)
        assert report.eps_hat == 0.0
        assert report.eps_T_hat == 0.0

    def test_certified_lower_bound(self):
        mu0 = BoundaryMeasure.dirac(0.0, jnp.array([1.0]))
        cert = _constant(0.5, eps=0.1, eps_T=0.05)
        assert certified_lower_bound(cert, mu0, horizon=2.0) == pytest.approx(0.5 - 0.2 - 0.05)
        assert certified_lower_bound(cert, BoundaryMeasure.empty(0.0, 1), horizon=2.0) == 0.0


class TestRiccatiProjection:

    @pytest.fixture(scope='class')
    def projected(self):
        problem = helpers.lqr(1, state_radius=2.0)
        oracle = RiccatiOracle(problem)
        return problem, oracle, oracle.project(FeatureBasis.tensor(1, 6, 2))

    def test_near_feasible_with_tight_optimal_slack(self, projected):
        problem, oracle, cert = projected
        times = np.linspace(0.0, 1.0, 21)
        states = np.linspace(-2.0, 2.0, 21)
        t, x = (a.ravel() for a in np.meshgrid(times, states, indexing='ij'))
        u_star = np.array([oracle.optimal_control(ti, [xi])[0] for ti, xi in zip(t, x)])
        s_star = np.asarray(running_slack(cert, problem, t, x[:, None], u_star[:, None]))
        assert np.abs(s_star).max() <= 5e-3
        for u in np.linspace(-3.0, 3.0, 13):
            s = np.asarray(running_slack(cert, problem, t, x[:, None], np.full((len(t), 1), u)))
            assert s.min() >= -5e-3

    def test_lower_bound_close_to_optimal_cost(self, projected):
        problem, _, cert = projected
        report = estimate_feasibility(cert, problem, helpers.small_plan(control_grid=61))
        declared = cert.with_tolerances(report.eps_hat, report.eps_T_hat)
        bound = certified_lower_bound(declared, problem.initial_measure, problem.horizon)
        assert bound <= math.tanh(1.0) + 1e-4
        assert bound >= 0.95 * math.tanh(1.0)


class TestBlockwise:

    def test_assemble_sums_tolerances(self):
        cert = assemble_blockwise([((k, ), helpers.feasible_quadratic(1), 0.01) for k in range(3)], dim_x=3)
        assert (cert.eps, cert.eps_T) == pytest.approx((0.03, 0.03))
        assert cert.size == 3
        assert cert.basis.block_sizes == (1, 1, 1)
        assert cert.note == 'blockwise:3'
        chex.assert_trees_all_close(cert.block(1).psi, jnp.array([0.5]))
        with pytest.raises(ValueError):
            cert.block(3)

    def test_single_full_block_keeps_basis(self):
        block = helpers.feasible_quadratic(1)
        cert = assemble_blockwise([((0, ), block, 0.02)])
        assert cert.basis == block.basis
        assert cert.eps == cert.eps_T == 0.02

    def test_rejects_mismatched_blocks(self):
        block = helpers.feasible_quadratic(1)
        with pytest.raises(ValueError, match='different time domains'):
            assemble_blockwise([((0, ), block, 0.0), ((1, ), time_shift(block, 0.1), 0.0)])
        with pytest.raises(ValueError):
            assemble_blockwise([((0, ), block, -0.1)])
        with pytest.raises(ValueError):
            assemble_blockwise([])

    def test_feasible_blocks_compose(self, lqr2d):
        cert = assemble_blockwise([((k, ), helpers.feasible_quadratic(1), 0.0) for k in range(2)], dim_x=2)
        samples = SamplePlan(n_points=64, n_refill=0, control_grid=11, n_terminal=32).draw(lqr2d)
        report = estimate_feasibility(cert, lqr2d, samples)
        assert report.eps_hat <= 1e-8
        assert report.eps_T_hat <= 1e-8
        per_block = block_running_slacks(cert, lqr2d, samples.t, samples.x, samples.u)
        chex.assert_shape(per_block, (2, samples.n_running))
        np.testing.assert_allclose(per_block.sum(axis=0),
                                   running_slack(cert, lqr2d, samples.t, samples.x, samples.u),
                                   atol=1e-12)
        assert float(per_block.min()) >= -1e-12
        terminal = block_terminal_slacks(cert, lqr2d, samples.x_T)
        np.testing.assert_allclose(terminal.sum(axis=0), terminal_slack(cert, lqr2d, samples.x_T), atol=1e-12)

    def test_block_slacks_need_a_split(self, lqr2d):
        with pytest.raises(ValueError):
            block_running_slacks(helpers.feasible_quadratic(2), lqr2d, jnp.zeros(1), jnp.zeros((1, 2)),
                                 jnp.zeros((1, 2)))


class TestTimeShift:

    def test_shifted_certificate_matches_on_shifted_problem(self):
        problem = make_unicycle_avoid([(0.0, 0.05, 0.4)], 1.0, 2.0)
        basis = FeatureBasis.tensor(3, 2, 2)
        rng = np.random.default_rng(0)
        cert = Certificate.new(basis, rng.normal(size=basis.size))
        tau = 0.5
        moved = time_shift(cert, tau, problem)
        later = problem.shifted(tau)
        t = jnp.asarray(rng.uniform(0.0, 2.0, 1000))
        x = jnp.asarray(rng.uniform(-2.0, 2.0, (1000, 3)))
        u = jnp.asarray(rng.uniform(-2.0, 2.0, (1000, 1)))
        np.testing.assert_allclose(running_slack(moved, later, t + tau, x, u),
                                   running_slack(cert, problem, t, x, u),
                                   rtol=1e-12,
                                   atol=1e-10)
        np.testing.assert_allclose(terminal_slack(moved, later, x), terminal_slack(cert, problem, x), atol=1e-10)
        assert moved.eps == cert.eps and moved.eps_T == cert.eps_T

    def test_shifts_compose(self):
        cert = time_shift(time_shift(_constant(1.0), 0.25), 0.5)
        assert cert.t_shift == 0.75

    def test_rejects_negative_shift(self):
        with pytest.raises(ValueError):
            time_shift(_constant(1.0), -0.1)


class TestPerturbationTransfer:

    def test_gradient_bound_reaches_box_vertex(self):
        problem = helpers.lqr(2)
        # v = 2 x1^2 + x1 x2 + x2^2, grad = (4 x1 + x2, x1 + 2 x2)
        basis = FeatureBasis.from_exponents(2, [(0, 2, 0), (0, 1, 1), (0, 0, 2)])
        cert = Certificate.new(basis, [2.0, 1.0, 1.0])
        bound = gradient_bound(cert, problem, helpers.small_plan())
        # attained at the vertex (3, 3)
        assert bound.value == pytest.approx(3 * math.sqrt(34.0))
        assert float(bound) == bound.value
        assert bound.n_samples > 0

    def test_degrade(self):
        cert = _constant(0.0, eps=0.5, eps_T=0.4)
        degraded = perturbation_degrade(cert, PerturbationBudget.new(0.1, 0.1, 0.05), g_v=2.0)
        assert degraded.eps == pytest.approx(0.8)
        assert degraded.eps_T == pytest.approx(0.45)
        unchanged = perturbation_degrade(cert, PerturbationBudget(), 3.0)
        assert (unchanged.eps, unchanged.eps_T) == (cert.eps, cert.eps_T)
        with pytest.raises(ValueError):
            perturbation_degrade(cert, PerturbationBudget(), -1.0)

    @pytest.mark.parametrize('seed', range(20))
    def test_degraded_certificate_stays_feasible(self, lqr1d, seed):
        cert = helpers.feasible_quadratic(1)
        budget = PerturbationBudget.new(delta_f=0.05, delta_l=0.1, delta_g=0.1)
        samples = helpers.small_plan(seed=seed).draw(lqr1d)
        g_v = gradient_bound(cert, lqr1d, samples)
        degraded = perturbation_degrade(cert, budget, g_v.value)
        report = estimate_feasibility(degraded, perturb(lqr1d, budget, seed), samples)
        assert report.eps_hat <= degraded.eps + 1e-12
        assert report.eps_T_hat <= degraded.eps_T + 1e-12


class TestFitting:

    def test_c1_norm(self):
        t = jnp.linspace(0.0, 1.0, 5)
        x = jnp.zeros((5, 1))
        assert c1_norm(_constant(2.0), t, x) == pytest.approx(2.0)

    def test_fit_recovers_polynomial(self):
        rng = np.random.default_rng(3)
        t = rng.uniform(0.0, 1.0, 50)
        x = rng.uniform(-1.0, 1.0, (50, 1))
        cert = fit_certificate(FeatureBasis.polynomial(1, 2), lambda t, x: 1.0 + 2.0 * t * x[:, 0], t, x)
        np.testing.assert_allclose(cert.psi, [1.0, 0.0, 0.0, 0.0, 2.0, 0.0], atol=1e-10)
        assert cert.note == 'projection'
