import jax.numpy as jnp
import numpy as np
import pytest

from jfom.problems import (
    PerturbationBudget,
    evaluate_dynamics,
    evaluate_running_cost,
    evaluate_terminal_cost,
    make_unicycle_avoid,
    perturb,
)
from tests import helpers


def _grid(problem, per_axis=41):
    return np.asarray(problem.state_box.grid([per_axis] * problem.dim_x))


class TestPerturb:

    def test_zero_budget_is_identity(self):
        problem = helpers.lqr(1)
        assert perturb(problem, PerturbationBudget(), seed=0) is problem

    def test_terminal_bump_attains_its_budget(self):
        problem = helpers.lqr(2)
        changed = perturb(problem, PerturbationBudget.new(delta_g=0.1), seed=3)
        x = _grid(problem)
        diff = np.abs(evaluate_terminal_cost(changed, x) - evaluate_terminal_cost(problem, x))
        assert diff.max() <= 0.1
        center = jnp.asarray(changed.param('bump_center_g'))[None]
        peak = evaluate_terminal_cost(changed, center) - evaluate_terminal_cost(problem, center)
        assert float(peak[0]) == pytest.approx(0.1, abs=1e-12)
        # untouched evaluators
        t = jnp.zeros(len(x))
        u = jnp.zeros((len(x), 2))
        np.testing.assert_array_equal(evaluate_running_cost(changed, t, x, u), evaluate_running_cost(problem, t, x, u))

    @pytest.mark.parametrize('seed', [0, 1, 2])
    def test_dynamics_and_running_bumps_within_budget(self, seed):
        problem = make_unicycle_avoid([(0.0, 0.05, 0.4)], 1.0, 1.0)
        budget = PerturbationBudget.new(delta_f=0.2, delta_l=0.3)
        changed = perturb(problem, budget, seed)
        x = _grid(problem, 15)
        t = jnp.full(len(x), 0.5)
        u = jnp.full((len(x), 1), 0.7)
        df = np.linalg.norm(evaluate_dynamics(changed, t, x, u) - evaluate_dynamics(problem, t, x, u), axis=1)
        dl = np.abs(evaluate_running_cost(changed, t, x, u) - evaluate_running_cost(problem, t, x, u))
        assert df.max() <= 0.2 + 1e-12
        assert dl.max() <= 0.3 + 1e-12
        assert df.max() > 0

    def test_metadata(self):
        problem = make_unicycle_avoid([(0.0, 0.05, 0.4)], 1.0, 1.0)
        changed = perturb(problem, PerturbationBudget.new(delta_l=0.1), seed=5)
        assert changed.time_homogeneous
        assert changed.blocks == problem.blocks
        # the additive cost split no longer describes the perturbed running cost
        assert changed.running_cost_blocks == ()
        assert changed.param('budget') == (0.0, 0.1, 0.0)
        assert changed.param('obstacles') == problem.param('obstacles')

    def test_deterministic_in_seed(self):
        problem = helpers.lqr(2)
        budget = PerturbationBudget.new(delta_l=0.1)
        a, b, c = perturb(problem, budget, 4), perturb(problem, budget, 4), perturb(problem, budget, 5)
        assert a.param('bump_center_l') == b.param('bump_center_l')
        assert a.param('bump_center_l') != c.param('bump_center_l')

    def test_rejects_negative_budget(self):
        with pytest.raises(ValueError):
            perturb(helpers.lqr(1), PerturbationBudget(delta_f=-0.1), seed=0)
