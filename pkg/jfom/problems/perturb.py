import logging

import jax
import jax.numpy as jnp

from jfom.problems.problem import ControlProblem, PerturbationBudget

logger = logging.getLogger(__name__)


def perturb(problem: ControlProblem, budget: PerturbationBudget, seed: int) -> ControlProblem:
    """Add smooth state-space bumps of sup-norm exactly delta_f, delta_l, delta_g.

    Each bump is delta * exp(-|x - c|^2 / (2 w^2)), so it peaks at its center c and the
    bound holds by construction. The dynamics bump points along a random unit vector,
    which keeps |f~ - f| <= delta_f in the Euclidean norm. Bumps do not depend on t, so
    time homogeneity is preserved. A zero delta leaves the evaluator untouched.
    """
    budget = PerturbationBudget.new(*budget)
    if budget.is_zero():
        return problem

    key = jax.random.PRNGKey(seed)
    key_f, key_l, key_g, key_dir, key_sign = jax.random.split(key, 5)
    lo, hi = problem.state_box.lower, problem.state_box.upper
    width = 0.25 * float(jnp.min(hi - lo))

    def center(k):
        return lo + (hi - lo) * jax.random.uniform(k, (problem.dim_x, ))

    def bump(x, c):
        return jnp.exp(-jnp.sum((x - c)**2) / (2 * width**2))

    c_f, c_l, c_g = center(key_f), center(key_l), center(key_g)
    direction = jax.random.normal(key_dir, (problem.dim_x, ))
    direction = direction / jnp.linalg.norm(direction)
    sign = jnp.where(jax.random.bernoulli(key_sign), 1.0, -1.0)

    dynamics, running_cost, terminal_cost = problem.dynamics, problem.running_cost, problem.terminal_cost
    base_f, base_l, base_g = dynamics, running_cost, terminal_cost
    if budget.delta_f > 0:

        def dynamics(t, x, u):
            return base_f(t, x, u) + budget.delta_f * bump(x, c_f) * direction

    if budget.delta_l > 0:

        def running_cost(t, x, u):
            return base_l(t, x, u) + sign * budget.delta_l * bump(x, c_l)

    if budget.delta_g > 0:

        def terminal_cost(x):
            return base_g(x) + budget.delta_g * bump(x, c_g)

    cost_split_kept = budget.delta_l == 0 and budget.delta_g == 0
    logger.debug("perturbed %s with budget %s (seed %d)", problem.name, budget, seed)
    return ControlProblem.new(
        name=f"{problem.name}~perturbed[{seed}]",
        dynamics=dynamics,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        control_box=problem.control_box,
        state_box=problem.state_box,
        initial_states=problem.initial_states,
        initial_weights=problem.initial_weights,
        t0=problem.t0,
        T=problem.T,
        time_homogeneous=problem.time_homogeneous,
        blocks=problem.blocks,
        running_cost_blocks=problem.running_cost_blocks if cost_split_kept else (),
        terminal_cost_blocks=problem.terminal_cost_blocks if cost_split_kept else (),
        params=problem.params + (
            ('budget', tuple(budget)),
            ('bump_width', width),
            ('bump_center_f', tuple(float(v) for v in c_f)),
            ('bump_center_l', tuple(float(v) for v in c_l)),
            ('bump_center_g', tuple(float(v) for v in c_g)),
        ),
    )
