import jax.numpy as jnp
import numpy as np

from jfom.certificates import Certificate, FeatureBasis, SamplePlan
from jfom.problems import Box, ControlProblem, LQRWeights, make_lqr


def lqr(state_dim: int = 1, horizon: float = 1.0, state_radius: float = 3.0, **kwargs) -> ControlProblem:
    return make_lqr(horizon, state_dim, LQRWeights.identity(state_dim), state_radius=state_radius, **kwargs)


def small_plan(control_grid: int = 11, seed: int = 0) -> SamplePlan:
    return SamplePlan(n_points=64, n_refill=16, control_grid=control_grid, n_terminal=32, seed=seed)


def feasible_quadratic(dim_x: int = 1) -> Certificate:
    """v = 0.5 (1 - t) |x|^2, an exact subsolution of the unit LQR with T = 1 and g = 0.

    s = sum_i 0.5 x_i^2 + u_i^2 + (1 - t) x_i u_i >= 0.25 |x|^2.
    """
    rows = []
    for i in range(dim_x):
        e = [0] * dim_x
        e[i] = 2
        rows.append([1] + e)
    basis = FeatureBasis.from_exponents(dim_x, rows, time_origin=1.0, time_scale=-1.0)
    return Certificate.new(basis, jnp.full(dim_x, 0.5))


def still_problem(dim_x: int = 1) -> ControlProblem:
    """Zero dynamics and zero costs."""
    return ControlProblem.new(
        name='still',
        dynamics=lambda t, x, u: jnp.zeros_like(x),
        running_cost=lambda t, x, u: jnp.zeros(()),
        terminal_cost=lambda x: jnp.zeros(()),
        control_box=Box.symmetric(1.0, 1),
        state_box=Box.symmetric(2.0, dim_x),
        initial_states=[np.full(dim_x, 0.5)],
        time_homogeneous=True,
    )


def growth_problem(rate: float = 1.0, x0: float = 1.0, state_radius: float = 3.0) -> ControlProblem:
    """x' = rate * x."""
    return ControlProblem.new(
        name=f'growth[{rate:g}]',
        dynamics=lambda t, x, u: rate * x,
        running_cost=lambda t, x, u: jnp.sum(x**2),
        terminal_cost=lambda x: jnp.zeros(()),
        control_box=Box.symmetric(1.0, 1),
        state_box=Box.symmetric(state_radius, 1),
        initial_states=[[x0]],
        time_homogeneous=True,
    )


def riccati_knots(n_intervals: int, horizon: float = 1.0, x0: float = 1.0) -> np.ndarray:
    """Optimal open-loop control of the unit 1D LQR at interval midpoints."""
    t = (np.arange(n_intervals) + 0.5) * horizon / n_intervals
    x = x0 * np.cosh(horizon - t) / np.cosh(horizon)
    return (-np.tanh(horizon - t) * x)[:, None]
