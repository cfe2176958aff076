"""Benchmark problem instances with analytic or semi-analytic oracles."""
import logging
import math
from typing import NamedTuple, Optional, Sequence, Tuple

import jax.numpy as jnp
import numpy as np
from jax import Array
from scipy.integrate import solve_ivp

from jfom.problems.problem import Box, ControlProblem

logger = logging.getLogger(__name__)


def _as_tuple(matrix: np.ndarray) -> Tuple[Tuple[float, ...], ...]:
    return tuple(tuple(float(v) for v in row) for row in np.atleast_2d(matrix))


def _is_diagonal(matrix: np.ndarray) -> bool:
    return matrix.shape[0] == matrix.shape[1] and np.array_equal(matrix, np.diag(np.diag(matrix)))


class LQRWeights(NamedTuple):
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray

    @classmethod
    def identity(cls, state_dim: int, control_dim: Optional[int] = None, terminal: float = 0.0) -> "LQRWeights":
        control_dim = state_dim if control_dim is None else control_dim
        return cls(np.eye(state_dim), np.eye(control_dim), terminal * np.eye(state_dim))


def make_lqr(
    horizon: float,
    state_dim: int,
    weights: LQRWeights,
    A: Optional[np.ndarray] = None,
    B: Optional[np.ndarray] = None,
    x0: Optional[Sequence[float]] = None,
    t0: float = 0.0,
    state_radius: float = 3.0,
    control_radius: float = 3.0,
) -> ControlProblem:
    """x' = A x + B u, l = x'Qx + u'Ru, g = x'Qf x on boxes of the given radii.

    Defaults: A = 0, B = I, x0 = (1, ..., 1). Fully diagonal data also exposes the
    per-coordinate blocks and the matching cost split.
    """
    if state_dim <= 0:
        raise ValueError(f"state_dim must be positive, got {state_dim}")
    Q = np.atleast_2d(np.asarray(weights.Q, dtype=np.float64))
    R = np.atleast_2d(np.asarray(weights.R, dtype=np.float64))
    Qf = np.atleast_2d(np.asarray(weights.Qf, dtype=np.float64))
    control_dim = R.shape[0]
    A = np.zeros((state_dim, state_dim)) if A is None else np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.eye(state_dim, control_dim) if B is None else np.atleast_2d(np.asarray(B, dtype=np.float64))
    if Q.shape != (state_dim, state_dim) or Qf.shape != (state_dim, state_dim) or R.shape != (control_dim,
                                                                                               control_dim):
        raise ValueError(f"weight shapes {Q.shape}, {R.shape}, {Qf.shape} do not match state_dim={state_dim}")
    if A.shape != (state_dim, state_dim) or B.shape != (state_dim, control_dim):
        raise ValueError(f"system matrices have shapes {A.shape}, {B.shape}")
    for name, matrix in (('Q', Q), ('Qf', Qf)):
        if not np.allclose(matrix, matrix.T, atol=1e-12) or np.linalg.eigvalsh(matrix).min() < -1e-12:
            raise ValueError(f"{name} must be symmetric positive semidefinite")
    if not np.allclose(R, R.T, atol=1e-12) or np.linalg.eigvalsh(R).min() <= 0:
        raise ValueError("R must be symmetric positive definite")
    x0 = np.ones(state_dim) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(state_dim)

    A_, B_, Q_, R_, Qf_ = (jnp.asarray(m) for m in (A, B, Q, R, Qf))

    def dynamics(t, x, u):
        return A_ @ x + B_ @ u

    def running_cost(t, x, u):
        return x @ Q_ @ x + u @ R_ @ u

    def terminal_cost(x):
        return x @ Qf_ @ x

    blocks, running_blocks, terminal_blocks = (), (), ()
    if state_dim == control_dim and all(_is_diagonal(m) for m in (A, B, Q, R, Qf)):
        blocks = tuple((k, ) for k in range(state_dim))
        running_blocks = tuple(
            (lambda t, x, u, k=k: Q[k, k] * x[k]**2 + R[k, k] * u[k]**2) for k in range(state_dim))
        terminal_blocks = tuple((lambda x, k=k: Qf[k, k] * x[k]**2) for k in range(state_dim))

    return ControlProblem.new(
        name=f"lqr{state_dim}d",
        dynamics=dynamics,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        control_box=Box.symmetric(control_radius, control_dim),
        state_box=Box.symmetric(state_radius, state_dim),
        initial_states=[x0],
        t0=t0,
        T=t0 + horizon,
        time_homogeneous=True,
        blocks=blocks,
        running_cost_blocks=running_blocks,
        terminal_cost_blocks=terminal_blocks,
        params=(('kind', 'lqr'), ('A', _as_tuple(A)), ('B', _as_tuple(B)), ('Q', _as_tuple(Q)),
                ('R', _as_tuple(R)), ('Qf', _as_tuple(Qf))),
    )


class RiccatiOracle:
    """Finite-horizon Riccati solution P(t) of an LQR problem, by backward integration.

    -dP/dt = A'P + PA - P B R^-1 B' P + Q, P(T) = Qf; V(t, x) = x'P(t)x.
    """

    def __init__(self, problem: ControlProblem, rtol: float = 1e-12, atol: float = 1e-14) -> None:
        if problem.param('kind') != 'lqr':
            raise ValueError(f"problem {problem.name!r} carries no LQR data")
        self.problem = problem
        self.A, self.B, self.Q, self.R, self.Qf = (np.array(problem.param(k)) for k in ('A', 'B', 'Q', 'R', 'Qf'))
        self._R_inv = np.linalg.inv(self.R)
        n = self.A.shape[0]

        def rhs(s, p):
            P = p.reshape(n, n)
            dP = self.A.T @ P + P @ self.A - P @ self.B @ self._R_inv @ self.B.T @ P + self.Q
            return dP.ravel()

        self._solution = solve_ivp(rhs, (0.0, problem.horizon), self.Qf.ravel(), method='DOP853', rtol=rtol,
                                   atol=atol, dense_output=True)
        if not self._solution.success:
            raise RuntimeError(f"Riccati integration failed: {self._solution.message}")

    def P(self, t: float) -> np.ndarray:
        n = self.A.shape[0]
        return self._solution.sol(self.problem.T - float(t)).reshape(n, n)

    def value(self, t: Array, x: Array) -> np.ndarray:
        """x'P(t)x for batches t (N,), x (N, n)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x = np.asarray(x, dtype=np.float64).reshape(len(t), -1)
        return np.array([xi @ self.P(ti) @ xi for ti, xi in zip(t, x)])

    def optimal_cost(self, x0: Optional[Array] = None) -> float:
        """Optimal cost from x0, or averaged over the problem's initial measure."""
        if x0 is not None:
            x0 = np.asarray(x0, dtype=np.float64).ravel()
            return float(x0 @ self.P(self.problem.t0) @ x0)
        states = np.array(self.problem.initial_states)
        weights = np.array(self.problem.initial_weights)
        P0 = self.P(self.problem.t0)
        return float(sum(w * x @ P0 @ x for w, x in zip(weights, states)))

    def feedback_gain(self, t: float) -> np.ndarray:
        """K(t) = R^-1 B' P(t); the optimal control is u = -K x."""
        return self._R_inv @ self.B.T @ self.P(t)

    def optimal_control(self, t: float, x: Array) -> np.ndarray:
        return -self.feedback_gain(t) @ np.asarray(x, dtype=np.float64)

    def project(self, basis, n_times: int = 65, n_states: int = 9):
        """Least-squares projection of V onto a feature basis over [t0, T] x X."""
        from jfom.certificates.certificate import fit_certificate

        problem = self.problem
        times = np.linspace(problem.t0, problem.T, n_times)
        states = np.asarray(problem.state_box.grid([n_states] * problem.dim_x))
        t = np.repeat(times, len(states))
        x = np.tile(states, (n_times, 1))
        values = self.value(t, x)
        return fit_certificate(basis, lambda *_: values, t, x)


def make_unicycle_avoid(
    obstacles: Sequence[Sequence[float]],
    speed: float,
    horizon: float,
    start: Sequence[float] = (-1.0, 0.0, 0.0),
    goal: Sequence[float] = (1.0, 0.0),
    omega_max: float = 2.0,
    penalty_scale: float = 10.0,
    track_weight: float = 1.0,
    effort_weight: float = 0.1,
    goal_weight: float = 1.0,
    arena: float = 2.0,
    heading_bound: float = 4.0,
) -> ControlProblem:
    """Constant-speed unicycle steering around disc obstacles (cx, cy, r).

    State (px, py, heading), control = turn rate. The running cost tracks the goal,
    penalizes effort and adds c * max(0, r^2 - |p - c|^2)^2 per disc; the terminal cost
    is the squared distance to the goal.
    """
    if not speed > 0:
        raise ValueError(f"speed must be positive, got {speed}")
    state_box = Box.new([-arena, -arena, -heading_bound], [arena, arena, heading_bound])
    discs = tuple((float(cx), float(cy), float(r)) for cx, cy, r in obstacles)
    start = tuple(float(v) for v in start)
    goal = tuple(float(v) for v in goal)
    for cx, cy, r in discs:
        if r <= 0:
            raise ValueError(f"obstacle radius must be positive, got {r}")
        if cx - r < -arena or cx + r > arena or cy - r < -arena or cy + r > arena:
            raise ValueError(f"obstacle ({cx}, {cy}, {r}) is not inside the state box")
        if math.hypot(start[0] - cx, start[1] - cy) <= r:
            raise ValueError(f"obstacle ({cx}, {cy}, {r}) covers the start position")

    goal_ = jnp.array(goal)
    centers = jnp.array([d[:2] for d in discs]).reshape(-1, 2)
    radii = jnp.array([d[2] for d in discs])

    def penalty(p):
        if not discs:
            return jnp.zeros(())
        depth = jnp.maximum(0.0, radii**2 - jnp.sum((p - centers)**2, axis=-1))
        return penalty_scale * jnp.sum(depth**2)

    def dynamics(t, x, u):
        return jnp.stack([speed * jnp.cos(x[2]), speed * jnp.sin(x[2]), u[0]])

    def position_cost(t, x, u):
        return track_weight * jnp.sum((x[:2] - goal_)**2) + penalty(x[:2])

    def effort_cost(t, x, u):
        return effort_weight * u[0]**2

    def running_cost(t, x, u):
        return position_cost(t, x, u) + effort_cost(t, x, u)

    def terminal_cost(x):
        return goal_weight * jnp.sum((x[:2] - goal_)**2)

    def no_terminal_cost(x):
        return jnp.zeros(())

    return ControlProblem.new(
        name=f"unicycle[{';'.join(f'{cx:g},{cy:g},{r:g}' for cx, cy, r in discs)}]",
        dynamics=dynamics,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        control_box=Box.new([-omega_max], [omega_max]),
        state_box=state_box,
        initial_states=[start],
        T=horizon,
        time_homogeneous=True,
        blocks=((0, 1), (2, )),
        running_cost_blocks=(position_cost, effort_cost),
        terminal_cost_blocks=(terminal_cost, no_terminal_cost),
        params=(('kind', 'unicycle'), ('obstacles', discs), ('penalty_scale', float(penalty_scale)),
                ('goal', goal), ('speed', float(speed))),
    )


def penalty_bound(problem: ControlProblem) -> float:
    """Sup of the obstacle penalty, c * sum r^4; bounds the cost change when discs move."""
    discs = problem.param('obstacles', ())
    return problem.param('penalty_scale', 0.0) * sum(r**4 for _, _, r in discs)


def make_strict_feedback(
    horizon: float = 1.0,
    x0: Sequence[float] = (1.0, 0.0),
    state_radius: float = 2.0,
    control_radius: float = 5.0,
) -> ControlProblem:
    """xi' = -xi + eta, eta' = u with the backstepping cost split l = l1 + l2.

    l1 = xi^2, l2 = (eta - alpha(xi))^2 + u^2 with alpha(xi) = -xi; blocks S1 = {xi}, S2 = {xi, eta}.
    """

    def alpha(xi):
        return -xi

    def dynamics(t, x, u):
        return jnp.stack([-x[0] + x[1], u[0]])

    def cost_1(t, x, u):
        return x[0]**2

    def cost_2(t, x, u):
        return (x[1] - alpha(x[0]))**2 + u[0]**2

    def running_cost(t, x, u):
        return cost_1(t, x, u) + cost_2(t, x, u)

    def terminal_cost(x):
        return jnp.zeros(())

    return ControlProblem.new(
        name="strict_feedback",
        dynamics=dynamics,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        control_box=Box.symmetric(control_radius, 1),
        state_box=Box.symmetric(state_radius, 2),
        initial_states=[x0],
        T=horizon,
        time_homogeneous=True,
        blocks=((0, ), (0, 1)),
        running_cost_blocks=(cost_1, cost_2),
        terminal_cost_blocks=(terminal_cost, terminal_cost),
        params=(('kind', 'strict_feedback'), ),
    )
