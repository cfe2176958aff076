import itertools
import math
from functools import partial
from typing import Any, Callable, NamedTuple, Optional, Sequence, Tuple

import jax
import jax.numpy as jnp
import numpy as np
from jax import Array

from jfom.measures import BoundaryMeasure

Dynamics = Callable[[Array, Array, Array], Array]
RunningCost = Callable[[Array, Array, Array], Array]
TerminalCost = Callable[[Array], Array]


class Box(NamedTuple):
    """Axis-aligned box [lo, hi] stored as float tuples, so that it stays hashable."""
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    @classmethod
    def new(cls, lo: Sequence[float], hi: Sequence[float]) -> "Box":
        lo = tuple(float(v) for v in np.ravel(lo))
        hi = tuple(float(v) for v in np.ravel(hi))
        if len(lo) == 0 or len(lo) != len(hi):
            raise ValueError(f"box bounds must be nonempty and of equal length, got {len(lo)} and {len(hi)}")
        if not all(math.isfinite(v) for v in lo + hi):
            raise ValueError(f"box bounds must be finite, got lo={lo}, hi={hi}")
        if any(l > h for l, h in zip(lo, hi)):
            raise ValueError(f"box is empty: lo={lo}, hi={hi}")
        return cls(lo=lo, hi=hi)

    @classmethod
    def symmetric(cls, radius: float, dim: int) -> "Box":
        return cls.new([-radius] * dim, [radius] * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lower(self) -> Array:
        return jnp.array(self.lo)

    @property
    def upper(self) -> Array:
        return jnp.array(self.hi)

    @property
    def center(self) -> Array:
        return (self.lower + self.upper) / 2

    @property
    def widths(self) -> Array:
        return self.upper - self.lower

    def contains(self, x: Array, tol: float = 0.0) -> Array:
        """Boolean over the leading axes of x."""
        return jnp.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def clip(self, x: Array) -> Array:
        return jnp.clip(x, self.lower, self.upper)

    def enlarged(self, factor: float) -> "Box":
        """Box with the same center and widths scaled by `factor`."""
        c = np.array(self.center)
        half = np.array(self.widths) / 2 * factor
        return Box.new(c - half, c + half)

    def vertices(self) -> Array:
        corners = itertools.product(*zip(self.lo, self.hi))
        return jnp.array(list(corners))

    def grid(self, counts: Sequence[int]) -> Array:
        """Tensor grid with counts[i] points along axis i, first axis slowest."""
        axes = [np.linspace(l, h, int(n)) for l, h, n in zip(self.lo, self.hi, counts)]
        mesh = np.meshgrid(*axes, indexing='ij')
        return jnp.array(np.stack([m.ravel() for m in mesh], axis=-1))


class PerturbationBudget(NamedTuple):
    delta_f: float = 0.0
    delta_l: float = 0.0
    delta_g: float = 0.0

    @classmethod
    def new(cls, delta_f: float = 0.0, delta_l: float = 0.0, delta_g: float = 0.0) -> "PerturbationBudget":
        budget = cls(float(delta_f), float(delta_l), float(delta_g))
        for name, value in budget._asdict().items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")
        return budget

    def is_zero(self) -> bool:
        return self.delta_f == 0 and self.delta_l == 0 and self.delta_g == 0


class ControlProblem(NamedTuple):
    """A fixed-horizon Bolza problem on Z = [t0, T] x X x U.

    Evaluators take a single point: ``dynamics(t, x, u) -> (dim_x,)``,
    ``running_cost(t, x, u) -> ()``, ``terminal_cost(x) -> ()``. They are batched with
    ``jax.vmap`` by the ``evaluate_*`` helpers below. Every field is hashable so a problem
    can be passed to ``jax.jit`` as a static argument.
    """
    name: str
    dim_x: int
    dim_u: int
    t0: float
    T: float
    dynamics: Dynamics
    running_cost: RunningCost
    terminal_cost: TerminalCost
    control_box: Box
    state_box: Box
    initial_states: Tuple[Tuple[float, ...], ...]
    initial_weights: Tuple[float, ...]
    time_homogeneous: bool = False

    # coordinate blocks S_k and the matching additive split of the costs, if any
    blocks: Tuple[Tuple[int, ...], ...] = ()
    running_cost_blocks: Tuple[RunningCost, ...] = ()
    terminal_cost_blocks: Tuple[TerminalCost, ...] = ()

    # (key, value) metadata, e.g. the LQR matrices used by the Riccati oracle
    params: Tuple[Tuple[str, Any], ...] = ()

    @classmethod
    def new(
        cls,
        name: str,
        dynamics: Dynamics,
        running_cost: RunningCost,
        terminal_cost: TerminalCost,
        control_box: Box,
        state_box: Box,
        initial_states: Sequence[Sequence[float]],
        initial_weights: Optional[Sequence[float]] = None,
        t0: float = 0.0,
        T: float = 1.0,
        time_homogeneous: bool = False,
        blocks: Sequence[Sequence[int]] = (),
        running_cost_blocks: Sequence[RunningCost] = (),
        terminal_cost_blocks: Sequence[TerminalCost] = (),
        params: Sequence[Tuple[str, Any]] = (),
    ) -> "ControlProblem":
        t0, T = float(t0), float(T)
        if not (math.isfinite(t0) and math.isfinite(T)) or T <= t0:
            raise ValueError(f"horizon must satisfy T > t0, got t0={t0}, T={T}")
        initial_states = np.atleast_2d(np.asarray(initial_states, dtype=np.float64))
        if initial_states.shape[1] != state_box.dim:
            raise ValueError(f"initial states have dimension {initial_states.shape[1]}, "
                             f"state box has dimension {state_box.dim}")
        if initial_weights is None:
            initial_weights = np.full(len(initial_states), 1.0 / len(initial_states))
        initial_weights = np.asarray(initial_weights, dtype=np.float64)
        if initial_weights.shape != (len(initial_states), ) or np.any(initial_weights < 0):
            raise ValueError("initial weights must be nonnegative, one per initial state")
        blocks = tuple(tuple(int(i) for i in block) for block in blocks)
        for block in blocks:
            if any(i < 0 or i >= state_box.dim for i in block):
                raise ValueError(f"block index set {block} out of range for dim_x={state_box.dim}")
        if running_cost_blocks and len(running_cost_blocks) != len(blocks):
            raise ValueError("running cost split must have one term per block")
        if terminal_cost_blocks and len(terminal_cost_blocks) != len(blocks):
            raise ValueError("terminal cost split must have one term per block")

        problem = cls(
            name=name,
            dim_x=state_box.dim,
            dim_u=control_box.dim,
            t0=t0,
            T=T,
            dynamics=dynamics,
            running_cost=running_cost,
            terminal_cost=terminal_cost,
            control_box=control_box,
            state_box=state_box,
            initial_states=tuple(tuple(float(v) for v in row) for row in initial_states),
            initial_weights=tuple(float(w) for w in initial_weights),
            time_homogeneous=bool(time_homogeneous),
            blocks=blocks,
            running_cost_blocks=tuple(running_cost_blocks),
            terminal_cost_blocks=tuple(terminal_cost_blocks),
            params=tuple(params),
        )
        problem.check_evaluators()
        if problem.time_homogeneous and not problem.spot_check_time_homogeneity():
            raise ValueError(f"problem {name!r} is flagged time-homogeneous but its evaluators depend on t")
        return problem

    @property
    def horizon(self) -> float:
        return self.T - self.t0

    @property
    def initial_measure(self) -> BoundaryMeasure:
        return BoundaryMeasure.new(self.t0, jnp.array(self.initial_weights), jnp.array(self.initial_states))

    def param(self, key: str, default: Any = None) -> Any:
        for k, v in self.params:
            if k == key:
                return v
        return default

    def with_params(self, **updates) -> "ControlProblem":
        params = dict(self.params)
        params.update(updates)
        return self._replace(params=tuple(params.items()))

    def shifted(self, tau: float) -> "ControlProblem":
        """The same problem on [t0 + tau, T + tau]; only meaningful for time-homogeneous data."""
        if not self.time_homogeneous:
            raise ValueError(f"problem {self.name!r} is not time-homogeneous, its horizon cannot be shifted")
        return self._replace(t0=self.t0 + tau, T=self.T + tau)

    def _probe_points(self):
        xs = jnp.concatenate([self.state_box.center[None], self.state_box.vertices()[:4]])
        us = jnp.concatenate([self.control_box.center[None], self.control_box.vertices()[:4]])
        n = min(len(xs), len(us))
        return xs[:n], us[:n]

    def check_evaluators(self) -> None:
        xs, us = self._probe_points()
        for t in (self.t0, self.T):
            ts = jnp.full(len(xs), t)
            f = evaluate_dynamics(self, ts, xs, us)
            if f.shape != (len(xs), self.dim_x):
                raise ValueError(f"dynamics must return shape ({self.dim_x},), got {f.shape[1:]}")
            l = evaluate_running_cost(self, ts, xs, us)
            g = evaluate_terminal_cost(self, xs)
            if not (jnp.isfinite(f).all() and jnp.isfinite(l).all() and jnp.isfinite(g).all()):
                raise ValueError(f"evaluators of {self.name!r} are not finite on the problem domain")

    def spot_check_time_homogeneity(self) -> bool:
        xs, us = self._probe_points()
        t_a = jnp.full(len(xs), self.t0)
        t_b = jnp.full(len(xs), 0.5 * (self.t0 + self.T) + 0.123)
        same_f = jnp.array_equal(evaluate_dynamics(self, t_a, xs, us), evaluate_dynamics(self, t_b, xs, us))
        same_l = jnp.array_equal(evaluate_running_cost(self, t_a, xs, us), evaluate_running_cost(self, t_b, xs, us))
        return bool(same_f and same_l)


@partial(jax.jit, static_argnums=(0, ))
def evaluate_dynamics(problem: ControlProblem, t: Array, x: Array, u: Array) -> Array:
    return jax.vmap(problem.dynamics)(t, x, u)


@partial(jax.jit, static_argnums=(0, ))
def evaluate_running_cost(problem: ControlProblem, t: Array, x: Array, u: Array) -> Array:
    return jax.vmap(problem.running_cost)(t, x, u)


@partial(jax.jit, static_argnums=(0, ))
def evaluate_terminal_cost(problem: ControlProblem, x: Array) -> Array:
    return jax.vmap(problem.terminal_cost)(x)


@partial(jax.jit, static_argnums=(0, 1))
def evaluate_running_cost_block(problem: ControlProblem, k: int, t: Array, x: Array, u: Array) -> Array:
    return jax.vmap(problem.running_cost_blocks[k])(t, x, u)


@partial(jax.jit, static_argnums=(0, 1))
def evaluate_terminal_cost_block(problem: ControlProblem, k: int, x: Array) -> Array:
    return jax.vmap(problem.terminal_cost_blocks[k])(x)
