"""Atomic occupation and boundary measures, pairings and the weak Liouville residual.

Every measure is a finite list of weighted atoms, so every pairing below is an exact
finite sum. Zero-weight atoms are kept so that grids stay aligned across comparisons.
"""
from enum import IntEnum
from functools import partial
from typing import TYPE_CHECKING, Callable, NamedTuple, Optional, Protocol, Tuple

import jax
import jax.numpy as jnp
import numpy as np
from jax import Array

from jfom.tree_util import concat_in_leaf

if TYPE_CHECKING:
    from jfom.problems.problem import ControlProblem


class FieldValue(NamedTuple):
    value: Array  # f[N]
    dt: Array  # f[N]
    grad_x: Array  # f[N, dim_x]


class Field(Protocol):
    """Anything that returns value, time derivative and state gradient on a batch of points."""

    def evaluate(self, t: Array, x: Array) -> FieldValue:
        ...


@partial(jax.jit, static_argnums=(0, ))
def _scalar_field_eval(fn, t: Array, x: Array) -> FieldValue:
    value_and_grad = jax.vmap(jax.value_and_grad(fn, argnums=(0, 1)))
    value, (dt, grad_x) = value_and_grad(t, x)
    return FieldValue(value, dt, grad_x)


class ScalarField(NamedTuple):
    """A differentiable test function v(t, x) given by a jax-traceable callable."""
    fn: Callable[[Array, Array], Array]
    name: str = ''

    def evaluate(self, t: Array, x: Array) -> FieldValue:
        t = jnp.asarray(t, dtype=float)
        x = jnp.asarray(x, dtype=float)
        return _scalar_field_eval(self.fn, t, x)


class OccupationMeasure(NamedTuple):
    weights: Array  # f[N]
    t: Array  # f[N]
    x: Array  # f[N, dim_x]
    u: Array  # f[N, dim_u]
    total_mass: Array  # f[]

    @classmethod
    def new(cls, weights: Array, t: Array, x: Array, u: Array,
            window: Optional[Tuple[float, float]] = None) -> "OccupationMeasure":
        """Atoms (t_i, x_i, u_i) with weights w_i; with `window` every t_i must lie in [t0, T]."""
        weights = jnp.asarray(weights, dtype=float)
        t = jnp.asarray(t, dtype=float)
        x = jnp.asarray(x, dtype=float)
        u = jnp.asarray(u, dtype=float)
        n = weights.shape[0]
        if weights.ndim != 1 or t.shape != (n, ) or x.ndim != 2 or u.ndim != 2 or len(x) != n or len(u) != n:
            raise ValueError(f"atom arrays disagree in shape: weights {weights.shape}, t {t.shape}, "
                             f"x {x.shape}, u {u.shape}")
        if not bool(jnp.all(jnp.isfinite(weights))) or bool(jnp.any(weights < 0)):
            raise ValueError("occupation weights must be finite and nonnegative")
        measure = cls(weights, t, x, u, jnp.sum(weights))
        if window is not None:
            measure.check_window(*window)
        return measure

    @classmethod
    def empty(cls, dim_x: int, dim_u: int) -> "OccupationMeasure":
        return cls.new(jnp.zeros(0), jnp.zeros(0), jnp.zeros((0, dim_x)), jnp.zeros((0, dim_u)))

    @property
    def n_atoms(self) -> int:
        return int(self.weights.shape[0])

    def scaled(self, factor: float) -> "OccupationMeasure":
        weights = self.weights * factor
        return self._replace(weights=weights, total_mass=jnp.sum(weights))

    def in_window(self, t0: float, T: float, tol: float = 1e-12) -> bool:
        return bool(jnp.all((self.t >= t0 - tol) & (self.t <= T + tol)))

    def check_window(self, t0: float, T: float) -> None:
        if self.n_atoms and not self.in_window(t0, T, 1e-12 * max(1.0, abs(t0), abs(T))):
            raise ValueError(f"occupation atoms span t in [{float(jnp.min(self.t))}, {float(jnp.max(self.t))}], "
                             f"outside [{t0}, {T}]")

    @staticmethod
    def concat(measures) -> "OccupationMeasure":
        joined = concat_in_leaf([m._replace(total_mass=None) for m in measures])
        return joined._replace(total_mass=jnp.sum(joined.weights))


class BoundaryMeasure(NamedTuple):
    time: float
    weights: Array  # f[N]
    x: Array  # f[N, dim_x]
    total_mass: Array  # f[]

    @classmethod
    def new(cls, time: float, weights: Array, x: Array) -> "BoundaryMeasure":
        weights = jnp.asarray(weights, dtype=float)
        x = jnp.atleast_2d(jnp.asarray(x, dtype=float))
        if weights.ndim != 1 or x.ndim != 2 or len(x) != len(weights):
            raise ValueError(f"atom arrays disagree in shape: weights {weights.shape}, x {x.shape}")
        if not bool(jnp.all(jnp.isfinite(weights))) or bool(jnp.any(weights < 0)):
            raise ValueError("boundary weights must be finite and nonnegative")
        return cls(float(time), weights, x, jnp.sum(weights))

    @classmethod
    def dirac(cls, time: float, x: Array, mass: float = 1.0) -> "BoundaryMeasure":
        return cls.new(time, jnp.array([mass]), jnp.asarray(x, dtype=float)[None])

    @classmethod
    def empty(cls, time: float, dim_x: int) -> "BoundaryMeasure":
        return cls.new(time, jnp.zeros(0), jnp.zeros((0, dim_x)))

    @property
    def n_atoms(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim_x(self) -> int:
        return int(self.x.shape[1])

    def scaled(self, factor: float) -> "BoundaryMeasure":
        weights = self.weights * factor
        return self._replace(weights=weights, total_mass=jnp.sum(weights))

    @staticmethod
    def concat(measures) -> "BoundaryMeasure":
        time = measures[0].time
        if any(abs(m.time - time) > 1e-12 * max(1.0, abs(time)) for m in measures):
            raise ValueError("cannot join boundary measures at different times")
        weights = jnp.concatenate([m.weights for m in measures])
        x = jnp.concatenate([m.x for m in measures])
        return BoundaryMeasure(time, weights, x, jnp.sum(weights))


class SignedMeasure(NamedTuple):
    """Signed atomic measure on X at a fixed time, e.g. an interface defect nu^- - nu^+."""
    time: float
    weights: Array  # f[N], signed
    x: Array  # f[N, dim_x]

    @classmethod
    def difference(cls, plus: BoundaryMeasure, minus: BoundaryMeasure) -> "SignedMeasure":
        if abs(plus.time - minus.time) > 1e-12 * max(1.0, abs(plus.time)):
            raise ValueError(f"defect between measures at different times {plus.time} and {minus.time}")
        return cls(plus.time, jnp.concatenate([plus.weights, -minus.weights]), jnp.concatenate([plus.x, minus.x]))

    @property
    def net_mass(self) -> Array:
        return jnp.sum(self.weights)


class Provenance(IntEnum):
    EXPLICIT_MIXTURE = 0
    ROLLOUT = 1


class PrimalPair(NamedTuple):
    occupation: OccupationMeasure
    terminal: BoundaryMeasure
    provenance: Provenance
    nodes: Tuple[float, ...] = ()  # segment nodes of a rollout, when present
    source: str = ''  # identifier of the producing rollout or mixture

    @classmethod
    def new(
        cls,
        occupation: OccupationMeasure,
        terminal: BoundaryMeasure,
        provenance: Provenance,
        T: float,
        nodes: Tuple[float, ...] = (),
        source: str = '',
    ) -> "PrimalPair":
        if abs(terminal.time - T) > 1e-12 * max(1.0, abs(T)):
            raise ValueError(f"terminal measure lives at t={terminal.time}, expected T={T}")
        return cls(occupation, terminal, Provenance(provenance), tuple(float(n) for n in nodes), source)


class MassReport(NamedTuple):
    occupation_mass: float
    terminal_mass: float
    expected_occupation_mass: float
    expected_terminal_mass: float
    occupation_deviation: float
    terminal_deviation: float


def occupation_from_trajectory(times: Array, states: Array, controls: Array) -> OccupationMeasure:
    """Trapezoid atoms at the nodes of a sampled trajectory.

    The weights are half step lengths, so they sum to ``times[-1] - times[0]``.
    """
    times = np.asarray(times, dtype=np.float64)
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    if states.ndim == 1:
        states = states[:, None]
    if controls.ndim == 1:
        controls = controls[:, None]
    if times.ndim != 1 or len(times) < 2:
        raise ValueError("a trajectory needs at least two time nodes")
    if len(states) != len(times) or len(controls) != len(times):
        raise ValueError(f"length mismatch: {len(times)} times, {len(states)} states, {len(controls)} controls")
    steps = np.diff(times)
    if np.any(steps <= 0):
        raise ValueError("trajectory times must be strictly increasing")
    weights = np.zeros_like(times)
    weights[:-1] += steps / 2
    weights[1:] += steps / 2
    return OccupationMeasure.new(weights, times, states, controls)


def pair(test: Callable[[Array, Array, Array], Array], measure: OccupationMeasure) -> float:
    """<test, measure> for a pointwise test function test(t, x, u)."""
    if measure.n_atoms == 0:
        return 0.0
    values = jax.vmap(test)(measure.t, measure.x, measure.u)
    values = jnp.broadcast_to(values, measure.weights.shape)
    if not bool(jnp.all(jnp.isfinite(values))):
        raise ValueError("test function is not finite on every atom")
    return float(jnp.sum(measure.weights * values))


def pair_boundary(v: Field, measure: BoundaryMeasure) -> float:
    """<v(time, .), measure> for a field v and a boundary measure at `time`."""
    if measure.n_atoms == 0:
        return 0.0
    fv = v.evaluate(jnp.full(measure.n_atoms, measure.time), measure.x)
    return float(jnp.sum(measure.weights * fv.value))


def pair_defect(v: Field, defect: SignedMeasure) -> float:
    if len(defect.weights) == 0:
        return 0.0
    fv = v.evaluate(jnp.full(len(defect.weights), defect.time), defect.x)
    return float(jnp.sum(defect.weights * fv.value))


def apply_transport(v: Field, problem: "ControlProblem", t: Array, x: Array, u: Array) -> Array:
    """(L_f v)(t, x, u) = dv/dt + grad_x v . f(t, x, u), batched over the leading axis."""
    from jfom.problems.problem import evaluate_dynamics

    scalar = jnp.ndim(t) == 0
    t = jnp.atleast_1d(jnp.asarray(t, dtype=float))
    x = jnp.asarray(x, dtype=float).reshape(len(t), problem.dim_x)
    u = jnp.asarray(u, dtype=float).reshape(len(t), problem.dim_u)
    fv = v.evaluate(t, x)
    if not bool(jnp.all(jnp.isfinite(fv.grad_x))) or not bool(jnp.all(jnp.isfinite(fv.dt))):
        raise ValueError("field gradient is not finite")
    out = fv.dt + jnp.sum(fv.grad_x * evaluate_dynamics(problem, t, x, u), axis=-1)
    return out[0] if scalar else out


def pair_transport(v: Field, problem: "ControlProblem", measure: OccupationMeasure) -> float:
    """<L_f v, measure>."""
    if measure.n_atoms == 0:
        return 0.0
    lv = apply_transport(v, problem, measure.t, measure.x, measure.u)
    return float(jnp.sum(measure.weights * lv))


def check_boundary_times(pair: PrimalPair, mu0: BoundaryMeasure, problem: "ControlProblem") -> None:
    scale = max(1.0, abs(problem.T), abs(problem.t0))
    if abs(mu0.time - problem.t0) > 1e-12 * scale:
        raise ValueError(f"initial measure lives at t={mu0.time}, expected t0={problem.t0}")
    if abs(pair.terminal.time - problem.T) > 1e-12 * scale:
        raise ValueError(f"terminal measure lives at t={pair.terminal.time}, expected T={problem.T}")
    pair.occupation.check_window(problem.t0, problem.T)


def liouville_residual(pair: PrimalPair, mu0: BoundaryMeasure, v: Field, problem: "ControlProblem") -> float:
    """R(v) = <v, mu_T - mu_0> - <L_f v, mu>."""
    check_boundary_times(pair, mu0, problem)
    return pair_boundary(v, pair.terminal) - pair_boundary(v, mu0) - pair_transport(v, problem, pair.occupation)


def mass_report(pair: PrimalPair, mu0: BoundaryMeasure) -> MassReport:
    horizon = pair.terminal.time - mu0.time
    occupation_mass = float(pair.occupation.total_mass)
    terminal_mass = float(pair.terminal.total_mass)
    expected_terminal = float(mu0.total_mass)
    expected_occupation = horizon * expected_terminal
    return MassReport(
        occupation_mass=occupation_mass,
        terminal_mass=terminal_mass,
        expected_occupation_mass=expected_occupation,
        expected_terminal_mass=expected_terminal,
        occupation_deviation=abs(occupation_mass - expected_occupation),
        terminal_deviation=abs(terminal_mass - expected_terminal),
    )


def realized_cost(pair: PrimalPair, problem: "ControlProblem") -> float:
    """J = <l, mu> + <g, mu_T>."""
    from jfom.problems.problem import evaluate_running_cost, evaluate_terminal_cost

    occ, term = pair.occupation, pair.terminal
    running = 0.0
    if occ.n_atoms > 0:
        running = float(jnp.sum(occ.weights * evaluate_running_cost(problem, occ.t, occ.x, occ.u)))
    terminal = 0.0
    if term.n_atoms > 0:
        terminal = float(jnp.sum(term.weights * evaluate_terminal_cost(problem, term.x)))
    return running + terminal
