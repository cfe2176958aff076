"""Implicit realization: segmented rollouts, interface defects and local rollout residuals.

A rollout integrates every atom of the entry measure with a fixed-step integrator. Within
one integration step the control is constant, and the step contributes two trapezoid atoms
of weight h/2, one at each end, both carrying that control. Weights therefore telescope to
the covered time span and the occupation grid is shared by every rollout on the same steps.
"""
import hashlib
import logging
import math
from enum import IntEnum
from functools import partial
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import chex
import jax
import jax.numpy as jnp
import numpy as np
from jax import Array, lax
from scipy.optimize import linprog

from jfom.certificates.basis import FeatureBasis, feature_values
from jfom.certificates.certificate import c1_norm, transport_rows
from jfom.certificates.sampling import SamplePlan, SampleSet, as_sample_set
from jfom.errors import ProvenanceError, RolloutDivergence
from jfom.measures import (
    BoundaryMeasure,
    Field,
    OccupationMeasure,
    PrimalPair,
    Provenance,
    ScalarField,
    SignedMeasure,
    liouville_residual,
    pair_boundary,
    pair_defect,
    pair_transport,
)
from jfom.problems.problem import Box, ControlProblem

logger = logging.getLogger(__name__)


class Integrator(IntEnum):
    EULER = 0
    RK4 = 1

    @classmethod
    def parse(cls, name: Union[str, int, "Integrator"]) -> "Integrator":
        if isinstance(name, str):
            try:
                return cls[name.upper()]
            except KeyError:
                raise ValueError(f"unknown integrator {name!r}, expected 'euler' or 'rk4'") from None
        return cls(name)


class Partition(NamedTuple):
    nodes: Tuple[float, ...]

    @classmethod
    def new(cls, nodes: Sequence[float]) -> "Partition":
        nodes = tuple(float(n) for n in nodes)
        if len(nodes) < 2 or any(b <= a for a, b in zip(nodes, nodes[1:])):
            raise ValueError(f"partition nodes must be strictly increasing, got {nodes}")
        return cls(nodes)

    @classmethod
    def uniform(cls, t0: float, T: float, n_segments: int) -> "Partition":
        if n_segments < 1:
            raise ValueError(f"need at least one segment, got {n_segments}")
        return cls.new([t0 + (T - t0) * k / n_segments for k in range(n_segments + 1)])

    @property
    def n_segments(self) -> int:
        return len(self.nodes) - 1

    def intervals(self):
        return list(zip(self.nodes[:-1], self.nodes[1:]))

    def check_horizon(self, problem: ControlProblem) -> None:
        scale = 1e-12 * max(1.0, abs(problem.T))
        if abs(self.nodes[0] - problem.t0) > scale or abs(self.nodes[-1] - problem.T) > scale:
            raise ValueError(f"partition [{self.nodes[0]}, {self.nodes[-1]}] does not match the horizon "
                             f"[{problem.t0}, {problem.T}]")


class ControlParameterization(NamedTuple):
    """Piecewise-constant open-loop control on uniform intervals of [t0, T]; knots is theta."""
    knots: Array  # f[n_intervals, dim_u]
    t0: float
    T: float

    @classmethod
    def new(cls, knots: Array, t0: float, T: float, control_box: Optional[Box] = None) -> "ControlParameterization":
        knots = jnp.asarray(knots, dtype=float)
        if knots.ndim == 1:
            knots = knots[:, None]
        if knots.ndim != 2 or knots.shape[0] == 0:
            raise ValueError(f"knots must have shape (n_intervals, dim_u), got {knots.shape}")
        if control_box is not None and not bool(jnp.all(control_box.contains(knots, tol=1e-12))):
            raise ValueError("every knot must lie inside the control box")
        return cls(knots, float(t0), float(T))

    @classmethod
    def constant(cls, problem: ControlProblem, n_intervals: int, value: Optional[Array] = None):
        value = problem.control_box.center if value is None else jnp.asarray(value, dtype=float)
        knots = jnp.tile(jnp.reshape(value, (1, problem.dim_u)), (n_intervals, 1))
        return cls.new(knots, problem.t0, problem.T, problem.control_box)

    @property
    def n_intervals(self) -> int:
        return int(self.knots.shape[0])

    @property
    def boundaries(self) -> np.ndarray:
        return self.t0 + (self.T - self.t0) * np.arange(self.n_intervals + 1) / self.n_intervals

    def interval_index(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        index = np.floor((t - self.t0) / (self.T - self.t0) * self.n_intervals).astype(int)
        return np.clip(index, 0, self.n_intervals - 1)

    def readout(self, t: Array) -> Array:
        """a_theta(t, x) = u_theta(t)."""
        return self.knots[self.interval_index(t)]


class SegmentData(NamedTuple):
    occupation: OccupationMeasure
    entry: BoundaryMeasure
    exit: BoundaryMeasure


class SegmentedRollout(NamedTuple):
    segments: Tuple[OccupationMeasure, ...]
    entries: Tuple[BoundaryMeasure, ...]  # nu_k^+, k = 0..K-1
    exits: Tuple[BoundaryMeasure, ...]  # nu_{k+1}^-, k = 0..K-1
    defects: Tuple[SignedMeasure, ...]  # d_k = nu_k^- - nu_k^+, k = 1..K-1
    overridden: Tuple[bool, ...]  # whether entry k (k = 1..K-1) was decision data
    nodes: Tuple[float, ...]
    integrator: Integrator
    step: float
    left_state_box: bool
    source: str

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def segment(self, k: int) -> SegmentData:
        return SegmentData(self.segments[k], self.entries[k], self.exits[k])


class ResidualAggregates(NamedTuple):
    D: float
    E_hat: float
    probe_family: str
    n_probes: int
    defect_norms: Tuple[float, ...] = ()


class DecompositionReport(NamedTuple):
    lhs: float  # R(v)
    rhs: float  # sum_k e_k(v) - sum_k <v(tau_k), d_k>
    abs_gap: float
    residual_sum: float
    defect_sum: float


class CandidateScore(NamedTuple):
    J: float
    D: float
    E_hat: float


def step_times(t_start: float, t_end: float, step: float) -> np.ndarray:
    """Uniform step grid from t_start to t_end; step must divide the interval."""
    length = t_end - t_start
    n = int(round(length / step))
    if n < 1 or abs(n * step - length) > 1e-9 * max(1.0, abs(length)):
        raise ValueError(f"step {step} does not divide the interval [{t_start}, {t_end}]")
    return t_start + length * np.arange(n + 1) / n


def _integrator_step(dynamics, integrator: Integrator, t: Array, x: Array, u: Array, h: Array) -> Array:
    if integrator == Integrator.EULER:
        return x + h * dynamics(t, x, u)
    k1 = dynamics(t, x, u)
    k2 = dynamics(t + h / 2, x + h / 2 * k1, u)
    k3 = dynamics(t + h / 2, x + h / 2 * k2, u)
    k4 = dynamics(t + h, x + h * k3, u)
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _trajectory(problem: ControlProblem, integrator: Integrator, times: Array, controls: Array, x0: Array) -> Array:
    """States at every node of `times` under per-step controls; shape (n + 1, dim_x)."""

    def body(x, inp):
        t, h, u = inp
        x_next = _integrator_step(problem.dynamics, integrator, t, x, u, h)
        return x_next, x_next

    _, xs = lax.scan(body, x0, (times[:-1], jnp.diff(times), controls))
    return jnp.concatenate([x0[None], xs])


def _trapezoid_atoms(times: Array, xs: Array, controls: Array, weight: Array):
    """Two atoms per step (left and right end), both with the step's control."""
    half = jnp.diff(times) / 2 * weight
    w = jnp.concatenate([half, half])
    t = jnp.concatenate([times[:-1], times[1:]])
    x = jnp.concatenate([xs[:-1], xs[1:]])
    u = jnp.concatenate([controls, controls])
    return w, t, x, u


@partial(jax.jit, static_argnums=(0, 1))
def _propagate_atoms(problem: ControlProblem, integrator: Integrator, times: Array, controls: Array, x0s: Array,
                     w0s: Array):
    xs = jax.vmap(_trajectory, in_axes=(None, None, None, None, 0))(problem, integrator, times, controls, x0s)
    w, t, x, u = jax.vmap(_trapezoid_atoms, in_axes=(None, 0, None, 0))(times, xs, controls, w0s)
    return xs, (w.reshape(-1), t.reshape(-1), x.reshape(-1, x.shape[-1]), u.reshape(-1, u.shape[-1]))


def _check_divergence(xs: Array, problem: ControlProblem, safety_box: Box) -> bool:
    if not bool(jnp.all(jnp.isfinite(xs))):
        raise RolloutDivergence(f"rollout of {problem.name!r} produced non-finite states")
    if not bool(jnp.all(safety_box.contains(xs))):
        raise RolloutDivergence(f"rollout of {problem.name!r} left the safety box {safety_box}")
    left = not bool(jnp.all(problem.state_box.contains(xs, tol=1e-12)))
    if left:
        logger.warning("rollout of %s leaves the state box; compact-support assumption violated", problem.name)
    return left


def _integrate_segment(problem, start_states, controls, interval, integrator, step, safety_box):
    t_start, t_end = interval
    if abs(start_states.time - t_start) > 1e-12 * max(1.0, abs(t_start)):
        raise ValueError(f"start states live at t={start_states.time}, segment starts at {t_start}")
    integrator = Integrator.parse(integrator)
    times = step_times(t_start, t_end, step)
    per_step = controls.knots[controls.interval_index((times[:-1] + times[1:]) / 2)]
    if start_states.n_atoms == 0:
        return OccupationMeasure.empty(problem.dim_x, problem.dim_u), BoundaryMeasure.empty(t_end, problem.dim_x), False
    xs, (w, t, x, u) = _propagate_atoms(problem, integrator, jnp.asarray(times), per_step, start_states.x,
                                        start_states.weights)
    safety_box = problem.state_box.enlarged(10.0) if safety_box is None else safety_box
    left = _check_divergence(xs, problem, safety_box)
    occupation = OccupationMeasure.new(w, t, x, u, window=(t_start, t_end))
    exit_measure = BoundaryMeasure(float(times[-1]), start_states.weights, xs[:, -1], start_states.total_mass)
    return occupation, exit_measure, left


def integrate_segment(
    problem: ControlProblem,
    start_states: BoundaryMeasure,
    controls: ControlParameterization,
    interval: Tuple[float, float],
    integrator: Union[str, Integrator] = Integrator.RK4,
    step: float = 1e-2,
    safety_box: Optional[Box] = None,
) -> Tuple[OccupationMeasure, BoundaryMeasure]:
    """Propagate every start atom across [tau_k, tau_{k+1}]; exit weights equal start weights."""
    occupation, exit_measure, _ = _integrate_segment(problem, start_states, controls, interval, integrator, step,
                                                     safety_box)
    return occupation, exit_measure


def _rollout_source(theta: ControlParameterization, partition: Partition, integrator, step, overrides) -> str:
    digest = hashlib.sha1()
    digest.update(np.asarray(theta.knots).tobytes())
    digest.update(repr((partition.nodes, int(integrator), float(step))).encode())
    for o in overrides:
        digest.update(repr(o.time).encode())
        digest.update(np.asarray(o.weights).tobytes())
        digest.update(np.asarray(o.x).tobytes())
    return digest.hexdigest()[:16]


def segmented_rollout(
    problem: ControlProblem,
    theta: ControlParameterization,
    partition: Partition,
    entry_overrides: Sequence[BoundaryMeasure] = (),
    integrator: Union[str, Integrator] = Integrator.RK4,
    step: float = 1e-2,
    mu0: Optional[BoundaryMeasure] = None,
    safety_box: Optional[Box] = None,
) -> Tuple[SegmentedRollout, PrimalPair]:
    """Cascaded shooting, or multiple shooting when interior entries are overridden.

    Overrides are matched to interior partition nodes by their time.
    """
    partition.check_horizon(problem)
    integrator = Integrator.parse(integrator)
    mu0 = problem.initial_measure if mu0 is None else mu0
    by_node = {}
    tol = 1e-12 * max(1.0, abs(problem.T))
    for override in entry_overrides:
        matches = [k for k, node in enumerate(partition.nodes[1:-1], start=1) if abs(node - override.time) <= tol]
        if not matches:
            raise ValueError(f"override at t={override.time} is not at an interior partition node")
        by_node[matches[0]] = override

    segments, entries, exits, defects, overridden = [], [], [], [], []
    left_any = False
    entry = mu0
    for k, interval in enumerate(partition.intervals()):
        if k > 0:
            previous_exit = exits[-1]
            if k in by_node:
                entry = by_node[k]
                overridden.append(True)
            else:
                entry = previous_exit
                overridden.append(False)
            defects.append(SignedMeasure.difference(previous_exit, entry))
        occupation, exit_measure, left = _integrate_segment(problem, entry, theta, interval, integrator, step,
                                                            safety_box)
        left_any = left_any or left
        segments.append(occupation)
        entries.append(entry)
        exits.append(exit_measure)

    source = _rollout_source(theta, partition, integrator, step, [by_node[k] for k in sorted(by_node)])
    rollout = SegmentedRollout(
        segments=tuple(segments),
        entries=tuple(entries),
        exits=tuple(exits),
        defects=tuple(defects),
        overridden=tuple(overridden),
        nodes=partition.nodes,
        integrator=integrator,
        step=float(step),
        left_state_box=left_any,
        source=source,
    )
    terminal = exits[-1]._replace(time=problem.T)
    pair = PrimalPair.new(OccupationMeasure.concat(segments), terminal, Provenance.ROLLOUT, problem.T,
                          nodes=partition.nodes, source=source)
    return rollout, pair


def local_rollout_residual(segment: SegmentData, v: Field, problem: ControlProblem) -> float:
    """e_k(v) = <v(tau_{k+1}), nu^-> - <v(tau_k), nu^+> - <L_f v, mu_k>."""
    return pair_boundary(v, segment.exit) - pair_boundary(v, segment.entry) - pair_transport(
        v, problem, segment.occupation)


def defect_norm(defect: SignedMeasure, exact_atoms: int = 8) -> float:
    """Flat (bounded-Lipschitz) norm sup{<phi, d> : |phi| <= 1, Lip(phi) <= 1}.

    With at most `exact_atoms` atoms of each sign the sup is an exact LP over the values of
    phi on the support (any feasible assignment extends to a 1-Lipschitz, 1-bounded phi).
    Larger clouds get the max over clipped coordinate probes and the constant probe, which
    is a lower estimate.
    """
    weights = np.asarray(defect.weights)
    x = np.asarray(defect.x)
    keep = weights != 0
    weights, x = weights[keep], x[keep]
    if len(weights) == 0:
        return 0.0
    n_pos, n_neg = int(np.sum(weights > 0)), int(np.sum(weights < 0))
    if n_pos <= exact_atoms and n_neg <= exact_atoms:
        n = len(weights)
        rows, rhs = [], []
        for i in range(n):
            for j in range(n):
                if i != j:
                    row = np.zeros(n)
                    row[i], row[j] = 1.0, -1.0
                    rows.append(row)
                    rhs.append(np.linalg.norm(x[i] - x[j]))
        result = linprog(-weights, A_ub=np.array(rows) if rows else None, b_ub=np.array(rhs) if rhs else None,
                         bounds=[(-1.0, 1.0)] * n, method='highs')
        if not result.success:
            raise RuntimeError(f"flat norm LP failed: {result.message}")
        return float(-result.fun)
    center = np.average(x, axis=0, weights=np.abs(weights))
    clipped = np.clip(x - center, -1.0, 1.0)
    return float(max(abs(weights.sum()), np.max(np.abs(weights @ clipped))))


def _as_probe_list(probes):
    if isinstance(probes, FeatureBasis):
        from jfom.certificates.certificate import Certificate
        return [Certificate.new(probes, jnp.eye(probes.size)[j], note=f"probe:{j}") for j in range(probes.size)]
    return list(probes)


def probe_descriptor(probes) -> str:
    if isinstance(probes, FeatureBasis):
        return f"basis(kind={probes.kind.name.lower()}, dim_x={probes.dim_x}, size={probes.size}, " \
               f"degree={probes.degree})"
    names = [getattr(p, 'name', '') or getattr(p, 'note', '') or type(p).__name__ for p in probes]
    return f"fields({', '.join(names)})"


def aggregates(
    rollout: SegmentedRollout,
    probes: Union[FeatureBasis, Sequence[Field]],
    problem: ControlProblem,
    sampler: Union[SamplePlan, SampleSet, None] = None,
    exact_atoms: int = 8,
) -> ResidualAggregates:
    """D = sum_k |d_k|_def and E_hat = max over probes of |sum_k e_k(v)| / |v|_C1 (sampled)."""
    probe_list = _as_probe_list(probes)
    if not probe_list:
        raise ValueError("probe family is empty")
    sampler = SamplePlan(n_points=256, n_refill=0, control_grid=1) if sampler is None else sampler
    t, x = as_sample_set(sampler, problem).state_points()
    # a node that was not overridden carries the exit measure forward, so its defect vanishes
    norms = [
        defect_norm(d, exact_atoms) if overridden else 0.0 for d, overridden in zip(rollout.defects, rollout.overridden)
    ]
    e_hat = 0.0
    for v in probe_list:
        norm = c1_norm(v, t, x)
        if norm == 0:
            raise ValueError(f"probe {probe_descriptor([v])} has zero C1 norm")
        total = sum(local_rollout_residual(rollout.segment(k), v, problem) for k in range(rollout.n_segments))
        e_hat = max(e_hat, abs(total) / norm)
    return ResidualAggregates(float(sum(norms)), e_hat, probe_descriptor(probes), len(probe_list), tuple(norms))


def decomposition_check(rollout: SegmentedRollout, pair: PrimalPair, mu0: BoundaryMeasure, v: Field,
                        problem: ControlProblem) -> DecompositionReport:
    """R(v) against sum_k e_k(v) - sum_k <v(tau_k), d_k>, an exact identity over atoms."""
    if pair.source != rollout.source or pair.provenance != Provenance.ROLLOUT:
        raise ProvenanceError(f"pair {pair.source!r} was not produced by rollout {rollout.source!r}")
    lhs = liouville_residual(pair, mu0, v, problem)
    residual_sum = sum(local_rollout_residual(rollout.segment(k), v, problem) for k in range(rollout.n_segments))
    defect_sum = sum(pair_defect(v, d) for d in rollout.defects)
    rhs = residual_sum - defect_sum
    return DecompositionReport(lhs, rhs, abs(lhs - rhs), residual_sum, defect_sum)


def restricted_value(candidates: Sequence[CandidateScore], eta: float, delta: float = math.inf) -> float:
    """min J over evaluated candidates with D <= eta and E_hat <= delta; inf if none qualifies."""
    feasible = [c.J for c in candidates if c.D <= eta and c.E_hat <= delta]
    return min(feasible) if feasible else math.inf


@partial(jax.jit, static_argnums=(0, 1, 2))
def population_summary(problem: ControlProblem, integrator: Integrator, probe_basis: Optional[FeatureBasis],
                       times: Array, control_index: Array, knots: Array, x0s: Array, w0s: Array):
    """Whole-horizon rollouts of a population of knot arrays (P, n_intervals, dim_u).

    Returns the cost J (P,), the probe residual vectors R(phi_j) (P, r), and the
    trajectories (P, atoms, n_steps + 1, dim_x).
    """
    chex.assert_rank(knots, 3)
    chex.assert_shape(x0s, (w0s.shape[0], problem.dim_x))

    def one(k):
        controls = k[control_index]
        xs = jax.vmap(_trajectory, in_axes=(None, None, None, None, 0))(problem, integrator, times, controls, x0s)
        w, t, x, u = jax.vmap(_trapezoid_atoms, in_axes=(None, 0, None, 0))(times, xs, controls, w0s)
        w, t = w.reshape(-1), t.reshape(-1)
        x, u = x.reshape(-1, x.shape[-1]), u.reshape(-1, u.shape[-1])
        x_T = xs[:, -1]
        J = jnp.sum(w * jax.vmap(problem.running_cost)(t, x, u)) + jnp.sum(w0s * jax.vmap(problem.terminal_cost)(x_T))
        if probe_basis is None:
            return J, jnp.zeros((0, )), xs
        phi_T = feature_values(probe_basis, jnp.full(x_T.shape[0], times[-1]), x_T)
        phi_0 = feature_values(probe_basis, jnp.full(x0s.shape[0], times[0]), x0s)
        _, rows = transport_rows(problem, probe_basis, 0.0, t, x, u)
        residual = w0s @ phi_T - w0s @ phi_0 - w @ rows
        return J, residual, xs

    return jax.vmap(one)(knots)


def probe_norms(probe_basis: FeatureBasis, problem: ControlProblem, sampler: Union[SamplePlan, SampleSet,
                                                                                   None] = None) -> np.ndarray:
    """Sampled C1 norms of every feature of a probe basis."""
    sampler = SamplePlan(n_points=256, n_refill=0, control_grid=1) if sampler is None else sampler
    t, x = as_sample_set(sampler, problem).state_points()
    return np.array([c1_norm(p, t, x) for p in _as_probe_list(probe_basis)])


def constant_field(value: float = 1.0) -> ScalarField:
    return ScalarField(lambda t, x: value + 0.0 * t, name=f"const({value:g})")
