"""Certificate interface and the alternating primal / dual loop."""
import logging
import math
from enum import IntEnum
from functools import partial
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import jax
import jax.numpy as jnp
import numpy as np
from jax import Array, lax
from scipy.optimize import linprog

from jfom.certificates.basis import FeatureBasis
from jfom.certificates.certificate import (
    Certificate,
    certified_lower_bound,
    estimate_feasibility,
    gradient_bound,
    perturbation_degrade,
    terminal_rows,
    time_shift,
    transport_rows,
)
from jfom.certificates.sampling import SamplePlan, SampleSet, as_sample_set
from jfom.config import DualConfig, SearchConfig
from jfom.errors import InfeasibleCertificateError
from jfom.measures import BoundaryMeasure, OccupationMeasure, PrimalPair, check_boundary_times
from jfom.problems.problem import ControlProblem, PerturbationBudget, evaluate_terminal_cost
from jfom.rollout import (
    ControlParameterization,
    Integrator,
    Partition,
    population_summary,
    probe_norms,
    segmented_rollout,
    step_times,
)

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-12


class GapReport(NamedTuple):
    J: float
    cert_value: float  # <v, mu0>
    running_slack_int: float  # <s, mu>
    terminal_slack_int: float  # <s_T, mu_T>
    residual: float  # R(v)
    underline_J: float
    gap: float
    identity_gap: float
    gap_decomposition: float  # <s + eps, mu> + <s_T + eps_T, mu_T> + 2 [R]_+
    occupation_mass: float
    terminal_mass: float
    scale: float
    problem: str = ''


def evaluate_gap(pair: PrimalPair, cert: Certificate, mu0: BoundaryMeasure, problem: ControlProblem) -> GapReport:
    """Realized cost, certificate identity and the residual-corrected gap from one set of atomic sums."""
    check_boundary_times(pair, mu0, problem)
    occ, term = pair.occupation, pair.terminal
    psi = cert.psi

    running_cost = running_slack_int = transport = 0.0
    if occ.n_atoms > 0:
        l, rows = transport_rows(problem, cert.basis, cert.t_shift, occ.t, occ.x, occ.u)
        lv = rows @ psi
        running_cost = float(occ.weights @ l)
        transport = float(occ.weights @ lv)
        running_slack_int = float(occ.weights @ (l + lv))

    terminal_cost = terminal_value = terminal_slack_int = 0.0
    if term.n_atoms > 0:
        g = evaluate_terminal_cost(problem, term.x)
        v_T = terminal_rows(cert.basis, cert.t_shift, term.time, term.x) @ psi
        terminal_cost = float(term.weights @ g)
        terminal_value = float(term.weights @ v_T)
        terminal_slack_int = float(term.weights @ (g - v_T))

    cert_value = 0.0
    if mu0.n_atoms > 0:
        cert_value = float(mu0.weights @ (terminal_rows(cert.basis, cert.t_shift, mu0.time, mu0.x) @ psi))

    J = running_cost + terminal_cost
    residual = terminal_value - cert_value - transport
    occupation_mass = float(occ.total_mass)
    terminal_mass = float(term.total_mass)
    underline_J = cert_value - cert.eps * occupation_mass - cert.eps_T * terminal_mass - abs(residual)
    running_part = running_slack_int + cert.eps * occupation_mass
    terminal_part = terminal_slack_int + cert.eps_T * terminal_mass
    decomposition = running_part + terminal_part + 2 * max(residual, 0.0)
    return GapReport(
        J=J,
        cert_value=cert_value,
        running_slack_int=running_slack_int,
        terminal_slack_int=terminal_slack_int,
        residual=residual,
        underline_J=underline_J,
        gap=J - underline_J,
        identity_gap=abs(J - (cert_value + running_slack_int + terminal_slack_int + residual)),
        gap_decomposition=decomposition,
        occupation_mass=occupation_mass,
        terminal_mass=terminal_mass,
        scale=max(1.0, abs(J)),
        problem=problem.name,
    )


class DualReport(NamedTuple):
    objective: float  # <s, mu> + <s_T, mu_T> at the returned coefficients
    init_objective: float  # nan when no feasible initial coefficients were given
    iterations: int
    iterations_to_feasibility: int  # -1 if the subgradient phase never reached zero violation
    rho: float
    max_violation: float
    n_constraints: int
    chosen: str  # init | subgradient | restoration | polish
    eps_hat: float
    eps_T_hat: float
    validation_plan: str


class ConstraintSystem(NamedTuple):
    """Sampled constraints in the form G psi <= h, plus the objective c0 + c . psi."""
    G: np.ndarray
    h: np.ndarray
    c0: float
    c: np.ndarray
    n_running: int


def _constraint_system(basis: FeatureBasis, t_shift: float, pair: PrimalPair, problem: ControlProblem,
                       samples: SampleSet, eps: float, eps_T: float,
                       proposals: Sequence[OccupationMeasure]) -> ConstraintSystem:
    t, x, u = samples.t, samples.x, samples.u
    extra = [p for p in proposals if p.n_atoms > 0]
    if extra:
        t = jnp.concatenate([t] + [p.t for p in extra])
        x = jnp.concatenate([x] + [p.x for p in extra])
        u = jnp.concatenate([u] + [p.u for p in extra])
    l, A = transport_rows(problem, basis, t_shift, t, x, u)
    Phi_T = terminal_rows(basis, t_shift, problem.T, samples.x_T)
    g = evaluate_terminal_cost(problem, samples.x_T)
    G = np.concatenate([-np.asarray(A), np.asarray(Phi_T)])
    h = np.concatenate([np.asarray(l) + eps, np.asarray(g) + eps_T])

    occ, term = pair.occupation, pair.terminal
    c0, c = 0.0, np.zeros(basis.size)
    if occ.n_atoms > 0:
        l_mu, A_mu = transport_rows(problem, basis, t_shift, occ.t, occ.x, occ.u)
        c0 += float(occ.weights @ l_mu)
        c += np.asarray(occ.weights @ A_mu)
    if term.n_atoms > 0:
        c0 += float(term.weights @ evaluate_terminal_cost(problem, term.x))
        c -= np.asarray(term.weights @ terminal_rows(basis, t_shift, term.time, term.x))
    return ConstraintSystem(G, h, c0, c, int(len(l)))


def _max_violation(system: ConstraintSystem, psi: np.ndarray) -> float:
    return float(np.max(system.G @ psi - system.h))


@partial(jax.jit, static_argnums=(0, ))
def _penalized_subgradient(iterations: int, G: Array, h: Array, c: Array, psi0: Array, rho: Array, step: Array,
                           bound: Array):
    """Subgradient descent on c . psi + rho * sum max(0, G psi - h), clipped to |psi| <= bound.

    Returns the best zero-violation iterate (if any), its objective, the first iteration at
    which the violation vanished and the last iterate.
    """

    def body(carry, k):
        psi, best_psi, best_obj, first = carry
        violation = G @ psi - h
        feasible = jnp.max(violation) <= 0
        obj = c @ psi
        better = feasible & (obj < best_obj)
        best_psi = jnp.where(better, psi, best_psi)
        best_obj = jnp.where(better, obj, best_obj)
        first = jnp.where(feasible & (first < 0), k, first)
        direction = c + rho * (violation > 0).astype(G.dtype) @ G
        norm = jnp.maximum(jnp.linalg.norm(direction), 1e-300)
        psi = jnp.clip(psi - step / jnp.sqrt(k + 1.0) * direction / norm, -bound, bound)
        return (psi, best_psi, best_obj, first), None

    init = (psi0, psi0, jnp.asarray(jnp.inf), jnp.asarray(-1))
    (psi, best_psi, best_obj, first), _ = lax.scan(body, init, jnp.arange(iterations))
    return best_psi, best_obj, first, psi


def _restoration_directions(system: ConstraintSystem) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Coefficient directions that shift every running (resp. terminal) slack by exactly one.

    They exist when the basis contains the constant and a linear time feature (e.g. T - t);
    returns None otherwise.
    """
    n_run = system.n_running
    A, Phi_T = -system.G[:n_run], system.G[n_run:]
    stacked = np.concatenate([A, Phi_T])
    targets = np.zeros((len(stacked), 2))
    targets[:n_run, 0] = 1.0  # raises every running slack by one
    targets[n_run:, 1] = -1.0  # raises every terminal slack by one
    directions, *_ = np.linalg.lstsq(stacked, targets, rcond=None)
    if np.max(np.abs(stacked @ directions - targets)) > 1e-9:
        return None
    return directions[:, 0], directions[:, 1]


def _restore(system: ConstraintSystem, psi: np.ndarray, directions) -> Optional[np.ndarray]:
    if directions is None:
        return None
    n_run = system.n_running
    violation = system.G @ psi - system.h
    run_gap = max(0.0, float(np.max(violation[:n_run]))) if n_run else 0.0
    term_gap = max(0.0, float(np.max(violation[n_run:]))) if len(violation) > n_run else 0.0
    if run_gap == 0.0 and term_gap == 0.0:
        return psi
    pad = 1e-12 * max(1.0, float(np.max(np.abs(system.h))))
    restored = psi + (run_gap + pad) * directions[0] + (term_gap + pad) * directions[1]
    return restored if _max_violation(system, restored) <= 0 else None


def _polish(system: ConstraintSystem, reference: np.ndarray, anchor: Optional[np.ndarray],
            config: DualConfig) -> Optional[np.ndarray]:
    """Sampled LP min c . psi s.t. G psi <= h - margin, inside the trust box around `reference`.

    With a positive proximal weight an L1 pull towards `anchor` is added through auxiliary
    variables z >= |psi - anchor|.
    """
    r = len(system.c)
    lo = np.maximum(-config.psi_bound, reference - config.trust_radius)
    hi = np.minimum(config.psi_bound, reference + config.trust_radius)
    b_ub = system.h - config.lp_margin * np.maximum(1.0, np.abs(system.h))
    if config.proximal > 0 and anchor is not None:
        eye = np.eye(r)
        c = np.concatenate([system.c, np.full(r, config.proximal)])
        A_ub = np.block([[system.G, np.zeros((len(system.G), r))], [eye, -eye], [-eye, -eye]])
        b_ub = np.concatenate([b_ub, anchor, -anchor])
        bounds = list(zip(lo, hi)) + [(0, None)] * r
    else:
        c, A_ub, bounds = system.c, system.G, list(zip(lo, hi))
    result = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method='highs')
    if not result.success:
        logger.debug("polish LP did not solve: %s", result.message)
        return None
    return np.asarray(result.x[:r])


def dual_update(
    basis: FeatureBasis,
    pair: PrimalPair,
    problem: ControlProblem,
    constraint_samples: Union[SamplePlan, SampleSet],
    eps: float = 0.0,
    eps_T: float = 0.0,
    init_psi: Union[None, Array, Certificate] = None,
    proposals: Sequence[OccupationMeasure] = (),
    config: DualConfig = DualConfig(),
    t_shift: float = 0.0,
) -> Tuple[Certificate, DualReport]:
    """Minimize <s, mu> + <s_T, mu_T> over psi subject to s >= -eps and s_T >= -eps_T on samples.

    The exact-penalty subgradient phase runs with rho escalated until an iterate has zero
    sampled violation; restoration and an LP polish follow. The best zero-violation candidate
    (including a feasible init) is returned, re-validated on an independent denser plan, with
    declared tolerances raised to margin x the validated estimates where those are larger.
    """
    if eps < 0 or eps_T < 0:
        raise ValueError(f"tolerances must be nonnegative, got eps={eps}, eps_T={eps_T}")
    if isinstance(init_psi, Certificate):
        if init_psi.basis != basis:
            raise ValueError("initial certificate lives on a different basis")
        t_shift = init_psi.t_shift
        init_psi = init_psi.psi
    samples = as_sample_set(constraint_samples, problem)
    system = _constraint_system(basis, t_shift, pair, problem, samples, eps, eps_T, proposals)
    r = basis.size

    candidates = []  # (objective, order, name, psi)
    init_objective = math.nan
    psi0 = np.zeros(r)
    if init_psi is not None:
        psi0 = np.asarray(init_psi, dtype=np.float64).reshape(-1)
        if psi0.shape != (r, ):
            raise ValueError(f"initial coefficients have length {psi0.shape[0]}, basis has {r}")
        if _max_violation(system, psi0) <= 0:
            init_objective = float(system.c @ psi0)
            candidates.append((init_objective, 0, 'init', psi0))

    rho = config.rho0
    iterations = 0
    first_feasible = 0 if candidates else -1
    last = psi0
    for _ in range(config.max_rounds):
        best_psi, best_obj, first, last = _penalized_subgradient(config.iterations, jnp.asarray(system.G),
                                                                 jnp.asarray(system.h), jnp.asarray(system.c),
                                                                 jnp.asarray(psi0), jnp.asarray(rho),
                                                                 jnp.asarray(config.step_size),
                                                                 jnp.asarray(config.psi_bound))
        if int(first) >= 0:
            if first_feasible < 0:
                first_feasible = iterations + int(first)
            iterations += config.iterations
            candidates.append((float(best_obj), 1, 'subgradient', np.asarray(best_psi)))
            break
        iterations += config.iterations
        rho *= config.rho_growth
    last = np.asarray(last)

    directions = _restoration_directions(system)
    restored = _restore(system, last, directions)
    if restored is not None:
        candidates.append((float(system.c @ restored), 2, 'restoration', restored))

    reference = min(candidates, key=lambda c: (c[0], c[1]))[3] if candidates else last
    polished = _polish(system, reference, psi0 if init_psi is not None else None, config)
    if polished is not None:
        if _max_violation(system, polished) > 0:
            polished = _restore(system, polished, directions)
        if polished is not None:
            candidates.append((float(system.c @ polished), 3, 'polish', polished))

    if not candidates:
        raise InfeasibleCertificateError(
            f"no zero-violation certificate for {problem.name!r} after {iterations} subgradient iterations "
            f"(rho up to {rho:.3g}); max violation {_max_violation(system, last):.3e}")
    objective, _, chosen, psi = min(candidates, key=lambda c: (c[0], c[1]))

    cert = Certificate.new(basis, psi, eps, eps_T, t_shift, note=f"dual_update:{chosen}")
    if isinstance(constraint_samples, SamplePlan):
        validation = constraint_samples.denser(config.validation_factor)
    else:
        validation = constraint_samples
    report = estimate_feasibility(cert, problem, validation)
    declared_eps = max(eps, config.margin * report.eps_hat)
    declared_eps_T = max(eps_T, config.margin * report.eps_T_hat)
    if declared_eps > eps or declared_eps_T > eps_T:
        logger.info("validation raised declared tolerances to (%.3e, %.3e)", declared_eps, declared_eps_T)
    cert = cert.with_tolerances(declared_eps, declared_eps_T)
    logger.debug("dual update on %s: objective %.6g via %s", problem.name, system.c0 + objective, chosen)
    return cert, DualReport(
        objective=system.c0 + objective,
        init_objective=system.c0 + init_objective,
        iterations=iterations,
        iterations_to_feasibility=first_feasible,
        rho=rho,
        max_violation=_max_violation(system, psi),
        n_constraints=len(system.h),
        chosen=chosen,
        eps_hat=report.eps_hat,
        eps_T_hat=report.eps_T_hat,
        validation_plan=report.plan_hash,
    )


class AdmissibleSet(NamedTuple):
    controls: Array  # the admissible subset of the candidates
    mask: Array  # bool[C]
    shifted_slack: Array  # s + eps on every candidate
    threshold: float


@partial(jax.jit, static_argnums=(0, 1))
def _shifted_slacks(problem: ControlProblem, basis: FeatureBasis, psi: Array, t_shift: Array, eps: Array, t: Array,
                    x: Array, candidates: Array) -> Array:
    """s + eps for every (point, candidate) pair; shape (P, C)."""
    n_points, n_candidates = t.shape[0], candidates.shape[0]
    tt = jnp.repeat(t, n_candidates)
    xx = jnp.repeat(x, n_candidates, axis=0)
    uu = jnp.tile(candidates, (n_points, 1))
    l, rows = transport_rows(problem, basis, t_shift, tt, xx, uu)
    return (l + rows @ psi + eps).reshape(n_points, n_candidates)


def candidate_grid(problem: ControlProblem, per_axis: int) -> Array:
    return problem.control_box.grid([per_axis] * problem.dim_u)


def admissible_actions(cert: Certificate, problem: ControlProblem, t: float, x: Array, tau: float,
                       candidates: Array) -> AdmissibleSet:
    """U^tau(t, x) = {u : s_hat(u) <= min s_hat + tau} over a finite candidate grid, s_hat = s + eps."""
    candidates = jnp.asarray(candidates, dtype=float).reshape(-1, problem.dim_u)
    if candidates.shape[0] == 0:
        raise ValueError("candidate control grid is empty")
    if tau < 0 or math.isnan(tau):
        raise ValueError(f"tau must be nonnegative, got {tau}")
    s_hat = _shifted_slacks(problem, cert.basis, cert.psi, cert.t_shift, cert.eps,
                            jnp.atleast_1d(jnp.asarray(t, dtype=float)),
                            jnp.asarray(x, dtype=float).reshape(1, problem.dim_x), candidates)[0]
    threshold = float(jnp.min(s_hat)) + tau
    mask = s_hat <= threshold + TIE_TOLERANCE if math.isfinite(tau) else jnp.ones(len(s_hat), dtype=bool)
    return AdmissibleSet(candidates[mask], mask, s_hat, threshold)


class ContextProvenance(IntEnum):
    ROLLOUT_BATCH = 0
    GRID = 1
    CUSTOM = 2


class DecisionContext(NamedTuple):
    """Finite set of (t, x) points at which candidate readouts must be admissible."""
    t: Array  # f[P]
    x: Array  # f[P, dim_x]
    provenance: ContextProvenance = ContextProvenance.CUSTOM

    @classmethod
    def new(cls, t: Array, x: Array, problem: ControlProblem,
            provenance: ContextProvenance = ContextProvenance.CUSTOM) -> "DecisionContext":
        t = jnp.atleast_1d(jnp.asarray(t, dtype=float))
        x = jnp.asarray(x, dtype=float).reshape(len(t), problem.dim_x)
        inside_t = bool(jnp.all((t >= problem.t0 - 1e-12) & (t <= problem.T + 1e-12)))
        if not inside_t or not bool(jnp.all(problem.state_box.contains(x, tol=1e-12))):
            raise ValueError("decision context points must lie in [t0, T] x X")
        return cls(t, x, ContextProvenance(provenance))

    @classmethod
    def grid(cls, problem: ControlProblem, n_times: int = 5, n_states: int = 5) -> "DecisionContext":
        times = np.linspace(problem.t0, problem.T, n_times, endpoint=False)
        states = np.asarray(problem.state_box.grid([n_states] * problem.dim_x))
        return cls.new(np.repeat(times, len(states)), np.tile(states, (n_times, 1)), problem, ContextProvenance.GRID)

    @classmethod
    def from_trajectories(cls, problem: ControlProblem, times: np.ndarray, trajectories: np.ndarray,
                          stride: int = 1) -> "DecisionContext":
        """Points (t_j, x_j) of rollout trajectories (..., n + 1, dim_x), every `stride` steps before T."""
        index = np.arange(0, len(times) - 1, max(1, stride))
        xs = np.asarray(trajectories)[..., index, :].reshape(-1, problem.dim_x)
        ts = np.broadcast_to(times[index], np.asarray(trajectories).shape[:-2] + (len(index), )).reshape(-1)
        keep = np.asarray(problem.state_box.contains(xs, tol=1e-12))
        return cls.new(ts[keep], xs[keep], problem, ContextProvenance.ROLLOUT_BATCH)

    @property
    def n_points(self) -> int:
        return int(self.t.shape[0])


class PruningRule(NamedTuple):
    """Context points, the readout interval of each and the per-point admission threshold."""
    t: Array
    x: Array
    knot_index: np.ndarray
    threshold: Array  # min over the candidate grid of s_hat, plus tau

    def admits(self, cert: Certificate, problem: ControlProblem, knots: np.ndarray) -> np.ndarray:
        """bool[P] over a population of knot arrays (P, n_intervals, dim_u)."""
        if self.t.shape[0] == 0:
            return np.ones(len(knots), dtype=bool)
        readouts = jnp.asarray(knots)[:, self.knot_index]  # (P, points, dim_u)
        n_pop, n_points = readouts.shape[0], readouts.shape[1]
        tt = jnp.tile(self.t, n_pop)
        xx = jnp.tile(self.x, (n_pop, 1))
        l, rows = transport_rows(problem, cert.basis, cert.t_shift, tt, xx, readouts.reshape(-1, problem.dim_u))
        s_hat = (l + rows @ cert.psi + cert.eps).reshape(n_pop, n_points)
        return np.asarray(jnp.all(s_hat <= self.threshold[None] + TIE_TOLERANCE, axis=1))


def pruning_rule(cert: Certificate, problem: ControlProblem, context: DecisionContext, tau: float, grid: Array,
                 theta: ControlParameterization) -> PruningRule:
    s_hat = _shifted_slacks(problem, cert.basis, cert.psi, cert.t_shift, cert.eps, context.t, context.x, grid)
    return PruningRule(context.t, context.x, theta.interval_index(np.asarray(context.t)), jnp.min(s_hat, axis=1) + tau)


class TraceRecord(NamedTuple):
    iteration: int
    best_score: float
    J: float
    D: float
    E_hat: float
    gap: float
    evaluated: int
    tau: float
    pruning: bool = True  # false once the search runs unpruned


class SearchSummary(NamedTuple):
    iterations: int
    evaluated: int  # candidates rolled out over all iterations
    tau: float  # after any relaxation
    pruning_requested: bool
    pruning_fallback: bool  # initial knots stayed inadmissible, search ran unpruned


def summarize_search(trace: Sequence[TraceRecord], config: SearchConfig, prune: bool = True) -> SearchSummary:
    requested = prune and math.isfinite(config.tau)
    fallback = requested and any(not record.pruning for record in trace)
    tau = trace[-1].tau if trace else config.tau
    return SearchSummary(len(trace), sum(record.evaluated for record in trace), float(tau), requested, fallback)


def _ordered(scores: np.ndarray, params: np.ndarray) -> np.ndarray:
    """Indices sorted by score, ties broken by lexicographic parameter order."""
    flat = params.reshape(len(params), -1)
    keys = [flat[:, j] for j in reversed(range(flat.shape[1]))] + [scores]
    return np.lexsort(keys)


def pruned_search(
    problem: ControlProblem,
    cert: Certificate,
    theta0: ControlParameterization,
    partition: Partition,
    config: SearchConfig = SearchConfig(),
    context: Optional[DecisionContext] = None,
    prune: bool = True,
    integrator: Union[str, Integrator] = Integrator.RK4,
    step: float = 1e-2,
) -> Tuple[ControlParameterization, GapReport, List[TraceRecord]]:
    """Certificate-pruned, residual-aware population search over open-loop knots.

    Candidates are drawn around the elite mean with seeded Gaussian noise, clipped to the
    control box, discarded when their readout is not admissible at a context point, and
    scored by J + lambda_E E_hat + lambda_D D. Elites carry over, so the best score never
    increases. When no context is given, the trajectory points of the previous elites are used.
    """
    config = config.validate()
    partition.check_horizon(problem)
    integrator = Integrator.parse(integrator)
    lam_d, lam_e = config.weights
    mu0 = problem.initial_measure
    box_lo, box_hi = np.asarray(problem.control_box.lower), np.asarray(problem.control_box.upper)
    widths = box_hi - box_lo

    times = np.concatenate([step_times(a, b, step)[:-1] for a, b in partition.intervals()] + [[problem.T]])
    control_index = jnp.asarray(theta0.interval_index((times[:-1] + times[1:]) / 2))
    probes = FeatureBasis.polynomial(problem.dim_x, config.probe_degree, time_origin=problem.t0)
    norms = jnp.asarray(probe_norms(probes, problem))
    grid = candidate_grid(problem, config.candidate_controls)
    safety_box = problem.state_box.enlarged(10.0)

    def evaluate(knots: np.ndarray):
        J, residual, xs = population_summary(problem, integrator, probes, jnp.asarray(times), control_index,
                                             jnp.asarray(knots), mu0.x, mu0.weights)
        J, xs = np.asarray(J), np.asarray(xs)
        e_hat = np.asarray(jnp.max(jnp.abs(residual) / norms, axis=-1))
        d = np.zeros_like(J)  # cascaded rollouts have no interface defects
        diverged = ~np.isfinite(J) | ~np.all(np.isfinite(xs), axis=(1, 2, 3)) | ~np.asarray(
            jnp.all(safety_box.contains(jnp.asarray(xs)), axis=(1, 2)))
        score = J + lam_e * e_hat + lam_d * d
        score = np.where(diverged | (d + e_hat > config.residual_cap), np.inf, score)
        return score, J, d, e_hat, xs

    tau = config.tau
    pruning = prune and math.isfinite(tau)

    def context_for(trajectories):
        if context is not None:
            return context
        if config.context == 'grid':
            return DecisionContext.grid(problem)
        return DecisionContext.from_trajectories(problem, times, trajectories, config.context_stride)

    def relax(current):
        relaxed = max(2 * current, 1e-6 * max(1.0, abs(float(mu0.total_mass))))
        logger.warning("no admissible candidate at tau=%.3g; relaxing to %.3g", current, relaxed)
        return relaxed

    knots0 = np.asarray(theta0.knots)
    score0, J0, d0, e0, xs0 = evaluate(knots0[None])
    rule_context = context_for(xs0[:1])
    if pruning:
        for _ in range(config.max_relax):
            rule = pruning_rule(cert, problem, rule_context, tau, grid, theta0)
            if rule.admits(cert, problem, knots0[None])[0]:
                break
            tau = relax(tau)
        else:
            logger.warning("initial knots still not admissible at tau=%.3g after %d relaxations; searching unpruned",
                           tau, config.max_relax)
            pruning, tau = False, math.inf

    elite_knots, elite_scores = knots0[None], score0
    elite_stats = np.stack([J0, d0, e0], axis=1)
    elite_xs = xs0
    mean = knots0
    std = np.broadcast_to(config.init_std * widths, knots0.shape).copy()
    key = jax.random.PRNGKey(config.seed)
    trace: List[TraceRecord] = []
    gap_cache = {}

    def best_gap(knots: np.ndarray) -> GapReport:
        cache_key = knots.tobytes()
        if cache_key not in gap_cache:
            theta = ControlParameterization(jnp.asarray(knots), problem.t0, problem.T)
            _, pair = segmented_rollout(problem, theta, partition, integrator=integrator, step=step)
            gap_cache.clear()
            gap_cache[cache_key] = evaluate_gap(pair, cert, mu0, problem)
        return gap_cache[cache_key]

    for k in range(config.iterations):
        noise = np.asarray(jax.random.normal(jax.random.fold_in(key, k), (config.population, ) + knots0.shape))
        candidates = np.clip(mean[None] + std[None] * noise, box_lo, box_hi)

        survivors = np.arange(config.population)
        if pruning:
            rule = pruning_rule(cert, problem, context_for(elite_xs[:config.context_elites]), tau, grid, theta0)
            admitted = rule.admits(cert, problem, candidates)
            retries = 0
            while not admitted.any() and retries < config.max_relax:
                tau = relax(tau)
                rule = pruning_rule(cert, problem, context_for(elite_xs[:config.context_elites]), tau, grid, theta0)
                admitted = rule.admits(cert, problem, candidates)
                retries += 1
            survivors = np.flatnonzero(admitted)

        evaluated = len(survivors)
        if evaluated:
            # pad to the population size so the jitted kernel keeps one shape
            gather = np.concatenate([survivors, np.full(config.population - evaluated, survivors[0])])
            score, J, d, e_hat, xs = evaluate(candidates[gather])
            score, J, d, e_hat, xs = (a[:evaluated] for a in (score, J, d, e_hat, xs))
            pool_knots = np.concatenate([elite_knots, candidates[survivors]])
            pool_scores = np.concatenate([elite_scores, score])
            pool_stats = np.concatenate([elite_stats, np.stack([J, d, e_hat], axis=1)])
            pool_xs = np.concatenate([elite_xs, xs])
        else:
            pool_knots, pool_scores, pool_stats, pool_xs = elite_knots, elite_scores, elite_stats, elite_xs

        order = _ordered(pool_scores, pool_knots)[:config.n_elite]
        elite_knots, elite_scores = pool_knots[order], pool_scores[order]
        elite_stats, elite_xs = pool_stats[order], pool_xs[order]

        finite = np.isfinite(elite_scores)
        if finite.any():
            fresh_mean = elite_knots[finite].mean(axis=0)
            fresh_std = elite_knots[finite].std(axis=0) if finite.sum() > 1 else std
            mean = config.smoothing * mean + (1 - config.smoothing) * fresh_mean
            std = np.maximum(config.smoothing * std + (1 - config.smoothing) * fresh_std, config.min_std * widths)

        report = best_gap(elite_knots[0])
        J_best, d_best, e_best = elite_stats[0]
        trace.append(
            TraceRecord(k, float(elite_scores[0]), float(J_best), float(d_best), float(e_best), report.gap, evaluated,
                        float(tau), pruning))
        logger.debug("search iteration %d: best score %.6g (%d evaluated)", k, elite_scores[0], evaluated)

    best = ControlParameterization(jnp.asarray(elite_knots[0]), problem.t0, problem.T)
    return best, best_gap(elite_knots[0]), trace


class ComparisonRow(NamedTuple):
    label: str
    underline_P: float
    underline_J: float
    J: float
    gap: float
    rank: int


def compare(reports: Sequence[Tuple[str, Certificate, GapReport]], mu0: BoundaryMeasure,
            horizon: float) -> List[ComparisonRow]:
    """Certified comparison table, ranked by underline_J (lowest first, equal values share a rank)."""
    if not reports:
        return []
    problems = {report.problem for _, _, report in reports}
    if len(problems) > 1:
        raise ValueError(f"cannot compare reports of different problems: {sorted(problems)}")
    rows = [(label, certified_lower_bound(cert, mu0, horizon), report) for label, cert, report in reports]
    values = [report.underline_J for _, _, report in rows]
    ranked = []
    for label, lower, report in rows:
        rank = 1 + sum(v < report.underline_J for v in values)
        ranked.append(ComparisonRow(label, lower, report.underline_J, report.J, report.gap, rank))
    return sorted(ranked, key=lambda row: (row.rank, row.label))


class ToleranceBreakdown(NamedTuple):
    eps: float
    delta_l: float
    g_v_delta_f: float
    eps_T: float
    delta_g: float

    @property
    def running(self) -> float:
        return self.eps + self.delta_l + self.g_v_delta_f

    @property
    def terminal(self) -> float:
        return self.eps_T + self.delta_g


class WarmStart(NamedTuple):
    certificate: Certificate
    g_v: float
    breakdown: ToleranceBreakdown
    problem: ControlProblem


def receding_horizon_step(
    cert: Certificate,
    problem: ControlProblem,
    shift: float = 0.0,
    budget: PerturbationBudget = PerturbationBudget(),
    sampler: Union[SamplePlan, SampleSet] = SamplePlan(),
    safety: float = 1.1,
) -> WarmStart:
    """Shift by `shift` and degrade by `budget`; the result is a valid init for dual_update.

    `problem` is posed on the current window [t0, T]. The warm certificate and `WarmStart.problem`
    live on [t0 + shift, T + shift], and G_v is the sampled gradient bound over that window, inflated
    by `safety`.
    """
    budget = PerturbationBudget.new(*budget)
    if shift < 0 or not math.isfinite(shift):
        raise ValueError(f"time shift must be finite and nonnegative, got {shift}")
    if shift > 0 and not problem.time_homogeneous:
        raise ValueError(f"problem {problem.name!r} is not time homogeneous; a shifted certificate is not valid")
    window = problem.shifted(shift) if shift > 0 else problem
    shifted = time_shift(cert, shift, problem) if shift > 0 else cert
    g_v = 0.0
    if budget.delta_f > 0:
        g_v = safety * gradient_bound(shifted, window, sampler).value
    degraded = perturbation_degrade(shifted, budget, g_v) if not budget.is_zero() else shifted
    breakdown = ToleranceBreakdown(cert.eps, budget.delta_l, g_v * budget.delta_f, cert.eps_T, budget.delta_g)
    return WarmStart(degraded, g_v, breakdown, window)
