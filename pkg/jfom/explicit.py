"""Explicit realization: finite test families and mixtures over a rollout library.

Both the realized cost and the residual vector are linear in the primal pair, so on a
library of component pairs they are affine in the mixture weights. ``LibraryTable``
stores the per-component values once and every mixture objective is evaluated from it.
"""
import hashlib
import itertools
import logging
import math
from enum import IntEnum
from functools import partial
from typing import NamedTuple, Optional, Sequence, Tuple

import jax
import jax.numpy as jnp
import numpy as np
from jax import Array, lax
from scipy.optimize import linprog, minimize

from jfom.certificates.basis import BasisKind, FeatureBasis, feature_values, graded_exponents
from jfom.certificates.certificate import transport_rows
from jfom.measures import (
    BoundaryMeasure,
    OccupationMeasure,
    PrimalPair,
    Provenance,
    check_boundary_times,
    realized_cost,
)
from jfom.problems.problem import ControlProblem
from jfom.tree_util import batch_into_leaf

logger = logging.getLogger(__name__)


class NormKind(IntEnum):
    MAX_ABS = 0
    EUCLIDEAN = 1

    @classmethod
    def parse(cls, name) -> "NormKind":
        if isinstance(name, str):
            aliases = {'max_abs': cls.MAX_ABS, 'max-abs': cls.MAX_ABS, 'inf': cls.MAX_ABS, 'euclidean': cls.EUCLIDEAN}
            if name.lower() not in aliases:
                raise ValueError(f"unknown norm kind {name!r}")
            return aliases[name.lower()]
        return cls(name)


class TestFamily(NamedTuple):
    """Tests v_j = phi_j of a feature basis, with the dual norm used on residual vectors."""
    __test__ = False  # keep pytest from collecting this class

    basis: FeatureBasis
    norm_kind: NormKind = NormKind.MAX_ABS

    @classmethod
    def polynomial(cls, dim_x: int, degree: int, norm_kind=NormKind.MAX_ABS, time_origin: float = 0.0,
                   time_scale: float = 1.0) -> "TestFamily":
        return cls(FeatureBasis.polynomial(dim_x, degree, time_origin, time_scale), NormKind.parse(norm_kind))

    @property
    def size(self) -> int:
        return self.basis.size

    def norm(self, r: Array) -> Array:
        if self.norm_kind == NormKind.MAX_ABS:
            return jnp.max(jnp.abs(r), axis=-1)
        return jnp.linalg.norm(r, axis=-1)


class ExplicitResidual(NamedTuple):
    vector: Array  # f[m]
    norm: float


class MixtureTrial(NamedTuple):
    components: Tuple[PrimalPair, ...]
    weights: Array  # f[M], theta on the simplex scaled to the mass of mu0
    mass: float

    @classmethod
    def new(cls, components: Sequence[PrimalPair], weights: Array, mass: Optional[float] = None) -> "MixtureTrial":
        components = tuple(components)
        if not components:
            raise ValueError("a mixture needs at least one component")
        weights = jnp.asarray(weights, dtype=float).reshape(-1)
        if weights.shape[0] != len(components):
            raise ValueError(f"{weights.shape[0]} weights for {len(components)} components")
        if bool(jnp.any(weights < 0)) or not bool(jnp.all(jnp.isfinite(weights))):
            raise ValueError("mixture weights must be finite and nonnegative")
        times = {c.terminal.time for c in components}
        if max(times) - min(times) > 1e-12 * max(1.0, abs(max(times))):
            raise ValueError(f"component terminal measures live at different times {sorted(times)}")
        if mass is None:
            mass = float(components[0].terminal.total_mass)
        return cls(components, weights, float(mass))

    @classmethod
    def uniform(cls, components: Sequence[PrimalPair], mass: Optional[float] = None) -> "MixtureTrial":
        components = tuple(components)
        mass = float(components[0].terminal.total_mass) if mass is None else mass
        return cls.new(components, jnp.full(len(components), mass / len(components)), mass)


class LibraryTable(NamedTuple):
    """Per-component realized costs and residual vectors of a rollout library."""
    J: Array  # f[M]
    R: Array  # f[M, m]
    mass: float
    norm_kind: NormKind

    @property
    def n_components(self) -> int:
        return int(self.J.shape[0])

    def cost(self, weights: Array) -> Array:
        return weights @ self.J / self.mass

    def residual(self, weights: Array) -> Array:
        return weights @ self.R / self.mass

    def objective(self, weights: Array, lam: float) -> Array:
        r = self.residual(weights)
        norm = jnp.max(jnp.abs(r), axis=-1) if self.norm_kind == NormKind.MAX_ABS else jnp.linalg.norm(r, axis=-1)
        return self.cost(weights) + lam * norm


class MixtureResult(NamedTuple):
    weights: Array
    value: float
    J: float
    residual_norm: float
    iterations: int = 0


def _basis_residual(basis: FeatureBasis, pair: PrimalPair, mu0: BoundaryMeasure, problem: ControlProblem) -> Array:
    occ, term = pair.occupation, pair.terminal
    r = jnp.zeros(basis.size)
    if term.n_atoms > 0:
        r = r + term.weights @ feature_values(basis, jnp.full(term.n_atoms, term.time), term.x)
    if mu0.n_atoms > 0:
        r = r - mu0.weights @ feature_values(basis, jnp.full(mu0.n_atoms, mu0.time), mu0.x)
    if occ.n_atoms > 0:
        _, rows = transport_rows(problem, basis, 0.0, occ.t, occ.x, occ.u)
        r = r - occ.weights @ rows
    return r


def residual_vector(pair: PrimalPair, mu0: BoundaryMeasure, tests: TestFamily,
                    problem: ControlProblem) -> ExplicitResidual:
    """r_j = <v_j, mu_T - mu0> - <L_f v_j, mu> for every test, with its norm."""
    check_boundary_times(pair, mu0, problem)
    r = _basis_residual(tests.basis, pair, mu0, problem)
    return ExplicitResidual(r, float(tests.norm(r)))


def refine_tests(tests: TestFamily, order: int) -> TestFamily:
    """Raise the total (t, x) degree of a polynomial family to `order`.

    Existing tests keep their positions; new monomials are appended in graded order, so the
    returned family contains the original as a prefix.
    """
    basis = tests.basis
    if basis.kind != BasisKind.POLYNOMIAL:
        raise ValueError("only polynomial test families can be refined")
    if order < basis.degree:
        raise ValueError(f"refinement order {order} is below the current degree {basis.degree}")
    present = set(basis.exponents)
    extra = tuple(e for e in graded_exponents(basis.dim_x + 1, order) if e not in present)
    if not extra:
        return tests
    refined = basis._replace(exponents=basis.exponents + extra)
    return tests._replace(basis=refined)


def _check_weight_sum(trial: MixtureTrial) -> None:
    total = float(jnp.sum(trial.weights))
    if abs(total - trial.mass) > 1e-12 * max(1.0, abs(trial.mass)):
        raise ValueError(f"mixture weights sum to {total!r}, expected the initial mass {trial.mass!r}")


def mixture_pair(trial: MixtureTrial) -> PrimalPair:
    """Atom union of the components, each scaled by w_k / mass."""
    _check_weight_sum(trial)
    factors = [float(w) / trial.mass for w in trial.weights]
    occupation = OccupationMeasure.concat([c.occupation.scaled(f) for c, f in zip(trial.components, factors)])
    terminal = BoundaryMeasure.concat([c.terminal.scaled(f) for c, f in zip(trial.components, factors)])
    digest = hashlib.sha1(repr([c.source for c in trial.components]).encode())
    digest.update(np.asarray(trial.weights).tobytes())
    return PrimalPair(occupation, terminal, Provenance.EXPLICIT_MIXTURE, source=f"mixture:{digest.hexdigest()[:16]}")


def explicit_objective(trial: MixtureTrial, tests: TestFamily, lam: float, problem: ControlProblem,
                       mu0: BoundaryMeasure) -> float:
    """J(mixture) + lam * |r(mixture)|."""
    if lam < 0 or math.isnan(lam):
        raise ValueError(f"residual penalty must be nonnegative, got {lam}")
    pair = mixture_pair(trial)
    J = realized_cost(pair, problem)
    if lam == 0:
        return J
    return J + lam * residual_vector(pair, mu0, tests, problem).norm


def tabulate(library: Sequence[PrimalPair], tests: TestFamily, problem: ControlProblem,
             mu0: BoundaryMeasure) -> LibraryTable:
    if not library:
        raise ValueError("empty rollout library")
    J = jnp.array([realized_cost(p, problem) for p in library])
    residuals = batch_into_leaf([residual_vector(p, mu0, tests, problem) for p in library])
    return LibraryTable(J, residuals.vector, float(mu0.total_mass), tests.norm_kind)


def project_to_simplex(v: Array, mass: float = 1.0) -> Array:
    """Euclidean projection onto {w >= 0, sum w = mass}."""
    mu = jnp.sort(v)[::-1]
    cumulative = jnp.cumsum(mu) - mass
    index = jnp.arange(1, v.shape[0] + 1)
    rho = jnp.max(jnp.where(mu - cumulative / index > 0, index, 0))
    theta = cumulative[rho - 1] / rho
    return jnp.maximum(v - theta, 0.0)


@partial(jax.jit, static_argnums=(3, 4))
def _subgradient_descent(J: Array, R: Array, lam: Array, norm_kind: NormKind, iterations: int, w0: Array,
                         step0: Array):
    """Projected subgradient on the unit simplex with steps step0 / sqrt(k + 1); keeps the best iterate."""

    def value_and_subgradient(p):
        r = p @ R
        if norm_kind == NormKind.MAX_ABS:
            j = jnp.argmax(jnp.abs(r))
            norm = jnp.abs(r[j])
            g_norm = R[:, j] * jnp.sign(r[j])
        else:
            norm = jnp.linalg.norm(r)
            g_norm = R @ jnp.where(norm > 0, r / jnp.maximum(norm, 1e-300), 0.0)
        return p @ J + lam * norm, J + lam * g_norm

    def body(carry, k):
        p, best_p, best_value = carry
        value, g = value_and_subgradient(p)
        better = value < best_value
        best_p = jnp.where(better, p, best_p)
        best_value = jnp.where(better, value, best_value)
        p = project_to_simplex(p - step0 / jnp.sqrt(k + 1.0) * g)
        return (p, best_p, best_value), None

    (p, best_p, best_value), _ = lax.scan(body, (w0, w0, jnp.inf), jnp.arange(iterations))
    value, _ = value_and_subgradient(p)
    return jnp.where(value < best_value, p, best_p), jnp.minimum(value, best_value)


def optimize_mixture(table: LibraryTable, lam: float, iterations: int = 2000,
                     init: Optional[Array] = None) -> MixtureResult:
    """Minimize J + lam |r| over mixture weights by projected subgradient descent."""
    if lam < 0:
        raise ValueError(f"residual penalty must be nonnegative, got {lam}")
    M = table.n_components
    # scaled to the unit simplex: J and R per unit mass
    J, R = table.J, table.R
    p0 = jnp.full(M, 1.0 / M) if init is None else project_to_simplex(jnp.asarray(init, dtype=float) / table.mass)
    scale = float(jnp.max(jnp.abs(J))) + lam * float(jnp.max(jnp.abs(R))) if R.size else float(jnp.max(jnp.abs(J)))
    step0 = 1.0 / max(scale, 1e-12)
    p, _ = _subgradient_descent(J, R, jnp.asarray(lam, dtype=float), table.norm_kind, int(iterations), p0,
                                jnp.asarray(step0))
    weights = p * table.mass
    value = float(table.objective(weights, lam))
    logger.debug("mixture optimizer: value %.6g after %d iterations", value, iterations)
    return MixtureResult(weights, value, float(table.cost(weights)), float(_norm(table, weights)), int(iterations))


def _norm(table: LibraryTable, weights: Array) -> Array:
    r = table.residual(weights)
    return jnp.max(jnp.abs(r)) if table.norm_kind == NormKind.MAX_ABS else jnp.linalg.norm(r)


def simplex_grid(n_components: int, resolution: float) -> np.ndarray:
    """All points of the unit simplex whose coordinates are multiples of `resolution`."""
    n = int(round(1.0 / resolution))
    if abs(n * resolution - 1.0) > 1e-9:
        raise ValueError(f"resolution {resolution} does not divide 1")
    points = [c for c in itertools.product(range(n + 1), repeat=n_components - 1) if sum(c) <= n]
    return np.array([list(c) + [n - sum(c)] for c in points], dtype=float) / n


def brute_force_mixture(table: LibraryTable, lam: float, resolution: float = 1e-2) -> MixtureResult:
    """Grid oracle over the weight simplex for small libraries."""
    grid = jnp.asarray(simplex_grid(table.n_components, resolution)) * table.mass
    values = jax.vmap(lambda w: table.objective(w, lam))(grid)
    i = int(jnp.argmin(values))
    return MixtureResult(grid[i], float(values[i]), float(table.cost(grid[i])), float(_norm(table, grid[i])))


def restricted_value(table: LibraryTable, eta: float) -> MixtureResult:
    """min J over mixtures with |r| <= eta; value is inf when no mixture qualifies."""
    if eta < 0:
        raise ValueError(f"residual threshold must be nonnegative, got {eta}")
    J, R = np.asarray(table.J), np.asarray(table.R)
    M = len(J)
    infeasible = MixtureResult(jnp.full(M, math.nan), math.inf, math.inf, math.inf)
    if table.norm_kind == NormKind.MAX_ABS:
        A_ub = np.concatenate([R.T, -R.T]) if R.size else None
        b_ub = np.full(2 * R.shape[1], eta) if R.size else None
        result = linprog(J, A_ub=A_ub, b_ub=b_ub, A_eq=np.ones((1, M)), b_eq=[1.0], bounds=[(0, None)] * M,
                         method='highs')
        if result.status == 2:
            return infeasible
        if not result.success:
            raise RuntimeError(f"restricted value LP failed: {result.message}")
        p = np.maximum(result.x, 0.0)
    else:
        result = minimize(
            lambda p: p @ J,
            np.full(M, 1.0 / M),
            jac=lambda p: J,
            method='SLSQP',
            bounds=[(0, None)] * M,
            constraints=[{'type': 'eq', 'fun': lambda p: np.sum(p) - 1.0},
                         {'type': 'ineq', 'fun': lambda p: eta**2 - np.sum((p @ R)**2)}],
            options={'ftol': 1e-12, 'maxiter': 500},
        )
        p = np.maximum(result.x, 0.0)
        p = p / p.sum()
        if np.linalg.norm(p @ R) > eta * (1 + 1e-6) + 1e-12:
            return infeasible
    weights = jnp.asarray(p) * table.mass
    return MixtureResult(weights, float(table.cost(weights)), float(table.cost(weights)), float(_norm(table, weights)))
