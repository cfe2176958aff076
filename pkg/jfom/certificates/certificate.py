import logging
import math
from functools import partial
from typing import Callable, NamedTuple, Optional, Sequence, Tuple, Union

import chex
import jax
import jax.numpy as jnp
import numpy as np
from jax import Array

from jfom.certificates.basis import BasisKind, FeatureBasis, feature_jacobians, feature_values
from jfom.certificates.sampling import SamplePlan, SampleSet, as_sample_set
from jfom.errors import ValidationError
from jfom.measures import BoundaryMeasure, FieldValue
from jfom.problems.problem import (
    ControlProblem,
    PerturbationBudget,
    evaluate_dynamics,
    evaluate_running_cost_block,
    evaluate_terminal_cost,
    evaluate_terminal_cost_block,
)

logger = logging.getLogger(__name__)


class Certificate(NamedTuple):
    """v_psi(t, x) = psi . phi(t - t_shift, x) with declared tolerances (eps, eps_T)."""
    basis: FeatureBasis
    psi: Array  # f[r]
    eps: float = 0.0
    eps_T: float = 0.0
    t_shift: float = 0.0
    note: str = ''

    @classmethod
    def new(
        cls,
        basis: FeatureBasis,
        psi: Array,
        eps: float = 0.0,
        eps_T: float = 0.0,
        t_shift: float = 0.0,
        note: str = '',
    ) -> "Certificate":
        psi = jnp.asarray(psi, dtype=float).reshape(-1)
        if psi.shape != (basis.size, ):
            raise ValueError(f"coefficient length {psi.shape[0]} does not match basis size {basis.size}")
        for name, value in (('eps', eps), ('eps_T', eps_T)):
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")
        return cls(basis, psi, float(eps), float(eps_T), float(t_shift), note)

    @classmethod
    def zeros(cls, basis: FeatureBasis, eps: float = 0.0, eps_T: float = 0.0) -> "Certificate":
        return cls.new(basis, jnp.zeros(basis.size), eps, eps_T)

    @property
    def size(self) -> int:
        return self.basis.size

    @property
    def dim_x(self) -> int:
        return self.basis.dim_x

    def with_tolerances(self, eps: float, eps_T: float) -> "Certificate":
        return Certificate.new(self.basis, self.psi, eps, eps_T, self.t_shift, self.note)

    def evaluate(self, t: Array, x: Array) -> FieldValue:
        t = jnp.asarray(t, dtype=float)
        x = jnp.asarray(x, dtype=float)
        return _evaluate(self.basis, self.psi, self.t_shift, t, x)

    def block(self, k: int) -> "Certificate":
        """The k-th block certificate v_k(t, x_{S_k}) of a blockwise composite."""
        if self.basis.kind != BasisKind.BLOCKWISE:
            if k != 0:
                raise ValueError(f"certificate has a single block, asked for block {k}")
            return self
        if not 0 <= k < len(self.basis.blocks):
            raise ValueError(f"block index {k} out of range for {len(self.basis.blocks)} blocks")
        offsets = np.cumsum((0, ) + self.basis.block_sizes)
        sub = self.basis.blocks[k][1]
        return Certificate.new(sub, self.psi[offsets[k]:offsets[k + 1]], self.eps, self.eps_T, self.t_shift, self.note)


class FeasibilityReport(NamedTuple):
    eps_hat: float
    eps_T_hat: float
    min_running_slack: float
    min_terminal_slack: float
    argmin_running: Tuple[float, Tuple[float, ...], Tuple[float, ...]]  # (t, x, u)
    argmin_terminal: Tuple[float, ...]
    n_running: int
    n_terminal: int
    plan_hash: str = ''


class GradientBound(NamedTuple):
    """Sampled max of |grad_x v|; a lower estimate of the true sup."""
    value: float
    n_samples: int
    plan_hash: str = ''

    def __float__(self) -> float:
        return float(self.value)


@partial(jax.jit, static_argnums=(0, ))
def _evaluate(basis: FeatureBasis, psi: Array, t_shift: Array, t: Array, x: Array) -> FieldValue:
    phi, dphi_dt, dphi_dx = feature_jacobians(basis, t - t_shift, x)
    return FieldValue(phi @ psi, dphi_dt @ psi, jnp.einsum('nrd,r->nd', dphi_dx, psi))


@partial(jax.jit, static_argnums=(0, 1))
def transport_rows(problem: ControlProblem, basis: FeatureBasis, t_shift: Array, t: Array, x: Array,
                   u: Array) -> Tuple[Array, Array]:
    """Running slack in affine form: s_psi = l + A psi on a batch of points. Returns (l, A)."""
    chex.assert_equal_shape_prefix([t, x, u], 1)
    _, dphi_dt, dphi_dx = feature_jacobians(basis, t - t_shift, x)
    f = jax.vmap(problem.dynamics)(t, x, u)
    rows = dphi_dt + jnp.einsum('nrd,nd->nr', dphi_dx, f)
    return jax.vmap(problem.running_cost)(t, x, u), rows


@partial(jax.jit, static_argnums=(0, ))
def terminal_rows(basis: FeatureBasis, t_shift: Array, T: Array, x: Array) -> Array:
    """phi(T, x) on a batch, so that s_T = g - rows psi."""
    return feature_values(basis, jnp.full(x.shape[0], T) - t_shift, x)


def evaluate(cert: Certificate, t: Array, x: Array) -> FieldValue:
    """Value, time derivative and state gradient of v_psi; accepts single points or batches."""
    scalar = jnp.ndim(t) == 0
    t = jnp.atleast_1d(jnp.asarray(t, dtype=float))
    x = jnp.asarray(x, dtype=float).reshape(len(t), cert.dim_x)
    fv = cert.evaluate(t, x)
    if scalar:
        return FieldValue(fv.value[0], fv.dt[0], fv.grad_x[0])
    return fv


def running_slack(cert: Certificate, problem: ControlProblem, t: Array, x: Array, u: Array) -> Array:
    """s_psi = l + L_f v_psi."""
    scalar = jnp.ndim(t) == 0
    t = jnp.atleast_1d(jnp.asarray(t, dtype=float))
    x = jnp.asarray(x, dtype=float).reshape(len(t), problem.dim_x)
    u = jnp.asarray(u, dtype=float).reshape(len(t), problem.dim_u)
    l, rows = transport_rows(problem, cert.basis, cert.t_shift, t, x, u)
    s = l + rows @ cert.psi
    if not bool(jnp.all(jnp.isfinite(s))):
        raise ValueError("running slack is not finite")
    return s[0] if scalar else s


def terminal_slack(cert: Certificate, problem: ControlProblem, x: Array) -> Array:
    """s_T = g(x) - v_psi(T, x).

    A 0-d value, or a 1-D vector of length dim_x when dim_x > 1, is one point and gives a scalar.
    With dim_x = 1 a 1-D array is a batch of points.
    """
    x = jnp.asarray(x, dtype=float)
    scalar = x.ndim == 0 or (x.ndim == 1 and problem.dim_x > 1)
    if x.ndim > 2 or (x.ndim == 2 and x.shape[1] != problem.dim_x) or (scalar and x.size != problem.dim_x):
        raise ValueError(f"terminal states of shape {x.shape} do not match dim_x={problem.dim_x}")
    x = x.reshape(-1, problem.dim_x)
    s = evaluate_terminal_cost(problem, x) - terminal_rows(cert.basis, cert.t_shift, problem.T, x) @ cert.psi
    if not bool(jnp.all(jnp.isfinite(s))):
        raise ValueError("terminal slack is not finite")
    return s[0] if scalar else s


def estimate_feasibility(cert: Certificate, problem: ControlProblem, sampler: Union[SamplePlan,
                                                                                   SampleSet]) -> FeasibilityReport:
    """Sampled (eps_hat, eps_T_hat) = (max(0, -min s), max(0, -min s_T))."""
    samples = as_sample_set(sampler, problem)
    s = running_slack(cert, problem, samples.t, samples.x, samples.u)
    i = int(jnp.argmin(s))
    if samples.n_terminal > 0:
        s_T = terminal_slack(cert, problem, samples.x_T)
        j = int(jnp.argmin(s_T))
        min_terminal = float(s_T[j])
        argmin_terminal = tuple(float(v) for v in samples.x_T[j])
    else:
        min_terminal = math.inf
        argmin_terminal = ()
    min_running = float(s[i])
    return FeasibilityReport(
        eps_hat=max(0.0, -min_running),
        eps_T_hat=max(0.0, -min_terminal),
        min_running_slack=min_running,
        min_terminal_slack=min_terminal,
        argmin_running=(float(samples.t[i]), tuple(float(v) for v in samples.x[i]),
                        tuple(float(v) for v in samples.u[i])),
        argmin_terminal=argmin_terminal,
        n_running=samples.n_running,
        n_terminal=samples.n_terminal,
        plan_hash=samples.plan_hash,
    )


def validate_certificate(cert: Certificate, problem: ControlProblem, sampler: Union[SamplePlan,
                                                                                   SampleSet]) -> FeasibilityReport:
    """Raises ValidationError when the declared tolerances are below the sampled estimates."""
    report = estimate_feasibility(cert, problem, sampler)
    if report.eps_hat > cert.eps or report.eps_T_hat > cert.eps_T:
        raise ValidationError(f"declared (eps, eps_T) = ({cert.eps:.3e}, {cert.eps_T:.3e}) below sampled "
                              f"estimates ({report.eps_hat:.3e}, {report.eps_T_hat:.3e})")
    return report


def shifted_cost_margins(cert: Certificate, problem: ControlProblem, sampler: Union[SamplePlan,
                                                                                   SampleSet]) -> Tuple[float, float]:
    """Sampled min of s + eps and s_T + eps_T.

    Both are >= 0 exactly when v_psi is a sampled subsolution for the costs (l + eps, g + eps_T).
    """
    report = estimate_feasibility(cert, problem, sampler)
    return report.min_running_slack + cert.eps, report.min_terminal_slack + cert.eps_T


def certified_lower_bound(cert: Certificate, mu0: BoundaryMeasure, horizon: float) -> float:
    """<v(t0, .), mu0> - horizon * mu0(X) * eps - mu0(X) * eps_T."""
    mass = float(mu0.total_mass)
    value = 0.0
    if mu0.n_atoms > 0:
        value = float(jnp.sum(mu0.weights * cert.evaluate(jnp.full(mu0.n_atoms, mu0.time), mu0.x).value))
    return value - horizon * mass * cert.eps - mass * cert.eps_T


def assemble_blockwise(blocks: Sequence[Tuple[Sequence[int], Certificate, float]],
                       dim_x: Optional[int] = None) -> Certificate:
    """v(t, x) = sum_k v_k(t, x_{S_k}) with declared tolerances (sum eta_k, sum eta_k)."""
    if not blocks:
        raise ValueError("no blocks to assemble")
    if dim_x is None:
        dim_x = 1 + max(max(index_set) for index_set, _, _ in blocks)
    shifts = {cert.t_shift for _, cert, _ in blocks}
    if len(shifts) != 1:
        raise ValueError(f"block certificates live on different time domains (shifts {sorted(shifts)})")
    etas = [float(eta) for _, _, eta in blocks]
    if any(eta < 0 or not math.isfinite(eta) for eta in etas):
        raise ValueError(f"block tolerances must be finite and nonnegative, got {etas}")
    if len(blocks) == 1 and tuple(blocks[0][0]) == tuple(range(dim_x)):
        cert = blocks[0][1]
        return Certificate.new(cert.basis, cert.psi, etas[0], etas[0], cert.t_shift, cert.note)
    basis = FeatureBasis.blockwise(dim_x, [(index_set, cert.basis) for index_set, cert, _ in blocks])
    psi = jnp.concatenate([cert.psi for _, cert, _ in blocks])
    total = sum(etas)
    return Certificate.new(basis, psi, total, total, shifts.pop(), note=f"blockwise:{len(blocks)}")


def block_running_slacks(cert: Certificate, problem: ControlProblem, t: Array, x: Array, u: Array) -> Array:
    """Per-block running slacks l_k + d/dt v_k + grad v_k . f_{S_k}; shape (K, N).

    Their sum is the composite running slack whenever l is supplied in split form.
    """
    if cert.basis.kind != BasisKind.BLOCKWISE or len(problem.running_cost_blocks) != len(cert.basis.blocks):
        raise ValueError("block slacks need a blockwise certificate and a matching running cost split")
    f = evaluate_dynamics(problem, t, x, u)
    out = []
    for k, (index_set, _) in enumerate(cert.basis.blocks):
        sub = cert.block(k)
        idx = jnp.array(index_set)
        fv = sub.evaluate(t, x[:, idx])
        l_k = evaluate_running_cost_block(problem, k, t, x, u)
        out.append(l_k + fv.dt + jnp.sum(fv.grad_x * f[:, idx], axis=-1))
    return jnp.stack(out)


def block_terminal_slacks(cert: Certificate, problem: ControlProblem, x: Array) -> Array:
    if cert.basis.kind != BasisKind.BLOCKWISE or len(problem.terminal_cost_blocks) != len(cert.basis.blocks):
        raise ValueError("block slacks need a blockwise certificate and a matching terminal cost split")
    out = []
    for k, (index_set, _) in enumerate(cert.basis.blocks):
        sub = cert.block(k)
        idx = jnp.array(index_set)
        values = sub.evaluate(jnp.full(x.shape[0], problem.T), x[:, idx]).value
        out.append(evaluate_terminal_cost_block(problem, k, x) - values)
    return jnp.stack(out)


def time_shift(cert: Certificate, tau: float, problem: Optional[ControlProblem] = None) -> Certificate:
    """v^tau(t, x) = v(t - tau, x), with the same declared tolerances."""
    if tau < 0 or not math.isfinite(tau):
        raise ValueError(f"time shift must be finite and nonnegative, got {tau}")
    if problem is not None and not problem.time_homogeneous:
        logger.warning("shifting a certificate of the time-dependent problem %r; tolerances are not transferred",
                       problem.name)
    return cert._replace(t_shift=cert.t_shift + float(tau))


def gradient_bound(cert: Certificate, problem: ControlProblem, sampler: Union[SamplePlan, SampleSet]) -> GradientBound:
    """max |grad_x v| over the (t, x) points of a sample plan on [t0, T] x X."""
    samples = as_sample_set(sampler, problem)
    t, x = samples.state_points()
    if len(t) == 0:
        raise ValueError("empty sample set")
    grad = cert.evaluate(t, x).grad_x
    value = float(jnp.max(jnp.linalg.norm(grad, axis=-1)))
    logger.debug("sampled gradient bound %.6g over %d points", value, len(t))
    return GradientBound(value, int(len(t)), samples.plan_hash)


def perturbation_degrade(cert: Certificate, budget: PerturbationBudget, g_v: float) -> Certificate:
    """Tolerances after a bounded model change: (eps + d_l + G_v d_f, eps_T + d_g)."""
    g_v = float(g_v)
    if g_v < 0 or min(budget) < 0:
        raise ValueError(f"gradient bound and budget must be nonnegative, got G_v={g_v}, budget={budget}")
    eps = cert.eps + budget.delta_l + g_v * budget.delta_f
    eps_T = cert.eps_T + budget.delta_g
    return Certificate.new(cert.basis, cert.psi, eps, eps_T, cert.t_shift, cert.note)


def c1_norm(v, t: Array, x: Array) -> float:
    """Sampled sup of |v| + |grad_x v| + |dv/dt|."""
    fv = v.evaluate(t, x)
    return float(jnp.max(jnp.abs(fv.value) + jnp.linalg.norm(fv.grad_x, axis=-1) + jnp.abs(fv.dt)))


def fit_certificate(
    basis: FeatureBasis,
    target: Callable[[Array, Array], Array],
    t: Array,
    x: Array,
    t_shift: float = 0.0,
) -> Certificate:
    """Least-squares projection of target(t, x) (batched) onto the span of the basis."""
    phi = np.asarray(feature_values(basis, jnp.asarray(t) - t_shift, jnp.asarray(x)))
    values = np.asarray(target(jnp.asarray(t), jnp.asarray(x)))
    psi, *_ = np.linalg.lstsq(phi, values, rcond=None)
    return Certificate.new(basis, psi, t_shift=t_shift, note='projection')
