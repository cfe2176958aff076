import hashlib
import logging
from typing import TYPE_CHECKING, NamedTuple, Union

import jax
import jax.numpy as jnp
import numpy as np
from jax import Array
from scipy.stats import qmc

if TYPE_CHECKING:
    from jfom.problems.problem import ControlProblem

logger = logging.getLogger(__name__)


class SampleSet(NamedTuple):
    """Drawn constraint points: running samples on Z and terminal samples on X."""
    t: Array  # f[N]
    x: Array  # f[N, dim_x]
    u: Array  # f[N, dim_u]
    x_T: Array  # f[M, dim_x]
    plan_hash: str = ''

    @property
    def n_running(self) -> int:
        return int(self.t.shape[0])

    @property
    def n_terminal(self) -> int:
        return int(self.x_T.shape[0])

    def state_points(self):
        """Distinct (t, x) pairs of the running samples, in first-seen order."""
        tx = np.concatenate([np.asarray(self.t)[:, None], np.asarray(self.x)], axis=1)
        _, index = np.unique(tx, axis=0, return_index=True)
        index = np.sort(index)
        return self.t[index], self.x[index]


class SamplePlan(NamedTuple):
    """Deterministic Halton points over [t0, T] x X (x U) plus a seeded uniform refill.

    When ``control_grid > 0`` every (t, x) point is paired with a tensor grid of
    ``control_grid`` values per control coordinate; otherwise controls are drawn jointly
    with (t, x). Box vertices are added at t0 and T when ``include_vertices``.
    """
    n_points: int = 256
    n_refill: int = 64
    control_grid: int = 21
    n_terminal: int = 256
    seed: int = 0
    include_vertices: bool = True

    def denser(self, factor: int = 4, seed_offset: int = 1) -> "SamplePlan":
        """An independent, denser plan for validation."""
        return self._replace(
            n_points=self.n_points * factor,
            n_refill=self.n_refill * factor,
            n_terminal=self.n_terminal * factor,
            control_grid=self.control_grid * 2 - 1 if self.control_grid > 0 else 0,
            seed=self.seed + seed_offset,
        )

    @property
    def hash(self) -> str:
        return hashlib.sha1(repr(tuple(self)).encode()).hexdigest()[:12]

    def draw(self, problem: "ControlProblem") -> SampleSet:
        if self.n_points + self.n_refill <= 0 or self.n_terminal < 0:
            raise ValueError("a sample plan needs at least one running sample")
        joint_controls = self.control_grid <= 0
        lo = [problem.t0] + list(problem.state_box.lo) + (list(problem.control_box.lo) if joint_controls else [])
        hi = [problem.T] + list(problem.state_box.hi) + (list(problem.control_box.hi) if joint_controls else [])
        lo, hi = np.array(lo), np.array(hi)

        unit = qmc.Halton(d=len(lo), scramble=False).random(self.n_points) if self.n_points > 0 else np.zeros(
            (0, len(lo)))
        refill = np.asarray(jax.random.uniform(jax.random.PRNGKey(self.seed), (self.n_refill, len(lo))))
        points = lo + (hi - lo) * np.concatenate([unit, refill])

        if self.include_vertices:
            corners = np.asarray(problem.state_box.vertices())
            if joint_controls:
                controls = np.asarray(problem.control_box.vertices())
                corners = np.array([np.concatenate([c, u]) for c in corners for u in controls])
            ends = [np.concatenate([[t], c]) for t in (problem.t0, problem.T) for c in corners]
            points = np.concatenate([points, np.array(ends)])

        t = points[:, 0]
        x = points[:, 1:1 + problem.dim_x]
        if joint_controls:
            u = points[:, 1 + problem.dim_x:]
        else:
            grid = np.asarray(problem.control_box.grid([self.control_grid] * problem.dim_u))
            n_grid = len(grid)
            t = np.repeat(t, n_grid)
            x = np.repeat(x, n_grid, axis=0)
            u = np.tile(grid, (len(points), 1))

        terminal_unit = qmc.Halton(d=problem.dim_x, scramble=False).random(
            self.n_terminal) if self.n_terminal > 0 else np.zeros((0, problem.dim_x))
        x_lo, x_hi = np.array(problem.state_box.lo), np.array(problem.state_box.hi)
        x_T = x_lo + (x_hi - x_lo) * terminal_unit
        if self.include_vertices:
            x_T = np.concatenate([x_T, np.asarray(problem.state_box.vertices())])
        logger.debug("drew %d running and %d terminal samples (plan %s)", len(t), len(x_T), self.hash)
        return SampleSet(jnp.asarray(t), jnp.asarray(x), jnp.asarray(u), jnp.asarray(x_T), self.hash)


def as_sample_set(sampler: Union[SamplePlan, SampleSet], problem: "ControlProblem") -> SampleSet:
    if isinstance(sampler, SamplePlan):
        sampler = sampler.draw(problem)
    if sampler.n_running == 0:
        raise ValueError("empty sample set")
    return sampler
