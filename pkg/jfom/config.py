import hashlib
import math
from typing import Any, Dict, NamedTuple, Optional, Tuple

import numpy as np
import toml

from jfom.certificates.basis import FeatureBasis
from jfom.certificates.sampling import SamplePlan
from jfom.errors import ConfigError
from jfom.problems.benchmarks import LQRWeights, make_lqr, make_strict_feedback, make_unicycle_avoid
from jfom.problems.problem import ControlProblem


def _freeze(value):
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value):
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    if isinstance(value, float) and value == math.inf:
        return 'inf'
    return value


def _section(cls, data: Optional[Dict[str, Any]], section: str, renames: Optional[Dict[str, str]] = None):
    """Build a NamedTuple config from one TOML table, rejecting unknown keys."""
    data = dict(data or {})
    for outer, inner in (renames or {}).items():
        if outer in data:
            data[inner] = data.pop(outer)
    unknown = sorted(set(data) - set(cls._fields))
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    defaults = cls._field_defaults
    values = {}
    for key, value in data.items():
        value = _freeze(value)
        default = defaults.get(key)
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if isinstance(default, float) and value in ('inf', '+inf'):
            value = math.inf
        if default is not None and not isinstance(value, type(default)):
            raise ConfigError(f"[{section}] {key} should be {type(default).__name__}, got {value!r}")
        values[key] = value
    return cls(**values)


class ProblemConfig(NamedTuple):
    kind: str = 'lqr'  # lqr | unicycle | strict_feedback
    horizon: float = 1.0
    t0: float = 0.0
    state_radius: float = 3.0  # lqr and strict_feedback boxes
    control_radius: float = 3.0

    ### LQR ###
    state_dim: int = 1
    a: float = 0.0  # A = a I
    q: float = 1.0
    r: float = 1.0
    qf: float = 0.0
    x0: Tuple[float, ...] = ()

    ### unicycle ###
    obstacles: Tuple[Tuple[float, ...], ...] = ((0.0, 0.05, 0.4), )
    speed: float = 1.0
    start: Tuple[float, ...] = (-1.0, 0.0, 0.0)
    goal: Tuple[float, ...] = (1.0, 0.0)
    omega_max: float = 2.0
    penalty_scale: float = 10.0
    arena: float = 2.0  # position box [-arena, arena]^2
    heading_bound: float = 4.0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProblemConfig":
        return _section(cls, data, 'problem')

    def build(self) -> ControlProblem:
        if self.kind == 'lqr':
            n = self.state_dim
            weights = LQRWeights(Q=self.q * np.eye(n), R=self.r * np.eye(n), Qf=self.qf * np.eye(n))
            return make_lqr(self.horizon, n, weights, A=self.a * np.eye(n), x0=self.x0 or None, t0=self.t0,
                            state_radius=self.state_radius, control_radius=self.control_radius)
        if self.kind == 'unicycle':
            return make_unicycle_avoid(self.obstacles, self.speed, self.horizon, start=self.start, goal=self.goal,
                                       omega_max=self.omega_max, penalty_scale=self.penalty_scale, arena=self.arena,
                                       heading_bound=self.heading_bound)
        if self.kind == 'strict_feedback':
            return make_strict_feedback(self.horizon, state_radius=self.state_radius, control_radius=self.control_radius,
                                        **({'x0': self.x0} if self.x0 else {}))
        raise ConfigError(f"unknown problem kind {self.kind!r}")


class BasisConfig(NamedTuple):
    kind: str = 'tensor'  # tensor | polynomial | radial | blockwise | time_to_go
    degree: int = 2
    time_degree: int = 4
    state_degree: int = 2
    time_origin: float = 0.0
    time_scale: float = 1.0
    centers_per_axis: int = 5
    width: float = 0.5

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BasisConfig":
        return _section(cls, data, 'basis')

    def build(self, problem: ControlProblem) -> FeatureBasis:
        n = problem.dim_x
        if self.kind == 'tensor':
            return FeatureBasis.tensor(n, self.time_degree, self.state_degree, self.time_origin, self.time_scale)
        if self.kind == 'polynomial':
            return FeatureBasis.polynomial(n, self.degree, self.time_origin, self.time_scale)
        if self.kind == 'time_to_go':
            return FeatureBasis.time_to_go(n, problem.T)
        if self.kind == 'radial':
            centers = problem.state_box.grid([self.centers_per_axis] * n)
            return FeatureBasis.radial(n, np.asarray(centers), self.width, self.time_degree, self.time_origin,
                                       self.time_scale)
        if self.kind == 'blockwise':
            if not problem.blocks:
                raise ConfigError(f"problem {problem.name!r} declares no blocks")
            return FeatureBasis.blockwise(n, [(S, self.build_for_dim(len(S))) for S in problem.blocks])
        raise ConfigError(f"unknown basis kind {self.kind!r}")

    def build_for_dim(self, dim: int) -> FeatureBasis:
        return FeatureBasis.tensor(dim, self.time_degree, self.state_degree, self.time_origin, self.time_scale)


class RolloutConfig(NamedTuple):
    segments: int = 1
    knots: int = 10
    integrator: str = 'rk4'
    step: float = 0.01

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RolloutConfig":
        return _section(cls, data, 'rollout')


class SearchConfig(NamedTuple):
    tau: float = math.inf
    lam: float = 0.0
    lambda_d: Optional[float] = None  # defaults to lam
    lambda_e: Optional[float] = None  # defaults to lam
    population: int = 128
    elite_fraction: float = 0.125
    iterations: int = 50
    seed: int = 0
    candidate_controls: int = 11  # grid points per control coordinate
    context: str = 'elites'  # elites | grid
    context_elites: int = 4
    context_stride: int = 5
    residual_cap: float = math.inf
    probe_degree: int = 2
    init_std: float = 0.5  # fraction of the control box width
    min_std: float = 1e-3
    smoothing: float = 0.0
    max_relax: int = 8

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SearchConfig":
        return _section(cls, data, 'search', renames={'lambda': 'lam'})

    def validate(self) -> "SearchConfig":
        if self.tau < 0 or math.isnan(self.tau):
            raise ValueError(f"tau must be nonnegative, got {self.tau}")
        for name in ('lam', 'lambda_d', 'lambda_e'):
            value = getattr(self, name)
            if value is not None and (value < 0 or not math.isfinite(value)):
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")
        if self.population < 1 or self.iterations < 1 or self.candidate_controls < 1:
            raise ValueError("population, iterations and candidate_controls must be positive")
        if not 0 < self.elite_fraction <= 1:
            raise ValueError(f"elite_fraction must lie in (0, 1], got {self.elite_fraction}")
        if not 0 <= self.smoothing < 1:
            raise ValueError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.residual_cap < 0:
            raise ValueError(f"residual_cap must be nonnegative, got {self.residual_cap}")
        if self.context not in ('elites', 'grid'):
            raise ValueError(f"unknown context kind {self.context!r}")
        return self

    @property
    def weights(self) -> Tuple[float, float]:
        """(lambda_D, lambda_E)."""
        lam_d = self.lam if self.lambda_d is None else self.lambda_d
        lam_e = self.lam if self.lambda_e is None else self.lambda_e
        return lam_d, lam_e

    @property
    def n_elite(self) -> int:
        return max(1, int(math.ceil(self.elite_fraction * self.population)))


class DualConfig(NamedTuple):
    iterations: int = 400
    max_rounds: int = 6
    rho0: float = 1.0
    rho_growth: float = 10.0
    step_size: float = 0.1
    psi_bound: float = 1e3
    trust_radius: float = math.inf
    lp_margin: float = 1e-9
    margin: float = 1.1  # declared tolerances are at least margin x validated estimates
    validation_factor: int = 4
    proximal: float = 0.0
    alternations: int = 2

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DualConfig":
        return _section(cls, data, 'dual')


class SamplingConfig(NamedTuple):
    n_points: int = 256
    n_refill: int = 64
    control_grid: int = 21
    n_terminal: int = 256
    seed: int = 0
    include_vertices: bool = True

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SamplingConfig":
        return _section(cls, data, 'sampling')

    def plan(self) -> SamplePlan:
        return SamplePlan(*self)


class OutputConfig(NamedTuple):
    directory: str = 'runs/default'
    heatmap_grid: Tuple[int, ...] = (41, 41)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OutputConfig":
        return _section(cls, data, 'output')


class RunConfig(NamedTuple):
    problem: ProblemConfig = ProblemConfig()
    basis: BasisConfig = BasisConfig()
    rollout: RolloutConfig = RolloutConfig()
    search: SearchConfig = SearchConfig()
    dual: DualConfig = DualConfig()
    sampling: SamplingConfig = SamplingConfig()
    output: OutputConfig = OutputConfig()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        unknown = sorted(set(data) - set(cls._fields))
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        return cls(
            problem=ProblemConfig.from_dict(data.get('problem')),
            basis=BasisConfig.from_dict(data.get('basis')),
            rollout=RolloutConfig.from_dict(data.get('rollout')),
            search=SearchConfig.from_dict(data.get('search')),
            dual=DualConfig.from_dict(data.get('dual')),
            sampling=SamplingConfig.from_dict(data.get('sampling')),
            output=OutputConfig.from_dict(data.get('output')),
        )

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        out = {}
        for name, section in self._asdict().items():
            table = {k: _thaw(v) for k, v in section._asdict().items() if v is not None}
            if name == 'search':
                table['lambda'] = table.pop('lam')
            out[name] = table
        return out

    @property
    def hash(self) -> str:
        return hashlib.sha1(toml.dumps(self.to_dict()).encode()).hexdigest()[:12]

    def with_seed(self, seed: int) -> "RunConfig":
        return self._replace(search=self.search._replace(seed=seed), sampling=self.sampling._replace(seed=seed))


def load_config(path: str) -> RunConfig:
    try:
        data = toml.load(path)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except toml.TomlDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    return RunConfig.from_dict(data)
