import itertools
from enum import IntEnum
from functools import partial
from typing import NamedTuple, Sequence, Tuple

import jax
import jax.numpy as jnp
from jax import Array


class BasisKind(IntEnum):
    POLYNOMIAL = 0
    RADIAL = 1
    BLOCKWISE = 2


def graded_exponents(n_vars: int, degree: int) -> Tuple[Tuple[int, ...], ...]:
    """All exponent vectors of total degree <= degree, ordered by degree.

    Lower-degree families are prefixes of higher-degree ones.
    """
    out = []
    for d in range(degree + 1):
        same_degree = [e for e in itertools.product(range(d + 1), repeat=n_vars) if sum(e) == d]
        out.extend(sorted(same_degree, reverse=True))
    return tuple(out)


class FeatureBasis(NamedTuple):
    """Descriptor of a finite family of C^1 features phi_j(t, x).

    Time enters through s = time_scale * (t - time_origin). Polynomial features are
    s^a x^b for the exponent rows (a, b_1, ..., b_n); radial features are
    s^a exp(-|x - c|^2 / (2 width^2)); blockwise features concatenate sub-bases, each
    reading only its coordinates x[S_k]. The descriptor is hashable and is passed to
    jitted kernels as a static argument.
    """
    kind: BasisKind
    dim_x: int
    time_origin: float = 0.0
    time_scale: float = 1.0
    exponents: Tuple[Tuple[int, ...], ...] = ()
    centers: Tuple[Tuple[float, ...], ...] = ()
    width: float = 1.0
    time_degree: int = 0
    blocks: Tuple[Tuple[Tuple[int, ...], "FeatureBasis"], ...] = ()

    @classmethod
    def polynomial(cls, dim_x: int, degree: int, time_origin: float = 0.0, time_scale: float = 1.0) -> "FeatureBasis":
        """Total degree <= degree in (s, x)."""
        if degree < 0:
            raise ValueError(f"degree must be nonnegative, got {degree}")
        return cls(BasisKind.POLYNOMIAL, dim_x, float(time_origin), float(time_scale),
                   exponents=graded_exponents(dim_x + 1, degree))

    @classmethod
    def tensor(
        cls,
        dim_x: int,
        time_degree: int,
        state_degree: int,
        time_origin: float = 0.0,
        time_scale: float = 1.0,
    ) -> "FeatureBasis":
        """s^a x^b with a <= time_degree and |b| <= state_degree."""
        if time_degree < 0 or state_degree < 0:
            raise ValueError("degrees must be nonnegative")
        state = graded_exponents(dim_x, state_degree)
        exponents = tuple((a, ) + b for b in state for a in range(time_degree + 1))
        return cls(BasisKind.POLYNOMIAL, dim_x, float(time_origin), float(time_scale), exponents=exponents)

    @classmethod
    def from_exponents(
        cls,
        dim_x: int,
        exponents: Sequence[Sequence[int]],
        time_origin: float = 0.0,
        time_scale: float = 1.0,
    ) -> "FeatureBasis":
        exponents = tuple(tuple(int(e) for e in row) for row in exponents)
        if any(len(row) != dim_x + 1 or min(row) < 0 for row in exponents):
            raise ValueError(f"each exponent row needs {dim_x + 1} nonnegative entries (time first)")
        return cls(BasisKind.POLYNOMIAL, dim_x, float(time_origin), float(time_scale), exponents=exponents)

    @classmethod
    def time_to_go(cls, dim_x: int, T: float) -> "FeatureBasis":
        """The two-feature basis {1, T - t}."""
        zero = (0, ) * dim_x
        return cls.from_exponents(dim_x, [(0, ) + zero, (1, ) + zero], time_origin=T, time_scale=-1.0)

    @classmethod
    def radial(
        cls,
        dim_x: int,
        centers: Sequence[Sequence[float]],
        width: float,
        time_degree: int = 0,
        time_origin: float = 0.0,
        time_scale: float = 1.0,
    ) -> "FeatureBasis":
        centers = tuple(tuple(float(c) for c in row) for row in centers)
        if not centers or any(len(c) != dim_x for c in centers):
            raise ValueError(f"radial centers must be a nonempty list of {dim_x}-vectors")
        if width <= 0:
            raise ValueError(f"radial width must be positive, got {width}")
        return cls(BasisKind.RADIAL, dim_x, float(time_origin), float(time_scale), centers=centers,
                   width=float(width), time_degree=int(time_degree))

    @classmethod
    def blockwise(cls, dim_x: int, blocks: Sequence[Tuple[Sequence[int], "FeatureBasis"]]) -> "FeatureBasis":
        normalized = []
        for index_set, sub in blocks:
            index_set = tuple(int(i) for i in index_set)
            if any(i < 0 or i >= dim_x for i in index_set):
                raise ValueError(f"index set {index_set} out of range for dim_x={dim_x}")
            if len(index_set) != sub.dim_x:
                raise ValueError(f"index set {index_set} does not match sub-basis dimension {sub.dim_x}")
            normalized.append((index_set, sub))
        if not normalized:
            raise ValueError("a blockwise basis needs at least one block")
        return cls(BasisKind.BLOCKWISE, dim_x, blocks=tuple(normalized))

    @property
    def size(self) -> int:
        if self.kind == BasisKind.POLYNOMIAL:
            return len(self.exponents)
        elif self.kind == BasisKind.RADIAL:
            return (self.time_degree + 1) * len(self.centers)
        else:
            return sum(sub.size for _, sub in self.blocks)

    @property
    def block_sizes(self) -> Tuple[int, ...]:
        if self.kind != BasisKind.BLOCKWISE:
            return (self.size, )
        return tuple(sub.size for _, sub in self.blocks)

    @property
    def degree(self) -> int:
        """Total polynomial degree; -1 for non-polynomial bases."""
        if self.kind != BasisKind.POLYNOMIAL or not self.exponents:
            return -1
        return max(sum(row) for row in self.exponents)

    def features(self, t: Array, x: Array) -> Array:
        """phi(t, x) for a single point: t scalar, x of shape (dim_x,)."""
        if self.kind == BasisKind.BLOCKWISE:
            return jnp.concatenate([sub.features(t, x[jnp.array(index_set)]) for index_set, sub in self.blocks])
        s = self.time_scale * (t - self.time_origin)
        if self.kind == BasisKind.POLYNOMIAL:
            return jnp.stack([_monomial(s, x, row) for row in self.exponents])
        bumps = [jnp.exp(-jnp.sum((x - jnp.array(c))**2) / (2 * self.width**2)) for c in self.centers]
        return jnp.stack([_power(s, a) * b for a in range(self.time_degree + 1) for b in bumps])

    def jacobians(self, t: Array, x: Array) -> Tuple[Array, Array, Array]:
        """(phi, dphi/dt, dphi/dx) at a single point; shapes (r,), (r,), (r, dim_x)."""
        phi = self.features(t, x)
        dphi_dt, dphi_dx = jax.jacfwd(self.features, argnums=(0, 1))(t, x)
        return phi, dphi_dt, dphi_dx


def _power(base: Array, k: int) -> Array:
    # zero exponents are skipped so that derivatives at base == 0 stay finite
    return base**k if k > 0 else jnp.ones_like(base)


def _monomial(s: Array, x: Array, row: Tuple[int, ...]) -> Array:
    out = _power(s, row[0])
    for i, k in enumerate(row[1:]):
        if k > 0:
            out = out * x[i]**k
    return out


@partial(jax.jit, static_argnums=(0, ))
def feature_jacobians(basis: FeatureBasis, t: Array, x: Array) -> Tuple[Array, Array, Array]:
    """Batched (phi, dphi/dt, dphi/dx) with shapes (N, r), (N, r), (N, r, dim_x)."""
    return jax.vmap(basis.jacobians)(t, x)


@partial(jax.jit, static_argnums=(0, ))
def feature_values(basis: FeatureBasis, t: Array, x: Array) -> Array:
    return jax.vmap(basis.features)(t, x)
