from functools import partial
from typing import Sequence, TypeVar

import jax
import jax.numpy as jnp

T = TypeVar("T")


def batch_into_leaf(seq: Sequence[T], axis=0) -> T:
    """Stack a sequence of same-shaped records (e.g. per-member residuals) along a new axis.

    Args:
        seq: a sequence of pytrees with identical structure and leaf shapes.
        axis (int, optional): position of the new batch axis. Defaults to 0.

    Returns:
        pytree: same structure as seq[0], every leaf gains one batch dimension.
    """
    assert len(seq) > 0
    stack = partial(jnp.stack, axis=axis)
    return jax.tree_util.tree_map(lambda *xs: stack(xs), *seq)


def concat_in_leaf(seq: Sequence[T], axis=0) -> T:
    """Concatenate records leafwise, e.g. the atom arrays of several measures.

    Args:
        seq: a sequence of pytrees with identical structure.
        axis (int, optional): the axis to concatenate along. Defaults to 0.

    Returns:
        pytree: same structure as seq[0].
    """
    assert len(seq) > 0
    concat = partial(jnp.concatenate, axis=axis)
    return jax.tree_util.tree_map(lambda *xs: concat(xs), *seq)
