import chex
import jax.numpy as jnp

from jfom.explicit import ExplicitResidual
from jfom.measures import BoundaryMeasure, OccupationMeasure
from jfom.tree_util import batch_into_leaf, concat_in_leaf


class TestTreeUtil(chex.TestCase):

    def test_batch_into_leaf(self):
        measures = [BoundaryMeasure.dirac(1.0, jnp.array([float(k), 0.0]), mass=k + 1.0) for k in range(3)]
        batched = batch_into_leaf([(m.weights, m.x) for m in measures])
        chex.assert_shape(batched[0], (3, 1))
        chex.assert_shape(batched[1], (3, 1, 2))
        chex.assert_trees_all_equal(batched[0][:, 0], jnp.array([1.0, 2.0, 3.0]))

    def test_batch_records(self):
        residuals = [ExplicitResidual(jnp.array([float(k), -1.0]), float(k)) for k in range(4)]
        batched = batch_into_leaf(residuals)
        chex.assert_shape(batched.vector, (4, 2))
        chex.assert_trees_all_equal(batched.norm, jnp.arange(4.0))
        chex.assert_shape(batch_into_leaf(residuals, axis=-1).vector, (2, 4))

    def test_concat_in_leaf(self):
        a = OccupationMeasure.new(jnp.ones(2), jnp.zeros(2), jnp.zeros((2, 1)), jnp.zeros((2, 1)))
        b = OccupationMeasure.new(jnp.full(3, 2.0), jnp.ones(3), jnp.ones((3, 1)), jnp.ones((3, 1)))
        joined = OccupationMeasure.concat([a, b])
        assert joined.n_atoms == 5
        assert float(joined.total_mass) == 8.0
        weights = concat_in_leaf([a.weights, b.weights])
        chex.assert_trees_all_equal(weights, joined.weights)
