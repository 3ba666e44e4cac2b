import numpy as np
import pytest

from nfa_inspect.features import FeatureStack
from nfa_inspect.statcore import (
    NormalityModel,
    component_maps,
    fit_normality,
    mahalanobis_map,
    variance_floor,
)


def stack_of(*planes, length=1.0):
    return FeatureStack(np.stack(planes), independence_length=length)


class TestFitNormality:
    def test_constant_plane(self):
        rng = np.random.default_rng(0)
        stack = stack_of(np.full((8, 8), 0.7), rng.normal(size=(8, 8)))
        model = fit_normality(stack)
        assert model.means[0] == pytest.approx(0.7)
        assert model.variances[0] == variance_floor(stack.planes.reshape(2, -1).var(axis=1))
        assert model.variances[0] > 0

    def test_checkerboard(self):
        board = np.where(np.add.outer(np.arange(10), np.arange(10)) % 2 == 0, 1.0, -1.0)
        model = fit_normality(stack_of(board))
        assert model.means[0] == pytest.approx(0.0, abs=1e-12)
        assert model.variances[0] == pytest.approx(1.0, abs=1e-9)

    def test_deterministic(self):
        stack = FeatureStack(np.random.default_rng(1).normal(size=(5, 30, 30)))
        a, b = fit_normality(stack), fit_normality(stack)
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.variances, b.variances)

    def test_floor_all_constant(self):
        model = fit_normality(FeatureStack(np.zeros((3, 4, 4))))
        np.testing.assert_array_equal(model.variances, 1e-12)


class TestMahalanobis:
    def test_hand_example(self):
        model = NormalityModel(np.array([1.0, 0.0, 1.0]), np.array([1.0, 4.0, 4.0]))
        a = np.array([2.0, 0.0, -1.0])
        stack = FeatureStack(np.broadcast_to(a[:, None, None], (3, 2, 2)).copy())
        dist = mahalanobis_map(stack, model)
        np.testing.assert_allclose(dist.d2, 2.0)
        assert dist.df == 3

    def test_mean_and_unit_offsets(self):
        mu = np.array([0.3, -2.0, 5.0, 1.0])
        var = np.array([0.5, 2.0, 9.0, 0.01])
        model = NormalityModel(mu, var)
        planes = np.empty((4, 1, 2))
        planes[:, 0, 0] = mu
        planes[:, 0, 1] = mu + np.sqrt(var)
        d2 = mahalanobis_map(FeatureStack(planes), model).d2
        assert d2[0, 0] == 0.0
        assert d2[0, 1] == pytest.approx(4.0, rel=1e-12)

    def test_carries_independence_length(self):
        stack = stack_of(np.random.default_rng(2).normal(size=(6, 6)), length=17)
        assert mahalanobis_map(stack, fit_normality(stack)).independence_length == 17

    def test_permutation_and_sign_invariance(self):
        rng = np.random.default_rng(3)
        planes = rng.normal(size=(6, 20, 20)) * rng.uniform(0.5, 3, (6, 1, 1))
        stack = FeatureStack(planes)
        ref = mahalanobis_map(stack, fit_normality(stack)).d2
        perm = rng.permutation(6)
        signs = np.array([1, -1, 1, -1, -1, 1])[:, None, None]
        other = FeatureStack(planes[perm] * signs)
        d2 = mahalanobis_map(other, fit_normality(other)).d2
        np.testing.assert_allclose(d2, ref, rtol=1e-12, atol=1e-12)

    def test_components_sum_to_joint(self):
        stack = FeatureStack(np.random.default_rng(4).normal(size=(4, 9, 9)))
        model = fit_normality(stack)
        comps = component_maps(stack, model)
        assert [c.df for c in comps] == [1, 1, 1, 1]
        assert [c.component for c in comps] == [0, 1, 2, 3]
        np.testing.assert_allclose(sum(c.d2 for c in comps), mahalanobis_map(stack, model).d2)

    def test_dimension_mismatch(self):
        model = NormalityModel(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            mahalanobis_map(FeatureStack(np.zeros((2, 4, 4))), model)
        with pytest.raises(ValueError):
            component_maps(FeatureStack(np.zeros((4, 4, 4))), model)
