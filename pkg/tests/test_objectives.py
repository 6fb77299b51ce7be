import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vbranch import tensor as T
from vbranch.errors import BatchError, DataError, ParamError, ShapeError
from vbranch.objectives import (Heatmap, combined_loss, fuse_bilateral, image_to_grid, localization_loss,
                                low_region_mass, make_heatmap, normalize_activation, region_heatmap,
                                triplet_loss_batch_hard)
from vbranch.verify import brute_force_batch_hard, random_triplet_batch


class TestHeatmap:
    def test_zero_at_keypoint(self):
        hm = make_heatmap((2, 3), sigma_h=1.5, dims=(8, 4))
        assert hm.grid[3, 2] == 0.0

    def test_one_sigma_away(self):
        hm = make_heatmap((1, 1), sigma_h=2.0, dims=(8, 4))
        assert abs(hm.grid[3, 1] - (1 - math.exp(-1))) < 1e-12

    def test_grows_with_distance(self):
        g = make_heatmap((1, 4), dims=(8, 4)).grid
        assert g[4, 1] < g[5, 1] < g[6, 1] < g[7, 1] < 1.0

    def test_bilateral_fusion_is_max(self):
        a = make_heatmap((0, 4), region="hip")
        b = make_heatmap((3, 4), region="hip")
        np.testing.assert_array_equal(fuse_bilateral(a, b).grid, np.maximum(a.grid, b.grid))

    def test_fusion_checks_dims(self):
        with pytest.raises(ShapeError):
            fuse_bilateral(make_heatmap((0, 0), dims=(4, 4)), make_heatmap((0, 0), dims=(8, 4)))

    def test_bad_sigma(self):
        with pytest.raises(ParamError):
            make_heatmap((0, 0), sigma_h=0.0)

    def test_csv_six_decimals(self):
        text = make_heatmap((0, 0), dims=(2, 2)).to_csv()
        assert text.splitlines()[0] == "0.000000,0.358820"

    def test_image_to_grid_centres(self):
        assert image_to_grid((1.5, 1.5), (32, 16), (8, 4)) == (0.0, 0.0)

    def test_region_needs_both_sides(self):
        with pytest.raises(DataError):
            region_heatmap({"left_hip": (3, 20)}, "hip", (32, 16))


class TestNormalization:
    def test_range_is_unit(self):
        a = np.random.default_rng(0).normal(size=(2, 8, 4, 5))
        n = normalize_activation(a).data
        np.testing.assert_allclose(n.min(axis=(1, 2)), 0.0)
        np.testing.assert_allclose(n.max(axis=(1, 2)), 1.0)

    def test_constant_map_is_zero(self):
        n = normalize_activation(np.ones((4, 2, 3)))
        np.testing.assert_array_equal(n.data, 0.0)

    def test_resizes_to_heatmap(self):
        alpha = np.random.default_rng(0).normal(size=(2, 4, 2, 3))
        hms = [make_heatmap((1, 1), dims=(8, 4))] * 2
        loss = localization_loss(alpha, hms)
        assert loss.shape == ()

    def test_needs_one_heatmap_per_image(self):
        with pytest.raises(DataError):
            localization_loss(np.zeros((2, 8, 4, 1)), [make_heatmap((0, 0))])

    def test_loss_is_zero_when_mass_sits_on_keypoint(self):
        alpha = np.zeros((1, 8, 4, 1))
        alpha[0, 3, 2, 0] = 1.0
        assert localization_loss(alpha, [make_heatmap((2, 3))]).data == 0.0


class TestTriplet:
    def test_hand_example(self):
        e = np.array([[0.0], [0.1], [0.3], [0.5]])
        loss = triplet_loss_batch_hard(e, [0, 0, 1, 1], margin=0.2).data
        assert loss == brute_force_batch_hard(e, [0, 0, 1, 1], 0.2)
        assert math.isclose(loss, 0.3, rel_tol=1e-15)

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_enumeration(self, seed):
        e, labels = random_triplet_batch(np.random.default_rng(seed))
        assert triplet_loss_batch_hard(e, labels, 0.25).data == brute_force_batch_hard(e, labels, 0.25)

    def test_single_identity_rejected(self):
        with pytest.raises(BatchError):
            triplet_loss_batch_hard(np.zeros((3, 2)), [1, 1, 1])

    def test_singleton_identity_rejected(self):
        with pytest.raises(BatchError):
            triplet_loss_batch_hard(np.zeros((3, 2)), [1, 1, 2])

    def test_well_separated_batch_has_zero_loss(self):
        e = np.array([[0.0], [0.0], [10.0], [10.0]])
        assert triplet_loss_batch_hard(e, [0, 0, 1, 1]).data == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 2.0))
def test_triplet_loss_non_negative_and_bounded(seed, margin):
    e, labels = random_triplet_batch(np.random.default_rng(seed), dyadic=False)
    loss = triplet_loss_batch_hard(e, labels, margin).data
    assert loss >= 0.0
    d = np.abs(e[:, None] - e[None]).sum(-1)
    assert loss <= len(labels) * (margin + d.max())


class TestCombined:
    def test_weighted_sum(self):
        total, bd = combined_loss(T.Value(np.array(2.0)), {"neck": 1.0, "hip": 3.0}, lam=0.5)
        assert total.data == 4.0
        assert bd.localization == {"neck": 1.0, "hip": 3.0} and bd.total == 4.0

    def test_no_localization_is_plain_triplet(self):
        total, bd = combined_loss(T.Value(np.array(1.25)), {}, lam=0.2)
        assert total.data == 1.25 and bd.localization == {}

    def test_negative_lambda(self):
        with pytest.raises(ParamError):
            combined_loss(1.0, {}, lam=-0.1)


def test_low_region_mass():
    grids = np.array([[[0.0, 1.0], [1.0, 1.0]]])
    norm = np.array([[[1.0, 1.0], [0.0, 0.0]]])
    assert low_region_mass(norm, grids) == 0.5
    assert isinstance(make_heatmap((0, 0)), Heatmap)
