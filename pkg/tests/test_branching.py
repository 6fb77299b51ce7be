import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vbranch import tensor as T
from vbranch.branching import (BranchPlan, ModelConfig, branch_mask, build_model, concat_embeddings,
                               make_partition)
from vbranch.errors import ModelError, PartitionError, ShapeError

SMALL = ModelConfig(input_shape=(16, 8, 3), stem_channels=(4, 8), stem_strides=(1, 2),
                    block_channels=(12, 12), hidden=24, embed=12)


def _x(n=3, seed=0, cfg=SMALL):
    return T.Value(np.random.default_rng(seed).normal(size=(n,) + cfg.input_shape))


class TestPartition:
    @pytest.mark.parametrize("d,b,delta,sigma,omega", [
        (12, 2, 0.5, 4, 4),
        (12, 3, 0.0, 0, 4),
        (10, 3, 0.0, 0, 3),
        (8, 4, 1.0, 8, 0),
        (100, 4, 0.25, 7, 21),
        (10, 3, 0.25, 1, 3),
        (128, 2, 0.5, 42, 42),
    ])
    def test_known_sizes(self, d, b, delta, sigma, omega):
        p = make_partition(d, b, delta)
        assert (p.sigma, p.omega) == (sigma, omega)
        assert p.remainder == d - sigma - b * omega

    def test_remainder_joins_shared(self):
        p = make_partition(10, 3, 0.0)
        assert p.shared_idx == (9,)
        assert p.unique_idx == ((0, 1, 2), (3, 4, 5), (6, 7, 8))

    @pytest.mark.parametrize("d,b,delta", [(0, 1, 0.5), (3, 4, 0.0), (8, 0, 0.5), (8, 2, 1.5), (8, 2, -0.1)])
    def test_rejects_bad_arguments(self, d, b, delta):
        with pytest.raises(PartitionError):
            make_partition(d, b, delta)

    def test_branch_index_is_one_based(self):
        p = make_partition(8, 2, 0.5)
        with pytest.raises(PartitionError):
            branch_mask(p, 0)
        with pytest.raises(PartitionError):
            branch_mask(p, 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 8), st.sampled_from([0.0, 0.1, 0.25, 1 / 3, 0.5, 0.75, 0.9, 1.0]))
def test_partition_properties(d, b, delta):
    if d < b:
        return
    p = make_partition(d, b, delta)
    every = list(p.shared_idx) + [i for u in p.unique_idx for i in u]
    assert sorted(every) == list(range(d))
    assert p.sigma + b * p.omega + p.remainder == d
    assert all(len(u) == p.omega for u in p.unique_idx)
    if p.omega > 0 and delta > 0:
        assert abs(delta - p.sigma / (p.sigma + p.omega)) <= 1 / (p.sigma + p.omega)
    masks = np.stack([branch_mask(p, i) for i in range(1, b + 1)])
    assert masks.max(axis=0).min() == 1.0  # every neuron is live somewhere


class TestPlan:
    def test_table_uses_one_based_ranges(self):
        table = BranchPlan.build([("fc", 12)], 2, 0.5).table()
        assert "1-4" in table and "5-8" in table and "9-12" in table

    def test_unknown_layer(self):
        with pytest.raises(ModelError):
            BranchPlan.build([("fc", 12)], 2, 0.5).layer("nope")

    def test_remainder_widens_embedding(self):
        cfg = ModelConfig(embed=128)
        plan = BranchPlan.build(cfg.branched_layers(), 2, 0.5)
        assert plan.layer("head.fc2").remainder == 2
        assert sum(plan.embedding_dims()) == 172

    def test_embedding_dims(self):
        plan = BranchPlan.build(SMALL.branched_layers(), 3, 0.0)
        assert plan.embedding_dims() == [4, 4, 4]


class TestModel:
    def test_embedding_is_concatenation(self):
        m = build_model(SMALL, 3, 0.0, np.random.default_rng(0))
        x = _x()
        parts = m.forward_branches(x)
        np.testing.assert_array_equal(m.embed(x).data, np.concatenate([p.data for p in parts], axis=1))
        assert m.embed(x).shape == (3, 12)

    @pytest.mark.parametrize("b,delta", [(1, 0.0), (1, 0.5), (3, 1.0), (4, 1.0)])
    def test_collapse_to_baseline(self, b, delta):
        m = build_model(SMALL, b, delta, np.random.default_rng(3))
        x = _x(seed=5)
        base = m.forward_baseline(x).data
        for e in m.forward_branches(x):
            np.testing.assert_array_equal(e.data, base)

    @pytest.mark.parametrize("b,delta", [(2, 0.0), (3, 0.25), (6, 0.5), (4, 1.0)])
    def test_parameter_count_independent_of_plan(self, b, delta):
        base = build_model(SMALL, 1, 0.0, np.random.default_rng(0)).parameter_count()
        assert build_model(SMALL, b, delta, np.random.default_rng(0)).parameter_count() == base

    def test_exclusive_weights_do_not_leak(self):
        m = build_model(SMALL, 3, 0.25, np.random.default_rng(0))
        x = _x()
        before = [e.data.copy() for e in m.forward_branches(x)]
        rng = np.random.default_rng(9)
        for name, idx in m.branch_exclusive_slices(2):
            arr = m.params[name].data.copy()
            arr[idx] = rng.normal(size=arr[idx].shape)
            m.params[name].assign(arr)
        after = [e.data for e in m.forward_branches(x)]
        np.testing.assert_array_equal(after[0], before[0])
        np.testing.assert_array_equal(after[2], before[2])
        assert not np.array_equal(after[1], before[1])

    def test_training_forward_updates_only_that_branch_stats(self):
        m = build_model(SMALL, 2, 0.0, np.random.default_rng(0))
        h = m.stem(_x(), train=False)
        m.branch(h, 2, train=True)
        rm = m.buffers["block.bn1.running_mean"]
        assert np.all(rm[0] == 0.0) and np.any(rm[1] != 0.0)

    def test_bad_input_shape(self):
        m = build_model(SMALL, 1, 0.0, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            m.embed(T.Value(np.zeros((2, 8, 8, 3))))

    def test_with_plan_shares_weights(self):
        m = build_model(SMALL, 3, 0.0, np.random.default_rng(0))
        other = m.with_plan(BranchPlan.build(SMALL.branched_layers(), 1, 0.0))
        assert other.params is m.params
        assert other.buffers["block.bn1.running_mean"].shape == (1, 12)

    def test_concat_checks_batch(self):
        with pytest.raises(ShapeError):
            concat_embeddings([T.Value(np.zeros((2, 3))), T.Value(np.zeros((3, 3)))])
