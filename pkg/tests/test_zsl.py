import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgsnet.dataforge import AttributeTable, FeatureDataset, SplitSpec, synth_dataset
from bgsnet.errors import DomainError, ShapeError, ValidationError
from bgsnet.numkit import make_rng
from bgsnet.pipeline import ModelConfig, TrainPlan, init_state
from bgsnet.zsl import (evaluate, fuse_predict, gzsl_predict, harmonic_mean, make_report,
                        mean_per_class, per_class_accuracy, predict_attributes, sweep_csv,
                        sweep_delta, zsl_predict)


class TestFuse:
    def test_zero_specialist(self):
        np.testing.assert_array_equal(fuse_predict([1.0, -2.0], [0.0, 0.0]), [1.0, -2.0])

    def test_hand_sum(self):
        np.testing.assert_array_equal(fuse_predict([1.0, 2.0], [3.0, -1.0]), [4.0, 1.0])

    def test_commutative(self):
        a, b = make_rng(0).normal(size=(2, 5))
        np.testing.assert_array_equal(fuse_predict(a, b), fuse_predict(b, a))

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            fuse_predict([1.0], [1.0, 2.0])


onehot = AttributeTable(np.arange(4), np.eye(4))


class TestZSL:
    def test_orthonormal_recovers_class(self):
        for c in (2, 3):
            assert zsl_predict(onehot.rows[c], onehot, [2, 3]) == c

    def test_single_class(self):
        assert zsl_predict(make_rng(1).normal(size=4), onehot, [3]) == 3

    def test_hand_example(self):
        attrs = AttributeTable(np.array([10, 11]), np.array([[0.9, 0.0], [0.0, 1.0]]))
        assert zsl_predict([1.0, 0.0], attrs, [10, 11]) == 10

    def test_tie_goes_to_lowest_id(self):
        attrs = AttributeTable(np.array([4, 7]), np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert zsl_predict([1.0, 0.0], attrs, [7, 4]) == 4

    def test_empty(self):
        with pytest.raises(DomainError):
            zsl_predict(np.ones(4), onehot, [])

    def test_batch(self):
        np.testing.assert_array_equal(zsl_predict(onehot.rows[[3, 2, 3]], onehot, [2, 3]),
                                      [3, 2, 3])

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
    def test_invariant_to_constant_score_shift(self, seed, shift):
        # a constant attribute column turns one coordinate of a into a shared offset
        rng = make_rng(seed)
        attrs = AttributeTable(np.arange(5), np.hstack([rng.uniform(size=(5, 3)),
                                                        np.ones((5, 1))]))
        a = rng.normal(size=4)
        moved = a + np.array([0.0, 0.0, 0.0, shift])
        assert zsl_predict(a, attrs, range(5)) == zsl_predict(moved, attrs, range(5))


class TestGZSL:
    attrs = AttributeTable(np.array([0, 1]), np.array([[1.0, 0.0], [0.0, 1.0]]))

    def test_delta_zero_is_union_argmax(self):
        rng = make_rng(3)
        attrs = AttributeTable(np.arange(6), rng.uniform(size=(6, 4)))
        a = rng.normal(size=(200, 4))
        expected = np.argmax(a @ attrs.rows.T, axis=1)
        np.testing.assert_array_equal(gzsl_predict(a, attrs, [0, 2, 4], [1, 3, 5], 0.0),
                                      expected)

    def test_hand_example(self):
        # seen 0.8 - 0.2 = 0.6 still beats unseen 0.5
        assert gzsl_predict([0.8, 0.5], self.attrs, [0], [1], 0.2) == 0

    def test_large_delta_predicts_unseen(self):
        assert gzsl_predict([0.8, 0.5], self.attrs, [0], [1], 0.31) == 1

    def test_tie_goes_to_lowest_id(self):
        assert gzsl_predict([0.8, 0.6], self.attrs, [0], [1], 0.2) == 0

    def test_overlap(self):
        with pytest.raises(ValidationError):
            gzsl_predict([1.0, 0.0], self.attrs, [0, 1], [1], 0.0)


class TestMetrics:
    def test_reference_row(self):
        assert abs(harmonic_mean(61.0, 81.8) - 69.9) <= 0.05

    def test_zero(self):
        assert harmonic_mean(0.0, 0.0) == 0.0

    def test_class_balance(self):
        # class 0 all right (3 instances), class 1 all wrong (1 instance)
        assert mean_per_class([0, 0, 0, 1], [0, 0, 0, 0]) == 50.0
        assert per_class_accuracy([0, 0, 0, 1], [0, 0, 0, 0]) == {0: 100.0, 1: 0.0}

    def test_empty(self):
        with pytest.raises(ValidationError):
            mean_per_class([], [])

    @given(st.floats(0, 100), st.floats(0, 100))
    def test_report_h_invariant(self, U, S):
        r = make_report(50.0, U, S)
        if U + S > 0:
            assert abs(r.H - 2 * U * S / (U + S)) < 1e-9
        else:
            assert r.H == 0.0


def oracle_model(K=4, d=4):
    """GNet is the identity and BSNet contributes nothing."""
    state = init_state(TrainPlan(), ModelConfig(N=2), K, d)
    state.gnet.f_g.weight[...] = np.eye(d, K)
    state.gnet.f_g.bias[...] = 0.0
    state.bsnet.head.layer2.weight[...] = 0.0
    state.bsnet.head.layer2.bias[...] = 0.0
    return state


def onehot_dataset(flip_unseen=False):
    labels = np.array([0, 0, 1, 1, 0, 1, 2, 2, 3, 3])
    x = np.eye(4)[labels]
    if flip_unseen:
        x[6:] = np.eye(4)[[3, 3, 3, 3]]
    split = SplitSpec((0, 1), (2, 3), [0, 1, 2, 3], [4, 5], [6, 7, 8, 9])
    return FeatureDataset(x, labels, split)


class TestEvaluate:
    def test_perfect_model(self):
        r = evaluate(oracle_model(), onehot_dataset(), onehot, 0.0)
        assert (r.T_zsl, r.U, r.S, r.H) == (100.0, 100.0, 100.0, 100.0)

    def test_half_unseen_classes_wrong(self):
        r = evaluate(oracle_model(), onehot_dataset(flip_unseen=True), onehot, 0.0)
        assert r.T_zsl == 50.0 and r.U == 50.0 and r.S == 100.0
        rows = {row[0]: row for row in r.per_class}
        assert rows[2][3] == 0.0 and rows[3][3] == 100.0 and rows[0][3] is None

    def test_branches(self):
        m = oracle_model()
        x = np.eye(4)
        np.testing.assert_array_equal(predict_attributes(m, x, "gnet"), x)
        np.testing.assert_array_equal(predict_attributes(m, x, "bsnet"), np.zeros((4, 4)))
        np.testing.assert_array_equal(predict_attributes(m, x, "fused"), x)
        with pytest.raises(DomainError):
            predict_attributes(m, x, "both")

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            evaluate(oracle_model(K=4, d=3), onehot_dataset(), onehot, 0.0)

    def test_empty_test_split(self):
        ds = onehot_dataset()
        sp = ds.split
        empty = FeatureDataset(ds.features, ds.labels,
                               SplitSpec(sp.seen, sp.unseen, sp.train_idx, [], sp.test_unseen_idx))
        with pytest.raises(ValidationError):
            evaluate(oracle_model(), empty, onehot, 0.0)

    def test_report_json(self):
        r = evaluate(oracle_model(), onehot_dataset(), onehot, 0.5)
        obj = json.loads(json.dumps(r.to_json()))
        assert obj["delta"] == 0.5 and obj["pruned_count"] == r.pruned_count
        assert {row["split"] for row in obj["per_class"]} == {"seen", "unseen"}
        assert "H=100.00" in r.summary()


@pytest.fixture(scope="module")
def random_model():
    ds, attrs = synth_dataset(10, 4, 12, K=6, d=5, noise_sigma=0.3, seed=2)
    return init_state(TrainPlan(seed=5), ModelConfig(), 6, 5), ds, attrs


class TestSweep:
    def test_single_delta_matches_evaluate(self, random_model):
        model, ds, attrs = random_model
        (row,) = sweep_delta(model, ds, attrs, [0.0])
        assert row == evaluate(model, ds, attrs, 0.0)

    def test_monotone(self, random_model):
        model, ds, attrs = random_model
        reps = sweep_delta(model, ds, attrs, np.linspace(-2, 2, 41))
        U = [r.U for r in reps]
        S = [r.S for r in reps]
        assert all(b >= a for a, b in zip(U, U[1:]))
        assert all(b <= a for a, b in zip(S, S[1:]))

    def test_delta_above_spread(self, random_model):
        model, ds, attrs = random_model
        a = predict_attributes(model, ds.features)
        scores = a @ attrs.rows.T
        spread = float(scores.max() - scores.min())
        (r,) = sweep_delta(model, ds, attrs, [spread + 1.0])
        assert r.S == 0.0 and r.H == 0.0 and r.U == r.T_zsl

    def test_empty_sweep(self, random_model):
        with pytest.raises(DomainError):
            sweep_delta(*random_model, [])

    def test_csv(self, random_model):
        reps = sweep_delta(*random_model, [0.0, 0.5])
        lines = sweep_csv(reps).splitlines()
        assert lines[0] == "delta,U,S,H" and len(lines) == 3
        assert float(lines[2].split(",")[0]) == 0.5
