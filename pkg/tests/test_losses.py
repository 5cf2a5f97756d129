"""Scalar loss functions: frozen hand-computed values and invariants."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protolab.errors import DomainError
from protolab.losses import (
    EPS,
    PRESETS,
    LossWeights,
    alignment_loss,
    classification_loss,
    combine,
    sparsity_logit,
    uniformity_loss,
)
from protolab.model import ClassHead

TOL = 1e-6


class TestClassificationLoss:
    def test_certain_correct_prediction_is_zero(self):
        assert classification_loss(np.array([1.0, 0.0]), 0) == pytest.approx(0.0, abs=TOL)

    def test_even_split_is_ln_two(self):
        v = classification_loss(np.array([0.5, 0.5]), 1)
        assert v == pytest.approx(0.6931471805599453, abs=TOL)

    def test_low_confidence_value(self):
        v = classification_loss(np.array([0.8, 0.2]), 1)
        assert v == pytest.approx(1.6094379124341003, abs=TOL)

    def test_zero_probability_is_floored(self):
        v = classification_loss(np.array([1.0, 0.0]), 1)
        assert math.isfinite(v)
        assert v == pytest.approx(-math.log(EPS), rel=1e-9)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            classification_loss(np.array([0.5, 0.5]), 2)

    @given(st.floats(1e-6, 1.0), st.integers(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, p, y):
        scores = np.array([p, 1.0 - p]) if y == 0 else np.array([1.0 - p, p])
        assert classification_loss(scores, y) >= -TOL


class TestAlignmentLoss:
    def test_identical_one_hot_rows_are_perfectly_aligned(self):
        za = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert alignment_loss(za, za.copy()) == pytest.approx(0.0, abs=1e-9)

    def test_two_patch_value(self):
        za = np.array([[0.5, 0.5], [0.9, 0.1]])
        v = alignment_loss(za, za.copy())
        assert v == pytest.approx(0.8915981192837836, abs=TOL)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        za = rng.dirichlet(np.ones(4), size=5)
        zb = rng.dirichlet(np.ones(4), size=5)
        assert alignment_loss(za, zb) == pytest.approx(alignment_loss(zb, za), abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DomainError):
            alignment_loss(np.ones((2, 3)) / 3, np.ones((3, 3)) / 3)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_nonnegative_and_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        za = rng.dirichlet(np.ones(d), size=n)
        zb = rng.dirichlet(np.ones(d), size=n)
        v = alignment_loss(za, zb)
        assert v >= -1e-9
        perm = rng.permutation(n)
        assert alignment_loss(za[perm], zb[perm]) == pytest.approx(v, rel=1e-9, abs=1e-12)


class TestUniformityLoss:
    def test_saturated_sums_vanish(self):
        p = np.full((10, 3), 1.0)  # per-channel batch sums = 10
        v = uniformity_loss(p)
        assert 0.0 <= v < 3 * 5e-9

    def test_single_channel_small_sum(self):
        p = np.array([[0.1]])
        assert uniformity_loss(p) == pytest.approx(2.305910670352112, abs=TOL)

    def test_all_zero_bounded_by_floor(self):
        p = np.zeros((4, 6))
        v = uniformity_loss(p)
        assert math.isfinite(v)
        assert v <= 6 * (-math.log(EPS)) + TOL
        assert v > 0

    def test_empty_batch_contributes_nothing(self):
        assert uniformity_loss(np.zeros((0, 5))) == 0.0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0, 1, size=(int(rng.integers(1, 8)), int(rng.integers(1, 6))))
        assert uniformity_loss(p) >= 0.0


class TestSparsityLogit:
    def _head(self, w):
        return ClassHead(weights=np.asarray(w, dtype=np.float64))

    def test_zero_dot_product_maps_to_zero(self):
        head = self._head([[0.0], [0.0]])
        out = sparsity_logit(np.array([1.0, 1.0]), head)
        assert out == pytest.approx([0.0], abs=TOL)

    def test_unit_dot_product_maps_to_ln_two(self):
        head = self._head([[1.0], [0.0]])
        out = sparsity_logit(np.array([1.0, 0.5]), head)
        assert out == pytest.approx([0.6931471805599453], abs=TOL)

    def test_monotone_in_magnitude(self):
        head = self._head([[1.0], [0.0]])
        values = [
            sparsity_logit(np.array([u, 0.0]), head)[0] for u in (0.0, 0.25, 0.5, 1.0, 2.0)
        ]
        assert all(b > a for a, b in zip(values, values[1:]))


class TestLossWeights:
    def test_presets_exist_with_expected_attack_weights(self):
        assert set(PRESETS) == {"train", "pretrain", "disguise", "redherring"}
        d = PRESETS["disguise"]
        assert (d.class_weight, d.align_clean, d.align_trigger) == (0.5, 2.0, 4.0)
        assert (d.unif_clean, d.unif_trigger) == (0.10, 0.20)
        r = PRESETS["redherring"]
        assert (r.class_weight, r.align_clean, r.align_trigger) == (0.5, 1.0, 0.0)
        assert (r.unif_clean, r.unif_trigger) == (0.25, 0.25)

    def test_negative_weight_rejected(self):
        with pytest.raises(Exception):
            LossWeights(class_weight=-1.0)

    def test_nonfinite_weight_rejected(self):
        with pytest.raises(Exception):
            LossWeights(class_weight=float("nan"))


class TestCombine:
    @given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=1, max_size=6))
    @settings(max_examples=50, deadline=None)
    def test_total_is_weighted_sum(self, pairs):
        weighted = {f"t{i}": (w, v) for i, (w, v) in enumerate(pairs)}
        lv = combine(weighted)
        expected = sum(w * v for w, v in pairs)
        assert lv.total == pytest.approx(expected, rel=1e-9, abs=1e-6)

    def test_all_zero_weights_give_zero_total(self):
        lv = combine({"a": (0.0, 123.0), "b": (0.0, 4.5)})
        assert lv.total == 0.0

    def test_per_term_breakdown_is_recorded(self):
        lv = combine({"a": (2.0, 3.0), "b": (1.0, 4.0)})
        assert lv.per_term == {"a": 3.0, "b": 4.0}
        assert lv.total == pytest.approx(10.0)
