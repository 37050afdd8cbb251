import itertools
import math

import numpy as np
import pytest

from ptclearn.nn import im2col
from ptclearn.sampling import (
    GradFidelity,
    SamplingConfigError,
    SamplingPlan,
    angular_similarity,
    build_column_mask,
    build_feedback_mask,
    keep_iteration,
    normalization,
)


class TestFeedbackMask:
    @pytest.mark.parametrize("norm", ["none", "exp", "var"])
    @pytest.mark.parametrize("mode", ["uniform", "topk", "btopk"])
    def test_full_density(self, mode, norm):
        mask, scale = build_feedback_mask(np.random.default_rng(0).random((3, 4)), SamplingPlan(mode, 1.0, norm))
        assert mask.all() and scale == 1.0

    def test_btopk_row_selection(self):
        mask, _ = build_feedback_mask(np.array([[4.0, 1.0, 3.0, 2.0]]), SamplingPlan("btopk", 0.5))
        assert set(np.flatnonzero(mask[0])) == {0, 2}

    def test_btopk_balanced(self):
        norms = np.random.default_rng(1).random((7, 5))
        mask, _ = build_feedback_mask(norms, SamplingPlan("btopk", 0.6))
        np.testing.assert_array_equal(mask.sum(axis=1), math.ceil(0.6 * 5))

    def test_topk_global(self):
        norms = np.array([[9.0, 8.0], [1.0, 0.5]])
        mask, scale = build_feedback_mask(norms, SamplingPlan("topk", 0.5))
        np.testing.assert_array_equal(mask, [[True, True], [False, False]])
        assert scale == 2.0

    def test_uniform_exhaustive_unbiased(self):
        # every balanced mask on a 2x2 grid at alpha 1/2, each equally likely
        masks = [np.array(rows, dtype=bool) for rows in itertools.product([(1, 0), (0, 1)], repeat=2)]
        scale = normalization(2, 4, 0.5, "exp")
        np.testing.assert_array_equal(np.mean([m * scale for m in masks], axis=0), np.ones((2, 2)))

    def test_uniform_is_balanced_and_seeded(self):
        plan = SamplingPlan("uniform", 0.5)
        a, _ = build_feedback_mask(np.ones((4, 6)), plan, np.random.default_rng(3))
        b, _ = build_feedback_mask(np.ones((4, 6)), plan, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a.sum(axis=1), 3)

    def test_stochastic_btopk_prefers_large(self):
        norms = np.array([[100.0, 1e-6, 1e-6, 1e-6]])
        plan = SamplingPlan("btopk", 0.25, stochastic_btopk=True)
        rng = np.random.default_rng(4)
        hits = sum(build_feedback_mask(norms, plan, rng)[0][0, 0] for _ in range(50))
        assert hits == 50

    def test_rejects_negative_norms(self):
        with pytest.raises(SamplingConfigError):
            build_feedback_mask(-np.ones((2, 2)), SamplingPlan("btopk", 0.5))


class TestNormalization:
    def test_modes(self):
        assert normalization(3, 12, 0.25, "none") == 1.0
        assert normalization(3, 12, 0.25, "exp") == 4.0
        assert normalization(3, 12, 0.25, "var") == 2.0
        assert normalization(0, 12, 0.25, "exp") == 1.0


class TestColumnMask:
    def test_full(self):
        assert build_column_mask(3, 3, 1.0, np.random.default_rng(0)).all()

    def test_count(self):
        mask = build_column_mask(2, 2, 0.5, np.random.default_rng(1))
        assert mask.sum() == 2

    def test_interior_coverage_after_drop(self):
        # label each pixel, then see which pixels each of the 4 columns touches
        img = np.arange(16.0).reshape(1, 1, 4, 4)
        cols = im2col(img, 3, 1, 0)[0]  # (9, 4)
        interior = {5.0, 6.0, 9.0, 10.0}
        for drop in range(4):
            keep = [c for c in range(4) if c != drop]
            covered = set(cols[:, keep].ravel())
            assert interior <= covered

    def test_invalid_density(self):
        with pytest.raises(SamplingConfigError):
            build_column_mask(2, 2, 0.0, np.random.default_rng(0))


class TestIterationDropping:
    def test_half(self):
        rng = np.random.default_rng(5)
        kept = sum(keep_iteration(0.5, rng) for _ in range(2000))
        # binomial(2000, 0.5): 4 standard deviations is about 89
        assert abs(kept - 1000) < 90

    def test_always(self):
        rng = np.random.default_rng(6)
        assert all(keep_iteration(1.0, rng) for _ in range(100))


class TestPlan:
    def test_round_trip(self):
        plan = SamplingPlan("uniform", 0.3, "var", 0.5, "exp", 0.8, True, 7)
        assert SamplingPlan.from_dict(plan.to_dict()) == plan

    @pytest.mark.parametrize("kw", [{"alpha_w": 0.0}, {"alpha_w": 1.5}, {"feedback_mode": "random"}, {"column_norm": "l2"}])
    def test_invalid(self, kw):
        with pytest.raises(SamplingConfigError):
            SamplingPlan(**kw)


class TestFidelity:
    def test_angular_similarity(self):
        assert angular_similarity([1, 0], [2, 0]) == pytest.approx(1.0)
        assert angular_similarity([1, 0], [0, 1]) == pytest.approx(0.5)
        assert angular_similarity([1, 0], [-1, 0]) == pytest.approx(0.0)

    def test_compare(self):
        f = GradFidelity.compare([1.0, 0.0], [0.5, 0.0])
        assert f.angular_similarity == pytest.approx(1.0)
        assert f.normalized_distance == pytest.approx(0.25)
