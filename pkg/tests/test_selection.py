import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frameselect.errors import DomainError
from frameselect.selection import (
    ImportanceVector,
    nms_greedy,
    random_k,
    suppression_gap,
    topk,
    uniform_k,
)

from reference_impls import nms_trace


class TestNmsGreedy:
    def test_neighbor_gap_for_128_and_8(self):
        assert suppression_gap(128, 8) == 4

    def test_hand_trace(self):
        # pick 1 (0.9), suppress {0,1,2}; next best remaining is 5 (0.7)
        result = nms_greedy([0.1, 0.9, 0.8, 0.2, 0.3, 0.7, 0.4, 0.5], k=2)
        assert result.delta == 1
        assert result.selected == (1, 5)
        assert not result.fallback

    def test_tie_breaks_to_lowest_index(self):
        result = nms_greedy([0.5] * 8, k=2)
        assert result.selected == (0, 2)

    def test_k_larger_than_n_rejected(self):
        with pytest.raises(DomainError):
            nms_greedy([0.5, 0.5], k=3)

    def test_all_zero_scores_never_exhaust_under_default_gap(self):
        result = nms_greedy([0.0, 0.0, 0.0, 0.0], k=4)
        assert result.selected == (0, 1, 2, 3)
        assert not result.fallback

    def test_fallback_with_widened_gap(self):
        # delta=3 on n=6: first pick at 3 suppresses everything, remaining
        # picks fall back to the lowest-index unselected frames.
        result = nms_greedy([0.1, 0.2, 0.3, 0.9, 0.3, 0.2], k=3, delta=3)
        assert result.fallback
        assert result.selected == (0, 1, 3)
        assert result.delta == 3

    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            n = int(rng.integers(1, 64))
            k = int(rng.integers(1, min(n, 16) + 1))
            scores = rng.uniform(size=n)
            got = nms_greedy(scores, k)
            want_sel, want_delta, want_fb = nms_trace(scores, k)
            assert list(got.selected) == want_sel
            assert got.delta == want_delta
            assert got.fallback == want_fb

    @given(
        n=st.integers(1, 64),
        k_frac=st.floats(0.01, 1.0),
        seed=st.integers(0, 2 ** 31),
    )
    @settings(max_examples=150, deadline=None)
    def test_gap_property(self, n, k_frac, seed):
        k = max(1, int(n * k_frac))
        scores = np.random.default_rng(seed).uniform(size=n)
        result = nms_greedy(scores, k)
        assert len(result.selected) == k
        if not result.fallback:
            gaps = np.diff(result.selected)
            assert np.all(gaps > result.delta)

    def test_degenerates_to_topk_when_delta_zero(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(2, 40))
            k = max(1, n // 3 + 1)
            if n // (4 * k) != 0:
                continue
            scores = rng.uniform(size=n)
            assert nms_greedy(scores, k).selected == topk(scores, k).selected

    def test_monotone_in_selected_scores(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            scores = rng.uniform(0.0, 0.9, size=24)
            result = nms_greedy(scores, 4)
            bumped = scores.copy()
            pick = result.selected[int(rng.integers(len(result.selected)))]
            bumped[pick] = min(1.0, bumped[pick] + 0.1)
            assert pick in nms_greedy(bumped, 4).selected

    def test_clamps_operational_range(self):
        # scores may arrive in [-1, 1]; negatives clamp to 0, never collide
        # with the suppression sentinel
        result = nms_greedy([-0.5, 0.2, -1.0, 0.9], k=2)
        assert 3 in result.selected


class TestTopk:
    def test_basic(self):
        assert topk([0.1, 0.9, 0.8, 0.2], 2).selected == (1, 2)

    def test_constant_ties(self):
        assert topk([0.5] * 4, 2).selected == (0, 1)

    def test_k_equals_n(self):
        assert topk([0.3, 0.1, 0.2], 3).selected == (0, 1, 2)

    def test_k_out_of_range(self):
        with pytest.raises(DomainError):
            topk([0.5], 2)


class TestUniformK:
    def test_centered(self):
        assert uniform_k(8, 4).selected == (1, 3, 5, 7)

    def test_identity_when_k_equals_n(self):
        assert uniform_k(5, 5).selected == (0, 1, 2, 3, 4)

    def test_midpoint(self):
        assert uniform_k(9, 1).selected == (4,)


class TestRandomK:
    def test_seeded_reproducible(self):
        a = random_k(32, 5, np.random.default_rng(3))
        b = random_k(32, 5, np.random.default_rng(3))
        assert a == b
        assert len(set(a.selected)) == 5


class TestImportanceVector:
    def test_rejects_out_of_range(self):
        with pytest.raises(DomainError):
            ImportanceVector(scores=(1.5,))

    def test_rejects_unknown_provenance(self):
        with pytest.raises(DomainError):
            ImportanceVector(scores=(0.5,), provenance="vibes")

    def test_rejects_nan(self):
        with pytest.raises(DomainError):
            ImportanceVector(scores=(float("nan"),))
