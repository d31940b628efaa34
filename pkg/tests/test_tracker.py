"""Attention-based constituent selection."""

import numpy as np
import pytest

from mstmix import oracle, tracker
from mstmix.backbone import SpanEntry
from mstmix.errors import InsufficientTokensError
from mstmix.numeric import Tensor


def make_attn(seq, heads, rng):
    """Random attention maps with proper probability rows."""
    raw = rng.uniform(0.1, 1.0, size=(heads, seq, seq))
    return raw / raw.sum(axis=-1, keepdims=True)


SPANS = [SpanEntry("a", 0, 1, 7), SpanEntry("b", 7, 8, 15)]


class TestSelectTopk:
    def test_tie_pair_example(self):
        # scores (0.1, 0.9, 0.5, 0.9) within a span, K=2 -> the two 0.9 positions
        attn = np.zeros((2, 6, 6))
        attn[:, 0, 1:5] = [0.1, 0.9, 0.5, 0.9]
        hidden = Tensor(np.arange(36.0).reshape(6, 6))
        sel = tracker.select_topk(hidden, attn, [SpanEntry("m", 0, 1, 5)], 2)
        np.testing.assert_array_equal(sel.idx["m"], [2, 4])

    def test_full_span_selection(self):
        rng = np.random.default_rng(0)
        attn = make_attn(15, 4, rng)
        hidden = Tensor(rng.normal(size=(15, 8)))
        sel = tracker.select_topk(hidden, attn, SPANS, 6)
        np.testing.assert_array_equal(sel.idx["a"], np.arange(1, 7))

    def test_rows_match_hidden_exactly(self):
        rng = np.random.default_rng(1)
        attn = make_attn(15, 4, rng)
        hidden = Tensor(rng.normal(size=(15, 8)))
        sel = tracker.select_topk(hidden, attn, SPANS, 3)
        for name in ("a", "b"):
            np.testing.assert_array_equal(sel.x[name].data, hidden.data[sel.idx[name]])
            assert np.all(np.diff(sel.idx[name]) > 0)
            sp = {s.name: s for s in SPANS}[name]
            assert sel.idx[name].min() >= sp.start
            assert sel.idx[name].max() < sp.end

    def test_matches_sort_oracle_with_ties(self):
        rng = np.random.default_rng(2)
        for case in range(100):
            scores = rng.integers(0, 4, size=9).astype(np.float64) / 3.0
            got = tracker.topk_indices(scores, 4)
            want = oracle.topk_reference(scores, 4)
            assert list(got) == want, f"case {case}"

    def test_selected_scores_dominate(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            scores = rng.uniform(size=11)
            got = set(tracker.topk_indices(scores, 5))
            rest = [scores[i] for i in range(11) if i not in got]
            assert min(scores[i] for i in got) >= max(rest)

    def test_head_permutation_invariance(self):
        rng = np.random.default_rng(4)
        attn = make_attn(15, 4, rng)
        hidden = Tensor(rng.normal(size=(15, 8)))
        sel1 = tracker.select_topk(hidden, attn, SPANS, 4)
        sel2 = tracker.select_topk(hidden, attn[::-1].copy(), SPANS, 4)
        for name in ("a", "b"):
            np.testing.assert_array_equal(sel1.idx[name], sel2.idx[name])

    def test_short_span_rejected(self):
        rng = np.random.default_rng(5)
        attn = make_attn(15, 2, rng)
        hidden = Tensor(rng.normal(size=(15, 8)))
        with pytest.raises(InsufficientTokensError, match="'a'"):
            tracker.select_topk(hidden, attn, SPANS, 7)

    def test_gradient_only_through_selected_rows(self):
        rng = np.random.default_rng(6)
        attn = make_attn(15, 4, rng)
        hidden = Tensor(rng.normal(size=(15, 8)), leaf=True)
        sel = tracker.select_topk(hidden, attn, SPANS, 3)
        loss = sum(((sel.x[n] * sel.x[n]).sum() for n in sel.names[1:]),
                   (sel.x[sel.names[0]] * sel.x[sel.names[0]]).sum())
        loss.backward()
        chosen = set(np.concatenate([sel.idx[n] for n in sel.names]))
        for row in range(15):
            if row in chosen:
                assert np.abs(hidden.grad[row]).max() > 0
            else:
                np.testing.assert_array_equal(hidden.grad[row], 0.0)

    def test_span_matrix_helper(self):
        rng = np.random.default_rng(7)
        attn = make_attn(15, 4, rng)
        hidden = Tensor(rng.normal(size=(15, 8)))
        sel = tracker.select_topk(hidden, attn, SPANS, 4)
        mat = tracker.span_topk_indices(attn.mean(axis=0), SPANS, 4)
        np.testing.assert_array_equal(mat[0], sel.idx["a"])
        np.testing.assert_array_equal(mat[1], sel.idx["b"])
