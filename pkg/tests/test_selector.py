import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capcomp import numerics as nx
from capcomp import vocab
from capcomp.lvlm import ContextOverflowError
from capcomp.numerics import grad_check
from capcomp.selector import SelectorModel

Q = vocab.encode("is there a blue cross ?")
CAPS = [vocab.encode("blue cross c3") + [vocab.EOS], vocab.encode("red square c0"),
        vocab.encode("green circle c9 blue cross c2") + [vocab.EOS]]


@pytest.fixture(scope="module")
def sel():
    return SelectorModel(seed=0)


class TestEncodePairs:
    def test_shape(self, sel):
        assert sel.encode_pairs(Q, CAPS[:1]).shape == (1, 32)
        assert sel.encode_pairs(Q, CAPS).shape == (3, 32)

    def test_identical_captions_identical_rows(self, sel):
        z = sel.encode_pairs(Q, [CAPS[1], CAPS[1]])
        assert z[0].tobytes() == z[1].tobytes()

    def test_swap_swaps_rows(self, sel):
        z = sel.encode_pairs(Q, CAPS)
        w = sel.encode_pairs(Q, [CAPS[2], CAPS[1], CAPS[0]])
        np.testing.assert_array_equal(w, z[[2, 1, 0]])

    def test_trailing_eos_not_doubled(self, sel):
        a = sel.encode_pairs(Q, [CAPS[1]])
        b = sel.encode_pairs(Q, [CAPS[1] + [vocab.EOS]])
        np.testing.assert_array_equal(a, b)

    def test_context_limit(self, sel):
        with pytest.raises(ContextOverflowError):
            sel.encode_pairs(Q, [[5] * 60])

    def test_needs_a_caption(self, sel):
        with pytest.raises(ValueError):
            sel.encode_pairs(Q, [])


class TestSelect:
    def test_single_candidate(self, sel):
        r = sel.select(sel.encode_pairs(Q, CAPS[:1]))
        assert r.index == 0
        np.testing.assert_allclose(r.probs, [1.0], atol=1e-15)

    def test_identical_rows_uniform(self, sel):
        z = np.tile(np.random.default_rng(0).normal(size=32), (3, 1))
        r = sel.select(z)
        assert r.index == 0
        np.testing.assert_allclose(r.probs, 1 / 3, atol=1e-12)
        for i in range(3):
            assert sel.select_logprob(z, i).item() == pytest.approx(-math.log(3), abs=1e-12)

    def test_probs_on_simplex_and_argmax(self, sel):
        r = sel.select(sel.encode_pairs(Q, CAPS), CAPS)
        assert abs(r.probs.sum() - 1.0) <= 1e-12 and (r.probs >= 0).all()
        assert r.index == int(np.argmax(r.probs)) and r.caption == CAPS[r.index]
        np.testing.assert_array_equal(r.one_hot(), np.eye(3)[r.index])

    @given(st.floats(-50, 50))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance(self, c):
        logits = np.random.default_rng(1).normal(size=4)
        p = nx.softmax(nx.Tensor(logits)).data
        q = nx.softmax(nx.Tensor(logits + c)).data
        np.testing.assert_allclose(p, q, atol=1e-12)
        assert int(np.argmax(p)) == int(np.argmax(q))

    def test_shift_of_head_bias(self):
        s = SelectorModel(seed=2)
        z = np.random.default_rng(3).normal(size=(4, 32))
        a = s.select(z)
        s.classifier.head.bias.data += 7.5
        b = s.select(z)
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)
        assert a.index == b.index

    @given(st.permutations(range(5)))
    @settings(max_examples=30, deadline=None)
    def test_permutation_equivariance(self, perm):
        s = SelectorModel(seed=1)
        z = np.random.default_rng(4).normal(size=(5, 32))
        perm = np.asarray(perm)
        a, b = s.select(z), s.select(z[perm])
        np.testing.assert_allclose(b.probs, a.probs[perm], atol=1e-12)
        assert perm[b.index] == a.index

    def test_normalisation(self, sel):
        z = sel.encode_pairs(Q, CAPS)
        total = sum(math.exp(sel.select_logprob(z, i).item()) for i in range(3))
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_index_range(self, sel):
        with pytest.raises(IndexError):
            sel.select_logprob(np.zeros((3, 32)), 3)


class TestLearnableSplit:
    def test_text_encoder_frozen_by_default(self, sel):
        assert not any(p.requires_grad for p in sel.text_encoder.parameters())

    def test_classifier_gradient(self):
        s = SelectorModel(seed=5)
        z = np.random.default_rng(6).normal(size=(3, 32))
        params = s.classifier.parameters()
        # floor: coordinates with |grad| < 1e-6 sit at finite-difference noise level
        rep = grad_check(lambda: s.select_logprob(z, 1), params, max_entries=6, floor=1e-6)
        assert rep.max_rel_error < 1e-4

    def test_classifier_updates_keep_encodings(self):
        s = SelectorModel(seed=7)
        z0 = s.encode_pairs(Q, CAPS)
        for p in s.classifier.parameters():
            p.data += 0.05
        np.testing.assert_array_equal(s.encode_pairs(Q, CAPS), z0)
