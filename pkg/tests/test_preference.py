import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capcomp import vocab
from capcomp.captioner import CaptionModel
from capcomp.lvlm import DistributionTrace, ToyLVLM
from capcomp.numerics import Tensor, grad_check
from capcomp.preference import (DpoConfig, PreferenceError, PreferenceRecord, TrainingError,
                                build_preference_pairs, dpo_loss_caption, dpo_loss_from_logps,
                                dpo_loss_selector, dpo_loss_value, kl_divergence, pair_extremes,
                                trace_distance, train)
from capcomp.preference import _batch_losses
from capcomp.pruner import PruneConfig, prune
from capcomp.selector import SelectorModel

LN2 = math.log(2)


def _simplex(rng, k):
    x = rng.gamma(0.5, size=k)
    return x / x.sum()


def _two_point_at_distance(d):
    """q with KL([.5,.5] ‖ q) == d."""
    x = (1 - math.sqrt(1 - math.exp(-2 * d))) / 2
    return np.array([x, 1 - x])


class TestKL:
    def test_self_is_zero(self):
        p = _simplex(np.random.default_rng(0), 7)
        assert kl_divergence(p, p) == 0.0

    def test_hand_pair(self):
        v = kl_divergence([0.5, 0.5], [0.25, 0.75])
        assert v == pytest.approx(0.5 * LN2 + 0.5 * math.log(2 / 3), abs=1e-12)
        assert v == pytest.approx(0.143841, abs=1e-6)

    def test_asymmetric(self):
        assert kl_divergence([0.5, 0.5], [0.9, 0.1]) != pytest.approx(
            kl_divergence([0.9, 0.1], [0.5, 0.5]))

    def test_gibbs_on_many_pairs(self):
        rng = np.random.default_rng(1)
        vals = [kl_divergence(_simplex(rng, 6), _simplex(rng, 6)) for _ in range(10_000)]
        assert min(vals) >= 0.0

    def test_zero_in_q_is_floored(self):
        v = kl_divergence([0.5, 0.5], [1.0, 0.0])
        assert math.isfinite(v) and v == pytest.approx(0.5 * math.log(0.5 / 1e-12) - 0.5 * LN2,
                                                         rel=1e-12)

    def test_zero_in_p_contributes_nothing(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(LN2, abs=1e-15)

    @pytest.mark.parametrize("p,q", [([0.5, 0.6], [0.5, 0.5]), ([-0.1, 1.1], [0.5, 0.5]),
                                     ([1.0], [0.5, 0.5])])
    def test_rejects_non_distributions(self, p, q):
        with pytest.raises(PreferenceError):
            kl_divergence(p, q)

    @given(st.integers(0, 2 ** 31))
    @settings(max_examples=100, deadline=None)
    def test_positive_off_the_diagonal(self, seed):
        rng = np.random.default_rng(seed)
        p, q = _simplex(rng, 4), _simplex(rng, 4)
        if np.abs(p - q).max() > 1e-3:
            assert kl_divergence(p, q) > 0


class TestTraceDistance:
    def test_identical_traces(self):
        o = DistributionTrace(np.full((3, 4), 0.25), [0, 1, 2])
        assert trace_distance(o, o) == 0.0

    def test_one_position_is_plain_kl(self):
        a, b = np.array([[0.25, 0.75]]), np.array([[0.5, 0.5]])
        assert trace_distance(a, b) == kl_divergence(b[0], a[0])
        assert trace_distance(a, b, reverse=True) == kl_divergence(a[0], b[0])

    def test_loop_oracle(self):
        rng = np.random.default_rng(2)
        o = np.stack([_simplex(rng, 9) for _ in range(5)])
        o0 = np.stack([_simplex(rng, 9) for _ in range(5)])
        expected = 0.0
        for t in range(5):
            expected += sum(o0[t, i] * math.log(o0[t, i] / max(o[t, i], 1e-12))
                            for i in range(9) if o0[t, i] > 0) / 5
        assert trace_distance(o, o0) == pytest.approx(expected, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(PreferenceError):
            trace_distance(np.full((2, 2), 0.5), np.full((3, 2), 0.5))


CAPS = [vocab.encode("red square c1"), vocab.encode("blue cross c5"),
        vocab.encode("green circle c7")]


class TestPairing:
    def test_extremes_from_hand_set_traces(self):
        o0 = np.array([[0.5, 0.5]])
        dists = [trace_distance(_two_point_at_distance(d)[None], o0) for d in (0.4, 0.1, 0.9)]
        np.testing.assert_allclose(dists, [0.4, 0.1, 0.9], atol=1e-12)
        rec = pair_extremes(CAPS, dists, "s0", [5], [1, 2])
        assert rec.a_pos == CAPS[1] and rec.a_neg == CAPS[2]
        assert rec.kl_pos == pytest.approx(0.1) and rec.kl_neg == pytest.approx(0.9)

    def test_duplicates_skipped(self):
        assert pair_extremes([CAPS[0], CAPS[0]], [0.1, 0.5], "s", [], []) is None

    def test_ties_skipped(self):
        assert pair_extremes(CAPS, [0.3, 0.3, 0.3], "s", [], []) is None

    def test_single_caption_skipped(self):
        assert pair_extremes(CAPS[:1], [0.3], "s", [], []) is None

    def test_record_invariants_enforced(self):
        with pytest.raises(PreferenceError):
            PreferenceRecord("s", [], [], CAPS, 0, 1, 0.5, 0.2)
        with pytest.raises(PreferenceError):
            PreferenceRecord("s", [], [], [CAPS[0], CAPS[0]], 0, 1, 0.1, 0.2)

    def test_json_round_trip(self):
        rec = pair_extremes(CAPS, [0.2, 0.1, 0.3], "s9", [4], [0, 3])
        back = PreferenceRecord.from_json(rec.to_json())
        assert back == rec

    @given(st.lists(st.floats(0, 5), min_size=2, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_emitted_records_are_strict(self, dists):
        caps = [[10 + i] for i in range(len(dists))]
        rec = pair_extremes(caps, dists, "s", [], [])
        if rec is not None:
            assert rec.kl_pos < rec.kl_neg and rec.a_pos != rec.a_neg
            assert rec.kl_pos == min(dists) and rec.kl_neg == max(dists)

    def test_build_with_a_real_model(self):
        m = ToyLVLM(seed=0)
        v = m.encode_image(np.random.default_rng(0).random((16, 16, 3)))
        q = vocab.encode("is there a red square ?")
        pr = prune(v, q, m, PruneConfig(0.9))
        recs = build_preference_pairs("s", q, m, m.connect(v), pr, CAPS)
        assert len(recs) == 1
        r = recs[0]
        assert r.discarded == pr.discarded.tolist()
        assert r.kl_pos == min(r.distances) and r.kl_neg == max(r.distances)


class TestLossClosedForms:
    def test_zero_margin(self):
        assert dpo_loss_value(0.0) == pytest.approx(LN2, abs=1e-15)

    def test_unit_margin(self):
        assert dpo_loss_value(1.0) == pytest.approx(-math.log(1 / (1 + math.exp(-1))), abs=1e-12)
        assert dpo_loss_value(1.0) == pytest.approx(0.313262, abs=1e-6)

    @given(st.floats(-20, 20))
    @settings(max_examples=100, deadline=None)
    def test_beta_scaling(self, m):
        assert dpo_loss_value(m, beta=2.0) == pytest.approx(dpo_loss_value(2 * m), rel=1e-12, abs=1e-15)

    @given(st.floats(-20, 20), st.floats(1e-3, 5))
    @settings(max_examples=100, deadline=None)
    def test_monotone_positive_convex(self, m, dm):
        a, b = dpo_loss_value(m), dpo_loss_value(m + dm)
        assert b < a and b > 0
        assert dpo_loss_value(m) + dpo_loss_value(-m) >= 2 * LN2 - 1e-12

    def test_elementwise(self):
        out = dpo_loss_from_logps(Tensor([0.0, 1.0]), Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [LN2, dpo_loss_value(1.0)], atol=1e-15)


@pytest.fixture(scope="module")
def setup():
    lvlm = ToyLVLM(seed=0)
    cap = CaptionModel(encoder=lvlm.encoder, seed=0)
    sel = SelectorModel(seed=0)
    feats = lvlm.encode_image(np.random.default_rng(0).random((16, 16, 3))).patches
    rec = PreferenceRecord("s0", vocab.encode("what color is the cross ?"), list(range(4, 12)),
                           CAPS, 1, 2, 0.1, 0.9, [0.4, 0.1, 0.9])
    return lvlm, cap, sel, {"s0": feats}, rec


class TestLosses:
    def test_caption_margin(self, setup):
        _, cap, _, feats, rec = setup
        v_l = feats["s0"][rec.discarded]
        lp = [cap.caption_logprob(c, v_l, rec.question).item() for c in (rec.a_pos, rec.a_neg)]
        assert dpo_loss_caption(rec, cap, v_l).item() == pytest.approx(
            dpo_loss_value(lp[0] - lp[1]), abs=1e-12)

    def test_equal_captions_give_ln2(self, setup):
        _, cap, _, feats, _ = setup
        v_l = feats["s0"][:3]
        lp = cap.caption_logprob(CAPS[0], v_l, []).item()
        loss = dpo_loss_from_logps(Tensor(lp), Tensor(lp)).item()
        assert loss == pytest.approx(LN2, abs=1e-15)

    def test_uniform_selector(self, setup):
        _, _, sel, _, rec = setup
        z = np.tile(np.random.default_rng(0).normal(size=32), (3, 1))
        assert dpo_loss_selector(rec, sel, z=z).item() == pytest.approx(LN2, abs=1e-12)

    def test_two_candidate_margin_is_logit_gap(self, setup):
        _, _, sel, _, _ = setup
        rec = PreferenceRecord("s", [5], [], CAPS[:2], 0, 1, 0.1, 0.2)
        z = sel.encode_pairs(rec.question, rec.captions)
        lg = sel.logits(z).data
        assert dpo_loss_selector(rec, sel, z=z).item() == pytest.approx(
            dpo_loss_value(lg[0] - lg[1]), abs=1e-12)

    def test_missing_caption(self, setup):
        _, _, sel, _, rec = setup
        with pytest.raises(PreferenceError):
            dpo_loss_selector(rec, sel, captions=CAPS[:2])

    def test_caption_gradient(self, setup):
        _, cap, _, feats, rec = setup
        v_l = feats["s0"][rec.discarded]
        rep = grad_check(lambda: dpo_loss_caption(rec, cap, v_l), cap.lm_parameters(),
                         max_entries=4, floor=1e-6)
        assert rep.max_rel_error < 1e-4

    def test_selector_gradient(self, setup):
        _, _, sel, _, rec = setup
        z = sel.encode_pairs(rec.question, rec.captions)
        rep = grad_check(lambda: dpo_loss_selector(rec, sel, z=z), sel.classifier.parameters(),
                         max_entries=4, floor=1e-6)
        assert rep.max_rel_error < 1e-4


class TestTrain:
    def _fresh(self, seed=0):
        lvlm = ToyLVLM(seed=seed)
        return lvlm, CaptionModel(encoder=lvlm.encoder, seed=seed), SelectorModel(seed=seed)

    def test_zero_steps_is_a_no_op(self, setup):
        _, _, _, feats, rec = setup
        lvlm, cap, sel = self._fresh()
        before = (cap.checksum(), sel.checksum())
        rep = train([rec], cap, sel, DpoConfig(steps=0), feats)
        assert rep["steps"] == [] and (cap.checksum(), sel.checksum()) == before

    def test_overfit_one_record(self, setup):
        _, _, _, feats, rec = setup
        lvlm, cap, sel = self._fresh(1)
        frozen = (cap.frozen_checksum(), sel.text_encoder.checksum(), lvlm.checksum())
        cfg = DpoConfig(steps=200, lr=0.02, caption_lr=None, momentum=0.0)
        rep = train([rec], cap, sel, cfg, feats, frozen_modules=[lvlm])
        lc = [s["loss_caption"] for s in rep["steps"]]
        ls = [s["loss_selector"] for s in rep["steps"]]
        assert lc[-1] < LN2 and ls[-1] < LN2
        assert all(b < a for a, b in zip(lc, lc[1:]))
        assert all(b < a for a, b in zip(ls, ls[1:]))
        assert (cap.frozen_checksum(), sel.text_encoder.checksum(), lvlm.checksum()) == frozen

    def test_sequential_mode_splits_the_objectives(self, setup):
        _, _, _, feats, rec = setup
        _, cap, sel = self._fresh(2)
        rep = train([rec], cap, sel, DpoConfig(steps=6, mode="sequential"), feats)
        assert all(s["loss_selector"] == 0 for s in rep["steps"][:3])
        assert all(s["loss_caption"] == 0 for s in rep["steps"][3:])

    def test_frozen_tampering_detected(self, setup):
        _, _, _, feats, rec = setup
        _, cap, sel = self._fresh(3)

        class Sneaky(SelectorModel):
            def logits(self, z):
                self.text_encoder.tok_emb.weight.data[0, 0] += 1.0
                return super().logits(z)

        sneaky = Sneaky(seed=3)
        with pytest.raises(TrainingError, match="frozen"):
            train([rec], cap, sneaky, DpoConfig(steps=1), feats)

    def test_empty_dataset(self, setup):
        _, cap, sel, feats, _ = setup
        with pytest.raises(TrainingError):
            train([], cap, sel, DpoConfig(), feats)

    def test_heldout_report(self, setup):
        _, _, _, feats, rec = setup
        _, cap, sel = self._fresh(4)
        rep = train([rec], cap, sel, DpoConfig(steps=2), feats, heldout=[rec])
        assert set(rep["heldout"]) == {"loss_caption", "loss_selector"}

    def test_batched_selector_loss_is_record_mean(self, setup):
        _, _, sel, _, _ = setup
        recs = [PreferenceRecord("a", [5], [], CAPS[:2], 0, 1, 0.1, 0.2),
                PreferenceRecord("b", [6, 7], [], CAPS, 2, 0, 0.1, 0.5),
                PreferenceRecord("c", [8], [], CAPS[::-1], 1, 2, 0.0, 0.3)]
        z = {id(r): sel.encode_pairs(r.question, r.captions) for r in recs}
        _, ls = _batch_losses(recs, None, sel, {}, z, 1.0, False, True)
        each = [dpo_loss_selector(r, sel, z=z[id(r)]).item() for r in recs]
        assert ls.item() == pytest.approx(np.mean(each), abs=1e-12)

    def test_separate_caption_rate(self, setup):
        _, _, _, feats, rec = setup
        moved = []
        for cap_lr in (1e-3, 1e-1):
            _, cap, sel = self._fresh(5)
            w0 = cap.lm.head.weight.data.copy()
            s0 = sel.classifier.head.weight.data.copy()
            train([rec], cap, sel, DpoConfig(steps=1, lr=0.05, caption_lr=cap_lr), feats)
            moved.append((np.abs(cap.lm.head.weight.data - w0).max(),
                          np.abs(sel.classifier.head.weight.data - s0).max()))
        assert moved[1][0] == pytest.approx(100 * moved[0][0], rel=1e-9)
        assert moved[1][1] == moved[0][1]

    def test_idle_objective_does_not_coast(self, setup):
        _, _, _, feats, rec = setup
        _, cap, sel = self._fresh(6)
        rep = train([rec], cap, sel, DpoConfig(steps=4, mode="sequential", momentum=0.9), feats)
        assert rep["steps"][2]["loss_caption"] == 0
        # the caption LM is idle in the second half, so its weights stop moving
        _, cap2, sel2 = self._fresh(6)
        train([rec], cap2, sel2, DpoConfig(steps=2, mode="sequential", momentum=0.9), feats)
        _, cap3, sel3 = self._fresh(6)
        train([rec], cap3, None, DpoConfig(steps=2, momentum=0.9), feats)
        np.testing.assert_array_equal(cap.lm.head.weight.data, cap3.lm.head.weight.data)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            DpoConfig(lr=0)
        with pytest.raises(ValueError):
            DpoConfig(caption_lr=-1e-3)
        with pytest.raises(ValueError):
            DpoConfig(beta=0)
        with pytest.raises(ValueError):
            DpoConfig(mode="alternate")
