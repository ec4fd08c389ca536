"""Tests for decoding and scoring."""

import numpy as np
import pytest

from qtfm import evaluate as E
from qtfm.data import Utterance
from qtfm.errors import ContractError
from qtfm.model import EOS_ID, Model, ModelConfig

TINY = ModelConfig(d_model=8, n_heads=2, d_ff=16, enc_layers=1, dec_layers=1,
                   vocab_size=6, feature_dim=4, dropout=0.0, frontend_channels=4)


class ScriptedModel:
    """Emits a fixed token sequence for each utterance, keyed by features[0, 0]."""

    def __init__(self, script: dict[float, list[int]], vocab: int = 8):
        self.script = script
        self.vocab = vocab

    def predict_logits(self, features, dec_in):
        target = self.script[float(np.asarray(features)[0, 0])] + [EOS_ID]
        step = len(dec_in) - 1
        nxt = target[step] if step < len(target) else EOS_ID
        logits = np.zeros((len(dec_in), self.vocab))
        logits[-1, nxt] = 5.0
        return logits


def feats(key: float, t: int = 6):
    f = np.zeros((t, 4))
    f[0, 0] = key
    return f


class TestGreedyDecode:
    def test_stops_at_eos(self):
        model = ScriptedModel({1.0: [4, 5, 3]})
        tokens, truncated = E.greedy_decode(model, feats(1.0), max_len=10)
        assert tokens == [4, 5, 3] and not truncated

    def test_truncates_at_cap(self):
        model = ScriptedModel({1.0: [4] * 50})
        tokens, truncated = E.greedy_decode(model, feats(1.0), max_len=5)
        assert tokens == [4] * 5 and truncated

    def test_empty_hypothesis(self):
        model = ScriptedModel({1.0: []})
        tokens, truncated = E.greedy_decode(model, feats(1.0), max_len=5)
        assert tokens == [] and not truncated

    def test_bad_cap_rejected(self):
        with pytest.raises(ContractError):
            E.greedy_decode(ScriptedModel({}), feats(1.0), max_len=0)


class TestWer:
    def test_exact_match(self):
        r = E.wer([1, 2, 3], [1, 2, 3])
        assert (r.substitutions, r.deletions, r.insertions, r.hits) == (0, 0, 0, 3)
        assert r.wer == 0.0

    def test_single_deletion(self):
        r = E.wer([1, 2, 3], [1, 3])
        assert (r.substitutions, r.deletions, r.insertions, r.hits) == (0, 1, 0, 2)
        assert r.wer == pytest.approx(1 / 3)

    def test_single_insertion(self):
        r = E.wer([1, 2], [1, 3, 2])
        assert (r.substitutions, r.deletions, r.insertions, r.hits) == (0, 0, 1, 2)
        assert r.wer == pytest.approx(0.5)

    def test_all_substitutions(self):
        r = E.wer([1, 2], [3, 4])
        assert (r.substitutions, r.deletions, r.insertions, r.hits) == (2, 0, 0, 0)
        assert r.wer == 1.0

    def test_empty_reference(self):
        r = E.wer([], [7])
        assert (r.substitutions, r.deletions, r.insertions, r.hits) == (0, 0, 1, 0)
        assert r.wer == 1.0           # denominator floors at 1
        assert E.wer([], []).wer == 0.0

    def test_tie_prefers_substitution_over_indel(self):
        r = E.wer([1], [2, 3])
        assert (r.substitutions, r.insertions, r.deletions) == (1, 1, 0)
        r = E.wer([1, 2], [2])
        assert (r.deletions, r.hits, r.substitutions) == (1, 1, 0)

    def test_counter_identities_random(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            ref = rng.integers(0, 4, size=rng.integers(0, 9)).tolist()
            hyp = rng.integers(0, 4, size=rng.integers(0, 9)).tolist()
            r = E.wer(ref, hyp)
            assert r.substitutions + r.deletions + r.hits == len(ref)
            assert r.substitutions + r.insertions + r.hits == len(hyp)
            flipped = E.wer(hyp, ref)
            # the minimal distance is symmetric (the S/D/I split need not be,
            # since tie-breaking picks one of several minimal alignments)
            assert flipped.errors == r.errors

    def test_matches_recursive_oracle_small(self):
        import itertools

        memo: dict = {}

        def dist(a, b):
            if not a:
                return len(b)
            if not b:
                return len(a)
            key = (a, b)
            if key not in memo:
                memo[key] = min(dist(a[1:], b[1:]) + (a[0] != b[0]),
                                dist(a[1:], b) + 1,
                                dist(a, b[1:]) + 1)
            return memo[key]

        seqs = [s for n in range(4) for s in itertools.product((0, 1), repeat=n)]
        for a in seqs:
            for b in seqs:
                assert E.wer(a, b).errors == dist(a, b), (a, b)


class TestEvaluate:
    def test_pooled_corpus_wer(self):
        data = [(feats(1.0), np.array([4, 5])), (feats(2.0), np.array([3, 3, 3]))]
        model = ScriptedModel({1.0: [4, 5], 2.0: [3, 4, 3]})   # one substitution
        summary = E.evaluate(model, data)
        assert summary.n_utterances == 2
        assert summary.substitutions == 1 and summary.hits == 4
        assert summary.ref_tokens == 5
        assert summary.wer == pytest.approx(1 / 5)
        assert summary.truncated == 0
        assert summary.by_length[2] == (1, 0.0)
        assert summary.by_length[3][1] == pytest.approx(1 / 3)
        assert summary.repeated_wer is None

    def test_repeated_flag_split(self):
        data = [Utterance(feats(1.0), np.array([4, 5]), False),
                Utterance(feats(2.0), np.array([3, 3]), True)]
        model = ScriptedModel({1.0: [4, 5], 2.0: [3]})
        summary = E.evaluate(model, data)
        assert summary.regular_wer == 0.0
        assert summary.repeated_wer == pytest.approx(0.5)

    def test_truncation_counted(self):
        data = [(feats(1.0), np.array([4, 5]))]
        model = ScriptedModel({1.0: [4] * 40})
        summary = E.evaluate(model, data, max_len=6)
        assert summary.truncated == 1

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            E.evaluate(ScriptedModel({}), [])


class TestLengthDeletionReport:
    def test_perfect_hypotheses_all_zero(self):
        refs = [[3, 4, 5], [4, 4], [5, 3, 4, 5]]
        rep = E.length_deletion_report(refs, [list(r) for r in refs])
        assert rep.rows == [(3, 0), (2, 0), (4, 0)]
        assert rep.length_histogram == {2: 1, 3: 1, 4: 1}

    def test_missing_span_counted_as_deletions(self):
        ref = [3, 4, 5, 3, 4, 5, 3, 4]
        hyp = ref[:2] + ref[7:]            # drop a 5-token span
        rep = E.length_deletion_report([ref], [hyp])
        assert rep.rows == [(8, 5)]

    def test_one_row_per_utterance(self):
        rng = np.random.default_rng(7)
        refs = [list(rng.integers(3, 6, size=int(rng.integers(1, 7))))
                for _ in range(25)]
        hyps = [list(rng.integers(3, 6, size=int(rng.integers(0, 7))))
                for _ in range(25)]
        rep = E.length_deletion_report(refs, hyps)
        assert len(rep.rows) == 25
        assert sum(rep.length_histogram.values()) == 25
        for (n, d), ref in zip(rep.rows, refs):
            assert n == len(ref) and 0 <= d <= n

    def test_mismatched_list_lengths_rejected(self):
        with pytest.raises(ContractError):
            E.length_deletion_report([[3, 4]], [[3, 4], [5]])


class TestAttentionExport:
    def test_shapes_and_names(self):
        model = Model(TINY, seed=0)
        rng = np.random.default_rng(0)
        maps = E.export_attention(model, rng.normal(size=(8, 4)), np.array([3, 4]))
        # 1 encoder self + 1 decoder self + 1 decoder cross: 2 heads each,
        # plus one head-averaged map per block
        assert len(maps) == 6 + 3
        names = [n for n, _ in maps]
        assert "enc0.self.h0" in names and "dec0.cross.h1" in names
        assert "dec0.cross.mean" in names
        for name, arr in maps:
            if name.startswith("dec0.self"):
                assert arr.shape == (3, 3)       # BOS + 2 tokens
            if name.startswith("dec0.cross"):
                assert arr.shape == (3, 2)       # memory is 8 frames -> 2 steps

    def test_head_average_is_row_stochastic_mean(self):
        model = Model(TINY, seed=1)
        rng = np.random.default_rng(3)
        maps = dict(E.export_attention(model, rng.normal(size=(12, 4)),
                                       np.array([3, 4, 5])))
        mean = maps["dec0.cross.mean"]
        assert np.allclose(mean, (maps["dec0.cross.h0"] + maps["dec0.cross.h1"]) / 2,
                           atol=1e-12)
        assert np.allclose(mean.sum(axis=1), 1.0, atol=1e-6)
