import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from nltk.translate.bleu_score import corpus_bleu

from votecomb.corpus import CombinationExample, NoiseProfile, Vocabulary, generate_synthetic_systems, generate_targets
from votecomb.evaluation import bleu, corpus_stats, matching_rate, paired_bootstrap, rank_word_pairs, similarity_report
from votecomb.model import ModelConfig
from votecomb.train import TrainConfig, train

words = st.lists(st.sampled_from("abcdefg"), min_size=0, max_size=9)


class TestBleu:
    def test_identical_is_100(self):
        assert bleu([["a", "b", "c", "d"]], [[["a", "b", "c", "d"]]]) == pytest.approx(100.0)

    def test_no_overlap_is_zero(self):
        assert bleu([["a", "b", "c", "d"]], [[["w", "x", "y", "z"]]]) == 0.0

    def test_brevity_penalty(self):
        # all n-gram precisions are 1, so only exp(1 - 5/4) remains
        got = bleu([["a", "b", "c", "d"]], [[["a", "b", "c", "d", "e"]]])
        assert got == pytest.approx(100 * np.exp(1 - 5 / 4), abs=0.01)
        assert got == pytest.approx(77.88, abs=0.01)

    def test_case_folding(self):
        assert bleu([["A", "b", "c", "d"]], [[["a", "b", "c", "d"]]], case_sensitive=False) == pytest.approx(100.0)
        assert bleu([["A", "b", "c", "d"]], [[["a", "b", "c", "d"]]]) < 100.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bleu([["a"]], [])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(words, words), min_size=1, max_size=8))
    def test_matches_reference_implementation(self, pairs):
        cands = [c for c, _ in pairs]
        refs = [[r] for _, r in pairs]
        stats = corpus_stats(cands, refs).sum(axis=0)
        ours = bleu(cands, refs)
        if stats[-2] == 0 or (stats[:4] == 0).any():
            assert ours == 0.0
        else:
            assert ours == pytest.approx(100 * corpus_bleu(refs, cands), abs=1e-9)

    @given(st.lists(st.tuples(words, words), min_size=1, max_size=8), st.randoms())
    def test_sentence_order_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = bleu([c for c, _ in pairs], [[r] for _, r in pairs])
        b = bleu([c for c, _ in shuffled], [[r] for _, r in shuffled])
        assert a == pytest.approx(b, abs=1e-9)


class TestMatchingRate:
    def test_identical(self):
        out = ["a", "b", "c", "d", "e"]
        for n in range(1, 5):
            assert matching_rate([out], [[out, out]], n) == 1.0

    def test_disjoint(self):
        assert matching_rate([["a", "b"]], [[["x", "y"], ["z"]]], 1) == 0.0

    def test_hand_example(self):
        assert matching_rate([["a", "b"]], [[["a", "b"], ["b", "c"]]], 1) == pytest.approx(0.75)

    def test_short_output_skipped(self):
        assert matching_rate([["a"], ["a", "b"]], [[["x"]], [["a", "b"]]], 2) == 1.0

    @given(words, st.lists(words, min_size=1, max_size=4), st.randoms(), st.integers(1, 4))
    def test_hypothesis_order_invariant(self, out, hyps, rnd, n):
        shuffled = list(hyps)
        rnd.shuffle(shuffled)
        assert matching_rate([out], [hyps], n) == pytest.approx(matching_rate([out], [shuffled], n), abs=1e-12)

    def test_decreasing_in_order_on_random_data(self):
        rng = np.random.default_rng(0)
        alphabet = list("abcdef")
        outs, hyp_sets = [], []
        for _ in range(200):
            base = list(rng.choice(alphabet, size=rng.integers(6, 12)))
            outs.append(base)
            hyp_sets.append([[w if rng.random() > 0.3 else str(rng.choice(alphabet)) for w in base] for _ in range(3)])
        rates = [matching_rate(outs, hyp_sets, n) for n in (1, 2, 3, 4)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))


class TestBootstrap:
    def stats(self, seed, size=40):
        rng = np.random.default_rng(seed)
        refs = [list(rng.choice(list("abcdefgh"), size=8)) for _ in range(size)]
        cands = [[w if rng.random() > 0.4 else "z" for w in r] for r in refs]
        return corpus_stats(cands, [[r] for r in refs]), refs

    @pytest.mark.parametrize("seed", range(3))
    def test_identical_systems(self, seed):
        a, _ = self.stats(0)
        assert paired_bootstrap(a, a, resamples=200, seed=seed) >= 0.95

    def test_dominance(self):
        noisy, refs = self.stats(1)
        perfect = corpus_stats(refs, [[r] for r in refs])
        assert paired_bootstrap(perfect, noisy, resamples=200, seed=0) == 0.0

    def test_deterministic(self):
        a, _ = self.stats(2)
        b, _ = self.stats(3)
        assert paired_bootstrap(a, b, resamples=150, seed=9) == paired_bootstrap(a, b, resamples=150, seed=9)

    def test_errors(self):
        a, _ = self.stats(0, size=10)
        with pytest.raises(ValueError):
            paired_bootstrap(a, a[:5])
        with pytest.raises(ValueError):
            paired_bootstrap(a, a, resamples=10)


@pytest.fixture(scope="module")
def synonym_model():
    """A model trained on hypotheses where each "kind" is written "type" half of the time."""
    targets = [["kind" if w == "w0" else w for w in s] for s in generate_targets(1200, n_words=30, min_len=4, max_len=10, seed=3)]
    exs = generate_synthetic_systems(targets, 3, NoiseProfile(0.1, 0.05, 0.0), seed=3, source_classes=6)
    rng = np.random.default_rng(0)
    for e in exs:
        e.hyps = [["type" if w == "kind" and rng.random() < 0.5 else w for w in h] for h in e.hyps]
    vocab = Vocabulary(sorted({t for e in exs for s in (e.src, e.trg, *e.hyps) for t in s}))
    enc = [vocab.encode_example(e) for e in exs]
    mc = ModelConfig(vocab_size=len(vocab), d_model=32, d_ff=128, n_heads=4)
    res = train(enc[:1000], enc[1000:], mc, TrainConfig(max_steps=300, eval_every=150, warmup_steps=100))
    return res.model, enc[1000:], vocab


class TestSimilarity:
    def test_identical_pairs_lead(self, synonym_model):
        model, dev, vocab = synonym_model
        pairs = rank_word_pairs(model, dev, vocab, min_pair_count=5)
        assert all(a == b for _, (a, b) in pairs[:20])
        assert [m for m, _ in pairs] == sorted((m for m, _ in pairs), reverse=True)

    def test_synonym_ranks_high(self, synonym_model):
        model, dev, vocab = synonym_model
        distinct = [p for _, p in rank_word_pairs(model, dev, vocab, min_pair_count=5) if p[0] != p[1]]
        assert distinct.index(("kind", "type")) < len(distinct) // 10

    def test_report_shape(self, synonym_model):
        model, dev, vocab = synonym_model
        report = similarity_report(model, dev, vocab, top_k=5, min_pair_count=5)
        assert len(report) == 5
        assert all(a != b for _, a, b, _ in report)
        assert similarity_report(model, dev, vocab, min_pair_count=10**6) == []

    def test_needs_two_hypotheses(self, synonym_model):
        model, dev, vocab = synonym_model
        single = [CombinationExample(src=e.src, hyps=e.hyps[:1], trg=e.trg) for e in dev[:3]]
        with pytest.raises(ValueError):
            rank_word_pairs(model, single, vocab)
