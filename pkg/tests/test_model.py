import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_extended_energies, naive_similarity, to_flat_sim
from votecomb.corpus import EOS, PAD, CombinationExample
from votecomb.model import (
    CheckpointError,
    ModelConfig,
    VotingCombiner,
    collate,
    compute_similarity,
    forward_loss,
    load_checkpoint,
    save_checkpoint,
    smoothed_nll,
    tally_votes,
    voting_attention,
)

V = 12


def small_model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = dict(vocab_size=V, d_model=16, n_layers_enc=1, n_layers_dec=2, n_heads=2, d_ff=32, max_len=20, dropout=0.1)
    cfg.update(kw)
    return VotingCombiner(ModelConfig(**cfg)).eval()


def random_example(rng, n_hyps=3, with_trg=True):
    def seq(lo=2, hi=7):
        return [int(x) for x in rng.integers(4, V, size=rng.integers(lo, hi))] + [EOS]

    return CombinationExample(src=seq(), hyps=[seq() for _ in range(n_hyps)], trg=seq() if with_trg else None)


def hyp_tensor(*seqs):
    length = max(len(s) for s in seqs)
    out = torch.full((1, len(seqs), length), PAD)
    for n, s in enumerate(seqs):
        out[0, n, : len(s)] = torch.tensor(s)
    return out


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, d_model=10, n_heads=3)

    def test_dropout_range(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, dropout=1.0)


class TestEncoders:
    def test_source_shape(self):
        m = small_model(d_model=64, n_heads=4)
        assert m.encode_source(torch.tensor([[4, 5, 6, 7, EOS]])).shape == (1, 5, 64)

    def test_source_deterministic_in_eval(self):
        m = small_model()
        x = torch.tensor([[4, 5, 6, EOS]])
        assert torch.equal(m.encode_source(x), m.encode_source(x))

    def test_padding_is_masked(self):
        m = small_model()
        plain = m.encode_source(torch.tensor([[4, 9, 6, EOS]]))
        padded = m.encode_source(torch.tensor([[4, 9, 6, EOS, PAD]]))
        torch.testing.assert_close(padded[:, :4], plain, rtol=0, atol=1e-6)

    def test_overlength_names_max_len(self):
        m = small_model(max_len=5)
        with pytest.raises(ValueError, match="max_len=5"):
            m.encode_source(torch.tensor([[4] * 6]))

    def test_swapping_hypotheses_swaps_outputs(self):
        m = small_model()
        a, b = [4, 5, 6, EOS], [7, 8, EOS]
        ab = m.encode_hypotheses(hyp_tensor(a, b))
        ba = m.encode_hypotheses(hyp_tensor(b, a))
        torch.testing.assert_close(ab[:, 0], ba[:, 1], rtol=0, atol=1e-6)
        torch.testing.assert_close(ab[:, 1, :3], ba[:, 0, :3], rtol=0, atol=1e-6)

    def test_identical_hypotheses(self):
        m = small_model()
        h = m.encode_hypotheses(hyp_tensor([4, 5, EOS], [4, 5, EOS]))
        assert torch.equal(h[:, 0], h[:, 1])

    def test_any_number_of_hypotheses(self):
        m = small_model()
        rng = np.random.default_rng(0)
        ex = random_example(rng, n_hyps=5, with_trg=False)
        h = m.encode_hypotheses(collate([ex], V, with_target=False).hyps)
        assert h.shape[1] == 5

    def test_no_hypotheses(self):
        with pytest.raises(ValueError):
            small_model().encode_hypotheses(torch.zeros(1, 0, 3, dtype=torch.long))


class TestSimilarity:
    def test_single_voter_gets_everything(self):
        h = torch.randn(1, 2, 4, 5)
        mask = torch.tensor([[[True, False, False, False], [True, True, True, True]]])
        sim = compute_similarity(h, mask)
        # hypothesis 0 has one voter (row 0); it votes 1.0 for every candidate of hypothesis 1
        torch.testing.assert_close(sim[0, 0, 4:8], torch.ones(4))

    def test_identical_voters_split_evenly(self):
        v = torch.randn(3)
        h = torch.stack([torch.stack([v, v]), torch.stack([torch.randn(3), torch.randn(3)])])[None]
        sim = compute_similarity(h, torch.ones(1, 2, 2, dtype=torch.bool))
        torch.testing.assert_close(sim[0, 0:2, 2:4], torch.full((2, 2), 0.5))

    def test_ln2_dot_products(self):
        cand = torch.tensor([1.0, 0.0])
        voters = torch.stack([torch.tensor([math.log(2.0), 0.0]), torch.zeros(2)])
        h = torch.stack([voters, torch.stack([cand, cand])])[None].double()
        sim = compute_similarity(h, torch.ones(1, 2, 2, dtype=torch.bool))
        torch.testing.assert_close(sim[0, 0:2, 2], torch.tensor([2 / 3, 1 / 3], dtype=torch.float64))

    def test_single_hypothesis_is_empty(self):
        sim = compute_similarity(torch.randn(1, 1, 4, 3), torch.ones(1, 1, 4, dtype=torch.bool))
        assert torch.count_nonzero(sim) == 0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 8), min_size=2, max_size=4), st.integers(0, 10_000))
    def test_matches_naive_and_normalizes(self, lengths, seed):
        g = torch.Generator().manual_seed(seed)
        pad_to = max(lengths)
        h = torch.randn(1, len(lengths), pad_to, 6, generator=g, dtype=torch.float64)
        mask = torch.zeros(1, len(lengths), pad_to, dtype=torch.bool)
        for n, length in enumerate(lengths):
            mask[0, n, :length] = True
        sim = compute_similarity(h, mask)[0].numpy()
        ref = naive_similarity([h[0, n, :length].numpy() for n, length in enumerate(lengths)])
        np.testing.assert_allclose(sim, to_flat_sim(ref, lengths, pad_to), atol=1e-12)
        for (m, n), block in ref.items():
            np.testing.assert_allclose(block.sum(axis=0), 1.0, atol=1e-6)
        assert (sim >= 0).all()


class TestVotingAttention:
    def test_single_hypothesis_is_plain_attention(self):
        g = torch.Generator().manual_seed(1)
        q = torch.randn(3, 4, generator=g)
        k, v = torch.randn(4, 4, generator=g), torch.randn(4, 4, generator=g)
        sim = compute_similarity(torch.randn(1, 1, 4, 4, generator=g), torch.ones(1, 1, 4, dtype=torch.bool))[0]
        on, st_on = voting_attention(q, k, v, sim, voting_enabled=True)
        off, st_off = voting_attention(q, k, v, sim, voting_enabled=False)
        torch.testing.assert_close(st_on["e_ext"], st_off["e"], rtol=0, atol=1e-6)
        torch.testing.assert_close(on, off, rtol=0, atol=1e-6)

    def test_two_single_word_hypotheses(self):
        g = torch.Generator().manual_seed(2)
        h = torch.randn(1, 2, 1, 4, generator=g)
        sim = compute_similarity(h, torch.ones(1, 2, 1, dtype=torch.bool))[0]
        q, k, v = torch.randn(1, 4, generator=g), torch.randn(2, 4, generator=g), torch.randn(2, 4, generator=g)
        _, state = voting_attention(q, k, v, sim)
        e = state["e"][0]
        torch.testing.assert_close(state["e_ext"][0], torch.stack([e[0] + e[1], e[1] + e[0]]))
        torch.testing.assert_close(state["alpha"][0], torch.tensor([0.5, 0.5]))

    def test_against_naive_loop(self):
        rng = np.random.default_rng(3)
        lengths, pad_to = (4, 5, 3), 5
        h = torch.tensor(rng.normal(size=(1, 3, pad_to, 8)))
        mask = torch.zeros(1, 3, pad_to, dtype=torch.bool)
        for n, length in enumerate(lengths):
            mask[0, n, :length] = True
        sim = compute_similarity(h, mask)
        e = torch.tensor(rng.normal(size=(1, 2, 1, 3 * pad_to)))
        e_ext = tally_votes(e, sim)
        ref_sim = naive_similarity([h[0, n, :length].numpy() for n, length in enumerate(lengths)])
        for head in range(2):
            e_list = [e[0, head, 0, n * pad_to : n * pad_to + length].numpy() for n, length in enumerate(lengths)]
            ref = naive_extended_energies(e_list, ref_sim)
            for n, length in enumerate(lengths):
                got = e_ext[0, head, 0, n * pad_to : n * pad_to + length].numpy()
                np.testing.assert_allclose(got, ref[n], atol=1e-6)

    def test_identical_hypotheses_get_identical_attention(self):
        m = small_model(seed=4)
        hyp = [5, 6, 7, EOS]
        ex = CombinationExample(src=[4, 8, EOS], hyps=[hyp, hyp, hyp], trg=[5, 6, EOS])
        states = []
        m(collate([ex], V), states=states)
        for st_ in states:
            alpha = st_["alpha"][0].reshape(2, 3, 3, 4)
            torch.testing.assert_close(alpha[:, :, 0], alpha[:, :, 1])
            torch.testing.assert_close(alpha[:, :, 0], alpha[:, :, 2])

    def test_shift_invariance(self):
        e = torch.randn(5, dtype=torch.float64)
        a = torch.softmax(e, -1)
        b = torch.softmax(e + 123.0, -1)
        torch.testing.assert_close(a, b)


class TestDecoder:
    def test_distributions_normalize(self):
        m = small_model()
        rng = np.random.default_rng(5)
        batch = collate([random_example(rng) for _ in range(3)], V)
        dist = m(batch)
        torch.testing.assert_close(dist.p.sum(-1), torch.ones(batch.trg_in.shape), atol=1e-6, rtol=0)
        assert ((dist.lam > 0) & (dist.lam < 1)).all()

    def test_causality(self):
        m = small_model()
        ex = CombinationExample(src=[4, 5, EOS], hyps=[[6, 7, 8, EOS], [6, 9, EOS]], trg=[6, 7, 8, 9, EOS])
        alt = CombinationExample(src=ex.src, hyps=ex.hyps, trg=[6, 7, 11, 4, EOS])
        a = m(collate([ex], V)).log_p
        b = m(collate([alt], V)).log_p
        # targets differ from position 2 on, so input positions <= 2 see identical prefixes
        torch.testing.assert_close(a[:, :3], b[:, :3], rtol=0, atol=0)
        assert not torch.allclose(a[:, 3], b[:, 3])

    def test_teacher_forcing_needs_target(self):
        ex = CombinationExample(src=[4, EOS], hyps=[[5, EOS]], trg=None)
        with pytest.raises(ValueError):
            collate([ex], V, with_target=True)


def two_token_model():
    m = VotingCombiner(ModelConfig(vocab_size=2, d_model=2, n_heads=1, n_layers_enc=1, n_layers_dec=1, d_ff=2)).double()
    with torch.no_grad():
        m.embed.weight.copy_(torch.tensor([[math.log(0.6), 0.0], [math.log(0.4), 0.0]]))
    return m


class TestVocabMixture:
    h = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    mask = torch.tensor([[True, False]])

    def set_gate(self, m, bias):
        with torch.no_grad():
            m.gate.weight.zero_()
            m.gate.bias.fill_(bias)

    def test_half_gate_arithmetic(self):
        m = two_token_model()
        self.set_gate(m, 0.0)
        d = m.mix_vocab_probs(self.h, self.mask)
        torch.testing.assert_close(d.p_f, torch.tensor([[0.6, 0.4]], dtype=torch.float64))
        torch.testing.assert_close(d.p_r, torch.tensor([[1.0, 0.0]], dtype=torch.float64))
        torch.testing.assert_close(d.p, torch.tensor([[0.8, 0.2]], dtype=torch.float64))

    @pytest.mark.parametrize("bias,which", [(40.0, "p_r"), (-40.0, "p_f")])
    def test_gate_endpoints(self, bias, which):
        m = two_token_model()
        self.set_gate(m, bias)
        d = m.mix_vocab_probs(self.h, self.mask)
        torch.testing.assert_close(d.p, getattr(d, which), atol=1e-12, rtol=0)

    def test_restricted_zero_mass(self):
        m = small_model()
        rng = np.random.default_rng(6)
        batch = collate([random_example(rng) for _ in range(4)], V)
        d = m(batch)
        outside = ~batch.restricted[:, None, :].expand_as(d.p_r)
        assert torch.all(d.p_r[outside] == 0)

    def test_empty_mask_rejected(self):
        m = two_token_model()
        with pytest.raises(ValueError):
            m.mix_vocab_probs(self.h, torch.tensor([[False, False]]))

    def test_disabled_is_full_softmax(self):
        torch.manual_seed(0)
        m = VotingCombiner(ModelConfig(vocab_size=V, d_model=8, n_heads=2, restricted_vocab_enabled=False))
        assert not hasattr(m, "gate")
        h = torch.randn(3, 8)
        d = m.mix_vocab_probs(h, None)
        torch.testing.assert_close(d.p, torch.softmax(h @ m.embed.weight.T, -1))


class TestLoss:
    def test_uniform_model(self):
        m = small_model(restricted_vocab_enabled=False)
        with torch.no_grad():
            m.embed.weight.zero_()
        rng = np.random.default_rng(7)
        loss = forward_loss(m, collate([random_example(rng) for _ in range(3)], V))
        assert loss.item() == pytest.approx(math.log(V), abs=1e-6)

    def test_duplicating_an_example(self):
        m = small_model()
        rng = np.random.default_rng(8)
        a, b = random_example(rng), random_example(rng)
        once = forward_loss(m, collate([a], V)).item()
        twice = forward_loss(m, collate([a, a], V)).item()
        assert twice == pytest.approx(once, abs=1e-6)
        assert forward_loss(m, collate([a, b], V)).item() != pytest.approx(once)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            collate([], V)

    @pytest.mark.parametrize("eps", [0.05, 0.1, 0.3])
    def test_smoothed_floor(self, eps):
        # predicting exactly the smoothed target attains the smoothed-CE floor (its entropy)
        vocab = 7
        q = np.full(vocab, eps / vocab)
        q[3] += 1 - eps
        loss = smoothed_nll(torch.log(torch.tensor(q))[None], torch.tensor([3]), eps)
        floor = -(q * np.log(q)).sum()
        assert loss.item() == pytest.approx(floor, abs=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    m = small_model(seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.cfg == m.cfg
    for (n1, p1), (n2, p2) in zip(m.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    rng = np.random.default_rng(9)
    batch = collate([random_example(rng) for _ in range(3)], V)
    assert forward_loss(m, batch).item() == pytest.approx(forward_loss(back, batch).item(), abs=1e-6)


def test_checkpoint_config_mismatch(tmp_path):
    m = small_model()
    save_checkpoint(m, tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", expected=ModelConfig(vocab_size=V, d_model=32))
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
