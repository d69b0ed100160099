import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from raremed.ehr_data import DataError
from raremed.encoder import (
    CLS,
    SEP,
    EncoderConfig,
    PatientEncoder,
    build_input_sequence,
    collate,
    embed,
    encode,
)

from conftest import make_record, make_vocab
from oracles import max_relative_error


@pytest.fixture
def big_vocab():
    return make_vocab(10, 9, 5)


def _encoder(vocab, seed=0, **kw):
    torch.manual_seed(seed)
    cfg = EncoderConfig(**{"n_layers": 2, "n_heads": 2, "embed_dim": 16, "dropout": 0.1, **kw})
    return PatientEncoder(vocab, cfg).eval()


class TestInputSequence:
    def test_layout(self, big_vocab):
        seq = build_input_sequence(([5, 2], [7]), big_vocab, EncoderConfig())
        d, p = 2, 2 + 10
        assert seq.token_ids == [CLS, d + 5, d + 2, SEP, p + 7]
        assert seq.segment_ids == [0, 0, 0, 1, 1]
        assert seq.relevance_ids == [0, 0, 1, 0, 0]
        assert seq.attention_mask == [1] * 5

    def test_no_procedures(self, big_vocab):
        seq = build_input_sequence(([1, 3], []), big_vocab, EncoderConfig())
        assert seq.token_ids[-1] == SEP and len(seq) == 4

    def test_truncation_keeps_priority_prefix(self, big_vocab):
        cfg = EncoderConfig(max_disease_len=4)
        seq = build_input_sequence((list(range(7)), []), big_vocab, cfg)
        assert seq.token_ids[1:-1] == [2 + i for i in range(4)]

    def test_no_truncation_raises(self, big_vocab):
        with pytest.raises(DataError):
            build_input_sequence((list(range(5)), []), big_vocab, EncoderConfig(max_disease_len=4, truncate=False))

    def test_empty_diseases(self, big_vocab):
        with pytest.raises(DataError):
            build_input_sequence(([], [1]), big_vocab, EncoderConfig())

    def test_padding_mask(self, big_vocab):
        b = collate([build_input_sequence(([1], []), big_vocab, EncoderConfig())], pad_to=6)
        assert b.attention_mask.tolist() == [[1, 1, 1, 0, 0, 0]]

    def test_bad_head_split(self):
        with pytest.raises(ValueError):
            EncoderConfig(embed_dim=10, n_heads=3)


class TestEmbedding:
    def _seq(self, vocab):
        return build_input_sequence(([4, 1, 7], [2, 0]), vocab, EncoderConfig())

    def test_zero_tables(self, big_vocab):
        enc = _encoder(big_vocab)
        with torch.no_grad():
            for p in enc.embedding.parameters():
                p.zero_()
        assert not embed(self._seq(big_vocab), enc).any()

    def test_one_hot_tokens(self, big_vocab):
        enc = _encoder(big_vocab, embed_dim=32)
        n_tok = enc.embedding.token_table.shape[0]
        with torch.no_grad():
            for p in enc.embedding.parameters():
                p.zero_()
            enc.embedding.token_table.copy_(torch.eye(n_tok, 32))
        seq = self._seq(big_vocab)
        out = embed(seq, enc)
        expected = torch.eye(n_tok, 32)[seq.token_ids]
        assert torch.equal(out, expected)

    def test_hand_summed_rows(self, big_vocab):
        enc = _encoder(big_vocab, seed=4)
        e = enc.embedding
        seq = self._seq(big_vocab)
        out = embed(seq, enc)
        for t, (tok, seg, rel) in enumerate(zip(seq.token_ids, seq.segment_ids, seq.relevance_ids)):
            rel_row = e.relevance_table_d[rel] if seg == 0 else e.relevance_table_p[rel]
            assert torch.equal(out[t], e.token_table[tok] + e.segment_table[seg] + rel_row)

    def test_padded_rows_zero(self, big_vocab):
        enc = _encoder(big_vocab)
        out = embed(collate([self._seq(big_vocab)], pad_to=9), enc)
        assert not out[0, 7:].any()

    def test_linear_in_each_table(self, big_vocab):
        enc = _encoder(big_vocab, seed=1)
        seq = self._seq(big_vocab)
        base = embed(seq, enc).detach().clone()
        with torch.no_grad():
            enc.embedding.segment_table.mul_(3.0)
            tripled = embed(seq, enc)
            enc.embedding.segment_table.div_(3.0)
        seg_part = enc.embedding.segment_table[seq.segment_ids]
        torch.testing.assert_close(tripled - base, 2 * seg_part, rtol=0, atol=1e-6)

    def test_out_of_range(self, big_vocab):
        enc = _encoder(big_vocab)
        b = collate([self._seq(big_vocab)])
        b.token_ids[0, 1] = 10_000
        with pytest.raises(IndexError):
            enc(b)

    def test_order_changes_embedding_rows(self, big_vocab):
        enc = _encoder(big_vocab, seed=2)
        a = embed(build_input_sequence(([4, 1, 7], []), big_vocab, enc.config), enc)
        b = embed(build_input_sequence(([1, 4, 7], []), big_vocab, enc.config), enc)
        assert not torch.equal(a[1], b[2]) and not torch.equal(a[2], b[1])
        assert torch.equal(a[3], b[3])


class TestEncode:
    def test_shape(self, big_vocab):
        enc = _encoder(big_vocab)
        r = encode(build_input_sequence(([1], [2]), big_vocab, enc.config), enc)
        assert r.shape == (16,)

    def test_deterministic(self, big_vocab):
        enc = _encoder(big_vocab)
        enc.train()
        seq = build_input_sequence(([1, 5], [2]), big_vocab, enc.config)
        assert torch.equal(encode(seq, enc), encode(seq, enc))
        assert enc.training

    def test_swap_changes_representation(self, big_vocab):
        enc = _encoder(big_vocab, seed=6)
        ra = encode(build_input_sequence(([3, 8], [1]), big_vocab, enc.config), enc)
        rb = encode(build_input_sequence(([8, 3], [1]), big_vocab, enc.config), enc)
        assert (ra - rb).norm() > 0

    @given(st.integers(0, 12), st.integers(0, 10_000))
    def test_padding_invariance(self, extra, seed):
        vocab = make_vocab(10, 9, 5)
        enc = _encoder(vocab, seed=seed % 7)
        rng = np.random.default_rng(seed)
        d = rng.choice(10, size=rng.integers(1, 6), replace=False).tolist()
        p = rng.choice(9, size=rng.integers(0, 4), replace=False).tolist()
        seq = build_input_sequence((d, p), vocab, enc.config)
        with torch.no_grad():
            r0 = enc(collate([seq]))[0]
            r1 = enc(collate([seq], pad_to=len(seq) + extra))[0]
        assert (r1 - r0).norm() <= 1e-5 * r0.norm()

    def test_batch_matches_single(self, big_vocab):
        enc = _encoder(big_vocab)
        seqs = [build_input_sequence(r, big_vocab, enc.config) for r in [([1], []), ([2, 3, 4, 5], [0, 1, 2])]]
        with torch.no_grad():
            batched = enc(collate(seqs))
            for i, s in enumerate(seqs):
                torch.testing.assert_close(batched[i], enc(collate([s]))[0], rtol=1e-5, atol=1e-6)


def test_encoder_gradients_match_finite_differences():
    vocab = make_vocab(6, 4, 5)
    torch.manual_seed(0)
    cfg = EncoderConfig(n_layers=1, n_heads=1, embed_dim=8, max_disease_len=4, max_procedure_len=3, dropout=0.0)
    enc = PatientEncoder(vocab, cfg).double().eval()
    batch = collate([build_input_sequence(r, vocab, cfg) for r in [([0, 3, 5], [1, 2]), ([2], [])]])
    w = torch.randn(2, 8, dtype=torch.float64)
    err = max_relative_error(lambda: (enc(batch) * w).sum(), list(enc.parameters()))
    assert err < 1e-4
