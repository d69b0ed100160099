import numpy as np
import pytest
import torch

from raremed.baselines import LrModel, feature_matrix, ips_weights, multi_hot_features, rebalancing_sampler, resample_epoch, train_lr
from raremed.ehr_data import EhrDataset
from raremed.metrics import jaccard
from raremed.pretrain import sr_targets
from raremed.training import Schedule

from conftest import make_record, make_vocab


def _within_3sigma(counts, probs, n):
    expected = n * probs
    sd = np.sqrt(n * probs * (1 - probs))
    return np.all(np.abs(counts - expected) <= 3 * sd)


class TestFeatures:
    def test_single_disease(self):
        vocab = make_vocab(3, 2, 5)
        assert multi_hot_features(make_record("a", [0]), vocab).tolist() == [1, 0, 0, 0, 0]

    def test_matches_sr_targets(self, small_cohort):
        ds, _, _ = small_cohort
        for r in list(ds)[:30]:
            f = multi_hot_features(r, ds.vocab)
            assert f.sum() == len(r.disease_seq) + len(r.procedure_seq)
            np.testing.assert_array_equal(f, sr_targets(r, ds.vocab))


class TestLr:
    def test_zero_weights_give_half(self, vocab):
        model = LrModel(vocab)
        probs = model.predict_probs([make_record("a", [0, 2], [1])], vocab)
        np.testing.assert_array_equal(probs, 0.5)

    def test_zero_epochs_recommend_nothing(self, small_cohort):
        ds, _, _ = small_cohort
        res = train_lr(ds.split("train"), ds.vocab, Schedule(), epochs=0)
        probs = res.model.predict_probs(ds.split("test"), ds.vocab)
        assert not (probs > 0.5).any()

    def test_separable_toy_task(self):
        vocab = make_vocab(3, 1, 3)
        recs = [make_record(f"p{i}", [i % 3], [], [i % 3], n_m=3) for i in range(60)]
        res = train_lr(recs, vocab, Schedule(lr=5e-2), epochs=60)
        held_out = [make_record(f"q{d}", [d], [], [d], n_m=3) for d in range(3)]
        probs = res.model.predict_probs(held_out, vocab)
        for r, p in zip(held_out, probs):
            assert jaccard(r.med_vector, p > 0.5) == 1.0

    def test_shapes(self, vocab):
        m = LrModel(vocab)
        assert m.linear.weight.shape == (5, 7)
        assert feature_matrix([make_record("a", [1])], vocab).shape == (1, 7)


class TestRebalancing:
    def test_reciprocal_weights(self):
        recs = [make_record("a", [0, 1]), make_record("b", [2]), make_record("c", [3])]
        w = ips_weights(recs, {0: 9, 1: 4, 2: 4, 3: 0})
        assert w == {"a": 0.25, "b": 0.25, "c": 1.0}

    def test_monotone(self, small_cohort):
        ds, _, _ = small_cohort
        from raremed.ehr_data import code_frequencies, rarest_frequency

        freqs = code_frequencies(ds, "train")
        train = ds.split("train")
        w = ips_weights(train, freqs)
        pairs = sorted((rarest_frequency(r, freqs), w[r.patient_id]) for r in train)
        assert all(b[1] <= a[1] for a, b in zip(pairs, pairs[1:]))

    def test_uniform_draws(self):
        recs = [make_record(f"p{i}", [0]) for i in range(10)]
        w = {r.patient_id: 1.0 for r in recs}
        idx = np.concatenate([resample_epoch(recs, w, s) for s in range(10_000)])
        assert idx.size == 100_000
        assert _within_3sigma(np.bincount(idx, minlength=10), np.full(10, 0.1), idx.size)

    def test_ten_to_one(self):
        recs = [make_record("heavy", [0]), make_record("light", [1])]
        w = {"heavy": 10.0, "light": 1.0}
        idx = np.concatenate([resample_epoch(recs, w, s) for s in range(50_000)])
        assert _within_3sigma(np.bincount(idx, minlength=2), np.array([10 / 11, 1 / 11]), idx.size)

    def test_seeded(self):
        recs = [make_record(f"p{i}", [0]) for i in range(7)]
        w = {r.patient_id: i + 1.0 for i, r in enumerate(recs)}
        assert resample_epoch(recs, w, 4).tolist() == resample_epoch(recs, w, 4).tolist()
        sampler = rebalancing_sampler(recs, w, 4)
        assert sampler(1).tolist() == sampler(1).tolist()
        assert sampler(1).tolist() != sampler(2).tolist()

    def test_nonpositive_weight(self):
        recs = [make_record("a", [0]), make_record("b", [1])]
        with pytest.raises(ValueError):
            resample_epoch(recs, {"a": 1.0, "b": 0.0}, 0)
