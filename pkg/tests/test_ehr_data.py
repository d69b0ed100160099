import json
import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from raremed.ehr_data import (
    CodeVocabulary,
    DataError,
    DdiGraph,
    EhrDataset,
    PatientRecord,
    assign_popularity_groups,
    code_frequencies,
    load_dataset,
    load_ddi_graph,
    profile_groups,
    rarest_frequency,
    split_dataset,
)
from raremed.synth_cohort import SynthConfig, generate_cohort

from conftest import dataset_of, make_record, make_vocab


def _write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


class TestVocabularyAndRecords:
    def test_duplicate_codes_rejected(self):
        with pytest.raises(DataError):
            CodeVocabulary(["D0", "D0"], [], ["M0"])

    def test_dense_ids(self, vocab):
        assert vocab.n_diseases == 4 and vocab.n_procedures == 3 and vocab.n_medications == 5

    def test_vocab_json_round_trip(self, vocab, tmp_path):
        vocab.save(tmp_path / "v.json")
        assert CodeVocabulary.load(tmp_path / "v.json") == vocab

    def test_empty_diseases_rejected(self):
        with pytest.raises(DataError):
            make_record("a", [])

    def test_duplicate_codes_in_sequence_rejected(self):
        with pytest.raises(DataError):
            make_record("a", [1, 1])
        with pytest.raises(DataError):
            make_record("a", [1], [2, 2])

    def test_empty_procedures_allowed(self):
        assert make_record("a", [0], []).procedure_seq == []

    def test_duplicate_patient_ids_rejected(self):
        with pytest.raises(DataError):
            dataset_of([make_record("a", [0]), make_record("a", [1])])


class TestDdiGraph:
    def test_asymmetric_rejected(self):
        a = np.zeros((3, 3), dtype=np.int8)
        a[0, 1] = 1
        with pytest.raises(DataError):
            DdiGraph(a)

    def test_nonzero_diagonal_rejected(self):
        with pytest.raises(DataError):
            DdiGraph(np.eye(3, dtype=np.int8))

    def test_empty_edge_list(self, vocab, tmp_path):
        (tmp_path / "ddi.tsv").write_text("")
        assert not load_ddi_graph(tmp_path / "ddi.tsv", vocab).adjacency.any()

    def test_single_pair_symmetric(self, vocab, tmp_path):
        (tmp_path / "ddi.tsv").write_text("M0\tM1\n")
        a = load_ddi_graph(tmp_path / "ddi.tsv", vocab).adjacency
        expected = np.zeros((5, 5), dtype=np.int8)
        expected[0, 1] = expected[1, 0] = 1
        np.testing.assert_array_equal(a, expected)

    def test_self_loop_dropped_with_warning(self, vocab, tmp_path, caplog):
        (tmp_path / "ddi.tsv").write_text("M0\tM0\n")
        with caplog.at_level(logging.WARNING):
            a = load_ddi_graph(tmp_path / "ddi.tsv", vocab).adjacency
        assert not a.any()
        assert "self" in caplog.text

    def test_unknown_medication_skipped(self, vocab, tmp_path, caplog):
        (tmp_path / "ddi.tsv").write_text("M0\tMX\nM1\tM2\n")
        with caplog.at_level(logging.WARNING):
            a = load_ddi_graph(tmp_path / "ddi.tsv", vocab).adjacency
        assert a.sum() == 2 and a[1, 2] == 1
        assert "unknown" in caplog.text

    def test_unreadable_file(self, vocab, tmp_path):
        with pytest.raises(OSError):
            load_ddi_graph(tmp_path / "missing.tsv", vocab)

    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), max_size=30))
    def test_loaded_graph_always_valid(self, pairs):
        import tempfile
        from pathlib import Path

        vocab = make_vocab()
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "ddi.tsv"
            p.write_text("".join(f"M{u}\tM{v}\n" for u, v in pairs))
            a = load_ddi_graph(p, vocab).adjacency
        assert (a == a.T).all() and not np.diag(a).any()
        for u, v in pairs:
            assert a[u, v] == (u != v)


class TestLoadDataset:
    def test_three_lines(self, vocab, tmp_path):
        vocab.save(tmp_path / "v.json")
        rows = [{"patient_id": f"p{i}", "diseases": ["D0"], "procedures": [], "medications": ["M1"]} for i in range(3)]
        _write_lines(tmp_path / "r.jsonl", rows)
        assert len(load_dataset(tmp_path / "r.jsonl", tmp_path / "v.json")) == 3

    def test_unknown_code_names_code_and_line(self, vocab, tmp_path):
        vocab.save(tmp_path / "v.json")
        rows = [
            {"patient_id": "a", "diseases": ["D0"], "procedures": [], "medications": ["M1"]},
            {"patient_id": "b", "diseases": ["D9"], "procedures": [], "medications": ["M1"]},
        ]
        _write_lines(tmp_path / "r.jsonl", rows)
        with pytest.raises(DataError, match=r"D9.*line 2|line 2.*D9"):
            load_dataset(tmp_path / "r.jsonl", tmp_path / "v.json")

    def test_empty_disease_sequence(self, vocab, tmp_path):
        vocab.save(tmp_path / "v.json")
        _write_lines(tmp_path / "r.jsonl", [{"patient_id": "a", "diseases": [], "procedures": [], "medications": ["M0"]}])
        with pytest.raises(DataError):
            load_dataset(tmp_path / "r.jsonl", tmp_path / "v.json")

    def test_malformed_json_line(self, vocab, tmp_path):
        vocab.save(tmp_path / "v.json")
        (tmp_path / "r.jsonl").write_text('{"patient_id": "a"\n')
        with pytest.raises(DataError, match="line 1"):
            load_dataset(tmp_path / "r.jsonl", tmp_path / "v.json")

    def test_round_trip_generated_cohort(self, tmp_path):
        ds, _, _ = generate_cohort(SynthConfig(n_patients=80, seed=11))
        ds.save(tmp_path / "r.jsonl")
        ds.vocab.save(tmp_path / "v.json")
        back = load_dataset(tmp_path / "r.jsonl", tmp_path / "v.json")
        assert back.vocab == ds.vocab
        assert len(back) == len(ds)
        for a, b in zip(ds, back):
            assert a.patient_id == b.patient_id
            assert a.disease_seq == b.disease_seq and a.procedure_seq == b.procedure_seq
            np.testing.assert_array_equal(a.med_vector, b.med_vector)


def _n_records(n):
    return dataset_of([make_record(f"p{i:04d}", [i % 4]) for i in range(n)])


class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(600, (400, 100, 100)), (601, (400, 100, 101))])
    def test_sizes(self, n, sizes):
        ds = split_dataset(_n_records(n), 0)
        assert tuple(len(ds.split(s)) for s in ("train", "val", "test")) == sizes

    def test_deterministic(self):
        assert split_dataset(_n_records(50), 7).split_tags == split_dataset(_n_records(50), 7).split_tags

    def test_too_small(self):
        with pytest.raises(DataError):
            split_dataset(_n_records(5), 0)

    @given(st.integers(6, 300), st.integers(0, 2**31 - 1))
    def test_partition(self, n, seed):
        ds = split_dataset(_n_records(n), seed)
        ids = [r.patient_id for s in ("train", "val", "test") for r in ds.split(s)]
        assert sorted(ids) == sorted(r.patient_id for r in ds)


class TestFrequencies:
    def test_counts(self):
        recs = [make_record(f"p{i}", [0, 1] if i % 2 else [0]) for i in range(10)]
        ds = EhrDataset(recs, make_vocab(), ["train"] * 10)
        f = code_frequencies(ds, "train")
        assert f == {0: 10, 1: 5, 2: 0, 3: 0}

    def test_train_only(self):
        recs = [make_record("a", [0]), make_record("b", [1])]
        ds = EhrDataset(recs, make_vocab(), ["train", "test"])
        assert code_frequencies(ds, "train")[1] == 0


class TestGrouping:
    def test_ten_patients_five_groups(self):
        recs = [make_record(f"p{i}", [i % 4]) for i in range(10)]
        sizes = Counter(assign_popularity_groups(recs, {0: 9, 1: 5, 2: 3, 3: 1}).values())
        assert all(sizes[g] == 2 for g in range(1, 6))

    def test_seven_patients_remainder(self):
        recs = [make_record(f"p{i}", [0]) for i in range(7)]
        sizes = Counter(assign_popularity_groups(recs, {0: 1, 1: 1, 2: 1, 3: 1}).values())
        assert [sizes[g] for g in range(1, 6)] == [2, 2, 1, 1, 1]

    def test_unseen_code_lands_last(self):
        recs = [make_record(f"p{i}", [0]) for i in range(9)] + [make_record("z", [0, 3])]
        groups = assign_popularity_groups(recs, {0: 10, 1: 1, 2: 1, 3: 0})
        assert groups["z"] == 5

    def test_too_many_groups(self):
        with pytest.raises(DataError):
            assign_popularity_groups([make_record("a", [0])], {0: 1, 1: 0, 2: 0, 3: 0}, 2)


class TestProfile:
    def test_single_group_is_global_mean(self, small_cohort):
        ds, _, _ = small_cohort
        freqs = code_frequencies(ds, "train")
        (g,) = profile_groups(ds, freqs, 1)
        recs = list(ds)
        assert g.n_patients == len(recs)
        assert g.mean_diseases == pytest.approx(np.mean([len(r.disease_seq) for r in recs]))
        assert g.mean_procedures == pytest.approx(np.mean([len(r.procedure_seq) for r in recs]))

    def test_identical_patients(self):
        recs = [make_record(f"p{i}", [0, 1], [2], [1, 3]) for i in range(6)]
        ds = EhrDataset(recs, make_vocab(), ["train"] * 6)
        prof = profile_groups(ds, code_frequencies(ds), 13)
        full = [p for p in prof if not p.empty]
        assert len(full) == 1 and full[0].mean_diseases == 2.0
        assert all(p.empty for p in prof if p is not full[0])

    def test_disease_count_falls_with_popularity(self):
        from scipy.stats import spearmanr

        ds, _, _ = generate_cohort(SynthConfig(seed=0))
        ds = split_dataset(ds, 0)
        prof = [p for p in profile_groups(ds, code_frequencies(ds, "train"), 13) if not p.empty]
        rho, _ = spearmanr([p.lower for p in prof], [p.mean_diseases for p in prof])
        assert rho < 0

    def test_rarest_frequency(self):
        assert rarest_frequency(make_record("a", [0, 2]), {0: 5, 1: 0, 2: 3, 3: 0}) == 3
