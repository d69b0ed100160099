"""EHR records, vocabulary, DDI graph, ingestion, splitting and popularity grouping."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass
class CodeVocabulary:
    diseases: list[str]
    procedures: list[str]
    medications: list[str]

    def __post_init__(self) -> None:
        for name in ("diseases", "procedures", "medications"):
            codes = getattr(self, name)
            if len(set(codes)) != len(codes):
                dupes = [c for c, n in Counter(codes).items() if n > 1]
                raise DataError(f"duplicate {name} codes in vocabulary: {dupes[:5]}")
        self.disease_index = {c: i for i, c in enumerate(self.diseases)}
        self.procedure_index = {c: i for i, c in enumerate(self.procedures)}
        self.medication_index = {c: i for i, c in enumerate(self.medications)}

    @property
    def n_diseases(self) -> int:
        return len(self.diseases)

    @property
    def n_procedures(self) -> int:
        return len(self.procedures)

    @property
    def n_medications(self) -> int:
        return len(self.medications)

    def to_json(self) -> dict:
        return {
            "diseases": list(self.diseases),
            "procedures": list(self.procedures),
            "medications": list(self.medications),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CodeVocabulary":
        try:
            return cls(list(obj["diseases"]), list(obj["procedures"]), list(obj["medications"]))
        except KeyError as exc:
            raise DataError(f"vocabulary missing key {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "CodeVocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class PatientRecord:
    """One visit: priority-ordered disease/procedure ids and a multi-hot medication vector."""

    patient_id: str
    disease_seq: list[int]
    procedure_seq: list[int]
    med_vector: np.ndarray

    def __post_init__(self) -> None:
        self.disease_seq = [int(d) for d in self.disease_seq]
        self.procedure_seq = [int(p) for p in self.procedure_seq]
        self.med_vector = np.asarray(self.med_vector, dtype=np.int8)
        if not self.disease_seq:
            raise DataError(f"record {self.patient_id!r} has an empty disease sequence")
        if len(set(self.disease_seq)) != len(self.disease_seq):
            raise DataError(f"record {self.patient_id!r} has duplicate disease codes")
        if len(set(self.procedure_seq)) != len(self.procedure_seq):
            raise DataError(f"record {self.patient_id!r} has duplicate procedure codes")

    @property
    def med_set(self) -> set[int]:
        return set(np.flatnonzero(self.med_vector).tolist())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.disease_seq == other.disease_seq
            and self.procedure_seq == other.procedure_seq
            and np.array_equal(self.med_vector, other.med_vector)
        )


@dataclass
class DdiGraph:
    adjacency: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.adjacency, dtype=np.int8)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError(f"DDI adjacency must be square, got shape {a.shape}")
        if not np.array_equal(a, a.T):
            raise DataError("DDI adjacency must be symmetric")
        if np.any(np.diag(a)):
            raise DataError("DDI adjacency must have a zero diagonal")
        if not np.all((a == 0) | (a == 1)):
            raise DataError("DDI adjacency must be binary")
        self.adjacency = a

    @property
    def n_medications(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def empty(cls, n_medications: int) -> "DdiGraph":
        return cls(np.zeros((n_medications, n_medications), dtype=np.int8))

    def edges(self) -> list[tuple[int, int]]:
        us, vs = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(us.tolist(), vs.tolist()))

    def save(self, path: str | Path, vocab: CodeVocabulary) -> None:
        lines = [f"{vocab.medications[u]}\t{vocab.medications[v]}" for u, v in self.edges()]
        Path(path).write_text("".join(line + "\n" for line in lines))


@dataclass
class EhrDataset:
    records: list[PatientRecord]
    vocab: CodeVocabulary
    split_tags: list[str] | None = None
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = [c for c, n in Counter(ids).items() if n > 1]
            raise DataError(f"duplicate patient ids: {dupes[:5]}")
        for rec in self.records:
            _check_record(rec, self.vocab)
        if self.split_tags is not None:
            if len(self.split_tags) != len(self.records):
                raise DataError("split_tags length does not match records")
            bad = set(self.split_tags) - set(SPLITS)
            if bad:
                raise DataError(f"unknown split tags {sorted(bad)}")
        self._index = {pid: i for i, pid in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self, patient_id: str) -> PatientRecord:
        return self.records[self._index[patient_id]]

    def split(self, name: str | Iterable[str]) -> list[PatientRecord]:
        """Records whose split tag is `name` (or any of several names)."""
        if self.split_tags is None:
            raise DataError("dataset has not been split")
        names = {name} if isinstance(name, str) else set(name)
        return [r for r, t in zip(self.records, self.split_tags) if t in names]

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(record_to_json(rec, self.vocab)) + "\n")


def _check_record(rec: PatientRecord, vocab: CodeVocabulary) -> None:
    if rec.med_vector.shape != (vocab.n_medications,):
        raise DataError(
            f"record {rec.patient_id!r}: med_vector length {rec.med_vector.size} != {vocab.n_medications}"
        )
    if any(not 0 <= d < vocab.n_diseases for d in rec.disease_seq):
        raise DataError(f"record {rec.patient_id!r}: disease id out of range")
    if any(not 0 <= p < vocab.n_procedures for p in rec.procedure_seq):
        raise DataError(f"record {rec.patient_id!r}: procedure id out of range")


def record_to_json(rec: PatientRecord, vocab: CodeVocabulary) -> dict:
    return {
        "patient_id": rec.patient_id,
        "diseases": [vocab.diseases[d] for d in rec.disease_seq],
        "procedures": [vocab.procedures[p] for p in rec.procedure_seq],
        "medications": [vocab.medications[m] for m in sorted(rec.med_set)],
    }


def _lookup(index: dict[str, int], codes, kind: str, lineno: int) -> list[int]:
    if not isinstance(codes, list):
        raise DataError(f"line {lineno}: {kind} must be a list")
    out = []
    for code in codes:
        try:
            out.append(index[code])
        except (KeyError, TypeError):
            raise DataError(f"line {lineno}: unknown {kind[:-1]} code {code!r}") from None
    return out


def load_dataset(path: str | Path, vocab_path: str | Path) -> EhrDataset:
    """Read a JSON-lines record file and validate every code against the vocabulary."""
    vocab = CodeVocabulary.load(vocab_path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            for key in ("patient_id", "diseases", "procedures", "medications"):
                if key not in obj:
                    raise DataError(f"line {lineno}: missing field {key!r}")
            diseases = _lookup(vocab.disease_index, obj["diseases"], "diseases", lineno)
            if not diseases:
                raise DataError(f"line {lineno}: empty disease sequence")
            procedures = _lookup(vocab.procedure_index, obj["procedures"], "procedures", lineno)
            meds = _lookup(vocab.medication_index, obj["medications"], "medications", lineno)
            med_vector = np.zeros(vocab.n_medications, dtype=np.int8)
            med_vector[meds] = 1
            try:
                records.append(PatientRecord(str(obj["patient_id"]), diseases, procedures, med_vector))
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    return EhrDataset(records, vocab)


def load_ddi_graph(path: str | Path, vocab: CodeVocabulary) -> DdiGraph:
    """Read a tab-separated medication pair list into a symmetric, zero-diagonal adjacency."""
    n = vocab.n_medications
    adj = np.zeros((n, n), dtype=np.int8)
    skipped = self_loops = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                logger.warning("DDI line %d: expected two tab-separated codes", lineno)
                skipped += 1
                continue
            a, b = (s.strip() for s in parts)
            if a not in vocab.medication_index or b not in vocab.medication_index:
                skipped += 1
                continue
            u, v = vocab.medication_index[a], vocab.medication_index[b]
            if u == v:
                self_loops += 1
                continue
            adj[u, v] = adj[v, u] = 1
    if skipped:
        logger.warning("skipped %d DDI pairs naming unknown medications", skipped)
    if self_loops:
        logger.warning("ignored %d self-interaction DDI pairs", self_loops)
    return DdiGraph(adj)


def split_dataset(dataset: EhrDataset, seed: int) -> EhrDataset:
    """Random 4:1:1 train/val/test split. Train gets floor(4N/6), val floor(N/6), test the rest."""
    n = len(dataset)
    if n < 6:
        raise DataError(f"need at least 6 records to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train, n_val = (4 * n) // 6, n // 6
    tags = ["test"] * n
    for rank, i in enumerate(perm):
        if rank < n_train:
            tags[i] = "train"
        elif rank < n_train + n_val:
            tags[i] = "val"
    return EhrDataset(dataset.records, dataset.vocab, tags)


def _select(dataset: EhrDataset, split: str | Sequence[str] | None) -> list[PatientRecord]:
    if split is None:
        return list(dataset.records)
    return dataset.split(split)


def code_frequencies(dataset: EhrDataset, split: str | Sequence[str] | None = "train") -> dict[int, int]:
    """Number of records in `split` containing each disease id (every id present, 0 if unseen)."""
    records = _select(dataset, split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    counts = Counter(d for rec in records for d in rec.disease_seq)
    return {d: counts.get(d, 0) for d in range(dataset.vocab.n_diseases)}


def medication_frequencies(dataset: EhrDataset, split: str | Sequence[str] | None = "train") -> np.ndarray:
    records = _select(dataset, split)
    return np.sum([r.med_vector for r in records], axis=0).astype(np.int64)


def rarest_frequency(record: PatientRecord, freqs: dict[int, int]) -> int:
    return min(freqs[d] for d in record.disease_seq)


def assign_popularity_groups(
    records: EhrDataset | Sequence[PatientRecord], freqs: dict[int, int], n_groups: int = 5
) -> dict[str, int]:
    """Equal-size groups 1..n_groups by rarest-disease frequency, group 1 most common.

    Ties are broken by patient_id; remainder records go to the lowest-index groups.
    """
    records = list(records)
    if n_groups < 1 or n_groups > len(records):
        raise DataError(f"cannot form {n_groups} groups from {len(records)} patients")
    keyed = sorted(records, key=lambda r: (-rarest_frequency(r, freqs), r.patient_id))
    base, extra = divmod(len(keyed), n_groups)
    groups: dict[str, int] = {}
    pos = 0
    for g in range(n_groups):
        size = base + (1 if g < extra else 0)
        for rec in keyed[pos : pos + size]:
            groups[rec.patient_id] = g + 1
        pos += size
    return groups


@dataclass
class GroupProfile:
    group: int
    lower: float
    upper: float
    n_patients: int
    mean_diseases: float | None
    mean_procedures: float | None
    mean_medications: float | None
    mean_med_popularity: float | None

    @property
    def empty(self) -> bool:
        return self.n_patients == 0


def profile_groups(
    records: EhrDataset | Sequence[PatientRecord],
    freqs: dict[int, int],
    n_groups: int = 13,
    med_freqs: np.ndarray | None = None,
) -> list[GroupProfile]:
    """Bucket patients into equal-width rarest-disease-frequency intervals over [0, max_freq].

    Medication popularity is the mean training frequency of a patient's prescribed drugs;
    when `med_freqs` is not given it is taken from the train split of a split dataset,
    otherwise from all records passed in.
    """
    if not freqs:
        raise DataError("empty frequency map")
    if med_freqs is None:
        if isinstance(records, EhrDataset) and records.split_tags is not None:
            med_freqs = medication_frequencies(records, "train")
        else:
            med_freqs = np.sum([r.med_vector for r in records], axis=0)
    records = list(records)
    max_freq = max(freqs.values())
    width = max_freq / n_groups if max_freq > 0 else 1.0
    buckets: list[list[PatientRecord]] = [[] for _ in range(n_groups)]
    for rec in records:
        idx = min(int(math.floor(rarest_frequency(rec, freqs) / width)), n_groups - 1)
        buckets[idx].append(rec)

    out = []
    for g, members in enumerate(buckets):
        lo, hi = g * width, (g + 1) * width
        if not members:
            out.append(GroupProfile(g + 1, lo, hi, 0, None, None, None, None))
            continue
        pops = []
        for r in members:
            meds = np.flatnonzero(r.med_vector)
            pops.append(float(np.mean(med_freqs[meds])) if meds.size else 0.0)
        out.append(
            GroupProfile(
                group=g + 1,
                lower=lo,
                upper=hi,
                n_patients=len(members),
                mean_diseases=float(np.mean([len(r.disease_seq) for r in members])),
                mean_procedures=float(np.mean([len(r.procedure_seq) for r in members])),
                mean_medications=float(np.mean([r.med_vector.sum() for r in members])),
                mean_med_popularity=float(np.mean(pops)),
            )
        )
    return out
