"""Synthetic long-tail EHR cohorts with a hidden code -> medication ground truth.

Disease ids double as popularity ranks (id 0 is the most common code). Each disease
maps to a few medications centred on the same relative rank, so rarer diseases tend
to pull in rarer drugs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ehr_data import CodeVocabulary, DdiGraph, EhrDataset, PatientRecord


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_patients: int = 2000
    n_diseases: int = 200
    n_procedures: int = 60
    n_medications: int = 40
    zipf_exponent: float = 1.5
    mean_diseases_per_patient: float = 5.0
    mean_procedures_per_patient: float = 4.5
    meds_per_disease: int = 3
    meds_per_procedure: int = 1
    noise_flip_prob: float = 0.05
    ddi_density: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_patients", "n_diseases", "n_procedures", "n_medications", "meds_per_disease"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.meds_per_procedure < 0:
            raise ConfigError("meds_per_procedure must be non-negative")
        if not self.zipf_exponent > 0:
            raise ConfigError(f"zipf_exponent must be > 0, got {self.zipf_exponent}")
        for name in ("noise_flip_prob", "ddi_density"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not 1.0 <= self.mean_diseases_per_patient <= self.n_diseases:
            raise ConfigError("mean_diseases_per_patient must lie in [1, n_diseases]")
        if not 0.0 <= self.mean_procedures_per_patient <= self.n_procedures:
            raise ConfigError("mean_procedures_per_patient must lie in [0, n_procedures]")
        if max(self.meds_per_disease, self.meds_per_procedure) > self.n_medications:
            raise ConfigError("meds_per_disease / meds_per_procedure exceed n_medications")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg


@dataclass
class GroundTruthMap:
    disease_meds: list[list[int]]
    procedure_meds: list[list[int]]
    disease_procedures: list[list[int]] = field(default_factory=list)
    disease_relevance: list[float] = field(default_factory=list)
    procedure_relevance: list[float] = field(default_factory=list)

    def clean_meds(self, diseases, procedures, n_medications: int) -> np.ndarray:
        """Noise-free medication vector: union of the code images."""
        vec = np.zeros(n_medications, dtype=np.int8)
        for d in diseases:
            vec[self.disease_meds[d]] = 1
        for p in procedures:
            vec[self.procedure_meds[p]] = 1
        return vec

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruthMap":
        return cls(**obj)


def _rank_window_choice(rng, center: float, n: int, k: int, width: float) -> list[int]:
    """k distinct ids from 0..n-1, weighted towards `center` with a Laplace kernel."""
    idx = np.arange(n)
    w = np.exp(-np.abs(idx - center) / width)
    return sorted(rng.choice(n, size=k, replace=False, p=w / w.sum()).tolist())


def _by_relevance(rng, codes: list[int], relevance: list[float]) -> list[int]:
    """Descending hidden relevance with a random tie-break."""
    ties = rng.random(len(codes))
    order = sorted(range(len(codes)), key=lambda i: (-relevance[codes[i]], ties[i]))
    return [int(codes[i]) for i in order]


def generate_cohort(config: SynthConfig) -> tuple[EhrDataset, DdiGraph, GroundTruthMap]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    D, P, M = config.n_diseases, config.n_procedures, config.n_medications

    vocab = CodeVocabulary(
        [f"D{i:04d}" for i in range(D)],
        [f"P{i:04d}" for i in range(P)],
        [f"M{i:03d}" for i in range(M)],
    )

    med_width = max(2.0, M / 10)
    disease_meds = [
        _rank_window_choice(rng, r * (M - 1) / max(D - 1, 1), M, config.meds_per_disease, med_width)
        for r in range(D)
    ]
    procedure_meds = [
        _rank_window_choice(rng, r * (M - 1) / max(P - 1, 1), M, config.meds_per_procedure, med_width)
        for r in range(P)
    ]
    disease_procedures = [sorted(rng.choice(P, size=min(2, P), replace=False).tolist()) for _ in range(D)]
    disease_relevance = rng.random(D).tolist()
    procedure_relevance = rng.random(P).tolist()
    truth = GroundTruthMap(disease_meds, procedure_meds, disease_procedures, disease_relevance, procedure_relevance)

    zipf = np.arange(1, D + 1, dtype=np.float64) ** -config.zipf_exponent
    zipf /= zipf.sum()

    records = []
    width = len(str(config.n_patients - 1))
    for j in range(config.n_patients):
        x = min(1 + rng.poisson(config.mean_diseases_per_patient - 1.0), D)
        diseases = rng.choice(D, size=x, replace=False, p=zipf).tolist()

        # each linked procedure is pulled with weight 1/popularity of its rarest pulling disease
        pull: dict[int, float] = {}
        for d in diseases:
            for p in disease_procedures[d]:
                pull[p] = max(pull.get(p, 0.0), 1.0 / zipf[d])
        pool = sorted(pull)
        y = min(rng.poisson(config.mean_procedures_per_patient), len(pool))
        if y:
            w = np.array([pull[p] for p in pool])
            procedures = rng.choice(pool, size=y, replace=False, p=w / w.sum()).tolist()
        else:
            procedures = []

        diseases = _by_relevance(rng, diseases, disease_relevance)
        procedures = _by_relevance(rng, procedures, procedure_relevance)

        clean = truth.clean_meds(diseases, procedures, M)
        flips = rng.random(M) < config.noise_flip_prob
        meds = np.where(flips, 1 - clean, clean).astype(np.int8)
        if not meds.any():
            meds = clean
        records.append(PatientRecord(f"p{j:0{width}d}", diseases, procedures, meds))

    upper = np.triu(rng.random((M, M)) < config.ddi_density, k=1)
    adj = (upper | upper.T).astype(np.int8)
    return EhrDataset(records, vocab), DdiGraph(adj), truth


@dataclass
class CohortStatistics:
    n_records: int
    n_diseases: int
    n_procedures: int
    n_medications: int
    avg_diseases: float
    max_diseases: int
    avg_procedures: float
    max_procedures: int
    avg_medications: float
    max_medications: int

    def to_json(self) -> dict:
        return asdict(self)


def cohort_statistics(dataset: EhrDataset) -> CohortStatistics:
    """Space sizes and per-record average/maximum code counts."""
    if not len(dataset):
        raise ValueError("empty dataset")
    nd = [len(r.disease_seq) for r in dataset]
    npr = [len(r.procedure_seq) for r in dataset]
    nm = [int(r.med_vector.sum()) for r in dataset]
    v = dataset.vocab
    return CohortStatistics(
        n_records=len(dataset),
        n_diseases=v.n_diseases,
        n_procedures=v.n_procedures,
        n_medications=v.n_medications,
        avg_diseases=float(np.mean(nd)),
        max_diseases=max(nd),
        avg_procedures=float(np.mean(npr)),
        max_procedures=max(npr),
        avg_medications=float(np.mean(nm)),
        max_medications=max(nm),
    )


def write_cohort(
    out_dir: str | Path, dataset: EhrDataset, ddi: DdiGraph, truth: GroundTruthMap
) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": out / "records.jsonl",
        "vocab": out / "vocab.json",
        "ddi": out / "ddi.tsv",
        "ground_truth": out / "ground_truth.json",
    }
    dataset.save(paths["records"])
    dataset.vocab.save(paths["vocab"])
    ddi.save(paths["ddi"], dataset.vocab)
    paths["ground_truth"].write_text(json.dumps(truth.to_json()))
    return paths
