"""Per-record recommendation metrics and the group-wise evaluation report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ehr_data import DdiGraph, PatientRecord


def _binary_pair(m, m_hat) -> tuple[np.ndarray, np.ndarray]:
    m, m_hat = np.asarray(m).astype(bool), np.asarray(m_hat).astype(bool)
    if m.shape != m_hat.shape:
        raise ValueError(f"length mismatch: {m.shape} vs {m_hat.shape}")
    return m, m_hat


def jaccard(m, m_hat) -> float:
    """|m ∩ m_hat| / |m ∪ m_hat|; 1.0 when both are empty."""
    m, m_hat = _binary_pair(m, m_hat)
    union = np.count_nonzero(m | m_hat)
    if union == 0:
        return 1.0
    return np.count_nonzero(m & m_hat) / union


def precision_recall_f1(m, m_hat) -> tuple[float, float, float]:
    m, m_hat = _binary_pair(m, m_hat)
    inter = np.count_nonzero(m & m_hat)
    n_pred, n_true = np.count_nonzero(m_hat), np.count_nonzero(m)
    p = inter / n_pred if n_pred else 0.0
    r = inter / n_true if n_true else 0.0
    f1 = 2 * r * p / (r + p) if r + p > 0 else 0.0
    return p, r, f1


def prauc(probs, m) -> float:
    """Step-wise area sum_k P_k (R_k - R_{k-1}) over the descending-probability ranking.

    Ties are ranked by ascending medication index.
    """
    probs, m = np.asarray(probs, dtype=np.float64), np.asarray(m).astype(bool)
    if probs.shape != m.shape:
        raise ValueError(f"length mismatch: {probs.shape} vs {m.shape}")
    n_pos = np.count_nonzero(m)
    if n_pos == 0:
        raise ValueError("PRAUC undefined without positive labels")
    order = np.argsort(-probs, kind="stable")
    hits = np.cumsum(m[order])
    k = np.arange(1, m.size + 1)
    precision = hits / k
    recall = hits / n_pos
    return float(np.sum(precision * np.diff(recall, prepend=0.0)))


def ddi_rate(m_hat, adjacency) -> float:
    """Fraction of interacting pairs among unordered distinct pairs of the predicted set."""
    if isinstance(adjacency, DdiGraph):
        adjacency = adjacency.adjacency
    idx = np.flatnonzero(np.asarray(m_hat))
    n = idx.size
    if n < 2:
        return 0.0
    sub = np.asarray(adjacency)[np.ix_(idx, idx)]
    return float(np.triu(sub, k=1).sum()) / (n * (n - 1) / 2)


@dataclass
class Prediction:
    patient_id: str
    probs: list[float]
    recommended: list[int]

    def to_json(self) -> dict:
        return {"patient_id": self.patient_id, "probs": self.probs, "recommended": self.recommended}


def make_predictions(patient_ids: Sequence[str], probs: np.ndarray, threshold: float = 0.5) -> list[Prediction]:
    return [
        Prediction(pid, [float(x) for x in row], np.flatnonzero(row > threshold).tolist())
        for pid, row in zip(patient_ids, probs)
    ]


def save_predictions(path: str | Path, preds: Sequence[Prediction]) -> None:
    with open(path, "w") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json()) + "\n")


def load_predictions(path: str | Path) -> list[Prediction]:
    with open(path) as fh:
        return [Prediction(**json.loads(line)) for line in fh if line.strip()]


@dataclass
class EvalReport:
    jaccard: float
    prauc: float
    f1: float
    ddi: float
    med_count: float
    per_group_jaccard: dict[int, float] = field(default_factory=dict)
    sigma: float = 0.0
    n_records: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_group_jaccard"] = {str(k): v for k, v in self.per_group_jaccard.items()}
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        obj = dict(obj)
        obj["per_group_jaccard"] = {int(k): v for k, v in obj.get("per_group_jaccard", {}).items()}
        return cls(**obj)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["jaccard", "prauc", "f1", "ddi", "med_count", "per_group_jaccard", "sigma", "n_records"],
    "properties": {
        "jaccard": {"type": "number", "minimum": 0, "maximum": 1},
        "prauc": {"type": "number", "minimum": 0, "maximum": 1},
        "f1": {"type": "number", "minimum": 0, "maximum": 1},
        "ddi": {"type": "number", "minimum": 0, "maximum": 1},
        "med_count": {"type": "number", "minimum": 0},
        "per_group_jaccard": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": {"type": "number", "minimum": 0, "maximum": 1}},
            "additionalProperties": False,
        },
        "sigma": {"type": "number", "minimum": 0},
        "n_records": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}


def group_sigma(values: Sequence[float]) -> float:
    """Population standard deviation; 0 for fewer than two values."""
    values = np.asarray(list(values), dtype=np.float64)
    return float(values.std()) if values.size > 1 else 0.0


def evaluate(
    predictions: Sequence[Prediction] | Mapping[str, Prediction],
    records: Sequence[PatientRecord],
    ddi: DdiGraph | np.ndarray,
    groups: Mapping[str, int] | None = None,
) -> EvalReport:
    """Uniform mean over records of every metric, plus per-group Jaccard and its spread."""
    if not isinstance(predictions, Mapping):
        predictions = {p.patient_id: p for p in predictions}
    jac, pr, f1s, ddis, sizes = [], [], [], [], []
    by_group: dict[int, list[float]] = {}
    for rec in records:
        try:
            pred = predictions[rec.patient_id]
        except KeyError:
            raise KeyError(f"no prediction for patient {rec.patient_id!r}") from None
        m_hat = np.zeros_like(rec.med_vector)
        m_hat[pred.recommended] = 1
        j = jaccard(rec.med_vector, m_hat)
        jac.append(j)
        pr.append(prauc(pred.probs, rec.med_vector))
        f1s.append(precision_recall_f1(rec.med_vector, m_hat)[2])
        ddis.append(ddi_rate(m_hat, ddi))
        sizes.append(len(pred.recommended))
        if groups is not None:
            by_group.setdefault(groups[rec.patient_id], []).append(j)
    per_group = {g: float(np.mean(v)) for g, v in sorted(by_group.items())}
    return EvalReport(
        jaccard=float(np.mean(jac)),
        prauc=float(np.mean(pr)),
        f1=float(np.mean(f1s)),
        ddi=float(np.mean(ddis)),
        med_count=float(np.mean(sizes)),
        per_group_jaccard=per_group,
        sigma=group_sigma(per_group.values()),
        n_records=len(jac),
    )


def format_table(rows: Mapping[str, EvalReport | None], n_groups: int = 5) -> str:
    """Plain-text table: overall metrics, per-group Jaccard and sigma, one row per method."""
    gcols = [f"G{g}" for g in range(1, n_groups + 1)]
    header = ["Method", "Jaccard", "PRAUC", "F1", "DDI", "#MED", *gcols, "sigma"]
    lines = []
    for name, rep in rows.items():
        if rep is None:
            lines.append([name] + ["-"] * (len(header) - 1))
            continue
        groups = [f"{rep.per_group_jaccard[g]:.4f}" if g in rep.per_group_jaccard else "-" for g in range(1, n_groups + 1)]
        lines.append(
            [name, f"{rep.jaccard:.4f}", f"{rep.prauc:.4f}", f"{rep.f1:.4f}", f"{rep.ddi:.4f}", f"{rep.med_count:.2f}", *groups, f"{rep.sigma:.5f}"]
        )
    widths = [max(len(str(r[i])) for r in [header, *lines]) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([fmt(header), fmt(["-" * w for w in widths]), *map(fmt, lines)]) + "\n"
