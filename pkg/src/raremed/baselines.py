"""Logistic regression over multi-hot codes, and inverse-propensity rebalanced sampling."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .ehr_data import CodeVocabulary, PatientRecord, rarest_frequency
from .training import Schedule, check_finite, derive_seed, make_optimizer, step, summed_bce

logger = logging.getLogger(__name__)


def multi_hot_features(record: PatientRecord, vocab: CodeVocabulary) -> np.ndarray:
    x = np.zeros(vocab.n_diseases + vocab.n_procedures, dtype=np.int8)
    x[record.disease_seq] = 1
    x[[vocab.n_diseases + p for p in record.procedure_seq]] = 1
    return x


def feature_matrix(records: Sequence[PatientRecord], vocab: CodeVocabulary) -> torch.Tensor:
    return torch.as_tensor(np.stack([multi_hot_features(r, vocab) for r in records]), dtype=torch.float32)


class LrModel(nn.Module):
    """|M| independent logistic regressions sharing the multi-hot input."""

    def __init__(self, vocab: CodeVocabulary):
        super().__init__()
        self.linear = nn.Linear(vocab.n_diseases + vocab.n_procedures, vocab.n_medications)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.linear(x))

    @torch.no_grad()
    def predict_probs(self, records: Sequence[PatientRecord], vocab: CodeVocabulary) -> np.ndarray:
        return self(feature_matrix(records, vocab)).double().numpy()


@dataclass
class LrResult:
    model: LrModel
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _val_jaccard(model: LrModel, x: torch.Tensor, y: np.ndarray, threshold: float) -> float:
    from .metrics import jaccard

    with torch.no_grad():
        pred = (model(x).numpy() > threshold).astype(np.int8)
    return float(np.mean([jaccard(t, p) for t, p in zip(y, pred)]))


def train_lr(
    train: Sequence[PatientRecord],
    vocab: CodeVocabulary,
    schedule: Schedule,
    val: Sequence[PatientRecord] | None = None,
    epochs: int | None = None,
    threshold: float = 0.5,
) -> LrResult:
    """Mini-batch AdamW on summed BCE; keeps the epoch with the best validation Jaccard."""
    epochs = schedule.finetune_epochs if epochs is None else epochs
    model = LrModel(vocab)
    x = feature_matrix(train, vocab)
    y = torch.as_tensor(np.stack([r.med_vector for r in train]))
    if val:
        xv, yv = feature_matrix(val, vocab), np.stack([r.med_vector for r in val])
    best_state, best_score, best_epoch = copy.deepcopy(model.state_dict()), -1.0, 0
    curve = []
    rng = np.random.default_rng(derive_seed(schedule.seed, "shuffle/lr"))
    opt = make_optimizer(model.parameters(), schedule)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for i in range(0, len(order), schedule.batch_size):
            idx = order[i : i + schedule.batch_size]
            loss = summed_bce(model(x[idx]), y[idx]).mean()
            check_finite(loss, f"LR epoch {epoch}")
            step(opt, loss, schedule)
            total += float(loss.detach()) * len(idx)
        score = _val_jaccard(model, xv, yv, threshold) if val else float("nan")
        curve.append({"epoch": epoch, "train_loss": total / len(order), "val_jaccard": score})
        if not val or score > best_score:
            best_state, best_score, best_epoch = copy.deepcopy(model.state_dict()), score, epoch
    model.load_state_dict(best_state)
    return LrResult(model, curve, best_epoch)


def ips_weights(train: Sequence[PatientRecord], freqs: Mapping[int, int]) -> dict[str, float]:
    """Patient weight = 1 / training frequency of its rarest disease (frequency floored at 1)."""
    return {r.patient_id: 1.0 / max(rarest_frequency(r, freqs), 1) for r in train}


def resample_epoch(train: Sequence[PatientRecord], weights: Mapping[str, float], seed: int) -> np.ndarray:
    """len(train) indices drawn with replacement, probability proportional to patient weight."""
    w = np.array([weights[r.patient_id] for r in train], dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("patient weights must be positive")
    return np.random.default_rng(seed).choice(len(train), size=len(train), replace=True, p=w / w.sum())


def rebalancing_sampler(train: Sequence[PatientRecord], weights: Mapping[str, float], seed: int):
    """Per-epoch sampler for `finetune(..., sampler=...)`."""
    return lambda epoch: resample_epoch(train, weights, derive_seed(seed, f"sampling/{epoch}"))
