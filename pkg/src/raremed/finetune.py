"""Medication prediction head, fine-tuning objectives, training loop and threshold inference."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .ehr_data import CodeVocabulary, DdiGraph, PatientRecord
from .encoder import InputSequence, PatientEncoder, build_input_sequence, collate, init_weights
from .training import EPS, Schedule, check_finite, clip_probs, derive_seed, make_optimizer, step, summed_bce

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    alpha: float = 0.03
    beta: float = 0.7

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def desk(cls) -> "LossWeights":
        """Small-cohort operating point: at beta=0.7 the summed pair penalty swamps the BCE term."""
        return cls(alpha=0.03, beta=0.05)

    def to_json(self) -> dict:
        return asdict(self)


class RecommendationModel(nn.Module):
    """Patient encoder followed by a sigmoid multi-label medication layer."""

    def __init__(self, encoder: PatientEncoder, n_medications: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.config.embed_dim, n_medications)
        init_weights(self.head)

    @property
    def n_medications(self) -> int:
        return self.head.out_features

    def forward(self, batch) -> torch.Tensor:
        return torch.sigmoid(self.head(self.encoder(batch)))


@torch.no_grad()
def predict_probs(
    model: RecommendationModel,
    records: PatientRecord | Sequence[PatientRecord],
    vocab: CodeVocabulary,
    batch_size: int = 256,
) -> np.ndarray:
    """Inference-mode medication probabilities: (|M|,) for one record, (N, |M|) for a list."""
    single = isinstance(records, PatientRecord)
    recs = [records] if single else list(records)
    was = model.training
    model.eval()
    out = []
    for i in range(0, len(recs), batch_size):
        chunk = recs[i : i + batch_size]
        out.append(model(collate([build_input_sequence(r, vocab, model.encoder.config) for r in chunk])).double().numpy())
    model.train(was)
    probs = np.concatenate(out) if out else np.zeros((0, model.n_medications))
    return probs[0] if single else probs


def recommend(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Medication ids with probability strictly above the threshold."""
    return np.flatnonzero(np.asarray(probs) > threshold)


def bce_loss(probs: torch.Tensor, meds: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Summed BCE over medications; mean over records for 2-D input."""
    return summed_bce(probs, torch.as_tensor(meds), eps).mean()


def margin_loss(probs: torch.Tensor, meds: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Sum over (positive i, negative j) of max(0, 1 - (o_i - o_j)), divided by |M|."""
    o = clip_probs(probs, eps)
    m = torch.as_tensor(meds).to(o.dtype)
    if o.dim() == 1:
        o, m = o.unsqueeze(0), m.unsqueeze(0)
    hinge = torch.relu(1.0 - (o.unsqueeze(-1) - o.unsqueeze(-2)))  # [b, i, j]
    pairs = m.unsqueeze(-1) * (1 - m).unsqueeze(-2)
    return ((hinge * pairs).sum((-1, -2)) / o.shape[-1]).mean()


def ddi_loss(probs: torch.Tensor, adjacency: torch.Tensor | np.ndarray | DdiGraph) -> torch.Tensor:
    """sum_ij A_ij o_i o_j over ordered pairs; mean over records."""
    if isinstance(adjacency, DdiGraph):
        adjacency = adjacency.adjacency
    a = torch.as_tensor(adjacency).to(probs.dtype)
    o = probs.unsqueeze(0) if probs.dim() == 1 else probs
    return torch.einsum("bi,ij,bj->b", o, a, o).mean()


def combined_loss(
    probs: torch.Tensor,
    meds: torch.Tensor,
    adjacency: torch.Tensor | np.ndarray | DdiGraph,
    weights: LossWeights,
) -> torch.Tensor:
    """(1 - beta) * ((1 - alpha) * bce + alpha * margin) + beta * ddi."""
    a, b = weights.alpha, weights.beta
    total = probs.new_zeros(())
    if b < 1.0:
        acc = (1 - a) * bce_loss(probs, meds)
        if a > 0.0:
            acc = acc + a * margin_loss(probs, meds)
        total = total + (1 - b) * acc
    if b > 0.0:
        total = total + b * ddi_loss(probs, adjacency)
    return total


@torch.no_grad()
def mean_jaccard(model: RecommendationModel, records: Sequence[PatientRecord], vocab: CodeVocabulary, threshold: float = 0.5) -> float:
    from .metrics import jaccard

    probs = predict_probs(model, records, vocab)
    pred = (probs > threshold).astype(np.int8)
    return float(np.mean([jaccard(r.med_vector, p) for r, p in zip(records, pred)]))


@dataclass
class FinetuneResult:
    model: RecommendationModel
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_jaccard: float = float("nan")


Sampler = Callable[[int], Sequence[int]]


def finetune(
    encoder: PatientEncoder,
    train: Sequence[PatientRecord],
    val: Sequence[PatientRecord],
    ddi: DdiGraph,
    vocab: CodeVocabulary,
    schedule: Schedule,
    weights: LossWeights,
    threshold: float = 0.5,
    sampler: Sampler | None = None,
) -> FinetuneResult:
    """Fresh medication head on top of `encoder`; the whole model is optimized.

    `sampler(epoch)` may supply the record indices visited in an epoch (used by the
    rebalancing baseline); by default every record is visited once in shuffled order.
    The returned model is the one with the best validation Jaccard.
    """
    model = RecommendationModel(encoder, vocab.n_medications)
    train = list(train)
    seqs: list[InputSequence] = [build_input_sequence(r, vocab, encoder.config) for r in train]
    targets = torch.as_tensor(np.stack([r.med_vector for r in train]))
    adj = torch.as_tensor(ddi.adjacency, dtype=torch.float32)

    best_state = copy.deepcopy(model.state_dict())
    best_score = mean_jaccard(model, val, vocab, threshold) if val else float("nan")
    best_epoch = 0
    curve = [{"epoch": 0, "train_loss": None, "val_jaccard": best_score}]
    if schedule.finetune_epochs <= 0:
        model.eval()
        return FinetuneResult(model, curve, 0, best_score)

    torch.manual_seed(derive_seed(schedule.seed, "dropout/finetune"))
    order_rng = np.random.default_rng(derive_seed(schedule.seed, "shuffle/finetune"))
    opt = make_optimizer(model.parameters(), schedule)
    bs = schedule.batch_size
    for epoch in range(1, schedule.finetune_epochs + 1):
        model.train()
        order = np.asarray(sampler(epoch)) if sampler is not None else order_rng.permutation(len(train))
        total = 0.0
        for i in range(0, len(order), bs):
            idx = order[i : i + bs]
            probs = model(collate([seqs[j] for j in idx]))
            loss = combined_loss(probs, targets[idx], adj.to(probs.dtype), weights)
            check_finite(loss, f"fine-tune epoch {epoch}")
            step(opt, loss, schedule)
            total += float(loss.detach()) * len(idx)
        score = mean_jaccard(model, val, vocab, threshold) if val else float("nan")
        curve.append({"epoch": epoch, "train_loss": total / len(order), "val_jaccard": score})
        logger.info("finetune epoch %d loss %.4f val jaccard %.4f", epoch, total / len(order), score)
        if not val or score > best_score or np.isnan(best_score):
            best_score, best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return FinetuneResult(model, curve, best_epoch, best_score)
