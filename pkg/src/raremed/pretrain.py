"""Self-supervised pretraining: sequence matching prediction (SMP), then self reconstruction (SR)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .ehr_data import CodeVocabulary, DataError, PatientRecord
from .encoder import EncoderConfig, InputSequence, PatientEncoder, build_input_sequence, collate, init_weights
from .training import EPS, Schedule, check_finite, clip_probs, derive_seed, make_optimizer, step, summed_bce

logger = logging.getLogger(__name__)

DISEASE_SPAN, PROCEDURE_SPAN = 0, 1


@dataclass
class SmpBatch:
    paired: list[InputSequence]
    unpaired: list[InputSequence]
    donors: list[int]
    spans: list[int]  # 0 = disease span substituted, 1 = procedure span

    def __len__(self) -> int:
        return len(self.paired)


def make_smp_batch(
    records: Sequence[PatientRecord],
    seed: int | np.random.Generator,
    vocab: CodeVocabulary,
    config: EncoderConfig,
) -> SmpBatch:
    """One paired and one unpaired example per record.

    The unpaired example swaps either the disease or the procedure span (chosen uniformly)
    for the same span of a uniformly chosen different record.
    """
    n = len(records)
    if n < 2:
        raise DataError("SMP batches need at least two records")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    donors = rng.integers(0, n - 1, size=n)
    donors = donors + (donors >= np.arange(n))
    spans = rng.integers(0, 2, size=n)

    paired, unpaired = [], []
    for i, rec in enumerate(records):
        donor = records[donors[i]]
        paired.append(build_input_sequence(rec, vocab, config))
        if spans[i] == DISEASE_SPAN:
            pair = (donor.disease_seq, rec.procedure_seq)
        else:
            pair = (rec.disease_seq, donor.procedure_seq)
        unpaired.append(build_input_sequence(pair, vocab, config))
    return SmpBatch(paired, unpaired, donors.tolist(), spans.tolist())


def _as_tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def smp_loss(prob_paired: torch.Tensor, prob_unpaired: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """-log(y_paired) - log(1 - y_unpaired), averaged over pairs when given batches."""
    pp = clip_probs(_as_tensor(prob_paired), eps)
    pu = clip_probs(_as_tensor(prob_unpaired), eps)
    return (-torch.log(pp) - torch.log(1 - pu)).mean()


def sr_targets(record: PatientRecord, vocab: CodeVocabulary) -> np.ndarray:
    """Multi-hot over diseases then procedures (length |D| + |P|)."""
    c = np.zeros(vocab.n_diseases + vocab.n_procedures, dtype=np.int8)
    c[record.disease_seq] = 1
    c[[vocab.n_diseases + p for p in record.procedure_seq]] = 1
    return c


def sr_loss(r: torch.Tensor, c: torch.Tensor, head: nn.Linear, eps: float = EPS) -> torch.Tensor:
    """Summed BCE of sigmoid(W2 r + b2) against the code multi-hot; mean over records."""
    probs = torch.sigmoid(head(r))
    return summed_bce(probs, torch.as_tensor(c), eps).mean()


def make_smp_head(dim: int) -> nn.Linear:
    head = nn.Linear(dim, 1)
    init_weights(head)
    return head


def make_sr_head(dim: int, vocab: CodeVocabulary) -> nn.Linear:
    head = nn.Linear(dim, vocab.n_diseases + vocab.n_procedures)
    init_weights(head)
    return head


@dataclass
class PretrainResult:
    encoder: PatientEncoder
    smp_head: nn.Linear
    sr_head: nn.Linear
    log: list[dict] = field(default_factory=list)


def _smp_probs(encoder: PatientEncoder, head: nn.Linear, seqs: list[InputSequence]) -> torch.Tensor:
    return torch.sigmoid(head(encoder(collate(seqs)))).squeeze(-1)


@torch.no_grad()
def smp_accuracy(
    encoder: PatientEncoder,
    head: nn.Linear,
    records: Sequence[PatientRecord],
    vocab: CodeVocabulary,
    seed: int,
    batch_size: int = 256,
) -> float:
    """Held-out accuracy at 0.5 over paired (label 1) and unpaired (label 0) examples."""
    was = encoder.training
    encoder.eval()
    batch = make_smp_batch(records, seed, vocab, encoder.config)
    correct = 0
    for i in range(0, len(batch), batch_size):
        correct += int((_smp_probs(encoder, head, batch.paired[i : i + batch_size]) > 0.5).sum())
        correct += int((_smp_probs(encoder, head, batch.unpaired[i : i + batch_size]) <= 0.5).sum())
    encoder.train(was)
    return correct / (2 * len(batch))


@torch.no_grad()
def sr_eval_loss(
    encoder: PatientEncoder, head: nn.Linear, records: Sequence[PatientRecord], vocab: CodeVocabulary, batch_size: int = 256
) -> float:
    was = encoder.training
    encoder.eval()
    total = 0.0
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        r = encoder(collate([build_input_sequence(x, vocab, encoder.config) for x in chunk]))
        c = torch.as_tensor(np.stack([sr_targets(x, vocab) for x in chunk]))
        total += float(sr_loss(r, c, head)) * len(chunk)
    encoder.train(was)
    return total / len(records)


def pretrain(
    train: Sequence[PatientRecord],
    encoder: PatientEncoder,
    vocab: CodeVocabulary,
    schedule: Schedule,
    val: Sequence[PatientRecord] | None = None,
    smp_head: nn.Linear | None = None,
    sr_head: nn.Linear | None = None,
) -> PretrainResult:
    """SMP epochs then SR epochs; each phase trains the encoder jointly with its own head."""
    dim = encoder.config.embed_dim
    smp_head = smp_head if smp_head is not None else make_smp_head(dim)
    sr_head = sr_head if sr_head is not None else make_sr_head(dim, vocab)
    train = list(train)
    log: list[dict] = []
    torch.manual_seed(derive_seed(schedule.seed, "dropout/pretrain"))
    order_rng = np.random.default_rng(derive_seed(schedule.seed, "shuffle/pretrain"))
    bs = schedule.batch_size

    if schedule.smp_epochs > 0:
        opt = make_optimizer(list(encoder.parameters()) + list(smp_head.parameters()), schedule)
        for epoch in range(1, schedule.smp_epochs + 1):
            encoder.train()
            batch = make_smp_batch(train, derive_seed(schedule.seed, f"smp/{epoch}"), vocab, encoder.config)
            order = order_rng.permutation(len(batch))
            total = 0.0
            for i in range(0, len(order), bs):
                idx = order[i : i + bs]
                seqs = [batch.paired[j] for j in idx] + [batch.unpaired[j] for j in idx]
                probs = _smp_probs(encoder, smp_head, seqs)
                loss = smp_loss(probs[: len(idx)], probs[len(idx) :])
                check_finite(loss, f"SMP epoch {epoch}")
                step(opt, loss, schedule)
                total += float(loss.detach()) * len(idx)
            entry = {"phase": "smp", "epoch": epoch, "loss": total / len(order)}
            if val:
                entry["val_accuracy"] = smp_accuracy(encoder, smp_head, val, vocab, derive_seed(schedule.seed, "smp/val"))
            log.append(entry)
            logger.info("pretrain %s", entry)

    if schedule.sr_epochs > 0:
        seqs = [build_input_sequence(r, vocab, encoder.config) for r in train]
        targets = torch.as_tensor(np.stack([sr_targets(r, vocab) for r in train]))
        opt = make_optimizer(list(encoder.parameters()) + list(sr_head.parameters()), schedule)
        for epoch in range(1, schedule.sr_epochs + 1):
            encoder.train()
            order = order_rng.permutation(len(train))
            total = 0.0
            for i in range(0, len(order), bs):
                idx = order[i : i + bs]
                r = encoder(collate([seqs[j] for j in idx]))
                loss = sr_loss(r, targets[idx], sr_head)
                check_finite(loss, f"SR epoch {epoch}")
                step(opt, loss, schedule)
                total += float(loss.detach()) * len(idx)
            entry = {"phase": "sr", "epoch": epoch, "loss": total / len(order)}
            if val:
                entry["val_loss"] = sr_eval_loss(encoder, sr_head, val, vocab)
            log.append(entry)
            logger.info("pretrain %s", entry)

    encoder.eval()
    return PretrainResult(encoder, smp_head, sr_head, log)
