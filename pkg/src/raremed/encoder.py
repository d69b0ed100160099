"""Unified disease/procedure input sequences and the transformer patient encoder.

Joint token ids: 0 = [CLS], 1 = [SEP], 2..|D|+1 diseases, |D|+2..|D|+|P|+1 procedures.
Position information enters only through the two relevance tables (rank within span).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .ehr_data import CodeVocabulary, DataError, PatientRecord

CLS, SEP = 0, 1
N_SPECIAL = 2


@dataclass
class EncoderConfig:
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 64
    max_disease_len: int = 40
    max_procedure_len: int = 30
    dropout: float = 0.1
    ffn_mult: int = 4
    embed_norm: bool = True
    truncate: bool = True

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim ({self.embed_dim}) must be divisible by n_heads ({self.n_heads})")

    @classmethod
    def published(cls) -> "EncoderConfig":
        return cls(n_layers=3, n_heads=4, embed_dim=512)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class InputSequence:
    token_ids: list[int]
    segment_ids: list[int]
    relevance_ids: list[int]
    attention_mask: list[int]

    def __len__(self) -> int:
        return len(self.token_ids)


def build_input_sequence(
    record: PatientRecord | tuple[Sequence[int], Sequence[int]],
    vocab: CodeVocabulary,
    config: EncoderConfig,
) -> InputSequence:
    """[CLS] + diseases + [SEP] + procedures, with segment and within-span rank ids.

    Accepts a record or a bare (disease_seq, procedure_seq) pair. Over-long spans lose
    their lowest-priority tail codes when `config.truncate` is set.
    """
    if isinstance(record, PatientRecord):
        diseases, procedures = record.disease_seq, record.procedure_seq
    else:
        diseases, procedures = record
    diseases, procedures = list(diseases), list(procedures)
    if not diseases:
        raise DataError("empty disease sequence")
    for span, limit, name in ((diseases, config.max_disease_len, "disease"), (procedures, config.max_procedure_len, "procedure")):
        if len(span) > limit and not config.truncate:
            raise DataError(f"{name} sequence length {len(span)} exceeds {limit}")
    diseases = diseases[: config.max_disease_len]
    procedures = procedures[: config.max_procedure_len]

    d_off = N_SPECIAL
    p_off = N_SPECIAL + vocab.n_diseases
    tokens = [CLS] + [d_off + d for d in diseases] + [SEP] + [p_off + p for p in procedures]
    segments = [0] * (len(diseases) + 1) + [1] * (len(procedures) + 1)
    relevance = [0] + list(range(len(diseases))) + [0] + list(range(len(procedures)))
    return InputSequence(tokens, segments, relevance, [1] * len(tokens))


@dataclass
class InputBatch:
    token_ids: torch.Tensor
    segment_ids: torch.Tensor
    relevance_ids: torch.Tensor
    attention_mask: torch.Tensor

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def collate(seqs: Sequence[InputSequence], pad_to: int | None = None) -> InputBatch:
    """Right-pad sequences to a common length; padded positions carry mask 0."""
    length = max(len(s) for s in seqs)
    if pad_to is not None:
        length = max(length, pad_to)

    def pad(rows):
        return torch.tensor([r + [0] * (length - len(r)) for r in rows], dtype=torch.long)

    return InputBatch(
        pad([s.token_ids for s in seqs]),
        pad([s.segment_ids for s in seqs]),
        pad([s.relevance_ids for s in seqs]),
        pad([s.attention_mask for s in seqs]),
    )


class PatientEmbedding(nn.Module):
    """Sum of token, segment and span-specific relevance embeddings."""

    def __init__(self, n_tokens: int, config: EncoderConfig):
        super().__init__()
        dim = config.embed_dim
        self.token_table = nn.Parameter(torch.empty(n_tokens, dim))
        self.segment_table = nn.Parameter(torch.empty(2, dim))
        self.relevance_table_d = nn.Parameter(torch.empty(config.max_disease_len, dim))
        self.relevance_table_p = nn.Parameter(torch.empty(config.max_procedure_len, dim))

    def forward(self, batch: InputBatch) -> torch.Tensor:
        tok, seg, rel, mask = batch.token_ids, batch.segment_ids, batch.relevance_ids, batch.attention_mask
        live = mask.bool()
        _check_range(tok[live], self.token_table.shape[0], "token")
        _check_range(seg[live], 2, "segment")
        _check_range(rel[live & (seg == 0)], self.relevance_table_d.shape[0], "disease relevance")
        _check_range(rel[live & (seg == 1)], self.relevance_table_p.shape[0], "procedure relevance")

        rel_d = self.relevance_table_d[rel.clamp(max=self.relevance_table_d.shape[0] - 1)]
        rel_p = self.relevance_table_p[rel.clamp(max=self.relevance_table_p.shape[0] - 1)]
        is_proc = (seg == 1).unsqueeze(-1)
        out = self.token_table[tok] + self.segment_table[seg] + torch.where(is_proc, rel_p, rel_d)
        return out * mask.unsqueeze(-1).to(out.dtype)


def _check_range(ids: torch.Tensor, size: int, what: str) -> None:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= size):
        raise IndexError(f"{what} id out of range [0, {size})")


class PatientEncoder(nn.Module):
    """Transformer encoder returning the [CLS] hidden state as the patient representation."""

    def __init__(self, vocab: CodeVocabulary, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.n_diseases = vocab.n_diseases
        self.n_procedures = vocab.n_procedures
        dim = config.embed_dim
        self.embedding = PatientEmbedding(N_SPECIAL + vocab.n_diseases + vocab.n_procedures, config)
        self.embed_norm = nn.LayerNorm(dim) if config.embed_norm else nn.Identity()
        self.dropout = nn.Dropout(config.dropout)
        layer = nn.TransformerEncoderLayer(
            d_model=dim,
            nhead=config.n_heads,
            dim_feedforward=config.ffn_mult * dim,
            dropout=config.dropout,
            activation="gelu",
            batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, config.n_layers, enable_nested_tensor=False)
        init_weights(self)

    def forward(self, batch: InputBatch) -> torch.Tensor:
        x = self.dropout(self.embed_norm(self.embedding(batch)))
        h = self.transformer(x, src_key_padding_mask=batch.attention_mask == 0)
        return h[:, 0]


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Truncated normal (std 0.02, +-2 std) for tables and dense weights; zero biases."""
    for name, p in module.named_parameters():
        if "norm" in name:
            continue
        if name.endswith("bias"):
            nn.init.zeros_(p)
        else:
            nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)


def embed(seq: InputSequence | InputBatch, encoder: PatientEncoder) -> torch.Tensor:
    batch = collate([seq]) if isinstance(seq, InputSequence) else seq
    out = encoder.embedding(batch)
    return out[0] if isinstance(seq, InputSequence) else out


@torch.no_grad()
def encode(seq: InputSequence | InputBatch, encoder: PatientEncoder) -> torch.Tensor:
    """Inference-mode patient representation; shape (dim,) for one sequence, (B, dim) for a batch."""
    was_training = encoder.training
    encoder.eval()
    try:
        batch = collate([seq]) if isinstance(seq, InputSequence) else seq
        r = encoder(batch)
    finally:
        encoder.train(was_training)
    return r[0] if isinstance(seq, InputSequence) else r


def batches_for(records: Sequence[PatientRecord], vocab: CodeVocabulary, config: EncoderConfig, batch_size: int):
    """Yield (records_chunk, InputBatch) in order."""
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        yield chunk, collate([build_input_sequence(r, vocab, config) for r in chunk])
