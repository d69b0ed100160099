"""End-to-end runs of RAREMed and the baselines on a split dataset."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .baselines import ips_weights, rebalancing_sampler, train_lr
from .ehr_data import DdiGraph, EhrDataset, assign_popularity_groups, code_frequencies
from .encoder import EncoderConfig, PatientEncoder
from .finetune import FinetuneResult, LossWeights, finetune, predict_probs
from .metrics import EvalReport, evaluate, make_predictions
from .pretrain import PretrainResult, pretrain
from .training import Schedule, derive_seed

METHODS = ("raremed", "raremed-no-pretrain", "lr", "rebalancing")


def new_encoder(dataset: EhrDataset, config: EncoderConfig, seed: int) -> PatientEncoder:
    torch.manual_seed(derive_seed(seed, "init"))
    return PatientEncoder(dataset.vocab, config)


def test_groups(dataset: EhrDataset, split: str = "test", n_groups: int = 5) -> dict[str, int]:
    """Popularity groups of `split` keyed on training-split frequencies."""
    return assign_popularity_groups(dataset.split(split), code_frequencies(dataset, "train"), n_groups)


@dataclass
class MethodRun:
    method: str
    report: EvalReport
    pretrain: PretrainResult | None = None
    finetune: FinetuneResult | None = None
    model: object = None
    logs: dict = field(default_factory=dict)


def run_method(
    method: str,
    dataset: EhrDataset,
    ddi: DdiGraph,
    config: EncoderConfig,
    schedule: Schedule,
    weights: LossWeights,
    threshold: float = 0.5,
    split: str = "test",
    n_groups: int = 5,
) -> MethodRun:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    vocab = dataset.vocab
    train, val, test = dataset.split("train"), dataset.split("val"), dataset.split(split)
    groups = test_groups(dataset, split, n_groups)

    if method == "lr":
        res = train_lr(train, vocab, schedule, val=val, threshold=threshold)
        probs = res.model.predict_probs(test, vocab)
        report = evaluate(make_predictions([r.patient_id for r in test], probs, threshold), test, ddi, groups)
        return MethodRun(method, report, model=res.model, logs={"finetune": res.curve})

    encoder = new_encoder(dataset, config, schedule.seed)
    pre = None
    if method == "raremed":
        pre = pretrain(train, encoder, vocab, schedule, val=val)
        encoder = pre.encoder
    sampler = None
    if method == "rebalancing":
        w = ips_weights(train, code_frequencies(dataset, "train"))
        sampler = rebalancing_sampler(train, w, schedule.seed)
    ft = finetune(encoder, train, val, ddi, vocab, schedule, weights, threshold, sampler=sampler)
    probs = predict_probs(ft.model, test, vocab)
    report = evaluate(make_predictions([r.patient_id for r in test], probs, threshold), test, ddi, groups)
    logs = {"finetune": ft.curve}
    if pre is not None:
        logs["pretrain"] = pre.log
    return MethodRun(method, report, pre, ft, ft.model, logs)
