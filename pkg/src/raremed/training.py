"""Schedules, seed substreams and small helpers shared by the training loops."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np
import torch

logger = logging.getLogger(__name__)

EPS = 1e-7


class TrainingError(RuntimeError):
    """Raised when training diverges (non-finite loss)."""


@dataclass
class Schedule:
    smp_epochs: int = 30
    sr_epochs: int = 30
    finetune_epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.1
    grad_clip: float | None = 1.0
    seed: int = 0

    @classmethod
    def published(cls, seed: int = 0) -> "Schedule":
        return cls(lr=1e-5, weight_decay=0.1, seed=seed)

    def to_json(self) -> dict:
        return asdict(self)


def derive_seed(root: int, stream: str) -> int:
    """Independent 32-bit seed for a named substream (data, smp, init, sampling, ...)."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(stream.encode())])
    return int(ss.generate_state(1)[0])


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)


def make_optimizer(params, schedule: Schedule) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=schedule.lr, weight_decay=schedule.weight_decay)


def step(opt: torch.optim.Optimizer, loss: torch.Tensor, schedule: Schedule) -> None:
    opt.zero_grad()
    loss.backward()
    if schedule.grad_clip:
        params = [p for g in opt.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, schedule.grad_clip)
    opt.step()


def check_finite(loss: torch.Tensor, where: str) -> None:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss ({value}) during {where}")


def clip_probs(p: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def summed_bce(probs: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Binary cross-entropy summed over the last axis, on clipped probabilities."""
    p = clip_probs(probs, eps)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).sum(-1)
