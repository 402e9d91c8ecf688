"""Optimizer settings shared by both training stages."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_steps: int = 0
    grad_clip: float | None = 1.0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def make_optimizer(params, cfg: OptimConfig, total_steps: int):
    """AdamW with linear warmup followed by cosine decay to zero."""
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    total_steps = max(total_steps, 1)
    warm = cfg.warmup_steps

    def factor(step):
        if warm and step < warm:
            return (step + 1) / warm
        progress = (step - warm) / max(total_steps - warm, 1)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, factor)
    return opt, sched


def check_finite(loss, stage: str, epoch: int, step: int):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, step {step}")
