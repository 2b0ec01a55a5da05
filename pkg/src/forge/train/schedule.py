"""Learning-rate schedules: linear warmup into cosine decay or a constant."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleSpec:
    """Warmup is linear from peak/warmup_steps up to peak; after warmup the
    shape is either cosine decay to min_lr at total_steps or flat at peak."""

    peak_lr: float
    min_lr: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1
    shape: str = "cosine"

    def __post_init__(self):
        if not (0.0 <= self.min_lr <= self.peak_lr):
            raise ValueError(f"require 0 <= min_lr <= peak_lr, got {self.min_lr} > {self.peak_lr}")
        if self.warmup_steps > self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) exceeds total_steps ({self.total_steps})"
            )
        if self.shape not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")


def lr_at(spec: ScheduleSpec, step: int) -> float:
    """Learning rate for a step in [0, total_steps].

    Warmup uses (step+1)/warmup so step 0 already moves; the peak is reached
    exactly at step == warmup_steps and the cosine lands on min_lr at
    step == total_steps.
    """
    if not (0 <= step <= spec.total_steps):
        raise ValueError(f"step {step} outside [0, {spec.total_steps}]")
    if step < spec.warmup_steps:
        return spec.peak_lr * (step + 1) / spec.warmup_steps
    if spec.shape == "constant":
        return spec.peak_lr
    span = spec.total_steps - spec.warmup_steps
    if span == 0:
        return spec.peak_lr
    progress = (step - spec.warmup_steps) / span
    return spec.min_lr + 0.5 * (spec.peak_lr - spec.min_lr) * (1.0 + math.cos(math.pi * progress))


# documented stage defaults; each is just a ScheduleSpec template
PRETRAIN_SCHEDULE = dict(peak_lr=2.5e-5, min_lr=9e-6, warmup_steps=50, shape="cosine")
SFT_SCHEDULE = dict(peak_lr=5e-6, min_lr=5e-6, warmup_steps=100, shape="constant")
DPO_SCHEDULE = dict(peak_lr=5e-7, min_lr=5e-7, warmup_steps=50, shape="constant")
RL_SCHEDULE = dict(peak_lr=1e-6, min_lr=1e-6, warmup_steps=0, shape="constant")
