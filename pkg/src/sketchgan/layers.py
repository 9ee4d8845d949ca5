"""Stabilising layers for progressive training."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn


def pixel_norm(a: torch.Tensor, epsilon: float = 1e-8) -> torch.Tensor:
    """Scale each pixel's feature vector to unit root-mean-square over channels."""
    return a / torch.sqrt(a.pow(2).mean(dim=1, keepdim=True) + epsilon)


def _safe_sqrt(v: torch.Tensor) -> torch.Tensor:
    # exact 0 (and zero gradient) where v == 0
    positive = v > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, v, torch.ones_like(v))), torch.zeros_like(v))


def minibatch_stddev(batch: torch.Tensor) -> torch.Tensor:
    """Append the mean across-batch population std as one constant channel."""
    n, _, h, w = batch.shape
    if n < 2:
        raise ValueError(f"minibatch_stddev needs a batch of at least 2, got {n}")
    var = (batch - batch.mean(dim=0, keepdim=True)).pow(2).mean(dim=0)
    stat = _safe_sqrt(var).mean()
    return torch.cat([batch, stat.expand(n, 1, h, w)], dim=1)


class PixelNorm(nn.Module):
    def __init__(self, epsilon: float = 1e-8):
        super().__init__()
        self.epsilon = epsilon

    def forward(self, x):
        return pixel_norm(x, self.epsilon)


class MinibatchStdDev(nn.Module):
    def forward(self, x):
        return minibatch_stddev(x)


@dataclass
class FadeInState:
    """Where progressive training currently is.

    ``schedule`` lists ``(resolution, steps)`` stages; each stage after the
    first blends its new layers in linearly over ``fade_fraction`` of its
    steps.
    """

    current_resolution: int
    alpha: float = 1.0
    schedule: list[tuple[int, int]] = field(default_factory=list)
    fade_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @classmethod
    def fixed(cls, resolution: int, alpha: float = 1.0) -> "FadeInState":
        return cls(current_resolution=resolution, alpha=alpha)

    @property
    def total_steps(self) -> int:
        return sum(steps for _, steps in self.schedule)

    def at_step(self, step: int) -> "FadeInState":
        """State for 0-based global ``step`` (steps past the end stay on the last stage)."""
        if not self.schedule:
            return self
        start = 0
        for stage, (res, steps) in enumerate(self.schedule):
            if step < start + steps or stage == len(self.schedule) - 1:
                local = step - start
                if stage == 0:
                    alpha = 1.0
                else:
                    fade_steps = max(1, int(round(steps * self.fade_fraction)))
                    alpha = min(1.0, local / fade_steps)
                return FadeInState(res, alpha, self.schedule, self.fade_fraction)
            start += steps
        raise AssertionError("unreachable")


def validate_schedule(schedule) -> list[tuple[int, int]]:
    sched = [(int(r), int(s)) for r, s in schedule]
    if not sched:
        raise ValueError("fade schedule is empty")
    for (r0, _), (r1, _) in zip(sched, sched[1:]):
        if r1 != 2 * r0:
            raise ValueError(f"resolution must double between stages, got {r0} -> {r1}")
    if any(s <= 0 for _, s in sched):
        raise ValueError("every stage needs at least one step")
    return sched


def blend(old: torch.Tensor, new: torch.Tensor, alpha: float) -> torch.Tensor:
    # written out (not lerp) so alpha 0 / 1 reproduce old / new exactly
    return (1.0 - alpha) * old + alpha * new
