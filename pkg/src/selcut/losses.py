"""The three main-module objectives and the discriminator objective.

All functions accept tensors (differentiable) or array-likes and return a
0-d tensor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import torch

DICE_EPS = 1e-7


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def loss_fence(d_scores_fake) -> torch.Tensor:
    """Mean |D(I_fc) - 1|: how far the fence cut is from being accepted."""
    s = _t(d_scores_fake).reshape(-1)
    if s.numel() == 0:
        raise ValueError("loss_fence needs at least one score")
    return (s - 1).abs().mean()


def loss_disjoincy(fence, wild) -> torch.Tensor:
    """Soft positive Dice between the two cuts; 0 when their supports are disjoint."""
    a, b = _t(fence), _t(wild)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return 2 * (a * b).sum() / (a.sum() + b.sum() + DICE_EPS)


def loss_reconstruction(inputs, recon) -> torch.Tensor:
    """Squared error averaged per pixel over the batch."""
    x, r = _t(inputs), _t(recon)
    if x.shape != r.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(r.shape)}")
    return ((x - r) ** 2).mean()


def loss_discriminator(d_fake, d_real) -> torch.Tensor:
    """MAE against -1 for fence-cut images and +1 for reference images."""
    f, r = _t(d_fake).reshape(-1), _t(d_real).reshape(-1)
    if f.numel() == 0 or r.numel() == 0:
        raise ValueError("loss_discriminator needs non-empty fake and real scores")
    return ((f + 1).abs().sum() + (r - 1).abs().sum()) / (f.numel() + r.numel())


@dataclass
class LossReport:
    """Per-epoch losses. Fields a phase does not compute are None."""

    loss_fence: float | None
    loss_disjoincy: float | None
    loss_reconstruction: float | None
    loss_discriminator: float | None
    n: int
    m: int
    stage: int = 0
    cycle: int = 0
    phase: str = ""
    epoch: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))

    def main_total(self, weights=(1.0, 1.0, 1.0)) -> float:
        parts = (self.loss_fence, self.loss_disjoincy, self.loss_reconstruction)
        return sum(w * p for w, p in zip(weights, parts))
