"""Pinball loss, AdamW with decoupled decay, and the warmup-cosine schedule."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import torch

FULL_PHASE_STEPS = {"A": 50_000, "B": 100_000, "C": 175_000, "D": 175_000}
FULL_PHASE_LR = {"A": 1e-4, "B": 8e-5, "C": 5e-5, "D": 3e-5}
DESK_PHASE_STEPS = {"A": 500, "B": 1000, "C": 1500, "D": 1500}


@dataclass
class TrainConfig:
    phase_steps: dict = field(default_factory=lambda: dict(DESK_PHASE_STEPS))
    phase_lr: dict = field(default_factory=lambda: dict(FULL_PHASE_LR))
    batch_size: int = 16
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0

    def __post_init__(self):
        if any(lr <= 0 for lr in self.phase_lr.values()):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup fraction must lie in [0, 1)")


def _pinball_terms(y, yhat, levels):
    q = torch.as_tensor(levels, dtype=yhat.dtype).view(-1, *([1] * (yhat.ndim - 1)))
    return _pinball(y.unsqueeze(0) - yhat, q)


def _pinball(diff, q):
    # ties (diff == 0) take the (q - 1) branch so the subgradient is fixed
    return torch.where(diff > 0, q * diff, (q - 1) * diff)


def pinball_loss(y, yhat, levels, mask=None) -> torch.Tensor:
    """Mean pinball loss for one target set.

    ``y[d_x, H]``, ``yhat[|Q|, d_x, H]``; masked cells (mask False) are left out
    of both the sum and the count.
    """
    if yhat.shape[1:] != y.shape or yhat.shape[0] != len(levels):
        raise ValueError(f"shape mismatch: y {tuple(y.shape)}, yhat {tuple(yhat.shape)}")
    terms = _pinball_terms(y, yhat, levels)
    if mask is None:
        return terms.mean()
    m = torch.as_tensor(mask, dtype=torch.bool)
    n = int(m.sum())
    if n == 0:
        warnings.warn("pinball loss over an all-masked target", RuntimeWarning, stacklevel=2)
        return (terms * 0.0).sum()
    return torch.where(m.unsqueeze(0), terms, torch.zeros((), dtype=terms.dtype)).sum() / (
        len(levels) * n
    )


def batch_pinball(yhat, y, mask, levels) -> torch.Tensor:
    """Per-episode masked pinball loss ``[B]`` for ``yhat[B,Q,S,H]``, ``y[B,S,H]``."""
    diff = y.unsqueeze(1) - yhat
    q = torch.as_tensor(levels, dtype=yhat.dtype).view(1, -1, 1, 1)
    terms = _pinball(diff, q)
    m = mask.unsqueeze(1)
    tot = torch.where(m, terms, torch.zeros((), dtype=terms.dtype)).sum((1, 2, 3))
    cnt = mask.sum((1, 2)).to(yhat.dtype) * len(levels)
    return tot / cnt.clamp_min(1.0)


def lr_schedule(step: int, total: int, base_lr: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total``."""
    warm = int(round(warmup_frac * total))
    if warm > 0 and step < warm:
        return base_lr * (step + 1) / warm
    if total <= warm:
        return base_lr
    frac = min(max((step - warm) / (total - warm), 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Steps whose gradients contain NaN/Inf are skipped and counted in
    ``skipped``.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = [p for p in params]
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.skipped = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, lr: float | None = None) -> bool:
        lr = self.lr if lr is None else lr
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        if not all(bool(torch.isfinite(g).all()) for g in grads):
            self.skipped += 1
            return False
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p.mul_(1 - lr * self.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))
        return True

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "skipped": self.skipped, "m": self.m, "v": self.v}

    def load_state_dict(self, s: dict) -> None:
        self.t, self.skipped = int(s["t"]), int(s["skipped"])
        for dst, src in zip(self.m + self.v, list(s["m"]) + list(s["v"])):
            dst.copy_(torch.as_tensor(src, dtype=dst.dtype).reshape(dst.shape))


def clip_grad_norm(params, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))
