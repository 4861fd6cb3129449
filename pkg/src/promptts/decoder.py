"""Task-conditioned mixture-of-experts patch decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .layers import Dense

DEFAULT_QUANTILES = tuple(round(0.1 * i, 1) for i in range(1, 10))


class MoEDecoder(nn.Module):
    """Route a query context vector over expert keys and mix linear patch decoders."""

    def __init__(self, d_model: int, n_experts: int, n_quantiles: int, patch_len: int):
        super().__init__()
        if n_experts < 1:
            raise ValueError("need at least one expert")
        self.d_model, self.n_q, self.patch_len = d_model, n_quantiles, patch_len
        self.w_q = Dense(3 * d_model, d_model, bias=False)
        self.expert_keys = nn.Parameter(torch.randn(n_experts, d_model) / math.sqrt(d_model))
        self.experts = nn.ModuleList(
            Dense(d_model, n_quantiles * patch_len) for _ in range(n_experts)
        )

    def route(self, h_start, h_mid, fut_mean):
        """Softmax weights ``[B, E]`` from ``concat(h_START, h_MID, mean future patch)``."""
        c = nx.concat([h_start, h_mid, fut_mean], axis=-1)
        scores = nx.matmul(self.w_q(c), self.expert_keys.T) / math.sqrt(self.d_model)
        return nx.softmax(scores)

    def expert_outputs(self, H_fut):
        """``[E, B, Q, S, Pf*p]`` for future patches ``H_fut [B, S, Pf, D]``."""
        B, S, Pf, _ = H_fut.shape
        outs = []
        for dec in self.experts:
            y = dec(H_fut).reshape(B, S, Pf, self.n_q, self.patch_len)
            outs.append(y.permute(0, 3, 1, 2, 4).reshape(B, self.n_q, S, Pf * self.patch_len))
        return torch.stack(outs)

    def decode(self, H_fut, alpha):
        per = self.expert_outputs(H_fut)
        return torch.einsum("be,ebqst->bqst", alpha, per)


@dataclass
class QuantileForecast:
    """Quantiles ``values[|Q|, d_x, H]`` plus per-target normalization stats."""

    values: np.ndarray
    quantile_levels: tuple = DEFAULT_QUANTILES
    norm_stats: list = field(default_factory=list)

    def median(self) -> np.ndarray:
        levels = np.asarray(self.quantile_levels)
        return self.values[int(np.argmin(np.abs(levels - 0.5)))]

    def to_json(self) -> dict:
        return {
            "quantiles": {
                f"{q:g}": self.values[i].tolist() for i, q in enumerate(self.quantile_levels)
            }
        }


def enforce_quantile_monotonicity(f: QuantileForecast) -> QuantileForecast:
    return QuantileForecast(np.sort(f.values, axis=0), f.quantile_levels, list(f.norm_stats))
