"""Dirichlet-weighted convex mixing of z-scored segments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import Rng


@dataclass(frozen=True)
class MixupConfig:
    k_max: int = 3
    len_min: int = 128
    len_max: int = 2048
    dirichlet_alpha: float = 1.5


def zscore(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    return (x - x.mean()) / (sd if sd > 0 else 1.0)


def mix(segments, weights) -> np.ndarray:
    """``sum_i w_i * zscore(segment_i)``."""
    out = np.zeros(len(segments[0]))
    for w, s in zip(weights, segments):
        out += w * zscore(s)
    return out


def tsmixup(pool, rng: Rng, cfg: MixupConfig = MixupConfig(), max_tries: int = 100):
    """Mix k ~ U{1..k_max} random segments of a common random length.

    Returns ``(series, info)`` with the weights, pool indices and offsets.
    """
    if not pool:
        raise ValueError("tsmixup needs a non-empty pool")
    longest = max(len(s) for s in pool)
    for _ in range(max_tries):
        k = int(rng.integers(1, cfg.k_max + 1))
        ell = int(rng.integers(cfg.len_min, cfg.len_max + 1))
        if ell > longest:
            continue  # resample the length
        ok = [i for i, s in enumerate(pool) if len(s) >= ell]
        idx = [int(i) for i in rng.choice(ok, size=k, replace=len(ok) < k)]
        offs = [int(rng.integers(0, len(pool[i]) - ell + 1)) for i in idx]
        segs = [np.asarray(pool[i][o : o + ell], dtype=np.float64) for i, o in zip(idx, offs)]
        lam = np.array([1.0]) if k == 1 else rng.dirichlet(np.full(k, cfg.dirichlet_alpha))
        return mix(segs, lam), {"weights": lam.tolist(), "sources": idx, "offsets": offs, "length": ell}
    raise ValueError(f"no pool series reaches the minimum length {cfg.len_min}")
