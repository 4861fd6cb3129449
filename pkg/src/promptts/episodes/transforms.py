"""Episode-level forecast transforms applied to demonstrated and target futures.

Each transform maps a future ``f`` given its own window history ``h``. Shifts
and amplitudes are expressed in units of the history standard deviation so
the same transform means the same thing across windows of one episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numerics import Rng

KINDS = ("affine", "trend", "seasonal", "piecewise_scale", "power", "time_warp")


@dataclass(frozen=True)
class Transform:
    kind: str
    params: dict

    def __call__(self, fut: np.ndarray, hist: np.ndarray) -> np.ndarray:
        return apply_transform(self, fut, hist)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


def _hist_stats(hist):
    h = np.asarray(hist, dtype=np.float64)
    h = h[np.isfinite(h)]
    if h.size == 0:
        return 0.0, 1.0
    sd = float(h.std())
    return float(h.mean()), sd if sd > 1e-8 else 1.0


def apply_transform(tr: Transform, fut, hist) -> np.ndarray:
    f = np.asarray(fut, dtype=np.float64)
    mu, sd = _hist_stats(hist)
    p, H = tr.params, len(f)
    t = np.arange(H, dtype=np.float64)
    if tr.kind == "affine":
        return p["a"] * f + p["b"] * sd
    if tr.kind == "trend":
        return f + p["slope"] * sd * (t + 1) / H
    if tr.kind == "seasonal":
        return f + p["amp"] * sd * np.sin(2 * math.pi * t / p["period"] + p["phase"])
    if tr.kind == "piecewise_scale":
        cut = int(round(p["cut"] * H))
        scale = np.where(t < cut, p["a1"], p["a2"])
        return mu + scale * (f - mu)
    if tr.kind == "power":
        d = (f - mu) / sd
        return mu + sd * np.sign(d) * np.abs(d) ** p["q"]
    if tr.kind == "time_warp":
        if H < 2:
            return f.copy()
        w = (H - 1) * (t / (H - 1)) ** p["kappa"]
        return np.interp(w, t, f)
    raise ValueError(f"unknown transform {tr.kind!r}")


def compose(transforms, fut, hist) -> np.ndarray:
    """``T1 o T2 o ... o Tk``: the last transform in the list is applied first."""
    out = np.asarray(fut, dtype=np.float64)
    for tr in reversed(list(transforms)):
        out = tr(out, hist)
    return out


def sample_transform(kind: str, rng: Rng) -> Transform:
    if kind == "affine":
        a = float(rng.uniform(0.4, 2.5)) * float(rng.choice([1.0, 1.0, -1.0]))
        return Transform(kind, {"a": a, "b": float(rng.uniform(-1.5, 1.5))})
    if kind == "trend":
        return Transform(kind, {"slope": float(rng.uniform(-3.0, 3.0))})
    if kind == "seasonal":
        return Transform(kind, {"amp": float(rng.uniform(0.5, 2.0)), "period": int(rng.integers(4, 17)),
                                "phase": float(rng.uniform(0, 2 * math.pi))})
    if kind == "piecewise_scale":
        return Transform(kind, {"a1": float(rng.uniform(0.3, 2.5)), "a2": float(rng.uniform(0.3, 2.5)),
                                "cut": float(rng.uniform(0.25, 0.75))})
    if kind == "power":
        return Transform(kind, {"q": float(rng.uniform(0.5, 2.0))})
    if kind == "time_warp":
        return Transform(kind, {"kappa": float(rng.uniform(0.5, 2.0))})
    raise ValueError(kind)


def sample_composition(rng: Rng, k_max: int = 3) -> list:
    k = int(rng.integers(1, k_max + 1))
    kinds = [str(x) for x in rng.choice(KINDS, size=k, replace=False)]
    return [sample_transform(kd, rng) for kd in kinds]


IDENTITY = Transform("affine", {"a": 1.0, "b": 0.0})
