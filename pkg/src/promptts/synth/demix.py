"""Latent source generators for additive de-mixing episodes.

Each concept has episode-level parameter ranges (drawn once per episode by
:func:`sample_ranges`) and per-source parameters drawn inside those ranges
(:func:`sample_params`). :func:`generate` is deterministic given parameters
and a noise seed.
"""

from __future__ import annotations

import math

import numpy as np

from ..numerics import Rng

CONCEPTS = ("sinusoid", "trend", "piecewise_trend", "spiky", "autoregressive")


def _span(rng: Rng, lo: float, hi: float, rel: float = 0.3) -> tuple[float, float]:
    c = float(rng.uniform(lo, hi))
    return (c * (1 - rel), c * (1 + rel))


def sample_ranges(concept: str, rng: Rng) -> dict:
    if concept == "sinusoid":
        return {"amp": _span(rng, 0.5, 2.0), "freq": _span(rng, 1 / 48, 1 / 6), "noise": 0.05}
    if concept == "trend":
        return {"slope": _span(rng, 0.005, 0.05), "sign": float(rng.choice([-1.0, 1.0])),
                "intercept": (-1.0, 1.0), "noise": 0.05}
    if concept == "piecewise_trend":
        return {"slope": _span(rng, 0.005, 0.05), "noise": 0.05}
    if concept == "spiky":
        return {"height": _span(rng, 1.0, 3.0), "width": _span(rng, 1.0, 3.0),
                "count": (1, 4), "noise": 0.05}
    if concept == "autoregressive":
        return {"coef": _span(rng, 0.5, 0.95, rel=0.05), "noise": _span(rng, 0.1, 0.4)}
    raise ValueError(f"unknown concept {concept!r}")


def sample_params(concept: str, ranges: dict, length: int, rng: Rng) -> dict:
    u = lambda r: float(rng.uniform(*r))  # noqa: E731
    p = {"noise_seed": int(rng.integers(0, 2**31 - 1))}
    if concept == "sinusoid":
        p.update(amp=u(ranges["amp"]), freq=u(ranges["freq"]), phase=float(rng.uniform(0, 2 * math.pi)),
                 noise=ranges["noise"])
    elif concept == "trend":
        p.update(slope=ranges["sign"] * u(ranges["slope"]), intercept=u(ranges["intercept"]),
                 noise=ranges["noise"])
    elif concept == "piecewise_trend":
        s1 = u(ranges["slope"]) * float(rng.choice([-1.0, 1.0]))
        s2 = u(ranges["slope"]) * float(rng.choice([-1.0, 1.0]))
        p.update(slope1=s1, slope2=s2, knot=int(rng.integers(length // 4, max(length // 4 + 1, 3 * length // 4))),
                 noise=ranges["noise"])
    elif concept == "spiky":
        j = int(rng.integers(ranges["count"][0], ranges["count"][1] + 1))
        p.update(heights=[u(ranges["height"]) for _ in range(j)],
                 widths=[u(ranges["width"]) for _ in range(j)],
                 centers=[float(rng.uniform(0, length)) for _ in range(j)],
                 noise=ranges["noise"])
    elif concept == "autoregressive":
        p.update(coef=u(ranges["coef"]), noise=u(ranges["noise"]))
    else:
        raise ValueError(concept)
    return p


def generate(concept: str, params: dict, length: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    eps = Rng(params["noise_seed"]).normal(0.0, params["noise"], length)
    if concept == "sinusoid":
        return params["amp"] * np.sin(2 * math.pi * params["freq"] * t + params["phase"]) + eps
    if concept == "trend":
        return params["slope"] * t + params["intercept"] + eps
    if concept == "piecewise_trend":
        k = params["knot"]
        b1, b2 = params["slope1"], params["slope2"]
        return np.where(t <= k, b1 * t, b1 * k + b2 * (t - k)) + eps
    if concept == "spiky":
        s = np.zeros(length)
        for h, w, c in zip(params["heights"], params["widths"], params["centers"]):
            s += h * np.exp(-((t - c) ** 2) / (2 * w**2))
        return s + eps
    if concept == "autoregressive":
        s = np.zeros(length)
        for i in range(length):
            s[i] = (params["coef"] * s[i - 1] if i else 0.0) + eps[i]
        return s
    raise ValueError(concept)
