"""Labeled synthetic series for classification episodes.

Families and classes:

* waveform: low / mid / high frequency sinusoids;
* regime: trending / mean reverting / volatile;
* motif: motif present / motif absent in a random-walk background.
"""

from __future__ import annotations

import math

import numpy as np

from ..numerics import Rng
from .kernelsynth import kernelsynth, sample_basis

FAMILIES = {
    "waveform": ("low_freq", "mid_freq", "high_freq"),
    "regime": ("trending", "mean_reverting", "volatile"),
    "motif": ("motif_present", "motif_absent"),
}

# cycles per step
FREQ_BANDS = {"low_freq": (1 / 64, 1 / 40), "mid_freq": (1 / 20, 1 / 12), "high_freq": (1 / 6, 1 / 4)}


def waveform(cls: str, length: int, rng: Rng) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    f = float(rng.uniform(*FREQ_BANDS[cls]))
    amp = float(rng.uniform(0.5, 2.0))
    level = float(rng.normal(0.0, 1.0))
    x = amp * np.sin(2 * math.pi * f * t + float(rng.uniform(0, 2 * math.pi)))
    return level + x + rng.normal(0.0, 0.1 * amp, length)


def regime(cls: str, length: int, rng: Rng) -> np.ndarray:
    e = rng.normal(0.0, 1.0, length)
    if cls == "trending":
        drift = float(rng.choice([-1.0, 1.0])) * float(rng.uniform(0.05, 0.15))
        return np.cumsum(drift + 0.3 * e)
    if cls == "mean_reverting":
        phi = float(rng.uniform(0.2, 0.6))
        x = np.zeros(length)
        for i in range(1, length):
            x[i] = phi * x[i - 1] + 0.5 * e[i]
        return x
    if cls == "volatile":
        vol = np.exp(np.cumsum(rng.normal(0.0, 0.1, length)))
        return np.cumsum(1.5 * vol * e)
    raise ValueError(cls)


def motif_shape(width: int) -> np.ndarray:
    u = np.linspace(0.0, 1.0, width)
    return np.sin(math.pi * u) * np.sin(3 * math.pi * u)


def motif(cls: str, length: int, rng: Rng) -> np.ndarray:
    x = np.cumsum(rng.normal(0.0, 0.3, length))
    if cls == "motif_present":
        w = min(16, length)
        a = int(rng.integers(0, length - w + 1))
        x[a : a + w] += 4.0 * motif_shape(w)
    return x


GENERATORS = {"waveform": waveform, "regime": regime, "motif": motif}


def sample_class_series(family: str, cls: str, length: int, rng: Rng) -> np.ndarray:
    if cls not in FAMILIES[family]:
        raise ValueError(f"{cls!r} is not a class of {family!r}")
    return GENERATORS[family](cls, length, rng)


# labeled series whose label is the generating kernel's structure
KERNEL_CLASSES = ("periodic", "linear", "rbf", "white_noise")


def kernel_labeled_series(cls: str, length: int, rng: Rng) -> np.ndarray:
    spec = sample_basis(cls, length, rng)
    return kernelsynth(spec, length, rng) + rng.normal(0.0, 0.05, length)
