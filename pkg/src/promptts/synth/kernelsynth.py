"""Gaussian-process series from randomly composed covariance kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ..numerics import Rng

BANK = ("linear", "rbf", "periodic", "rational_quadratic", "white_noise", "constant")
PERIODS = (4, 7, 12, 24, 30, 48, 52, 96, 168)


@dataclass
class KernelSpec:
    """A basis kernel (``kind`` in BANK) or a binary node (``kind`` in '+', '*')."""

    kind: str
    params: dict = field(default_factory=dict)
    left: "KernelSpec | None" = None
    right: "KernelSpec | None" = None

    def gram(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "+":
            return self.left.gram(t) + self.right.gram(t)
        if self.kind == "*":
            return self.left.gram(t) * self.right.gram(t)
        return basis_gram(self.kind, self.params, t)

    def describe(self) -> str:
        if self.kind in "+*":
            return f"({self.left.describe()} {self.kind} {self.right.describe()})"
        return self.kind


def basis_gram(kind: str, p: dict, t: np.ndarray) -> np.ndarray:
    """Gram matrix on the normalized grid ``t`` in [0, 1]."""
    d = t[:, None] - t[None, :]
    if kind == "linear":
        return p.get("variance", 1.0) * (t[:, None] - p.get("offset", 0.0)) * (t[None, :] - p.get("offset", 0.0))
    if kind == "rbf":
        return np.exp(-0.5 * (d / p["lengthscale"]) ** 2)
    if kind == "periodic":
        return np.exp(-2.0 * np.sin(math.pi * np.abs(d) / p["period"]) ** 2 / p["lengthscale"] ** 2)
    if kind == "rational_quadratic":
        a = p["alpha"]
        return (1.0 + d**2 / (2 * a * p["lengthscale"] ** 2)) ** (-a)
    if kind == "white_noise":
        return p.get("variance", 0.1) * np.eye(len(t))
    if kind == "constant":
        return np.full((len(t), len(t)), p.get("value", 1.0))
    raise ValueError(f"unknown kernel {kind!r}")


def _log_uniform(rng: Rng, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_basis(kind: str, length: int, rng: Rng) -> KernelSpec:
    if kind == "linear":
        return KernelSpec(kind, {"variance": _log_uniform(rng, 0.1, 2.0), "offset": float(rng.uniform(0, 1))})
    if kind == "rbf":
        return KernelSpec(kind, {"lengthscale": _log_uniform(rng, 0.05, 0.5)})
    if kind == "periodic":
        ok = [q for q in PERIODS if q <= length // 3] or [max(2, length // 3)]
        q = int(rng.choice(ok))
        return KernelSpec(kind, {"period": q / length, "lengthscale": _log_uniform(rng, 0.5, 2.0), "period_steps": q})
    if kind == "rational_quadratic":
        return KernelSpec(kind, {"lengthscale": _log_uniform(rng, 0.05, 0.5), "alpha": _log_uniform(rng, 0.1, 10.0)})
    if kind == "white_noise":
        return KernelSpec(kind, {"variance": _log_uniform(rng, 0.01, 0.5)})
    if kind == "constant":
        return KernelSpec(kind, {"value": _log_uniform(rng, 0.1, 2.0)})
    raise ValueError(f"unknown kernel {kind!r}")


def random_kernel(length: int, rng: Rng, max_kernels: int = 5) -> KernelSpec:
    """Compose 1..max_kernels basis kernels left to right with random + / *."""
    n = int(rng.integers(1, max_kernels + 1))
    spec = sample_basis(str(rng.choice(BANK)), length, rng)
    for _ in range(n - 1):
        nxt = sample_basis(str(rng.choice(BANK)), length, rng)
        spec = KernelSpec(str(rng.choice(["+", "*"])), left=spec, right=nxt)
    return spec


def kernelsynth(spec: KernelSpec, length: int, rng: Rng, max_jitter: float = 1e-1) -> np.ndarray:
    """One GP sample path; jitter grows tenfold until Cholesky succeeds."""
    t = np.linspace(0.0, 1.0, length)
    K = spec.gram(t)
    K = 0.5 * (K + K.T)
    scale = max(float(np.mean(np.diag(K))), 1e-12)
    jitter = 1e-8 * scale
    while True:
        try:
            L = scipy.linalg.cholesky(K + jitter * np.eye(length), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > max_jitter * scale:
                raise ValueError(f"kernel {spec.describe()} not factorizable with jitter {jitter:g}")
    return L @ rng.normal(size=length)


def sample_kernelsynth(length: int, rng: Rng) -> tuple[np.ndarray, KernelSpec]:
    spec = random_kernel(length, rng)
    return kernelsynth(spec, length, rng), spec
