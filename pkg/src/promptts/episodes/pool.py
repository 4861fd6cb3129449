"""Raw series pool mixing KernelSynth, multivariate and univariate sources."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..numerics import Rng
from ..synth.kernelsynth import sample_kernelsynth
from ..synth.mixup import MixupConfig, tsmixup
from ..synth.multivariate import build_multivariate

SOURCE_MIX = {"kernelsynth": 0.10, "multivariate": 0.50, "univariate": 0.40}


@dataclass
class SeriesSystem:
    """Targets plus covariates; ``known[k]`` marks future-known covariates."""

    targets: list
    covariates: list = field(default_factory=list)
    known: list = field(default_factory=list)
    source: str = "univariate"
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.targets[0])

    def to_json(self) -> str:
        return json.dumps(
            {
                "targets": [np.asarray(t).tolist() for t in self.targets],
                "covariates": [np.asarray(c).tolist() for c in self.covariates],
                "known": list(self.known),
                "source": self.source,
                "meta": self.meta,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "SeriesSystem":
        d = json.loads(line)
        return cls(
            [np.asarray(t, dtype=np.float64) for t in d["targets"]],
            [np.asarray(c, dtype=np.float64) for c in d["covariates"]],
            list(d["known"]),
            d["source"],
            d.get("meta", {}),
        )


def base_univariate(length: int, rng: Rng) -> np.ndarray:
    """Seasonal + trend + AR(1) series standing in for a real-data source."""
    t = np.arange(length, dtype=np.float64)
    x = float(rng.normal(0.0, 2.0)) + float(rng.normal(0.0, 0.5)) * t / length
    for _ in range(int(rng.integers(0, 3))):
        period = float(rng.choice([7, 12, 24, 48, 52, 96]))
        x = x + float(rng.uniform(0.3, 2.0)) * np.sin(2 * math.pi * t / period + float(rng.uniform(0, 6.3)))
    phi = float(rng.uniform(0.0, 0.95))
    e = rng.normal(0.0, float(rng.uniform(0.1, 0.6)), length)
    ar = np.zeros(length)
    for i in range(1, length):
        ar[i] = phi * ar[i - 1] + e[i]
    return x + ar


def multivariate_system(uni_pool: list, rng: Rng, length: int, max_covariates: int = 8) -> SeriesSystem:
    n = int(rng.integers(2, 6))
    ms = build_multivariate(uni_pool, n, rng, length=length)
    endo, exo = ms.endogenous, ms.exogenous
    n_t = int(rng.integers(1, min(2, len(endo)) + 1))
    tidx = endo[:n_t]
    cov_idx = (endo[n_t:] + exo)[:max_covariates]
    known = [i in exo for i in cov_idx]
    meta = {"roles": ms.roles, "log": ms.log, "targets": tidx, "covariates": cov_idx}
    return SeriesSystem(
        [ms.series[i] for i in tidx], [ms.series[i] for i in cov_idx], known, "multivariate", meta
    )


@dataclass
class SeriesPool:
    systems: dict  # source -> list[SeriesSystem]
    mix: dict = field(default_factory=lambda: dict(SOURCE_MIX))

    def sample_source(self, rng: Rng) -> str:
        names = sorted(self.mix)
        p = np.array([self.mix[n] for n in names])
        return names[int(rng.choice(len(names), p=p / p.sum()))]

    def sample(self, rng: Rng, min_length: int = 0) -> SeriesSystem:
        src = self.sample_source(rng)
        cands = [s for s in self.systems[src] if s.length >= min_length]
        if not cands:
            raise ValueError(f"no {src} series of length >= {min_length}")
        return cands[int(rng.integers(0, len(cands)))]

    def univariate(self) -> list:
        return [s for s in self.systems.get("univariate", []) + self.systems.get("kernelsynth", [])]


def generate_pool(rng: Rng, n_per_source: int = 32, length: int = 1024,
                  mixup: MixupConfig | None = None) -> SeriesPool:
    """Build a pool; lengths are capped at ``length`` for desk-scale runs."""
    mixup = mixup or MixupConfig(len_min=min(128, length), len_max=length)
    base = [base_univariate(length, rng.child(f"base{i}")) for i in range(n_per_source)]
    uni = []
    for i in range(n_per_source):
        r = rng.child(f"mixup{i}")
        x, info = tsmixup(base, r, mixup)
        uni.append(SeriesSystem([x], source="univariate", meta={"mixup": info}))
    ks = []
    for i in range(n_per_source):
        x, spec = sample_kernelsynth(length, rng.child(f"kernel{i}"))
        x = (x - x.mean()) / (x.std() + 1e-8)
        ks.append(SeriesSystem([x], source="kernelsynth", meta={"kernel": spec.describe()}))
    uni_arrays = [s.targets[0] for s in uni + ks if s.length >= length // 2]
    mv_len = min(len(a) for a in uni_arrays)
    mv = [multivariate_system(uni_arrays, rng.child(f"mv{i}"), mv_len) for i in range(n_per_source)]
    return SeriesPool({"univariate": uni, "kernelsynth": ks, "multivariate": mv})


def write_pool(path, pool: SeriesPool) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for src in sorted(pool.systems):
            for s in pool.systems[src]:
                fh.write(s.to_json() + "\n")


def read_pool(path) -> SeriesPool:
    systems: dict = {k: [] for k in SOURCE_MIX}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                s = SeriesSystem.from_json(line)
                systems.setdefault(s.source, []).append(s)
    return SeriesPool(systems)
