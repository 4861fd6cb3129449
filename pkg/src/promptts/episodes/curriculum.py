"""Phase task mixtures, ablation variants and the episode sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import Rng
from ..prompt import Episode
from . import builders as B
from .pool import SeriesPool

FAMILIES = (
    "query_forecast",
    "support_forecast",
    "transform_forecast",
    "classification",
    "synthetic_classification",
    "anomaly",
    "imputation",
    "demix",
    "ambiguity",
)
FORECAST_FAMILIES = ("query_forecast", "support_forecast", "transform_forecast")

PHASE_MIX = {
    "A": {"query_forecast": 60, "support_forecast": 40},
    "B": {"query_forecast": 30, "support_forecast": 30, "transform_forecast": 40},
    "C": {"query_forecast": 15, "transform_forecast": 20, "classification": 15,
          "synthetic_classification": 10, "anomaly": 10, "imputation": 10, "demix": 5},
    "D": {"query_forecast": 20, "support_forecast": 15, "transform_forecast": 15,
          "classification": 12, "synthetic_classification": 8, "anomaly": 10,
          "imputation": 10, "demix": 5, "ambiguity": 5},
}
# weight used for the optional ambiguity row of phase C when switched on
OPTIONAL_AMBIGUITY_C = 5

ABLATIONS = ("noexmp", "notoks", "nometa")


def phase_mixture(phase: str, ablation: str | None = None, include_ambiguity: bool = False) -> dict:
    """Normalized sampling probabilities for a phase (and ablation variant)."""
    if phase not in PHASE_MIX:
        raise ValueError(f"unknown phase {phase!r}")
    if ablation is not None and ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    mix = dict(PHASE_MIX[phase])
    if phase == "C" and include_ambiguity:
        mix["ambiguity"] = OPTIONAL_AMBIGUITY_C
    if ablation == "nometa":
        mix = {k: v for k, v in mix.items() if k in FORECAST_FAMILIES}
    total = float(sum(mix.values()))
    return {k: v / total for k, v in mix.items()}


@dataclass
class TaskBuilder:
    family: str
    no_examples: bool = False

    def build(self, pool: SeriesPool | None, rng: Rng, cfg: B.EpisodeConfig = B.EpisodeConfig()) -> Episode:
        f = self.family
        if f == "query_forecast":
            ep = B.build_forecast(pool.sample(rng), rng, 0, cfg)
        elif f == "support_forecast":
            ep = B.build_forecast(pool.sample(rng), rng, int(rng.integers(1, cfg.k_max + 1)), cfg,
                                  task="support_forecast")
        elif f == "transform_forecast":
            ep = B.build_forecast_transformed(pool.sample(rng), rng, None, cfg)
        elif f == "classification":
            ep = B.build_classification(rng, cfg)
        elif f == "synthetic_classification":
            ep = B.build_synthetic_classification(rng, cfg)
        elif f == "anomaly":
            ep = B.build_anomaly(pool.sample(rng), rng, None, cfg)
        elif f == "imputation":
            ep = B.build_imputation(pool.sample(rng), rng, None, cfg)
        elif f == "demix":
            ep = B.build_demix(rng, cfg)
        elif f == "ambiguity":
            ep = B.build_cross_task_ambiguity(pool.sample(rng), rng, cfg)
        else:
            raise ValueError(f"unknown family {f!r}")
        ep.meta["curriculum_family"] = f
        return B.strip_examples(ep) if self.no_examples else ep


def sample_family(mix: dict, rng: Rng) -> str:
    names = sorted(mix)
    p = np.array([mix[n] for n in names])
    return names[int(rng.choice(len(names), p=p / p.sum()))]


def curriculum_sampler(phase: str, rng: Rng, ablation: str | None = None,
                       include_ambiguity: bool = False) -> TaskBuilder:
    mix = phase_mixture(phase, ablation, include_ambiguity)
    return TaskBuilder(sample_family(mix, rng), no_examples=ablation == "noexmp")


class EpisodeSampler:
    """Draws episodes for a phase; ``mixture`` overrides the phase table."""

    def __init__(self, pool: SeriesPool | None, phase: str, cfg: B.EpisodeConfig = B.EpisodeConfig(),
                 ablation: str | None = None, mixture: dict | None = None,
                 include_ambiguity: bool = False, custom_builders: dict | None = None):
        self.pool, self.phase, self.cfg, self.ablation = pool, phase, cfg, ablation
        self.mix = mixture or phase_mixture(phase, ablation, include_ambiguity)
        self.custom_builders = custom_builders or {}

    def sample(self, rng: Rng, max_tries: int = 20) -> Episode:
        for _ in range(max_tries):
            fam = sample_family(self.mix, rng)
            tb = TaskBuilder(fam, no_examples=self.ablation == "noexmp")
            try:
                if fam in self.custom_builders:
                    ep = self.custom_builders[fam](self.pool, rng, self.cfg)
                    ep.meta["curriculum_family"] = fam
                    return B.strip_examples(ep) if tb.no_examples else ep
                return tb.build(self.pool, rng, self.cfg)
            except B.InsufficientLength:
                continue
        raise RuntimeError("could not build an episode from the pool")
