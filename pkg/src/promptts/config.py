"""Flat ``key = value`` configuration with a full-scale and a desk-scale block.

Keys are ``<block>.<section>.<name>``; ``active`` picks the block. Top-level
keys (no block prefix) such as ``seed`` apply to every block. Lists are
comma-separated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .decoder import DEFAULT_QUANTILES
from .episodes.builders import EpisodeConfig
from .model import ModelConfig
from .objective import TrainConfig

BLOCKS = ("full", "desk")

DEFAULT_CONFIG_TEXT = """\
active = desk
seed = 0
precision = train

full.model.d_model = 768
full.model.n_layers = 12
full.model.n_heads = 12
full.model.n_experts = 4
full.model.patch_len = 16
full.model.quantiles = 0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9
full.model.max_query_ctx = 4096
full.model.max_example_ctx = 1024
full.model.max_output = 64
full.model.max_covariates = 8
full.train.batch_size = 256
full.train.steps = 50000,100000,175000,175000
full.train.lr = 1e-4,8e-5,5e-5,3e-5
full.train.weight_decay = 0.01
full.train.warmup_frac = 0.05
full.train.clip_norm = 1.0
full.episodes.horizons = 16,32,64
full.episodes.example_hist = 64,1024
full.episodes.query_hist = 64,4096
full.episodes.task_len = 64,512
full.episodes.k_max = 4
full.data.pool_size = 1024
full.data.series_length = 2048

desk.model.d_model = 64
desk.model.n_layers = 2
desk.model.n_heads = 4
desk.model.n_experts = 2
desk.model.patch_len = 8
desk.model.quantiles = 0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9
desk.model.max_query_ctx = 512
desk.model.max_example_ctx = 256
desk.model.max_output = 64
desk.model.max_covariates = 8
desk.train.batch_size = 16
desk.train.steps = 500,1000,1500,1500
desk.train.lr = 1e-3,8e-4,5e-4,3e-4
desk.train.weight_decay = 0.01
desk.train.warmup_frac = 0.05
desk.train.clip_norm = 1.0
desk.episodes.horizons = 8,16,32
desk.episodes.example_hist = 32,128
desk.episodes.query_hist = 64,256
desk.episodes.task_len = 32,64
desk.episodes.k_max = 4
desk.data.pool_size = 32
desk.data.series_length = 1024
"""


class ConfigError(ValueError):
    pass


def parse(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in v.split(","))


def _ints(v: str) -> tuple:
    return tuple(int(x) for x in v.split(","))


@dataclass
class Config:
    model: ModelConfig
    train: TrainConfig
    episodes: EpisodeConfig
    seed: int = 0
    precision: str = "train"
    active: str = "desk"
    pool_size: int = 32
    series_length: int = 1024
    raw: dict = field(default_factory=dict)

    def resolved_lines(self) -> list:
        return sorted(f"{k} = {v}" for k, v in self.raw.items())

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.resolved_lines()).encode()).hexdigest()[:16]


def resolve(kv: dict, overrides: dict | None = None) -> Config:
    kv = dict(kv)
    kv.update(overrides or {})
    active = kv.get("active", "desk")
    if active not in BLOCKS:
        raise ConfigError(f"active block must be one of {BLOCKS}, got {active!r}")
    missing = [b for b in BLOCKS if not any(k.startswith(b + ".") for k in kv)]
    if missing:
        raise ConfigError(f"config lacks the {missing} block(s)")
    pre = active + "."
    blk = {k[len(pre):]: v for k, v in kv.items() if k.startswith(pre)}
    top = {k: v for k, v in kv.items() if not any(k.startswith(b + ".") for b in BLOCKS)}
    g = lambda key, default=None: blk.get(key, default)  # noqa: E731
    try:
        model = ModelConfig(
            d_model=int(g("model.d_model")),
            n_layers=int(g("model.n_layers")),
            n_heads=int(g("model.n_heads")),
            n_experts=int(g("model.n_experts")),
            patch_len=int(g("model.patch_len")),
            quantiles=_floats(g("model.quantiles", ",".join(map(str, DEFAULT_QUANTILES)))),
            max_query_ctx=int(g("model.max_query_ctx")),
            max_example_ctx=int(g("model.max_example_ctx")),
            max_output=int(g("model.max_output", "64")),
            max_covariates=int(g("model.max_covariates", "8")),
            use_tokens=g("model.use_tokens", "true").lower() == "true",
        )
        steps = _ints(g("train.steps"))
        lrs = _floats(g("train.lr"))
        train = TrainConfig(
            phase_steps=dict(zip("ABCD", steps)),
            phase_lr=dict(zip("ABCD", lrs)),
            batch_size=int(g("train.batch_size")),
            weight_decay=float(g("train.weight_decay", "0.01")),
            warmup_frac=float(g("train.warmup_frac", "0.05")),
            clip_norm=float(g("train.clip_norm", "1.0")),
        )
        if model.patch_len <= 0:
            raise ConfigError("model.patch_len must be positive")
        episodes = EpisodeConfig(
            horizons=_ints(g("episodes.horizons")),
            example_hist=_ints(g("episodes.example_hist")),
            query_hist=_ints(g("episodes.query_hist")),
            task_len=_ints(g("episodes.task_len")),
            k_max=int(g("episodes.k_max", "4")),
            patch_len=model.patch_len,
            max_covariates=model.max_covariates,
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"bad or missing value in block {active!r}: {e}") from e
    return Config(
        model, train, episodes,
        seed=int(top.get("seed", "0")),
        precision=top.get("precision", "train"),
        active=active,
        pool_size=int(g("data.pool_size", "32")),
        series_length=int(g("data.series_length", "1024")),
        raw=kv,
    )


def load(path=None, overrides: dict | None = None) -> Config:
    text = DEFAULT_CONFIG_TEXT
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return resolve(parse(text), overrides)


def default_config(**overrides) -> Config:
    return resolve(parse(DEFAULT_CONFIG_TEXT), {k: str(v) for k, v in overrides.items()})
