"""Structured prompts: episode data types, block serialization and token allow masks.

An episode holds raw windows. ``serialize_episode`` turns each window into a
:class:`Block`: normalized, patched components plus a fixed set of semantic
token slots. Every block carries ``5 + 2 * max_covariates`` slots laid out as::

    START, TARGET_HIST, EXOG_1..EXOG_m, MID, TARGET_FUT, FUTURE_EXOG_1..m, END

Slots for absent covariates are invalid. Query blocks additionally mark
TARGET_FUT and END invalid.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .preprocess import (
    NormStats,
    PatchInputs,
    Role,
    SeriesComponent,
    normalize,
    ordinal_encode,
    patchify,
)


class SerializationError(ValueError):
    pass


# --------------------------------------------------------------------------
# raw episode representation


@dataclass
class Covariate:
    """A covariate column. Known covariates carry ``hist_len + horizon`` values."""

    values: np.ndarray
    known: bool = False
    categorical: bool = False

    def __post_init__(self):
        if not self.categorical:
            self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class Window:
    """One example (targets span history + future) or the query (history only)."""

    targets: list
    covariates: list = field(default_factory=list)
    hist_len: int = 0

    def __post_init__(self):
        self.targets = [np.asarray(t, dtype=np.float64) for t in self.targets]
        if not self.targets:
            raise SerializationError("a window needs at least one target component")
        if self.hist_len <= 0:
            self.hist_len = len(self.targets[0])


@dataclass
class Episode:
    """N example windows plus a query; ``meta`` is never seen by the model.

    ``meta`` holds ``task`` and ``seed`` and, for training, ``horizon`` and
    ``answer`` (the query's ground-truth output, one row per target).
    """

    examples: list
    query: Window
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return int(self.meta["horizon"])

    @property
    def answer(self) -> np.ndarray | None:
        a = self.meta.get("answer")
        return None if a is None else np.asarray(a, dtype=np.float64)

    @property
    def task(self) -> str:
        return self.meta.get("task", "forecast")


def _arr_to_json(a) -> list:
    return [None if not math.isfinite(float(v)) else float(v) for v in np.asarray(a).ravel()]


def _json_to_arr(xs) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in xs], dtype=np.float64)


def _window_to_dict(w: Window) -> dict:
    covs = []
    for c in w.covariates:
        vals = list(c.values) if c.categorical else _arr_to_json(c.values)
        covs.append({"values": vals, "known": bool(c.known), "categorical": bool(c.categorical)})
    return {"targets": [_arr_to_json(t) for t in w.targets], "covariates": covs, "hist_len": w.hist_len}


def _window_from_dict(d: dict) -> Window:
    covs = [
        Covariate(
            list(c["values"]) if c.get("categorical") else _json_to_arr(c["values"]),
            bool(c.get("known", False)),
            bool(c.get("categorical", False)),
        )
        for c in d.get("covariates", [])
    ]
    return Window([_json_to_arr(t) for t in d["targets"]], covs, int(d["hist_len"]))


def _meta_to_json(meta: dict) -> dict:
    out = {}
    for k, v in meta.items():
        if isinstance(v, np.ndarray):
            v = [_arr_to_json(r) for r in np.atleast_2d(v)] if v.ndim > 1 else _arr_to_json(v)
        elif isinstance(v, (np.integer,)):
            v = int(v)
        elif isinstance(v, (np.floating,)):
            v = float(v)
        out[k] = v
    return out


def episode_to_json(ep: Episode) -> str:
    d = {
        "examples": [_window_to_dict(w) for w in ep.examples],
        "query": _window_to_dict(ep.query),
        "meta": _meta_to_json(ep.meta),
    }
    return json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)


def episode_from_json(line: str) -> Episode:
    d = json.loads(line)
    meta = dict(d.get("meta", {}))
    if meta.get("answer") is not None:
        meta["answer"] = np.array(
            [[np.nan if v is None else v for v in row] for row in meta["answer"]], dtype=np.float64
        )
    return Episode(
        [_window_from_dict(w) for w in d["examples"]], _window_from_dict(d["query"]), meta
    )


def write_episodes(path, episodes: Iterable[Episode]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            fh.write(episode_to_json(ep) + "\n")
            n += 1
    return n


def read_episodes(path) -> Iterator[Episode]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield episode_from_json(line)


# --------------------------------------------------------------------------
# tokens and blocks


class TokenRole(enum.IntEnum):
    START = 0
    TARGET_HIST = 1
    EXOG = 2
    MID = 3
    TARGET_FUT = 4
    FUTURE_EXOG = 5
    END = 6


NUM_ROLES = len(TokenRole)


class Region(enum.IntEnum):
    TARGET_HIST = 0
    EXOG_HIST = 1
    TARGET_FUT = 2
    EXOG_FUT = 3


@dataclass(frozen=True)
class PromptConfig:
    patch_len: int = 8
    context_len: int = 512
    max_covariates: int = 8

    @property
    def num_slots(self) -> int:
        return 5 + 2 * self.max_covariates


def slot_index(role: TokenRole, k: int = 0, max_covariates: int = 8) -> int:
    m = max_covariates
    return {
        TokenRole.START: 0,
        TokenRole.TARGET_HIST: 1,
        TokenRole.EXOG: 2 + k,
        TokenRole.MID: 2 + m,
        TokenRole.TARGET_FUT: 3 + m,
        TokenRole.FUTURE_EXOG: 4 + m + k,
        TokenRole.END: 4 + 2 * m,
    }[role]


@dataclass(frozen=True)
class TokenSlot:
    role: TokenRole
    series_index: int | None
    valid: bool


@dataclass
class ComponentPatches:
    patches: PatchInputs
    role: Role
    stats: NormStats
    future_observed: bool  # future patches hold real data (not a placeholder)


@dataclass
class Block:
    kind: str  # "example" | "query"
    targets: list  # ComponentPatches
    covariates: list  # ComponentPatches
    token_slots: list  # TokenSlot, fixed positions
    hist_len: int
    horizon: int
    category_maps: list = field(default_factory=list)

    @property
    def components(self) -> list:
        return list(self.targets) + list(self.covariates)

    @property
    def num_hist_patches(self) -> int:
        return self.targets[0].patches.num_hist_patches

    @property
    def num_fut_patches(self) -> int:
        return self.targets[0].patches.num_fut_patches

    @property
    def num_patches(self) -> int:
        return self.num_hist_patches + self.num_fut_patches


@dataclass
class TokenLayout:
    roles: list  # TokenRole per slot
    valid: np.ndarray  # [R] bool
    read_allow: np.ndarray  # [R, S*P] bool
    region: np.ndarray  # [S*P] Region id per patch
    series: np.ndarray  # [S*P] component index per patch
    write_targets: dict  # slot index -> flat patch indices that receive FiLM


def _slots(kind: str, d_z: int, known: Sequence[bool], cfg: PromptConfig) -> list:
    m = cfg.max_covariates
    is_ex = kind == "example"
    slots = [TokenSlot(TokenRole.START, None, True), TokenSlot(TokenRole.TARGET_HIST, None, True)]
    slots += [TokenSlot(TokenRole.EXOG, k, k < d_z) for k in range(m)]
    slots += [TokenSlot(TokenRole.MID, None, True), TokenSlot(TokenRole.TARGET_FUT, None, is_ex)]
    slots += [TokenSlot(TokenRole.FUTURE_EXOG, k, k < d_z and bool(known[k])) for k in range(m)]
    slots.append(TokenSlot(TokenRole.END, None, is_ex))
    return slots


def _component(values, mask, role, hist_len, horizon, fut_obs, cfg) -> ComponentPatches:
    comp = SeriesComponent(np.where(mask, values, 0.0), mask, role, hist_len)
    z, stats = normalize(comp)
    pin = patchify(z, comp.mask, hist_len, horizon, cfg.patch_len, cfg.context_len)
    return ComponentPatches(pin, role, stats, fut_obs)


def _covariate_arrays(cov: Covariate, length: int) -> tuple[np.ndarray, np.ndarray, dict | None]:
    mapping = None
    if cov.categorical:
        vals, mapping = ordinal_encode(list(cov.values)[:length])
    else:
        vals = np.asarray(cov.values, dtype=np.float64)[:length]
    mask = np.isfinite(vals)
    return np.nan_to_num(vals), mask, mapping


def _serialize(kind, X_hist, Z_hist, X_fut, Z_fut, known, categorical, horizon, cfg) -> Block:
    if not X_hist:
        raise SerializationError("at least one target component is required")
    hist_len = len(X_hist[0])
    if any(len(x) != hist_len for x in X_hist):
        raise SerializationError("target histories differ in length")
    if len(Z_hist) > cfg.max_covariates:
        raise SerializationError(
            f"{len(Z_hist)} covariates exceed the configured cap {cfg.max_covariates}"
        )
    if X_fut is not None and len(X_fut) != len(X_hist):
        raise SerializationError(
            f"{len(X_hist)} target histories but {len(X_fut)} target futures"
        )
    if len(Z_fut) != len(Z_hist):
        raise SerializationError(
            f"{len(Z_hist)} covariate histories but {len(Z_fut)} covariate futures"
        )
    targets = []
    for j, xh in enumerate(X_hist):
        xh = np.asarray(xh, dtype=np.float64)
        xf = np.asarray(X_fut[j], dtype=np.float64) if X_fut is not None else np.zeros(0)
        v = np.concatenate([xh, xf])
        targets.append(
            _component(np.nan_to_num(v), np.isfinite(v), Role.TARGET, hist_len, horizon,
                       X_fut is not None, cfg)
        )
    covs, maps = [], []
    for k, zh in enumerate(Z_hist):
        zf = Z_fut[k] if known[k] and Z_fut[k] is not None else []
        v = np.concatenate([np.asarray(zh, dtype=np.float64), np.asarray(zf, dtype=np.float64)])
        msk = np.isfinite(v)
        role = Role.KNOWN_COVARIATE if known[k] else Role.PAST_COVARIATE
        covs.append(_component(np.nan_to_num(v), msk, role, hist_len, horizon, bool(known[k]), cfg))
        maps.append(categorical[k] if categorical else None)
    slots = _slots(kind, len(Z_hist), known, cfg)
    return Block(kind, targets, covs, slots, hist_len, horizon, maps)


def serialize_example(X_hist, Z_hist, X_fut, Z_fut, known=None, cfg=PromptConfig()) -> Block:
    known = list(known) if known is not None else [z is not None for z in Z_fut]
    horizon = len(X_fut[0]) if X_fut else 0
    return _serialize("example", X_hist, Z_hist, X_fut, Z_fut, known, None, horizon, cfg)


def serialize_query(X_hist, Z_hist, Z_fut, horizon: int, known=None, cfg=PromptConfig()) -> Block:
    known = list(known) if known is not None else [z is not None for z in Z_fut]
    return _serialize("query", X_hist, Z_hist, None, Z_fut, known, None, horizon, cfg)


def serialize_window(w: Window, kind: str, horizon: int, cfg: PromptConfig) -> Block:
    h = w.hist_len
    X_hist = [t[:h] for t in w.targets]
    X_fut = [t[h : h + horizon] for t in w.targets] if kind == "example" else None
    Z_hist, Z_fut, known, maps = [], [], [], []
    for c in w.covariates:
        vals, mask, mapping = _covariate_arrays(c, h + horizon if c.known else h)
        vals = np.where(mask, vals, np.nan)
        Z_hist.append(vals[:h])
        Z_fut.append(vals[h:] if c.known else None)
        known.append(c.known)
        maps.append(mapping)
    return _serialize(kind, X_hist, Z_hist, X_fut, Z_fut, known, maps, horizon, cfg)


def serialize_episode(ep: Episode, cfg: PromptConfig) -> tuple[list, Block]:
    """Serialize all examples and the query; component counts must agree."""
    H = ep.horizon
    q = serialize_window(ep.query, "query", H, cfg)
    blocks = [serialize_window(w, "example", H, cfg) for w in ep.examples]
    for b in blocks:
        if len(b.targets) != len(q.targets) or len(b.covariates) != len(q.covariates):
            raise SerializationError(
                "component counts differ across blocks: "
                f"({len(b.targets)},{len(b.covariates)}) vs ({len(q.targets)},{len(q.covariates)})"
            )
    return blocks, q


def deserialize_layout(block: Block) -> dict:
    """Recover component boundaries, roles and slot validity from a block."""
    return {
        "kind": block.kind,
        "hist_len": block.hist_len,
        "horizon": block.horizon,
        "roles": [c.role for c in block.components],
        "num_hist_patches": [c.patches.num_hist_patches for c in block.components],
        "num_fut_patches": [c.patches.num_fut_patches for c in block.components],
        "slot_valid": [s.valid for s in block.token_slots],
    }


# --------------------------------------------------------------------------
# allow masks


def patch_regions(block: Block) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Region id, component index and observed flag for each flat patch (s-major)."""
    ph, pf = block.num_hist_patches, block.num_fut_patches
    d_x = len(block.targets)
    region, series, observed = [], [], []
    for s, comp in enumerate(block.components):
        tgt = s < d_x
        region += [Region.TARGET_HIST if tgt else Region.EXOG_HIST] * ph
        region += [Region.TARGET_FUT if tgt else Region.EXOG_FUT] * pf
        series += [s] * (ph + pf)
        observed += [True] * ph + [comp.future_observed] * pf
    return np.array(region, dtype=np.int64), np.array(series, dtype=np.int64), np.array(observed)


def token_read_rule(slot: TokenSlot, region: int, series: int, d_x: int) -> bool:
    """Whether a token of this slot may read a patch in (region, series)."""
    r = slot.role
    if r in (TokenRole.START, TokenRole.END):
        return True
    if r is TokenRole.TARGET_HIST:
        return region == Region.TARGET_HIST
    if r is TokenRole.EXOG:
        return region == Region.EXOG_HIST and series == d_x + slot.series_index
    if r is TokenRole.MID:
        return region in (Region.TARGET_HIST, Region.EXOG_HIST)
    if r is TokenRole.TARGET_FUT:
        return region == Region.TARGET_FUT
    if r is TokenRole.FUTURE_EXOG:
        return region == Region.EXOG_FUT and series == d_x + slot.series_index
    raise AssertionError(r)


def build_allow_masks(block: Block) -> TokenLayout:
    region, series, observed = patch_regions(block)
    d_x = len(block.targets)
    R = len(block.token_slots)
    allow = np.zeros((R, len(region)), dtype=bool)
    for i, slot in enumerate(block.token_slots):
        if not slot.valid:
            continue
        for j in range(len(region)):
            allow[i, j] = observed[j] and token_read_rule(slot, region[j], series[j], d_x)
    fut = np.flatnonzero(np.isin(region, (Region.TARGET_FUT, Region.EXOG_FUT)))
    write = {}
    if block.kind == "query":
        write = {0: np.arange(len(region)), slot_index(TokenRole.MID, 0, (R - 5) // 2): fut}
    return TokenLayout(
        [s.role for s in block.token_slots],
        np.array([s.valid for s in block.token_slots]),
        allow,
        region,
        series,
        write,
    )
