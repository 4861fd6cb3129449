"""Forecasting with self-drawn demonstrations, in-context classification, embeddings."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .decoder import QuantileForecast, enforce_quantile_monotonicity
from .episodes.builders import compensate, label_codes
from .model import PromptModel, collate, prepare
from .numerics import Rng
from .preprocess import denormalize
from .prompt import Covariate, Episode, Window


@dataclass(frozen=True)
class InferenceConfig:
    k_examples: int = 4
    example_hist: tuple = (64, 1024)
    query_cap: int = 4096

    def capped(self, model: PromptModel) -> "InferenceConfig":
        """Clip history ranges to what the model was configured to read."""
        c = model.cfg
        hi = min(self.example_hist[1], c.max_example_ctx)
        lo = min(self.example_hist[0], hi)
        return InferenceConfig(self.k_examples, (lo, hi), min(self.query_cap, c.max_query_ctx))


class InsufficientHistory(ValueError):
    pass


def _as_targets(series) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


def _slice_covs(covariates, start: int, hist: int, H: int) -> list:
    out = []
    for c in covariates:
        end = start + hist + (H if c.known else 0)
        out.append(Covariate(np.asarray(c.values[start:end]), known=c.known, categorical=c.categorical))
    return out


def example_windows(T: int, horizon: int, K: int, q_hist: int, hist_range: tuple, rng: Rng,
                    min_hist: int) -> list:
    """Starts and history lengths of K example windows from the earliest history.

    Windows sit before the query context when they fit there; otherwise they
    spread over the whole history. Returns ``[(start, hist_len), ...]``.
    """
    if K <= 0:
        return []
    lo, hi = hist_range
    L = int(rng.integers(lo, hi + 1))
    before = T - q_hist
    if before >= K * (L + horizon):
        return [(i * (L + horizon), L) for i in range(K)]
    if before >= K * (min_hist + horizon):
        L = before // K - horizon
        return [(i * (L + horizon), L) for i in range(K)]
    L = min(L, T - horizon)
    if L < min_hist:
        warnings.warn(f"history of {T} steps is too short for examples; forecasting without them",
                      RuntimeWarning, stacklevel=3)
        return []
    last = T - (L + horizon)
    starts = np.linspace(0, last, K).round().astype(int) if K > 1 else np.array([0])
    return [(int(s), L) for s in starts]


def build_forecast_episode(targets, covariates, horizon: int, K: int, cfg: InferenceConfig,
                           rng: Rng, min_hist: int) -> Episode:
    X = _as_targets(targets)
    T = X.shape[1]
    if T < min_hist:
        raise InsufficientHistory(f"need at least {min_hist} history steps, got {T}")
    for c in covariates:
        need = T + (horizon if c.known else 0)
        if len(c.values) < need:
            raise InsufficientHistory(f"covariate has {len(c.values)} values, needs {need}")
    q_hist = min(T, cfg.query_cap)
    qs = T - q_hist
    wins = example_windows(T, horizon, K, q_hist, cfg.example_hist, rng, min_hist)
    examples = [Window([x[s : s + h + horizon] for x in X], _slice_covs(covariates, s, h, horizon), h)
                for s, h in wins]
    query = Window([x[qs:T] for x in X], _slice_covs(covariates, qs, q_hist, horizon), q_hist)
    return Episode(examples, query, {"task": "forecast", "seed": rng.seed, "horizon": horizon})


@torch.no_grad()
def run_episode(model: PromptModel, ep: Episode) -> tuple[np.ndarray, list, object]:
    """Normalized quantiles ``[|Q|, d_x, H]``, the query target stats, forward output."""
    cfg = model.cfg
    item = prepare(ep, cfg)
    item.answer = item.answer_mask = None
    batch = collate([item], cfg, model.dtype)
    out = model(batch)
    d_x = item.d_x
    q = out.quantiles[0, :, :d_x, : ep.horizon].double().numpy()
    return q, [c.stats for c in item.query.targets], out


def forecast(model: PromptModel, targets, covariates=(), horizon: int = 16,
             cfg: InferenceConfig = InferenceConfig(), rng: Rng | None = None,
             k_examples: int | None = None) -> QuantileForecast:
    """Denormalized, sorted quantile forecast ``values[|Q|, d_x, horizon]``.

    Horizons past the model's output length are decoded chunk by chunk; each
    chunk appends the previous medians to the history. Past-only covariates
    are unobserved over appended steps.
    """
    rng = Rng(0) if rng is None else rng
    cfg = cfg.capped(model)
    K = cfg.k_examples if k_examples is None else int(k_examples)
    X = _as_targets(targets)
    covs = list(covariates)
    step = model.cfg.max_output
    min_hist = model.cfg.patch_len
    pieces, stats0 = [], None
    done = 0
    while done < horizon:
        h = min(step, horizon - done)
        ep = build_forecast_episode(X, covs, h, K, cfg, rng.child(f"chunk{done}"), min_hist)
        qn, stats, _ = run_episode(model, ep)
        vals = np.stack([denormalize(qn[:, j], st) for j, st in enumerate(stats)], axis=1)
        vals = np.sort(vals, axis=0)
        pieces.append(vals)
        if stats0 is None:
            stats0 = stats
        done += h
        if done < horizon:
            med = QuantileForecast(vals, model.cfg.quantiles).median()
            X = np.concatenate([X, med], axis=1)
            covs = [Covariate(c.values if c.known else np.concatenate([c.values[: X.shape[1] - h],
                                                                       np.full(h, np.nan)]),
                              known=c.known, categorical=c.categorical) for c in covs]
    out = QuantileForecast(np.concatenate(pieces, axis=2), tuple(model.cfg.quantiles), stats0)
    return enforce_quantile_monotonicity(out)


# ------------------------------------------------------------ classification


@dataclass
class ClassPrediction:
    label: object
    index: int
    score: float  # horizon-averaged decoded code
    codes: dict


def nearest_code(score: float, codes) -> int:
    """Index of the nearest code; ties go to the lower index."""
    d = np.abs(np.asarray(codes, dtype=np.float64) - score)
    return int(np.flatnonzero(d == d.min())[0])


def classification_prompt(query, supports, rng: Rng, horizon: int) -> tuple[Episode, list, np.ndarray]:
    labels = sorted({y for _, y in supports}, key=str)
    if len(labels) < 2:
        raise ValueError("supports must cover at least two classes")
    if len(labels) > 8:
        warnings.warn(f"{len(labels)} classes crowd the code range", RuntimeWarning, stacklevel=3)
    codes = label_codes(len(labels), rng)
    idx = {y: i for i, y in enumerate(labels)}
    ex = []
    for x, y in supports:
        x = np.asarray(x, dtype=np.float64)
        ex.append(Window([np.concatenate([x, np.full(horizon, compensate(codes[idx[y]], x))])], [], len(x)))
    xq = np.asarray(query, dtype=np.float64)
    ep = Episode(ex, Window([xq], [], len(xq)), {"task": "classification", "seed": rng.seed,
                                                 "horizon": horizon})
    return ep, labels, codes


def classify(model: PromptModel, query, supports, rng: Rng | None = None) -> ClassPrediction:
    """Nearest-code label for ``query`` given ``supports = [(series, label), ...]``."""
    rng = Rng(0) if rng is None else rng
    ep, labels, codes = classification_prompt(query, supports, rng, model.cfg.patch_len)
    qn, _, _ = run_episode(model, ep)
    levels = np.asarray(model.cfg.quantiles)
    med = qn[int(np.argmin(np.abs(levels - 0.5))), 0]
    # the answer's normalized value is asinh(code) by construction of the compensation
    score = float(np.mean(np.sinh(med)))
    i = nearest_code(score, codes)
    return ClassPrediction(labels[i], i, score, {str(y): float(c) for y, c in zip(labels, codes)})


def decoded_code(model: PromptModel, ep: Episode) -> float:
    """Horizon-averaged code read off a prepared classification episode."""
    qn, _, _ = run_episode(model, ep)
    levels = np.asarray(model.cfg.quantiles)
    return float(np.mean(np.sinh(qn[int(np.argmin(np.abs(levels - 0.5))), 0])))


# ---------------------------------------------------------------- embedding


@torch.no_grad()
def extract_embedding(model: PromptModel, targets, covariates=(), horizon: int | None = None) -> np.ndarray:
    """Flattened valid tokens then valid patches of the query block, no examples."""
    X = _as_targets(targets)
    H = model.cfg.patch_len if horizon is None else horizon
    T = X.shape[1]
    q_hist = min(T, model.cfg.max_query_ctx)
    query = Window([x[T - q_hist :] for x in X], _slice_covs(list(covariates), T - q_hist, q_hist, H), q_hist)
    ep = Episode([], query, {"task": "embedding", "horizon": H})
    item = prepare(ep, model.cfg)
    batch = collate([item], model.cfg, model.dtype)
    out = model(batch)
    tok = out.tokens[0, -1][batch.ctx.token_valid[0, -1]]
    pv = batch.ctx.patch_valid[0, -1]
    pat = out.patches[0, -1][pv]
    return torch.cat([tok.reshape(-1), pat.reshape(-1)]).double().numpy()

