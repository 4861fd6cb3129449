"""Forecast and classification metrics plus baseline-relative aggregation."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps


class MetricWarning(RuntimeWarning):
    pass


def seasonal_naive(insample, horizon: int, season: int = 1) -> np.ndarray:
    """Repeat the last ``season`` observed values over ``horizon`` steps."""
    x = np.asarray(insample, dtype=np.float64)
    if len(x) < season:
        raise ValueError(f"in-sample length {len(x)} shorter than season {season}")
    last = x[len(x) - season :]
    return np.resize(last, horizon) if season > 0 else np.full(horizon, x[-1])


def mase(forecast, actual, insample, season: int = 1) -> float:
    """MAE of the forecast over the in-sample seasonal-naive one-step MAE.

    A zero denominator returns ``inf`` with a warning; aggregation skips it.
    """
    f, y, x = (np.asarray(a, dtype=np.float64) for a in (forecast, actual, insample))
    if f.shape != y.shape:
        raise ValueError(f"forecast shape {f.shape} != actual shape {y.shape}")
    if x.shape[-1] <= season:
        raise ValueError(f"in-sample length {x.shape[-1]} must exceed season {season}")
    denom = float(np.mean(np.abs(x[..., season:] - x[..., :-season])))
    num = float(np.mean(np.abs(f - y)))
    if denom == 0.0:
        warnings.warn("MASE scale is zero; result flagged as infinite", MetricWarning, stacklevel=2)
        return math.inf
    return num / denom


def quantile_losses(qpred, actual, levels) -> np.ndarray:
    """Pinball loss per level summed over all cells: shape ``[|Q|]``."""
    q = np.asarray(qpred, dtype=np.float64)
    y = np.asarray(actual, dtype=np.float64)
    lv = np.asarray(levels, dtype=np.float64).reshape(-1, *([1] * y.ndim))
    if q.shape != (len(levels),) + y.shape:
        raise ValueError(f"quantiles shape {q.shape} does not match {len(levels)} x {y.shape}")
    d = y[None] - q
    return np.where(d > 0, lv * d, (lv - 1) * d).reshape(len(levels), -1).sum(axis=1)


def wql(qpred, actual, levels) -> float:
    """Mean over levels of ``2 * sum(pinball) / sum(|y|)``."""
    scale = float(np.abs(np.asarray(actual, dtype=np.float64)).sum())
    if scale == 0.0:
        warnings.warn("WQL scale sum|y| is zero; result flagged as infinite", MetricWarning, stacklevel=2)
        return math.inf
    return float(np.mean(2.0 * quantile_losses(qpred, actual, levels) / scale))


def geometric_mean(values) -> float:
    v = np.asarray([x for x in values if math.isfinite(x) and x > 0], dtype=np.float64)
    if v.size == 0:
        return math.nan
    return float(np.exp(np.mean(np.log(v))))


def normalized_aggregate(scores: dict, baseline: dict) -> tuple[float, int]:
    """Geometric mean of per-task ``score / baseline``; also the number of tasks used."""
    ratios = []
    for task, s in scores.items():
        b = baseline.get(task)
        if b is None or not (math.isfinite(s) and math.isfinite(b)) or b <= 0:
            continue
        ratios.append(s / b)
    return geometric_mean(ratios), len(ratios)


@dataclass
class RankReport:
    win_rate: dict
    skill: dict
    skipped: dict = field(default_factory=dict)


def win_rate_and_skill(table: dict, baseline: str) -> RankReport:
    """``table[model][task] = score`` (lower is better).

    Win rate counts every (rival, task) pair both models report; a tie counts
    one half. Skill is ``100 * (1 - geometric mean of score / baseline score)``.
    """
    models = sorted(table)
    if len(models) < 2:
        raise ValueError("need at least two models")
    if baseline not in table:
        raise ValueError(f"baseline {baseline!r} not in table")
    W, S, skipped = {}, {}, {}
    for m in models:
        wins = n = miss = 0
        for r in models:
            if r == m:
                continue
            for task in set(table[m]) | set(table[r]):
                a, b = table[m].get(task), table[r].get(task)
                if a is None or b is None or not (math.isfinite(a) and math.isfinite(b)):
                    miss += 1
                    continue
                n += 1
                wins += 1.0 if a < b else 0.5 if a == b else 0.0
        W[m] = wins / n if n else math.nan
        g, _ = normalized_aggregate(table[m], table[baseline])
        S[m] = 100.0 * (1.0 - g)
        skipped[m] = miss
    return RankReport(W, S, skipped)


def classification_metrics(preds, labels) -> tuple[float, float]:
    """Accuracy and macro-F1 over the classes seen in either sequence."""
    p, y = list(preds), list(labels)
    if len(p) != len(y) or not y:
        raise ValueError("preds and labels must be nonempty and equally long")
    acc = sum(a == b for a, b in zip(p, y)) / len(y)
    f1s = []
    for c in set(p) | set(y):
        tp = sum(a == c and b == c for a, b in zip(p, y))
        fp = sum(a == c and b != c for a, b in zip(p, y))
        fn = sum(a != c and b == c for a, b in zip(p, y))
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return acc, float(np.mean(f1s))


def sign_test(a, b) -> tuple[int, int, float]:
    """One-sided paired sign test that ``a`` tends to be below ``b``.

    Returns (wins, non-tied pairs, p-value). Ties are dropped.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    d = a - b
    wins, n = int((d < 0).sum()), int((d != 0).sum())
    if n == 0:
        return 0, 0, 1.0
    return wins, n, float(sps.binomtest(wins, n, 0.5, alternative="greater").pvalue)


LEADERBOARD_FIELDS = ("model", "task", "metric", "value")


def write_leaderboard(path, rows, config_hash: str | None = None) -> int:
    """Rows of ``(model, task, metric, value)``; returns the row count."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(LEADERBOARD_FIELDS)
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3]))])
            n += 1
    return n
