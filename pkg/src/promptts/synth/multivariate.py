"""Multivariate systems with endogenous/exogenous roles and logged relations.

Every transform writes a log entry holding its name, parameters, interval,
base (or leader) index, target indices and, where noise is drawn, the seed of
its private stream. :func:`replay` rebuilds the system from the normalized
inputs and the log alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numerics import Rng

MIXING = ("linear_combination", "nonlinear_modulation")
MODIFYING = ("trend_modification", "seasonality_injection", "shock_injection")
LAGGED = ("lagged_influence", "cointegration", "granger")
NONLINEAR = ("log1p_abs", "exp_clipped", "signed_power_0.5", "signed_power_2", "tanh")
SEASON_ALPHA = 0.3
CLIP_SIGMAS = 5.0
MIN_ENDOGENOUS = 0.6


@dataclass
class MultivarSystem:
    series: list
    roles: list  # "endogenous" | "exogenous"
    log: list = field(default_factory=list)
    inputs: list = field(default_factory=list)  # normalized series before transforms
    flags: list = field(default_factory=list)

    @property
    def endogenous(self) -> list:
        return [i for i, r in enumerate(self.roles) if r == "endogenous"]

    @property
    def exogenous(self) -> list:
        return [i for i, r in enumerate(self.roles) if r == "exogenous"]


def mean_abs_normalize(x: np.ndarray) -> tuple[np.ndarray, bool]:
    s = float(np.mean(np.abs(x)))
    if s < 1e-12:
        return np.asarray(x, dtype=np.float64).copy(), False
    return np.asarray(x, dtype=np.float64) / s, True


def n_endogenous(n: int) -> int:
    return max(1, math.ceil(MIN_ENDOGENOUS * n - 1e-12))


def nonlinear_fn(name: str, x: np.ndarray) -> np.ndarray:
    if name == "log1p_abs":
        return np.log1p(np.abs(x))
    if name == "exp_clipped":
        return np.exp(np.clip(x, -3.0, 3.0))
    if name == "signed_power_0.5":
        return np.sign(x) * np.abs(x) ** 0.5
    if name == "signed_power_2":
        return np.sign(x) * np.abs(x) ** 2
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(name)


def decay(kind: str, n: int, tau: float = 1.0) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)
    if kind == "constant":
        return np.ones(n)
    if kind == "linear":
        return 1.0 - t / max(n, 1)
    if kind == "exponential":
        return np.exp(-t / tau)
    raise ValueError(kind)


# ---- single transforms (pure given parameters) ---------------------------


def linear_combination(y, x, alpha, beta, sigma, interval, noise_seed=0):
    a, b = interval
    out = y.copy()
    eps = Rng(noise_seed).normal(0.0, 1.0, b - a) * sigma if sigma > 0 else 0.0
    out[a:b] = alpha * x[a:b] + beta * y[a:b] + eps
    return out


def nonlinear_modulation(y, x, gamma, fn, interval):
    a, b = interval
    out = y.copy()
    out[a:b] = y[a:b] + gamma * nonlinear_fn(fn, x[a:b])
    return out


def trend_modification(y, factor, interval):
    a, b = interval
    t = np.arange(b - a, dtype=np.float64)
    m_old, c = np.polyfit(t, y[a:b], 1) if b - a > 1 else (0.0, float(y[a]))
    out = y.copy()
    out[a:b] = (y[a:b] - m_old * t - c) + factor * m_old * t
    return out


def seasonality_injection(y, x, amplitude, period, interval):
    a, b = interval
    t = np.arange(b - a, dtype=np.float64)
    xb = x[a:b]
    sd = xb.std()
    nx = (xb - xb.mean()) / (sd if sd > 0 else 1.0)
    out = y.copy()
    out[a:b] = y[a:b] + amplitude * np.sin(2 * math.pi * t / period) * (1.0 + SEASON_ALPHA * nx)
    return out


def shock_injection(y, sign, magnitude, decay_kind, tau, interval):
    a, b = interval
    out = y.copy()
    out[a:b] = y[a:b] + sign * magnitude * decay(decay_kind, b - a, tau)
    return out


def lagged_influence(y, x, alpha, lag):
    out = y.copy()
    out[lag:] = y[lag:] + alpha * x[:-lag]
    return out


def cointegration(y, x, lam, lag):
    eps = y - x
    out = y.copy()
    out[lag:] = y[lag:] - lam * eps[:-lag]
    return out


def granger(y, x, alpha, beta, K=8):
    out = y.copy()
    for k in range(1, K + 1):
        if k < len(y):
            out[k:] += alpha * math.exp(-beta * k) * x[:-k]
    return out


def clip_sigma(y, n_sigma: float = CLIP_SIGMAS, max_iter: int = 100):
    """Clip to mean +- n_sigma std, repeated until the clipped series satisfies
    the bound under its own statistics (clipping shrinks the std)."""
    y = np.asarray(y, dtype=np.float64)
    for _ in range(max_iter):
        mu, sd = float(y.mean()), float(y.std())
        lo, hi = mu - n_sigma * sd, mu + n_sigma * sd
        if y.min() >= lo and y.max() <= hi:
            return y
        y = np.clip(y, lo, hi)
    return y


def apply_entry(series: list, entry: dict) -> None:
    """Apply one logged transform in place on the list of arrays."""
    name, p, base = entry["name"], entry["params"], entry["base"]
    iv = tuple(entry.get("interval") or (0, len(series[0])))
    x = series[base].copy() if base is not None else None
    for j in entry["targets"]:
        y = series[j]
        if name == "linear_combination":
            series[j] = linear_combination(y, x, p["alpha"], p["beta"], p["sigma"], iv, p["noise_seed"] + j)
        elif name == "nonlinear_modulation":
            series[j] = nonlinear_modulation(y, x, p["gamma"], p["fn"], iv)
        elif name == "trend_modification":
            series[j] = trend_modification(y, p["factor"], iv)
        elif name == "seasonality_injection":
            series[j] = seasonality_injection(y, x, p["amplitude"], p["period"], iv)
        elif name == "shock_injection":
            series[j] = shock_injection(y, p["sign"], p["magnitude"], p["decay"], p["tau"], iv)
        elif name == "lagged_influence":
            series[j] = lagged_influence(y, x, p["alpha"], p["lag"])
        elif name == "cointegration":
            series[j] = cointegration(y, x, p["lambda"], p["lag"])
        elif name == "granger":
            series[j] = granger(y, x, p["alpha"], p["beta"], p["K"])
        else:
            raise ValueError(f"unknown transform {name!r}")


def replay(inputs: list, log: list) -> list:
    series = [np.asarray(s, dtype=np.float64).copy() for s in inputs]
    for e in log:
        apply_entry(series, e)
    return [clip_sigma(s) for s in series]


# ---- sampling ------------------------------------------------------------


def sample_interval(n: int, rng: Rng, min_cover: float = 0.25) -> tuple[int, int]:
    w = int(rng.integers(max(2, math.ceil(min_cover * n)), n + 1))
    a = int(rng.integers(0, n - w + 1))
    return a, a + w


def targets_for(name: str, base: int, roles: list, rng: Rng) -> list:
    endo = [i for i, r in enumerate(roles) if r == "endogenous"]
    if name in MIXING:
        cand = [i for i in endo if i != base]
        if not cand:
            return []
        k = int(rng.integers(1, len(cand) + 1))
        return sorted(int(i) for i in rng.choice(cand, size=k, replace=False))
    # modifying: all endogenous plus the base
    return sorted(set(endo) | {base})


def _sample_params(name: str, series: list, base: int, iv, rng: Rng) -> dict:
    a, b = iv if iv is not None else (0, len(series[0]))
    if name == "linear_combination":
        return {
            "alpha": float(rng.uniform(0.3, 0.6)),
            "beta": float(rng.uniform(0.3, 0.7)),
            "sigma": 0.1 * float(series[base][a:b].std()),
            "noise_seed": int(rng.integers(0, 2**31 - 1)),
        }
    if name == "nonlinear_modulation":
        return {"gamma": float(rng.uniform(0.1, 0.5)), "fn": str(rng.choice(NONLINEAR))}
    if name == "trend_modification":
        return {"factor": float(rng.choice([1.5, 0.5, -1.0]))}
    if name == "seasonality_injection":
        return {
            "amplitude": float(rng.uniform(0.2, 1.0)),
            "period": int(rng.integers(4, 65)),
        }
    if name == "shock_injection":
        return {
            "sign": float(rng.choice([-1.0, 1.0])),
            "magnitude": float(rng.uniform(0.5, 2.0)),
            "decay": str(rng.choice(["constant", "linear", "exponential"])),
            "tau": float(rng.uniform(0.1, 0.5)) * (b - a),
        }
    if name == "lagged_influence":
        return {"alpha": float(rng.uniform(0.2, 0.6)), "lag": int(rng.integers(1, 17))}
    if name == "cointegration":
        return {"lambda": float(rng.uniform(0.05, 0.3)), "lag": int(rng.integers(1, 17))}
    if name == "granger":
        return {"alpha": float(rng.uniform(0.1, 0.4)), "beta": float(rng.uniform(0.1, 0.5)), "K": 8}
    raise ValueError(name)


def build_multivariate(pool, n_series: int, rng: Rng, length: int | None = None,
                       max_transforms: int = 3) -> MultivarSystem:
    """Sample, normalize, assign roles, apply relations, clip."""
    if n_series < 2:
        raise ValueError("a multivariate system needs at least two series")
    if length is None:
        length = min(len(s) for s in pool)
    raw = []
    for _ in range(n_series):
        src = np.asarray(pool[int(rng.integers(0, len(pool)))], dtype=np.float64)
        off = int(rng.integers(0, len(src)))
        # cyclic slicing keeps any length available
        raw.append(np.take(src, np.arange(off, off + length), mode="wrap"))
    inputs, flags = [], []
    for x in raw:
        z, ok = mean_abs_normalize(x)
        inputs.append(z)
        flags.append("ok" if ok else "zero_mean_abs_skipped")
    n_endo = n_endogenous(n_series)
    perm = [int(i) for i in rng.permutation(n_series)]
    roles = ["exogenous"] * n_series
    for i in perm[:n_endo]:
        roles[i] = "endogenous"

    series = [z.copy() for z in inputs]
    log = []
    for _ in range(int(rng.integers(1, max_transforms + 1))):
        name = str(rng.choice(MIXING + MODIFYING))
        base = int(rng.integers(0, n_series))
        targets = targets_for(name, base, roles, rng)
        if not targets:
            continue
        iv = sample_interval(length, rng)
        entry = {"name": name, "params": _sample_params(name, series, base, iv, rng),
                 "interval": list(iv), "base": base, "targets": targets}
        if name == "seasonality_injection":
            entry["params"]["amplitude"] *= float(np.mean([series[j].std() for j in targets]))
        if name == "shock_injection":
            entry["params"]["magnitude"] *= float(np.mean([series[j].std() for j in targets]))
        apply_entry(series, entry)
        log.append(entry)
    if rng.random() < 0.5:
        name = str(rng.choice(LAGGED))
        leader = int(rng.integers(0, n_series))
        followers = [i for i in range(n_series) if roles[i] == "endogenous" and i != leader]
        if followers:
            entry = {"name": name, "params": _sample_params(name, series, leader, None, rng),
                     "interval": None, "base": leader, "targets": [int(rng.choice(followers))]}
            apply_entry(series, entry)
            log.append(entry)
    series = [clip_sigma(s) for s in series]
    return MultivarSystem(series, roles, log, inputs, flags)
