"""Task builders. Each returns an :class:`~promptts.prompt.Episode`.

The task is carried only by what the example futures demonstrate; ``meta``
records diagnostics and the query answer but is never fed to the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..numerics import Rng
from ..preprocess import norm_stats
from ..prompt import Covariate, Episode, Window, _window_to_dict
from ..synth import classify as cls_synth
from ..synth import demix as demix_synth
from . import transforms as tf
from .pool import SeriesSystem

ANOMALY_KINDS = ("spike", "level_shift", "noise")
AMBIGUITY_FAMILIES = ("forecast", "anomaly", "reconstruction")
FORECAST_TASKS = ("forecast", "support_forecast", "forecast_transformed")


class InsufficientLength(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    horizons: tuple = (8, 16, 32)
    example_hist: tuple = (32, 128)
    query_hist: tuple = (64, 256)
    task_len: tuple = (32, 64)
    k_max: int = 4
    patch_len: int = 8
    min_hist: int = 16
    max_covariates: int = 8


def _meta(task: str, rng: Rng, **kw) -> dict:
    d = {"task": task, "seed": int(rng.seed)}
    d.update(kw)
    return d


def _randint(rng: Rng, lo_hi) -> int:
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


# ---------------------------------------------------------------- forecasting


def plan_windows(T: int, hists: list, q_hist: int, H: int, rng: Rng) -> tuple[list, int]:
    """Chronological, non-overlapping window starts; the query window comes last."""
    need = sum(h + H for h in hists) + q_hist + H
    if T < need:
        raise InsufficientLength(f"series of length {T} is shorter than the required {need}")
    slack = T - need
    gaps = np.floor(rng.dirichlet(np.ones(len(hists) + 2)) * slack).astype(int)
    starts, pos = [], int(gaps[0])
    for i, h in enumerate(hists):
        starts.append(pos)
        pos += h + H + int(gaps[i + 1])
    return starts, pos


def _fit_lengths(T, hists, q_hist, H, min_hist):
    need = sum(h + H for h in hists) + q_hist + H
    if need <= T:
        return hists, q_hist
    room = T - H * (len(hists) + 1)
    tot = sum(hists) + q_hist
    if room < min_hist * (len(hists) + 1):
        raise InsufficientLength(
            f"series of length {T} is shorter than the required "
            f"{(min_hist + H) * (len(hists) + 1)}"
        )
    f = room / tot
    return [max(min_hist, int(h * f)) for h in hists], max(min_hist, int(q_hist * f))


def _covs(system: SeriesSystem, start: int, hist: int, H: int, max_cov: int) -> list:
    out = []
    for c, known in list(zip(system.covariates, system.known))[:max_cov]:
        end = start + hist + (H if known else 0)
        out.append(Covariate(np.asarray(c[start:end]), known=bool(known)))
    return out


def _example(system, start, hist, H, max_cov) -> Window:
    return Window([t[start : start + hist + H] for t in system.targets],
                  _covs(system, start, hist, H, max_cov), hist)


def _query(system, start, hist, H, max_cov) -> tuple[Window, np.ndarray]:
    w = Window([t[start : start + hist] for t in system.targets], _covs(system, start, hist, H, max_cov), hist)
    ans = np.stack([t[start + hist : start + hist + H] for t in system.targets])
    return w, ans


def build_forecast(system: SeriesSystem, rng: Rng, K: int | None = None, cfg=EpisodeConfig(),
                   horizon: int | None = None, hist_lens=None, query_hist=None,
                   task: str = "forecast") -> Episode:
    """Examples and query cut from one series/system at non-overlapping offsets."""
    K = int(rng.integers(0, cfg.k_max + 1)) if K is None else int(K)
    H = int(rng.choice(cfg.horizons)) if horizon is None else int(horizon)
    hists = [_randint(rng, cfg.example_hist) for _ in range(K)] if hist_lens is None else list(hist_lens)
    qh = _randint(rng, cfg.query_hist) if query_hist is None else int(query_hist)
    if hist_lens is None and query_hist is None:
        hists, qh = _fit_lengths(system.length, hists, qh, H, cfg.min_hist)
    starts, qs = plan_windows(system.length, hists, qh, H, rng)
    examples = [_example(system, s, h, H, cfg.max_covariates) for s, h in zip(starts, hists)]
    query, ans = _query(system, qs, qh, H, cfg.max_covariates)
    return Episode(examples, query, _meta(task, rng, horizon=H, answer=ans, source=system.source))


def _transform_window_future(w: Window, transforms) -> Window:
    h = w.hist_len
    targets = [np.concatenate([t[:h], tf.compose(transforms, t[h:], t[:h])]) for t in w.targets]
    return Window(targets, w.covariates, h)


def build_forecast_transformed(system: SeriesSystem, rng: Rng, K: int | None = None,
                               cfg=EpisodeConfig(), transforms=None, **kw) -> Episode:
    """Forecasting whose example and query futures share one transform composition."""
    if K is None:
        K = int(rng.integers(1, cfg.k_max + 1))
    ep = build_forecast(system, rng, K, cfg, task="forecast_transformed", **kw)
    if transforms is None:
        transforms = tf.sample_composition(rng)
    examples = [_transform_window_future(w, transforms) for w in ep.examples]
    q = ep.query
    ans = np.stack([tf.compose(transforms, a, t) for a, t in zip(ep.answer, q.targets)])
    meta = dict(ep.meta, answer=ans, transforms=[t.to_dict() for t in transforms])
    return Episode(examples, q, meta)


# ------------------------------------------------------ imputation / anomaly


def patch_mask(length: int, rate: float, block: int, rng: Rng) -> np.ndarray:
    """Mask whole blocks until about ``rate`` of the window is covered."""
    m = np.zeros(length)
    n_blocks = max(1, length // block)
    k = int(round(rate * length / block))
    if k <= 0:
        return m
    for b in rng.choice(n_blocks, size=min(k, n_blocks), replace=False):
        m[int(b) * block : (int(b) + 1) * block] = 1.0
    return m


def _random_windows(T: int, L: int, n: int, rng: Rng) -> list:
    if T < L:
        raise InsufficientLength(f"series of length {T} is shorter than the required {L}")
    return [int(rng.integers(0, T - L + 1)) for _ in range(n)]


def build_imputation(system: SeriesSystem, rng: Rng, K: int | None = None, cfg=EpisodeConfig(),
                     mask_rate: float | None = None, length: int | None = None) -> Episode:
    K = int(rng.integers(1, cfg.k_max + 1)) if K is None else int(K)
    L = _randint(rng, cfg.task_len) if length is None else int(length)
    rate = float(rng.uniform(0.1, 0.4)) if mask_rate is None else float(mask_rate)
    starts = _random_windows(system.length, L, K + 1, rng)
    wins, masks = [], []
    for s in starts:
        clean = [np.asarray(t[s : s + L], dtype=np.float64) for t in system.targets]
        M = patch_mask(L, rate, cfg.patch_len, rng)
        wins.append(clean)
        masks.append(M)
    ex = [
        Window([np.concatenate([c * (1 - M), c]) for c in clean], [Covariate(M.copy())], L)
        for clean, M in zip(wins[:-1], masks[:-1])
    ]
    qc, qM = wins[-1], masks[-1]
    query = Window([c * (1 - qM) for c in qc], [Covariate(qM.copy())], L)
    return Episode(ex, query, _meta("imputation", rng, horizon=L, answer=np.stack(qc),
                                    mask_rate=rate, query_mask=qM))


def inject_anomaly(x: np.ndarray, kind: str, rng: Rng, events=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x + eps * M, M)``. ``events`` fixes ``[(start, width), ...]``."""
    x = np.asarray(x, dtype=np.float64)
    L = len(x)
    sd = float(x.std()) or 1.0
    M = np.zeros(L)
    eps = np.zeros(L)
    if events is None:
        if kind == "spike":
            n = int(rng.integers(1, 4))
            events = [(int(rng.integers(0, L)), int(rng.integers(1, 3))) for _ in range(n)]
        else:
            w = int(rng.integers(max(1, L // 8), max(2, L // 3) + 1))
            events = [(int(rng.integers(0, L - w + 1)), w)]
    for a, w in events:
        sl = slice(a, min(L, a + w))
        sign = float(rng.choice([-1.0, 1.0]))
        if kind == "spike":
            eps[sl] = sign * float(rng.uniform(3.0, 6.0)) * sd
        elif kind == "level_shift":
            eps[sl] = sign * float(rng.uniform(1.0, 3.0)) * sd
        elif kind == "noise":
            n = sl.stop - sl.start
            eps[sl] = rng.normal(0.0, float(rng.uniform(0.5, 1.5)) * sd, n)
        else:
            raise ValueError(f"unknown anomaly kind {kind!r}")
        M[sl] = 1.0
    return x + eps * M, M


def build_anomaly(system: SeriesSystem, rng: Rng, K: int | None = None, cfg=EpisodeConfig(),
                  kind: str | None = None, length: int | None = None, events=None) -> Episode:
    """Corrupted history in, binary anomaly mask out; one anomaly kind per episode."""
    K = int(rng.integers(1, cfg.k_max + 1)) if K is None else int(K)
    kind = str(rng.choice(ANOMALY_KINDS)) if kind is None else kind
    L = _randint(rng, cfg.task_len) if length is None else int(length)
    starts = _random_windows(system.length, L, K + 1, rng)
    x = system.targets[0]
    ex = []
    for s in starts[:-1]:
        corr, M = inject_anomaly(x[s : s + L], kind, rng)
        ex.append(Window([np.concatenate([corr, M])], [], L))
    corr, M = inject_anomaly(x[starts[-1] : starts[-1] + L], kind, rng, events)
    return Episode(ex, Window([corr], [], L), _meta("anomaly", rng, horizon=L, answer=M[None], kind=kind))


# ------------------------------------------------------------ classification


def label_codes(n_classes: int, rng: Rng) -> np.ndarray:
    return rng.permutation(np.linspace(1.0, 9.0, n_classes))


def compensate(code: float, hist: np.ndarray) -> float:
    """Raw value that the model's history normalization maps back to ``code``."""
    st = norm_stats(hist, np.isfinite(hist), len(hist))
    return code * st.scale + st.loc


def classification_episode(classes: list, sample_fn, rng: Rng, cfg=EpisodeConfig(), K: int | None = None,
                           task: str = "classification", length: int | None = None,
                           query_class: int | None = None, codes=None, **meta) -> Episode:
    """Shared construction; ``sample_fn(class_name, length, rng)`` draws one series."""
    C = len(classes)
    if C < 2:
        raise ValueError("classification needs at least two classes")
    K = int(rng.integers(C, max(C, cfg.k_max) + 1)) if K is None else int(K)
    if K < C:
        raise ValueError(f"support of {K} cannot cover {C} classes")
    codes = label_codes(C, rng) if codes is None else np.asarray(codes, dtype=np.float64)
    L = _randint(rng, cfg.task_len) if length is None else int(length)
    H = cfg.patch_len
    labels = list(range(C)) + [int(rng.integers(0, C)) for _ in range(K - C)]
    labels = [int(v) for v in rng.permutation(labels)]
    if set(labels) != set(range(C)):
        raise ValueError("a class is absent from the support set")
    ex = []
    for y in labels:
        x = np.asarray(sample_fn(classes[y], L, rng), dtype=np.float64)
        ex.append(Window([np.concatenate([x, np.full(H, compensate(codes[y], x))])], [], L))
    qy = int(rng.integers(0, C)) if query_class is None else int(query_class)
    xq = np.asarray(sample_fn(classes[qy], L, rng), dtype=np.float64)
    ans = np.full((1, H), compensate(codes[qy], xq))
    return Episode(ex, Window([xq], [], L), _meta(
        task, rng, horizon=H, answer=ans, classes=list(classes), codes=codes.tolist(),
        support_labels=labels, query_label=qy, **meta))


def build_classification(rng: Rng, cfg=EpisodeConfig(), n_classes: int | None = None,
                         K: int | None = None, **kw) -> Episode:
    """Classes are the structure of the generating kernel."""
    C = int(rng.integers(2, len(cls_synth.KERNEL_CLASSES) + 1)) if n_classes is None else n_classes
    classes = [str(c) for c in rng.choice(cls_synth.KERNEL_CLASSES, size=C, replace=False)]
    return classification_episode(classes, cls_synth.kernel_labeled_series, rng, cfg, K,
                                  task="classification", family="kernel", **kw)


def build_synthetic_classification(rng: Rng, cfg=EpisodeConfig(), family: str | None = None,
                                   n_classes: int | None = None, K: int | None = None, **kw) -> Episode:
    family = str(rng.choice(sorted(cls_synth.FAMILIES))) if family is None else family
    names = cls_synth.FAMILIES[family]
    C = int(rng.integers(2, len(names) + 1)) if n_classes is None else n_classes
    classes = [str(c) for c in rng.choice(names, size=C, replace=False)]
    fn = lambda c, n, r: cls_synth.sample_class_series(family, c, n, r)  # noqa: E731
    return classification_episode(classes, fn, rng, cfg, K, task="synthetic_classification",
                                  family=family, **kw)


# --------------------------------------------------------------------- demix


def build_demix(rng: Rng, cfg=EpisodeConfig(), K: int | None = None, n_sources: int | None = None,
                mode: str | None = None, concepts=None, target: int | None = None) -> Episode:
    K = int(rng.integers(1, cfg.k_max + 1)) if K is None else int(K)
    if concepts is None:
        M = int(rng.integers(2, 5)) if n_sources is None else int(n_sources)
        concepts = [str(c) for c in rng.choice(demix_synth.CONCEPTS, size=M, replace=False)]
    concepts = list(concepts)
    M = len(concepts)
    c_star = int(rng.integers(0, M)) if target is None else int(target)
    mode = str(rng.choice(["future", "reconstruction"])) if mode is None else mode
    ranges = [demix_synth.sample_ranges(c, rng) for c in concepts]
    if mode == "future":
        Lh, F = _randint(rng, cfg.task_len), int(rng.choice(cfg.horizons))
    else:
        Lh = F = _randint(rng, cfg.task_len)
    total = Lh + F if mode == "future" else F
    windows, params_log = [], []
    for _ in range(K + 1):
        params = [demix_synth.sample_params(c, r, total, rng) for c, r in zip(concepts, ranges)]
        sources = [demix_synth.generate(c, p, total) for c, p in zip(concepts, params)]
        mixture = np.sum(sources, axis=0)
        tgt = sources[c_star]
        if mode == "future":
            windows.append((mixture[:Lh], tgt[Lh : Lh + F]))
        else:
            windows.append((mixture[:F], tgt[:F]))
        params_log.append(params)
    ex = [Window([np.concatenate([h, f])], [], len(h)) for h, f in windows[:-1]]
    qh, qf = windows[-1]
    return Episode(ex, Window([qh], [], len(qh)), _meta(
        "demix", rng, horizon=F, answer=qf[None], concepts=concepts, target_index=c_star,
        mode=mode, source_params=params_log, window_length=total))


# -------------------------------------------------------------- ambiguity


def sample_ambiguity_family(rng: Rng) -> str:
    return str(AMBIGUITY_FAMILIES[int(rng.integers(0, len(AMBIGUITY_FAMILIES)))])


def build_cross_task_ambiguity(system: SeriesSystem, rng: Rng, cfg=EpisodeConfig(),
                               family: str | None = None, K: int | None = None) -> Episode:
    """Fixed (anomaly-bearing) query window; the family decides the demonstrated output.

    The query window depends only on ``rng.child("query")`` so episodes with
    the same seed share query bytes whatever the family.
    """
    rq, rs = rng.child("query"), rng.child("support")
    family = sample_ambiguity_family(rng.child("family")) if family is None else family
    if family not in AMBIGUITY_FAMILIES:
        raise ValueError(f"{family!r} is not ambiguity-eligible")
    kind = str(rq.choice(ANOMALY_KINDS))
    L = _randint(rq, cfg.task_len)
    H = int(rq.choice(cfg.horizons))
    x = system.targets[0]
    T = len(x)
    if T < 2 * (L + H):
        raise InsufficientLength(f"series of length {T} is shorter than the required {2 * (L + H)}")
    qs = T - (L + H) - int(rq.integers(0, max(1, T // 4 - (L + H)) + 1))
    qs = max(qs, L + H)
    qcorr, qM = inject_anomaly(x[qs : qs + L], kind, rq)
    K = int(rs.integers(1, cfg.k_max + 1)) if K is None else int(K)

    def output(s, clean, corr, M):
        if family == "forecast":
            return x[s + L : s + L + H]
        if family == "anomaly":
            return M
        return clean

    ex = []
    for _ in range(K):
        s = int(rs.integers(0, qs - (L + H) + 1))
        clean = x[s : s + L]
        corr, M = inject_anomaly(clean, kind, rs)
        ex.append(Window([np.concatenate([corr, output(s, clean, corr, M)])], [], L))
    ans = output(qs, x[qs : qs + L], qcorr, qM)
    return Episode(ex, Window([qcorr], [], L), _meta(
        "cross_task_ambiguity", rng, horizon=len(ans), answer=np.asarray(ans)[None],
        family=family, kind=kind))


def strip_examples(ep: Episode) -> Episode:
    return Episode([], ep.query, dict(ep.meta))


def window_bytes(w: Window) -> bytes:
    return json.dumps(_window_to_dict(w), sort_keys=True).encode()
