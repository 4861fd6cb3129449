import numpy as np
import pytest
import torch

from helpers import TINY, tiny_model
from promptts import infer as I
from promptts.decoder import enforce_quantile_monotonicity, QuantileForecast
from promptts.model import collate, prepare
from promptts.numerics import Rng
from promptts.preprocess import denormalize
from promptts.prompt import Covariate, Episode, TokenRole, Window, slot_index


def series(n=200, seed=0):
    t = np.arange(n)
    return np.sin(2 * np.pi * t / 12) + 0.1 * Rng(seed).normal(size=n) + 3


# -- nearest-code decoding


def test_nearest_code_exact_and_near():
    assert I.nearest_code(9.0, [1.0, 9.0]) == 1
    assert I.nearest_code(4.9, [1.0, 9.0]) == 0


def test_nearest_code_tie_lower_index():
    assert I.nearest_code(5.0, [9.0, 1.0]) == 0
    assert I.nearest_code(5.0, [1.0, 9.0]) == 0


# -- forecasting


def test_query_only_forecast_matches_bare_episode():
    m = tiny_model(0)
    x = series()
    fc = I.forecast(m, x, horizon=8, k_examples=0)
    ep = Episode([], Window([x[-64:]], [], 64), {"task": "forecast", "horizon": 8})
    qn, stats, _ = I.run_episode(m, ep)
    ref = np.sort(denormalize(qn[:, 0], stats[0]), axis=0)
    assert np.array_equal(fc.values[:, 0], ref)


def test_query_truncation_right_aligned():
    m = tiny_model(1)
    x = series(300)
    y = x.copy()
    y[: 300 - 64] = -50.0
    a = I.forecast(m, x, horizon=8, k_examples=0).values
    b = I.forecast(m, y, horizon=8, k_examples=0).values
    assert np.array_equal(a, b)
    ep = I.build_forecast_episode(x[None], [], 8, 0, I.InferenceConfig().capped(m), Rng(0), 4)
    assert np.array_equal(ep.query.targets[0], x[-64:])


def test_example_windows_from_earliest_history():
    wins = I.example_windows(1000, 16, 4, 64, (64, 64), Rng(0), 4)
    assert wins == [(0, 64), (80, 64), (160, 64), (240, 64)]
    assert wins[-1][0] + 64 + 16 <= 1000 - 64
    # not enough room before the query: spread over the whole history
    spread = I.example_windows(200, 16, 4, 64, (64, 128), Rng(0), 4)
    assert len(spread) == 4 and all(s + h + 16 <= 200 for s, h in spread)


def test_forecast_shapes_sorted_and_covariates():
    m = tiny_model(2)
    x = series(300)
    cov = [Covariate(series(308, 1), known=True), Covariate(series(300, 2), known=False)]
    fc = I.forecast(m, x, cov, horizon=8, rng=Rng(3))
    assert fc.values.shape == (len(TINY.quantiles), 1, 8)
    assert np.all(np.diff(fc.values, axis=0) >= 0)


def test_chunked_horizon():
    m = tiny_model(3)
    fc = I.forecast(m, series(300), horizon=TINY.max_output + 5, rng=Rng(0))
    assert fc.values.shape[-1] == TINY.max_output + 5 and np.all(np.isfinite(fc.values))


def test_forecast_history_too_short():
    with pytest.raises(I.InsufficientHistory):
        I.forecast(tiny_model(0), np.ones(2), horizon=4)
    with pytest.raises(I.InsufficientHistory):
        I.forecast(tiny_model(0), series(100), [Covariate(np.ones(100), known=True)], horizon=4)


def test_monotone_forecast_is_kept():
    v = np.sort(np.random.default_rng(0).normal(size=(9, 1, 4)), axis=0)
    out = enforce_quantile_monotonicity(QuantileForecast(v, TINY.quantiles))
    assert np.array_equal(out.values, v)


# -- classification


def test_classify_returns_support_class():
    m = tiny_model(4)
    r = Rng(5)
    sup = [(r.normal(size=32), lab) for lab in ("up", "down", "up", "flat")]
    for i in range(10):
        p = I.classify(m, r.normal(size=32), sup, Rng(i))
        assert p.label in {"up", "down", "flat"}
        assert sorted(p.codes.values()) == [1.0, 5.0, 9.0]
        assert p.codes[p.label] == [1.0, 5.0, 9.0][I.nearest_code(p.score, sorted(p.codes.values()))]


def test_classify_needs_two_classes():
    with pytest.raises(ValueError):
        I.classify(tiny_model(0), np.ones(16), [(np.ones(16), "a"), (np.zeros(16), "a")])


def test_classify_warns_on_many_classes():
    sup = [(Rng(i).normal(size=16), i) for i in range(9)]
    with pytest.warns(RuntimeWarning):
        I.classification_prompt(np.ones(16), sup, Rng(0), 4)


# -- embedding


def _embed_parts(m, x, covs):
    H = m.cfg.patch_len
    ep = Episode([], Window([x], covs, len(x)), {"task": "embedding", "horizon": H})
    b = collate([prepare(ep, m.cfg)], m.cfg, m.dtype)
    return b.ctx.token_valid[0, -1].numpy(), b.ctx.patch_valid[0, -1].numpy()


def test_embedding_dimension_and_determinism():
    m = tiny_model(6)
    x = series(48)
    cov = [Covariate(series(48, 1))]
    e1 = I.extract_embedding(m, x, cov)
    e2 = I.extract_embedding(m, x, cov)
    tv, pv = _embed_parts(m, x, cov)
    assert e1.shape == ((tv.sum() + pv.sum()) * TINY.d_model,)
    assert np.array_equal(e1, e2)


def test_embedding_covariate_permutation_index_map():
    m = tiny_model(7)
    D, mc = TINY.d_model, TINY.max_covariates
    x = series(48)
    c1, c2 = Covariate(series(48, 1)), Covariate(series(48, 2) * 5)
    e = I.extract_embedding(m, x, [c1, c2])
    f = I.extract_embedding(m, x, [c2, c1])
    assert not np.array_equal(e, f)
    tv, pv = _embed_parts(m, x, [c1, c2])
    # token slot permutation induced by the swap
    sigma = np.arange(len(tv))
    for role in (TokenRole.EXOG, TokenRole.FUTURE_EXOG):
        a, b = slot_index(role, 0, mc), slot_index(role, 1, mc)
        sigma[a], sigma[b] = b, a
    slots = np.flatnonzero(tv)
    pos = {s: i for i, s in enumerate(slots)}
    n_tok = len(slots)
    tok_e = e[: n_tok * D].reshape(n_tok, D)
    tok_f = f[: n_tok * D].reshape(n_tok, D)
    for s in slots:
        assert np.max(np.abs(tok_f[pos[sigma[s]]] - tok_e[pos[s]])) < 1e-10
    # patch rows follow the component swap
    S, P = pv.shape
    rows = {(s, p): i for i, (s, p) in enumerate(zip(*np.nonzero(pv)))}
    comp = [0, 2, 1] + list(range(3, S))
    pat_e = e[n_tok * D :].reshape(-1, D)
    pat_f = f[n_tok * D :].reshape(-1, D)
    for (s, p), i in rows.items():
        assert np.max(np.abs(pat_f[rows[(comp[s], p)]] - pat_e[i])) < 1e-10
