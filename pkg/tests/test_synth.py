import numpy as np
import pytest

from promptts.numerics import Rng
from promptts.synth import classify as C
from promptts.synth import demix as DM
from promptts.synth.kernelsynth import KernelSpec, basis_gram, kernelsynth, random_kernel, sample_basis
from promptts.synth.mixup import MixupConfig, mix, tsmixup, zscore
from promptts.synth.multivariate import (
    MIXING, build_multivariate, clip_sigma, linear_combination, n_endogenous, replay,
    shock_injection, trend_modification,
)


def acf(x, lag):
    x = x - x.mean()
    return float(np.dot(x[:-lag], x[lag:]) / np.dot(x, x))


# -- mixup


def test_mixup_single_segment_is_zscored():
    pool = [np.arange(300.0) ** 1.5]
    cfg = MixupConfig(k_max=1, len_min=128, len_max=256)
    x, info = tsmixup(pool, Rng(0), cfg)
    o, n = info["offsets"][0], info["length"]
    assert info["weights"] == [1.0]
    assert np.allclose(x, zscore(pool[0][o : o + n]), atol=1e-12)


def test_mixup_weights_on_simplex():
    pool = [Rng(i).normal(size=2048) for i in range(4)]
    r = Rng(1)
    for i in range(1000):
        _, info = tsmixup(pool, r.child(i))
        w = np.array(info["weights"])
        assert abs(w.sum() - 1.0) < 1e-12 and np.all(w >= 0)
        assert 128 <= info["length"] <= 2048


def test_mix_two_segments_oracle():
    a, b = Rng(2).normal(size=50) * 3 + 1, Rng(3).normal(size=50) - 4
    za = (a - a.mean()) / a.std()
    zb = (b - b.mean()) / b.std()
    assert np.allclose(mix([a, b], [0.5, 0.5]), (za + zb) / 2, atol=1e-14)


def test_mixup_empty_pool():
    with pytest.raises(ValueError):
        tsmixup([], Rng(0))


# -- kernelsynth


def test_constant_kernel_gives_constant_series():
    x = kernelsynth(KernelSpec("constant", {"value": 1.0}), 64, Rng(0))
    assert np.ptp(x) < 1e-3 * max(1.0, abs(x[0]))


def test_white_noise_lag1_autocorrelation_small():
    x = kernelsynth(KernelSpec("white_noise", {"variance": 1.0}), 2048, Rng(1))
    assert abs(acf(x, 1)) < 0.1


def test_periodic_kernel_autocorrelation_peaks_at_period():
    P, n = 24, 1024
    spec = sample_basis("periodic", n, Rng(0))
    spec.params.update(period=P / n, lengthscale=1.0, period_steps=P)
    x = kernelsynth(spec, n, Rng(5))
    lags = np.arange(P // 2, 3 * P // 2 + 1)
    assert lags[int(np.argmax([acf(x, int(l)) for l in lags]))] == P


def test_composed_gram_symmetric_psd():
    for i in range(20):
        spec = random_kernel(128, Rng(i))
        K = spec.gram(np.linspace(0, 1, 128))
        assert np.allclose(K, K.T, atol=1e-12)
        assert np.linalg.eigvalsh(0.5 * (K + K.T)).min() > -1e-6 * max(1.0, np.abs(K).max())


def test_unfactorizable_kernel_raises():
    bad = KernelSpec("linear", {"variance": -1.0, "offset": 0.0})
    with pytest.raises(ValueError):
        kernelsynth(bad, 16, Rng(0))


def test_basis_gram_unknown():
    with pytest.raises(ValueError):
        basis_gram("matern", {}, np.zeros(3))


# -- multivariate


def test_linear_combination_constants():
    y = linear_combination(np.full(10, 4.0), np.full(10, 2.0), 0.5, 0.5, 0.0, (0, 10))
    assert np.allclose(y, 3.0, atol=0)


def test_shock_constant_decay_adds_magnitude():
    y0 = Rng(0).normal(size=20)
    y = shock_injection(y0, 1.0, 2.0, "constant", 1.0, (5, 15))
    assert np.allclose(y[5:15] - y0[5:15], 2.0, atol=1e-15)
    assert np.array_equal(y[:5], y0[:5]) and np.array_equal(y[15:], y0[15:])


def test_trend_reversal():
    t = np.arange(30.0)
    y = trend_modification(2.0 * t + 1.0, -1.0, (0, 30))
    assert np.polyfit(t, y, 1)[0] == pytest.approx(-2.0, abs=1e-9)


def test_clipping_spike():
    y = Rng(0).normal(size=500)
    y[100] += 100 * y.std()
    z = clip_sigma(y)
    assert z[100] <= z.mean() + 5 * z.std() + 1e-12


@pytest.mark.parametrize("n", range(2, 11))
def test_endogenous_fraction(n):
    assert n_endogenous(n) / n >= 0.6


def test_multivariate_invariants_and_replay():
    base = [Rng(i).normal(size=600).cumsum() for i in range(5)]
    for i in range(30):
        sys_ = build_multivariate(base, int(Rng(i).integers(2, 7)), Rng(100 + i), length=512)
        n = len(sys_.series)
        assert len(sys_.endogenous) / n >= 0.6
        for e in sys_.log:
            if e["name"] in MIXING:
                assert e["base"] not in e["targets"]
                assert all(sys_.roles[j] == "endogenous" for j in e["targets"])
            for k in ("name", "params", "base", "targets"):
                assert k in e
        for s in sys_.series:
            assert np.all(np.abs(s - s.mean()) <= 5 * s.std() + 1e-9)
        again = replay(sys_.inputs, sys_.log)
        assert all(np.array_equal(a, b) for a, b in zip(again, sys_.series))


def test_multivariate_needs_two_series():
    with pytest.raises(ValueError):
        build_multivariate([np.ones(10)], 1, Rng(0))


def test_zero_series_flagged():
    sys_ = build_multivariate([np.zeros(64), np.ones(64)], 2, Rng(3), length=64)
    assert set(sys_.flags) <= {"ok", "zero_mean_abs_skipped"}


# -- demix and classification families


def test_demix_generators_deterministic():
    for c in DM.CONCEPTS:
        r = Rng(1)
        rg = DM.sample_ranges(c, r)
        p = DM.sample_params(c, rg, 128, r)
        a, b = DM.generate(c, p, 128), DM.generate(c, p, 128)
        assert a.shape == (128,) and np.array_equal(a, b)


def test_demix_trend_is_linear():
    p = DM.sample_params("trend", DM.sample_ranges("trend", Rng(0)), 64, Rng(1))
    p["noise"] = 0.0
    x = DM.generate("trend", p, 64)
    assert np.allclose(np.diff(x, 2), 0.0, atol=1e-10)


@pytest.mark.parametrize("family", sorted(C.FAMILIES))
def test_class_families_produce_series(family):
    for cls in C.FAMILIES[family]:
        x = C.sample_class_series(family, cls, 64, Rng(0))
        assert x.shape == (64,) and np.all(np.isfinite(x))


def test_waveform_frequency_bands_separate():
    def dom(cls, seed):
        x = C.sample_class_series("waveform", cls, 256, Rng(seed))
        f = np.abs(np.fft.rfft(x - x.mean()))
        return np.argmax(f) / 256

    lows = [dom(C.FAMILIES["waveform"][0], s) for s in range(10)]
    highs = [dom(C.FAMILIES["waveform"][-1], s) for s in range(10)]
    assert max(lows) < min(highs)
