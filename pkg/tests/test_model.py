import numpy as np
import pytest
import torch

from promptts.decoder import MoEDecoder, QuantileForecast, enforce_quantile_monotonicity
from promptts.model import ModelConfig, build_model, collate, prepare, with_tokens
from promptts.numerics import Rng
from promptts.prompt import Covariate, Episode, Window

from helpers import TINY, batch_of, random_episode, tiny_model
from oracles import moe_loop_oracle


def test_moe_matches_loop_oracle():
    torch.manual_seed(0)
    dec = MoEDecoder(6, 3, 2, 4).double()
    r = Rng(1)
    H = torch.tensor(r.normal(size=(2, 2, 3, 6)))
    a = torch.softmax(torch.tensor(r.normal(size=(2, 3))), -1)
    assert np.max(np.abs(dec.decode(H, a).detach().numpy() - moe_loop_oracle(dec, H, a))) < 1e-10


def test_router_on_simplex_and_single_expert():
    torch.manual_seed(0)
    r = Rng(2)
    x = [torch.tensor(r.normal(size=(5, 8))) for _ in range(3)]
    a = MoEDecoder(8, 4, 3, 2).double().route(*x)
    assert torch.all(a >= 0) and torch.allclose(a.sum(-1), torch.ones(5, dtype=a.dtype), atol=1e-14)
    assert torch.equal(MoEDecoder(8, 1, 3, 2).double().route(*x), torch.ones(5, 1, dtype=a.dtype))
    with pytest.raises(ValueError):
        MoEDecoder(8, 0, 3, 2)


def test_quantile_monotonicity_sort():
    v = np.array([[[3.0, 0.0]], [[1.0, 2.0]], [[2.0, 1.0]]])
    f = enforce_quantile_monotonicity(QuantileForecast(v, (0.1, 0.5, 0.9)))
    assert np.all(np.diff(f.values, axis=0) >= 0)
    assert f.median().tolist() == [[2.0, 1.0]]


def test_forward_shapes_and_alpha():
    m = tiny_model()
    eps = [random_episode(Rng(i), K=i % 3) for i in range(3)]
    out = m(batch_of(eps))
    # every component is decoded; only target rows enter the loss
    assert tuple(out.quantiles.shape) == (3, len(TINY.quantiles), 3, 8)
    assert torch.allclose(out.alpha.sum(-1), torch.ones(3, dtype=out.alpha.dtype), atol=1e-12)


def test_batch_padding_invariance():
    m = tiny_model(1)
    a = random_episode(Rng(10), K=1, d_x=1, known=(True,), hist=8)
    b = random_episode(Rng(11), K=3, d_x=2, known=(True, False), hist=20)
    alone = m(batch_of([a])).quantiles[0, :, :1, :8]
    mixed = m(batch_of([a, b])).quantiles[0, :, :1, :8]
    assert torch.max(torch.abs(alone - mixed)) < 1e-10


def _swap_covs(ep, i, j):
    def sw(w):
        c = list(w.covariates)
        c[i], c[j] = c[j], c[i]
        return Window(w.targets, c, w.hist_len)
    return Episode([sw(w) for w in ep.examples], sw(ep.query), ep.meta)


def test_covariate_permutation_equivariance():
    m = tiny_model(2)
    ep = random_episode(Rng(3), K=2, known=(False, False, True))
    o1 = m(batch_of([ep]))
    o2 = m(batch_of([_swap_covs(ep, 0, 1)]))
    assert torch.max(torch.abs(o1.quantiles[:, :, :1] - o2.quantiles[:, :, :1])) < 1e-10
    # component order inside the patch stream follows the swap
    p1, p2 = o1.patches[0, -1], o2.patches[0, -1]
    assert torch.max(torch.abs(p1[1] - p2[2])) < 1e-10 and torch.max(torch.abs(p1[2] - p2[1])) < 1e-10


def test_zero_film_makes_query_patches_example_independent():
    m = tiny_model(3)
    ep = random_episode(Rng(4), K=2)
    other = random_episode(Rng(5), K=2)
    swapped = Episode(other.examples, ep.query, ep.meta)
    h1 = m(batch_of([ep])).patches[0, -1]
    h2 = m(batch_of([swapped])).patches[0, -1]
    assert torch.equal(h1, h2)


def test_notoks_skips_read_and_write():
    cfg = with_tokens(TINY, False)
    m = build_model(cfg, 0)
    with torch.no_grad():
        for layer in m.encoder.layers:
            layer.film_start.weight.normal_()
            layer.film_mid.weight.normal_()
    ep = random_episode(Rng(6), K=2)
    b = batch_of([ep], cfg)
    out = m(b, dump=True)
    d = out.dump
    assert torch.equal(d["layer0.token_read"], d["embed.tokens"])
    assert torch.equal(d["layer0.token_write"], d["layer0.fusion"])
    other = random_episode(Rng(7), K=2)
    h2 = m(batch_of([Episode(other.examples, ep.query, ep.meta)], cfg)).patches[0, -1]
    assert torch.equal(out.patches[0, -1], h2)


def test_build_model_is_seeded():
    a, b = tiny_model(5), tiny_model(5)
    for (n, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y), n


def test_prepare_rejects_bad_answer_shape():
    ep = random_episode(Rng(8))
    ep.meta["answer"] = np.zeros((2, 8))
    with pytest.raises(ValueError):
        prepare(ep, TINY)
