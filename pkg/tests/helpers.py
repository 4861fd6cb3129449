"""Small random episodes and models shared by the test modules."""

import numpy as np

from promptts.model import ModelConfig, build_model, collate, prepare
from promptts.numerics import Rng
from promptts.prompt import Covariate, Episode, Window

# criterion number -> one-line PASS/FAIL summary, printed at session end
ACCEPTANCE = {}

TINY = ModelConfig(d_model=16, n_layers=2, n_heads=2, n_experts=2, patch_len=4,
                   max_query_ctx=64, max_example_ctx=64, max_output=16, max_covariates=3)


def random_episode(r: Rng, K=2, d_x=1, known=(True, False), hist=12, H=8, q_hist=None) -> Episode:
    q_hist = hist if q_hist is None else q_hist

    def win(h, with_future):
        n = h + (H if with_future else 0)
        tg = [r.normal(size=n) * 2 + 1 for _ in range(d_x)]
        cv = [Covariate(r.normal(size=h + (H if k else 0)), known=bool(k)) for k in known]
        return Window(tg, cv, h)

    ex = [win(hist, True) for _ in range(K)]
    q = win(q_hist, False)
    ans = r.normal(size=(d_x, H))
    return Episode(ex, q, {"task": "forecast", "seed": r.seed, "horizon": H, "answer": ans})


def tiny_model(seed=0, cfg=TINY):
    return build_model(cfg, seed)


def batch_of(episodes, cfg=TINY):
    return collate([prepare(e, cfg) for e in episodes], cfg)
