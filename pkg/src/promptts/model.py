"""Full model: patch embedding, encoder, MoE decoder, and episode collation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .decoder import DEFAULT_QUANTILES, MoEDecoder
from .encoder import Encoder, EncoderContext
from .layers import LayerNorm
from .preprocess import PatchEmbedder, Role, apply_norm
from .prompt import (
    NUM_ROLES,
    Block,
    Episode,
    PromptConfig,
    TokenRole,
    build_allow_masks,
    serialize_episode,
    slot_index,
)

_ROLE_ID = {Role.TARGET: 0, Role.PAST_COVARIATE: 1, Role.KNOWN_COVARIATE: 2}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_experts: int = 2
    patch_len: int = 8
    quantiles: tuple = DEFAULT_QUANTILES
    max_query_ctx: int = 512
    max_example_ctx: int = 256
    max_output: int = 64
    max_covariates: int = 8
    ffn_mult: int = 4
    use_tokens: bool = True

    @property
    def prompt(self) -> PromptConfig:
        return PromptConfig(self.patch_len, self.max_query_ctx, self.max_covariates)


@dataclass
class Prepared:
    """Serialized episode plus its normalized answer (if any)."""

    examples: list
    query: Block
    layouts: list
    answer: np.ndarray | None  # normalized, [d_x, H]
    answer_mask: np.ndarray | None
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.query.horizon

    @property
    def d_x(self) -> int:
        return len(self.query.targets)


def prepare(ep: Episode, cfg: ModelConfig) -> Prepared:
    blocks, q = serialize_episode(ep, cfg.prompt)
    layouts = [build_allow_masks(b) for b in blocks + [q]]
    ans = ep.answer
    ans_n = ans_m = None
    if ans is not None:
        ans = np.atleast_2d(ans)
        if ans.shape != (len(q.targets), ep.horizon):
            raise ValueError(f"answer shape {ans.shape} != ({len(q.targets)}, {ep.horizon})")
        ans_m = np.isfinite(ans)
        ans_n = np.stack(
            [np.where(ans_m[j], apply_norm(np.nan_to_num(ans[j]), c.stats), 0.0)
             for j, c in enumerate(q.targets)]
        )
    return Prepared(blocks, q, layouts, ans_n, ans_m, dict(ep.meta))


@dataclass
class Batch:
    feats: torch.Tensor  # [B, NB, S, P, 3p]
    comp_role: torch.Tensor  # [B, NB, S] long
    ctx: EncoderContext
    target_mask: torch.Tensor  # [B, S]
    num_hist_patches: int
    num_fut_patches: int
    horizon: int
    y: torch.Tensor | None  # [B, S, H]
    y_mask: torch.Tensor | None
    items: list


def collate(items: list, cfg: ModelConfig, dtype: torch.dtype | None = None) -> Batch:
    dtype = dtype or nx.dtype_for()
    p, R = cfg.patch_len, cfg.prompt.num_slots
    B = len(items)
    NB = max(len(it.examples) for it in items) + 1
    S = max(len(it.query.components) for it in items)
    Ph = max(b.num_hist_patches for it in items for b in it.examples + [it.query])
    Pf = max(it.query.num_fut_patches for it in items)
    P = Ph + Pf
    Hm = max(it.horizon for it in items)
    feats = np.zeros((B, NB, S, P, 3 * p))
    valid = np.zeros((B, NB, S, P), dtype=bool)
    role = np.zeros((B, NB, S), dtype=np.int64)
    allow = np.zeros((B, NB, R, S, P), dtype=bool)
    tok_valid = np.zeros((B, NB, R), dtype=bool)
    blk_valid = np.zeros((B, NB), dtype=bool)
    tmask = np.zeros((B, S), dtype=bool)
    y = np.zeros((B, S, Hm))
    ym = np.zeros((B, S, Hm), dtype=bool)
    has_y = all(it.answer is not None for it in items)
    for i, it in enumerate(items):
        blocks = list(it.examples) + [it.query]
        slots = list(range(len(it.examples))) + [NB - 1]
        for b, nb, lay in zip(blocks, slots, it.layouts):
            ph, pf = b.num_hist_patches, b.num_fut_patches
            lo = Ph - ph
            for s, comp in enumerate(b.components):
                feats[i, nb, s, lo : lo + ph + pf] = comp.patches.features
                valid[i, nb, s, lo : lo + ph + pf] = True
                role[i, nb, s] = _ROLE_ID[comp.role]
            ns = len(b.components)
            allow[i, nb, :, :ns, lo : lo + ph + pf] = lay.read_allow.reshape(R, ns, ph + pf)
            tok_valid[i, nb] = lay.valid
            blk_valid[i, nb] = True
        tmask[i, : it.d_x] = True
        if has_y:
            y[i, : it.d_x, : it.horizon] = it.answer
            ym[i, : it.d_x, : it.horizon] = it.answer_mask
    is_future = np.zeros((B, NB, S, P), dtype=bool)
    is_future[..., Ph:] = True
    t = lambda a: torch.as_tensor(a)  # noqa: E731
    ctx = EncoderContext(
        patch_valid=t(valid),
        is_future=t(is_future),
        read_allow=t(allow.reshape(B, NB, R, S * P)),
        token_valid=t(tok_valid),
        block_valid=t(blk_valid),
        positions=torch.arange(P, dtype=torch.float64),
        start_slot=slot_index(TokenRole.START, 0, cfg.max_covariates),
        mid_slot=slot_index(TokenRole.MID, 0, cfg.max_covariates),
        use_tokens=cfg.use_tokens,
    )
    return Batch(
        torch.as_tensor(feats, dtype=dtype),
        t(role),
        ctx,
        t(tmask),
        Ph,
        Pf,
        Hm,
        torch.as_tensor(y, dtype=dtype) if has_y else None,
        t(ym) if has_y else None,
        items,
    )


@dataclass
class ForwardOutput:
    quantiles: torch.Tensor  # [B, Q, S, H] normalized
    alpha: torch.Tensor  # [B, E]
    patches: torch.Tensor  # [B, NB, S, P, D] after final norm
    tokens: torch.Tensor  # [B, NB, R, D] after final norm
    dump: dict | None = None


def slot_roles(max_covariates: int) -> list:
    m = max_covariates
    return (
        [TokenRole.START, TokenRole.TARGET_HIST]
        + [TokenRole.EXOG] * m
        + [TokenRole.MID, TokenRole.TARGET_FUT]
        + [TokenRole.FUTURE_EXOG] * m
        + [TokenRole.END]
    )


class PromptModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.d_model
        self.embedder = PatchEmbedder(cfg.patch_len, D)
        self.series_role = nn.Parameter(torch.randn(3, D) * 0.02)
        self.token_role = nn.Parameter(torch.randn(NUM_ROLES, D) * 0.02)
        self.encoder = Encoder(D, cfg.n_layers, cfg.n_heads, cfg.ffn_mult)
        self.norm_patches = LayerNorm(D)
        self.norm_tokens = LayerNorm(D)
        self.decoder = MoEDecoder(D, cfg.n_experts, len(cfg.quantiles), cfg.patch_len)
        self.register_buffer(
            "slot_role_ids", torch.tensor([int(r) for r in slot_roles(cfg.max_covariates)]),
            persistent=False,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.series_role.dtype

    def embed(self, batch: Batch):
        H = self.embedder(batch.feats) + self.series_role[batch.comp_role].unsqueeze(-2)
        H = torch.where(batch.ctx.patch_valid.unsqueeze(-1), H, torch.zeros((), dtype=H.dtype))
        B, NB = batch.feats.shape[:2]
        T = self.token_role[self.slot_role_ids].expand(B, NB, -1, -1)
        return H, T

    def forward(self, batch: Batch, dump: bool = False) -> ForwardOutput:
        rec = {} if dump else None
        H, T = self.embed(batch)
        if rec is not None:
            rec["embed.patches"], rec["embed.tokens"] = H, T
        H, T = self.encoder(H, T, batch.ctx, rec)
        H, T = self.norm_patches(H), self.norm_tokens(T)
        ctx = batch.ctx
        H_fut = H[:, -1, :, batch.num_hist_patches :]
        fv = ctx.patch_valid[:, -1, :, batch.num_hist_patches :].unsqueeze(-1).to(H.dtype)
        fut_mean = (H_fut * fv).sum((1, 2)) / fv.sum((1, 2)).clamp_min(1.0)
        alpha = self.decoder.route(T[:, -1, ctx.start_slot], T[:, -1, ctx.mid_slot], fut_mean)
        yhat = self.decoder.decode(H_fut, alpha)[..., : batch.horizon]
        return ForwardOutput(yhat, alpha, H, T, rec)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype | None = None) -> PromptModel:
    g = torch.random.fork_rng(devices=[])
    with g:
        torch.manual_seed(seed)
        model = PromptModel(cfg)
    return model.to(dtype or nx.dtype_for())


def with_tokens(cfg: ModelConfig, use_tokens: bool) -> ModelConfig:
    return replace(cfg, use_tokens=use_tokens)
