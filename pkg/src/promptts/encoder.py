"""Hierarchical multi-scope encoder.

Tensor layout for a collated batch:

* patches ``H``: ``[B, NB, S, P, D]`` with the query as the last block;
* tokens ``T``: ``[B, NB, R, D]``.

Each layer runs, in order: temporal self-attention, fusion across series,
token read, token self-attention, cross-example attention (query START/MID
over example START/MID) and the FiLM token write into query patches, then
position-wise feed-forward blocks on patches and tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import Dense, FeedForward, LayerNorm, MultiHeadAttention


@dataclass
class EncoderContext:
    """Masks shared by all layers."""

    patch_valid: torch.Tensor  # [B, NB, S, P]
    is_future: torch.Tensor  # [B, NB, S, P]
    read_allow: torch.Tensor  # [B, NB, R, S*P]
    token_valid: torch.Tensor  # [B, NB, R]
    block_valid: torch.Tensor  # [B, NB]; last block is the query
    positions: torch.Tensor  # [P] patch index used for rotary phases
    start_slot: int = 0
    mid_slot: int = 10
    use_tokens: bool = True


def _keep(valid: torch.Tensor, new: torch.Tensor, old: torch.Tensor) -> torch.Tensor:
    return torch.where(valid.unsqueeze(-1), new, old)


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_mult: int = 4):
        super().__init__()
        self.temporal = MultiHeadAttention(d_model, n_heads)
        self.fusion = MultiHeadAttention(d_model, n_heads)
        self.read = MultiHeadAttention(d_model, n_heads)
        self.token_self = MultiHeadAttention(d_model, n_heads)
        self.cross = MultiHeadAttention(d_model, n_heads)
        self.film_start_norm = LayerNorm(d_model)
        self.film_mid_norm = LayerNorm(d_model)
        self.film_start = Dense(d_model, 2 * d_model, zero_init=True)
        self.film_mid = Dense(d_model, 2 * d_model, zero_init=True)
        self.patch_ffn = FeedForward(d_model, ffn_mult)
        self.token_ffn = FeedForward(d_model, ffn_mult)

    # -- stages ---------------------------------------------------------

    def temporal_self_attention(self, H, patch_valid, is_future, positions):
        """Per-component attention along patches; history cannot look at future."""
        P = H.shape[-2]
        key_ok = patch_valid.unsqueeze(-2).expand(*patch_valid.shape, P)
        q_hist = ~is_future
        blocked = q_hist.unsqueeze(-1) & is_future.unsqueeze(-2)
        allow = key_ok & ~blocked
        out = H + self.temporal(H, mask=allow, positions=positions)
        return _keep(patch_valid, out, H)

    def fusion_attention(self, H, patch_valid):
        """Attention across series at each patch index."""
        Ht = H.transpose(-3, -2)  # [B, NB, P, S, D]
        v = patch_valid.transpose(-2, -1)  # [B, NB, P, S]
        S = Ht.shape[-2]
        allow = v.unsqueeze(-2).expand(*v.shape, S)
        out = Ht + self.fusion(Ht, mask=allow)
        return _keep(patch_valid, out.transpose(-3, -2), H)

    def token_read(self, T, H, read_allow):
        """Tokens query their allowed patch regions; tokens with no region pass through."""
        flat = H.reshape(*H.shape[:-3], -1, H.shape[-1])
        out = T + self.read(T, flat, mask=read_allow)
        return _keep(read_allow.any(-1), out, T)

    def token_self_attention(self, T, token_valid):
        R = T.shape[-2]
        allow = token_valid.unsqueeze(-2).expand(*token_valid.shape, R)
        out = T + self.token_self(T, mask=allow)
        return _keep(token_valid, out, T)

    def cross_example_attention(self, T, block_valid, start_slot, mid_slot):
        """Query START/MID attend over example START/MID; identity without examples."""
        if T.shape[1] < 2:
            return T
        sel = [start_slot, mid_slot]
        U_q = T[:, -1, sel]  # [B, 2, D]
        U_ex = T[:, :-1, sel].reshape(T.shape[0], -1, T.shape[-1])  # [B, 2N, D]
        key_ok = block_valid[:, :-1].repeat_interleave(2, dim=1)  # [B, 2N]
        allow = key_ok.unsqueeze(1).expand(-1, 2, -1)
        upd = U_q + self.cross(U_q, U_ex, mask=allow)
        has_ex = key_ok.any(-1).view(-1, 1, 1)
        upd = torch.where(has_ex, upd, U_q)
        T = T.clone()
        T[:, -1, sel] = upd
        return T

    def film_params(self, T_q, start_slot, mid_slot):
        gs, bs = self.film_start(self.film_start_norm(T_q[:, start_slot])).chunk(2, dim=-1)
        gm, bm = self.film_mid(self.film_mid_norm(T_q[:, mid_slot])).chunk(2, dim=-1)
        return gs, bs, gm, bm

    def token_write(self, H, T, is_future, start_slot, mid_slot):
        """FiLM into query patches: START on all, then MID on future patches."""
        gs, bs, gm, bm = self.film_params(T[:, -1], start_slot, mid_slot)
        H_q = H[:, -1]  # [B, S, P, D]
        e = lambda a: a[:, None, None, :]  # noqa: E731
        H_q = H_q * (1 + e(gs)) + e(bs)
        fut = is_future[:, -1].unsqueeze(-1)
        H_q = torch.where(fut, H_q * (1 + e(gm)) + e(bm), H_q)
        return torch.cat([H[:, :-1], H_q.unsqueeze(1)], dim=1)

    # -- full layer -----------------------------------------------------

    def forward(self, H, T, ctx: EncoderContext, dump: dict | None = None, prefix: str = ""):
        def rec(name, val):
            if dump is not None:
                dump[prefix + name] = val

        H = self.temporal_self_attention(H, ctx.patch_valid, ctx.is_future, ctx.positions)
        rec("temporal", H)
        H = self.fusion_attention(H, ctx.patch_valid)
        rec("fusion", H)
        if ctx.use_tokens:
            T = self.token_read(T, H, ctx.read_allow)
        rec("token_read", T)
        T = self.token_self_attention(T, ctx.token_valid)
        rec("token_self", T)
        T = self.cross_example_attention(T, ctx.block_valid, ctx.start_slot, ctx.mid_slot)
        rec("cross_example", T)
        if ctx.use_tokens:
            H = self.token_write(H, T, ctx.is_future, ctx.start_slot, ctx.mid_slot)
        rec("token_write", H)
        H = _keep(ctx.patch_valid, self.patch_ffn(H), H)
        T = _keep(ctx.token_valid, self.token_ffn(T), T)
        rec("ffn_patches", H)
        rec("ffn_tokens", T)
        return H, T


class Encoder(nn.Module):
    def __init__(self, d_model: int, n_layers: int, n_heads: int, ffn_mult: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d_model, n_heads, ffn_mult) for _ in range(n_layers))

    def forward(self, H, T, ctx: EncoderContext, dump: dict | None = None):
        for i, layer in enumerate(self.layers):
            H, T = layer(H, T, ctx, dump, prefix=f"layer{i}.")
        return H, T
