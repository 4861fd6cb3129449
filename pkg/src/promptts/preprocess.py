"""Per-component normalization, relative time index, patching and patch embedding."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import ResidualBlock

EPS = 1e-6


class Role(str, enum.Enum):
    TARGET = "target"
    PAST_COVARIATE = "past_covariate"
    KNOWN_COVARIATE = "known_covariate"


@dataclass
class SeriesComponent:
    """One 1-D series. ``values`` spans history plus whatever future is present."""

    values: np.ndarray
    mask: np.ndarray
    role: Role
    hist_len: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError(f"values {self.values.shape} vs mask {self.mask.shape}")
        # missing entries hold zero; the mask is the only missingness signal
        self.values = np.where(self.mask, np.nan_to_num(self.values), 0.0)

    @classmethod
    def from_values(cls, values, role=Role.TARGET, hist_len=None) -> "SeriesComponent":
        v = np.asarray(values, dtype=np.float64)
        return cls(v, np.isfinite(v), Role(role), len(v) if hist_len is None else hist_len)

    @property
    def future(self) -> np.ndarray:
        return self.values[self.hist_len :]


@dataclass(frozen=True)
class NormStats:
    loc: float
    scale: float
    degenerate: bool = False


def norm_stats(values: np.ndarray, mask: np.ndarray, hist_len: int) -> NormStats:
    """Mean and population std over the observed history points."""
    if hist_len < 1:
        raise ValueError("normalization needs hist_len >= 1")
    obs = np.asarray(values[:hist_len], dtype=np.float64)[np.asarray(mask[:hist_len], bool)]
    if obs.size == 0:
        warnings.warn("all-masked history; using loc=0, scale=1", RuntimeWarning, stacklevel=2)
        return NormStats(0.0, 1.0, degenerate=True)
    return NormStats(float(obs.mean()), float(obs.std()))


def apply_norm(values: np.ndarray, stats: NormStats, eps: float = EPS) -> np.ndarray:
    return np.arcsinh((np.asarray(values, dtype=np.float64) - stats.loc) / (stats.scale + eps))


def denormalize(z, stats: NormStats, eps: float = EPS):
    if isinstance(z, torch.Tensor):
        return torch.sinh(z) * (stats.scale + eps) + stats.loc
    return np.sinh(np.asarray(z, dtype=np.float64)) * (stats.scale + eps) + stats.loc


def normalize(comp: SeriesComponent, eps: float = EPS) -> tuple[np.ndarray, NormStats]:
    stats = norm_stats(comp.values, comp.mask, comp.hist_len)
    z = apply_norm(comp.values, stats, eps)
    return np.where(comp.mask, z, 0.0), stats


def time_index(T: int, H: int, C: int) -> np.ndarray:
    """Relative index ``[-T/C, ..., 0, ..., (H-1)/C]`` (zero at the first future step)."""
    if C <= 0:
        raise ValueError("C must be positive")
    return np.arange(-T, H, dtype=np.float64) / C


def ordinal_encode(values) -> tuple[np.ndarray, dict]:
    """Map categorical labels to 0, 1, ... in order of first appearance."""
    mapping: dict = {}
    codes = np.empty(len(values), dtype=np.float64)
    for i, v in enumerate(values):
        codes[i] = mapping.setdefault(v, len(mapping))
    return codes, mapping


def num_patches(n: int, p: int) -> int:
    return -(-n // p)


@dataclass
class PatchInputs:
    """Unembedded patches ``[P, 3p]`` (values, index, mask) for one component."""

    features: np.ndarray
    num_hist_patches: int
    num_fut_patches: int


def patchify(
    normalized: np.ndarray,
    mask: np.ndarray,
    hist_len: int,
    horizon: int,
    p: int,
    context_len: int,
) -> PatchInputs:
    """Cut one component into patches; history is left-padded, future right-padded.

    ``normalized``/``mask`` cover ``hist_len`` history steps followed by up to
    ``horizon`` future steps (shorter arrays mean the rest of the future is
    unobserved).
    """
    if p <= 0:
        raise ValueError(f"patch length must be positive, got {p}")
    ph, pf = num_patches(hist_len, p), num_patches(horizon, p)
    lh, lf = ph * p, pf * p
    vals = np.zeros(lh + lf)
    obs = np.zeros(lh + lf)
    n = min(len(normalized), hist_len + horizon)
    off = lh - hist_len
    vals[off : off + n] = normalized[:n]
    obs[off : off + n] = mask[:n]
    idx = np.arange(-lh, lf, dtype=np.float64) / context_len
    feats = np.concatenate(
        [vals.reshape(-1, p), idx.reshape(-1, p), obs.reshape(-1, p)], axis=1
    )
    return PatchInputs(feats, ph, pf)


class PatchEmbedder(nn.Module):
    """f_phi: R^{3p} -> R^D as a residual MLP."""

    def __init__(self, patch_len: int, d_model: int):
        super().__init__()
        self.patch_len = patch_len
        self.net = ResidualBlock(3 * patch_len, d_model, d_model)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)


@dataclass
class PatchSet:
    embedded: torch.Tensor
    num_hist_patches: int
    num_fut_patches: int


def patch_embed(
    normalized: np.ndarray,
    mask: np.ndarray,
    hist_len: int,
    horizon: int,
    embedder: PatchEmbedder,
    context_len: int,
) -> PatchSet:
    pin = patchify(normalized, mask, hist_len, horizon, embedder.patch_len, context_len)
    w = embedder.net.hidden.weight
    emb = embedder(torch.as_tensor(pin.features, dtype=w.dtype))
    return PatchSet(emb, pin.num_hist_patches, pin.num_fut_patches)


def padded_length(n: int, p: int) -> int:
    return int(math.ceil(n / p)) * p
