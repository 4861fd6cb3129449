"""Dense tensor substrate: differentiable primitives, seeded RNG, gradient checks.

Tensors are ``torch.Tensor``; reverse-mode rules come from torch autograd. The
wrappers here add the explicit shape discipline the model code relies on
(no broadcasting except over leading batch axes) and the -1e9 additive
masking convention used throughout the encoder.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch

MASK_VALUE = -1e9

_MODE_DTYPES = {"test": torch.float64, "train": torch.float32}
_mode = "train"


class ShapeError(ValueError):
    """Operands whose shapes cannot be combined by an op."""

    def __init__(self, op: str, a: Sequence[int], b: Sequence[int], detail: str = ""):
        self.op = op
        self.shapes = (tuple(a), tuple(b))
        msg = f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def get_mode() -> str:
    return _mode


def set_mode(mode: str) -> None:
    """Select 64-bit ("test") or 32-bit ("train") arithmetic for new tensors."""
    global _mode
    if mode not in _MODE_DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}")
    _mode = mode


def dtype_for(mode: str | None = None) -> torch.dtype:
    return _MODE_DTYPES[mode or _mode]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[torch.dtype]:
    prev = _mode
    set_mode(mode)
    try:
        yield dtype_for(mode)
    finally:
        set_mode(prev)


def tensor(data, dtype: torch.dtype | None = None, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype or dtype_for())
    if requires_grad:
        t.requires_grad_(True)
    return t


# --------------------------------------------------------------------------
# RNG


def _derive_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Seeded Philox stream with named, order-independent children.

    ``Rng(7).child("synth")`` always yields the same stream regardless of
    how many draws the parent has made.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, name: str | int) -> "Rng":
        return Rng(_derive_key(self.seed, str(name)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self._gen.integers(0, 2**63 - 1)))
        return g

    # Thin delegation; keeps call sites short.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        """Integers in [low, high) like numpy."""
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self._gen.permutation(x)

    def dirichlet(self, alpha):
        return self._gen.dirichlet(alpha)

    def random(self, size=None):
        return self._gen.random(size)


# --------------------------------------------------------------------------
# primitives


def _check_leading(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    """b must equal a's shape, or a's trailing dims (leading-axis batching)."""
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and tuple(a.shape[a.ndim - b.ndim :]) == tuple(b.shape):
        return
    raise ShapeError(op, a.shape, b.shape, "only leading-axis batching is allowed")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_leading("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_leading("mul", a, b)
    return a * b


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``b[..., k, n]`` with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, "inner dimensions differ")
    if b.ndim > 2 and tuple(a.shape[:-2]) != tuple(b.shape[:-2]):
        raise ShapeError("matmul", a.shape, b.shape, "batch dimensions differ")
    return torch.matmul(a, b)


def softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=-1)


def layer_norm(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, weight.shape)
    return torch.nn.functional.layer_norm(x, (d,), weight, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # tanh approximation; smooth everywhere for finite-difference checks
    return torch.nn.functional.gelu(x, approximate="tanh")


def concat(xs: Sequence[torch.Tensor], axis: int = -1) -> torch.Tensor:
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError("concat", ref.shape, x.shape, f"axis={axis}")
    return torch.cat(list(xs), dim=ax)


def take(x: torch.Tensor, index, axis: int = 0) -> torch.Tensor:
    """Gather along ``axis`` with an integer index vector."""
    idx = torch.as_tensor(index, dtype=torch.long)
    if idx.ndim != 1:
        raise ShapeError("take", x.shape, idx.shape, "index must be 1-D")
    return torch.index_select(x, axis % x.ndim, idx)


def mean(x: torch.Tensor, axis: int) -> torch.Tensor:
    return x.mean(dim=axis)


def additive_mask(allow: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """Boolean allow-mask to additive form (0 where allowed, -1e9 elsewhere)."""
    zero = torch.zeros((), dtype=dtype)
    neg = torch.full((), MASK_VALUE, dtype=dtype)
    return torch.where(allow, zero, neg)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention.

    Shapes: q ``[..., h, Lq, d]``, k ``[..., h, Lk, d]``, v ``[..., h, Lk, dv]``,
    mask ``[..., Lq, Lk]`` (no head axis) either boolean (allow) or additive.
    A missing mask is an all-zero additive mask, so both paths coincide.
    """
    if q.ndim < 3 or k.shape[:-1] != v.shape[:-1] or q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention", q.shape, k.shape)
    if tuple(q.shape[:-2]) != tuple(k.shape[:-2]):
        raise ShapeError("attention", q.shape, k.shape, "batch/head dims differ")
    lq, lk = q.shape[-2], k.shape[-2]
    want = tuple(q.shape[:-3]) + (lq, lk)
    if mask is None:
        mask = torch.zeros(want, dtype=q.dtype)
    elif tuple(mask.shape) != want:
        raise ShapeError("attention", q.shape, mask.shape, f"mask must be {want}")
    if mask.dtype == torch.bool:
        mask = additive_mask(mask, q.dtype)
    scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    scores = scores + mask.unsqueeze(-3)
    w = torch.softmax(scores, dim=-1)
    out = torch.matmul(w, v)
    return (out, w) if return_weights else out


def rotary_tables(positions: torch.Tensor, dim: int, base: float = 10000.0, dtype=None):
    if dim % 2:
        raise ValueError(f"rotary dimension must be even, got {dim}")
    dtype = dtype or dtype_for()
    inv = 1.0 / (base ** (torch.arange(0, dim, 2, dtype=torch.float64) / dim))
    ang = positions.to(torch.float64)[:, None] * inv[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rotary(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate feature pairs of ``x[..., L, d]`` by angles set by ``positions[L]``."""
    if positions.ndim != 1 or positions.shape[0] != x.shape[-2]:
        raise ShapeError("apply_rotary", x.shape, positions.shape)
    cos, sin = rotary_tables(positions, x.shape[-1], base, x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    r1 = x1 * cos - x2 * sin
    r2 = x1 * sin + x2 * cos
    return torch.stack([r1, r2], dim=-1).flatten(-2)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    failure: str | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error <= self.tol


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
    tol: float = 1e-4,
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` against central differences.

    The error for a parameter tensor is ``max_i |a_i - n_i| / max_j |a_j|``
    (infinity-norm relative error). The denominator is floored at 1e-6 so that
    dead parameters are judged on absolute error; identical gradients report 0.
    ``max_entries`` limits the numeric side to a random subset of coordinates.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    names = list(params)
    tensors = [params[n] for n in names]
    report = GradCheckReport(tol=tol)
    for n, t in zip(names, tensors):
        if t.dtype != torch.float64:
            report.failure = f"{n}: grad_check needs float64, got {t.dtype}"
            return report

    loss = f()
    if not torch.isfinite(loss):
        report.failure = "non-finite loss at base point"
        return report
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = rng or Rng(0)
    for n, t, g in zip(names, tensors, grads):
        g = torch.zeros_like(t) if g is None else g.detach()
        flat_idx = np.arange(t.numel())
        if max_entries is not None and t.numel() > max_entries:
            flat_idx = np.sort(rng.choice(t.numel(), size=max_entries, replace=False))
        flat = t.data.view(-1)
        num = np.empty(len(flat_idx))
        for j, i in enumerate(flat_idx):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                report.failure = f"non-finite loss perturbing {n}[{int(i)}]"
                return report
            num[j] = (fp - fm) / (2 * h)
        ana = g.reshape(-1).numpy()
        scale = max(float(np.abs(ana).max(initial=0.0)), 1e-6)
        diff = np.abs(ana[flat_idx] - num).max(initial=0.0)
        report.errors[n] = 0.0 if diff == 0.0 else float(diff / scale)
    return report
