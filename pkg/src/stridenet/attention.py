"""Window partitioning, cyclic shifts, relative position bias and windowed attention.

Token grids are laid out ``(..., h, w, C)``. Leading batch axes are optional on
every function here; a single ``(h, w, C)`` grid works the same way as a
``(B, h, w, C)`` batch.

Cost model
----------
:func:`msa_cost` and :func:`wmsa_cost` count the two attention cost
polynomials exactly::

    MSA   : 4 h w C^2 + 2 (h w)^2 C
    W-MSA : 4 h w C^2 + 2 M^2 h w C

``M`` is read as the window side in tokens. Read as a head count the second
term would not have the units of a flop count, and only the window-side
reading makes W-MSA collapse to MSA when a single window covers the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, linear, softmax

__all__ = [
    "MASK_NEG",
    "WindowGeometry",
    "AttentionParams",
    "window_partition",
    "window_reverse",
    "cyclic_shift",
    "relative_position_index",
    "shift_attention_mask",
    "gather_position_bias",
    "window_attention",
    "msa_cost",
    "wmsa_cost",
    "COST_LIMIT",
]

MASK_NEG = -1e9
COST_LIMIT = 2**63 - 1


@dataclass(frozen=True)
class WindowGeometry:
    h: int
    w: int
    window: int
    shift: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window side must be positive, got {self.window}")
        if self.h % self.window or self.w % self.window:
            raise ValueError(
                f"grid {self.h}x{self.w} is not divisible by window side {self.window}"
            )
        if self.shift not in (0, self.window // 2):
            raise ValueError(
                f"shift must be 0 or {self.window // 2} for window {self.window}, got {self.shift}"
            )

    @property
    def num_windows(self) -> int:
        return (self.h // self.window) * (self.w // self.window)

    @property
    def tokens_per_window(self) -> int:
        return self.window * self.window


@dataclass
class AttentionParams:
    """Learned parameters of one windowed attention layer.

    ``qkv_weight`` stacks the query, key and value projections along its output
    axis (``C -> 3C``, each third split evenly across heads).
    """

    qkv_weight: Tensor
    qkv_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    bias_table: Tensor
    num_heads: int
    window: int

    def __post_init__(self):
        for field in ("qkv_weight", "qkv_bias", "proj_weight", "proj_bias", "bias_table"):
            setattr(self, field, as_tensor(getattr(self, field)))
        dim = self.proj_weight.shape[0]
        if self.num_heads < 1 or dim % self.num_heads:
            raise ValueError(f"channels {dim} not divisible by num_heads {self.num_heads}")
        if self.qkv_weight.shape != (dim, 3 * dim):
            raise ValueError(f"qkv weight shape {self.qkv_weight.shape} != {(dim, 3 * dim)}")
        expected = ((2 * self.window - 1) ** 2, self.num_heads)
        if self.bias_table.shape != expected:
            raise ValueError(f"bias table shape {self.bias_table.shape} != {expected}")

    @property
    def dim(self) -> int:
        return self.proj_weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


def window_partition(tokens, window: int) -> Tensor:
    """``(..., h, w, C) -> (..., n_win, M*M, C)`` with windows in row-major order."""
    x = as_tensor(tokens)
    *lead, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"grid {h}x{w} is not divisible by window side {window}")
    nh, nw = h // window, w // window
    k = len(lead)
    x = x.reshape(*lead, nh, window, nw, window, c)
    axes = list(range(k)) + [k, k + 2, k + 1, k + 3, k + 4]
    return x.transpose(axes).reshape(*lead, nh * nw, window * window, c)


def window_reverse(windows, geom: WindowGeometry) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    x = as_tensor(windows)
    *lead, n_win, n_tok, c = x.shape
    m = geom.window
    if n_win != geom.num_windows or n_tok != m * m:
        raise ValueError(
            f"got {n_win} windows of {n_tok} tokens, geometry {geom.h}x{geom.w}/M={m} "
            f"needs {geom.num_windows} of {m * m}"
        )
    nh, nw = geom.h // m, geom.w // m
    k = len(lead)
    x = x.reshape(*lead, nh, nw, m, m, c)
    axes = list(range(k)) + [k, k + 2, k + 1, k + 3, k + 4]
    return x.transpose(axes).reshape(*lead, geom.h, geom.w, c)


def cyclic_shift(tokens, dy: int, dx: int) -> Tensor:
    """``out[y, x] = in[(y - dy) mod h, (x - dx) mod w]`` over the two grid axes."""
    x = as_tensor(tokens)
    if dy == 0 and dx == 0:
        return x
    return x.roll((dy, dx), (-3, -2))


def relative_position_index(window: int) -> np.ndarray:
    """``(M^2, M^2)`` integer index into a ``(2M-1)^2`` bias table."""
    if window < 1:
        raise ValueError("window side must be >= 1")
    ys, xs = np.meshgrid(np.arange(window), np.arange(window), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])  # 2, M^2
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + (window - 1)
    return (rel[0] * (2 * window - 1) + rel[1]).astype(np.int64)


def shift_attention_mask(geom: WindowGeometry, dtype=np.float64) -> np.ndarray:
    """Additive mask ``(n_win, M^2, M^2)``: 0 within a region, ``MASK_NEG`` across.

    Region ids live on the shifted grid, using the slices ``[0, h-M)``,
    ``[h-M, h-shift)`` and ``[h-shift, h)`` per axis; the last band holds the
    tokens that wrapped around the border during the shift.
    """
    m, s = geom.window, geom.shift
    n_tok = m * m
    if s == 0:
        return np.zeros((geom.num_windows, n_tok, n_tok), dtype=dtype)
    ids = np.zeros((geom.h, geom.w), dtype=np.int64)
    bounds_h = (slice(0, -m), slice(-m, -s), slice(-s, None))
    bounds_w = (slice(0, -m), slice(-m, -s), slice(-s, None))
    region = 0
    for sh in bounds_h:
        for sw in bounds_w:
            ids[sh, sw] = region
            region += 1
    win = window_partition(ids[:, :, None].astype(np.float64), m).data[..., 0]
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, MASK_NEG, 0.0).astype(dtype)


def gather_position_bias(bias_table, window: int) -> Tensor:
    """Gather the table into ``B`` of shape ``(heads, M^2, M^2)``."""
    table = as_tensor(bias_table)
    idx = relative_position_index(window)
    return table.take(idx, axis=0).transpose(2, 0, 1)


def window_attention(x, params: AttentionParams, mask=None, return_weights: bool = False):
    """Multi-head attention inside each window with relative position bias.

    ``x`` is ``(..., n_win, N, C)``; ``mask`` (``(n_win, N, N)``) is added to
    the logits of every head. Returns the projected output, plus the attention
    weights ``(..., n_win, heads, N, N)`` if ``return_weights`` is set.
    """
    x = as_tensor(x)
    *lead, n_win, n_tok, c = x.shape
    if c != params.dim:
        raise ValueError(f"window tokens have {c} channels, params expect {params.dim}")
    if n_tok != params.window * params.window:
        raise ValueError(f"{n_tok} tokens per window, params expect {params.window ** 2}")
    heads, d = params.num_heads, params.head_dim
    k = len(lead)

    qkv = linear(x, params.qkv_weight, params.qkv_bias)
    qkv = qkv.reshape(*lead, n_win, n_tok, 3, heads, d)
    qkv = qkv.transpose([k + 2] + list(range(k)) + [k, k + 3, k + 1, k + 4])
    q, key, v = qkv[0], qkv[1], qkv[2]

    logits = (q * (1.0 / math.sqrt(d))) @ key.swapaxes(-1, -2)
    logits = logits + gather_position_bias(params.bias_table, params.window)
    if mask is not None:
        mask = np.asarray(mask, dtype=x.dtype)
        if mask.shape != (n_win, n_tok, n_tok):
            raise ValueError(f"mask shape {mask.shape} != {(n_win, n_tok, n_tok)}")
        logits = logits + Tensor(mask[:, None, :, :])
    attn = softmax(logits, axis=-1)

    out = attn @ v  # ..., n_win, heads, N, d
    axes = list(range(k)) + [k, k + 2, k + 1, k + 3]
    out = out.transpose(axes).reshape(*lead, n_win, n_tok, c)
    out = linear(out, params.proj_weight, params.proj_bias)
    if return_weights:
        return out, attn
    return out


def _check_cost(value: int) -> int:
    if value > COST_LIMIT:
        raise OverflowError(f"flop count {value} exceeds the 64-bit counter")
    return value


def _positive(**kw) -> None:
    for name, v in kw.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")


def msa_cost(h: int, w: int, c: int) -> int:
    """Global multi-head self-attention flops: ``4hwC^2 + 2(hw)^2 C``."""
    _positive(h=h, w=w, c=c)
    hw = h * w
    return _check_cost(4 * hw * c * c + 2 * hw * hw * c)


def wmsa_cost(h: int, w: int, c: int, window: int) -> int:
    """Windowed self-attention flops: ``4hwC^2 + 2M^2 hwC`` (``M`` = window side)."""
    _positive(h=h, w=w, c=c, window=window)
    if h % window or w % window:
        raise ValueError(f"grid {h}x{w} is not divisible by window side {window}")
    hw = h * w
    return _check_cost(4 * hw * c * c + 2 * window * window * hw * c)
