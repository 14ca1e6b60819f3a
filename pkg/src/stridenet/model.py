"""Hierarchical shifted-window transformer for terrain classification.

Data flow for the default configuration::

    image 224x224x3
      -> patch embed (4x4 patches, 48 -> 96, LayerNorm)      56x56x96
      -> stage 1: 2 blocks
      -> merge -> stage 2: 2 blocks                           28x28x192
      -> merge -> stage 3: 6 blocks                           14x14x384
      -> merge -> stage 4: 2 blocks                           7x7x768
      -> global average pool -> dropout -> linear -> softmax

Within each stage blocks alternate plain windows (even index) and shifted
windows (odd index). Weights live in :class:`SwinWeights`, a name -> array map
whose key set is a pure function of :class:`ModelConfig`.
"""

from __future__ import annotations

import functools
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import attention as att
from .tensor import Tensor, as_tensor, dropout, gelu, layer_norm, linear, make_rng, softmax

__all__ = [
    "ModelConfig",
    "SwinWeights",
    "TOY_CONFIG",
    "parameter_shapes",
    "init_weights",
    "patch_embed",
    "swin_block",
    "patch_merge",
    "global_average_pool",
    "forward_logits",
    "forward",
    "predict_proba",
    "block_layout",
    "model_cost",
    "WeightMismatchError",
]


class WeightMismatchError(ValueError):
    """Weight names or shapes disagree with the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 4
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    window: int = 7
    num_classes: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ValueError(f"depths {self.depths} and heads {self.heads} must pair up")
        if any(d < 2 or d % 2 for d in self.depths):
            raise ValueError(f"every stage depth must be even and positive, got {self.depths}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.hidden_dim(0) < 1:
            raise ValueError("mlp_ratio too small")
        for s in range(self.num_stages):
            grid, dim = self.stage_grid(s), self.stage_dim(s)
            if grid % self.window:
                raise ValueError(
                    f"stage {s} grid {grid} not divisible by window {self.window}"
                )
            if dim % self.heads[s]:
                raise ValueError(f"stage {s} channels {dim} not divisible by {self.heads[s]} heads")
            if s + 1 < self.num_stages and grid % 2:
                raise ValueError(f"stage {s} grid {grid} is odd, cannot merge")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_grid(self, s: int) -> int:
        return (self.image_size // self.patch_size) >> s

    def stage_dim(self, s: int) -> int:
        return self.embed_dim * 2**s

    def hidden_dim(self, s: int) -> int:
        return int(self.stage_dim(s) * self.mlp_ratio)

    def stage_shift(self, s: int) -> int:
        # a single window covering the grid gains nothing from shifting
        if self.stage_grid(s) <= self.window:
            return 0
        return self.window // 2

    @property
    def feature_dim(self) -> int:
        return self.stage_dim(self.num_stages - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"], d["heads"] = list(self.depths), list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


# reduced configuration used for gradient checks and the toy learning task
TOY_CONFIG = ModelConfig(
    image_size=32, patch_size=4, embed_dim=8, depths=(2, 2), heads=(2, 4), window=4
)


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Canonical, ordered name -> shape map for ``config``."""
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    p, d = config.patch_size, config.embed_dim
    shapes["patch_embed.proj.weight"] = (p * p * 3, d)
    shapes["patch_embed.proj.bias"] = (d,)
    shapes["patch_embed.norm.weight"] = (d,)
    shapes["patch_embed.norm.bias"] = (d,)
    table = (2 * config.window - 1) ** 2
    for s in range(config.num_stages):
        c = config.stage_dim(s)
        if s > 0:
            prev = config.stage_dim(s - 1)
            shapes[f"stages.{s}.merge.norm.weight"] = (4 * prev,)
            shapes[f"stages.{s}.merge.norm.bias"] = (4 * prev,)
            shapes[f"stages.{s}.merge.reduction.weight"] = (4 * prev, 2 * prev)
        hidden = config.hidden_dim(s)
        for b in range(config.depths[s]):
            pre = f"stages.{s}.blocks.{b}"
            shapes[f"{pre}.norm1.weight"] = (c,)
            shapes[f"{pre}.norm1.bias"] = (c,)
            shapes[f"{pre}.attn.qkv.weight"] = (c, 3 * c)
            shapes[f"{pre}.attn.qkv.bias"] = (3 * c,)
            shapes[f"{pre}.attn.proj.weight"] = (c, c)
            shapes[f"{pre}.attn.proj.bias"] = (c,)
            shapes[f"{pre}.attn.relative_position_bias_table"] = (table, config.heads[s])
            shapes[f"{pre}.norm2.weight"] = (c,)
            shapes[f"{pre}.norm2.bias"] = (c,)
            shapes[f"{pre}.mlp.fc1.weight"] = (c, hidden)
            shapes[f"{pre}.mlp.fc1.bias"] = (hidden,)
            shapes[f"{pre}.mlp.fc2.weight"] = (hidden, c)
            shapes[f"{pre}.mlp.fc2.bias"] = (c,)
    shapes["head.weight"] = (config.feature_dim, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


@dataclass
class SwinWeights:
    config: ModelConfig
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        expected = parameter_shapes(self.config)
        missing = [n for n in expected if n not in self.arrays]
        extra = [n for n in self.arrays if n not in expected]
        if missing or extra:
            raise WeightMismatchError(
                f"weight names do not match config: missing={missing[:5]} extra={extra[:5]}"
            )
        for name, shape in expected.items():
            if tuple(self.arrays[name].shape) != shape:
                raise WeightMismatchError(
                    f"tensor {name!r} has shape {tuple(self.arrays[name].shape)}, expected {shape}"
                )
        # canonical order
        self.arrays = OrderedDict((n, self.arrays[n]) for n in expected)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value)
        if value.shape != self.arrays[name].shape:
            raise WeightMismatchError(f"tensor {name!r}: shape {value.shape} != {self.arrays[name].shape}")
        self.arrays[name] = value

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def names(self) -> list[str]:
        return list(self.arrays)

    def astype(self, dtype) -> "SwinWeights":
        arrays = OrderedDict((n, a.astype(dtype)) for n, a in self.arrays.items())
        return SwinWeights(self.config, arrays, self.class_names)

    def copy(self) -> "SwinWeights":
        arrays = OrderedDict((n, a.copy()) for n, a in self.arrays.items())
        return SwinWeights(self.config, arrays, self.class_names)

    def as_tensors(self, requires_grad: bool = False) -> "OrderedDict[str, Tensor]":
        return OrderedDict(
            (n, Tensor(a, requires_grad=requires_grad, name=n)) for n, a in self.arrays.items()
        )

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_weights(config: ModelConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> SwinWeights:
    """Truncated-normal(``std``) matrices and bias tables, zero biases, unit LN scales."""
    rng = make_rng(seed)
    arrays = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm.weight") or ".norm1.weight" in name or ".norm2.weight" in name:
            a = np.ones(shape)
        elif name.endswith(".bias"):
            a = np.zeros(shape)
        else:
            a = _trunc_normal(rng, shape, std)
        arrays[name] = a.astype(dtype)
    return SwinWeights(config, arrays)


# -- building blocks ----------------------------------------------------------


def _param(params: Mapping, name: str) -> Tensor:
    return as_tensor(params[name])


def patch_tokens(image, patch: int) -> Tensor:
    """Flatten each ``P x P x 3`` block (rows, then columns, channel fastest)."""
    x = as_tensor(image)
    *lead, hgt, wid, ch = x.shape
    if hgt % patch or wid % patch:
        raise ValueError(f"image {hgt}x{wid} not divisible by patch size {patch}")
    k = len(lead)
    x = x.reshape(*lead, hgt // patch, patch, wid // patch, patch, ch)
    x = x.transpose(list(range(k)) + [k, k + 2, k + 1, k + 3, k + 4])
    return x.reshape(*lead, hgt // patch, wid // patch, patch * patch * ch)


def patch_embed(image, params: Mapping, patch: int) -> Tensor:
    x = patch_tokens(image, patch)
    x = linear(x, _param(params, "patch_embed.proj.weight"), _param(params, "patch_embed.proj.bias"))
    return layer_norm(x, _param(params, "patch_embed.norm.weight"), _param(params, "patch_embed.norm.bias"))


@functools.lru_cache(maxsize=64)
def _cached_mask(h: int, w: int, window: int, shift: int, dtype_str: str) -> np.ndarray:
    geom = att.WindowGeometry(h, w, window, shift)
    mask = att.shift_attention_mask(geom, dtype=np.dtype(dtype_str))
    mask.setflags(write=False)
    return mask


def swin_block(
    x,
    params: Mapping,
    prefix: str,
    num_heads: int,
    window: int,
    shift: int = 0,
    drop_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One attention sub-block plus its MLP sub-block, both pre-norm residual.

    ``shift > 0`` gives the shifted-window variant: tokens are rolled by
    ``-shift`` on both axes, attended with the region mask, and rolled back.
    """
    x = as_tensor(x)
    *lead, h, w, c = x.shape
    geom = att.WindowGeometry(h, w, window, shift)
    p = lambda n: _param(params, f"{prefix}.{n}")  # noqa: E731

    y = layer_norm(x, p("norm1.weight"), p("norm1.bias"))
    if shift:
        y = att.cyclic_shift(y, -shift, -shift)
    mask = _cached_mask(h, w, window, shift, x.dtype.str) if shift else None
    attn_params = att.AttentionParams(
        p("attn.qkv.weight"), p("attn.qkv.bias"), p("attn.proj.weight"), p("attn.proj.bias"),
        p("attn.relative_position_bias_table"), num_heads, window,
    )
    y = att.window_attention(att.window_partition(y, window), attn_params, mask)
    y = att.window_reverse(y, geom)
    if shift:
        y = att.cyclic_shift(y, shift, shift)
    y = dropout(y, drop_rate, rng, training)
    x = x + y

    y = layer_norm(x, p("norm2.weight"), p("norm2.bias"))
    y = gelu(linear(y, p("mlp.fc1.weight"), p("mlp.fc1.bias")))
    y = linear(y, p("mlp.fc2.weight"), p("mlp.fc2.bias"))
    y = dropout(y, drop_rate, rng, training)
    return x + y


def patch_merge(x, params: Mapping, prefix: str) -> Tensor:
    """2x2 neighbourhoods -> 4C (order (0,0),(1,0),(0,1),(1,1)) -> LN -> 2C."""
    x = as_tensor(x)
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"patch merge needs an even grid, got {h}x{w}")
    k = len(lead)
    # (row offset, col offset) with the row offset varying fastest
    x = x.reshape(*lead, h // 2, 2, w // 2, 2, c)
    x = x.transpose(list(range(k)) + [k, k + 2, k + 3, k + 1, k + 4])
    x = x.reshape(*lead, h // 2, w // 2, 4 * c)
    x = layer_norm(x, _param(params, f"{prefix}.norm.weight"), _param(params, f"{prefix}.norm.bias"))
    return linear(x, _param(params, f"{prefix}.reduction.weight"))


def global_average_pool(x) -> Tensor:
    """Per-channel mean over the two grid axes."""
    return as_tensor(x).mean(axis=(-3, -2))


def block_layout(config: ModelConfig) -> list[tuple[int, int, str]]:
    """``(stage, block, 'W-MSA' | 'SW-MSA')`` for every block in order."""
    return [
        (s, b, "SW-MSA" if b % 2 else "W-MSA")
        for s in range(config.num_stages)
        for b in range(config.depths[s])
    ]


def _as_params(weights) -> Mapping:
    if isinstance(weights, SwinWeights):
        return weights.arrays
    return weights


def forward_logits(
    image,
    weights,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Class logits for one image ``(H, W, 3)`` or a batch ``(B, H, W, 3)``."""
    params = _as_params(weights)
    image = as_tensor(image)
    if image.shape[-3:] != (config.image_size, config.image_size, 3):
        raise ValueError(
            f"expected image {config.image_size}x{config.image_size}x3, got {image.shape}"
        )
    x = patch_embed(image, params, config.patch_size)
    for s in range(config.num_stages):
        if s > 0:
            x = patch_merge(x, params, f"stages.{s}.merge")
        shift = config.stage_shift(s)
        for b in range(config.depths[s]):
            try:
                x = swin_block(
                    x, params, f"stages.{s}.blocks.{b}", config.heads[s], config.window,
                    shift if b % 2 else 0, config.dropout, training, rng,
                )
            except ValueError as exc:
                raise ValueError(f"stage {s} block {b}: {exc}") from exc
    v = global_average_pool(x)
    v = dropout(v, config.dropout, rng, training)
    return linear(v, _param(params, "head.weight"), _param(params, "head.bias"))


def forward(image, weights, config: ModelConfig, training: bool = False, rng=None) -> Tensor:
    """Class probabilities (softmax over the logits)."""
    return softmax(forward_logits(image, weights, config, training, rng), axis=-1)


def predict_proba(image, weights: SwinWeights) -> np.ndarray:
    """Inference-mode probabilities as a plain array."""
    return forward(image, weights, weights.config).data


@dataclass
class StageCost:
    stage: int
    grid: int
    channels: int
    depth: int
    wmsa_per_block: int
    msa_per_block: int

    @property
    def ratio(self) -> float:
        return self.msa_per_block / self.wmsa_per_block


@dataclass
class CostReport:
    stages: list[StageCost]

    @property
    def wmsa_total(self) -> int:
        return sum(s.depth * s.wmsa_per_block for s in self.stages)

    @property
    def msa_total(self) -> int:
        return sum(s.depth * s.msa_per_block for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "stages": [
                {**asdict(s), "ratio": s.ratio} for s in self.stages
            ],
            "wmsa_total": self.wmsa_total,
            "msa_total": self.msa_total,
            "ratio": self.msa_total / self.wmsa_total,
        }


def model_cost(config: ModelConfig) -> CostReport:
    """Per-stage attention cost of the windowed model against global attention."""
    stages = []
    for s in range(config.num_stages):
        g, c = config.stage_grid(s), config.stage_dim(s)
        stages.append(
            StageCost(s, g, c, config.depths[s], att.wmsa_cost(g, g, c, config.window), att.msa_cost(g, g, c))
        )
    return CostReport(stages)
