"""Composite blocks: convolutional stage, shifted-MLP encoding block, fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError, ShapeError
from .ops import (
    AttentionParams,
    ConvParams,
    LinearParams,
    NormParams,
    channel_linear,
    check_mode,
    conv2d,
    cyclic_shift,
    dropout,
    dwconv,
    layernorm,
    mish,
    multi_head_attention,
    shift_offsets,
)
from .tensor import DEFAULT_DTYPE, Tensor, add, permute, reshape


@dataclass
class ConvStage:
    conv: ConvParams  # 3x3, padding 1
    pointwise: ConvParams  # 1x1

    def __post_init__(self):
        if self.pointwise.kernel != 1:
            raise ContractError("pointwise convolution must have a 1x1 kernel")

    @classmethod
    def init(cls, c_in, c_out, rng, dtype=DEFAULT_DTYPE):
        return cls(
            ConvParams.init(c_in, c_out, 3, rng, padding=1, dtype=dtype),
            ConvParams.init(c_out, c_out, 1, rng, padding=0, dtype=dtype),
        )

    @property
    def in_channels(self):
        return self.conv.in_channels

    @property
    def out_channels(self):
        return self.pointwise.out_channels

    def layers(self):
        return {"conv": self.conv, "pointwise": self.pointwise}


def conv_stage_forward(x: Tensor, stage: ConvStage) -> Tensor:
    """conv3x3 -> Mish -> conv1x1; spatial size is preserved.

    The padded 3x3 convolution is well defined down to 1x1 inputs, which the
    deepest decoder level reaches for 32-pixel crops.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv stage expects [B,C,H,W], got {list(x.shape)}")
    return conv2d(mish(conv2d(x, stage.conv)), stage.pointwise)


@dataclass
class ShiftedMlpBlock:
    lin1: LinearParams  # C -> C'
    dw: ConvParams  # depthwise on C'
    lin2: LinearParams  # C' -> C
    rate: float = 0.1
    width_offsets: list = field(default_factory=list)  # length C
    height_offsets: list = field(default_factory=list)  # length C'

    def __post_init__(self):
        c, hidden = self.lin1.in_features, self.lin1.out_features
        if self.lin2.out_features != c or self.lin2.in_features != hidden:
            raise ShapeError(
                f"lin2 must map {hidden} -> {c}, got {self.lin2.in_features} -> {self.lin2.out_features}"
            )
        if not self.dw.depthwise or self.dw.in_channels != hidden:
            raise ShapeError(f"dwconv must be depthwise over {hidden} channels")
        if not self.width_offsets:
            self.width_offsets = shift_offsets(c)
        if not self.height_offsets:
            self.height_offsets = shift_offsets(hidden)

    @classmethod
    def init(cls, channels, hidden, rng, rate=0.1, shift_groups=5, dtype=DEFAULT_DTYPE):
        return cls(
            LinearParams.init(channels, hidden, rng, dtype),
            ConvParams.init(hidden, hidden, 3, rng, padding=1, groups=hidden, dtype=dtype),
            LinearParams.init(hidden, channels, rng, dtype),
            rate=rate,
            width_offsets=shift_offsets(channels, shift_groups),
            height_offsets=shift_offsets(hidden, shift_groups),
        )

    @property
    def channels(self):
        return self.lin1.in_features

    @property
    def hidden(self):
        return self.lin1.out_features

    def layers(self):
        return {"lin1": self.lin1, "dw": self.dw, "lin2": self.lin2}


def shifted_mlp_forward(x: Tensor, blk: ShiftedMlpBlock, mode=None, seed=None) -> Tensor:
    """Width shift, token linear, DWConv + Mish, dropout, height shift, token linear."""
    check_mode(mode)
    if x.ndim != 4 or x.shape[1] != blk.channels:
        raise ShapeError(f"block expects [B,{blk.channels},H,W], got {list(x.shape)}")
    h = cyclic_shift(x, "width", blk.width_offsets)
    h = channel_linear(h, blk.lin1)
    h = mish(dwconv(h, blk.dw))
    h = dropout(h, blk.rate, mode, seed)
    h = cyclic_shift(h, "height", blk.height_offsets)
    return channel_linear(h, blk.lin2)


@dataclass
class MlpStage:
    """Encoder stage built around a shifted-MLP block.

    ``proj`` is a 1x1 convolution that brings the incoming channel count to the
    stage width, since the block itself is channel-preserving.
    """

    proj: ConvParams
    block: ShiftedMlpBlock

    @classmethod
    def init(cls, c_in, c_out, rng, *, mlp_ratio=2, rate=0.1, shift_groups=5, dtype=DEFAULT_DTYPE):
        return cls(
            ConvParams.init(c_in, c_out, 1, rng, padding=0, dtype=dtype),
            ShiftedMlpBlock.init(c_out, mlp_ratio * c_out, rng, rate, shift_groups, dtype),
        )

    @property
    def in_channels(self):
        return self.proj.in_channels

    @property
    def out_channels(self):
        return self.block.channels

    def layers(self):
        return {"proj": self.proj, **{f"block.{k}": v for k, v in self.block.layers().items()}}


def mlp_stage_forward(x: Tensor, stage: MlpStage, mode, seed=None) -> Tensor:
    return shifted_mlp_forward(conv2d(x, stage.proj), stage.block, mode, seed)


@dataclass
class FusionBlock:
    attn: AttentionParams
    heads: int
    norm: NormParams  # over the C6 channels of each token

    def __post_init__(self):
        c6 = self.attn.query.in_features
        if self.attn.out.out_features != c6:
            raise ShapeError("attention output width must equal the visual channel count")
        if c6 % self.heads:
            raise ContractError(f"{c6} channels are not divisible by {self.heads} heads")

    @classmethod
    def init(cls, channels, embed_dim, heads, rng, dtype=DEFAULT_DTYPE):
        return cls(
            AttentionParams.init(channels, embed_dim, rng, dtype),
            heads,
            NormParams.init(channels, dtype),
        )

    @property
    def channels(self):
        return self.attn.query.in_features

    @property
    def embed_dim(self):
        return self.attn.key.in_features

    def layers(self):
        return {
            "attn.query": self.attn.query,
            "attn.key": self.attn.key,
            "attn.value": self.attn.value,
            "attn.out": self.attn.out,
            "norm": self.norm,
        }


def _visual_tokens(v6: Tensor) -> Tensor:
    b, c, h, w = v6.shape
    return permute(reshape(v6, (b, c, h * w)), (0, 2, 1))


def fusion_attention(v6: Tensor, e: Tensor, blk: FusionBlock) -> Tensor:
    """Pre-residual attention output ``F`` as tokens ``[B, h*w, C6]``."""
    if v6.ndim != 4 or v6.shape[1] != blk.channels:
        raise ShapeError(f"fusion expects [B,{blk.channels},h,w], got {list(v6.shape)}")
    if e.ndim != 3 or e.shape[2] != blk.embed_dim or e.shape[0] != v6.shape[0]:
        raise ShapeError(f"embedding must be [{v6.shape[0]},L,{blk.embed_dim}], got {list(e.shape)}")
    return multi_head_attention(_visual_tokens(v6), e, blk.heads, blk.attn)


def fusion_forward(v6: Tensor, e: Tensor, blk: FusionBlock, return_attention=False):
    """``LayerNorm(F + V)`` over channels per token, reshaped back to ``[B,C6,h,w]``."""
    b, c, h, w = v6.shape
    f = fusion_attention(v6, e, blk)
    r = layernorm(add(f, _visual_tokens(v6)), blk.norm.gamma, blk.norm.beta, blk.norm.eps)
    out = reshape(permute(r, (0, 2, 1)), (b, c, h, w))
    return (out, f) if return_attention else out
