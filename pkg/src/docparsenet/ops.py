"""Neural operators with forward and backward rules.

Layout is NCHW throughout.  Token tensors used by attention are
``[B, tokens, features]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import DEFAULT_DTYPE, Tensor, make_result, matmul, permute, reshape

# tanh(softplus(x)) == 1 to double precision beyond this point
_MISH_CLIP = 20.0


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


@dataclass
class ConvParams:
    weight: Tensor  # [C_out, C_in / groups, k, k]
    bias: Tensor  # [C_out]
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        c_out, c_in_g, kh, kw = self.weight.shape
        if kh != kw:
            raise ShapeError(f"only square kernels are supported, got {kh}x{kw}")
        if c_out % self.groups:
            raise ShapeError(f"C_out={c_out} is not divisible by groups={self.groups}")
        if self.bias.shape != (c_out,):
            raise ShapeError(f"bias shape {list(self.bias.shape)} does not match C_out={c_out}")
        if self.stride < 1 or self.padding < 0:
            raise ContractError("stride must be >= 1 and padding >= 0")

    @classmethod
    def init(cls, c_in, c_out, k, rng, *, stride=1, padding=None, groups=1, dtype=DEFAULT_DTYPE):
        if c_in % groups:
            raise ShapeError(f"C_in={c_in} is not divisible by groups={groups}")
        fan_in = c_in // groups * k * k
        weight = _uniform(rng, fan_in, (c_out, c_in // groups, k, k), dtype)
        bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        padding = k // 2 if padding is None else padding
        return cls(weight, bias, stride=stride, padding=padding, groups=groups)

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class LinearParams:
    weight: Tensor  # [C_out, C_in]
    bias: Tensor  # [C_out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"linear weight {list(self.weight.shape)} and bias {list(self.bias.shape)} disagree"
            )

    @classmethod
    def init(cls, c_in, c_out, rng, dtype=DEFAULT_DTYPE):
        weight = _uniform(rng, c_in, (c_out, c_in), dtype)
        return cls(weight, Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class AttentionParams:
    query: LinearParams
    key: LinearParams
    value: LinearParams
    out: LinearParams

    @classmethod
    def init(cls, dim, kv_dim, rng, dtype=DEFAULT_DTYPE):
        return cls(
            LinearParams.init(dim, dim, rng, dtype),
            LinearParams.init(kv_dim, dim, rng, dtype),
            LinearParams.init(kv_dim, dim, rng, dtype),
            LinearParams.init(dim, dim, rng, dtype),
        )

    def parameters(self):
        out = {}
        for name in ("query", "key", "value", "out"):
            for k, v in getattr(self, name).parameters().items():
                out[f"{name}.{k}"] = v
        return out


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, dim, dtype=DEFAULT_DTYPE):
        return cls(
            Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
        )

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}


# ---------------------------------------------------------------------------
# convolutions


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_out_size(size, k, pad, stride):
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp, k, stride, ho, wo):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(dcols, shape_padded, k, stride, ho, wo):
    b, c = shape_padded[:2]
    dcols = dcols.reshape(b, c, k, k, ho, wo)
    dxp = np.zeros(shape_padded, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    return dxp


def _unpad(x, p):
    return x if p == 0 else x[:, :, p:-p, p:-p]


def _shifted_gemm_conv(x, w, bias, pad):
    """Stride-1 convolution as k*k GEMMs over a flattened padded buffer.

    With the input laid out as ``[C, B*(H+2p)*(W+2p)]`` every kernel tap is a
    contiguous column window, so no im2col buffer is needed.  Columns that
    straddle row or image borders are computed and then discarded.
    """
    b, c, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    hp, wp = h + 2 * pad, wd + 2 * pad
    xp = np.zeros((c, b, hp, wp), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + wd] = x.transpose(1, 0, 2, 3)
    xf = xp.reshape(c, -1)
    span = b * hp * wp - (k - 1) * (wp + 1)
    taps = [(i * wp + j, np.ascontiguousarray(w[:, :, i, j])) for i in range(k) for j in range(k)]
    acc = np.zeros((c_out, b * hp * wp), dtype=x.dtype)
    for off, t in taps:
        acc[:, :span] += t @ xf[:, off : off + span]
    out = acc.reshape(c_out, b, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    out = out + bias[None, :, None, None]

    def back(g):
        gf = np.zeros((c_out, b, hp, wp), dtype=g.dtype)
        gf[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gf = gf.reshape(c_out, -1)[:, :span]
        gw = np.empty_like(w)
        dxf = np.zeros_like(xf)
        for n, (off, t) in enumerate(taps):
            gw[:, :, n // k, n % k] = gf @ xf[:, off : off + span].T
            dxf[:, off : off + span] += t.T @ gf
        gx = dxf.reshape(c, b, hp, wp)[:, :, pad : pad + h, pad : pad + wd].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))

    return out, back


def _dense_conv(x, w, bias, stride, pad):
    """Forward of an ungrouped convolution on raw arrays; returns (out, backward)."""
    b, c, h, wd = x.shape
    if stride == 1 and w.shape[-1] > 1 and c >= 8:
        return _shifted_gemm_conv(x, w, bias, pad)
    c_out, _, k, _ = w.shape
    ho, wo = _conv_out_size(h, k, pad, stride), _conv_out_size(wd, k, pad, stride)
    if k == 1 and stride == 1 and pad == 0:
        cols = x.reshape(b, c, h * wd)
    else:
        xp = _pad(x, pad)
        cols = _im2col(xp, k, stride, ho, wo)
    wm = w.reshape(c_out, -1)
    out = np.matmul(wm, cols)
    out += bias[:, None]
    out = out.reshape(b, c_out, ho, wo)

    def back(g):
        g2 = g.reshape(b, c_out, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = g2.sum(axis=(0, 2))
        dcols = np.matmul(wm.T, g2)
        if k == 1 and stride == 1 and pad == 0:
            gx = dcols.reshape(x.shape)
        else:
            gx = _unpad(_col2im(dcols, (b, c, h + 2 * pad, wd + 2 * pad), k, stride, ho, wo), pad)
        return gx, gw, gb

    return out, back


def _depthwise_conv(x, w, bias, pad):
    """Stride-1 depthwise convolution by shifted multiply-adds."""
    b, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    xp = _pad(x, pad)
    out = np.empty((b, c, ho, wo), dtype=x.dtype)
    out[...] = bias[None, :, None, None]
    taps = w[:, 0]
    for i in range(k):
        for j in range(k):
            out += taps[None, :, i, j, None, None] * xp[:, :, i : i + ho, j : j + wo]

    def back(g):
        dxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + ho, j : j + wo] += taps[None, :, i, j, None, None] * g
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i : i + ho, j : j + wo])
        return _unpad(dxp, pad), gw, g.sum(axis=(0, 2, 3))

    return out, back


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D convolution (cross-correlation) with optional groups."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W], got {list(x.shape)}")
    b, c, h, wd = x.shape
    if c != p.in_channels:
        raise ShapeError(f"input has {c} channels, weight expects {p.in_channels}")
    k, pad, s = p.kernel, p.padding, p.stride
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"spatial size {h}x{wd} (pad {pad}) smaller than kernel {k}")
    w, bias = p.weight.data, p.bias.data

    if p.groups == 1:
        out, back = _dense_conv(x.data, w, bias, s, pad)
    elif p.depthwise and s == 1:
        out, back = _depthwise_conv(x.data, w, bias, pad)
    else:
        g_in, g_out = c // p.groups, p.out_channels // p.groups
        parts = [
            _dense_conv(
                x.data[:, gi * g_in : (gi + 1) * g_in],
                w[gi * g_out : (gi + 1) * g_out],
                bias[gi * g_out : (gi + 1) * g_out],
                s,
                pad,
            )
            for gi in range(p.groups)
        ]
        out = np.concatenate([o for o, _ in parts], axis=1)

        def back(g):
            grads = [bk(g[:, gi * g_out : (gi + 1) * g_out]) for gi, (_, bk) in enumerate(parts)]
            return tuple(np.concatenate(z, axis=a) for z, a in zip(zip(*grads), (1, 0, 0)))

    return make_result(out, (x, p.weight, p.bias), back, "conv2d")


def dwconv(x: Tensor, p: ConvParams) -> Tensor:
    """Depthwise 3x3 convolution, stride 1, padding 1 (shape preserving)."""
    if not p.depthwise:
        raise ContractError("dwconv requires depthwise parameters (groups == C_in == C_out)")
    if p.kernel != 3 or p.padding != 1 or p.stride != 1:
        raise ContractError("dwconv is defined for k=3, padding=1, stride=1")
    return conv2d(x, p)


def channel_linear(x: Tensor, p: LinearParams) -> Tensor:
    """Apply a linear map over the channel axis at every pixel of ``[B,C,H,W]``."""
    if x.ndim != 4 or x.shape[1] != p.in_features:
        raise ShapeError(f"channel_linear expects [B,{p.in_features},H,W], got {list(x.shape)}")
    b, c, h, w = x.shape
    wm, bias = p.weight.data, p.bias.data
    xr = x.data.reshape(b, c, h * w)
    out = np.matmul(wm, xr)
    out += bias[:, None]

    def back(g):
        g2 = g.reshape(b, -1, h * w)
        gw = np.matmul(g2, xr.transpose(0, 2, 1)).sum(axis=0)
        return np.matmul(wm.T, g2).reshape(x.shape), gw, g2.sum(axis=(0, 2))

    return make_result(out.reshape(b, -1, h, w), (x, p.weight, p.bias), back, "channel_linear")


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """``x @ W.T + b`` over the last axis."""
    if x.shape[-1] != p.in_features:
        raise ShapeError(f"linear expects last dim {p.in_features}, got {list(x.shape)}")
    wm, bias = p.weight.data, p.bias.data
    out = x.data @ wm.T + bias

    def back(g):
        g2 = g.reshape(-1, wm.shape[0])
        gw = g2.T @ x.data.reshape(-1, wm.shape[1])
        return g @ wm, gw, g2.sum(axis=0)

    return make_result(out, (x, p.weight, p.bias), back, "linear")


# ---------------------------------------------------------------------------
# activations and normalisation


def _tanh_softplus(x):
    # tanh(log1p(e^x)) == n / (n + 2) with n = e^x (e^x + 2)
    e = np.exp(np.minimum(x, _MISH_CLIP))
    n = e * (e + 2)
    return n / (n + 2), e


def mish(x: Tensor) -> Tensor:
    t, e = _tanh_softplus(x.data)
    out = x.data * t

    def back(g):
        sig = e / (1 + e)
        return (g * (t + x.data * (1 - t * t) * sig),)

    return make_result(out, (x,), back, "mish")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the trailing ``gamma.ndim`` axes, then scale and shift."""
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    nd = gamma.ndim
    if gamma.shape != beta.shape or x.shape[-nd:] != gamma.shape:
        raise ShapeError(
            f"gamma/beta {list(gamma.shape)} do not match trailing dims of {list(x.shape)}"
        )
    axes = tuple(range(x.ndim - nd, x.ndim))
    lead = tuple(range(x.ndim - nd))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def back(g):
        dxhat = g * gamma.data
        gx = rstd * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gamma, beta), back, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), back, "softmax")


MODES = ("train", "eval")


def check_mode(mode):
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")


def dropout(x: Tensor, rate: float, mode: str, seed) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    check_mode(mode)
    if not 0 <= rate < 1:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# spatial rearrangement

_AXES = {"height": 2, "width": 3}


def shift_offsets(channels: int, groups: int = 5) -> list:
    """Per-channel offsets for ``groups`` contiguous channel groups centred on 0.

    With the default five groups channel ``c`` gets ``floor(5c/C) - 2``.
    """
    half = groups // 2
    return [groups * c // channels - half for c in range(channels)]


def _roll_channels(x: np.ndarray, axis: int, offsets, sign: int) -> np.ndarray:
    out = np.empty_like(x)
    offsets = np.asarray(offsets)
    for off in np.unique(offsets):
        idx = np.nonzero(offsets == off)[0]
        sel = slice(idx[0], idx[-1] + 1) if idx[-1] - idx[0] + 1 == len(idx) else idx
        out[:, sel] = np.roll(x[:, sel], sign * int(off), axis=axis)
    return out


def cyclic_shift(x: Tensor, axis: str, offsets) -> Tensor:
    """Rotate channel ``c`` by ``offsets[c]`` along ``axis``: index i moves to (i + s) mod n."""
    if axis not in _AXES:
        raise ContractError(f"axis must be 'height' or 'width', got {axis!r}")
    if x.ndim != 4:
        raise ShapeError(f"cyclic_shift expects [B,C,H,W], got {list(x.shape)}")
    if len(offsets) != x.shape[1]:
        raise ContractError(f"{len(offsets)} offsets for {x.shape[1]} channels")
    ax = _AXES[axis]
    out = _roll_channels(x.data, ax, offsets, 1)
    return make_result(out, (x,), lambda g: (_roll_channels(g, ax, offsets, -1),), "cyclic_shift")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties route the gradient to the first index."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects [B,C,H,W], got {list(x.shape)}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        routed = (np.arange(4) == arg[..., None]) * g[..., None]
        routed = routed.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(b, c, h, w).astype(x.dtype, copy=False),)

    return make_result(out, (x,), back, "maxpool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2 expects [B,C,H,W], got {list(x.shape)}")
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)

    def back(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), back, "upsample2")


# ---------------------------------------------------------------------------
# attention


def multi_head_attention(q_tokens: Tensor, kv_tokens: Tensor, heads: int, p: AttentionParams) -> Tensor:
    """Scaled dot-product attention with learned projections.

    Queries come from ``q_tokens [B,N,D]``; keys and values from
    ``kv_tokens [B,L,D_kv]``.  Heads are concatenated and projected back to D.
    """
    if q_tokens.ndim != 3 or kv_tokens.ndim != 3 or q_tokens.shape[0] != kv_tokens.shape[0]:
        raise ShapeError(
            f"attention expects [B,N,D] and [B,L,D_kv], got {list(q_tokens.shape)} and {list(kv_tokens.shape)}"
        )
    b, n, d = q_tokens.shape
    l_kv = kv_tokens.shape[1]
    if heads < 1 or d % heads:
        raise ContractError(f"model dim {d} is not divisible by {heads} heads")
    if kv_tokens.shape[2] != p.key.in_features:
        raise ShapeError(f"key/value tokens have dim {kv_tokens.shape[2]}, expected {p.key.in_features}")
    dh = d // heads

    def split(t, length):
        return permute(reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    q = split(linear(q_tokens, p.query), n)
    k = split(linear(kv_tokens, p.key), l_kv)
    v = split(linear(kv_tokens, p.value), l_kv)
    scores = matmul(q, permute(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = reshape(permute(matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    return linear(ctx, p.out)
