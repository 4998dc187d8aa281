"""DocParseNet assembly: encoder, bottleneck fusion, decoder and head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    ConvStage,
    FusionBlock,
    MlpStage,
    conv_stage_forward,
    fusion_forward,
    mlp_stage_forward,
)
from .errors import ConfigError, ShapeError
from .ops import ConvParams, check_mode, conv2d, maxpool2, sigmoid_np, upsample2
from .tensor import Tensor, concat

NUM_STAGES = 6
DOWNSAMPLE = 2 ** (NUM_STAGES - 1)
FIELDS = ("AgreementTitle", "State", "County", "Grantor", "Grantee")


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128, 256, 320)
    in_channels: int = 3
    num_classes: int = 5
    crop: tuple = (256, 256)
    heads: int = 4
    dropout: float = 0.1
    mlp_stages: tuple = (4, 5, 6)
    embed_dim: int = 768
    seed: int = 0
    mlp_ratio: int = 2
    shift_groups: int = 5
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.crop = tuple(int(c) for c in self.crop)
        self.mlp_stages = tuple(sorted(int(s) for s in self.mlp_stages))
        self.validate()

    def validate(self):
        if len(self.channels) != NUM_STAGES or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be {NUM_STAGES} positive ints, got {list(self.channels)}")
        if len(self.crop) != 2 or any(c < DOWNSAMPLE or c % DOWNSAMPLE for c in self.crop):
            raise ConfigError(f"crop {list(self.crop)} must be positive multiples of {DOWNSAMPLE}")
        if any(s not in range(1, NUM_STAGES + 1) for s in self.mlp_stages):
            raise ConfigError(f"mlp_stages must be within 1..{NUM_STAGES}, got {list(self.mlp_stages)}")
        if self.heads < 1 or self.channels[-1] % self.heads:
            raise ConfigError(f"heads={self.heads} must divide bottleneck width {self.channels[-1]}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("in_channels", "num_classes", "embed_dim", "mlp_ratio", "shift_groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class DocParseNet:
    cfg: ModelConfig
    encoder: list  # stage i at index i-1; ConvStage or MlpStage
    fusion: FusionBlock
    decoder: list  # decoder level i at index i-1
    head: ConvParams
    _params: dict = field(default=None, repr=False)

    def layers(self) -> dict:
        """Every parameterised layer by dotted name, in construction order."""
        out = {}
        for i, stage in enumerate(self.encoder, 1):
            for k, v in stage.layers().items():
                out[f"enc{i}.{k}"] = v
        for k, v in self.fusion.layers().items():
            out[f"fusion.{k}"] = v
        for i in range(NUM_STAGES - 1, 0, -1):
            for k, v in self.decoder[i - 1].layers().items():
                out[f"dec{i}.{k}"] = v
        out["head"] = self.head
        return out

    def named_parameters(self) -> dict:
        if self._params is None:
            self._params = {
                f"{name}.{pname}": t
                for name, layer in self.layers().items()
                for pname, t in layer.parameters().items()
            }
        return self._params

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def load_state(self, state: dict):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ConfigError(f"checkpoint lacks parameter {missing[0]!r}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigError(
                    f"parameter {name!r} has shape {list(arr.shape)}, model expects {list(p.shape)}"
                )
            p.data = arr.astype(p.dtype, copy=True)

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def forward(self, image: Tensor, embed: Tensor, mode: str, seed=None, capture=None) -> Tensor:
        return forward(self, image, embed, mode, seed, capture)

    __call__ = forward


def build(cfg: ModelConfig) -> DocParseNet:
    """Construct a model with deterministic uniform fan-in initialisation."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.np_dtype
    ch = cfg.channels
    encoder = []
    c_prev = cfg.in_channels
    for i in range(1, NUM_STAGES + 1):
        if i in cfg.mlp_stages:
            stage = MlpStage.init(
                c_prev, ch[i - 1], rng,
                mlp_ratio=cfg.mlp_ratio, rate=cfg.dropout, shift_groups=cfg.shift_groups, dtype=dt,
            )
        else:
            stage = ConvStage.init(c_prev, ch[i - 1], rng, dt)
        encoder.append(stage)
        c_prev = ch[i - 1]
    fusion = FusionBlock.init(ch[-1], cfg.embed_dim, cfg.heads, rng, dt)
    decoder = [None] * (NUM_STAGES - 1)
    deeper = ch[-1]
    for i in range(NUM_STAGES - 1, 0, -1):
        decoder[i - 1] = ConvStage.init(deeper + ch[i - 1], ch[i - 1], rng, dt)
        deeper = ch[i - 1]
    head = ConvParams.init(ch[0], cfg.num_classes, 1, rng, padding=0, dtype=dt)
    return DocParseNet(cfg, encoder, fusion, decoder, head)


def forward(m: DocParseNet, image: Tensor, embed: Tensor, mode: str, seed=None, capture=None) -> Tensor:
    """Logits ``[B, num_classes, H, W]``; no output activation.

    ``seed`` drives dropout in train mode.  If ``capture`` is a dict it
    receives the bottleneck features and the pre-residual attention output.
    """
    check_mode(mode)
    cfg = m.cfg
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ShapeError(f"image must be [B,{cfg.in_channels},H,W], got {list(image.shape)}")
    b, _, h, w = image.shape
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(f"image size {h}x{w} is not divisible by {DOWNSAMPLE}")
    if embed.ndim != 3 or embed.shape[0] != b or embed.shape[2] != cfg.embed_dim:
        raise ShapeError(f"embedding must be [{b},L,{cfg.embed_dim}], got {list(embed.shape)}")
    if mode == "train" and seed is None:
        seed = cfg.seed

    x = image
    skips = []
    for i, stage in enumerate(m.encoder, 1):
        if isinstance(stage, MlpStage):
            x = mlp_stage_forward(x, stage, mode, seed=(seed, i) if mode == "train" else None)
        else:
            x = conv_stage_forward(x, stage)
        if i < NUM_STAGES:
            skips.append(x)
            x = maxpool2(x)
    r, f = fusion_forward(x, embed, m.fusion, return_attention=True)
    if capture is not None:
        capture["bottleneck"] = x
        capture["attention"] = f
        capture["fused"] = r
    d = r
    for i in range(NUM_STAGES - 1, 0, -1):
        d = conv_stage_forward(concat([upsample2(d), skips[i - 1]], axis=1), m.decoder[i - 1])
    return conv2d(d, m.head)


def predict_masks(logits) -> np.ndarray:
    """Binary masks: sigmoid(logit) >= 0.5, i.e. logit >= 0."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (sigmoid_np(z) >= 0.5).astype(np.uint8)
