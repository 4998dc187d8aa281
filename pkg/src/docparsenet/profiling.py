"""Analytic parameter / FLOP accounting and epoch timing.

Convention: one multiply-accumulate is 2 FLOPs.  Convolution and linear rows
follow ``2 * k^2 * (C_in / groups) * C_out * H' * W'`` (bias adds are not
counted).  Parameter-free operators are charged a fixed number of FLOPs per
element, listed in ``OP_FLOPS``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .blocks import ConvStage, MlpStage
from .model import NUM_STAGES, DocParseNet
from .ops import ConvParams, LinearParams

FLOPS_HEADER = "FLOP convention: 1 multiply-accumulate = 2 FLOPs; forward pass only unless noted"

# FLOPs per output element of parameter-free operators
OP_FLOPS = {
    "mish": 8,  # exp, two mults, add, div, mult (tanh(softplus) form)
    "maxpool2": 3,  # three comparisons per 2x2 window
    "softmax": 5,  # max-subtract, exp, sum, divide
    "residual": 1,
    "layernorm": 8,  # mean, centre, square, mean, rsqrt, scale, shift
    "shift": 0,
    "upsample2": 0,
    "concat": 0,
    "dropout": 0,  # identity at inference
}
TRAIN_STEP_FACTOR = 3  # forward + backward ~ 3x forward


@dataclass
class CostRow:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list
    batch: int
    input_dims: tuple
    peak_bytes: int = 0
    total_params: int = field(init=False)
    total_flops: int = field(init=False)

    def __post_init__(self):
        self.total_params = sum(r.params for r in self.rows)
        self.total_flops = sum(r.flops for r in self.rows)

    @property
    def train_step_flops(self) -> int:
        return TRAIN_STEP_FACTOR * self.total_flops

    def table(self) -> str:
        out = [FLOPS_HEADER, f"input {self.input_dims[0]}x{self.input_dims[1]}, batch {self.batch}", ""]
        out.append(f"{'layer':<28}{'kind':<16}{'params':>12}{'FLOPs':>18}")
        for r in self.rows:
            out.append(f"{r.name:<28}{r.kind:<16}{r.params:>12,}{r.flops:>18,}")
        out.append(f"{'TOTAL':<44}{self.total_params:>12,}{self.total_flops:>18,}")
        out.append("")
        out.append(f"params (M):              {self.total_params / 1e6:.2f}")
        out.append(f"forward TFLOPs:          {self.total_flops / 1e12:.4f}")
        out.append(f"train-step TFLOPs (3x):  {self.train_step_flops / 1e12:.4f}")
        out.append(f"peak allocation (est.):  {self.peak_bytes / 2**20:.1f} MiB")
        return "\n".join(out)

    def lines(self) -> list:
        """Machine-readable ``key=value`` lines, one per row, then totals."""
        out = [f"row name={r.name} kind={r.kind} params={r.params} flops={r.flops}" for r in self.rows]
        out.append(
            f"total params={self.total_params} flops={self.total_flops} "
            f"train_step_flops={self.train_step_flops} peak_bytes={self.peak_bytes} batch={self.batch}"
        )
        return out


def layer_params(layer) -> int:
    return sum(t.data.size for t in layer.parameters().values())


def count_params(model: DocParseNet) -> int:
    return sum(p.data.size for p in model.parameters())


def conv_flops(p: ConvParams, h_out: int, w_out: int) -> int:
    k = p.kernel
    return 2 * k * k * (p.in_channels // p.groups) * p.out_channels * h_out * w_out


def linear_flops(p: LinearParams, tokens: int) -> int:
    return 2 * p.in_features * p.out_features * tokens


def attention_core_flops(n: int, l_kv: int, dim: int) -> int:
    # scores Q.K^T plus weights.V
    return 2 * n * l_kv * dim * 2


class _Walker:
    def __init__(self, batch):
        self.batch = batch
        self.rows = []
        self.activations = 0

    def layer(self, name, layer, flops, out_elems):
        kind = type(layer).__name__.replace("Params", "").lower()
        if isinstance(layer, ConvParams) and layer.depthwise:
            kind = "dwconv"
        self.rows.append(CostRow(name, kind, layer_params(layer), flops * self.batch))
        self.activations += out_elems * self.batch

    def op(self, name, kind, elems):
        self.rows.append(CostRow(name, kind, 0, OP_FLOPS[kind] * elems * self.batch))
        self.activations += elems * self.batch


def cost_report(model: DocParseNet, input_dims=None, batch: int = 1) -> CostReport:
    """Per-layer parameters and forward FLOPs for ``batch`` images of ``input_dims``."""
    cfg = model.cfg
    h, w = input_dims or cfg.crop
    wk = _Walker(batch)
    res = []
    for i, stage in enumerate(model.encoder, 1):
        hw = h * w
        c = stage.out_channels
        if isinstance(stage, MlpStage):
            blk = stage.block
            wk.layer(f"enc{i}.proj", stage.proj, conv_flops(stage.proj, h, w), c * hw)
            wk.op(f"enc{i}.block.shift_w", "shift", c * hw)
            wk.layer(f"enc{i}.block.lin1", blk.lin1, linear_flops(blk.lin1, hw), blk.hidden * hw)
            wk.layer(f"enc{i}.block.dw", blk.dw, conv_flops(blk.dw, h, w), blk.hidden * hw)
            wk.op(f"enc{i}.block.mish", "mish", blk.hidden * hw)
            wk.op(f"enc{i}.block.dropout", "dropout", blk.hidden * hw)
            wk.op(f"enc{i}.block.shift_h", "shift", blk.hidden * hw)
            wk.layer(f"enc{i}.block.lin2", blk.lin2, linear_flops(blk.lin2, hw), c * hw)
        else:
            _conv_stage(wk, f"enc{i}", stage, h, w)
        res.append((h, w))
        if i < NUM_STAGES:
            h, w = h // 2, w // 2
            wk.op(f"enc{i}.pool", "maxpool2", c * h * w)
    fu = model.fusion
    n, c6 = h * w, fu.channels
    l_kv = 1
    wk.layer("fusion.attn.query", fu.attn.query, linear_flops(fu.attn.query, n), n * c6)
    wk.layer("fusion.attn.key", fu.attn.key, linear_flops(fu.attn.key, l_kv), l_kv * c6)
    wk.layer("fusion.attn.value", fu.attn.value, linear_flops(fu.attn.value, l_kv), l_kv * c6)
    wk.op("fusion.attn.softmax", "softmax", fu.heads * n * l_kv)
    wk.rows.append(CostRow("fusion.attn.core", "attention", 0, attention_core_flops(n, l_kv, c6) * batch))
    wk.layer("fusion.attn.out", fu.attn.out, linear_flops(fu.attn.out, n), n * c6)
    wk.op("fusion.residual", "residual", n * c6)
    wk.layer("fusion.norm", fu.norm, OP_FLOPS["layernorm"] * n * c6, n * c6)
    for i in range(NUM_STAGES - 1, 0, -1):
        h, w = res[i - 1]
        stage = model.decoder[i - 1]
        wk.op(f"dec{i}.upsample", "upsample2", (stage.in_channels - model.encoder[i - 1].out_channels) * h * w)
        wk.op(f"dec{i}.concat", "concat", stage.in_channels * h * w)
        _conv_stage(wk, f"dec{i}", stage, h, w)
    h, w = res[0]
    wk.layer("head", model.head, conv_flops(model.head, h, w), model.head.out_channels * h * w)
    itemsize = cfg.np_dtype.itemsize
    # parameters, gradients and two AdamW moments, plus every stored activation
    peak = 4 * count_params(model) * itemsize + wk.activations * itemsize
    return CostReport(wk.rows, batch, (input_dims or cfg.crop), peak)


def _conv_stage(wk, prefix, stage: ConvStage, h, w):
    c = stage.out_channels
    wk.layer(f"{prefix}.conv", stage.conv, conv_flops(stage.conv, h, w), c * h * w)
    wk.op(f"{prefix}.mish", "mish", c * h * w)
    wk.layer(f"{prefix}.pointwise", stage.pointwise, conv_flops(stage.pointwise, h, w), c * h * w)


def count_flops(model: DocParseNet, input_dims=None, batch: int = 1) -> int:
    return cost_report(model, input_dims, batch).total_flops


class EpochTimer:
    """Wall-clock seconds per epoch from a monotonic clock."""

    def __init__(self):
        self.history = []
        self._t0 = None

    def start(self):
        self._t0 = time.perf_counter()

    def stop(self) -> float:
        if self._t0 is None:
            raise RuntimeError("timer was not started")
        dt = time.perf_counter() - self._t0
        self._t0 = None
        self.history.append(dt)
        return dt


def time_epoch(handle) -> float:
    """Seconds of the most recent completed epoch of a run (timer or train result)."""
    timer = getattr(handle, "timer", handle)
    if not timer.history:
        raise RuntimeError("no completed epoch")
    return timer.history[-1]
