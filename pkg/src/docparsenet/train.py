"""Loss, optimisers, IoU metrics and the training / evaluation loops."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .data import random_crop
from .errors import ConfigError, ContractError, NumericalAbort, ShapeError
from .model import FIELDS, DocParseNet, predict_masks
from .profiling import EpochTimer
from .tensor import Tensor, backward, make_result, no_grad
from .text_embed import EmbeddingProvider, TextRecord

REPORT_KEYS = ("iou_at", "iou_state", "iou_county", "iou_grantor", "iou_grantee")
DICE_SMOOTH = 1.0


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    loss: str = "bce_dice"
    optimizer: str = "adamw"
    seed: int = 0
    log_path: Optional[str] = None
    iou_mode: str = "dataset"
    eval_every: int = 1

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("epochs and eval_every must be >= 1")
        if self.loss != "bce_dice":
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.iou_mode not in ("dataset", "per_image"):
            raise ConfigError(f"unknown iou_mode {self.iou_mode!r}")


# ---------------------------------------------------------------------------
# loss


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_dice_loss(logits: Tensor, masks) -> Tensor:
    """Mean over channels of BCE-with-logits plus (1 - soft Dice).

    BCE is averaged over batch and pixels of each channel; Dice pools the
    batch and uses a smoothing term of 1.
    """
    t = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    if t.shape != logits.shape:
        raise ShapeError(f"logits {list(logits.shape)} and masks {list(t.shape)} differ")
    if not np.isin(t, (0, 1)).all():
        raise ContractError("mask values must be 0 or 1")
    z = logits.data
    t = t.astype(z.dtype)
    c = z.shape[1]
    axes = (0, 2, 3)
    m = z.size // c
    p = _sigmoid(z)
    bce = (np.logaddexp(0, z) - t * z).sum(axis=axes) / m
    inter = (p * t).sum(axis=axes)
    denom = p.sum(axis=axes) + t.sum(axis=axes) + DICE_SMOOTH
    dice = (2 * inter + DICE_SMOOTH) / denom
    value = np.asarray((bce + 1 - dice).mean(), dtype=z.dtype).reshape(1)

    def back(g):
        shape = (1, c, 1, 1)
        d_bce = (p - t) / m
        d_dice_dp = -(2 * t * denom.reshape(shape) - (2 * inter + DICE_SMOOTH).reshape(shape)) / (
            denom.reshape(shape) ** 2
        )
        return (g[0] / c * (d_bce + d_dice_dp * p * (1 - p)),)

    return make_result(value, (logits,), back, "bce_dice")


# ---------------------------------------------------------------------------
# metrics


def iou(pred, truth) -> float:
    """|pred and truth| / |pred or truth|; 1.0 when both are empty."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


@dataclass
class MetricsReport:
    ious: tuple
    loss: float
    epoch: int = 0
    seconds: float = 0.0
    miou: float = field(init=False)

    def __post_init__(self):
        self.ious = tuple(float(v) for v in self.ious)
        if len(self.ious) != len(FIELDS):
            raise ContractError(f"expected {len(FIELDS)} IoUs, got {len(self.ious)}")
        self.miou = math.fsum(self.ious) / len(self.ious)

    def record(self) -> dict:
        rec = {"epoch": self.epoch, "loss": self.loss}
        rec.update(zip(REPORT_KEYS, self.ious))
        rec["miou"] = self.miou
        rec["seconds"] = self.seconds
        return rec

    def table(self) -> str:
        head = ["mIoU", "AT", "State", "County", "Grantor", "Grantee"]
        vals = [self.miou, *self.ious]
        return "  ".join(f"{h:>8}" for h in head) + "\n" + "  ".join(f"{100 * v:8.2f}" for v in vals)


class IouAccumulator:
    """Running per-field intersection / union tallies."""

    def __init__(self, mode="dataset"):
        self.mode = mode
        self.inter = np.zeros(len(FIELDS), dtype=np.int64)
        self.union = np.zeros(len(FIELDS), dtype=np.int64)
        self.per_image = []

    def update(self, pred, truth):
        pred = np.asarray(pred).astype(bool)
        truth = np.asarray(truth).astype(bool)
        inter = np.logical_and(pred, truth).sum(axis=(-2, -1)).reshape(-1, len(FIELDS))
        union = np.logical_or(pred, truth).sum(axis=(-2, -1)).reshape(-1, len(FIELDS))
        self.inter += inter.sum(axis=0)
        self.union += union.sum(axis=0)
        for i, u in zip(inter, union):
            self.per_image.append(np.where(u == 0, 1.0, i / np.maximum(u, 1)))

    def ious(self) -> tuple:
        if self.mode == "per_image":
            return tuple(np.mean(self.per_image, axis=0))
        return tuple(np.where(self.union == 0, 1.0, self.inter / np.maximum(self.union, 1)))


def _batches(samples, size):
    for i in range(0, len(samples), size):
        yield samples[i : i + size]


def _stack(batch, dtype):
    image = Tensor(np.stack([s.image for s in batch]).astype(dtype))
    masks = np.stack([s.masks for s in batch])
    records = [TextRecord(s.sample_id, s.text, s.embedding) for s in batch]
    return image, masks, records


def evaluate(model: DocParseNet, dataset, provider: EmbeddingProvider, batch_size=8, iou_mode="dataset") -> MetricsReport:
    """Eval-mode IoU per field, from intersections and unions summed over the dataset."""
    dataset = list(dataset)
    if not dataset:
        raise ContractError("no samples to evaluate")
    acc = IouAccumulator(iou_mode)
    loss_sum = 0.0
    dt = model.cfg.np_dtype
    with no_grad():
        for batch in _batches(dataset, batch_size):
            image, masks, records = _stack(batch, dt)
            logits = model.forward(image, provider.embed(records, dt), "eval")
            loss_sum += bce_dice_loss(logits, masks).item() * len(batch)
            acc.update(predict_masks(logits), masks)
    return MetricsReport(acc.ious(), loss_sum / len(dataset))


# ---------------------------------------------------------------------------
# optimisers


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, wd=0.0):
    """In-place AdamW update with decoupled weight decay and bias correction.

    ``state`` is a dict holding ``t`` and per-parameter ``m`` / ``v`` lists; it
    is initialised on first use.  Missing gradients count as zero.
    """
    b1, b2 = betas
    if not state:
        state.update(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    if len(state["m"]) != len(params):
        raise ContractError("optimizer state does not match the parameter list")
    state["t"] += 1
    t = state["t"]
    c1, c2 = 1 - b1**t, 1 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if m.shape != p.shape:
            raise ContractError("optimizer state shape mismatch")
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if wd:
            p *= 1 - lr * wd
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def sgd_step(params, grads, lr, wd=0.0):
    for p, g in zip(params, grads):
        if g is None:
            continue
        p -= lr * (g + wd * p)
    return params


class Optimizer:
    def __init__(self, model: DocParseNet, cfg: TrainConfig):
        self.tensors = model.parameters()
        self.cfg = cfg
        self.state = {}

    def step(self):
        params = [t.data for t in self.tensors]
        grads = [t.grad for t in self.tensors]
        c = self.cfg
        if c.optimizer == "adamw":
            adamw_step(params, grads, self.state, c.lr, c.betas, c.eps, c.weight_decay)
        else:
            sgd_step(params, grads, c.lr, c.weight_decay)


def grad_norm(model: DocParseNet) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in model.parameters() if p.grad is not None))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    history: list
    best_miou: float
    best_state: dict
    timer: EpochTimer


def _epoch_seed(seed, epoch):
    return int(np.random.default_rng([int(seed), epoch]).integers(2**31))


def train_step(model, optimizer, batch, step_seed, provider):
    dt = model.cfg.np_dtype
    image, masks, records = _stack(batch, dt)
    logits = model.forward(image, provider.embed(records, dt), "train", seed=step_seed)
    loss = bce_dice_loss(logits, masks)
    if not np.isfinite(loss.data).all():
        return loss.item(), None
    model.zero_grad()
    backward(loss)
    gn = grad_norm(model)
    if not math.isfinite(gn):
        return loss.item(), gn
    optimizer.step()
    return loss.item(), gn


def train(
    model: DocParseNet,
    cfg: TrainConfig,
    train_set,
    val_set,
    provider: EmbeddingProvider,
    out_dir=None,
) -> TrainResult:
    """Mini-batch training with per-epoch validation and best-mIoU checkpointing.

    When ``val_set`` is empty the train split is scored instead.  Epochs that
    skip evaluation (see ``eval_every``) log ``null`` metrics.
    """
    train_set = list(train_set)
    val_set = list(val_set or [])
    overlap = {s.sample_id for s in train_set} & {s.sample_id for s in val_set}
    if overlap:
        raise ContractError(f"train and val splits share samples, e.g. {sorted(overlap)[0]!r}")
    if not train_set:
        raise ContractError("no samples to train on")
    score_set = val_set or train_set
    optimizer = Optimizer(model, cfg)
    timer = EpochTimer()
    history = []
    best_miou, best_state = -1.0, model.state()
    last_gn = float("nan")
    log = open(cfg.log_path, "a", encoding="utf-8") if cfg.log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            timer.start()
            eseed = _epoch_seed(cfg.seed, epoch)
            order = np.random.default_rng(eseed).permutation(len(train_set))
            crops = [random_crop(train_set[i], model.cfg.crop, eseed) for i in order]
            losses = []
            for k, batch in enumerate(_batches(crops, cfg.batch_size)):
                loss, gn = train_step(model, optimizer, batch, eseed + k, provider)
                if gn is None or not math.isfinite(loss) or not math.isfinite(gn):
                    raise NumericalAbort(
                        f"non-finite loss/gradient at epoch {epoch}, batch {k}: loss={loss}, "
                        f"lr={cfg.lr}, last grad-norm={last_gn if gn is None else gn}"
                    )
                last_gn = gn
                losses.append(loss * len(batch))
            train_loss = sum(losses) / len(crops)
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                report = evaluate(model, score_set, provider, cfg.batch_size, cfg.iou_mode)
                seconds = timer.stop()
                record = MetricsReport(report.ious, train_loss, epoch, seconds).record()
                if report.miou > best_miou:
                    best_miou, best_state = report.miou, model.state()
                    if out_dir:
                        save_checkpoint(os.path.join(out_dir, "best.dtf"), model)
            else:
                seconds = timer.stop()
                record = {"epoch": epoch, "loss": train_loss, **{k: None for k in REPORT_KEYS}, "miou": None, "seconds": seconds}
            history.append(record)
            if log:
                log.write(json.dumps(record) + "\n")
                log.flush()
    finally:
        if log:
            log.close()
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "final.dtf"), model)
    return TrainResult(history, best_miou, best_state, timer)
