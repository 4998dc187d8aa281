"""Flat ``key=value`` run configuration with a fixed schema.

One pair per line, ``#`` starts a comment.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig
from .text_embed import EmbeddingProvider
from .train import TrainConfig


def _ints(text):
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _crop(text):
    dims = _ints(text)
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise ValueError("crop takes one or two integers")
    return dims


def _fmt_ints(v):
    return ",".join(str(int(x)) for x in v)


# key -> (parser, default, section, help)
SCHEMA = {
    "channels": (_ints, "16,32,64,128,256,320", "model", "encoder widths of the six stages"),
    "in_channels": (int, "3", "model", "image channels"),
    "num_classes": (int, "5", "model", "output mask channels"),
    "crop": (_crop, "256,256", "model", "training crop H,W (multiples of 32)"),
    "heads": (int, "4", "model", "attention heads at the bottleneck"),
    "dropout": (float, "0.1", "model", "dropout rate inside shifted-MLP blocks"),
    "mlp_stages": (_ints, "4,5,6", "model", "encoder stages using shifted-MLP blocks"),
    "embed_dim": (int, "768", "model", "text embedding width"),
    "mlp_ratio": (int, "2", "model", "hidden expansion of shifted-MLP blocks"),
    "shift_groups": (int, "5", "model", "channel groups for cyclic shifts"),
    "dtype": (str, "float32", "model", "float32 or float64"),
    "seed": (int, "0", "shared", "seed for init, shuffling, crops and dropout"),
    "epochs": (int, "10", "train", "training epochs"),
    "batch_size": (int, "8", "train", "mini-batch size"),
    "lr": (float, "0.001", "train", "learning rate"),
    "weight_decay": (float, "0.0001", "train", "decoupled weight decay"),
    "beta1": (float, "0.9", "train", "AdamW first-moment decay"),
    "beta2": (float, "0.999", "train", "AdamW second-moment decay"),
    "adam_eps": (float, "1e-08", "train", "AdamW epsilon"),
    "optimizer": (str, "adamw", "train", "adamw or sgd"),
    "loss": (str, "bce_dice", "train", "loss function"),
    "iou_mode": (str, "dataset", "train", "dataset (summed I/U) or per_image"),
    "eval_every": (int, "1", "train", "validate every N epochs"),
    "provider": (str, "hash", "data", "embedding provider: hash, constant or file:<path>"),
    "data": (str, "", "data", "corpus root"),
    "out": (str, "", "data", "output directory"),
}

MODEL_KEYS = [k for k, v in SCHEMA.items() if v[2] in ("model", "shared")]


def parse_kv(text: str, origin="<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def _parse_value(key, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key][0](value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        raw = {k: v[1] for k, v in SCHEMA.items()}
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            raw.update(parse_kv(text, path))
        for item in overrides:
            raw.update(parse_kv(item, "--override"))
        return cls({k: _parse_value(k, v) for k, v in raw.items()})

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: self.values[k] for k in MODEL_KEYS})

    def train_config(self, log_path=None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["epochs"], batch_size=v["batch_size"], lr=v["lr"], weight_decay=v["weight_decay"],
            betas=(v["beta1"], v["beta2"]), eps=v["adam_eps"], loss=v["loss"], optimizer=v["optimizer"],
            seed=v["seed"], log_path=log_path, iou_mode=v["iou_mode"], eval_every=v["eval_every"],
        )

    def provider(self) -> EmbeddingProvider:
        return EmbeddingProvider.from_spec(self.values["provider"], dim=self.values["embed_dim"], seed=self.values["seed"])


def model_config_to_kv(cfg: ModelConfig) -> str:
    lines = []
    for key in MODEL_KEYS:
        val = getattr(cfg, key)
        if isinstance(val, tuple):
            val = _fmt_ints(val)
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def model_config_from_kv(text: str) -> ModelConfig:
    raw = parse_kv(text, "<checkpoint header>")
    names = {f.name for f in dataclasses.fields(ModelConfig)}
    for key in raw:
        if key not in MODEL_KEYS or key not in names:
            raise ConfigError(f"checkpoint header has unknown field {key!r}")
    return ModelConfig(**{k: _parse_value(k, v) for k, v in raw.items()})


def help_text() -> str:
    rows = [f"  {k:<14} default={v[1]!s:<22} {v[3]}" for k, v in SCHEMA.items()]
    return "config keys (key=value, one per line):\n" + "\n".join(rows)
