"""Model checkpoints as DTF containers.

The container holds every named parameter plus a ``__config__`` u8 tensor
carrying the model configuration as ``key=value`` text.
"""

from __future__ import annotations

import numpy as np

from .dtf import dtf_read, dtf_write
from .errors import ConfigError, DataError
from .model import DocParseNet, ModelConfig, build

CONFIG_KEY = "__config__"


def save_checkpoint(path, model: DocParseNet):
    from .config import model_config_to_kv

    header = np.frombuffer(model_config_to_kv(model.cfg).encode("utf-8"), dtype=np.uint8)
    dtf_write(path, {CONFIG_KEY: header, **model.state()})


def read_checkpoint(path):
    try:
        tensors = dtf_read(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if CONFIG_KEY not in tensors:
        raise ConfigError(f"{path}: checkpoint has no {CONFIG_KEY} header")
    return tensors.pop(CONFIG_KEY).tobytes().decode("utf-8"), tensors


def load_checkpoint(path, expected: ModelConfig = None) -> DocParseNet:
    """Rebuild the model from its header and load the stored parameters.

    With ``expected`` given, any differing config field is a ConfigError.
    """
    from .config import model_config_from_kv

    header, state = read_checkpoint(path)
    cfg = model_config_from_kv(header)
    if expected is not None:
        for field in ("channels", "in_channels", "num_classes", "heads", "mlp_stages", "embed_dim", "mlp_ratio", "shift_groups"):
            if getattr(cfg, field) != getattr(expected, field):
                raise ConfigError(
                    f"checkpoint field {field!r} is {getattr(cfg, field)!r}, config says {getattr(expected, field)!r}"
                )
    model = build(cfg)
    model.load_state(state)
    return model
