"""Independent closed-form counts derived directly from a ModelConfig.

Nothing here touches a built model: parameter totals come from layer shapes
implied by the configuration alone.
"""


def conv_params(c_in, c_out, k):
    return k * k * c_in * c_out + c_out


def linear_params(c_in, c_out):
    return c_in * c_out + c_out


def closed_form_params(cfg):
    ch = list(cfg.channels)
    total = 0
    prev = cfg.in_channels
    for i, c in enumerate(ch, 1):
        if i in cfg.mlp_stages:
            hidden = cfg.mlp_ratio * c
            total += conv_params(prev, c, 1)  # channel projection
            total += linear_params(c, hidden) + (9 * hidden + hidden) + linear_params(hidden, c)
        else:
            total += conv_params(prev, c, 3) + conv_params(c, c, 1)
        prev = c
    c6, e = ch[-1], cfg.embed_dim
    total += 2 * linear_params(c6, c6) + 2 * linear_params(e, c6) + 2 * c6
    for i in range(5, 0, -1):
        c_in, c_out = ch[i] + ch[i - 1], ch[i - 1]
        total += conv_params(c_in, c_out, 3) + conv_params(c_out, c_out, 1)
    total += conv_params(ch[0], cfg.num_classes, 1)
    return total


def conv_flops(c_in, c_out, k, h, w, groups=1):
    return 2 * k * k * (c_in // groups) * c_out * h * w
