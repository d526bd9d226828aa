"""Convolutional encoder-decoder mapping a 4D scan to K nonnegative networks.

The network has two stages:

* a time-invariant representation: one shared 3x3x3 convolution (C filters)
  with normalization and LeakyReLU applied to every time point separately,
  followed by an elementwise mean over time points;
* a U-Net: one stride-1 convolution, three stride-2 convolutions, three
  stride-2 transposed convolutions (with encoder skips concatenated), two
  stride-1 convolutions and a sigmoid output layer with K channels.

Every output channel is divided by its in-mask maximum. Normalization uses
per-sample statistics (batch size is one), at training and inference alike.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .data import Volume4D, flatten, mask_index, unflatten


class ShapeError(ValueError):
    """Input extents incompatible with the model."""


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    n_networks: int = 17
    leaky_slope: float = 0.2
    skip_connections: bool = True
    enc_width: int = 16
    down_widths: tuple = (32, 32, 32)
    up_widths: tuple = (32, 32, 16)
    post_widths: tuple = (16, 16)
    norm_eps: float = 1e-5
    stop_max_gradient: bool = False
    normalize: str = "unit"

    def __post_init__(self):
        object.__setattr__(self, "down_widths", tuple(self.down_widths))
        object.__setattr__(self, "up_widths", tuple(self.up_widths))
        object.__setattr__(self, "post_widths", tuple(self.post_widths))
        if self.channels < 1:
            raise ValueError("channels must be at least 1")
        if self.n_networks < 2:
            raise ValueError("n_networks must be at least 2")
        if len(self.down_widths) != 3 or len(self.up_widths) != 3:
            raise ValueError("the U-Net has exactly three down and three up stages")

    @classmethod
    def from_dict(cls, cfg):
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**cfg)

    def to_dict(self):
        d = asdict(self)
        for key in ("down_widths", "up_widths", "post_widths"):
            d[key] = list(d[key])
        return d


def layer_specs(config):
    """Ordered ``(name, kind, c_in, c_out, normalized)`` for every layer.

    ``kind`` is ``conv``, ``down`` (stride 2) or ``up`` (transposed, stride 2).
    """
    c = config
    skip = c.skip_connections
    d1, d2, d3 = c.down_widths
    u1, u2, u3 = c.up_widths
    specs = [
        ("rep", "conv", 1, c.channels, True),
        ("enc0", "conv", c.channels, c.enc_width, True),
        ("down1", "down", c.enc_width, d1, True),
        ("down2", "down", d1, d2, True),
        ("down3", "down", d2, d3, True),
        ("up1", "up", d3, u1, True),
        ("up2", "up", u1 + (d2 if skip else 0), u2, True),
        ("up3", "up", u2 + (d1 if skip else 0), u3, True),
    ]
    prev = u3 + (c.enc_width if skip else 0)
    for i, width in enumerate(c.post_widths, 1):
        specs.append((f"post{i}", "conv", prev, width, True))
        prev = width
    specs.append(("out", "conv", prev, c.n_networks, False))
    return specs


def param_shapes(config):
    shapes = {}
    for name, kind, cin, cout, normed in layer_specs(config):
        shapes[f"{name}.kernel"] = (3, 3, 3, cout, cin) if kind == "up" else (3, 3, 3, cin, cout)
        shapes[f"{name}.bias"] = (cout,)
        if normed:
            shapes[f"{name}.gamma"] = (cout,)
            shapes[f"{name}.beta"] = (cout,)
    return shapes


def kernel_std(config, fan_in):
    """He-normal scale adjusted for the LeakyReLU slope."""
    return float(np.sqrt(2.0 / ((1.0 + config.leaky_slope**2) * fan_in)))


def init_params(config, seed=0, dtype=np.float32):
    """Fresh parameters: fan-in scaled normal kernels, zero biases, unit
    normalization scale and zero shift."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".kernel"):
            fan_in = 27 * (shape[4] if name.startswith("up") else shape[3])
            params[name] = (rng.standard_normal(shape) * kernel_std(config, fan_in)).astype(dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def count_params(params):
    return int(sum(np.size(v) for v in params.values()))


def check_extents(spatial):
    bad = [s for s in spatial if s % 8]
    if bad:
        raise ShapeError(
            f"spatial extents {tuple(spatial)} must each be divisible by 8; "
            "pad or crop the volume to the next multiple of 8"
        )


def model_input(volume, mask=None, normalize="unit"):
    """Prepare a volume for the network and the loss.

    Returns ``(x, X)``: ``x`` is the ``(T, W, H, D, 1)`` float32 network input
    (normalized time series rescaled to unit RMS, zero outside the mask) and
    ``X`` the matching ``T x S`` float64 data matrix used by the loss.
    """
    dm = flatten(volume, mask, normalize=normalize)
    rms = np.sqrt(np.mean(dm.X**2))
    scaled = dm.X / rms if rms > 0 else dm.X
    vol = unflatten(scaled, dm.mask).values
    x = np.ascontiguousarray(np.moveaxis(vol, 3, 0)[..., None], dtype=np.float32)
    return x, dm


def _layer(h, p, name, kind, normed, slope, eps):
    w, b = p[f"{name}.kernel"], p[f"{name}.bias"]
    if kind == "up":
        h = ad.conv_transpose3d(h, w, b)
    else:
        h = ad.conv3d(h, w, b, stride=2 if kind == "down" else 1)
    if normed:
        h = ad.channel_norm(h, p[f"{name}.gamma"], p[f"{name}.beta"], eps)
        h = ad.leaky_relu(h, slope)
    return h


def represent_graph(x, p, config):
    """Shared per-time-point convolution, then the mean over time points.
    ``x`` is a ``(T, W, H, D, 1)`` node; returns ``(1, W, H, D, C)``."""
    h = _layer(x, p, "rep", "conv", True, config.leaky_slope, config.norm_eps)
    return ad.temporal_mean(h, axis=0)


def unet_graph(f, p, config):
    """U-Net on a ``(1, W, H, D, C)`` feature node; returns logits."""
    specs = {s[0]: s for s in layer_specs(config)}
    slope, eps = config.leaky_slope, config.norm_eps

    def run(h, name):
        _, kind, _, _, normed = specs[name]
        return _layer(h, p, name, kind, normed, slope, eps)

    e0 = run(f, "enc0")
    e1 = run(e0, "down1")
    e2 = run(e1, "down2")
    h = run(e2, "down3")
    h = run(h, "up1")
    if config.skip_connections:
        h = ad.concat([h, e2], axis=-1)
    h = run(h, "up2")
    if config.skip_connections:
        h = ad.concat([h, e1], axis=-1)
    h = run(h, "up3")
    if config.skip_connections:
        h = ad.concat([h, e0], axis=-1)
    for i in range(1, len(config.post_widths) + 1):
        h = run(h, f"post{i}")
    return run(h, "out")


def fns_graph(logits, index, config):
    """Sigmoid, restriction to in-mask voxels and per-network max scaling;
    returns the ``K x S`` network node."""
    s = ad.sigmoid(logits)
    s = ad.reshape(s, (-1, config.n_networks))
    s = ad.gather(s, index, axis=0)
    s = ad.channel_max_scale(s, axis=0, stop_gradient=config.stop_max_gradient)
    return ad.transpose(s)


def forward_graph(tape, nodes, x, index, config):
    """Full forward pass on ``tape``; returns the ``K x S`` network node."""
    check_extents(x.shape[1:4])
    xin = tape.constant(x)
    f = represent_graph(xin, nodes, config)
    return fns_graph(unet_graph(f, nodes, config), index, config)


def _const_params(tape, params):
    return {k: tape.constant(v) for k, v in params.items()}


def _as_input(I, config, mask):
    if isinstance(I, Volume4D):
        check_extents(I.spatial)
        x, dm = model_input(I, mask, config.normalize)
        return x, dm.mask
    x = np.asarray(I)
    check_extents(x.shape[1:4])
    return x, np.ones(x.shape[1:4], dtype=bool)


def represent(I, params, config, mask=None):
    """Fused time-invariant features, ``W x H x D x C``."""
    x, _ = _as_input(I, config, mask)
    tape = ad.Tape()
    return represent_graph(tape.constant(x), _const_params(tape, params), config).value[0]


def unet_forward(features, params, config):
    """U-Net logits ``W x H x D x K`` for a ``W x H x D x C`` feature volume."""
    features = np.asarray(features)
    check_extents(features.shape[:3])
    tape = ad.Tape()
    return unet_graph(tape.constant(features[None]), _const_params(tape, params), config).value[0]


def predict_fns(I, params, config, mask=None):
    """Networks for one subject as a ``W x H x D x K`` FN volume.

    Values lie in [0, 1] and each non-degenerate network peaks at exactly 1
    over the in-mask voxels; voxels outside the mask are 0.
    """
    x, mask = _as_input(I, config, mask)
    index = mask_index(mask)
    tape = ad.Tape()
    V = forward_graph(tape, _const_params(tape, params), x, index, config).value
    out = np.zeros((mask.size, config.n_networks), dtype=np.float32)
    out[index] = V.T
    vol = Volume4D(out.reshape(*mask.shape, config.n_networks), kind="fns")
    if not np.all(mask):
        vol.mask = mask
    return vol
