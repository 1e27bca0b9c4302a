"""Compact U-Net encoder/decoder producing per-pixel class logits.

Each block is two 3x3 conv + ReLU layers; channels double per encoder
level; the decoder upsamples with nearest-neighbour followed by a 3x3
conv and concatenates the matching skip feature map. A final 3x3 conv +
ReLU produces the feature stage (`head_features` channels) consumed by
the output head (either the deterministic 1x1 conv owned by the model
or a stochastic head supplied externally).

Dropout, when active, is applied only at the configured sites; the
defaults cover the deepest encoder block and the two innermost decoder
blocks so shallow features stay deterministic.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor


def default_dropout_sites(depth: int) -> frozenset:
    sites = {f"enc{depth - 1}", f"dec{depth - 1}"}
    if depth >= 2:
        sites.add(f"dec{depth - 2}")
    return frozenset(sites)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    head_features: int = 64
    num_classes: int = 2
    dropout_rate: float = 0.5
    dropout_sites: frozenset = None  # None -> default central sites
    input_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.num_classes < 2:
            raise ConfigError("UNetConfig: depth >= 1, base_channels >= 1, num_classes >= 2 required")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("UNetConfig: dropout_rate must lie in [0, 1)")
        if self.dropout_sites is None:
            object.__setattr__(self, "dropout_sites", default_dropout_sites(self.depth))
        else:
            object.__setattr__(self, "dropout_sites", frozenset(self.dropout_sites))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout_sites"] = sorted(self.dropout_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        if d.get("dropout_sites") is not None:
            d["dropout_sites"] = frozenset(d["dropout_sites"])
        return cls(**d)


def _conv_shapes(cfg: UNetConfig):
    """Ordered (name, kernel_shape) list for all conv layers of the net."""
    shapes = []
    ch = cfg.input_channels
    for i in range(cfg.depth):
        out = cfg.base_channels * (2 ** i)
        shapes.append((f"enc{i}.conv0", (out, ch, 3, 3)))
        shapes.append((f"enc{i}.conv1", (out, out, 3, 3)))
        ch = out
    bott = cfg.base_channels * (2 ** cfg.depth)
    shapes.append(("bottleneck.conv0", (bott, ch, 3, 3)))
    shapes.append(("bottleneck.conv1", (bott, bott, 3, 3)))
    ch = bott
    for i in reversed(range(cfg.depth)):
        skip = cfg.base_channels * (2 ** i)
        shapes.append((f"dec{i}.up", (skip, ch, 3, 3)))
        shapes.append((f"dec{i}.conv0", (skip, 2 * skip, 3, 3)))
        shapes.append((f"dec{i}.conv1", (skip, skip, 3, 3)))
        ch = skip
    shapes.append(("features.conv", (cfg.head_features, ch, 3, 3)))
    return shapes


class UNetModel:
    """Parameter container plus forward passes.

    `params` maps layer names to weight/bias tensors. When `has_head`
    the model owns a deterministic 1x1 output head ("head.weight",
    "head.bias"); the neural-linear scheme builds the model without it
    and attaches a stochastic head instead.
    """

    def __init__(self, config: UNetConfig, params: dict, has_head: bool):
        self.config = config
        self.params = params
        self.has_head = has_head

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy_state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict):
        for k, v in self.params.items():
            v.data = state[k].copy()


def build(config: UNetConfig, rng: np.random.Generator, with_head: bool = True) -> UNetModel:
    """He fan-in initialized model; reproducible from the rng state."""
    params = {}
    for name, shp in _conv_shapes(config):
        cout, cin, kh, kw = shp
        std = np.sqrt(2.0 / (cin * kh * kw))
        params[name + ".weight"] = Tensor(rng.normal(0.0, std, size=shp), requires_grad=True)
        params[name + ".bias"] = Tensor(np.zeros(cout), requires_grad=True)
    if with_head:
        shp = (config.num_classes, config.head_features, 1, 1)
        std = np.sqrt(2.0 / config.head_features)
        params["head.weight"] = Tensor(rng.normal(0.0, std, size=shp), requires_grad=True)
        params["head.bias"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
    return UNetModel(config, params, with_head)


def expected_param_count(config: UNetConfig, with_head: bool = True) -> int:
    n = sum(int(np.prod(s)) + s[0] for _, s in _conv_shapes(config))
    if with_head:
        n += config.num_classes * config.head_features + config.num_classes
    return n


def _block(x, params, name, rng=None, drop_rate=0.0):
    x = T.relu(T.conv2d(x, params[f"{name}.conv0.weight"], params[f"{name}.conv0.bias"], padding=1))
    x = T.relu(T.conv2d(x, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"], padding=1))
    if drop_rate > 0.0:
        x = T.dropout(x, drop_rate, rng, active=True)
    return x


def forward_features(model: UNetModel, x: Tensor, dropout_active: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Per-pixel feature vectors (N, head_features, H, W)."""
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise DimensionError(f"expected input (N,{cfg.input_channels},H,W), got {x.shape}")
    div = 2 ** cfg.depth
    if x.shape[2] % div or x.shape[3] % div:
        raise DimensionError(f"spatial extents {x.shape[2]}x{x.shape[3]} not divisible by 2^depth={div}")
    if dropout_active and cfg.dropout_rate > 0.0 and cfg.dropout_sites and rng is None:
        raise ConfigError("dropout_active requires an rng")

    def rate(site):
        return cfg.dropout_rate if dropout_active and site in cfg.dropout_sites else 0.0

    p = model.params
    skips = []
    h = x
    for i in range(cfg.depth):
        h = _block(h, p, f"enc{i}", rng, rate(f"enc{i}"))
        skips.append(h)
        h = T.max_pool2d(h, 2)
    h = _block(h, p, "bottleneck", rng, rate("bottleneck"))
    for i in reversed(range(cfg.depth)):
        h = T.upsample_nearest(h, 2)
        h = T.relu(T.conv2d(h, p[f"dec{i}.up.weight"], p[f"dec{i}.up.bias"], padding=1))
        h = T.concat_channels(skips[i], h)
        h = _block(h, p, f"dec{i}", rng, rate(f"dec{i}"))
    return T.relu(T.conv2d(h, p["features.conv.weight"], p["features.conv.bias"], padding=1))


def forward_logits(model: UNetModel, x: Tensor, dropout_active: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Features followed by the deterministic 1x1 output head."""
    if not model.has_head:
        raise ConfigError("model has no deterministic head (neural-linear model?)")
    feats = forward_features(model, x, dropout_active, rng)
    return T.conv2d(feats, model.params["head.weight"], model.params["head.bias"])


# -- checkpoint container ----------------------------------------------

_MAGIC = b"RBAY"
_VERSION = 1


def save_checkpoint(path, config: UNetConfig, arrays: dict, extra_meta: dict | None = None):
    """Versioned binary container; float64 little-endian blobs, bit-exact."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    meta = {"config": config.to_dict()}
    if extra_meta:
        meta["extra"] = extra_meta
    mb = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    names = sorted(arrays)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    data = buf.getvalue()
    from .util import atomic_write_bytes

    atomic_write_bytes(path, data)


def load_checkpoint(path):
    """Returns (config, arrays dict, extra metadata dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != _MAGIC:
        raise DataError(f"{path}: not a RBAY checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(mlen))
    config = UNetConfig.from_dict(meta["config"])
    (count,) = struct.unpack("<I", buf.read(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()
    return config, arrays, meta.get("extra", {})


def model_from_checkpoint(path) -> UNetModel:
    config, arrays, extra = load_checkpoint(path)
    has_head = "head.weight" in arrays
    rng = np.random.default_rng(0)
    model = build(config, rng, with_head=has_head)
    for k in model.params:
        if k not in arrays:
            raise DataError(f"{path}: missing parameter {k}")
        if model.params[k].shape != arrays[k].shape:
            raise DataError(f"{path}: parameter {k} has shape {arrays[k].shape}, expected {model.params[k].shape}")
        model.params[k].data = arrays[k]
    return model
