"""Attention-based encoder-decoder for gridded wind forecasting.

Encoder: batch norm, a stem convolution and strided down-sampling blocks.
Decoder: residual sequence/spatial attention blocks (RSSAB), up-sampling
blocks and a 2-channel head producing ``(u10, v10)``. Time is never strided.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from windcast.errors import CheckpointError, ConfigError, ShapeError
from windcast.tensor import (Tensor, add, batchnorm, conv3d, mul, pad_crop_spatial, relu, sigmoid,
                             spatial_mean, upsample2x_spatial)

logger = logging.getLogger(__name__)

MAGIC = b"WABD"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class AbedConfig:
    in_features: int = 14
    stem_channels: int = 4
    encoder_channels: tuple = (8, 16)
    n_rssab: int = 2
    rssab_kernel: tuple = (3, 3, 3)
    attention_reduction: int = 4
    final_out_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "rssab_kernel", tuple(int(k) for k in self.rssab_kernel))
        enc = self.encoder_channels
        if self.in_features < 1 or self.stem_channels < 1 or self.final_out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if not enc or any(c < 1 for c in enc) or any(b <= a for a, b in zip(enc, enc[1:])):
            raise ConfigError(f"encoder_channels must be non-empty and strictly ascending, got {list(enc)}")
        if self.n_rssab < 1:
            raise ConfigError(f"n_rssab must be >= 1, got {self.n_rssab}")
        if len(self.rssab_kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.rssab_kernel):
            raise ConfigError(f"rssab_kernel must be three odd sizes, got {list(self.rssab_kernel)}")
        r = self.attention_reduction
        if r < 1 or enc[-1] % r != 0:
            raise ConfigError(f"attention_reduction {r} must divide the working width {enc[-1]}")

    @property
    def width(self):
        return self.encoder_channels[-1]

    def to_dict(self):
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["rssab_kernel"] = list(self.rssab_kernel)
        return d


def _same(kernel):
    return tuple(k // 2 for k in kernel)


@dataclass
class AbedModel:
    """Named parameters and batch-norm buffers of one network instance."""

    config: AbedConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        """Copies of every parameter and buffer, keyed by name."""
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: b.copy() for k, b in self.buffers.items()})
        return out

    def load_state(self, state):
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=p.dtype)
        for k, b in self.buffers.items():
            b[...] = state[k]

    def __call__(self, x, mode="infer", probe=None):
        return forward(self, x, mode, probe)


def _conv_param(rng, c_out, c_in, kernel, dtype):
    fan_in = c_in * int(np.prod(kernel))
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(c_out, c_in) + tuple(kernel))
    return Tensor(w, requires_grad=True, dtype=dtype), Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)


def build_model(cfg: AbedConfig = AbedConfig(), seed: int = 0, dtype=np.float32) -> AbedModel:
    """Deterministically initialised model for ``cfg``."""
    rng = np.random.default_rng(seed)
    model = AbedModel(cfg)
    p = model.params

    def conv(name, c_out, c_in, kernel):
        p[name + ".weight"], p[name + ".bias"] = _conv_param(rng, c_out, c_in, kernel, dtype)

    k3 = cfg.rssab_kernel
    p["bn0.gamma"] = Tensor(np.ones(cfg.in_features), requires_grad=True, dtype=dtype)
    p["bn0.beta"] = Tensor(np.zeros(cfg.in_features), requires_grad=True, dtype=dtype)
    model.buffers["bn0.running_mean"] = np.zeros(cfg.in_features, dtype=dtype)
    model.buffers["bn0.running_var"] = np.ones(cfg.in_features, dtype=dtype)
    conv("stem", cfg.stem_channels, cfg.in_features, k3)
    chans = (cfg.stem_channels,) + cfg.encoder_channels
    for i in range(len(cfg.encoder_channels)):
        conv(f"down{i}", chans[i + 1], chans[i], k3)
    c, cr = cfg.width, cfg.width // cfg.attention_reduction
    for i in range(cfg.n_rssab):
        conv(f"rssab{i}.conv1", c, c, k3)
        conv(f"rssab{i}.conv2", c, c, k3)
        conv(f"rssab{i}.att_t1", cr, c, (1, 1, 1))
        conv(f"rssab{i}.att_t2", c, cr, (1, 1, 1))
        conv(f"rssab{i}.att_s", 1, c, k3)
    for j, i in enumerate(reversed(range(len(cfg.encoder_channels)))):
        conv(f"up{j}", chans[i], chans[i + 1], k3)
    conv("head", cfg.final_out_channels, cfg.stem_channels, k3)
    return model


def rssab_forward(model: AbedModel, i: int, f_in, probe=None):
    """One residual sequence-and-spatial attention block."""
    p, cfg = model.params, model.config
    pre = f"rssab{i}."
    if f_in.shape[1] != cfg.width:
        raise ShapeError(f"RSSAB expects {cfg.width} channels, got {f_in.shape[1]}")
    pad = _same(cfg.rssab_kernel)
    g = relu(conv3d(f_in, p[pre + "conv1.weight"], p[pre + "conv1.bias"], 1, pad))
    g = conv3d(g, p[pre + "conv2.weight"], p[pre + "conv2.bias"], 1, pad)
    # temporal attention: one gate per channel and instant
    a = relu(conv3d(spatial_mean(g), p[pre + "att_t1.weight"], p[pre + "att_t1.bias"]))
    a = sigmoid(conv3d(a, p[pre + "att_t2.weight"], p[pre + "att_t2.bias"]))
    g_t = mul(g, a)
    # spatial attention: one gate per cell and instant, shared over channels
    m = sigmoid(conv3d(g_t, p[pre + "att_s.weight"], p[pre + "att_s.bias"], 1, pad))
    g_s = mul(g_t, m)
    if probe is not None:
        probe.append({"block": i, "temporal": a.data.copy(), "spatial": m.data.copy()})
    return add(f_in, g_s)


def forward(model: AbedModel, x, mode="infer", probe=None):
    """Map ``(b, in_features, t, h, w)`` to ``(b, 2, t, h, w)``.

    ``probe``, when a list, receives the attention maps of every RSSAB.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be train or infer, got {mode!r}")
    cfg, p = model.config, model.params
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=model.dtype)
    if x.ndim != 5 or x.shape[1] != cfg.in_features:
        raise ShapeError(f"expected (b, {cfg.in_features}, t, h, w) input, got {x.shape}")
    h, w = x.shape[3], x.shape[4]
    pad = _same(cfg.rssab_kernel)
    f = batchnorm(x, p["bn0.gamma"], p["bn0.beta"], model.buffers["bn0.running_mean"],
                  model.buffers["bn0.running_var"], training=(mode == "train"))
    f = conv3d(f, p["stem.weight"], p["stem.bias"], 1, pad)
    sizes = [(h, w)]
    for i in range(len(cfg.encoder_channels)):
        f = relu(conv3d(f, p[f"down{i}.weight"], p[f"down{i}.bias"], (1, 2, 2), pad))
        sizes.append(f.shape[3:])
    for i in range(cfg.n_rssab):
        f = rssab_forward(model, i, f, probe)
    for j in range(len(cfg.encoder_channels)):
        th, tw = sizes[-2 - j]
        f = pad_crop_spatial(upsample2x_spatial(f), th, tw)
        f = relu(conv3d(f, p[f"up{j}.weight"], p[f"up{j}.bias"], 1, pad))
    return conv3d(f, p["head.weight"], p["head.bias"], 1, pad)


def shape_trace(cfg: AbedConfig, h: int, w: int):
    """Spatial sizes after the stem and each down-sampling block."""
    sizes = [(h, w)]
    for _ in cfg.encoder_channels:
        h, w = (h + 1) // 2, (w + 1) // 2
        sizes.append((h, w))
    return sizes


def rssab_parameter_count(cfg: AbedConfig) -> int:
    c, cr, k = cfg.width, cfg.width // cfg.attention_reduction, int(np.prod(cfg.rssab_kernel))
    return 2 * (c * c * k + c) + (c * cr + cr) + (cr * c + c) + (c * k + 1)


# checkpoints


def save_model(model: AbedModel, path, meta=None):
    """Write a checkpoint atomically; ``meta`` is stored verbatim in the header."""
    path = Path(path)
    code = "<f8" if model.dtype == np.float64 else "<f4"
    manifest, blobs = [], []
    for kind, items in (("param", ((k, t.data) for k, t in model.params.items())),
                        ("buffer", model.buffers.items())):
        for name, arr in items:
            manifest.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype=code).tobytes())
    head = json.dumps({"config": model.config.to_dict(), "dtype": code, "manifest": manifest,
                       "meta": meta or {}}, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


def read_checkpoint_header(path):
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: file too short")
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"{path}: not a version-{VERSION} checkpoint (magic {magic!r}, version {version})")
    try:
        head = json.loads(raw[_PREAMBLE.size:_PREAMBLE.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    return head, raw, _PREAMBLE.size + hlen


def load_model(path, dtype=None, expect: AbedConfig | None = None):
    """Rebuild a model from a checkpoint.

    ``dtype`` defaults to the stored precision. Loading a 64-bit checkpoint as
    32-bit rounds every value and emits a ``UserWarning``. ``expect`` makes
    any configuration difference a :class:`CheckpointError`.
    """
    head, raw, pos = read_checkpoint_header(path)
    try:
        cfg = AbedConfig(**head["config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid stored config: {exc}") from exc
    if expect is not None and expect != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in expect.to_dict().items() if cfg.to_dict()[k] != v}
        raise CheckpointError(f"{path}: config mismatch (expected, stored): {diff}")
    code = head["dtype"]
    stored = np.dtype(code)
    target = np.dtype(dtype) if dtype is not None else stored.newbyteorder("=")
    if stored.itemsize > target.itemsize:
        warnings.warn(f"{path}: 64-bit checkpoint loaded as {target}; values are rounded", UserWarning,
                      stacklevel=2)
    model = build_model(cfg, seed=0, dtype=target)
    names = set(model.params) | set(model.buffers)
    stored_names = [m["name"] for m in head["manifest"]]
    if set(stored_names) != names or len(stored_names) != len(names):
        raise CheckpointError(f"{path}: parameter names differ from the config's model: "
                              f"{sorted(names.symmetric_difference(stored_names))}")
    state = {}
    for m in head["manifest"]:
        n = int(np.prod(m["shape"], dtype=np.int64))
        if pos + n * stored.itemsize > len(raw):
            raise CheckpointError(f"{path}: truncated at {m['name']}")
        arr = np.frombuffer(raw, dtype=stored, count=n, offset=pos).reshape(m["shape"])
        ref = model.params[m["name"]].data if m["kind"] == "param" else model.buffers[m["name"]]
        if arr.shape != ref.shape:
            raise CheckpointError(f"{path}: {m['name']} has shape {arr.shape}, expected {ref.shape}")
        state[m["name"]] = arr.astype(target)
        pos += n * stored.itemsize
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    model.load_state(state)
    return model, head.get("meta", {})
