"""Small neural-net layer zoo over the autodiff core.

Modules hold parameters as :func:`mvrgbd.autodiff.parameter` tensors and
expose ``parameters()`` / ``named_parameters()`` for optimizers and
checkpointing. Initialization takes an explicit ``numpy.random.Generator``
so builds are reproducible end to end.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CorruptCheckpoint


class Module:
    """Base class: parameter discovery by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear(Module):
    """y = x @ W + b with W of shape (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False, dtype=np.float32):
        if zero_init:
            w = np.zeros((in_features, out_features), dtype=dtype)
        else:
            w = xavier_uniform(rng, (in_features, out_features), in_features, out_features, dtype)
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out


class Conv2d(Module):
    """3x3/1x1 convolution wrapper, weight (out, in, k, k)."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None, zero_init: bool = False,
                 dtype=np.float32):
        if pad is None:
            pad = k // 2
        fan_in = in_ch * k * k
        if zero_init:
            w = np.zeros((out_ch, in_ch, k, k), dtype=dtype)
        else:
            w = he_normal(rng, (out_ch, in_ch, k, k), fan_in, dtype)
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.zeros(out_ch, dtype=dtype))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    """Group normalization over (B, C, H, W) with per-channel affine."""

    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5, dtype=np.float32):
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.gamma = ad.parameter(np.ones((channels, 1, 1), dtype=dtype))
        self.beta = ad.parameter(np.zeros((channels, 1, 1), dtype=dtype))
        self.groups = groups
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.gamma, self.beta, self.groups, self.eps)


class LayerNorm(Module):
    """Layer norm over the last axis."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = ad.parameter(np.ones(dim, dtype=dtype))
        self.beta = ad.parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10_000.0,
                         dtype=np.float32) -> np.ndarray:
    """Classic sin/cos positional features for (batched) scalar steps.

    t: array of shape (B,); returns (B, dim) with interleaved halves
    [sin(t*f_0)..sin(t*f_{d/2-1}), cos(...)] and log-spaced frequencies.
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask_bias: np.ndarray | None = None) -> Tensor:
    """Attention over stacked matrices: q (..., Tq, d), k (..., Tk, d), v (..., Tk, dv).

    ``mask_bias`` broadcasts against the (..., Tq, Tk) score array; use large
    negative values to exclude keys.
    """
    d = q.shape[-1]
    scores = ad.matmul(q, ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = ad.mul(scores, np.asarray(1.0 / math.sqrt(d), dtype=q.dtype))
    if mask_bias is not None:
        scores = ad.add(scores, mask_bias)
    attn = ad.softmax(scores, axis=-1)
    return ad.matmul(attn, v)


# -- checkpoint io ---------------------------------------------------------

_CKPT_MAGIC = b"MVCK"
_CKPT_VERSION = 1


def save_state(module: Module, path, meta: dict | None = None) -> None:
    """Write every named parameter to ``path``.

    Layout: magic, u32 version, u32 header length, JSON header
    ``{"params": [[name, shape, dtype], ...], "meta": {...}}``, then the raw
    little-endian parameter blobs in header order.
    """
    named = list(module.named_parameters())
    header = {
        "params": [[name, list(p.shape), str(p.data.dtype)] for name, p in named],
        "meta": meta or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        f.write(blob)
        for _, p in named:
            f.write(np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<")).tobytes())


def load_state(module: Module, path) -> dict:
    """Restore parameters saved by :func:`save_state`; returns the meta dict.

    Raises
    ------
    CorruptCheckpoint
        On bad magic, version, truncation, or any name/shape/dtype mismatch
        with the module's current parameters.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable header ({e})") from e
    named = dict(module.named_parameters())
    if [n for n, _, _ in header["params"]] != list(named):
        raise CorruptCheckpoint(f"{path}: parameter names do not match this model")
    off = 12 + hlen
    for name, shape, dtype in header["params"]:
        p = named[name]
        if list(p.shape) != shape or str(p.data.dtype) != dtype:
            raise CorruptCheckpoint(
                f"{path}: {name} stored as {shape}/{dtype}, model has "
                f"{list(p.shape)}/{p.data.dtype}")
        n_bytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if off + n_bytes > len(raw):
            raise CorruptCheckpoint(f"{path}: truncated at {name}")
        p.data[...] = np.frombuffer(
            raw[off:off + n_bytes], dtype=np.dtype(dtype).newbyteorder("<")).reshape(shape)
        off += n_bytes
    if off != len(raw):
        raise CorruptCheckpoint(f"{path}: {len(raw) - off} trailing bytes")
    return header.get("meta", {})
