"""Encoders, decoder heads and feature discriminators, plus checkpoint I/O."""

from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

DOWNSAMPLE = 8


class Module:
    """Holds named parameter tensors and child modules, in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop gradients from reaching this module's parameters."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0):
        super().__init__()
        self.stride, self.pad, self.k = stride, pad, k
        self.c_in, self.c_out = c_in, c_out
        self.weight = self.add_param("weight", kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = self.add_param("bias", np.zeros(c_out, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return dc.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    """Fully-connected layer on (N, in) inputs."""

    def __init__(self, rng, n_in: int, n_out: int):
        super().__init__()
        self.weight = self.add_param("weight", kaiming_uniform(rng, (n_in, n_out), n_in))
        self.bias = self.add_param("bias", np.zeros(n_out, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return dc.matmul(x, self.weight) + self.bias


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 3

    @property
    def channels(self) -> int:
        return self.widths[-1]


class Encoder(Module):
    """Three stride-2 stages; the two deeper ones add a stride-1 refinement conv.

    Maps N x 3 x H x W images to N x C x H/8 x W/8 features.
    """

    def __init__(self, rng, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        if len(config.widths) != 3:
            raise ValueError(f"encoder needs 3 stage widths for a /8 stride plan, got {config.widths}")
        self.config = config
        self.layers: list[Conv2d] = []
        c = config.in_channels
        for i, w in enumerate(config.widths):
            self.layers.append(self.add_child(f"stage{i}.down", Conv2d(rng, c, w, 3, stride=2, pad=1)))
            if i > 0:
                self.layers.append(self.add_child(f"stage{i}.conv", Conv2d(rng, w, w, 3, stride=1, pad=1)))
            c = w

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"encoder expects N x {self.config.in_channels} x H x W, got {x.shape}")
        if x.shape[2] % DOWNSAMPLE or x.shape[3] % DOWNSAMPLE:
            raise ShapeError(f"image size {x.shape[2:]} not divisible by {DOWNSAMPLE}")
        for layer in self.layers:
            x = dc.relu(layer(x))
        return x


def encode(encoder: Encoder, x: Tensor) -> Tensor:
    return encoder(x)


class Head(Module):
    """1x1 conv stack to two-class logits, bilinearly upsampled by 8."""

    def __init__(self, rng, in_channels: int, hidden: int = 64, n_classes: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = self.add_child("conv1", Conv2d(rng, in_channels, hidden, 1))
        self.conv2 = self.add_child("conv2", Conv2d(rng, hidden, n_classes, 1))

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.in_channels:
            raise ShapeError(f"head expects N x {self.in_channels} x h x w features, got {f.shape}")
        logits = self.conv2(dc.relu(self.conv1(f)))
        h, w = f.shape[2:]
        return dc.upsample_bilinear(logits, (h * DOWNSAMPLE, w * DOWNSAMPLE))


def head_forward(head: Head, f: Tensor) -> Tensor:
    return head(f)


DISC_CHANNELS = (64, 128, 256, 1)
DISC_STRIDES = (2, 2, 1, 1)
DISC_KERNEL = 4
DISC_PAD = 1


def disc_output_size(size: int) -> int:
    """Spatial extent of the patch map for an input of extent ``size``."""
    for s in DISC_STRIDES:
        size = dc.conv_output_size(size, DISC_KERNEL, s, DISC_PAD)
        if size < 1:
            raise ShapeError("feature map too small for the discriminator stack")
    return size


def min_disc_input() -> int:
    size = 1
    while True:
        try:
            disc_output_size(size)
            return size
        except ShapeError:
            size += 1


class Discriminator(Module):
    """PatchGAN-style critic: four 4x4 convs, no normalisation, raw logits out."""

    def __init__(self, rng, in_channels: int, slope: float = 0.2):
        super().__init__()
        self.slope = slope
        self.layers: list[Conv2d] = []
        c = in_channels
        for i, (c_out, s) in enumerate(zip(DISC_CHANNELS, DISC_STRIDES)):
            self.layers.append(self.add_child(f"conv{i}", Conv2d(rng, c, c_out, DISC_KERNEL, s, DISC_PAD)))
            c = c_out

    def forward(self, f: Tensor) -> Tensor:
        if min(f.shape[2:]) < min_disc_input():
            raise ShapeError(
                f"discriminator needs features of at least {min_disc_input()} pixels, got {f.shape[2:]}"
            )
        for layer in self.layers[:-1]:
            f = dc.leaky_relu(layer(f), self.slope)
        return self.layers[-1](f)


def discriminate(disc: Discriminator, f: Tensor) -> Tensor:
    return disc(f)


@dataclass
class FeatureQuad:
    """Features of both images under both encoders.

    ``ss`` = E_s(x_s), ``st`` = E_t(x_s), ``tt`` = E_t(x_t), ``ts`` = E_s(x_t).
    """

    ss: Tensor
    st: Tensor
    tt: Tensor
    ts: Tensor


def quad_forward(enc_s: Encoder, enc_t: Encoder, x_s: Tensor, x_t: Tensor) -> FeatureQuad:
    if x_s.shape[1:] != x_t.shape[1:]:
        raise ShapeError(f"source and target batches differ in shape: {x_s.shape} vs {x_t.shape}")
    return FeatureQuad(ss=enc_s(x_s), st=enc_t(x_s), tt=enc_t(x_t), ts=enc_s(x_t))


# -- checkpoints -----------------------------------------------------------------
#
# Little-endian layout:
#   magic  b"DS2NCKPT"                 8 bytes
#   version                            u32
#   config hash (sha256 digest)        32 bytes
#   record count                       u32
#   per record: name length u32, utf-8 name, dtype code u8,
#               rank u32, extents u64 x rank, raw values
#   metadata length u32, utf-8 JSON metadata

MAGIC = b"DS2NCKPT"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(IOError):
    pass


def config_digest(config_json: str) -> bytes:
    return hashlib.sha256(config_json.encode("utf-8")).digest()


def save_checkpoint(path, tensors: dict[str, np.ndarray], digest: bytes, meta: dict | None = None) -> None:
    if len(digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += digest
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=dt).tobytes()
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(blob)) + blob
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], bytes, dict]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint {path}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = take(32)
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode("utf-8"))
    return tensors, digest, meta
