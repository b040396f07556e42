"""Parameterized building blocks on top of the autodiff tape.

Weights initialize uniformly in +-sqrt(6 / (fan_in + fan_out)) from a
named stream; biases start at zero. Checkpoints are a JSON manifest
(parameter names, shapes, dtype, seed metadata) followed by the raw
little-endian float blocks in manifest order (docs/formats.md).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointMismatch, InvalidParameter
from .rng import RandomStream

_CKPT_MAGIC = b"IFC1"

ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu}


def xavier_uniform(shape, stream: RandomStream) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return (stream.uniform(shape) * 2.0 - 1.0) * bound


class Linear:
    """y = x @ W + b, with W of shape (d_in, d_out)."""

    def __init__(self, d_in, d_out, stream, bias=True):
        self.w = Tensor(xavier_uniform((d_in, d_out), stream.child("w")), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)

    def parameters(self, prefix):
        params = {f"{prefix}.w": self.w}
        if self.b is not None:
            params[f"{prefix}.b"] = self.b
        return params


class LayerNorm:
    def __init__(self, dim):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def parameters(self, prefix):
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class MlpBlock:
    """Stack of Linear layers with an activation between them.

    `widths` lists every layer width including input and output, e.g.
    (384, 128, 128) is two Linear layers with one hidden activation.
    Dropout, when enabled, applies to hidden activations only.
    """

    def __init__(self, widths, stream, activation="gelu", dropout=0.0):
        if len(widths) < 2:
            raise InvalidParameter("MlpBlock needs at least two widths")
        if not 0.0 <= dropout < 1.0:
            raise InvalidParameter(f"dropout must be in [0, 1), got {dropout}")
        if activation not in ACTIVATIONS:
            raise InvalidParameter(f"unknown activation {activation!r}")
        self.widths = tuple(widths)
        self.activation = activation
        self.dropout = dropout
        self.layers = [
            Linear(widths[i], widths[i + 1], stream.child(f"layer{i}"))
            for i in range(len(widths) - 1)
        ]

    def __call__(self, x: Tensor, training=False, stream=None) -> Tensor:
        x = self.layers[0](x)
        return self.apply_tail(x, training=training, stream=stream)

    def apply_tail(self, x: Tensor, training=False, stream=None) -> Tensor:
        """Continue after the first Linear (whose output is `x`)."""
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers[1:], start=1):
            x = act(x)
            if self.dropout > 0.0 and training:
                x = ad.dropout(x, self.dropout, stream.child(f"drop{i - 1}"), training)
            x = layer(x)
        return x

    def parameters(self, prefix):
        params = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.parameters(f"{prefix}.layer{i}"))
        return params


def save_checkpoint(params: dict, path, meta=None) -> None:
    """Write parameters (manifest order = sorted names) plus metadata."""
    names = sorted(params)
    manifest = {
        "format": "checkpoint/1",
        "dtype": "<f8",
        "params": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
        "meta": meta or {},
    }
    header = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ({name: ndarray}, meta)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC:
        raise CheckpointMismatch("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 4)
    manifest = json.loads(data[8:8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    arrays = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        block = np.frombuffer(data, dtype=manifest["dtype"], count=count, offset=offset)
        arrays[entry["name"]] = block.reshape(shape).astype(np.float64)
        offset += block.nbytes
    return arrays, manifest.get("meta", {})


def restore_parameters(params: dict, arrays: dict) -> None:
    """Copy checkpoint arrays into live parameter tensors, strictly."""
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointMismatch(f"parameter mismatch: missing={missing[:3]} extra={extra[:3]}")
    for name, tensor in params.items():
        if arrays[name].shape != tensor.data.shape:
            raise CheckpointMismatch(
                f"{name}: checkpoint shape {arrays[name].shape} != model shape {tensor.data.shape}"
            )
        tensor.data = arrays[name].copy()
