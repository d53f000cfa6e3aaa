"""Binary model checkpoints.

Layout (all integers little-endian):

  8 bytes   magic b"GMCKPT\\x00\\x00"
  u32       format version (currently 1)
  u64 + n   model description JSON (UTF-8)
  u32       parameter count
  per parameter, in sorted-name order:
    u16 + n   name (UTF-8)
    u8        ndim
    u32 * nd  dims
    f64 * k   raw little-endian values

Raw f64 bytes make save/load round trips bit-identical.
"""

import io
import json
import struct

import numpy as np

from .errors import CheckpointError
from .nn import (Conv, Dense, Dropout, Flatten, MaxPool, ModelSpec, ReLU,
                 TrainedModel, init_params)
from .tensor import Tensor

MAGIC = b"GMCKPT\x00\x00"
FORMAT_VERSION = 1

_LAYER_TAGS = {
    Conv: "conv", ReLU: "relu", MaxPool: "maxpool",
    Flatten: "flatten", Dense: "dense", Dropout: "dropout",
}


def _layer_to_dict(layer):
    d = {"kind": _LAYER_TAGS[type(layer)]}
    if isinstance(layer, Conv):
        d.update(in_ch=layer.in_ch, out_ch=layer.out_ch)
    elif isinstance(layer, Dense):
        d.update(in_features=layer.in_features, out_features=layer.out_features)
    elif isinstance(layer, Dropout):
        d.update(p=layer.p)
    return d


def _layer_from_dict(d):
    kind = d.get("kind")
    if kind == "conv":
        return Conv(d["in_ch"], d["out_ch"])
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool()
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        return Dense(d["in_features"], d["out_features"])
    if kind == "dropout":
        return Dropout(d["p"])
    raise CheckpointError(f"unknown layer kind {kind!r}")


def spec_to_dict(spec):
    return {
        "input_shape": list(spec.input_shape),
        "layers": [_layer_to_dict(l) for l in spec.layers],
        "head": spec.head,
        "num_classes": spec.num_classes,
        "train_temperature": spec.train_temperature,
    }


def spec_from_dict(d):
    return ModelSpec(
        input_shape=tuple(d["input_shape"]),
        layers=tuple(_layer_from_dict(l) for l in d["layers"]),
        head=d["head"],
        num_classes=d["num_classes"],
        train_temperature=d["train_temperature"],
    )


def save_checkpoint(model, path):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    desc = {
        "spec": spec_to_dict(model.spec),
        "inference_temperature": model.inference_temperature,
    }
    desc_bytes = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<Q", len(desc_bytes)))
    buf.write(desc_bytes)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name].data
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )
        (desc_len,) = struct.unpack("<Q", _read_exact(fh, 8, "description length"))
        try:
            desc = json.loads(_read_exact(fh, desc_len, "description"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"corrupt description JSON: {e}") from e
        spec = spec_from_dict(desc["spec"])
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dim"))[0] for _ in range(ndim)
            )
            n_items = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * n_items, f"values of {name}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            params[name] = Tensor(arr)
        if fh.read(1):
            raise CheckpointError("trailing bytes after last parameter")

    expected = init_params(spec, np.random.default_rng(0))
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(f"parameter names mismatch: missing={missing} extra={extra}")
    for name, t in expected.items():
        if params[name].shape != t.shape:
            raise CheckpointError(
                f"{name}: shape {params[name].shape} does not match spec {t.shape}"
            )
    return TrainedModel(spec, params,
                        inference_temperature=desc["inference_temperature"])
