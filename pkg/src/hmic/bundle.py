"""Model container shared by the classifiers and the filter autoencoder.

On disk a bundle is::

    b"HMIC1\\n"
    uint32 little-endian header length
    UTF-8 JSON header (version, level, input shape, layer specs, class names,
                       train config, blob order with shapes)
    float32 little-endian weight blobs, row-major, in header order
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as nn
from .errors import ArgumentError, DimensionError, FormatError

MAGIC = b"HMIC1\n"
FORMAT_VERSION = 1

PARENT_CLASSES = ["Normal", "EE", "Celiac"]
CHILD_CLASSES = ["I", "IIIa", "IIIb", "IIIc"]
FLAT_CLASSES = ["Normal", "EE", "Celiac/I", "Celiac/IIIa", "Celiac/IIIb", "Celiac/IIIc"]

LEVELS = ("parent", "child", "autoencoder", "flat_baseline", "flat_cnn", "flat_mlp")

# Pool windows taking the input down to the last conv grid: 1000 -> 200 -> 40 -> 5.
DEFAULT_POOLS = {1000: (5, 5, 8), 128: (4, 4, 2)}


@dataclass
class ModelBundle:
    level: str
    layers: list
    weights: dict
    class_names: list
    input_shape: tuple
    train_config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ArgumentError(f"unknown model level {self.level!r}")
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shapes = nn.output_shapes(self.layers, self.input_shape)
        expected = nn.param_shapes(self.layers)
        for name, shape in expected.items():
            if name not in self.weights:
                raise DimensionError(f"missing weights for {name}")
            if tuple(self.weights[name].shape) != shape:
                raise DimensionError(
                    f"{name}: weight shape {self.weights[name].shape} != layer shape {shape}")
        if self.class_names and shapes[-1] != (len(self.class_names),):
            raise DimensionError(
                f"{len(self.class_names)} class names but the head has shape {shapes[-1]}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def shapes(self) -> list:
        return nn.output_shapes(self.layers, self.input_shape)

    def parameter_count(self) -> int:
        return int(sum(w.size for w in self.weights.values()))


def _conv(name, cin, cout, activation="relu"):
    return {"type": "conv", "name": name, "in_channels": cin, "out_channels": cout,
            "kernel": 3, "padding": 1, "stride": 1, "activation": activation}


def _dense(name, fin, fout, activation):
    return {"type": "dense", "name": name, "in_features": fin, "out_features": fout,
            "activation": activation}


def _default_classes(level):
    return {"parent": PARENT_CLASSES, "child": CHILD_CLASSES}.get(level, FLAT_CLASSES)


def trunk_layers(input_size, pools, n_classes, pool_dropout=0.25, dense_dropout=0.5):
    """Three conv/pool blocks (32, 32, 64 filters), dense(128), softmax head."""
    p1, p2, p3 = pools
    grid = input_size // (p1 * p2 * p3)
    if grid * p1 * p2 * p3 != input_size:
        raise DimensionError(f"pool chain {pools} does not divide input size {input_size}")
    return [
        _conv("conv1", 3, 32),
        {"type": "maxpool", "name": "pool1", "window": p1},
        {"type": "dropout", "name": "drop1", "rate": pool_dropout},
        _conv("conv2", 32, 32),
        {"type": "maxpool", "name": "pool2", "window": p2},
        {"type": "dropout", "name": "drop2", "rate": pool_dropout},
        _conv("conv3", 32, 64),
        {"type": "maxpool", "name": "pool3", "window": p3},
        {"type": "dropout", "name": "drop3", "rate": pool_dropout},
        {"type": "flatten", "name": "flatten"},
        _dense("fc1", grid * grid * 64, 128, "relu"),
        {"type": "dropout", "name": "drop4", "rate": dense_dropout},
        _dense("head", 128, n_classes, "softmax"),
    ]


def build_architecture(level, input_size=1000, pools=None, class_names=None, seed=0,
                       pool_dropout=0.25, dense_dropout=0.5) -> ModelBundle:
    """Untrained classifier for ``level``.

    ``parent``, ``child`` and ``flat_baseline`` share the three-block conv trunk
    and differ only in the head (3, 4 and 6 nodes).  ``flat_cnn`` is a single
    conv(32)+pool block with a dense head; ``flat_mlp`` area-downsamples the
    input by the first pool factor and uses dense(512) -> dense(128) -> head.
    """
    if level not in ("parent", "child", "flat_baseline", "flat_cnn", "flat_mlp"):
        raise ArgumentError(f"unknown level {level!r}")
    if pools is None:
        if input_size not in DEFAULT_POOLS:
            raise ArgumentError(f"no default pool chain for input size {input_size}; pass pools")
        pools = DEFAULT_POOLS[input_size]
    pools = tuple(int(p) for p in pools)
    class_names = list(class_names or _default_classes(level))
    n = len(class_names)
    if level in ("parent", "child", "flat_baseline"):
        layers = trunk_layers(input_size, pools, n, pool_dropout, dense_dropout)
    elif level == "flat_cnn":
        win = pools[0] * pools[1]
        grid = input_size // win
        layers = [
            _conv("conv1", 3, 32),
            {"type": "maxpool", "name": "pool1", "window": win},
            {"type": "dropout", "name": "drop1", "rate": pool_dropout},
            {"type": "flatten", "name": "flatten"},
            _dense("head", grid * grid * 32, n, "softmax"),
        ]
    else:
        win = pools[0]
        side = input_size // win
        layers = [
            {"type": "avgpool", "name": "down", "window": win},
            {"type": "flatten", "name": "flatten"},
            _dense("fc1", side * side * 3, 512, "relu"),
            {"type": "dropout", "name": "drop1", "rate": dense_dropout},
            _dense("fc2", 512, 128, "relu"),
            {"type": "dropout", "name": "drop2", "rate": dense_dropout},
            _dense("head", 128, n, "softmax"),
        ]
    weights = nn.init_params(layers, np.random.default_rng(seed))
    config = {"init_seed": int(seed), "pools": list(pools)}
    return ModelBundle(level, layers, weights, class_names, (input_size, input_size, 3), config)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def to_bytes(model: ModelBundle) -> bytes:
    blob_names = list(model.weights)
    header = {
        "version": model.version,
        "level": model.level,
        "input_shape": list(model.input_shape),
        "layers": model.layers,
        "class_names": list(model.class_names),
        "train_config": model.train_config,
        "blobs": [{"name": k, "shape": list(model.weights[k].shape)} for k in blob_names],
    }
    head = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for k in blob_names:
        parts.append(np.ascontiguousarray(model.weights[k], dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> ModelBundle:
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError("bad magic bytes: not an HMIC model file")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise FormatError("truncated file: header length missing")
    (hlen,) = struct.unpack("<I", data[pos:pos + 4])
    pos += 4
    if len(data) < pos + hlen:
        raise FormatError("truncated file: header incomplete")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    pos += hlen
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {header.get('version')!r}")
    weights = {}
    for blob in header["blobs"]:
        shape = tuple(blob["shape"])
        nbytes = 4 * int(np.prod(shape))
        if len(data) < pos + nbytes:
            raise FormatError(f"truncated file: weight blob {blob['name']!r} incomplete")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos)
        weights[blob["name"]] = arr.astype(np.float32).reshape(shape)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the last weight blob")
    try:
        return ModelBundle(header["level"], header["layers"], weights, header["class_names"],
                           tuple(header["input_shape"]), header["train_config"], header["version"])
    except (KeyError, DimensionError, ArgumentError) as exc:
        raise FormatError(f"inconsistent model header: {exc}") from None


def save_model(model: ModelBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model))
    return path


def load_model(path) -> ModelBundle:
    return from_bytes(Path(path).read_bytes())


def model_hash(model: ModelBundle) -> str:
    return hashlib.sha256(to_bytes(model)).hexdigest()
