"""Layer stacks, model builders and the binary model file format.

A :class:`Model` is an ordered list of layers plus a name->Tensor parameter
map.  The ``arch_id`` string fully determines the layer stack, so a model file
only needs the arch_id and the parameter payload to be reconstructed.

Model file layout (all integers little-endian)::

    b"FUNL"                     magic
    u16                         format version (1)
    u16 + utf-8 bytes           arch_id
    u32                         parameter count
    per parameter:
        u16 + utf-8 bytes       name
        u8                      ndim
        u32 * ndim              shape
        f64le * prod(shape)     values, row-major
"""

from __future__ import annotations

import io
import math
import re
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ArchMismatchError, DataFormatError, ShapeError
from .tensor import Tensor, no_grad

MAGIC = b"FUNL"
FORMAT_VERSION = 1


class Layer:
    params: Dict[str, Tensor] = {}

    def out_shape(self, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features, self.out_features = in_features, out_features
        self.params = {
            "weight": Tensor(_uniform(rng, (in_features, out_features), in_features), requires_grad=True),
            "bias": Tensor(_uniform(rng, (out_features,), in_features), requires_grad=True),
        }

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"Linear({self.in_features}->{self.out_features}) got input {in_shape}")
        return (self.out_features,)

    def __call__(self, x):
        return T.matmul(x, self.params["weight"]) + self.params["bias"]


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: Tuple[int, int], padding: Tuple[int, int],
                 rng: np.random.Generator):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.padding = kernel, padding
        fan_in = in_ch * kernel[0] * kernel[1]
        self.params = {
            "weight": Tensor(_uniform(rng, (out_ch, in_ch) + tuple(kernel), fan_in), requires_grad=True),
            "bias": Tensor(_uniform(rng, (out_ch,), fan_in), requires_grad=True),
        }

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"Conv2d({self.in_ch}->{self.out_ch}) got input {in_shape}")
        _, h, w = in_shape
        (kh, kw), (ph, pw) = self.kernel, self.padding
        if kh > h + 2 * ph or kw > w + 2 * pw:
            raise ShapeError(f"Conv2d kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
        return (self.out_ch, h + 2 * ph - kh + 1, w + 2 * pw - kw + 1)

    def __call__(self, x):
        return T.conv2d(x, self.params["weight"], self.params["bias"], stride=1, padding=self.padding)


class ReLU(Layer):
    def out_shape(self, in_shape):
        return in_shape

    def __call__(self, x):
        return T.relu(x)


class MaxPool2d(Layer):
    def __init__(self, kernel: Tuple[int, int]):
        self.kernel = kernel

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"MaxPool2d expects C x H x W, got {in_shape}")
        c, h, w = in_shape
        ho, wo = h // self.kernel[0], w // self.kernel[1]
        if ho < 1 or wo < 1:
            raise ShapeError(f"MaxPool2d{self.kernel} cannot pool input {in_shape}")
        return (c, ho, wo)

    def __call__(self, x):
        return T.max_pool2d(x, self.kernel)


class Flatten(Layer):
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x):
        return T.flatten(x)


class Model:
    """Sequential model with a stable, uniquely named parameter set."""

    def __init__(self, layers: Sequence[Tuple[str, Layer]], input_shape: Tuple[int, ...], arch_id: str):
        self.layers: List[Tuple[str, Layer]] = list(layers)
        self.input_shape = tuple(input_shape)
        self.arch_id = arch_id
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, layer in self.layers:
            for pname, p in layer.params.items():
                key = f"{name}.{pname}"
                if key in self.params:
                    raise ValueError(f"duplicate parameter name {key}")
                self.params[key] = p
        self.output_shape = self.infer_shape(self.input_shape)

    def infer_shape(self, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        shape = tuple(in_shape)
        for _, layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    @property
    def num_classes(self) -> int:
        return self.output_shape[0]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.arch_id} expects inputs of shape (N, *{self.input_shape}), got {x.shape}")
        for _, layer in self.layers:
            x = layer(x)
        return x

    __call__ = forward

    def logits(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Inference without graph recording, chunked over the batch axis."""
        x = np.asarray(x, dtype=np.float64)
        out = []
        with no_grad():
            for s in range(0, len(x), batch_size):
                out.append(self.forward(x[s : s + batch_size]).data)
        if not out:
            return np.zeros((0,) + self.output_shape)
        return np.concatenate(out)

    def predict_proba(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        z = self.logits(x, batch_size)
        if len(z) == 0:
            return z
        return T._softmax_np(z)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        if len(y) == 0:
            return float("nan")
        return float(np.mean(self.predict(x) == np.asarray(y)))

    # -- parameter plumbing ------------------------------------------------

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ArchMismatchError(
                f"parameter names differ: missing {sorted(set(self.params) - set(state))}, "
                f"unexpected {sorted(set(state) - set(self.params))}"
            )
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ArchMismatchError(f"parameter {k}: shape {v.shape} != {p.shape}")
            p.data = v.copy()
            p.grad = None

    def copy(self) -> "Model":
        clone = build_from_arch_id(self.arch_id, seed=0)
        clone.load_state_dict(self.state_dict())
        return clone

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __repr__(self):
        return f"Model({self.arch_id}, params={self.num_parameters()})"


@dataclass
class ModelDelta:
    """Per-parameter differences between two models with the same arch."""

    values: "OrderedDict[str, np.ndarray]"

    @classmethod
    def between(cls, new: Model, old: Model) -> "ModelDelta":
        if new.arch_id != old.arch_id:
            raise ArchMismatchError(f"{new.arch_id} vs {old.arch_id}")
        return cls(OrderedDict((k, new.params[k].data - old.params[k].data) for k in new.params))

    def apply_to(self, model: Model) -> Model:
        if set(self.values) != set(model.params):
            raise ArchMismatchError("delta parameter names do not match the model")
        out = model.copy()
        for k, v in self.values.items():
            out.params[k].data = out.params[k].data + v
        return out

    def max_abs(self) -> float:
        return max((float(np.abs(v).max()) for v in self.values.values() if v.size), default=0.0)


# -- builders -----------------------------------------------------------------


def build_har_net(input_channels: int, window_len: int, num_classes: int, seed: int = 0) -> Model:
    """Two 1-d convolutions (as height-1 Conv2d) followed by two dense layers.

    Conv(C->16, k=5) ReLU Pool(2) Conv(16->32, k=5) ReLU Pool(2) Flatten
    FC(->64) ReLU FC(->K).  Convolutions zero-pad the time axis by 2 so the
    length is only reduced by the pools.
    """
    if window_len < 8:
        raise ShapeError(f"window_len must be >= 8 for two pooling stages, got {window_len}")
    if input_channels < 1 or num_classes < 2:
        raise ShapeError("need at least one input channel and two classes")
    rng = np.random.default_rng(seed)
    flat = 32 * ((window_len // 2) // 2)
    layers = [
        ("conv1", Conv2d(input_channels, 16, (1, 5), (0, 2), rng)),
        ("relu1", ReLU()),
        ("pool1", MaxPool2d((1, 2))),
        ("conv2", Conv2d(16, 32, (1, 5), (0, 2), rng)),
        ("relu2", ReLU()),
        ("pool2", MaxPool2d((1, 2))),
        ("flatten", Flatten()),
        ("fc1", Linear(flat, 64, rng)),
        ("relu3", ReLU()),
        ("fc2", Linear(64, num_classes, rng)),
    ]
    arch = f"har_net(c={input_channels},l={window_len},k={num_classes})"
    return Model(layers, (input_channels, 1, window_len), arch)


def build_lenet5(num_classes: int = 10, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    layers = [
        ("conv1", Conv2d(1, 6, (5, 5), (2, 2), rng)),
        ("relu1", ReLU()),
        ("pool1", MaxPool2d((2, 2))),
        ("conv2", Conv2d(6, 16, (5, 5), (0, 0), rng)),
        ("relu2", ReLU()),
        ("pool2", MaxPool2d((2, 2))),
        ("flatten", Flatten()),
        ("fc1", Linear(400, 120, rng)),
        ("relu3", ReLU()),
        ("fc2", Linear(120, 84, rng)),
        ("relu4", ReLU()),
        ("fc3", Linear(84, num_classes, rng)),
    ]
    return Model(layers, (1, 28, 28), f"lenet5(k={num_classes})")


def build_mlp(input_dim: int, hidden: Sequence[int], num_classes: int, seed: int = 0) -> Model:
    if input_dim < 1:
        raise ShapeError(f"input_dim must be >= 1, got {input_dim}")
    rng = np.random.default_rng(seed)
    layers = []
    width = input_dim
    for i, h in enumerate(hidden):
        layers.append((f"fc{i + 1}", Linear(width, int(h), rng)))
        layers.append((f"relu{i + 1}", ReLU()))
        width = int(h)
    layers.append((f"fc{len(hidden) + 1}", Linear(width, num_classes, rng)))
    hid = "-".join(str(int(h)) for h in hidden)
    return Model(layers, (input_dim,), f"mlp(d={input_dim},h={hid},k={num_classes})")


_ARCH_PATTERNS: List[Tuple[re.Pattern, Callable[..., Model]]] = [
    (re.compile(r"har_net\(c=(\d+),l=(\d+),k=(\d+)\)"),
     lambda m, seed: build_har_net(int(m[1]), int(m[2]), int(m[3]), seed=seed)),
    (re.compile(r"lenet5\(k=(\d+)\)"),
     lambda m, seed: build_lenet5(int(m[1]), seed=seed)),
    (re.compile(r"mlp\(d=(\d+),h=([\d-]*),k=(\d+)\)"),
     lambda m, seed: build_mlp(int(m[1]), [int(h) for h in m[2].split("-") if h], int(m[3]), seed=seed)),
]


def build_from_arch_id(arch_id: str, seed: int = 0) -> Model:
    for pattern, builder in _ARCH_PATTERNS:
        m = pattern.fullmatch(arch_id)
        if m:
            return builder(m, seed)
    raise ArchMismatchError(f"unknown arch_id {arch_id!r}")


# -- serialisation --------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def model_to_bytes(m: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(_pack_str(m.arch_id))
    buf.write(struct.pack("<I", len(m.params)))
    for name, p in m.params.items():
        buf.write(_pack_str(name))
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError("model file truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError("model file has an invalid string") from exc


def model_from_bytes(data: bytes, expected_arch: Optional[str] = None) -> Model:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise DataFormatError("not a model file (bad magic)")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported model format version {version}")
    arch_id = r.string()
    if expected_arch is not None and arch_id != expected_arch:
        raise ArchMismatchError(f"model file holds {arch_id!r}, expected {expected_arch!r}")
    (count,) = r.unpack("<I")
    state = OrderedDict()
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise DataFormatError("trailing bytes after model payload")
    model = build_from_arch_id(arch_id, seed=0)
    model.load_state_dict(state)
    return model


def save_model(m: Model, path: Union[str, Path]) -> int:
    """Write ``m`` to ``path``; returns the number of bytes written."""
    data = model_to_bytes(m)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path: Union[str, Path], expected_arch: Optional[str] = None) -> Model:
    return model_from_bytes(Path(path).read_bytes(), expected_arch=expected_arch)


def serialized_size(m: Model) -> int:
    """Byte size of the model file for ``m`` without materialising the payload."""
    size = 4 + 2 + 2 + len(m.arch_id.encode()) + 4
    for name, p in m.params.items():
        size += 2 + len(name.encode()) + 1 + 4 * p.ndim + 8 * p.size
    return size
