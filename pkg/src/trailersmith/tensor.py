"""
Minimal dense tensors with reverse-mode differentiation.

Payloads are float64 numpy arrays. Every primitive records its parents and a
backward rule mapping the output gradient to one gradient per parent; `backward`
walks the recorded graph in reverse topological order and accumulates into the
`.grad` of leaf tensors that require gradients.
"""

import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from trailersmith.errors import (
    ArgumentError,
    DimensionError,
    FormatError,
    LengthError,
    StorageError,
    ValidationError,
    handle_errors,
)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A float64 array with an optional gradient slot and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf that requires gradients."""
        if self.data.size != 1:
            raise ArgumentError("backward() needs a scalar root", {"shape": self.shape})

        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return slice_(self, key)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    out = Tensor(data)
    if any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError("Operands do not broadcast", {"left": a.shape, "right": b.shape})


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError("Axis out of range", {"axis": axis, "shape": x.shape})
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise ArgumentError("Operation over an empty axis", {"axis": axis, "shape": x.shape})
    return axis


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


# Linear algebra and layout

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, with numpy broadcasting of the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul shape mismatch", {"left": a.shape, "right": b.shape})
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul batch axes do not broadcast", {"left": a.shape, "right": b.shape})

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ArgumentError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat shape mismatch: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, backward)


def slice_(a, key) -> Tensor:
    """Numpy indexing; gradients scatter back (repeated indices accumulate)."""
    a = as_tensor(a)
    try:
        data = a.data[key]
    except IndexError as e:
        raise DimensionError(f"slice out of range: {e}", {"shape": a.shape})

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _result(np.array(data), (a,), backward)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError("transpose axes do not match tensor rank", {"axes": axes, "shape": a.shape})
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape size mismatch", {"from": a.shape, "to": tuple(shape)})
    return _result(data, (a,), lambda g: (g.reshape(a.shape),))


# Reductions

def sum_(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        if a.data.size == 0:
            raise ArgumentError("mean of an empty tensor")
        count = a.data.size
    else:
        axis = _check_axis(a, axis)
        count = a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# Nonlinearities

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    positive = a.data >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-a.data[positive]))
    exp_x = np.exp(a.data[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a, low: float, high: float) -> Tensor:
    """Clamp; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit variance along `axis` (no affine part)."""
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    n = a.shape[axis]
    centered = a.data - a.data.mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=axis, keepdims=True) + eps)
    normalized = centered * inv_std

    def backward(g):
        g_sum = g.sum(axis=axis, keepdims=True)
        gx_sum = (g * normalized).sum(axis=axis, keepdims=True)
        return (inv_std / n * (n * g - g_sum - normalized * gx_sum),)

    return _result(normalized, (a,), backward)


def dropout(a, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given (inference)."""
    if not 0.0 <= rate < 1.0:
        raise ArgumentError("Dropout rate must be in [0, 1)", {"rate": rate})
    a = as_tensor(a)
    if rate == 0.0 or rng is None:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(mask))


def sinusoidal_table(length: int, width: int) -> np.ndarray:
    """Fixed sine/cosine positional table of shape (length, width)."""
    if length < 1 or width < 1:
        raise ArgumentError("Positional table needs positive sizes", {"length": length, "width": width})
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, width, 2, dtype=np.float64) / width))
    table = np.zeros((length, width), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: width // 2])
    return table


# Parameters

def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    """U(-sqrt(1/fan_in), +sqrt(1/fan_in))."""
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Named parameter tensors in insertion order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: ArrayLike) -> Tensor:
        if name in self._params:
            raise ValidationError(f"Duplicate parameter name '{name}'")
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in self._params.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Read-only copies of every parameter value."""
        values = OrderedDict()
        for name, tensor in self._params.items():
            copy = tensor.data.copy()
            copy.flags.writeable = False
            values[name] = copy
        return values

    def load(self, values: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(values)
        unknown = set(values) - set(self._params)
        if missing or unknown:
            raise ValidationError("Parameter names do not match",
                                  {"missing": sorted(missing), "unknown": sorted(unknown)})
        for name, tensor in self._params.items():
            if values[name].shape != tensor.shape:
                raise DimensionError(f"Parameter '{name}' has the wrong shape",
                                     {"expected": tensor.shape, "actual": values[name].shape})
            tensor.data = np.array(values[name], dtype=np.float64)


# DVTM checkpoints:
#   magic "DVTM" | u16 version | repeated: u16 len + name | u8 ndim | ndim * u32 | float64 payload

DVTM_MAGIC = b"DVTM"
DVTM_VERSION = 1


def encode_checkpoint(values: Dict[str, np.ndarray]) -> bytes:
    chunks = [DVTM_MAGIC, struct.pack("<H", DVTM_VERSION)]
    for name, value in values.items():
        encoded = name.encode("utf-8")
        value = np.asarray(value, dtype="<f8")
        chunks.append(struct.pack("<HB", len(encoded), value.ndim) + encoded)
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value).tobytes())
    return b"".join(chunks)


def decode_checkpoint(payload: bytes) -> "OrderedDict[str, np.ndarray]":
    if payload[:4] != DVTM_MAGIC or len(payload) < 6:
        raise FormatError("Not a DVTM checkpoint", {"magic": payload[:4]})
    (version,) = struct.unpack_from("<H", payload, 4)
    if version != DVTM_VERSION:
        raise FormatError("Unsupported DVTM version", {"version": version})
    values: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 6
    try:
        while offset < len(payload):
            name_length, ndim = struct.unpack_from("<HB", payload, offset)
            offset += 3
            name = payload[offset:offset + name_length].decode("utf-8")
            offset += name_length
            shape = struct.unpack_from(f"<{ndim}I", payload, offset)
            offset += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            end = offset + 8 * count
            if end > len(payload):
                raise LengthError("Truncated checkpoint record", {"name": name})
            values[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset) \
                .reshape(shape).astype(np.float64)
            offset = end
    except struct.error:
        raise LengthError("Truncated checkpoint header", {"offset": offset})
    return values


@handle_errors(error_type=StorageError)
def save_checkpoint(path: Union[str, Path], store: ParamStore) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(store.snapshot()))


@handle_errors(error_type=StorageError)
def load_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())
