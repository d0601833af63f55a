"""Dense float64 tensors with reverse-mode automatic differentiation.

Every trainable computation in the package runs through the ops defined
here. Forward passes build a backward graph of closures; ``backward`` on a
scalar loss walks the graph in reverse topological order and accumulates
gradients into every reachable tensor.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParameterSet",
    "ShapeError",
    "GradientError",
    "CheckpointError",
    "no_grad",
    "parameter",
    "constant",
    "forward_op",
    "make_op",
    "backward",
    "sgd_step",
    "xavier_uniform",
    "matmul",
    "add",
    "mul",
    "concat",
    "tanh",
    "sigmoid",
    "softmax",
    "reshape",
    "slice_",
    "reduce_sum",
    "frobenius_sq",
    "conv2d",
    "deconv2d",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"PGRC"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class GradientError(RuntimeError):
    """Raised on invalid backward or optimizer usage."""


class CheckpointError(RuntimeError):
    """Raised on malformed checkpoint files."""


_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording; forward values only."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _Node:
    """Backward-graph record: input tensors plus a gradient closure.

    ``fn(g)`` receives the output gradient and returns one gradient array
    (or None) per input, in order.
    """

    __slots__ = ("inputs", "fn")

    def __init__(self, inputs: tuple["Tensor", ...], fn: Callable):
        self.inputs = inputs
        self.fn = fn


class Tensor:
    """A dense float64 array, optionally linked into the backward graph."""

    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, node: _Node | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node = node
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; constants are lifted automatically.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, mul(_lift(other), Tensor(-1.0)))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, Tensor(-1.0)))

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, node=_Node(inputs, fn))
    return Tensor(data)


def make_op(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    """Record a custom op: ``fn(grad_out)`` returns one gradient per input.

    Used for fused kernels whose backward pass is hand-derived; gradients
    must cover the inputs in order (None to skip one).
    """
    return _make(data, inputs, fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def fn(g, ad=a.data, bd=b.data):
        return g @ bd.T, ad.T @ g

    return _make(out, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def fn(g, sa=a.shape, sb=b.shape):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(out, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def fn(g, ad=a.data, bd=b.data, sa=a.shape, sb=b.shape):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make(out, (a, b), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} do not align on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g, splits=splits, axis=axis):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), fn)


def tanh(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)

    def fn(g, out=out):
        return ((1.0 - out * out) * g,)

    return _make(out, (x,), fn)


def sigmoid(x: Tensor) -> Tensor:
    x = _lift(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def fn(g, out=out):
        return (out * (1.0 - out) * g,)

    return _make(out, (x,), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g, out=out, axis=axis):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (x,), fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = _lift(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def fn(g, orig=x.shape):
        return (g.reshape(orig),)

    return _make(out, (x,), fn)


def slice_(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices only), differentiable."""
    x = _lift(x)
    try:
        out = x.data[key]
    except IndexError:
        raise ShapeError(f"slice: index {key!r} invalid for shape {x.shape}") from None

    def fn(g, key=key, shape=x.shape):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), fn)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g, axis=axis, keepdims=keepdims, shape=x.shape):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), fn)


def frobenius_sq(x: Tensor) -> Tensor:
    """Sum of squared entries, as a scalar."""
    x = _lift(x)
    out = np.float64((x.data * x.data).sum())

    def fn(g, xd=x.data):
        return (2.0 * xd * g,)

    return _make(out, (x,), fn)


def _conv_geometry(size: int, k: int, s: int, p: int, name: str, dim: str) -> int:
    span = size + 2 * p - k
    if k <= 0 or s <= 0 or p < 0:
        raise ShapeError(f"{name}: invalid kernel/stride/padding on {dim} ({k}, {s}, {p})")
    if span < 0 or span % s != 0:
        raise ShapeError(
            f"{name}: {dim} size {size} with kernel {k}, stride {s}, padding {p} does not tile exactly"
        )
    return span // s + 1


def _promote_nhwc(x: Tensor, name: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name}: expected (h, w, c) or (batch, h, w, c) input, got {x.shape}")


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """2-D convolution on (rows, cols, channels) grids, valid geometry only.

    ``kernel`` has shape (kh, kw, c_in, c_out). A leading batch axis on the
    input is optional. Geometry must tile exactly; off-by-one configurations
    are rejected rather than silently truncated.
    """
    x, squeeze = _promote_nhwc(_lift(x), "conv2d")
    kernel = _lift(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D (kh, kw, c_in, c_out), got {kernel.shape}")
    B, h, w, ci = x.shape
    kh, kw, kci, co = kernel.shape
    if kci != ci:
        raise ShapeError(f"conv2d: input channels {ci} != kernel channels {kci}")
    sh, sw = stride
    ph, pw = padding
    oh = _conv_geometry(h, kh, sh, ph, "conv2d", "row")
    ow = _conv_geometry(w, kw, sw, pw, "conv2d", "col")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    out = np.zeros((B, oh, ow, co))
    kd = kernel.data
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, u : u + sh * (oh - 1) + 1 : sh, v : v + sw * (ow - 1) + 1 : sw, :]
            out += (patch.reshape(-1, ci) @ kd[u, v]).reshape(B, oh, ow, co)
    if bias is not None:
        out += bias.data

    def fn(g, xp=xp, kd=kd, dims=(B, h, w, ci, kh, kw, co, sh, sw, ph, pw, oh, ow), has_bias=bias is not None):
        B, h, w, ci, kh, kw, co, sh, sw, ph, pw, oh, ow = dims
        gflat = g.reshape(-1, co)
        gx = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for u in range(kh):
            for v in range(kw):
                rows = slice(u, u + sh * (oh - 1) + 1, sh)
                cols = slice(v, v + sw * (ow - 1) + 1, sw)
                patch = xp[:, rows, cols, :].reshape(-1, ci)
                gk[u, v] = patch.T @ gflat
                gx[:, rows, cols, :] += (gflat @ kd[u, v].T).reshape(B, oh, ow, ci)
        if ph or pw:
            gx = gx[:, ph : ph + h, pw : pw + w, :]
        grads = [gx, gk]
        if has_bias:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    result = _make(out, inputs, fn)
    return reshape(result, result.shape[1:]) if squeeze else result


def deconv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """Transposed 2-D convolution; spatial inverse of ``conv2d`` geometry.

    ``kernel`` has shape (kh, kw, c_in, c_out) mapping input channels to
    output channels. Output rows = (h - 1) * stride + kh - 2 * padding.
    """
    x, squeeze = _promote_nhwc(_lift(x), "deconv2d")
    kernel = _lift(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"deconv2d: kernel must be 4-D (kh, kw, c_in, c_out), got {kernel.shape}")
    B, h, w, ci = x.shape
    kh, kw, kci, co = kernel.shape
    if kci != ci:
        raise ShapeError(f"deconv2d: input channels {ci} != kernel channels {kci}")
    sh, sw = stride
    ph, pw = padding
    fh = (h - 1) * sh + kh
    fw = (w - 1) * sw + kw
    oh, ow = fh - 2 * ph, fw - 2 * pw
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"deconv2d: padding ({ph}, {pw}) consumes the whole {fh}x{fw} output")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"deconv2d: bias shape {bias.shape} != ({co},)")

    xflat = x.data.reshape(-1, ci)
    kd = kernel.data
    full = np.zeros((B, fh, fw, co))
    for u in range(kh):
        for v in range(kw):
            rows = slice(u, u + sh * (h - 1) + 1, sh)
            cols = slice(v, v + sw * (w - 1) + 1, sw)
            full[:, rows, cols, :] += (xflat @ kd[u, v]).reshape(B, h, w, co)
    out = full[:, ph : ph + oh, pw : pw + ow, :] if (ph or pw) else full
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data

    def fn(g, xflat=xflat, kd=kd, dims=(B, h, w, ci, kh, kw, co, sh, sw, ph, pw, fh, fw), has_bias=bias is not None):
        B, h, w, ci, kh, kw, co, sh, sw, ph, pw, fh, fw = dims
        gfull = np.zeros((B, fh, fw, co))
        gfull[:, ph : fh - ph, pw : fw - pw, :] = g
        gx = np.zeros((B * h * w, ci))
        gk = np.zeros_like(kd)
        for u in range(kh):
            for v in range(kw):
                rows = slice(u, u + sh * (h - 1) + 1, sh)
                cols = slice(v, v + sw * (w - 1) + 1, sw)
                gslice = gfull[:, rows, cols, :].reshape(-1, co)
                gx += gslice @ kd[u, v].T
                gk[u, v] = xflat.T @ gslice
        grads = [gx.reshape(B, h, w, ci), gk]
        if has_bias:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    result = _make(out, inputs, fn)
    return reshape(result, result.shape[1:]) if squeeze else result


_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "reshape": reshape,
    "slice": slice_,
    "sum": reduce_sum,
    "frobenius_sq": frobenius_sq,
    "conv2d": conv2d,
    "deconv2d": deconv2d,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by kind name; see ``_OP_TABLE`` for supported kinds."""
    try:
        op = _OP_TABLE[kind]
    except KeyError:
        raise ShapeError(f"forward_op: unknown op kind {kind!r}") from None
    return op(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.node is not None or inp.requires_grad:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate d(loss)/d(parameter) into ``grad`` of every reachable leaf.

    Propagation runs through a per-call gradient map, so repeated calls
    accumulate into leaf parameters exactly once per call; intermediate
    tensors carry the gradient of the most recent call for inspection.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = local.get(id(t))
        if g is None:
            continue
        node = t.node
        if node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        t.grad = g
        for inp, gi in zip(node.inputs, node.fn(g)):
            if gi is None or not (inp.requires_grad or inp.node is not None):
                continue
            key = id(inp)
            if key in local:
                local[key] += gi
            else:
                local[key] = np.array(gi, dtype=np.float64, copy=True)


# ---------------------------------------------------------------------------
# Parameters, optimizer, initialization


class ParameterSet:
    """Named, insertion-ordered collection of trainable tensors."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._params: dict[str, Tensor] = {}
        for name, tensor in items:
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require gradients")
        self._params[name] = tensor

    def merged(self, *others: "ParameterSet") -> "ParameterSet":
        out = ParameterSet(self.items())
        for other in others:
            for name, tensor in other.items():
                out.add(name, tensor)
        return out

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def clear_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy_data_from(self, other: "ParameterSet") -> None:
        if self.names() != other.names():
            raise ValueError("parameter sets have different names")
        for name, t in self._params.items():
            src = other[name]
            if src.shape != t.shape:
                raise ValueError(f"parameter {name!r}: shape {t.shape} != {src.shape}")
            t.data[...] = src.data


def sgd_step(params: ParameterSet, lr: float) -> None:
    """In-place v <- v - lr * grad on every parameter, then clear grads."""
    if not lr >= 0.0:
        raise GradientError(f"sgd_step: learning rate must be non-negative, got {lr}")
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise GradientError(f"sgd_step: gradients missing for {missing}")
    for _, t in params.items():
        t.data -= lr * t.grad
        t.grad = None


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int | None = None, fan_out: int | None = None) -> np.ndarray:
    """Xavier/Glorot uniform init; fans default to the trailing two dims."""
    if fan_in is None or fan_out is None:
        if len(shape) == 1:
            fan_in = fan_out = shape[0]
        elif len(shape) == 2:
            fan_in, fan_out = shape
        elif len(shape) == 4:
            kh, kw, ci, co = shape
            fan_in, fan_out = kh * kw * ci, kh * kw * co
        else:
            raise ShapeError(f"xavier_uniform: cannot infer fans for shape {shape}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Checkpoint serialization


def save_checkpoint(path, params: ParameterSet, seed: int) -> None:
    """Write named parameters as little-endian float64 with a versioned header."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Iq", CHECKPOINT_VERSION, seed))
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, int]:
    """Read a checkpoint; returns (name -> array, seed, format version)."""

    def read(fh, n, what):
        buf = fh.read(n)
        if len(buf) != n:
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        return buf

    with open(path, "rb") as fh:
        if read(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, seed = struct.unpack("<Iq", read(fh, 12, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", read(fh, 4, "count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", read(fh, 2, "name length"))
            name = read(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", read(fh, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", read(fh, 4 * ndim, "shape"))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(read(fh, 8 * size, f"data for {name}"), dtype="<f8")
            arrays[name] = data.reshape(shape).astype(np.float64)
        return arrays, seed, version
