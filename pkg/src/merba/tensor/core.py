"""Dense tensors, the differentiation record, and primitive dispatch.

Every forward computation goes through :func:`apply_primitive`.  When a
:class:`DiffRecord` is active on the current thread and at least one input
requires a gradient, the application is appended to the record so that
:func:`backward` can replay it in reverse.

A tensor may also be *meta*: it carries a shape and dtype but no payload.
Inside :func:`meta_mode` primitives only evaluate their shape rule, which is
how the full-size network is traced without allocating 100M parameters.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

_local = threading.local()
_DEFAULT_DTYPE = [np.float32]


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE[0] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = old


def _stack(name):
    st = getattr(_local, name, None)
    if st is None:
        st = []
        setattr(_local, name, st)
    return st


def is_meta_mode():
    return bool(_stack("meta"))


@contextlib.contextmanager
def meta_mode():
    st = _stack("meta")
    st.append(True)
    try:
        yield
    finally:
        st.pop()


def current_record():
    st = _stack("records")
    return st[-1] if st else None


@contextlib.contextmanager
def no_record():
    st = _stack("records")
    st.append(None)
    try:
        yield
    finally:
        st.pop()


class Tensor:
    """N-dimensional float array with an optional place in a :class:`DiffRecord`.

    Tensors are treated as immutable once built.  Identity hashing is kept on
    purpose so tensors can key gradient maps.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self._shape = arr.shape
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def meta(cls, shape, dtype=None, requires_grad=False, name=None):
        t = cls.__new__(cls)
        shape = tuple(int(n) for n in shape)
        if any(n < 1 for n in shape):
            raise ShapeError(f"all extents must be >= 1, got {shape}")
        t.data = None
        t._shape = shape
        t._dtype = np.dtype(dtype or get_default_dtype())
        t.requires_grad = requires_grad
        t.name = name
        return t

    @property
    def is_meta(self):
        return self.data is None

    @property
    def shape(self):
        return self._shape

    @property
    def ndim(self):
        return len(self._shape)

    @property
    def size(self):
        return int(np.prod(self._shape, dtype=np.int64))

    @property
    def dtype(self):
        return self._dtype if self.data is None else self.data.dtype

    def numpy(self):
        if self.data is None:
            raise ValueError("meta tensor has no data")
        return self.data

    def item(self):
        return float(self.numpy().reshape(-1)[0]) if self.size == 1 else float("nan")

    def __repr__(self):
        kind = "meta" if self.is_meta else "data"
        return f"Tensor({kind}, shape={self.shape}, dtype={np.dtype(self.dtype).name})"

    # arithmetic sugar; everything routes through apply_primitive
    def __add__(self, other):
        return apply_primitive("add", (self, _wrap(other, self)))

    def __radd__(self, other):
        return apply_primitive("add", (_wrap(other, self), self))

    def __sub__(self, other):
        return apply_primitive("sub", (self, _wrap(other, self)))

    def __rsub__(self, other):
        return apply_primitive("sub", (_wrap(other, self), self))

    def __mul__(self, other):
        return apply_primitive("mul", (self, _wrap(other, self)))

    def __rmul__(self, other):
        return apply_primitive("mul", (_wrap(other, self), self))

    def __truediv__(self, other):
        return apply_primitive("div", (self, _wrap(other, self)))

    def __neg__(self):
        return apply_primitive("neg", (self,))

    def __matmul__(self, other):
        return apply_primitive("matmul", (self, other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return apply_primitive("reshape", (self,), shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return apply_primitive("transpose", (self,), axes=tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", (self,), axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", (self,), axis=axis, keepdims=keepdims)


def _wrap(value, like):
    if isinstance(value, Tensor):
        return value
    if like.is_meta:
        return Tensor.meta(np.shape(value), like.dtype)
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


@dataclass
class Node:
    kind: str
    out: Tensor
    inputs: tuple
    ctx: object
    attrs: dict


@dataclass
class DiffRecord:
    """Ordered log of primitive applications.

    Nodes are appended in evaluation order, so parents always precede their
    children.  Use as a context manager to make the record active.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _stack("records").append(self)
        return self

    def __exit__(self, *exc):
        _stack("records").pop()
        return False

    def backward(self, seed):
        return backward(self, seed)


class Primitive:
    """Forward rule, backward rule and shape rule for one kind of op.

    ``attrs`` maps every accepted attribute to its default; ``REQUIRED`` marks
    attributes that must be supplied.
    """

    name = ""
    attrs: dict = {}
    n_inputs = None  # None means variadic

    def shape(self, shapes, **attrs):
        raise NotImplementedError

    def forward(self, xs, **attrs):
        raise NotImplementedError

    def backward(self, ctx, g, **attrs):
        raise NotImplementedError


REQUIRED = object()
PRIMITIVES: dict[str, Primitive] = {}


def register(cls):
    PRIMITIVES[cls.name] = cls()
    return cls


def _resolve_attrs(prim, attrs):
    unknown = set(attrs) - set(prim.attrs)
    if unknown:
        raise ValueError(f"{prim.name}: unknown attribute(s) {sorted(unknown)}")
    full = dict(prim.attrs)
    full.update(attrs)
    missing = [k for k, v in full.items() if v is REQUIRED]
    if missing:
        raise ValueError(f"{prim.name}: missing attribute(s) {missing}")
    return full


def output_shape(kind, shapes, **attrs):
    """Shape-only evaluation of a primitive."""
    prim = PRIMITIVES[kind]
    return tuple(prim.shape([tuple(s) for s in shapes], **_resolve_attrs(prim, attrs)))


def apply_primitive(kind, inputs, **attrs):
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    inputs = tuple(inputs)
    if prim.n_inputs is not None and len(inputs) != prim.n_inputs:
        raise ValueError(f"{kind}: expected {prim.n_inputs} inputs, got {len(inputs)}")
    attrs = _resolve_attrs(prim, attrs)
    out_shape = prim.shape([t.shape for t in inputs], **attrs)

    if any(t.is_meta for t in inputs) or is_meta_mode():
        return Tensor.meta(out_shape, inputs[0].dtype)

    data, ctx = prim.forward([t.data for t in inputs], **attrs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out._shape = data.shape
    out.name = None
    out.requires_grad = False
    assert data.shape == tuple(out_shape), (kind, data.shape, out_shape)

    rec = current_record()
    if rec is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec.nodes.append(Node(kind, out, inputs, ctx, attrs))
    return out


class Gradients(dict):
    """Map from tensor to gradient array (identity keyed)."""

    def of(self, t):
        g = self.get(t)
        return np.zeros(t.shape, dtype=t.dtype) if g is None else g


def backward(record, seed):
    """Reverse-mode sweep over ``record`` starting from scalar ``seed``."""
    if seed.size != 1:
        raise ShapeError(f"backward seed must be scalar, got shape {seed.shape}")
    grads = Gradients()
    grads[seed] = np.ones(seed.shape, dtype=seed.dtype)
    for node in reversed(record.nodes):
        g = grads.get(node.out)
        if g is None:
            continue
        in_grads = PRIMITIVES[node.kind].backward(node.ctx, g, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(
                    f"{node.kind}: backward produced {gi.shape} for input of shape {t.shape}")
            prev = grads.get(t)
            grads[t] = gi if prev is None else prev + gi
    return grads
