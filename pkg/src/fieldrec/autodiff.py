"""Reverse-mode automatic differentiation over numpy float64 arrays.

The engine records a computation graph of `Tensor` nodes and differentiates
scalar roots with respect to any node via `backward` / `grad`. Every backward
rule is itself written in terms of the public primitives, so passing
``create_graph=True`` records the backward pass as a differentiable graph and
higher-order derivatives (gradients of expressions that contain spatial
gradients of a field) come out of the same machinery.

Conventions:
  * all values are float64; inputs are converted on construction,
  * ReLU's derivative at exactly 0 is defined as 0 (subgradient choice),
  * `clamp_min` passes gradient only where the input strictly exceeds the
    bound, which is what the epsilon-guarded vector normalization needs.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractError, UnsupportedOpError

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class _grad_mode:
    def __init__(self, enabled):
        self._enabled = enabled

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = self._enabled

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    """A value in the computation graph.

    `data` is always a float64 ndarray. Nodes created while recording keep
    references to their parents and a vector-Jacobian-product closure; leaves
    have neither.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op", "_higher_order")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, _op="leaf",
                 _higher_order=True):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op
        self._higher_order = _higher_order

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powc(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False):
    """Wrap `data` as a leaf Tensor."""
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors):
    return _GRAD_ENABLED[0] and any(t.requires_grad for t in tensors)


def _unbroadcast(g, shape):
    """Reduce gradient `g` to `shape` (inverse of numpy broadcasting)."""
    if g.data.shape == shape:
        return g
    ndiff = g.data.ndim - len(shape)
    if ndiff:
        g = reduce_sum(g, axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.data.shape[i] != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data + b.data
    if not _tracked(a, b):
        return Tensor(out)

    def vjp(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out, True, (a, b), vjp, "add")


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data - b.data
    if not _tracked(a, b):
        return Tensor(out)

    def vjp(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(neg(g), b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out, True, (a, b), vjp, "sub")


def neg(a):
    a = _lift(a)
    out = -a.data
    if not _tracked(a):
        return Tensor(out)

    def vjp(g):
        return (neg(g),)

    return Tensor(out, True, (a,), vjp, "neg")


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data * b.data
    if not _tracked(a, b):
        return Tensor(out)

    def vjp(g):
        ga = _unbroadcast(mul(g, b), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out, True, (a, b), vjp, "mul")


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    if not _tracked(a, b):
        return Tensor(out)

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.data.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.data.shape)
        return ga, gb

    return Tensor(out, True, (a, b), vjp, "div")


def powc(a, p):
    """Elementwise power with a constant exponent."""
    a = _lift(a)
    p = float(p)
    out = a.data ** p
    if not _tracked(a):
        return Tensor(out)

    def vjp(g):
        return (mul(g, mul(p, powc(a, p - 1.0))),)

    return Tensor(out, True, (a,), vjp, "powc")


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data @ b.data
    if not _tracked(a, b):
        return Tensor(out)

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return Tensor(out, True, (a, b), vjp, "matmul")


def transpose(a):
    a = _lift(a)
    out = a.data.T
    if not _tracked(a):
        return Tensor(out)

    def vjp(g):
        return (transpose(g),)

    return Tensor(out, True, (a,), vjp, "transpose")


def reshape(a, shape):
    a = _lift(a)
    out = a.data.reshape(shape)
    if not _tracked(a):
        return Tensor(out)
    orig = a.data.shape

    def vjp(g):
        return (reshape(g, orig),)

    return Tensor(out, True, (a,), vjp, "reshape")


def reduce_sum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return Tensor(out)
    in_shape = a.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            kshape = list(in_shape)
            for ax in (axis if isinstance(axis, tuple) else (axis,)):
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        return (broadcast_to(g, in_shape),)

    return Tensor(out, True, (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a, shape):
    a = _lift(a)
    out = np.broadcast_to(a.data, shape)
    if not _tracked(a):
        return Tensor(out.copy())

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    return Tensor(out.copy(), True, (a,), vjp, "broadcast")


def exp(a):
    a = _lift(a)
    out_data = np.exp(a.data)
    if not _tracked(a):
        return Tensor(out_data)

    out = Tensor(out_data, True, (a,), None, "exp")
    out._vjp = lambda g: (mul(g, out),)
    return out


def log(a):
    a = _lift(a)
    out = np.log(a.data)
    if not _tracked(a):
        return Tensor(out)

    def vjp(g):
        return (div(g, a),)

    return Tensor(out, True, (a,), vjp, "log")


def sin(a):
    a = _lift(a)
    out = np.sin(a.data)
    if not _tracked(a):
        return Tensor(out)

    def vjp(g):
        return (mul(g, cos(a)),)

    return Tensor(out, True, (a,), vjp, "sin")


def cos(a):
    a = _lift(a)
    out = np.cos(a.data)
    if not _tracked(a):
        return Tensor(out)

    def vjp(g):
        return (neg(mul(g, sin(a))),)

    return Tensor(out, True, (a,), vjp, "cos")


def sqrt(a):
    a = _lift(a)
    out_data = np.sqrt(a.data)
    if not _tracked(a):
        return Tensor(out_data)

    out = Tensor(out_data, True, (a,), None, "sqrt")
    out._vjp = lambda g: (div(mul(g, 0.5), out),)
    return out


def relu(a):
    a = _lift(a)
    out = np.maximum(a.data, 0.0)
    if not _tracked(a):
        return Tensor(out)
    mask = (a.data > 0.0).astype(np.float64)

    def vjp(g):
        return (mul(g, mask),)

    return Tensor(out, True, (a,), vjp, "relu")


def absolute(a):
    a = _lift(a)
    out = np.abs(a.data)
    if not _tracked(a):
        return Tensor(out)
    sign = np.sign(a.data)

    def vjp(g):
        return (mul(g, sign),)

    return Tensor(out, True, (a,), vjp, "abs")


def clamp_min(a, bound):
    """max(a, bound) for a scalar bound; gradient flows only where a > bound."""
    a = _lift(a)
    bound = float(bound)
    out = np.maximum(a.data, bound)
    if not _tracked(a):
        return Tensor(out)
    mask = (a.data > bound).astype(np.float64)

    def vjp(g):
        return (mul(g, mask),)

    return Tensor(out, True, (a,), vjp, "clamp_min")


def concat(parts, axis=1):
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    if not (_GRAD_ENABLED[0] and any(p.requires_grad for p in parts)):
        return Tensor(out)
    sizes = [p.data.shape[axis] for p in parts]

    def vjp(g):
        grads = []
        start = 0
        for p, s in zip(parts, sizes):
            grads.append(narrow(g, axis, start, s) if p.requires_grad else None)
            start += s
        return tuple(grads)

    return Tensor(out, True, tuple(parts), vjp, "concat")


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    a = _lift(a)
    key = [slice(None)] * a.data.ndim
    key[axis] = slice(start, start + length)
    key = tuple(key)
    out = a.data[key]
    if not _tracked(a):
        return Tensor(out.copy())
    full = a.data.shape

    def vjp(g):
        return (_pad_slice(g, axis, start, full),)

    return Tensor(out.copy(), True, (a,), vjp, "narrow")


def _pad_slice(g, axis, start, full_shape):
    """Embed `g` into zeros of `full_shape` at offset `start` along `axis`."""
    g = _lift(g)
    out = np.zeros(full_shape)
    key = [slice(None)] * len(full_shape)
    key[axis] = slice(start, start + g.data.shape[axis])
    key = tuple(key)
    out[key] = g.data
    if not _tracked(g):
        return Tensor(out)
    length = g.data.shape[axis]

    def vjp(gg):
        return (narrow(gg, axis, start, length),)

    return Tensor(out, True, (g,), vjp, "pad_slice")


def gather_rows(a, idx):
    """Select rows of a 2-D tensor by integer index array."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]
    if not _tracked(a):
        return Tensor(out)
    n_rows = a.data.shape[0]

    def vjp(g):
        return (scatter_rows(g, idx, n_rows),)

    return Tensor(out, True, (a,), vjp, "gather_rows")


def scatter_rows(g, idx, n_rows):
    """Adjoint of gather_rows: place rows of `g` at `idx` in a zero tensor."""
    g = _lift(g)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_rows,) + g.data.shape[1:])
    np.add.at(out, idx, g.data)
    if not _tracked(g):
        return Tensor(out)

    def vjp(gg):
        return (gather_rows(gg, idx),)

    return Tensor(out, True, (g,), vjp, "scatter_rows")


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    """Numerically stable softmax; the max shift is treated as a constant."""
    a = _lift(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def rows_sqnorm(a, keepdims=False):
    """Per-row squared Euclidean norm of a 2-D tensor."""
    return reduce_sum(mul(a, a), axis=1, keepdims=keepdims)


def rows_norm(a, keepdims=True):
    """Per-row Euclidean norm; derivative is undefined at exactly zero rows."""
    return sqrt(rows_sqnorm(a, keepdims=keepdims))


def rows_unit(a, eps=1e-12):
    """Rows scaled to unit norm, with the norm clamped below at `eps`."""
    return div(a, clamp_min(rows_norm(a, keepdims=True), eps))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _toposort(root):
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return topo


def backward(root, wrt=None, create_graph=False):
    """Differentiate a scalar `root` with respect to graph nodes.

    Returns a dict {leaf: grad} when `wrt` is None, otherwise a list of
    gradients aligned with `wrt` (zeros for nodes the root does not reach).
    With ``create_graph=True`` the returned gradients are themselves
    differentiable nodes.
    """
    if not isinstance(root, Tensor):
        raise ContractError("backward root must be a Tensor")
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        grads = {}
    else:
        topo = _toposort(root)
        grads = {id(root): Tensor(np.ones_like(root.data))}
        with _grad_mode(create_graph):
            for node in reversed(topo):
                g = grads.get(id(node))
                if g is None or node._vjp is None:
                    continue
                if create_graph and not node._higher_order:
                    raise UnsupportedOpError(
                        f"op '{node._op}' has no second-derivative rule")
                parent_grads = node._vjp(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)

    if wrt is None:
        if not root.requires_grad:
            return {}
        return {node: grads[id(node)]
                for node in topo
                if node._vjp is None and id(node) in grads}
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def grad(output, inputs, create_graph=False):
    """Convenience wrapper: gradients of a scalar output w.r.t. `inputs`."""
    return backward(output, wrt=list(inputs), create_graph=create_graph)


# ---------------------------------------------------------------------------
# parameters and checkpoints
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named parameter arrays with gradient accumulators and an RNG seed.

    Iteration order is insertion order everywhere, which keeps gradient
    accumulation and optimizer updates deterministic.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.iteration = 0
        self._params: dict[str, Tensor] = {}
        self._grads: dict[str, np.ndarray] = {}

    def create(self, name, array):
        if name in self._params:
            raise ContractError(f"duplicate parameter name '{name}'")
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._grads[name] = np.zeros_like(t.data)
        return t

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        return self._params[name]

    def names(self):
        return list(self._params.keys())

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return list(self._params.items())

    def n_parameters(self):
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self):
        for g in self._grads.values():
            g[...] = 0.0

    def accumulate(self, grad_list):
        """Add gradients (aligned with `tensors()`) into the accumulators."""
        for name, g in zip(self._params.keys(), grad_list):
            self._grads[name] += g.data if isinstance(g, Tensor) else g

    def gradient(self, name):
        return self._grads[name]


CHECKPOINT_MAGIC = b"FRCKPT01"


def save_checkpoint(path, store, manifest=None):
    """Write a checkpoint file.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header {seed, iteration, manifest, params:[{name, shape}...]}, then the
    parameter payloads concatenated in header order as row-major
    little-endian float64.
    """
    header = {
        "seed": store.seed,
        "iteration": store.iteration,
        "manifest": manifest or {},
        "params": [{"name": n, "shape": list(t.data.shape)} for n, t in store.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, t in store.items():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint written by `save_checkpoint`; returns (store, manifest)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        store = ParameterStore(seed=header["seed"])
        store.iteration = int(header["iteration"])
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            store.create(entry["name"], arr)
    return store, header.get("manifest", {})
