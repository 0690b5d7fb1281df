"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Small by design: enough ops for MLP heads, diagonal-Gaussian algebra and
discrete-regression losses. No general broadcasting (bias-add only), no views,
no graph compilation. Values are always float64 ndarrays; scalars are 0-d.
"""

from __future__ import annotations

import struct
import threading
import zlib
from contextlib import contextmanager

import numpy as np

Tensor = np.ndarray  # row-major float64 array; shape/data invariants come free

# per-thread recording flag: a reanalyze worker running inside no_grad must
# not stop a trainer thread from building graphs
_STATE = threading.local()

_FORMAT_VERSION = 1
_MAGIC = b"BMPCPSET"


class ShapeError(ValueError):
    pass


class GradError(RuntimeError):
    pass


def as_tensor(x) -> Tensor:
    """Coerce to a C-contiguous float64 array (0-d stays 0-d)."""
    arr = np.asarray(x, dtype=np.float64)
    # np.ascontiguousarray would promote 0-d to 1-d; 0-d is always contiguous
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def grad_enabled() -> bool:
    return getattr(_STATE, "grad", True)


@contextmanager
def no_grad():
    """Disable graph recording on this thread; ops return leaf nodes."""
    prev = grad_enabled()
    _STATE.grad = False
    try:
        yield
    finally:
        _STATE.grad = prev


class Node:
    """A value in the computation graph.

    ``grad`` is populated by :func:`backward`. Parameter nodes keep their grad
    buffer across backward calls (accumulation semantics); intermediate grads
    are freed once propagated.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp", "is_param", "name")

    def __init__(self, value, parents=(), vjp=None, is_param=False, name=None):
        self.value = as_tensor(value)
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self.is_param = is_param
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def detach(self) -> "Node":
        return Node(self.value)

    def __repr__(self):
        tag = f" param={self.name!r}" if self.is_param else ""
        return f"Node(shape={self.value.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def const(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _node(value, parents, vjp) -> Node:
    if not grad_enabled():
        return Node(value)
    return Node(value, parents=parents, vjp=vjp)


def _check_same_shape(op, a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# forward ops


def add(a, b) -> Node:
    """Elementwise add; also supports [B,D]+[D] bias-add and python scalars."""
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        if isinstance(a, (int, float)):
            a, b = b, a
        s = float(b)
        return _node(a.value + s, (a,), lambda g: (g,))
    a, b = const(a), const(b)
    if a.value.shape == b.value.shape:
        return _node(a.value + b.value, (a, b), lambda g: (g, g))
    if a.value.ndim == 2 and b.value.ndim == 1 and a.value.shape[1] == b.value.shape[0]:
        return _node(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")


def sub(a, b) -> Node:
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    a, b = const(a), const(b)
    _check_same_shape("sub", a, b)
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def neg(a) -> Node:
    a = const(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Node:
    """Elementwise product; one operand may be a python scalar."""
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        if isinstance(a, (int, float)):
            a, b = b, a
        s = float(b)
        return _node(a.value * s, (a,), lambda g: (g * s,))
    a, b = const(a), const(b)
    _check_same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def tanh(a) -> Node:
    a = const(a)
    t = np.tanh(a.value)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a) -> Node:
    a = const(a)
    with np.errstate(over="ignore"):  # exp overflow saturates correctly to 0
        s = 1.0 / (1.0 + np.exp(-a.value))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Node:
    """x * sigmoid(x), the smooth default activation for all MLPs here."""
    a = const(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.value))
    y = a.value * s
    return _node(y, (a,), lambda g: (g * (s + y * (1.0 - s)),))


def softplus(a) -> Node:
    a = const(a)
    y = np.logaddexp(0.0, a.value)
    s = 1.0 / (1.0 + np.exp(-a.value))
    return _node(y, (a,), lambda g: (g * s,))


def exp(a) -> Node:
    a = const(a)
    y = np.exp(a.value)
    return _node(y, (a,), lambda g: (g * y,))


def log(a) -> Node:
    a = const(a)
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,))


def square(a) -> Node:
    a = const(a)
    av = a.value
    return _node(av * av, (a,), lambda g: (g * (2.0 * av),))


def sum_(a, axis=None) -> Node:
    a = const(a)
    if axis is None:
        return _node(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.value.shape),))
    y = a.value.sum(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape),)

    return _node(y, (a,), vjp)


def mean_(a, axis=None) -> Node:
    a = const(a)
    if axis is None:
        n = a.value.size
        return _node(a.value.mean(), (a,), lambda g: (np.broadcast_to(g / n, a.value.shape),))
    n = a.value.shape[axis]
    y = a.value.mean(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.value.shape),)

    return _node(y, (a,), vjp)


def softmax(a) -> Node:
    """Softmax over the last axis (numerically stabilised)."""
    a = const(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((g - (g * p).sum(axis=-1, keepdims=True)) * p,)

    return _node(p, (a,), vjp)


def cross_entropy(logits, target_probs, row_weights=None) -> Node:
    """Scalar -sum(p * log_softmax(logits)) per row, mean over rows.

    ``target_probs`` rows must sum to 1; usually a detached two-hot encoding.
    ``row_weights`` switches to a weighted sum over rows (used to fold
    temporal weights into one stacked call).
    """
    logits, target_probs = const(logits), const(target_probs)
    _check_same_shape("cross_entropy", logits, target_probs)
    lv, pv = logits.value, target_probs.value
    if lv.ndim == 1:
        lv = lv[None, :]
        pv = pv[None, :]
    if row_weights is None:
        w = np.full(lv.shape[0], 1.0 / lv.shape[0])
    else:
        w = np.asarray(row_weights, dtype=np.float64)
        if w.shape != (lv.shape[0],):
            raise ShapeError(f"cross_entropy: {w.shape} weights for {lv.shape[0]} rows")
    shifted = lv - lv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_sm = shifted - lse
    ce = float(-(w @ (pv * log_sm).sum(axis=-1)))
    sm = np.exp(log_sm)

    def vjp(g):
        # g is 0-d
        gw = g * w[:, None]
        gl = gw * (sm * pv.sum(axis=-1, keepdims=True) - pv)
        gp = gw * (-log_sm)
        orig = logits.value.shape
        return (gl.reshape(orig), gp.reshape(orig))

    return _node(np.float64(ce), (logits, target_probs), vjp)


def concat_rows(nodes) -> Node:
    """Stack 2-D nodes along axis 0 (one head call over many time steps)."""
    nodes = [const(n) for n in nodes]
    width = nodes[0].value.shape[-1]
    for n in nodes:
        if n.value.ndim != 2 or n.value.shape[-1] != width:
            raise ShapeError(f"concat_rows: incompatible shape {n.value.shape}")
    sizes = [n.value.shape[0] for n in nodes]
    offsets = np.cumsum([0] + sizes)
    y = np.concatenate([n.value for n in nodes], axis=0)

    def vjp(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(nodes)))

    return _node(y, tuple(nodes), vjp)


def concat(a, b) -> Node:
    """Concatenate along the last axis."""
    a, b = const(a), const(b)
    if a.value.shape[:-1] != b.value.shape[:-1]:
        raise ShapeError(f"concat: leading dims differ {a.value.shape} vs {b.value.shape}")
    na = a.value.shape[-1]
    y = np.concatenate([a.value, b.value], axis=-1)
    return _node(y, (a, b), lambda g: (g[..., :na], g[..., na:]))


def slice_cols(a, start, stop) -> Node:
    a = const(a)
    y = np.ascontiguousarray(a.value[..., start:stop])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)

    return _node(y, (a,), vjp)


def detach(a) -> Node:
    return const(a).detach()


# ---------------------------------------------------------------------------
# backward


def backward(loss: Node) -> None:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into parameter ``grad`` buffers (call ``zero_grad`` between
    steps if accumulation is not wanted); intermediate grads are freed.
    """
    if loss.value.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.value.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        g = node.grad
        if g is not None and node._vjp is not None:
            for parent, contrib in zip(node._parents, node._vjp(g)):
                if contrib is None:
                    continue
                if parent.is_param:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.value)
                    np.add(parent.grad, contrib, out=parent.grad)
                elif parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib
        if not node.is_param:
            node.grad = None


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterSet:
    """Named learnable arrays plus per-parameter adaptive-moment state.

    Names are unique; iteration order is insertion order, which also fixes the
    serialization layout. Clones share nothing with the source (safe to hand
    to concurrent readers).
    """

    def __init__(self):
        self._params: dict[str, Node] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = Node(value, is_param=True, name=name)
        self._params[name] = node
        self._m[name] = np.zeros_like(node.value)
        self._v[name] = np.zeros_like(node.value)
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self._params.items()}

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self._params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return float(np.sqrt(total))

    def clone(self) -> "ParameterSet":
        """Value snapshot with fresh optimizer state."""
        out = ParameterSet()
        for name, p in self._params.items():
            out.add(name, p.value.copy())
        return out

    def load_values(self, values: dict[str, np.ndarray]):
        for name, arr in values.items():
            p = self._params[name]
            if p.value.shape != arr.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {p.value.shape}")
            p.value[...] = arr

    # -- serialization: versioned length-prefixed binary with crc32 trailer --

    def to_bytes(self) -> bytes:
        chunks = [_MAGIC, struct.pack("<II", _FORMAT_VERSION, len(self._params))]
        for name, p in self._params.items():
            enc = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(enc)))
            chunks.append(enc)
            chunks.append(struct.pack("<B", p.value.ndim))
            chunks.append(struct.pack(f"<{p.value.ndim}q", *p.value.shape))
            payload = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
            chunks.append(struct.pack("<Q", len(payload)))
            chunks.append(payload)
        body = b"".join(chunks)
        return body + struct.pack("<I", zlib.crc32(body))

    @staticmethod
    def from_bytes(data: bytes) -> "ParameterSet":
        if len(data) < len(_MAGIC) + 12:
            raise ValueError("parameter blob truncated")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise ValueError("parameter blob checksum mismatch")
        if body[: len(_MAGIC)] != _MAGIC:
            raise ValueError("bad parameter blob magic")
        off = len(_MAGIC)
        version, count = struct.unpack_from("<II", body, off)
        off += 8
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported parameter blob version {version}")
        out = ParameterSet()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}q", body, off)
            off += 8 * ndim
            (plen,) = struct.unpack_from("<Q", body, off)
            off += 8
            arr = np.frombuffer(body, dtype="<f8", count=plen // 8, offset=off).reshape(shape)
            off += plen
            out.add(name, arr.astype(np.float64))
        return out

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @staticmethod
    def load(path) -> "ParameterSet":
        with open(path, "rb") as f:
            return ParameterSet.from_bytes(f.read())


def optimizer_step(params: ParameterSet, lr: float, clip_norm: float = 20.0,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> float:
    """Adaptive-moment update with global-norm gradient clipping.

    Returns the pre-clip global gradient norm. Grads are left untouched; the
    caller zeroes them. Parameters with no grad are skipped.
    """
    norm = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.isfinite(p.grad).all():
            raise GradError(f"non-finite gradient in parameter {name!r}")
        norm += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(norm))
    scale = 1.0 if norm <= clip_norm else clip_norm / norm

    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad if scale == 1.0 else p.grad * scale
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return norm
