"""Minimal reverse-mode autodiff over dense row-major tensors.

Covers exactly the operator set the model needs, plus Adam. Tensors carry
numpy arrays and preserve dtype, so the same graph code runs in float32 for
training and float64 for finite-difference verification. All randomness
(reparameterization noise) enters as explicit inputs; nothing is drawn
inside a graph.

Subgradient tie rules, fixed for determinism: relu'(0) = 0, sqrt'(0) = 0,
max-pool routes gradient to the lowest winning index.
"""

from __future__ import annotations

import json
import struct

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g):
        # Ownership contract: every backward closure hands a given buffer to
        # at most one parent (or disjoint views of it), so storing the
        # reference is safe and copy-free.
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, grad={self.grad is not None})"

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

    def __neg__(self):
        return mul(self, -1.0)


def _wrap(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, op) -> Tensor:
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                  _parents=tuple(parents), op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to an operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")
    out = _node(a.data + b.data, (a, b), "add")

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        if ga is g and gb is g:
            gb = g.copy()  # both sides pass through: second needs its own buffer
        if ga is not None:
            a.accumulate(ga)
        if gb is not None:
            b.accumulate(gb)

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")
    out = _node(a.data - b.data, (a, b), "sub")

    def backward(g):
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            gb = -g if gb is g else np.negative(gb, out=gb)
            b.accumulate(gb)
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")
    out = _node(a.data * b.data, (a, b), "mul")

    def backward(g):
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))
        if a.requires_grad:
            g *= b.data  # reuse the consumed buffer for the remaining side
            a.accumulate(_unbroadcast(g, a.shape))

    out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate((g.T @ a.data).T)  # faster layout than a.T @ g

    out._backward = backward
    return out


def dense(x: Tensor, w: Tensor, b: Tensor, extra: Tensor | None = None,
          relu_out: bool = False, n_points: int | None = None) -> Tensor:
    """Fused affine layer: relu?(x @ w + b [+ extra]), one output buffer.

    Equivalent to composing matmul, add(s) and relu; exists because the
    per-point MLPs dominate the training budget. `extra` is a per-sample
    term of shape (B, 1, H) broadcast over the points of each sample, with
    x laid out as (B * n_points, in_dim).
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: incompatible shapes {x.shape} and {w.shape}")
    y = x.data @ w.data
    y += b.data
    if extra is not None:
        yv = y.reshape(-1, n_points, y.shape[1])
        yv += extra.data
    if relu_out:
        np.maximum(y, 0, out=y)
    parents = (x, w, b) + ((extra,) if extra is not None else ())
    out = _node(y, parents, "dense")

    def backward(g):
        if relu_out:
            g *= y > 0
        if extra is not None and extra.requires_grad:
            extra.accumulate(g.reshape(-1, n_points, g.shape[1]).sum(axis=1, keepdims=True))
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))
        if w.requires_grad:
            w.accumulate((g.T @ x.data).T)
        if x.requires_grad:
            x.accumulate(g @ w.data.T)

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0), (x,), "relu")

    def backward(g):
        if x.requires_grad:
            g *= x.data > 0
            x.accumulate(g)

    out._backward = backward
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = _node(y, (x,), "tanh")

    def backward(g):
        if x.requires_grad:
            g *= 1.0 - y * y
            x.accumulate(g)

    out._backward = backward
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = _node(y, (x,), "exp")

    def backward(g):
        if x.requires_grad:
            g *= y
            x.accumulate(g)

    out._backward = backward
    return out


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise DomainError(f"log of non-positive value (min {x.data.min():.3g})")
    out = _node(np.log(x.data), (x,), "log")

    def backward(g):
        if x.requires_grad:
            g /= x.data
            x.accumulate(g)

    out._backward = backward
    return out


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0).any():
        raise DomainError(f"sqrt of negative value (min {x.data.min():.3g})")
    y = np.sqrt(x.data)
    out = _node(y, (x,), "sqrt")

    def backward(g):
        if x.requires_grad:
            d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
            g *= d
            x.accumulate(g)

    out._backward = backward
    return out


def square(x: Tensor) -> Tensor:
    out = _node(x.data * x.data, (x,), "square")

    def backward(g):
        if x.requires_grad:
            g *= x.data
            g *= 2.0
            x.accumulate(g)

    out._backward = backward
    return out


def mean(x: Tensor, axis=None) -> Tensor:
    out = _node(x.data.mean(axis=axis), (x,), "mean")
    count = x.data.size if axis is None else x.shape[axis]

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate(np.full_like(x.data, 1.0 / count) * g)
        else:
            x.accumulate(np.expand_dims(g, axis) / count * np.ones_like(x.data))

    out._backward = backward
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    shapes = [t.shape for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        trial = list(s)
        if len(trial) != len(base) or any(
                i != axis % len(base) and trial[i] != base[i] for i in range(len(base))):
            raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}")
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    out._backward = backward
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _node(x.data.reshape(shape), (x,), "reshape")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.shape))

    out._backward = backward
    return out


def max_over_points(x: Tensor, axis: int) -> Tensor:
    """Max-reduce one axis; the gradient is routed to the winning positions,
    with ties going to the lowest index. The argmax memo is materialized on
    first backward use, keeping forward-only passes cheap."""
    out = _node(np.max(x.data, axis=axis), (x,), "max_over_points")

    def backward(g):
        if x.requires_grad:
            if x.data.ndim == 3 and axis == 1:
                # argmax over a strided middle axis is slow; transpose to a
                # contiguous reduction first
                idx = np.argmax(np.ascontiguousarray(x.data.transpose(0, 2, 1)),
                                axis=2)
            else:
                idx = np.argmax(x.data, axis=axis)
            buf = np.zeros_like(x.data)
            np.put_along_axis(buf, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis=axis)
            x.accumulate(buf)

    out._backward = backward
    return out


def gaussian_sample(mu: Tensor, logvar: Tensor, noise) -> Tensor:
    """Reparameterized draw mu + exp(logvar / 2) * noise; noise is data, not
    a differentiable input."""
    noise = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=mu.dtype)
    if noise.shape != mu.shape or mu.shape != logvar.shape:
        raise ShapeError(f"gaussian_sample: shapes mu {mu.shape}, "
                         f"logvar {logvar.shape}, noise {noise.shape}")
    sigma = np.exp(0.5 * logvar.data)
    out = _node(mu.data + sigma * noise, (mu, logvar), "gaussian_sample")

    def backward(g):
        if logvar.requires_grad:
            logvar.accumulate(g * 0.5 * sigma * noise)
        if mu.requires_grad:
            mu.accumulate(g)  # pass-through last: logvar already read g

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list:
    """Reverse-traversal order; every reachable node appears exactly once."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor, params=None):
    """Accumulate d(loss)/d(t) into .grad for every reachable leaf tensor
    with requires_grad; parameters in `params` not reachable from the loss
    get an explicit zero gradient.

    Intermediate nodes hold their gradient only until it has been pushed to
    their parents, so repeated backward passes without zeroing add exactly
    one gradient contribution each.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(topo_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # consumed; leaves (no _backward) keep theirs
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam. Parameters with no gradient are treated as
    having zero gradient (their moments still decay)."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: grad shape {g.shape} != param shape {p.data.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / b1c
            v_hat = self.v[i] / b2c
            p.data = p.data - np.asarray(
                self.lr * m_hat / (np.sqrt(v_hat) + self.eps), dtype=p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Checkpoints: u32 header length | JSON header | little-endian f32 payload
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GCKP"


def save_checkpoint(path, named_params: dict, step: int = 0,
                    hyperparameters: dict | None = None):
    names = sorted(named_params)
    header = {
        "names": names,
        "shapes": {n: list(named_params[n].shape) for n in names},
        "step": step,
        "hyperparameters": hyperparameters or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        for n in names:
            f.write(np.ascontiguousarray(named_params[n].data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (named_params, step, hyperparameters); params require grad."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        params = {}
        for n in header["names"]:
            shape = tuple(header["shapes"][n])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"{path}: truncated payload at tensor {n!r}")
            params[n] = Tensor(np.frombuffer(buf, dtype="<f4").reshape(shape).copy(),
                               requires_grad=True)
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return params, header["step"], header["hyperparameters"]
