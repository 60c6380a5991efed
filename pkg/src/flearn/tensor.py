"""Minimal reverse-mode tensor engine.

Tensors wrap float64 numpy arrays laid out as [C, H, W] feature maps (or
flat vectors / scalars).  Every differentiable op returns a new Tensor that
remembers its parents and a closure that pushes the upstream gradient back
to them.  ``backward`` walks the graph in reverse topological order.

Broadcasting is deliberately not supported: each op checks the exact
shapes the model zoo needs.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not fit together."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Forward-only region: ops inside record no parents."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward=None,
                 op: str = "leaf", requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.iscomplexobj(arr):
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.grad = None
        live = tuple(p for p in parents if p.requires_grad) if _grad_enabled else ()
        self.requires_grad = requires_grad or bool(live)
        self._parents = live if backward is not None else ()
        self._backward = backward if live else None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tsum(self)

    def backward(self):
        backward(self)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g


class Parameter(Tensor):
    """Trainable leaf tensor with a stable identifier."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64))


# --------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each listed after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter.grad."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None


# --------------------------------------------------------------------------
# elementwise and reduction ops


def _check_same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor(a.data * b.data, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor(x.data * c, (x,), lambda g: x._accumulate(g * c), "scale")


def tsum(x: Tensor) -> Tensor:
    return Tensor(np.sum(x.data), (x,),
                  lambda g: x._accumulate(np.full(x.shape, float(g))), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return Tensor(np.sum(x.data) / n, (x,),
                  lambda g: x._accumulate(np.full(x.shape, float(g) / n)), "mean")


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is taken as 0
    mask = x.data > 0
    return Tensor(np.maximum(x.data, 0.0), (x,),
                  lambda g: x._accumulate(np.where(mask, g, 0.0)), "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return Tensor(s, (x,), lambda g: x._accumulate(g * s * (1.0 - s)), "sigmoid")


# --------------------------------------------------------------------------
# channel plumbing


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial shapes {a.shape} vs {b.shape}")
    ca = a.shape[0]

    def bw(g):
        if a.requires_grad:
            a._accumulate(g[:ca])
        if b.requires_grad:
            b._accumulate(g[ca:])

    return Tensor(np.concatenate([a.data, b.data], axis=0), (a, b), bw, "concat")


def split_channels(x: Tensor, first: int) -> tuple[Tensor, Tensor]:
    """Inverse of concat_channels: (x[:first], x[first:])."""
    if not 0 <= first <= x.shape[0]:
        raise ShapeError(f"split_channels: {first} outside [0, {x.shape[0]}]")

    def part(lo, hi):
        def bw(g):
            full = np.zeros_like(x.data)
            full[lo:hi] = g
            x._accumulate(full)
        return Tensor(x.data[lo:hi].copy(), (x,), bw, "split")

    return part(0, first), part(first, x.shape[0])


# --------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + h, j:j + w]
    return cols.reshape(c * kh * kw, h * w)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int) -> np.ndarray:
    c, h, w = shape
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(c, kh, kw, h, w)
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + h, j:j + w] += cols[:, i, j]
    return xp[:, ph:ph + h, pw:pw + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int | None = None) -> Tensor:
    """'Same' cross-correlation of a [Cin,H,W] map with a [Cout,Cin,kh,kw] kernel."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected [C,H,W] input and 4-d weight, got {x.shape}, {weight.shape}")
    cout, cin, kh, kw = weight.shape
    c, h, w = x.shape
    if cin != c:
        raise ShapeError(f"conv2d: weight expects {cin} input channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} must be odd")
    if padding is not None and padding != (kh - 1) // 2:
        raise ShapeError(f"conv2d: only 'same' padding {(kh - 1) // 2} is supported, got {padding}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    pointwise = kh == 1 and kw == 1
    cols = x.data.reshape(c, h * w) if pointwise else _im2col(x.data, kh, kw)
    w2 = weight.data.reshape(cout, -1)
    out = w2 @ cols + bias.data[:, None]

    def bw(g):
        g2 = g.reshape(cout, h * w)
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            dcols = w2.T @ g2
            if pointwise:
                x._accumulate(dcols.reshape(x.shape))
            else:
                x._accumulate(_col2im(dcols, x.shape, kh, kw))

    return Tensor(out.reshape(cout, h, w), (x, weight, bias), bw, "conv2d")


# --------------------------------------------------------------------------
# batch normalisation


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class RunningStats:
    """Per-channel running mean/variance buffers for batch_norm."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
               training: bool = True, eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM) -> Tensor:
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params must have shape ({c},)")
    n = x.data[0].size
    if training:
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        stats.mean = (1 - momentum) * stats.mean + momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        stats.var = (1 - momentum) * stats.var + momentum * unbiased
    else:
        mu, var = stats.mean.copy(), stats.var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None, None]) * inv[:, None, None]
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(1, 2)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gx = g * gamma.data[:, None, None]
            if training:
                gmean = gx.mean(axis=(1, 2), keepdims=True)
                gxhat = (gx * xhat).mean(axis=(1, 2), keepdims=True)
                dx = (gx - gmean - xhat * gxhat) * inv[:, None, None]
            else:
                dx = gx * inv[:, None, None]
            x._accumulate(dx)

    return Tensor(out, (x, gamma, beta), bw, "batch_norm")


# --------------------------------------------------------------------------
# gradient verification


def finite_diff_check(fn: Callable[[], Tensor], point: Tensor, step: float = 1e-5,
                      indices: Iterable[int] | None = None, floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` recomputes the scalar from scratch and must read ``point.data``;
    ``point`` must be a Parameter (or any leaf with requires_grad).
    ``indices`` restricts the check to a subset of flat coordinates.
    The error is |a - n| / max(|a|, |n|, floor); raise ``floor`` when some
    true derivatives are exactly zero (e.g. a bias feeding a batch norm),
    where the ratio would otherwise just measure rounding noise.
    """
    if isinstance(point, Parameter):
        point.zero_grad()
    else:
        point.grad = None
    out = fn()
    backward(out)
    analytic = np.zeros(point.data.size) if point.grad is None else point.grad.ravel().copy()

    flat = point.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn().item()
        flat[i] = orig - step
        fm = fn().item()
        flat[i] = orig
        numeric = (fp - fm) / (2 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# parameter checkpoints
#
# Layout (all little-endian):
#   magic   b"FLCK"         4 bytes
#   version u8 (=1)
#   count   u32             number of entries
#   per entry:
#     name_len u16, name utf-8 bytes
#     ndim u8, dims u32 * ndim
#     values f64 * prod(dims), row-major

CHECKPOINT_MAGIC = b"FLCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, entries: Sequence[tuple[str, np.ndarray]]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 9
    out = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if shape else 1
            vals = np.frombuffer(buf, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out.append((name, vals.reshape(shape).astype(np.float64)))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
