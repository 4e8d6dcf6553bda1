"""Reverse-mode automatic differentiation on dense float64 tensors.

Provides exactly the primitives the region-scoring network needs: matmul,
2-D convolution, relu, elementwise add/multiply, axis reductions, 2x2 max
pooling, softmax / log-sum-exp along an axis, plus small glue ops (gather,
reshape, transpose, clamp, concat). Every differentiable primitive is
verified against the central finite-difference oracle in this module.

Everything is float64: the 1e-4 relative-error gradient checks used
throughout the test suite are not reliable in single precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np


class NumericError(RuntimeError):
    """A computation produced NaN/Inf or failed a numeric verification."""


class ParseError(ValueError):
    """A binary/text artifact could not be parsed; names file and offset."""

    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = str(path)
        self.offset = offset


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient.

    Tensors form an implicit computation graph: each op records its parent
    tensors and a closure that routes the output gradient back to them.
    A tensor participates in backprop only if it (or an ancestor) was
    created with ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), op: str = "leaf"):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def full(shape, value: float, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full(shape, float(value)), requires_grad=requires_grad)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # arithmetic sugar for same-shape operands
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    """Output tensor for an op; constant-folds when no parent needs grads."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, op=op)


def topo_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root``, every node after its inputs."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1-D bias broadcast over rows of a 2-D."""
    bias = a.data.ndim == 2 and b.data.ndim == 1 and b.data.shape[0] == a.data.shape[1]
    if not bias and a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=0) if bias else g)
        out._backward = _bwd
    return out


def add_const(t: Tensor, c: float) -> Tensor:
    out = _node(t.data + float(c), (t,), "add_const")
    if out.requires_grad:
        out._backward = lambda g: t.accumulate_grad(g)
    return out


def scale(t: Tensor, k: float) -> Tensor:
    k = float(k)
    out = _node(t.data * k, (t,), "scale")
    if out.requires_grad:
        out._backward = lambda g: t.accumulate_grad(g * k)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g * b.data)
            if b.requires_grad:
                b.accumulate_grad(g * a.data)
        out._backward = _bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
        out._backward = _bwd
    return out


def relu(t: Tensor) -> Tensor:
    out = _node(np.maximum(t.data, 0.0), (t,), "relu")
    if out.requires_grad:
        # subgradient at exactly 0 is 0
        out._backward = lambda g: t.accumulate_grad(g * (t.data > 0.0))
    return out


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    out = _node(np.log(t.data), (t,), "log")
    if out.requires_grad:
        out._backward = lambda g: t.accumulate_grad(g / t.data)
    return out


def exp(t: Tensor) -> Tensor:
    out = _node(np.exp(t.data), (t,), "exp")
    if out.requires_grad:
        out._backward = lambda g: t.accumulate_grad(g * out.data)
    return out


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through strictly inside the range."""
    out = _node(np.clip(t.data, lo, hi), (t,), "clamp")
    if out.requires_grad:
        mask = (t.data > lo) & (t.data < hi)
        out._backward = lambda g: t.accumulate_grad(g * mask)
    return out


def tsum(t: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over all elements when ``axis`` is None."""
    if axis is None:
        out = _node(t.data.sum(), (t,), "sum")
        if out.requires_grad:
            out._backward = lambda g: t.accumulate_grad(
                np.full(t.data.shape, g.reshape(-1)[0]))
        return out
    if not 0 <= axis < t.data.ndim:
        raise ValueError(f"sum axis {axis} out of range for rank {t.data.ndim}")
    out = _node(t.data.sum(axis=axis), (t,), "sum_axis")
    if out.requires_grad:
        out._backward = lambda g: t.accumulate_grad(np.repeat(
            np.expand_dims(g, axis), t.data.shape[axis], axis=axis))
    return out


def softmax_axis(t: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis``, stabilized by subtracting the slice maximum."""
    if not 0 <= axis < t.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {t.data.ndim}")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _node(p, (t,), "softmax")
    if out.requires_grad:
        def _bwd(g):
            inner = (g * p).sum(axis=axis, keepdims=True)
            t.accumulate_grad(p * (g - inner))
        out._backward = _bwd
    return out


def logsumexp_axis(t: Tensor, axis: int) -> Tensor:
    """log(sum(exp(t))) along ``axis``, max-stabilized; gradient is the softmax."""
    if not 0 <= axis < t.data.ndim:
        raise ValueError(f"logsumexp axis {axis} out of range for rank {t.data.ndim}")
    m = t.data.max(axis=axis, keepdims=True)
    e = np.exp(t.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = _node(np.squeeze(m + np.log(s), axis=axis), (t,), "logsumexp")
    if out.requires_grad:
        sm = e / s
        out._backward = lambda g: t.accumulate_grad(np.expand_dims(g, axis) * sm)
    return out


def transpose2d(t: Tensor) -> Tensor:
    if t.data.ndim != 2:
        raise ValueError(f"transpose2d requires rank 2, got {t.data.ndim}")
    out = _node(np.ascontiguousarray(t.data.T), (t,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: t.accumulate_grad(g.T)
    return out


def reshape(t: Tensor, shape) -> Tensor:
    out = _node(t.data.reshape(shape), (t,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: t.accumulate_grad(g.reshape(t.data.shape))
    return out


def gather(t: Tensor, flat_indices) -> Tensor:
    """Pick elements by flat (row-major) index; scatter-adds on backward."""
    idx = np.asarray(flat_indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather expects a flat 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= t.data.size):
        raise ValueError("gather index out of range")
    out = _node(t.data.reshape(-1)[idx], (t,), "gather")
    if out.requires_grad:
        def _bwd(g):
            acc = np.zeros(t.data.size)
            np.add.at(acc, idx, g)
            t.accumulate_grad(acc.reshape(t.data.shape))
        out._backward = _bwd
    return out


def gather_rows(t: Tensor, rows) -> Tensor:
    """Pick rows of a 2-D tensor (rows may repeat)."""
    if t.data.ndim != 2:
        raise ValueError("gather_rows requires a rank-2 tensor")
    rows = np.asarray(rows, dtype=np.int64)
    d = t.data.shape[1]
    flat = (rows[:, None] * d + np.arange(d)[None, :]).reshape(-1)
    return reshape(gather(t, flat), (rows.size, d))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    if not parts:
        raise ValueError("concat of an empty tensor list")
    out = _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat")
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def _bwd(g):
            for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(start, stop)
                    p.accumulate_grad(g[tuple(sl)])
        out._backward = _bwd
    return out


def maxpool2x2(t: Tensor) -> Tensor:
    """2x2/stride-2 max pool on an (H, W, C) tensor.

    Odd trailing rows/columns are dropped. Within a window, ties send the
    gradient to the first maximal element in row-major (dy, dx) order.
    """
    if t.data.ndim != 3:
        raise ValueError(f"maxpool2x2 requires an (H, W, C) tensor, got rank {t.data.ndim}")
    h, w, c = t.data.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError(f"maxpool2x2 input {h}x{w} smaller than the 2x2 window")
    win = t.data[: h2 * 2, : w2 * 2, :].reshape(h2, 2, w2, 2, c)
    win = win.transpose(0, 2, 4, 1, 3).reshape(h2, w2, c, 4)
    arg = win.argmax(axis=3)
    out = _node(np.take_along_axis(win, arg[..., None], axis=3)[..., 0], (t,), "maxpool")
    if out.requires_grad:
        iy, ix, ic = np.meshgrid(np.arange(h2), np.arange(w2), np.arange(c), indexing="ij")
        src_y = iy * 2 + arg // 2
        src_x = ix * 2 + arg % 2
        flat = (src_y * w + src_x) * c + ic
        def _bwd(g):
            acc = np.zeros(t.data.size)
            np.add.at(acc, flat.reshape(-1), g.reshape(-1))
            t.accumulate_grad(acc.reshape(t.data.shape))
        out._backward = _bwd
    return out


_conv_index_cache: dict[tuple, tuple[np.ndarray, int, int, tuple]] = {}


def _conv_indices(h: int, w: int, cin: int, kh: int, kw: int, stride: int, pad: int):
    key = (h, w, cin, kh, kw, stride, pad)
    hit = _conv_index_cache.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d input {h}x{w} too small for kernel {kh}x{kw} "
                         f"with stride {stride}, pad {pad}")
    oy, ox, ky, kx, kc = np.meshgrid(
        np.arange(ho) * stride, np.arange(wo) * stride,
        np.arange(kh), np.arange(kw), np.arange(cin), indexing="ij")
    flat = ((oy + ky) * wp + (ox + kx)) * cin + kc
    flat = flat.reshape(ho * wo, kh * kw * cin)
    entry = (flat, ho, wo, (hp, wp))
    _conv_index_cache[key] = entry
    return entry


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution of an (H, W, Cin) input with (kh, kw, Cin, Cout) filters.

    Implemented as im2col + matmul; the patch index table is cached per
    input geometry. Bias, when given, is one value per output channel.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError("conv2d expects (H, W, Cin) input and (kh, kw, Cin, Cout) filters")
    h, wid, cin = x.data.shape
    kh, kw, wcin, cout = w.data.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, filters expect {wcin}")
    if b is not None and b.data.shape != (cout,):
        raise ValueError(f"conv2d bias shape {b.data.shape} != ({cout},)")
    flat, ho, wo, (hp, wp) = _conv_indices(h, wid, cin, kh, kw, stride, pad)
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    patches = xp.reshape(-1)[flat]
    wmat = w.data.reshape(kh * kw * cin, cout)
    ymat = patches @ wmat
    if b is not None:
        ymat = ymat + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _node(ymat.reshape(ho, wo, cout), parents, "conv2d")
    if out.requires_grad:
        def _bwd(g):
            gmat = g.reshape(ho * wo, cout)
            if w.requires_grad:
                w.accumulate_grad((patches.T @ gmat).reshape(w.data.shape))
            if b is not None and b.requires_grad:
                b.accumulate_grad(gmat.sum(axis=0))
            if x.requires_grad:
                dxp = np.bincount(flat.reshape(-1), weights=(gmat @ wmat.T).reshape(-1),
                                  minlength=hp * wp * cin).reshape(hp, wp, cin)
                x.accumulate_grad(dxp[pad:pad + h, pad:pad + wid, :] if pad else dxp)
        out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FiniteDifferenceResult:
    """Central-difference gradient plus a per-element reliability flag.

    An element is flagged unreliable when its one-sided slopes disagree,
    which happens when the probe straddles a kink (relu at 0, a pooling
    argmax switch, a clamp boundary).
    """

    grad: np.ndarray
    unreliable: np.ndarray


def finite_difference_gradient(f: Callable[[Tensor], float], t: Tensor,
                               eps: float = 1e-5) -> FiniteDifferenceResult:
    """Central differences of scalar ``f`` w.r.t. every element of ``t``.

    ``f`` is re-evaluated with ``t.data`` perturbed in place; the data is
    restored before returning. ``f`` must be deterministic.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = float(f(t))
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.size)
    unreliable = np.zeros(flat.size, dtype=bool)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(t))
        flat[i] = orig - eps
        lo = float(f(t))
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
        fwd = (hi - base) / eps
        bwd = (base - lo) / eps
        # a kink inside the probe window biases the central estimate by about
        # half the slope gap, so the cutoff has to sit near the tolerance we
        # want to certify (1e-4) rather than comfortably above it
        unreliable[i] = abs(fwd - bwd) > 1e-4 * (1.0 + abs(grad[i]))
    return FiniteDifferenceResult(grad.reshape(t.data.shape), unreliable.reshape(t.data.shape))


# ---------------------------------------------------------------------------
# parameters, graph driver, optimizer


class Parameters:
    """Named, insertion-ordered collection of trainable leaf tensors."""

    def __init__(self):
        self._table: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._table:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, op="param")
        self._table[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._table[name]

    def __contains__(self, name: str) -> bool:
        return name in self._table

    def __len__(self) -> int:
        return len(self._table)

    def names(self) -> list[str]:
        return list(self._table)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._table.items())

    def zero_grad(self) -> None:
        for t in self._table.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._table.items()}

    @staticmethod
    def from_state(state: dict[str, np.ndarray]) -> "Parameters":
        params = Parameters()
        for name, arr in state.items():
            params.add(name, arr)
        return params


class Graph:
    """One forward/backward pass over a fixed parameter set.

    The node structure is recorded on the tensors themselves as ops run;
    ``backward`` topologically orders it, backpropagates, and zero-fills
    the gradient of any parameter the loss never touched.
    """

    def __init__(self, parameters: Parameters):
        self.parameters = parameters
        self.nodes: list[Tensor] = []

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self.nodes = topo_order(loss) if loss.requires_grad else []
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward(node.grad)
        for _, p in self.parameters.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


class SgdMomentum:
    """SGD with classic momentum and coupled L2 weight decay.

    Per step: ``v <- momentum*v + grad + weight_decay*w`` then
    ``w <- w - lr*v``. Velocity persists across steps and can be saved
    and restored for exact training resumption.
    """

    def __init__(self, params: Parameters, momentum: float = 0.9, weight_decay: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: float) -> None:
        # lr == 0 is a legitimate null update (velocity still accumulates)
        if lr < 0.0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {name!r} shape {p.data.shape}")
            v = self.velocity[name]
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= lr * v

    def velocity_state(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.velocity.items()}

    def load_velocity(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if name not in self.velocity:
                raise ValueError(f"velocity for unknown parameter {name!r}")
            if arr.shape != self.velocity[name].shape:
                raise ValueError(f"velocity shape mismatch for {name!r}")
            self.velocity[name] = arr.copy()


# ---------------------------------------------------------------------------
# named-tensor checkpoint format
#
#   magic "WSDD" | u32 version | u32 tensor count
#   per tensor: u32 name length | name utf-8 | u32 rank | u64 dims... | f64 data
# all integers and floats little-endian, data row-major.

CHECKPOINT_MAGIC = b"WSDD"
CHECKPOINT_VERSION = 1


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, arr in named.items():
        # np.ascontiguousarray would promote rank-0 arrays to rank 1
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(blob):
            raise ParseError(path, offset, f"truncated while reading {what}")

    need(0, 4, "magic")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ParseError(path, 0, f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    need(4, 8, "header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(path, 4, f"unsupported format version {version}")
    pos = 12
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(pos, 4, "name length")
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(pos, nlen, "name")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        need(pos, 4, "rank")
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(pos, 8 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}Q", blob, pos) if rank else ()
        pos += 8 * rank
        numel = int(np.prod(dims)) if rank else 1
        need(pos, 8 * numel, f"data of {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=numel, offset=pos).reshape(dims)
        pos += 8 * numel
        if name in named:
            raise ParseError(path, pos, f"duplicate tensor name {name!r}")
        named[name] = np.array(arr, dtype=np.float64)
    if pos != len(blob):
        raise ParseError(path, pos, f"{len(blob) - pos} trailing bytes after last tensor")
    return named
