"""Small reverse-mode autodiff over float64 numpy arrays.

Ops record themselves on the active :class:`Tape` (a context manager) when at
least one input requires a gradient. Outside a tape everything runs as plain
inference, which is what rollout workers use.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"RSRL"
DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kink: np.ndarray | None = None


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops; nodes are appended in execution order,
    which is already a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. each tensor in ``wrt``.

        Tensors not reached by the loss get a zero gradient.
        """
        wrt = list(wrt)
        if loss.size != 1:
            raise ShapeError("gradient (loss must be scalar)", loss.shape)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]

    def kink_signature(self) -> str:
        """Digest of every branch decision taken by non-smooth ops."""
        h = hashlib.sha1()
        for node in self.nodes:
            if node.kink is not None:
                h.update(np.packbits(node.kink.reshape(-1)).tobytes())
        return h.hexdigest()


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward, kink=None) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(Node(out, inputs, backward, kink))
    elif tape is not None and kink is not None:
        # keep branch decisions visible to grad_check even for constant inputs
        tape.record(Node(out, (), lambda g: (), kink))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), kink=mask)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), kink=inside)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("minimum", a.shape, b.shape)
    take_a = a.data <= b.data
    return _result(np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (g * take_a, g * ~take_a), kink=take_a)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) for i in idx)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def pick(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[b] = x[b, idx[b]]`` for a 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError("pick", x.shape, idx.shape)
    rows = np.arange(x.shape[0])

    def backward(g):
        out = np.zeros(x.shape)
        out[rows, idx] = g
        return (out,)

    return _result(x.data[rows, idx], (x,), backward)


# ---------------------------------------------------------------------------
# layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``out[b, o] = sum_i x[b, i] W[i, o] + bias[o]``."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError("dense_forward", x.shape, W.shape)
    if b.shape != (W.shape[1],):
        raise ShapeError("dense_forward bias", W.shape, b.shape)
    out = x.data @ W.data + b.data
    return _result(out, (x, W, b),
                   lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)))


def conv1d_output_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def conv1d_forward(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid-padding cross-correlation. x: [B, Cin, L], kernels: [Cout, Cin, K]."""
    if stride < 1:
        raise ValueError(f"conv1d_forward: stride must be >= 1, got {stride}")
    if x.data.ndim != 3 or kernels.data.ndim != 3 or x.shape[1] != kernels.shape[1]:
        raise ShapeError("conv1d_forward", x.shape, kernels.shape)
    B, C, L = x.shape
    O, _, K = kernels.shape
    if K > L:
        raise ShapeError("conv1d_forward (kernel longer than input)", x.shape, kernels.shape)
    if bias.shape != (O,):
        raise ShapeError("conv1d_forward bias", kernels.shape, bias.shape)
    Lo = conv1d_output_length(L, K, stride)
    # windows: [B, Lo, C, K]
    win = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=2)[:, :, ::stride, :]
    cols = win.transpose(0, 2, 1, 3).reshape(B * Lo, C * K)
    Wm = kernels.data.reshape(O, C * K)
    out = (cols @ Wm.T).reshape(B, Lo, O).transpose(0, 2, 1) + bias.data[None, :, None]

    def backward(g):
        gm = g.transpose(0, 2, 1).reshape(B * Lo, O)
        gW = (gm.T @ cols).reshape(O, C, K)
        gcols = (gm @ Wm).reshape(B, Lo, C, K)
        gx = np.zeros((B, C, L))
        span = stride * (Lo - 1) + 1
        for k in range(K):
            gx[:, :, k:k + span:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        return gx, gW, g.sum(axis=(0, 2))

    return _result(np.ascontiguousarray(out), (x, kernels, bias), backward)


def conv_transpose1d_output_length(length: int, kernel: int, stride: int, output_padding: int = 0) -> int:
    return (length - 1) * stride + kernel + output_padding


def conv_transpose1d_forward(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1,
                             output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv1d_forward`. x: [B, Cin, L], kernels: [Cin, Cout, K].

    ``output_padding`` appends extra positions on the right, which only receive
    the bias.
    """
    if stride < 1:
        raise ValueError(f"conv_transpose1d_forward: stride must be >= 1, got {stride}")
    if not 0 <= output_padding < max(stride, 1) + kernels.shape[2]:
        raise ValueError(f"bad output_padding {output_padding}")
    if x.data.ndim != 3 or kernels.data.ndim != 3 or x.shape[1] != kernels.shape[0]:
        raise ShapeError("conv_transpose1d_forward", x.shape, kernels.shape)
    B, C, L = x.shape
    _, O, K = kernels.shape
    if bias.shape != (O,):
        raise ShapeError("conv_transpose1d_forward bias", kernels.shape, bias.shape)
    Lo = conv_transpose1d_output_length(L, K, stride, output_padding)
    span = stride * (L - 1) + 1
    xm = x.data.transpose(0, 2, 1).reshape(B * L, C)
    Wm = kernels.data.reshape(C, O * K)
    contrib = (xm @ Wm).reshape(B, L, O, K)
    out = np.zeros((B, O, Lo))
    for k in range(K):
        out[:, :, k:k + span:stride] += contrib[:, :, :, k].transpose(0, 2, 1)
    out += bias.data[None, :, None]

    def backward(g):
        # gather the output positions each input position touched: [B, L, O, K]
        gwin = np.empty((B, L, O, K))
        for k in range(K):
            gwin[:, :, :, k] = g[:, :, k:k + span:stride].transpose(0, 2, 1)
        gm = gwin.reshape(B * L, O * K)
        gx = (gm @ Wm.T).reshape(B, L, C).transpose(0, 2, 1)
        gW = (xm.T @ gm).reshape(C, O, K)
        return np.ascontiguousarray(gx), gW, g.sum(axis=(0, 2))

    return _result(out, (x, kernels, bias), backward)


# ---------------------------------------------------------------------------
# parameters and optimizer


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def param_count(params: dict[str, Tensor]) -> int:
    return int(np.sum([p.size for p in params.values()]))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor], **hyper) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()}, **hyper)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if state.lr <= 0:
        raise ValueError("Adam learning rate must be positive")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"adam_step[{k}]", params[k].shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k].data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int = 0
    worst: tuple[str, int] | None = None
    errors: list[float] = field(default_factory=list, repr=False)


def grad_check_report(f: Callable[[], Tensor], params: dict[str, Tensor], epsilon: float = 1e-5,
                      floor: float = 1e-6, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    Coordinates whose perturbation flips a branch of a non-smooth op (relu,
    clip, minimum) are skipped: the finite difference is not a derivative there.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    names = list(params)
    for p in params.values():
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    base_sig = tape.kink_signature()
    analytic = dict(zip(names, tape.gradient(loss, [params[k] for k in names])))

    coords = [(k, i) for k in names for i in range(params[k].size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick_idx = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in sorted(pick_idx)]

    def evaluate() -> tuple[float, str]:
        with Tape() as t:
            val = f().item()
        return val, t.kink_signature()

    report = GradCheckReport(0.0, 0)
    for k, i in coords:
        flat = params[k].data.reshape(-1)
        old = flat[i]
        flat[i] = old + epsilon
        fp, sp = evaluate()
        flat[i] = old - epsilon
        fm, sm = evaluate()
        flat[i] = old
        if sp != base_sig or sm != base_sig:
            report.n_skipped += 1
            continue
        num = (fp - fm) / (2 * epsilon)
        ana = analytic[k].reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        report.errors.append(err)
        report.n_checked += 1
        if err > report.max_rel_error:
            report.max_rel_error = err
            report.worst = (k, i)
    if report.n_skipped:
        logger.debug("grad_check skipped %d kink-crossing coordinates", report.n_skipped)
    return report


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], epsilon: float = 1e-5, **kw) -> float:
    """Max relative error between reverse-mode and central-difference gradients."""
    return grad_check_report(f, params, epsilon, **kw).max_rel_error


# ---------------------------------------------------------------------------
# serialization: "RSRL", u32 rank, u32 dims..., f64 payload (little endian)


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    n = int(np.prod(dims)) if rank else 1
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(DTYPE)


def save_tensors(path: str | Path, arrays: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for a in arrays:
            write_tensor(fh, a)


def load_tensors(path: str | Path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while fh.peek(1) if hasattr(fh, "peek") else False:
            out.append(read_tensor(fh))
    return out
