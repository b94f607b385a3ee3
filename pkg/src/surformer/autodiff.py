"""Minimal dense-tensor reverse-mode automatic differentiation.

Everything is 64-bit. Ops record backward closures on an implicitly created
tape; a tape supports exactly one backward pass. There is no broadcasting
beyond row-wise bias addition, and every op checks its output for finiteness.
All computation is plain single-threaded numpy, so fixed inputs give bitwise
identical results.
"""
from __future__ import annotations

import json
import struct
import threading
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeMismatchError


class Tape:
    """Ordered record of recorded operations; consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[tuple["Tensor", callable]] = []
        self.consumed = False


_ACTIVE = threading.local()


def _active_tape() -> Tape:
    """The thread's current tape, replaced after each backward pass.

    Tapes are thread-local, so independent threads record independent tapes;
    tensors must not cross threads mid-recording.
    """
    tape = getattr(_ACTIVE, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _ACTIVE.tape = tape
    return tape


class Tensor:
    """Dense float64 value with an optional gradient slot.

    Leaf tensors are created directly (``requires_grad=True`` for trainable
    parameters); op outputs carry a reference to the tape they were recorded
    on. ``grad`` is allocated lazily by the backward pass.
    """

    __slots__ = ("values", "requires_grad", "grad", "tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericError("tensor initialized with non-finite values")
        self.requires_grad = requires_grad
        self.grad = None
        self.tape = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())


def constant(values) -> Tensor:
    return Tensor(values)


def parameter(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.tape is not None


def record_op(name: str, values: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Create an op output, recording ``backward`` when any input is tracked.

    ``backward(grad_out)`` must push gradient contributions into the inputs
    via ``Tensor._accumulate``. Exposed so domain modules can define custom
    primitives (the silhouette lookup uses this).
    """
    if not np.all(np.isfinite(values)):
        raise NumericError(f"op '{name}' produced non-finite values")
    out = Tensor(values)
    for t in inputs:
        if t.tape is not None and t.tape.consumed:
            raise NumericError(f"op '{name}' reuses a tensor from a consumed tape")
    if any(_tracked(t) for t in inputs):
        tape = _active_tape()
        for t in inputs:
            if t.tape is not None and t.tape is not tape:
                raise NumericError(f"op '{name}' mixes tensors from different tapes")
        out.tape = tape
        tape.nodes.append((out, backward))
    return out


def backward(loss: Tensor):
    """Populate gradients of every tracked tensor reachable from ``loss``."""
    if loss.values.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise NumericError("backward on a detached tensor (nothing was recorded)")
    if loss.tape.consumed:
        raise NumericError("tape already consumed by a previous backward pass")
    loss.tape.consumed = True
    if getattr(_ACTIVE, "tape", None) is loss.tape:
        _ACTIVE.tape = None
    loss.grad = np.ones_like(loss.values)
    for out, fn in reversed(loss.tape.nodes):
        if out.grad is not None:
            fn(out.grad)


# --------------------------------------------------------------------------
# Primitive ops
# --------------------------------------------------------------------------


def _same_shape(name, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{name}: shapes {a.shape} and {b.shape} differ")


def _row_bias(a: Tensor, b: Tensor) -> bool:
    return a.values.ndim == 2 and b.values.ndim in (1, 2) and \
        b.values.reshape(-1).shape == (a.shape[1],) and b.values.size == a.shape[1]


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def bw(g):
            if _tracked(a):
                a._accumulate(g)
            if _tracked(b):
                b._accumulate(g)
        return record_op("add", a.values + b.values, (a, b), bw)
    if _row_bias(a, b):
        bias = b.values.reshape(1, -1)

        def bw(g):
            if _tracked(a):
                a._accumulate(g)
            if _tracked(b):
                b._accumulate(g.sum(axis=0).reshape(b.shape))
        return record_op("add", a.values + bias, (a, b), bw)
    raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} are not addable")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def bw(g):
        if _tracked(a):
            a._accumulate(g * b.values)
        if _tracked(b):
            b._accumulate(g * a.values)
    return record_op("mul", a.values * b.values, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)

    def bw(g):
        if _tracked(a):
            a._accumulate(g / b.values)
        if _tracked(b):
            b._accumulate(-g * a.values / (b.values**2))
    return record_op("div", a.values / b.values, (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    def bw(g):
        if _tracked(a):
            a._accumulate(g * factor)
    return record_op("scale", a.values * factor, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def bw(g):
        if _tracked(a):
            a._accumulate(g @ b.values.T)
        if _tracked(b):
            b._accumulate(a.values.T @ g)
    return record_op("matmul", a.values @ b.values, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        if _tracked(a):
            a._accumulate(g.T)
    return record_op("transpose", a.values.T.copy(), (a,), bw)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if axis not in (0, 1):
        raise ShapeMismatchError("concat supports axis 0 or 1")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if _tracked(t):
                t._accumulate(g[lo:hi] if axis == 0 else g[:, lo:hi])
    return record_op("concat", np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        if _tracked(a):
            full = np.zeros_like(a.values)
            full[start:stop] = g
            a._accumulate(full)
    return record_op("slice_rows", a.values[start:stop].copy(), (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        if _tracked(a):
            full = np.zeros_like(a.values)
            full[:, start:stop] = g
            a._accumulate(full)
    return record_op("slice_cols", a.values[:, start:stop].copy(), (a,), bw)


def take_rows(a: Tensor, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)

    def bw(g):
        if _tracked(a):
            full = np.zeros_like(a.values)
            np.add.at(full, indices, g)
            a._accumulate(full)
    return record_op("take_rows", a.values[indices].copy(), (a,), bw)


def tile_cols(a: Tensor, count: int) -> Tensor:
    """Repeat an (n, 1) column ``count`` times to (n, count)."""
    if a.values.ndim != 2 or a.shape[1] != 1:
        raise ShapeMismatchError(f"tile_cols expects (n, 1), got {a.shape}")

    def bw(g):
        if _tracked(a):
            a._accumulate(g.sum(axis=1, keepdims=True))
    return record_op("tile_cols", np.repeat(a.values, count, axis=1), (a,), bw)


def relu(a: Tensor) -> Tensor:
    gate = (a.values > 0).astype(np.float64)

    def bw(g):
        if _tracked(a):
            a._accumulate(g * gate)
    return record_op("relu", a.values * gate, (a,), bw)


def sin(a: Tensor) -> Tensor:
    def bw(g):
        if _tracked(a):
            a._accumulate(g * np.cos(a.values))
    return record_op("sin", np.sin(a.values), (a,), bw)


def cos(a: Tensor) -> Tensor:
    def bw(g):
        if _tracked(a):
            a._accumulate(-g * np.sin(a.values))
    return record_op("cos", np.cos(a.values), (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_values = np.exp(a.values)

    def bw(g):
        if _tracked(a):
            a._accumulate(g * out_values)
    return record_op("exp", out_values, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        if _tracked(a):
            a._accumulate(g / a.values)
    return record_op("log", np.log(a.values), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out_values = np.sqrt(a.values)

    def bw(g):
        if _tracked(a):
            a._accumulate(g * 0.5 / out_values)
    return record_op("sqrt", out_values, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        if _tracked(a):
            a._accumulate(np.full_like(a.values, float(g)))
    return record_op("sum_all", np.asarray(a.values.sum()), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size

    def bw(g):
        if _tracked(a):
            a._accumulate(np.full_like(a.values, float(g) / n))
    return record_op("mean_all", np.asarray(a.values.mean()), (a,), bw)


def row_sum(a: Tensor) -> Tensor:
    """Sum along axis 1, keeping the column dimension: (n, m) -> (n, 1)."""
    def bw(g):
        if _tracked(a):
            a._accumulate(np.repeat(g, a.shape[1], axis=1))
    return record_op("row_sum", a.values.sum(axis=1, keepdims=True), (a,), bw)


def layer_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row standardization to mean 0, variance 1 (no learned affine)."""
    if a.values.ndim != 2:
        raise ShapeMismatchError(f"layer_normalize expects 2-D, got {a.shape}")
    mu = a.values.mean(axis=1, keepdims=True)
    centered = a.values - mu
    var = (centered**2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_values = centered * inv

    def bw(g):
        if _tracked(a):
            m = a.shape[1]
            g_mean = g.mean(axis=1, keepdims=True)
            gy = (g * out_values).mean(axis=1, keepdims=True)
            a._accumulate(inv * (g - g_mean - out_values * gy))
    return record_op("layer_normalize", out_values, (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows expects 2-D, got {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_values = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if _tracked(a):
            dot = (g * out_values).sum(axis=1, keepdims=True)
            a._accumulate(out_values * (g - dot))
    return record_op("softmax_rows", out_values, (a,), bw)


def mean_squared_error(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mean_squared_error", a, b)
    diff = a.values - b.values
    n = diff.size

    def bw(g):
        coeff = 2.0 * float(g) / n
        if _tracked(a):
            a._accumulate(coeff * diff)
        if _tracked(b):
            b._accumulate(-coeff * diff)
    return record_op("mean_squared_error", np.asarray((diff**2).mean()), (a, b), bw)


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads: list[np.ndarray] | None = None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeMismatchError(f"expected {len(self.params)} gradients, got {len(grads)}")
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.values.shape:
                raise ShapeMismatchError(f"gradient shape {g.shape} does not match parameter {p.values.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g**2
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.values = p.values - update
            if not np.all(np.isfinite(p.values)):
                raise NumericError("optimizer step produced non-finite parameters")


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


def finite_difference_check(fn, arrays: list[np.ndarray], h: float = 1e-5,
                            rtol: float = 1e-4, atol: float = 1e-7) -> float:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` maps a list of Tensors to a scalar Tensor. Returns the worst
    relative error and raises ``AssertionError`` beyond the tolerance.
    """
    params = [parameter(a) for a in arrays]
    loss = fn(params)
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = [a.copy() for a in arrays]
            bumped[k].reshape(-1)[i] = flat[i] + h
            up = float(fn([constant(a) for a in bumped]).values)
            bumped[k].reshape(-1)[i] = flat[i] - h
            down = float(fn([constant(a) for a in bumped]).values)
            numeric = (up - down) / (2.0 * h)
            a_val = analytic[k].reshape(-1)[i]
            err = abs(a_val - numeric) / max(abs(a_val), abs(numeric), atol / rtol)
            worst = max(worst, err)
            if err > rtol:
                raise AssertionError(
                    f"gradient mismatch at input {k}[{i}]: analytic {a_val:.8g}, "
                    f"numeric {numeric:.8g}, relative error {err:.3g}"
                )
    return worst


# --------------------------------------------------------------------------
# Checkpoints: flat binary container of named float64 tensors
# --------------------------------------------------------------------------

_MAGIC = b"SFCK"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    """Little-endian float64 blobs after a JSON header (names, shapes, offsets)."""
    names = sorted(tensors)
    entries = {}
    offset = 0
    for name in names:
        arr = np.asarray(tensors[name], dtype=np.float64)
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.asarray(tensors[name]).astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise NumericError(f"{path} is not a checkpoint file")
    header_len = struct.unpack("<Q", raw[4:12])[0]
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    data = raw[12 + header_len :]
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data[start : start + 8 * count], dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return tensors, header["meta"]
