"""Dense tensors with reverse-mode automatic differentiation.

Tape-based: while a Graph is open (thread-local context manager) every op
that touches a gradient-carrying tensor records itself on the tape; with no
graph open the same ops evaluate eagerly, which doubles as evaluation mode
and as the cheap path for finite-difference probes. The op set is exactly
what a small byte-level transformer needs. Broadcasting is restricted to
bias-style row vectors; anything fancier raises DimensionError instead of
guessing.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, StateError

Array = np.ndarray

_FLOATS = (np.float32, np.float64)


def _dtype(name: str):
    if name == "float32":
        return np.float32
    if name == "float64":
        return np.float64
    raise ContractError(f"unsupported numeric width {name!r}")


class Tensor:
    """Dense array with an optional gradient slot.

    A tensor is a leaf unless it was produced by an op recorded on a graph;
    `grad` accumulates across backward passes until `zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.op: _Op | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def has_nonfinite(self) -> bool:
        return not bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
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


class _Op:
    """One executed operation: inputs, single output, backward closure."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[Array], tuple[Array | None, ...]]):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Ordered tape of executed ops.

    Execution order is topological order by construction: an op can only
    consume tensors that already exist. A graph can be consumed by backward
    exactly once; build a fresh graph per forward pass.
    """

    _local = threading.local()

    def __init__(self):
        self.ops: list[_Op] = []
        self._consumed = False

    # -- thread-local active-graph stack -------------------------------
    @classmethod
    def _stack(cls) -> list["Graph"]:
        stack = getattr(cls._local, "stack", None)
        if stack is None:
            stack = []
            cls._local.stack = stack
        return stack

    @classmethod
    def active(cls) -> "Graph | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def __enter__(self) -> "Graph":
        self._stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = self._stack().pop()
        assert popped is self
        return False

    # -------------------------------------------------------------------
    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        op = _Op(inputs, output, backward_fn)
        output.op = op
        self.ops.append(op)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad for every requires_grad leaf reachable from loss.

        Gradients accumulate into existing .grad buffers, which is what
        gradient accumulation over micro-batches relies on.
        """
        if not isinstance(loss, Tensor):
            raise ContractError("backward needs a Tensor loss")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise StateError("graph already consumed by backward; build a new graph")
        self._consumed = True

        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for op in reversed(self.ops):
            gout = grads.pop(id(op.output), None)
            holders.pop(id(op.output), None)
            if gout is None:
                continue  # op not on a path to the loss
            for t, g in zip(op.inputs, op.backward_fn(gout)):
                if g is None:
                    continue
                if t.requires_grad or t.op is not None:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
                        holders[key] = t
        for key, t in holders.items():
            if t.requires_grad:
                g = grads[key]
                t.grad = g.copy() if t.grad is None else t.grad + g


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if t.has_nonfinite():
        raise NumericError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# op helpers
# ---------------------------------------------------------------------------

def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.op is not None


def _maybe_record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    g = Graph.active()
    if g is not None and any(_tracked(t) for t in inputs):
        g.record(out, inputs, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a @ b."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not conform: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    ta, tb = _tracked(a), _tracked(b)

    def bwd(gout: Array):
        return (gout @ b.data.T if ta else None,
                a.data.T @ gout if tb else None)

    return _maybe_record(out, (a, b), bwd)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose (the linear-layer form)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_t shapes do not conform: {a.shape} x {b.shape}^T")
    out = Tensor(a.data @ b.data.T)
    ta, tb = _tracked(a), _tracked(b)

    def bwd(gout: Array):
        return (gout @ b.data if ta else None,
                gout.T @ a.data if tb else None)

    return _maybe_record(out, (a, b), bwd)


def add(a: Tensor, b) -> Tensor:
    """Elementwise add; the only broadcast allowed is a 1-D bias row onto a
    2-D matrix. Non-tensor operands are constants (no gradient)."""
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape == b.shape:
            out = Tensor(a.data + b.data)
            ta, tb = _tracked(a), _tracked(b)
            return _maybe_record(out, (a, b),
                                 lambda g: (g if ta else None, g if tb else None))
        if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            out = Tensor(a.data + b.data)
            ta, tb = _tracked(a), _tracked(b)
            return _maybe_record(out, (a, b),
                                 lambda g: (g if ta else None,
                                            g.sum(axis=0) if tb else None))
        raise DimensionError(
            f"add supports equal shapes or matrix+bias row, got {a.shape} + {b.shape}")
    const = np.asarray(b, dtype=a.dtype)
    if const.shape not in (a.shape, (), (a.shape[-1],) if a.ndim == 2 else ()):
        raise DimensionError(f"add constant shape {const.shape} vs tensor {a.shape}")
    out = Tensor(a.data + const)
    return _maybe_record(out, (a,), lambda g: (g,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub needs equal shapes, got {a.shape} - {b.shape}")
    out = Tensor(a.data - b.data)
    ta, tb = _tracked(a), _tracked(b)
    return _maybe_record(out, (a, b),
                         lambda g: (g if ta else None, -g if tb else None))


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _maybe_record(out, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; scalar and same-shape constants allowed."""
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"mul needs equal shapes, got {a.shape} * {b.shape}")
        out = Tensor(a.data * b.data)
        ta, tb = _tracked(a), _tracked(b)
        return _maybe_record(out, (a, b),
                             lambda g: (g * b.data if ta else None,
                                        g * a.data if tb else None))
    const = np.asarray(b, dtype=a.dtype)
    if const.shape not in ((), a.shape):
        raise DimensionError(f"mul constant shape {const.shape} vs tensor {a.shape}")
    out = Tensor(a.data * const)
    return _maybe_record(out, (a,), lambda g: (g * const,))


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def bwd(gout: Array):
        if axis is None:
            return (np.broadcast_to(gout, a.shape).astype(a.dtype, copy=True),)
        g = np.expand_dims(gout, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _maybe_record(out, (a,), bwd)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    """Stable softmax along `axis` (max-subtraction). NaN input is an error;
    -inf entries are legal and map to exactly zero mass (used for masking)."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError("softmax received NaN input")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def bwd(gout: Array):
        dot = (gout * p).sum(axis=axis, keepdims=True)
        return (p * (gout - dot),)

    return _maybe_record(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"log_softmax axis {axis} out of range for shape {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError("log_softmax received NaN input")
    m = a.data.max(axis=axis, keepdims=True)
    s = a.data - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = Tensor(s - lse)
    p = np.exp(out.data)

    def bwd(gout: Array):
        return (gout - p * gout.sum(axis=axis, keepdims=True),)

    return _maybe_record(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # stable two-sided form
    z = a.data
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = Tensor(p)
    return _maybe_record(out, (a,), lambda g: (g * p * (1.0 - p),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    z = a.data
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = Tensor(z * s)
    return _maybe_record(out, (a,), lambda g: (g * (s * (1.0 + z * (1.0 - s))),))


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise x / sqrt(mean(x^2)+eps), scaled per column by gain."""
    a, gain = _as_tensor(a), _as_tensor(gain)
    if eps <= 0:
        raise ContractError("rms_norm eps must be positive")
    if a.ndim != 2 or gain.ndim != 1 or gain.shape[0] != a.shape[1]:
        raise DimensionError(f"rms_norm needs (n,d) and gain (d,), got {a.shape}, {gain.shape}")
    x = a.data
    n = x.shape[1]
    inv = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)
    normed = x * inv
    out = Tensor(normed * gain.data)
    ta, tg = _tracked(a), _tracked(gain)

    def bwd(gout: Array):
        gx = None
        if ta:
            gg = gout * gain.data
            # d/dx of x*inv with inv = (mean(x^2)+eps)^-1/2
            dot = (gg * x).sum(axis=1, keepdims=True)
            gx = gg * inv - x * (inv ** 3) * dot / n
        ggain = (gout * normed).sum(axis=0) if tg else None
        return (gx, ggain)

    return _maybe_record(out, (a, gain), bwd)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy from logits, numerically stable."""
    a = _as_tensor(logits)
    y = np.asarray(targets, dtype=a.dtype)
    if y.shape != a.shape:
        raise DimensionError(f"bce targets shape {y.shape} vs logits {a.shape}")
    z = a.data
    out = Tensor(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return _maybe_record(out, (a,), lambda g: (g * (s - y),))


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller decides train/eval (eval mode: do not call)."""
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {p}")
    if p == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded generator")
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    out = Tensor(a.data * mask)
    return _maybe_record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# indexing / shape
# ---------------------------------------------------------------------------

def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor (also the embedding lookup)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("take_rows needs a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"row index out of range for {a.shape[0]} rows")
    out = Tensor(a.data[idx])

    def bwd(gout: Array):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, gout)
        return (g,)

    return _maybe_record(out, (a,), bwd)


def gather(a: Tensor, indices) -> Tensor:
    """Gather elements of a 1-D tensor."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise DimensionError(f"gather needs a 1-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"index out of range for length {a.shape[0]}")
    out = Tensor(a.data[idx])

    def bwd(gout: Array):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, gout)
        return (g,)

    return _maybe_record(out, (a,), bwd)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2 or not (0 <= lo < hi <= a.shape[1]):
        raise DimensionError(f"bad column slice [{lo}:{hi}] for shape {a.shape}")
    out = Tensor(a.data[:, lo:hi])

    def bwd(gout: Array):
        g = np.zeros_like(a.data)
        g[:, lo:hi] = gout
        return (g,)

    return _maybe_record(out, (a,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts or any(p.ndim != 2 for p in parts):
        raise DimensionError("concat_cols needs at least one 2-D tensor")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise DimensionError("concat_cols needs equal row counts")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(gout: Array):
        return tuple(gout[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _maybe_record(out, tuple(parts), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _maybe_record(out, (a,), lambda g: (g.reshape(a.shape),))


def reduce_max(a: Tensor) -> Tensor:
    """Max of a 1-D tensor; the gradient routes to the first argmax."""
    a = _as_tensor(a)
    if a.ndim != 1 or a.size == 0:
        raise DimensionError(f"reduce_max needs a nonempty 1-D tensor, got {a.shape}")
    k = int(np.argmax(a.data))
    out = Tensor(a.data[k])

    def bwd(gout: Array):
        g = np.zeros_like(a.data)
        g[k] = np.asarray(gout).reshape(())
        return (g,)

    return _maybe_record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Per-parameter worst relative error between backprop and central
    differences. `valid` is False when f was caught being non-deterministic."""

    def __init__(self, per_param: dict[str, float], tol: float, valid: bool):
        self.per_param = per_param
        self.tol = tol
        self.valid = valid
        self.max_rel_error = max(per_param.values()) if per_param else 0.0
        self.passed = valid and self.max_rel_error <= tol

    def __repr__(self) -> str:
        status = "PASS" if self.passed else ("INVALID" if not self.valid else "FAIL")
        return f"GradCheckReport({status}, max_rel_error={self.max_rel_error:.3e}, tol={self.tol:.1e})"


def _rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               step: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare backprop gradients of the scalar f() against central finite
    differences over every element of every parameter.

    f must rebuild its forward pass on each call and be deterministic; the
    check runs f twice at the base point and flags mismatch as invalid.
    """
    base1 = f().item()
    base2 = f().item()
    if base1 != base2:
        return GradCheckReport({name: float("inf") for name in params}, tol, valid=False)

    for p in params.values():
        p.zero_grad()
    with Graph() as g:
        loss = f()
        g.backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    per_param: dict[str, float] = {}
    for name, p in params.items():
        worst = 0.0
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = f().item()
            flat[i] = keep - step
            dn = f().item()
            flat[i] = keep
            fd = (up - dn) / (2.0 * step)
            worst = max(worst, _rel_err(float(ana[i]), fd))
        per_param[name] = worst
        p.zero_grad()
    return GradCheckReport(per_param, tol, valid=True)
