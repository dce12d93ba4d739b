"""Dense tensors with a reverse-mode gradient tape.

Every differentiable primitive records one node on the active :class:`Tape`
(operation kind, input ids, saved forward context). ``Tape.backward`` walks
the nodes once in reverse insertion order. Saved contexts go through
``Tape.save`` so a tape opened with ``storage="float16"`` keeps activations in
half precision and counts the bytes it holds.

Base precision is float32. :func:`verification_mode` switches newly created
tensors to float64 for gradient checking.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import kernels

L2_EPS = 1e-12
BN_EPS = 1e-5

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def verification_mode():
    """Create float64 tensors inside the block (gradient verification only)."""
    prev = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class TapeError(RuntimeError):
    pass


class Tensor:
    """n-dimensional array that may participate in a gradient tape."""

    __slots__ = ("data", "grad_enabled", "node_id", "tape", "name")

    def __init__(self, values, grad_enabled=False, name=None, dtype=None):
        arr = np.asarray(values, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad_enabled = bool(grad_enabled)
        self.node_id = None
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values, name=None) -> Tensor:
    return Tensor(values, grad_enabled=True, name=name)


@dataclass
class Node:
    kind: str
    inputs: tuple  # each entry: int node id, Tensor leaf, or None (constant)
    saved: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered record of primitive applications for one training step.

    ``storage`` is the dtype used for saved forward context ("float32" or
    "float16"); ``saved_bytes`` counts what the tape currently holds.
    """

    storage: str = "float32"
    nodes: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)
    saved_bytes: int = 0
    consumed: bool = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def reset(self):
        self.nodes.clear()
        self.leaves.clear()
        self.saved_bytes = 0
        self.consumed = False

    def save(self, *arrays):
        out = []
        for a in arrays:
            if isinstance(a, np.ndarray) and a.dtype.kind == "f":
                if self.storage == "float16":
                    a = a.astype(np.float16)
                self.saved_bytes += a.nbytes
            out.append(a)
        return tuple(out)

    def record(self, kind, inputs, saved, backward, out_data) -> Tensor:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        refs = []
        for t in inputs:
            if t is None or not isinstance(t, Tensor):
                refs.append(None)
            elif t.tape is self and t.node_id is not None:
                refs.append(t.node_id)
            elif t.grad_enabled and t.node_id is None:
                self.leaves[id(t)] = t
                refs.append(t)
            else:
                refs.append(None)
        node = Node(kind, tuple(refs), self.save(*saved), backward)
        self.nodes.append(node)
        out = Tensor(out_data, grad_enabled=True, dtype=out_data.dtype)
        out.node_id = len(self.nodes) - 1
        out.tape = self
        return out

    def backward(self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None):
        """Return ``{leaf tensor: gradient array}`` for every grad-enabled leaf.

        Leaves listed in ``wrt`` are always present (zeros when unreached).
        """
        if self.consumed:
            raise TapeError("backward() called twice on one tape without reset()")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True
        leaf_grads = {}
        if loss.tape is self and loss.node_id is not None:
            grads = {loss.node_id: np.ones_like(loss.data)}
            for nid in range(loss.node_id, -1, -1):
                g = grads.pop(nid, None)
                if g is None:
                    continue
                node = self.nodes[nid]
                saved = tuple(
                    s.astype(np.float32) if isinstance(s, np.ndarray) and s.dtype == np.float16 else s
                    for s in node.saved
                )
                in_grads = node.backward(g, saved)
                for ref, ig in zip(node.inputs, in_grads):
                    if ref is None or ig is None:
                        continue
                    if isinstance(ref, Tensor):
                        key = id(ref)
                        if key in leaf_grads:
                            leaf_grads[key] = leaf_grads[key] + ig
                        else:
                            leaf_grads[key] = ig
                    elif ref in grads:
                        grads[ref] = grads[ref] + ig
                    else:
                        grads[ref] = ig
        elif not loss.grad_enabled and loss.node_id is None:
            pass  # constant loss: every gradient is zero
        else:
            raise TapeError("loss is not on this tape")
        result = {}
        for key, t in self.leaves.items():
            g = leaf_grads.get(key)
            result[t] = (np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False))
        for t in wrt or ():
            if t not in result:
                g = leaf_grads.get(id(t))
                result[t] = np.zeros_like(t.data) if g is None else g
        return result


def backward(loss: Tensor, wrt=None):
    """Backpropagate ``loss`` through the tape it was recorded on."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape or active_tape()
    if tape is None:
        raise TapeError("no active tape")
    return tape.backward(loss, wrt)


def _needs_tape(*ts):
    tape = active_tape()
    if tape is None:
        return None
    for t in ts:
        if isinstance(t, Tensor) and t.grad_enabled:
            return tape
    return None


def _emit(kind, inputs, out_data, saved=(), backward=None):
    tape = _needs_tape(*inputs)
    if tape is None:
        return Tensor(out_data, dtype=out_data.dtype)
    return tape.record(kind, inputs, saved, backward, out_data)


# ---------------------------------------------------------------- elementwise

def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return _emit("add_scalar", (a,), a.data + np.asarray(b, a.data.dtype), (),
                     lambda g, s: (g,))
    b = as_tensor(b)
    _check_same(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, (), lambda g, s: (g, g))


def sub(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add(a, -b)
    b = as_tensor(b)
    _check_same(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data, (), lambda g, s: (g, -g))


def neg(a):
    return scalar_mul(a, -1.0)


def scalar_mul(a, c):
    a = as_tensor(a)
    c = float(c)
    return _emit("scalar_mul", (a,), a.data * a.data.dtype.type(c), (),
                 lambda g, s: (g * g.dtype.type(c),))


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scalar_mul(a, b)
    b = as_tensor(b)
    _check_same(a, b, "mul")
    return _emit("mul", (a, b), a.data * b.data, (a.data, b.data),
                 lambda g, s: (g * s[1], g * s[0]))


def tsum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def bw(g, s):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis)), (), bw)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scalar_mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), (), lambda g, s: (g.reshape(old),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data, (a.data, b.data),
                 lambda g, s: (g @ s[1].T, s[0].T @ g))


def affine(a, weight, bias=None):
    """``a @ weight + bias`` with ``a`` (B, K), ``weight`` (K, N), ``bias`` (N,)."""
    a, weight = as_tensor(a), as_tensor(weight)
    if a.ndim != 2 or weight.ndim != 2 or a.shape[1] != weight.shape[0]:
        raise ValueError(f"affine: incompatible shapes {a.shape} and {weight.shape}")
    out = a.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"affine: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data

    def bw(g, s):
        x, w = s
        return (g @ w.T, x.T @ g, g.sum(axis=0) if bias is not None else None)

    return _emit("affine", (a, weight, bias), out, (a.data, weight.data), bw)


def conv2d(x, kernel, stride=1, padding=0):
    """2-D cross-correlation via im2col + matmul, no bias."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    b, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, padding)
    wmat = kernel.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(b, oh, ow, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    need_dx = x.grad_enabled

    def bw(g, s):
        cols_s, wmat_s = s
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols_s).reshape(kernel.shape)
        gx = None
        if need_dx:
            gx = kernels.col2im(g2 @ wmat_s, (b, c, h, w), kh, kw, stride, padding)
        return gx, gw

    return _emit("conv2d", (x, kernel), out, (cols, wmat), bw)


# ---------------------------------------------------------------- nonlinearities

def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _emit("relu", (a,), out, (out,), lambda g, s: (g * (s[0] > 0),))


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def create(cls, channels, momentum=0.9):
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), momentum)


def batch_norm(a, gamma=None, beta=None, running_stats: Optional[RunningStats] = None, mode="train"):
    """Per-channel batch normalization for (B, C) or (B, C, H, W) inputs.

    Train mode normalizes with batch statistics and updates ``running_stats``
    (``new = momentum * old + (1 - momentum) * batch``, unbiased variance);
    eval mode normalizes with the running statistics.
    """
    a = as_tensor(a)
    if a.ndim not in (2, 4):
        raise ValueError(f"batch_norm expects 2-D or 4-D input, got {a.shape}")
    axes = (0,) if a.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if a.ndim == 2 else (1, -1, 1, 1)
    c = a.shape[1]
    n = a.data.size // c
    dt = a.data.dtype
    if mode == "train":
        if a.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs batch >= 2 (variance undefined)")
        mu = a.data.mean(axis=axes)
        var = a.data.var(axis=axes)
        if running_stats is not None:
            m = running_stats.momentum
            unbiased = var * (n / max(n - 1, 1))
            running_stats.mean[...] = m * running_stats.mean + (1 - m) * mu
            running_stats.var[...] = m * running_stats.var + (1 - m) * unbiased
    elif mode == "eval":
        if running_stats is None:
            raise ValueError("batch_norm eval mode requires running statistics")
        mu = running_stats.mean.astype(dt)
        var = running_stats.var.astype(dt)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(dt)
    xhat = (a.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    gam = as_tensor(gamma) if gamma is not None else None
    bet = as_tensor(beta) if beta is not None else None
    out = xhat
    if gam is not None:
        out = out * gam.data.reshape(bshape)
    if bet is not None:
        out = out + bet.data.reshape(bshape)
    train = mode == "train"

    def bw(g, s):
        xh, istd = s[0], s[1]
        gg = s[2] if gam is not None else None
        g_gamma = (g * xh).sum(axis=axes) if gam is not None else None
        g_beta = g.sum(axis=axes) if bet is not None else None
        gx_hat = g * gg.reshape(bshape) if gg is not None else g
        if train:
            mean_g = gx_hat.mean(axis=axes).reshape(bshape)
            mean_gx = (gx_hat * xh).mean(axis=axes).reshape(bshape)
            gx = (gx_hat - mean_g - xh * mean_gx) * istd.reshape(bshape)
        else:
            gx = gx_hat * istd.reshape(bshape)
        return gx, g_gamma, g_beta

    saved = (xhat, inv_std) + ((gam.data,) if gam is not None else ())
    return _emit("batch_norm", (a, gam, bet), out.astype(dt, copy=False), saved, bw)


def global_average_pool(a):
    a = as_tensor(a)
    if a.ndim != 4:
        raise ValueError(f"global_average_pool expects (B, C, H, W), got {a.shape}")
    b, c, h, w = a.shape

    def bw(g, s):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (b, c, h, w)).copy(),)

    return _emit("global_average_pool", (a,), a.data.mean(axis=(2, 3)), (), bw)


def l2_normalize(a):
    """Row-wise ``a / sqrt(sum(a**2) + 1e-12)``; exact-zero rows are rejected."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"l2_normalize expects (B, D), got {a.shape}")
    sq = (a.data * a.data).sum(axis=1, keepdims=True)
    zero = np.flatnonzero(~np.any(a.data != 0, axis=1))
    if zero.size:
        raise ValueError(f"l2_normalize: row {int(zero[0])} is all zeros")
    norm = np.sqrt(sq + L2_EPS).astype(a.data.dtype)
    out = a.data / norm

    def bw(g, s):
        y, n = s
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / n,)

    return _emit("l2_normalize", (a,), out, (out, norm), bw)


def stop_gradient(a):
    """Identity forward; no gradient ever flows back into ``a``."""
    a = as_tensor(a)
    tape = _needs_tape(a)
    if tape is not None:
        tape.record("stop_gradient", (a,), (), lambda g, s: (None,), a.data)
    return Tensor(a.data.copy(), grad_enabled=False, dtype=a.data.dtype)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    p = softmax(logits.data)
    b = logits.shape[0]
    rows = np.arange(b)
    loss = -np.log(np.maximum(p[rows, labels], np.finfo(p.dtype).tiny)).mean()

    def bw(g, s):
        (probs,) = s
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / b),)

    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.data.dtype), (p,), bw)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_abs_error: float
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol):
        return self.max_rel_error < tol


def grad_check(f, point, eps=1e-3, tol=1e-2, numeric_dtype=np.float64, floor=1e-3):
    """Compare the reverse-mode gradient of scalar ``f`` at ``point`` with central differences.

    The analytic gradient is taken at the current default precision; the
    finite differences are evaluated at ``numeric_dtype``. Per-coordinate
    relative error is ``|a - n| / max(|a|, |n|, floor * max_abs_grad)``.
    """
    point = np.array(point, dtype=default_dtype())
    x = Tensor(point.copy(), grad_enabled=True)
    with Tape() as tape:
        out = f(x)
        if out.data.size != 1:
            raise ValueError("grad_check: f must be scalar-valued")
        analytic = tape.backward(out, wrt=[x])[x].astype(np.float64)
    base = point.astype(numeric_dtype)
    numeric = np.zeros(point.shape, np.float64)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base.copy(), dtype=numeric_dtype)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(base.copy(), dtype=numeric_dtype)).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * eps)
    diff = np.abs(analytic - numeric)
    peak = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor * peak, 1e-30))
    return GradCheckReport(
        max_abs_error=float(diff.max(initial=0.0)),
        max_rel_error=float((diff / scale).max(initial=0.0)),
        analytic=analytic,
        numeric=numeric,
    )
