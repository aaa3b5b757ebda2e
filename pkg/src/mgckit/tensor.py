"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Every value in this package is a ``Tensor`` of shape ``(n, c, h, w)`` backed
by a contiguous row-major numpy buffer in float32 or float64. Scalars (for
example losses) are tensors of shape ``(1, 1, 1, 1)``.

Differentiable operations record a backward closure on their output; calling
:func:`backward` on a scalar replays the recorded operations in reverse
topological order and accumulates gradients into ``.grad`` buffers. Gradients
accumulate across calls until :meth:`Tensor.zero_grad` resets them.

Tensors are treated as immutable after creation; the only sanctioned in-place
mutation is a parameter update applied between forward passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "NonFiniteError",
    "no_grad",
    "tensor",
    "zeros",
    "add",
    "sub",
    "maximum",
    "mul_scalar",
    "concat_channels",
    "global_avg_pool",
    "linear",
    "conv2d",
    "depthwise_conv2d",
    "gelu",
    "batchnorm2d",
    "circular_shift",
    "softmax_cross_entropy",
    "backward",
    "grad_check",
    "GELU_TANH_COEFF",
    "GELU_CUBIC_COEFF",
]

# Tanh-approximation GELU constants, fixed so reference values are
# reproducible bit-for-bit per dtype:
#   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
GELU_TANH_COEFF = 0.7978845608028654  # sqrt(2 / pi)
GELU_CUBIC_COEFF = 0.044715

_grad_enabled = True


class no_grad:
    """Context manager that disables recording of backward closures."""

    def __enter__(self) -> None:
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc) -> None:
        global _grad_enabled
        _grad_enabled = self._prev


class NonFiniteError(RuntimeError):
    """Raised when a forward value contains NaN or Inf, naming the op."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


class Tensor:
    """A rank-4 array ``(n, c, h, w)`` with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _op: str = "leaf",
    ):
        if data.ndim != 4:
            raise ValueError(f"tensors are rank-4 (n, c, h, w); got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            raise ValueError(f"dtype must be float32 or float64, got {data.dtype}")
        self.data = np.ascontiguousarray(data)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[], None]] = None
        self._op = _op

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad}, op={self._op!r})"
        )


@dataclass(frozen=True)
class Parameter:
    """A named learnable tensor; the name encodes module provenance."""

    name: str
    tensor: Tensor


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a leaf tensor from array-like data (must reshape to rank 4)."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64 if dtype is None else dtype)
    if arr.ndim != 4:
        raise ValueError(f"expected rank-4 data, got shape {arr.shape}")
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape: Sequence[int], dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _make(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    op: str,
    backward_fn: Optional[Callable[[Tensor], None]],
) -> Tensor:
    """Wrap a forward result, recording the backward closure when tracking."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op)
    if track and backward_fn is not None:
        out._backward = lambda: backward_fn(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def bwd(out: Tensor) -> None:
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    return _make(a.data + b.data, (a, b), "add", bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def bwd(out: Tensor) -> None:
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    return _make(a.data - b.data, (a, b), "sub", bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on exact ties the gradient goes to ``a``."""
    _check_same(a, b, "max")
    first_wins = a.data >= b.data

    def bwd(out: Tensor) -> None:
        _accumulate(a, out.grad * first_wins)
        _accumulate(b, out.grad * ~first_wins)

    return _make(np.where(first_wins, a.data, b.data), (a, b), "max", bwd)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(out: Tensor) -> None:
        _accumulate(a, out.grad * s)

    return _make(a.data * s, (a,), "mul_scalar", bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; blocks keep their order."""
    if a.dtype != b.dtype:
        raise ValueError(f"concat_channels: dtype mismatch {a.dtype} vs {b.dtype}")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(
            f"concat_channels: non-channel dims differ, {a.shape} vs {b.shape}"
        )

    def bwd(out: Tensor) -> None:
        _accumulate(a, out.grad[:, :ca])
        _accumulate(b, out.grad[:, ca:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), "concat_channels", bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def bwd(out: Tensor) -> None:
        _accumulate(x, np.broadcast_to(out.grad * inv, x.shape))

    return _make(x.data.mean(axis=(2, 3), keepdims=True), (x,), "global_avg_pool", bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map on the flattened tensor.

    ``x`` is flattened per sample to length ``c*h*w``; ``w`` has shape
    ``(out, c*h*w, 1, 1)``; the result is ``(n, out, 1, 1)``.
    """
    n = x.shape[0]
    flat_dim = x.data.size // n
    out_dim, in_dim, kh, kw = w.shape
    if (in_dim, kh, kw) != (flat_dim, 1, 1):
        raise ValueError(
            f"linear: weight shape {w.shape} incompatible with input {x.shape}"
        )
    if b is not None and b.shape != (1, out_dim, 1, 1):
        raise ValueError(f"linear: bias shape {b.shape} != (1, {out_dim}, 1, 1)")
    xf = x.data.reshape(n, flat_dim)
    wf = w.data.reshape(out_dim, flat_dim)
    y = xf @ wf.T
    if b is not None:
        y = y + b.data.reshape(out_dim)

    def bwd(out: Tensor) -> None:
        g = out.grad.reshape(n, out_dim)
        _accumulate(x, (g @ wf).reshape(x.shape))
        _accumulate(w, (g.T @ xf).reshape(w.shape))
        if b is not None:
            _accumulate(b, g.sum(axis=0).reshape(b.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y.reshape(n, out_dim, 1, 1), parents, "linear", bwd)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _conv_windows(
    x: np.ndarray, kh: int, kw: int, stride: int, padding: int, op: str
) -> tuple[np.ndarray, int, int]:
    """Return strided sliding windows ``(n, c, oh, ow, kh, kw)`` over padded x."""
    n, c, h, w = x.shape
    ph, pw = h + 2 * padding, w + 2 * padding
    if kh > ph or kw > pw:
        raise ValueError(
            f"{op}: kernel ({kh}x{kw}) exceeds padded input ({ph}x{pw})"
        )
    oh = (ph - kh) // stride + 1
    ow = (pw - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"{op}: zero-sized output for input {x.shape}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride], oh, ow


def _scatter_windows(
    dwin: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding: int
) -> np.ndarray:
    """Accumulate per-window gradients ``(n, c, oh, ow, kh, kw)`` back to x."""
    n, c, h, w = x_shape
    oh, ow = dwin.shape[2], dwin.shape[3]
    gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dwin[:, :, :, :, i, j]
            )
    if padding:
        return gpad[:, :, padding : padding + h, padding : padding + w]
    return gpad


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D convolution (cross-correlation) with kernel ``(out_c, in_c, kh, kw)``.

    Output spatial dims are ``floor((dim + 2*padding - k) / stride) + 1``.
    """
    oc, ic, kh, kw = w.shape
    if ic != x.shape[1]:
        raise ValueError(
            f"conv2d: kernel expects {ic} input channels, input has {x.shape[1]}"
        )
    if b is not None and b.shape != (1, oc, 1, 1):
        raise ValueError(f"conv2d: bias shape {b.shape} != (1, {oc}, 1, 1)")
    win, oh, ow = _conv_windows(x.data, kh, kw, stride, padding, "conv2d")
    # (n, oh, ow, oc) <- contract (c, kh, kw)
    y = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    if b is not None:
        y += b.data

    def bwd(out: Tensor) -> None:
        g = out.grad
        if w.requires_grad:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(w, dw)
        if x.requires_grad:
            # dwin[n, c, i, j, kh, kw] = sum_o g[n, o, i, j] * w[o, c, kh, kw]
            dwin = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            _accumulate(x, _scatter_windows(dwin, x.shape, kh, kw, stride, padding))
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)).reshape(b.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, "conv2d", bwd)


def depthwise_conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Per-channel convolution with kernel ``(c, 1, kh, kw)``.

    Output channel i depends only on input channel i.
    """
    c, one, kh, kw = w.shape
    if one != 1:
        raise ValueError(f"depthwise_conv2d: kernel must be (c, 1, kh, kw), got {w.shape}")
    if c != x.shape[1]:
        raise ValueError(
            f"depthwise_conv2d: kernel has {c} channels, input has {x.shape[1]}"
        )
    if b is not None and b.shape != (1, c, 1, 1):
        raise ValueError(f"depthwise_conv2d: bias shape {b.shape} != (1, {c}, 1, 1)")
    win, oh, ow = _conv_windows(x.data, kh, kw, stride, padding, "depthwise_conv2d")
    y = np.einsum("nchwij,cij->nchw", win, w.data[:, 0], optimize=True)
    y = np.ascontiguousarray(y)
    if b is not None:
        y += b.data

    def bwd(out: Tensor) -> None:
        g = out.grad
        if w.requires_grad:
            dw = np.einsum("nchw,nchwij->cij", g, win, optimize=True)
            _accumulate(w, dw[:, None])
        if x.requires_grad:
            dwin = g[:, :, :, :, None, None] * w.data[:, 0][None, :, None, None, :, :]
            _accumulate(x, _scatter_windows(dwin, x.shape, kh, kw, stride, padding))
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)).reshape(b.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, "depthwise_conv2d", bwd)


# ---------------------------------------------------------------------------
# Nonlinearity and normalization
# ---------------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """GELU under the tanh approximation (see module constants)."""
    xd = x.data
    inner = GELU_TANH_COEFF * (xd + GELU_CUBIC_COEFF * xd**3)
    t = np.tanh(inner)

    def bwd(out: Tensor) -> None:
        sech2 = 1.0 - t * t
        dinner = GELU_TANH_COEFF * (1.0 + 3.0 * GELU_CUBIC_COEFF * xd * xd)
        _accumulate(x, out.grad * (0.5 * (1.0 + t) + 0.5 * xd * sech2 * dinner))

    return _make(0.5 * xd * (1.0 + t), (x,), "gelu", bwd)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes by batch statistics (biased variance) and updates the
    running buffers in place: ``running = (1 - momentum) * running + momentum *
    batch`` with the unbiased variance stored. Eval mode normalizes by the
    running buffers.
    """
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ValueError(
            f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} do not match "
            f"{c} channels"
        )
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError("batchnorm2d: running stats must have shape (c,)")
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")

    if training:
        count = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def bwd(out: Tensor) -> None:
            g = out.grad
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape))
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=(0, 2, 3)).reshape(beta.shape))
            if x.requires_grad:
                dxhat = g * gamma.data
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (
                    inv_std[None, :, None, None]
                    / count
                    * (count * dxhat - s1 - xhat * s2)
                )
                _accumulate(x, dx)

    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def bwd(out: Tensor) -> None:
            g = out.grad
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape))
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=(0, 2, 3)).reshape(beta.shape))
            if x.requires_grad:
                _accumulate(x, g * gamma.data * inv_std[None, :, None, None])

    y = gamma.data * xhat + beta.data
    return _make(y, (x, gamma, beta), "batchnorm2d", bwd)


# ---------------------------------------------------------------------------
# Grid ops
# ---------------------------------------------------------------------------


def circular_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Cyclic spatial shift: ``out[i, j] = x[(i - dy) mod h, (j - dx) mod w]``.

    An exact permutation; the gradient is the inverse shift. Shifts compose
    additively: ``shift(shift(x, a), b) == shift(x, a + b)``.
    """

    def bwd(out: Tensor) -> None:
        _accumulate(x, np.roll(out.grad, (-dy, -dx), axis=(2, 3)))

    return _make(np.roll(x.data, (dy, dx), axis=(2, 3)), (x,), "circular_shift", bwd)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over a batch of ``(n, k, 1, 1)`` logits.

    Uses the log-sum-exp shift for stability; the gradient is
    ``(softmax(logits) - one_hot(labels)) / n``.
    """
    n, k, h, w = logits.shape
    if (h, w) != (1, 1):
        raise ValueError(f"softmax_cross_entropy: logits must be (n, k, 1, 1), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: labels must have shape ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: labels out of range [0, {k})")
    z = logits.data.reshape(n, k)
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    nll = lse - z[np.arange(n), labels]
    loss = nll.mean()

    def bwd(out: Tensor) -> None:
        g = out.grad.reshape(())
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, (g / n) * p.reshape(logits.shape))

    return _make(
        np.full((1, 1, 1, 1), loss, dtype=logits.dtype), (logits,), "softmax_cross_entropy", bwd
    )


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the ops that produced a root tensor.

    ``nodes`` lists tensors with inputs strictly before consumers; replaying
    backward over the reversed list visits each recorded op exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def first_nonfinite(self) -> Optional[Tensor]:
        """Earliest recorded tensor holding NaN/Inf, or None."""
        for node in self.nodes:
            if not np.isfinite(node.data).all():
                return node
        return None


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Tape:
    """Populate ``.grad`` on every reachable tensor with ``requires_grad``.

    ``loss`` must be a scalar produced with gradient tracking enabled.
    Repeated calls accumulate gradients until they are explicitly zeroed.
    Returns the tape that was replayed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward on a tensor that does not require grad")
    if tape is None:
        tape = Tape.trace(loss)
    loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward()
    return tape


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of a scalar-valued ``f`` to central differences.

    Returns ``max_i |analytic_i - numeric_i| / max(1, |analytic_i|)``. ``x``
    must be double precision; ``eps`` must lie in ``[1e-7, 1e-4]``. Raises
    :class:`NonFiniteError` if any forward intermediate is non-finite.
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires a float64 input")
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")

    probe = Tensor(x.data.copy(), requires_grad=True)
    loss = f(probe)
    if loss.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    tape = Tape.trace(loss)
    bad = tape.first_nonfinite()
    if bad is not None:
        raise NonFiniteError(bad._op)
    backward(loss, tape)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(flat.reshape(x.shape))).item()
            flat[i] = orig - eps
            lo = f(Tensor(flat.reshape(x.shape))).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.abs(a))
    return float(np.max(np.abs(a - numeric) / denom))
