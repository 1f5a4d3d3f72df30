"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every primitive the segmentation network needs lives here: dilated
convolution, transpose convolution, max/avg pooling, corner-aligned bilinear
resize, channel concatenation, activations and the handful of elementwise
ops used by the loss. Each op records a closure that maps the upstream
gradient to gradients for its inputs; :meth:`Tensor.backward` replays those
closures in reverse topological order.

Data is float32 by default. Passing ``dtype=np.float64`` keeps double
precision, which :func:`grad_check` relies on for meaningful finite
differences.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, FormatError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """A node in the computation record.

    Args:
        data: Array-like payload. Integer and float16 input is promoted to
            float32; float64 is kept only when ``dtype`` asks for it.
        requires_grad: Whether gradients should flow into this tensor.
        dtype: Storage dtype, float32 unless overridden.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None,
                 _parents: Tuple["Tensor", ...] = (), _backward=None, _op: str = "leaf"):
        if dtype is None:
            dtype = np.float32
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = _op

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- reverse mode ----------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        Gradients accumulate into existing ``.grad`` buffers of leaves, so
        call :meth:`zero_grad` between optimisation steps.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")
        order = computation_record(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node.op == "leaf":
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def computation_record(root: Tensor) -> list:
    """Return the tensors reachable from ``root`` in topological order.

    Inputs always precede the ops that consume them and every node appears
    once, so a reversed walk visits each op exactly once.
    """
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _as_tensor(x, dtype=np.float32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them, e.g. for inference."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, dtype=data.dtype,
                  _parents=parents if req else (), _backward=backward if req else None, _op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check4(x: Tensor, name: str) -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{name} expects a rank-4 (N,C,H,W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant exponent."""
    out = a.data ** exponent

    def backward(g):
        if exponent == 0:
            return (np.zeros_like(a.data),)
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), backward, "pow")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the input is inside the bounds."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * inside,), "clip")


def relu(a: Tensor) -> Tensor:
    """Rectifier with subgradient 0 at 0."""
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum with float64 accumulation."""
    out = np.sum(a.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over axis 1 (channels), independently at every pixel."""
    _check4(a, "softmax_channels")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (a,), backward, "softmax")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise DimensionError("concat_channels needs at least one tensor")
    for t in inputs:
        _check4(t, "concat_channels")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise DimensionError(
                f"concat_channels: cannot join {inputs[0].shape} with {t.shape}; N, H, W must match")
    if len(inputs) == 1:
        return inputs[0]
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _make(out, inputs, backward, "concat")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, f: int, stride: int, padding: int, dilation: int) -> int:
    """Output extent of a convolution, raising if it is not a positive integer."""
    eff = f + (dilation - 1) * (f - 1)
    span = size + 2 * padding - eff
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv2d: (size {size} + 2*pad {padding} - effective kernel {eff}) / stride {stride} + 1 "
            f"is not a positive integer")
    return span // stride + 1


def _im2col(xp: np.ndarray, f: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, f, f, ho, wo), dtype=xp.dtype)
    for i in range(f):
        for j in range(f):
            cols[:, :, i, j] = xp[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s]
    return cols.reshape(n, c * f * f, ho * wo)


def _col2im(cols: np.ndarray, shape, f: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, f, f, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(f):
        for j in range(f):
            out[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation with optional holes between kernel taps.

    Args:
        x: Input of shape (N, Cin, H, W).
        kernel: Weights of shape (Cout, Cin, f, f).
        bias: Optional per-output-channel offsets, shape (Cout,).
        stride: Step between output samples.
        padding: Zero padding added to each spatial border.
        dilation: Spacing between kernel taps; 1 is a dense kernel.

    Returns:
        Tensor of shape (N, Cout, Ho, Wo).
    """
    _check4(x, "conv2d")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d kernel must be (Cout, Cin, f, f), got {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, f, _ = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride and dilation must be >= 1, padding >= 0")
    ho = conv_output_size(h, f, stride, padding, dilation)
    wo = conv_output_size(w, f, stride, padding, dilation)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, f, dilation, stride, ho, wo)
    wmat = kernel.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gxp = _col2im(gcols, xp.shape, f, dilation, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2), dtype=np.float64)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward, "conv2d")


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transpose convolution, the adjoint of a strided :func:`conv2d`.

    ``kernel`` has shape (Cin, Cout, k, k), matching the weight of the
    forward convolution that maps Cout channels down to Cin. Output extent
    is ``(H - 1) * stride + k``, i.e. ``stride * H`` for the usual ``k == stride``.
    """
    _check4(x, "conv2d_transpose")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d_transpose kernel must be (Cin, Cout, k, k), got {kernel.shape}")
    n, cin, h, w = x.shape
    kcin, cout, k, _ = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d_transpose: input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d_transpose: bias shape {bias.shape} does not match {cout} channels")
    if stride < 1:
        raise ConfigurationError("conv2d_transpose: stride must be >= 1")
    ho, wo = (h - 1) * stride + k, (w - 1) * stride + k

    # adjoint of conv2d: scatter the columns W^T x back onto the output grid
    wmat = kernel.data.reshape(cin, cout * k * k)
    cols = np.matmul(wmat.T, x.data.reshape(n, cin, h * w))
    out = _col2im(cols, (n, cout, ho, wo), k, 1, stride, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = gk = gb = None
        gcols = _im2col(g, k, 1, stride, h, w)
        if x.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(x.shape)
        if kernel.requires_grad:
            gk = np.matmul(x.data.reshape(n, cin, h * w), gcols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward, "conv2d_transpose")


# ---------------------------------------------------------------------------
# pooling and resizing
# ---------------------------------------------------------------------------

def _pool_windows(x: Tensor, window: int, stride: int, name: str):
    _check4(x, name)
    if window < 1 or stride < 1:
        raise ConfigurationError(f"{name}: window and stride must be positive")
    h, w = x.shape[2:]
    if window > h or window > w:
        raise ConfigurationError(f"{name}: window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win[:, :, :ho, :wo], ho, wo


def max_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-window maximum; ties send the gradient to the first row-major element."""
    win, ho, wo = _pool_windows(x, window, stride, "max_pool2d")
    flat = win.reshape(*win.shape[:4], window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for t in range(window * window):
            i, j = divmod(t, window)
            hit = arg == t
            if hit.any():
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * hit
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-window mean; the gradient is spread as ``1 / window**2``."""
    win, ho, wo = _pool_windows(x, window, stride, "avg_pool2d")
    out = win.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)
    scale = 1.0 / (window * window)

    def backward(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(window):
            for j in range(window):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gs
        return (gx,)

    return _make(out, (x,), backward, "avg_pool2d")


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    t = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - t)
    np.add.at(m, (rows, hi), t)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with corner-aligned sampling (identity at equal size)."""
    _check4(x, "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize_bilinear: target {out_h}x{out_w} must be positive")
    h, w = x.shape[2:]
    ry = interpolation_matrix(h, out_h).astype(x.dtype)
    rx = interpolation_matrix(w, out_w).astype(x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _make(out, (x,), backward, "resize_bilinear")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[Tensor], Tensor], x, eps: float = 1e-3,
               indices: Optional[Sequence[int]] = None) -> float:
    """Compare reverse-mode gradients with central finite differences.

    The input is promoted to float64 so the differences are not swamped by
    rounding. Returns the maximum over checked coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    Args:
        fn: Maps a tensor shaped like ``x`` to a scalar tensor.
        x: Point at which to differentiate.
        eps: Finite-difference step.
        indices: Flat coordinates to check; all of them when omitted.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    fn(probe).backward()
    analytic = probe.grad.reshape(-1)
    idx = range(base.size) if indices is None else indices
    worst = 0.0
    for k in idx:
        shifted = base.copy().reshape(-1)
        shifted[k] += eps
        up = fn(Tensor(shifted.reshape(base.shape), dtype=np.float64)).item()
        shifted[k] -= 2 * eps
        down = fn(Tensor(shifted.reshape(base.shape), dtype=np.float64)).item()
        numeric = (up - down) / (2 * eps)
        a = float(analytic[k])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# .qat container
# ---------------------------------------------------------------------------

QAT_MAGIC = b"QAPT"
_QAT_HEADER = struct.Struct("<4s5I")


def qat_bytes(array) -> bytes:
    """Serialise a rank-4 float array as a ``.qat`` blob."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.ndim != 4:
        raise DimensionError(f".qat stores rank-4 arrays only, got shape {arr.shape}")
    return _QAT_HEADER.pack(QAT_MAGIC, 4, *arr.shape) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def parse_qat(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one ``.qat`` blob at ``offset``; returns (array, end offset)."""
    if len(buf) - offset < _QAT_HEADER.size:
        raise FormatError(f".qat header truncated at byte {offset}: need {_QAT_HEADER.size} bytes, "
                          f"have {len(buf) - offset}")
    magic, rank, *shape = _QAT_HEADER.unpack_from(buf, offset)
    if magic != QAT_MAGIC:
        raise FormatError(f"bad .qat magic {magic!r} at byte {offset}")
    if rank != 4:
        raise FormatError(f".qat rank {rank} at byte {offset + 4} (only 4 is valid)")
    start = offset + _QAT_HEADER.size
    nbytes = 4 * int(np.prod(shape))
    if len(buf) - start < nbytes:
        raise FormatError(f".qat payload truncated at byte {start}: expected {nbytes} bytes, "
                          f"got {len(buf) - start}")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
    return arr.astype(np.float32), start + nbytes


def save_qat(path, array) -> None:
    Path(path).write_bytes(qat_bytes(array))


def load_qat(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = parse_qat(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after .qat payload at byte {end}")
    return arr
