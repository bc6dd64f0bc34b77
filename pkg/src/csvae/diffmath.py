"""Dense-tensor numeric core with reverse-mode gradients.

Covers exactly the operation set the encoder/decoder stacks and the
training losses need: valid 2D convolution, strided transposed
convolution, batch normalization, affine layers, pointwise
nonlinearities, reductions, and row gathers.  Everything runs on numpy
arrays; each traced op appends a closure to an implicit tape that
``backward`` walks in reverse topological order.

Float32 is the working precision.  Gradient tests switch to float64
through ``use_dtype("float64")``.  Every op checks its output for
NaN/Inf and raises ``NumericsError`` so divergence surfaces at the op
that produced it.
"""

from __future__ import annotations

import contextlib

import numpy as np


class DiffMathError(Exception):
    """Base class for numeric-core failures."""


class ShapeError(DiffMathError):
    """Operands have incompatible shapes."""


class NumericsError(DiffMathError):
    """An op produced NaN or Inf."""


class DegenerateBatchError(DiffMathError):
    """Batch statistics requested on a batch of fewer than 2 samples."""


class GradientContractError(DiffMathError):
    """backward() called on a non-scalar value."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype or _DEFAULT_DTYPE)
    elif dtype is not None and arr.dtype != np.dtype(dtype):
        arr = arr.astype(dtype)
    return arr


class Tensor:
    """A numpy array plus the tape hooks needed for reverse mode.

    ``data`` is row-major; ``grad`` is allocated lazily for
    intermediates and eagerly (zero-filled) for ``Parameter``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward_fn=None):
        self.data = _coerce(data, dtype)
        _check_finite(self.data, "tensor data")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; the functional forms below do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable tensor; its gradient buffer always exists and matches shape."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, shape)) if want == 1 and got != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward_fn, what) -> Tensor:
    _check_finite(data, what)
    tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into ``.grad`` buffers.

    Repeated calls without zeroing accumulate, matching the usual
    gradient-accumulation contract.
    """
    if loss.data.size != 1:
        raise GradientContractError(f"backward requires a scalar, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# pointwise / arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "add output")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "sub output")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "mul output")


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(t.data)

    def backward_fn(g):
        if t.requires_grad:
            _accumulate(t, g * out_data)

    return _make(out_data, (t,), backward_fn, "exp output")


def log(t: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(t.data)

    def backward_fn(g):
        if t.requires_grad:
            _accumulate(t, g / t.data)

    return _make(out_data, (t,), backward_fn, "log output")


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(t.data, lo, hi)

    def backward_fn(g):
        if t.requires_grad:
            mask = (t.data >= lo) & (t.data <= hi)
            _accumulate(t, g * mask)

    return _make(out_data, (t,), backward_fn, "clamp output")


def relu(t) -> Tensor:
    t = _as_tensor(t)
    out_data = np.maximum(t.data, 0)

    def backward_fn(g):
        if t.requires_grad:
            _accumulate(t, g * (t.data > 0))

    return _make(out_data, (t,), backward_fn, "relu output")


def sigmoid(t) -> Tensor:
    t = _as_tensor(t)
    x = t.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        if t.requires_grad:
            _accumulate(t, g * out_data * (1.0 - out_data))

    return _make(out_data, (t,), backward_fn, "sigmoid output")


# ---------------------------------------------------------------------------
# reductions / shaping / gathers
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(t: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, t.data.ndim)
    out_data = t.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not t.requires_grad:
            return
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        _accumulate(t, np.broadcast_to(g, t.data.shape).copy())

    return _make(out_data, (t,), backward_fn, "sum output")


def tmean(t: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, t.data.ndim)
    count = int(np.prod([t.data.shape[a] for a in axes])) if axes else 1
    out_data = t.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not t.requires_grad:
            return
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        _accumulate(t, np.broadcast_to(g, t.data.shape) / count)

    return _make(out_data, (t,), backward_fn, "mean output")


def reshape(t: Tensor, shape) -> Tensor:
    in_shape = t.data.shape
    out_data = t.data.reshape(shape)

    def backward_fn(g):
        if t.requires_grad:
            _accumulate(t, g.reshape(in_shape))

    return _make(out_data, (t,), backward_fn, "reshape output")


def index_rows(t: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; scatter-adds the gradient back."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= t.data.shape[0]):
        raise ShapeError(
            f"row index out of range: [{idx.min()}, {idx.max()}] for axis of {t.data.shape[0]}"
        )
    out_data = t.data[idx]

    def backward_fn(g):
        if t.requires_grad:
            scatter = np.zeros_like(t.data)
            np.add.at(scatter, idx, g)
            _accumulate(t, scatter)

    return _make(out_data, (t,), backward_fn, "index_rows output")


# ---------------------------------------------------------------------------
# affine / convolution
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight.T + bias for x of shape (B, n), weight (m, n), bias (m,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2D input/weight, got {x.data.shape}/{weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"linear inner-dim mismatch: {x.data.shape} vs {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"linear bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
    out_data = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            _accumulate(weight, g.T @ x.data)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _make(out_data, (x, weight, bias), backward_fn, "linear output")


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(B,C,H,W) -> (B, C*k*k, Ho*Wo) patch matrix (copies)."""
    b, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, k, k, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(b, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int) -> np.ndarray:
    """Scatter-add the patch matrix back onto the input grid."""
    b, c, h, w = x_shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols6 = cols.reshape(b, c, k, k, ho, wo)
    x = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(k):
        hi = i + stride * (ho - 1) + 1
        for j in range(k):
            wj = j + stride * (wo - 1) + 1
            x[:, :, i:hi:stride, j:wj:stride] += cols6[:, :, i, j]
    return x


def conv2d_valid(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with zero padding ("valid"), square kernel.

    x: (B, Cin, H, W); weight: (Cout, Cin, k, k); bias: (Cout,).
    Output spatial size: floor((H - k) / stride) + 1.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and weight")
    b, cin, h, w = x.data.shape
    cout, cin_w, k, k2 = weight.data.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin} vs weight {cin_w}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.data.shape} != ({cout},)")
    if h < k or w < k:
        raise ShapeError(f"conv2d input {h}x{w} smaller than kernel {k}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")

    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = _im2col(x.data, k, stride)  # (B, Cin*k*k, L)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)  # (B, Cout, L)
    out += bias.data.reshape(1, cout, 1)
    out_data = out.reshape(b, cout, ho, wo)

    def backward_fn(g):
        g2 = g.reshape(b, cout, ho * wo)
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))  # (Cout, Cin*k*k)
            _accumulate(weight, gw.reshape(weight.data.shape))
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)  # (B, Cin*k*k, L)
            _accumulate(x, _col2im(gcols, x.data.shape, k, stride))

    return _make(out_data, (x, weight, bias), backward_fn, "conv2d output")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Gradient-of-convolution upsampling (no output padding).

    x: (B, Cin, H, W); weight: (Cin, Cout, k, k); bias: (Cout,).
    Output spatial size: (H - 1) * stride + k.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv_transpose2d expects rank-4 input and weight")
    b, cin, h, w = x.data.shape
    cin_w, cout, k, k2 = weight.data.shape
    if k != k2:
        raise ShapeError(f"conv_transpose2d kernel must be square, got {k}x{k2}")
    if cin != cin_w:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {cin} vs weight {cin_w}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv_transpose2d bias shape {bias.data.shape} != ({cout},)")
    if stride < 1:
        raise ShapeError(f"conv_transpose2d stride must be >= 1, got {stride}")

    ho = (h - 1) * stride + k
    wo = (w - 1) * stride + k
    x2 = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, cin)
    w2 = weight.data.reshape(cin, cout * k * k)
    prod = (x2 @ w2).reshape(b, h, w, cout, k, k).transpose(0, 3, 4, 5, 1, 2)
    out_data = np.zeros((b, cout, ho, wo), dtype=x.data.dtype)
    for i in range(k):
        hi = i + stride * (h - 1) + 1
        for j in range(k):
            wj = j + stride * (w - 1) + 1
            out_data[:, :, i:hi:stride, j:wj:stride] += prod[:, :, i, j]
    out_data += bias.data.reshape(1, cout, 1, 1)

    def backward_fn(g):
        # patches of g seen from each input position
        sb, sc, sh, sw = g.strides
        gview = np.lib.stride_tricks.as_strided(
            g,
            shape=(b, cout, k, k, h, w),
            strides=(sb, sc, sh, sw, sh * stride, sw * stride),
            writeable=False,
        )
        if x.requires_grad:
            gx = np.tensordot(gview, weight.data, axes=([1, 2, 3], [1, 2, 3]))  # (B,H,W,Cin)
            _accumulate(x, gx.transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = np.tensordot(x.data, gview, axes=([0, 2, 3], [0, 4, 5]))  # (Cin,Cout,k,k)
            _accumulate(weight, gw)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _make(out_data, (x, weight, bias), backward_fn, "conv_transpose2d output")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class RunningStats:
    """Exponential-moving running mean/variance buffers for one BN layer."""

    __slots__ = ("mean", "var")

    def __init__(self, num_features: int, dtype=None):
        dt = dtype or _DEFAULT_DTYPE
        self.mean = np.zeros(num_features, dtype=dt)
        self.var = np.ones(num_features, dtype=dt)


def batchnorm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    stats: RunningStats,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Normalize per channel (rank-4 input) or per feature (rank-2 input).

    Train mode uses batch statistics and updates ``stats`` in place;
    eval mode reads ``stats`` and leaves them untouched.
    """
    if x.data.ndim == 4:
        axes = (0, 2, 3)
        nf = x.data.shape[1]
        bshape = (1, nf, 1, 1)
    elif x.data.ndim == 2:
        axes = (0,)
        nf = x.data.shape[1]
        bshape = (1, nf)
    else:
        raise ShapeError(f"batchnorm expects rank-2 or rank-4 input, got rank {x.data.ndim}")
    if scale.data.shape != (nf,) or shift.data.shape != (nf,):
        raise ShapeError(f"batchnorm scale/shift must have shape ({nf},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    gamma = scale.data.reshape(bshape)
    beta = shift.data.reshape(bshape)

    if mode == "train":
        if x.data.shape[0] < 2:
            raise DegenerateBatchError("batchnorm in train mode needs batch size >= 2")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out_data = gamma * xhat + beta

        n = int(np.prod([x.data.shape[a] for a in axes]))
        unbiased = var.reshape(nf) * (n / max(n - 1, 1))
        stats.mean *= 1.0 - momentum
        stats.mean += momentum * mu.reshape(nf)
        stats.var *= 1.0 - momentum
        stats.var += momentum * unbiased

        def backward_fn(g):
            if scale.requires_grad:
                _accumulate(scale, (g * xhat).sum(axis=axes))
            if shift.requires_grad:
                _accumulate(shift, g.sum(axis=axes))
            if x.requires_grad:
                gh = g * gamma
                gx = inv * (
                    gh
                    - gh.mean(axis=axes, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=axes, keepdims=True)
                )
                _accumulate(x, gx)

    else:
        mu = stats.mean.reshape(bshape)
        inv = 1.0 / np.sqrt(stats.var.reshape(bshape) + eps)
        xhat = (x.data - mu) * inv
        out_data = gamma * xhat + beta

        def backward_fn(g):
            if scale.requires_grad:
                _accumulate(scale, (g * xhat).sum(axis=axes))
            if shift.requires_grad:
                _accumulate(shift, g.sum(axis=axes))
            if x.requires_grad:
                _accumulate(x, g * gamma * inv)

    return _make(out_data, (x, scale, shift), backward_fn, "batchnorm output")
