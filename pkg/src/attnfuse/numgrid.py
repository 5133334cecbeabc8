"""Dense rank-4 tensors with reverse-mode automatic differentiation.

The operation set is exactly what the attention-fusion network needs:
2-d convolution, elementwise arithmetic, non-overlapping average
pooling, nearest-neighbour upsampling, channel concatenation/splitting,
per-pixel channel softmax, per-sample min-max normalization and a mean
reduction.  Every operation records its inputs so a single call to
:func:`backward` on a scalar node fills the gradient buffers of all
reachable leaves.

Forward arithmetic is float32 by default.  float64 inputs propagate,
which lets the finite-difference harness (:func:`grad_check`) run both
the analytic and the numeric side at high precision.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Tensor extents are inconsistent with the requested operation."""


class UsageError(ValueError):
    """An operation was called outside its contract (not a shape issue)."""


_FLOAT_DTYPES = (np.float32, np.float64)

# Leaf tensors are always validated as finite on construction.  Checking
# every op output too costs ~10% of a training step, so it sits behind a
# flag that the test suite switches on.
CHECK_ALL_OPS = False


def _as_data(values, dtype=None) -> np.ndarray:
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """A [batch, channel, height, width] array node in the autodiff graph.

    Data is row-major contiguous float32 (or float64 for verification
    runs) and is immutable by convention once constructed; only the
    optimizer mutates leaf data in place.  ``grad`` is ``None`` until a
    backward pass reaches the node and accumulates across passes for
    leaves until explicitly cleared.
    """

    __slots__ = ("data", "grad", "op", "parents", "_backward")

    def __init__(self, values, op="leaf", parents=(), backward=None, dtype=None):
        arr = _as_data(values, dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4, got rank {arr.ndim}")
        if min(arr.shape) <= 0:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if (op == "leaf" or CHECK_ALL_OPS) and not np.isfinite(arr).all():
            raise ValueError(f"non-finite values in tensor produced by op '{op}'")
        self.data = arr
        self.grad = None
        self.op = op
        self.parents = parents if isinstance(parents, tuple) else tuple(parents)
        self._backward = backward

    @property
    def dims(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on non-scalar tensor of dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray, owned: bool = False) -> None:
        """Add into the gradient buffer.  ``owned`` marks ``g`` as a fresh
        array this node may take by reference instead of copying."""
        if self.grad is None:
            self.grad = g if owned else g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(dims={self.dims}, op={self.op!r})"


def tensor(values, dims=None, dtype=None) -> Tensor:
    """Build a leaf Tensor, promoting low-rank inputs to rank 4.

    A flat list becomes [1,1,1,n], a matrix [1,1,h,w], a 3-d array
    [1,c,h,w].  ``dims`` forces an explicit reshape.
    """
    arr = _as_data(values, dtype)
    if dims is not None:
        arr = arr.reshape(dims)
    elif arr.ndim < 4:
        arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
    return Tensor(arr)


def zeros(dims, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(dims, dtype=dtype))


def ones(dims, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(dims, dtype=dtype))


# ---------------------------------------------------------------------------
# graph walking


class Graph:
    """Topologically ordered view of all nodes reachable from a root."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order, seen, stack = [], set(), [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)  # inputs precede outputs

    def run_backward(self, root: Tensor) -> None:
        root.accumulate_grad(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def backward(loss: Tensor) -> None:
    """Fill gradients of every leaf reachable from a scalar loss node."""
    if loss.dims != (1, 1, 1, 1):
        raise UsageError(f"backward needs a scalar [1,1,1,1] node, got {loss.dims}")
    Graph.from_root(loss).run_backward(loss)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Column matrix (C*kh*kw, B*oh*ow) over sliding windows of xp."""
    b, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    bs, cs, hs, ws = xp.strides
    wins = as_strided(
        xp,
        (c, kh, kw, b, oh, ow),
        (cs, hs, ws, bs, hs * stride, ws * stride),
    )
    col = np.ascontiguousarray(wins).reshape(c * kh * kw, b * oh * ow)
    return col, oh, ow


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding, differentiable in all inputs.

    kernel dims are [out_channels, in_channels, kh, kw]; bias, when
    given, is a [1, out_channels, 1, 1] tensor.
    """
    if stride < 1:
        raise UsageError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise UsageError(f"padding must be non-negative, got {padding}")
    b, c, h, w = x.dims
    oc, ic, kh, kw = kernel.dims
    if ic != c:
        raise ShapeError(f"kernel expects {ic} input channels, tensor has {c}")
    if bias is not None and bias.dims != (1, oc, 1, 1):
        raise ShapeError(f"bias dims {bias.dims} != (1, {oc}, 1, 1)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv output extent non-positive: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    col, _, _ = _im2col(xp, kh, kw, stride)
    out = (kernel.data.reshape(oc, -1) @ col).reshape(oc, b, oh, ow).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g: np.ndarray) -> None:
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1), owned=True)
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, -1)
        kernel.accumulate_grad((gmat @ col.T).reshape(kernel.dims), owned=True)
        # dx: full correlation of the (stride-dilated) output grad with the
        # 180deg-rotated kernel, then crop the zero padding back off.
        if stride > 1:
            gd = np.zeros((b, oc, (oh - 1) * stride + 1, (ow - 1) * stride + 1), g.dtype)
            gd[:, :, ::stride, ::stride] = g
        else:
            gd = g
        gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        colg, lh, lw = _im2col(gp, kh, kw, 1)
        rot = kernel.data[:, :, ::-1, ::-1]
        wr = np.ascontiguousarray(rot.transpose(1, 0, 2, 3)).reshape(ic, -1)
        dx_full = (wr @ colg).reshape(ic, b, lh, lw).transpose(1, 0, 2, 3)
        hp, wp_ = h + 2 * padding, w + 2 * padding
        if (lh, lw) != (hp, wp_):
            dxp = np.zeros((b, ic, hp, wp_), g.dtype)
            dxp[:, :, :lh, :lw] = dx_full
        else:
            dxp = dx_full
        x.accumulate_grad(
            np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w]),
            owned=True)

    return Tensor(out, "conv2d", parents, bwd)


# ---------------------------------------------------------------------------
# elementwise


def _binary_check(a: Tensor, b: Tensor, kind: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{kind}: dims {a.dims} != {b.dims}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")

    def bwd(g):
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    return Tensor(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "sub")

    def bwd(g):
        a.accumulate_grad(g)
        b.accumulate_grad(-g, owned=True)

    return Tensor(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "mul")

    def bwd(g):
        a.accumulate_grad(g * b.data, owned=True)
        b.accumulate_grad(g * a.data, owned=True)

    return Tensor(a.data * b.data, "mul", (a, b), bwd)


def square(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(2.0 * a.data * g, owned=True)

    return Tensor(a.data * a.data, "square", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at exactly 0 is 0

    def bwd(g):
        a.accumulate_grad(g * mask, owned=True)

    return Tensor(np.where(mask, a.data, 0), "relu", (a,), bwd)


_ELEMENTWISE = {"add": (add, 2), "sub": (sub, 2), "mul": (mul, 2),
                "square": (square, 1), "relu": (relu, 1)}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch on kind in {add, sub, mul, square, relu}."""
    if kind not in _ELEMENTWISE:
        raise UsageError(f"unknown elementwise kind {kind!r}")
    fn, arity = _ELEMENTWISE[kind]
    if arity == 2:
        if b is None:
            raise UsageError(f"elementwise {kind!r} needs two operands")
        return fn(a, b)
    if b is not None:
        raise UsageError(f"elementwise {kind!r} takes one operand")
    return fn(a)


# ---------------------------------------------------------------------------
# resampling


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping window mean; extents must divide exactly."""
    if window < 1:
        raise UsageError(f"pool window must be positive, got {window}")
    b, c, h, w = x.dims
    if h % window or w % window:
        raise ShapeError(f"extents {h}x{w} not divisible by window {window}")
    if window == 1:
        def bwd1(g):
            x.accumulate_grad(g)
        return Tensor(x.data, "avg_pool2d", (x,), bwd1)
    oh, ow = h // window, w // window
    out = x.data.reshape(b, c, oh, window, ow, window).mean(axis=(3, 5))

    def bwd(g):
        spread = np.repeat(np.repeat(g, window, axis=2), window, axis=3)
        x.accumulate_grad(spread * (1.0 / (window * window)), owned=True)

    return Tensor(out, "avg_pool2d", (x,), bwd)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; gradient sums the replicas."""
    if factor < 1:
        raise UsageError(f"upsample factor must be positive, got {factor}")
    if factor == 1:
        def bwd1(g):
            x.accumulate_grad(g)
        return Tensor(x.data, "nearest_upsample", (x,), bwd1)
    b, c, h, w = x.dims
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bwd(g):
        x.accumulate_grad(g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)), owned=True)

    return Tensor(out, "nearest_upsample", (x,), bwd)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise UsageError("concat_channels needs at least one part")
    b, _, h, w = parts[0].dims
    for p in parts[1:]:
        pb, _, ph, pw = p.dims
        if (pb, ph, pw) != (b, h, w):
            raise ShapeError(f"concat part dims {p.dims} incompatible with {parts[0].dims}")
    sizes = [p.dims[1] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            p.accumulate_grad(g[:, lo:hi])

    return Tensor(np.concatenate([p.data for p in parts], axis=1),
                  "concat_channels", tuple(parts), bwd)


def split_channels(x: Tensor, sizes) -> list[Tensor]:
    """Inverse of concat_channels; each slice is independently differentiable."""
    if sum(sizes) != x.dims[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.dims[1]} channels")
    outs, lo = [], 0
    for n in sizes:
        lo_, hi_ = lo, lo + n

        def bwd(g, lo=lo_, hi=hi_):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, lo:hi] += g

        outs.append(Tensor(np.ascontiguousarray(x.data[:, lo_:hi_]),
                           "split_channels", (x,), bwd))
        lo += n
    return outs


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax across channels, stabilized by max subtraction."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        x.accumulate_grad(s * (g - inner), owned=True)

    return Tensor(s, "softmax_channels", (x,), bwd)


def minmax_normalize(x: Tensor) -> Tensor:
    """Per-sample linear rescale of [min, max] onto [0, 1].

    min and max are treated as constants for gradient purposes; an
    exactly constant sample maps to all zeros.
    """
    lo = x.data.min(axis=(1, 2, 3), keepdims=True)
    hi = x.data.max(axis=(1, 2, 3), keepdims=True)
    rng = hi - lo
    ok = rng > 0
    safe = np.where(ok, rng, 1)
    out = np.where(ok, (x.data - lo) / safe, 0)

    def bwd(g):
        x.accumulate_grad(np.where(ok, g / safe, 0), owned=True)

    return Tensor(out, "minmax_normalize", (x,), bwd)


def minmax01(arr: np.ndarray) -> np.ndarray:
    """Raw-array twin of minmax_normalize over the full array."""
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def reduce_mean(x: Tensor) -> Tensor:
    """Arithmetic mean of all elements as a [1,1,1,1] node."""
    n = x.size
    out = x.data.mean(dtype=np.float64).astype(x.data.dtype)

    def bwd(g):
        x.accumulate_grad(np.full(x.dims, g.reshape(-1)[0] / n, dtype=x.data.dtype),
                          owned=True)

    return Tensor(out.reshape(1, 1, 1, 1), "reduce_mean", (x,), bwd)


# ---------------------------------------------------------------------------
# parameters and optimization


class Parameter:
    """Named leaf tensor with gradient and adaptive-moment state."""

    def __init__(self, name: str, values, dtype=None):
        self.name = name
        self.tensor = values if isinstance(values, Tensor) else Tensor(values, dtype=dtype)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        if self.tensor.grad is None:
            return np.zeros_like(self.tensor.data)
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, dims={self.tensor.dims})"


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected adaptive-moment update, in place."""
    for p in params:
        g = p.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        p.tensor.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.tensor.data.dtype)


def grad_check(builder, params, eps: float = 1e-3, max_checks: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``builder`` must deterministically rebuild the scalar loss from the
    current parameter values.  The numeric side perturbs one element at
    a time; pass float64 parameters for tight comparisons.  When a
    parameter has more elements than ``max_checks``, a seeded subset is
    probed.
    """
    for p in params:
        p.zero_grad()
    backward(builder())
    analytic = [np.array(p.grad, dtype=np.float64).reshape(-1) for p in params]

    def loss_value() -> float:
        return float(builder().data.reshape(-1)[0])

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.tensor.data.reshape(-1)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        else:
            idx = range(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_value()
            flat[i] = orig - eps
            lm = loss_value()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            denom = max(1e-8, abs(ga[i]) + abs(numeric))
            worst = max(worst, abs(ga[i] - numeric) / denom)
    return worst
