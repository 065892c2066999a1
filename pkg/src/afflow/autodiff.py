"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: every operation records its parents and a
closure that routes the output gradient back to them. ``backward`` walks
the tape once in reverse topological order. No graph reuse, no higher-order
derivatives.
"""

from __future__ import annotations

import contextlib
import ctypes
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

LEAKY_SLOPE = 0.2

_grad_enabled = True
_fill_pool: ThreadPoolExecutor | None = None


def _worker_count() -> int:
    cap = os.environ.get("AFFLOW_THREADS")
    workers = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(workers, 4))


def _pool() -> ThreadPoolExecutor:
    global _fill_pool
    if _fill_pool is None:
        _fill_pool = ThreadPoolExecutor(max_workers=_worker_count())
    return _fill_pool


def _tune_glibc_malloc():
    # glibc munmaps buffers >32MB on free, so conv workspaces page-fault on
    # every step; keep large blocks on the heap and stop trimming it.
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 256 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def _tune_blas_threads():
    # the dgemms here are too small to gain from OpenBLAS threading; its
    # sync overhead costs ~30% per training step on a 2-core box. Threads go
    # to the im2col fills instead (capped by AFFLOW_THREADS).
    if os.environ.get("OPENBLAS_NUM_THREADS"):
        return
    import glob
    import numpy.linalg  # ensure BLAS is loaded

    candidates = []
    for root in np.__path__:
        candidates += glob.glob(os.path.join(root, "..", "numpy.libs", "*openblas*"))
    for path in candidates:
        try:
            lib = ctypes.CDLL(path)
        except OSError:
            continue
        for sym in ("scipy_openblas_set_num_threads64_", "scipy_openblas_set_num_threads",
                    "openblas_set_num_threads64_", "openblas_set_num_threads"):
            fn = getattr(lib, sym, None)
            if fn is not None:
                fn(1)
                return


_tune_glibc_malloc()
_tune_blas_threads()


@contextlib.contextmanager
def no_grad():
    """Skip tape construction inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array, optionally participating in gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got {self.data.shape}")
        return float(self.data.reshape(()))

    # arithmetic sugar; plain numbers are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def backward(self):
        """Populate ``grad`` on every requires_grad leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward already ran on this tensor; rebuild the graph first")
        self._backward_done = True

        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _toposort(root: Tensor):
    """Iterative post-order DFS; training graphs are too deep for recursion."""
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return topo


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    # grads are never mutated in place, so sharing g between tensors is safe
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# pointwise binary


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    if not np.all(np.abs(b.data) > 0.0):
        raise ValueError(f"div: denominator contains {int(np.sum(b.data == 0.0))} zero entries")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


# ---------------------------------------------------------------------------
# unary


def log(a: Tensor) -> Tensor:
    if not np.all(a.data > 0.0):
        raise ValueError(f"log: {int(np.sum(a.data <= 0.0))} non-positive entries")

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # stable for both signs
    z = np.exp(-np.abs(a.data))
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)

    def backward(g):
        _accumulate(a, g * factor)

    return _make(a.data * factor, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward(g):
        _accumulate(a, g * sign)

    return _make(np.abs(a.data), (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(ax % ndim for ax in axes))
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate reduction axes {axes}")
    return axes


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)

    def backward(g):
        g_exp = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g_exp, a.data.shape))

    return _make(a.data.sum(axis=axes), (a,), backward)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]

    def backward(g):
        g_exp = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g_exp / count, a.data.shape))

    return _make(a.data.mean(axis=axes), (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if not p.requires_grad:
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            _accumulate(p, g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _make(a.data[idx].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(data: np.ndarray, k: int) -> np.ndarray:
    """(N,C,H,W) -> (C*k*k, N*H*W) patch matrix for a same-padded conv."""
    n, c, h, w = data.shape
    pad = k // 2
    padded = np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, n, h, w))

    def fill(offset):
        dy, dx = offset
        cols[:, dy, dx] = padded[:, :, dy:dy + h, dx:dx + w].transpose(1, 0, 2, 3)

    offsets = [(dy, dx) for dy in range(k) for dx in range(k)]
    if cols.nbytes > (4 << 20) and _worker_count() > 1:
        # np.copyto releases the GIL; destinations are disjoint
        list(_pool().map(fill, offsets))
    else:
        for offset in offsets:
            fill(offset)
    return cols.reshape(c * k * k, n * h * w)


def _conv_raw(cols: np.ndarray, w_mat: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    co = w_mat.shape[0]
    out = np.matmul(w_mat, cols).reshape(co, n, h, w)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 2-D convolution, NCHW input and OIkk kernel."""
    n, c, h, wd = x.data.shape
    co, ci, kh, kw = w.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be odd square, got {kh}x{kw}")
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {ci}")
    if bias.data.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({co},)")

    if kh == 1:
        # plain channel mix; avoids the im2col copy
        x_mat = x.data.reshape(n, c, h * wd)
        w_mat = w.data.reshape(co, ci)
        out = np.matmul(w_mat, x_mat).reshape(n, co, h, wd)

        def backward(g):
            g_mat = g.reshape(n, co, h * wd)
            if x.requires_grad:
                _accumulate(x, np.matmul(w_mat.T, g_mat).reshape(n, c, h, wd))
            if w.requires_grad:
                dw = np.einsum("nop,ncp->oc", g_mat, x_mat, optimize=True)
                _accumulate(w, dw.reshape(co, ci, 1, 1))
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))

        return _make(out + bias.data.reshape(1, co, 1, 1), (x, w, bias), backward)

    cols = _im2col(x.data, kh)
    w_mat = w.data.reshape(co, c * kh * kw)
    out = _conv_raw(cols, w_mat, n, h, wd)
    out += bias.data.reshape(1, co, 1, 1)

    def backward(g):
        if w.requires_grad or x.requires_grad:
            g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * h * wd)
        if w.requires_grad:
            _accumulate(w, np.matmul(g_mat, cols.T).reshape(co, c, kh, kw))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            # input grad is the same-padded conv of g with the flipped,
            # in/out-transposed kernel
            w_flip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            _accumulate(x, _conv_raw(_im2col(g, kh),
                                     np.ascontiguousarray(w_flip).reshape(c, co * kh * kw),
                                     n, h, wd))

    return _make(out, (x, w, bias), backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: extents must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        _accumulate(x, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def logabsdet(w: Tensor) -> Tensor:
    """log|det W| of a square matrix; gradient is inv(W)^T."""
    if w.data.ndim != 2 or w.data.shape[0] != w.data.shape[1]:
        raise ValueError(f"logabsdet: expected square matrix, got {w.data.shape}")
    sign, ld = np.linalg.slogdet(w.data)
    if sign == 0 or ld < np.log(1e-12):
        raise ValueError("logabsdet: matrix is numerically singular")

    def backward(g):
        _accumulate(w, g * np.linalg.inv(w.data).T)

    return _make(ld, (w,), backward)
