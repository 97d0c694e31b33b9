"""Dense float64 tensors with reverse-mode automatic differentiation.

Small eager engine in the micrograd tradition: every primitive builds its
output eagerly in numpy and attaches a backward closure.  ``backward()``
linearizes the graph reachable from a scalar loss into a :class:`Tape`
(topological order) and replays it in reverse, accumulating gradients
into ``.grad`` buffers.

Everything is float64.  The engine exists to be verifiable, not fast:
tolerances like 1e-5 in gradient checks are only meaningful in double
precision.
"""

import numpy as np

MAX_RANK = 4
NORM_EPS = 1e-5
LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class AutodiffError(RuntimeError):
    """Raised on misuse of the backward machinery."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording.

    Used for the teacher branch (pseudo-labels are fixed targets) and for
    evaluation passes.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense rank-<=4 float64 array with an attached gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
        if any(e == 0 for e in arr.shape):
            raise ShapeError(f"zero extent in shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tensor data contains non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        """Copy with no graph history; gradients never flow through it."""
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the real implementations are module functions.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def make_op(data, parents, backward_fn):
    """Wrap a primitive result, recording the backward closure.

    ``backward_fn(grad_out)`` must push gradient contributions into the
    parents via :func:`accumulate`.  Recording is skipped when no parent
    requires a gradient or when inside :class:`no_grad`.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def accumulate(t: Tensor, g: np.ndarray):
    """Add a gradient contribution to ``t`` (no-op for detached tensors)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


class Tape:
    """Linearization of the graph reachable from one output tensor.

    ``nodes`` is topologically ordered: every tensor appears after all
    producers of its inputs, so a single reverse sweep visits each
    gradient contribution exactly once.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(nodes)


def backward(loss: Tensor):
    """Reverse sweep from a scalar loss; accumulates into ``.grad``.

    A given loss tensor can be swept only once; rebuild the graph (or use
    a fresh loss) before calling again.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise AutodiffError("backward already ran for this loss; rebuild the graph first")
    loss._done = True
    tape = Tape.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node is not loss:
                # Intermediate grads are never read again; free them early.
                node.grad = None


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, e in enumerate(shape) if e == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return make_op(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return make_op(data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def bw(g):
        accumulate(a, g * s)

    return make_op(data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0.0
    data = np.where(keep, a.data, 0.0)

    def bw(g):
        accumulate(a, g * keep)

    return make_op(data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        accumulate(a, g.reshape(a.data.shape))

    return make_op(data, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return make_op(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return make_op(data, (a, b), bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully-connected map ``x @ w + b`` for x of shape (N, F)."""
    if x.data.ndim != 2:
        raise ShapeError(f"affine expects rank-2 input, got {x.shape}")
    if w.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"affine weight rows {w.shape} do not match input features {x.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"affine bias shape {b.shape} does not match weight cols {w.shape}")
    return add(matmul(x, w), b)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        accumulate(a, data * (g - dot))

    return make_op(data, (a,), bw)


def clamp_log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """ln(max(a, eps)); gradient is zero inside the clamped region."""
    clamped = np.maximum(a.data, eps)
    data = np.log(clamped)
    live = a.data > eps

    def bw(g):
        accumulate(a, np.where(live, g / clamped, 0.0))

    return make_op(data, (a,), bw)


def cross_entropy(target: Tensor, pred: Tensor) -> Tensor:
    """-sum_c target_c * ln(max(pred_c, eps)) for distributions over C.

    ``pred`` must already be a probability vector (softmax output);
    gradients flow to the logits upstream of it.
    """
    if target.data.ndim != 1 or pred.data.ndim != 1:
        raise ShapeError("cross_entropy expects rank-1 distributions")
    if target.data.shape != pred.data.shape:
        raise ShapeError(
            f"class count mismatch: target {target.shape} vs pred {pred.shape}"
        )
    _check_distribution(pred.data, "pred")
    _check_target(target.data)
    return scale(tsum(mul(target, clamp_log(pred))), -1.0)


def cross_entropy_rows(targets: Tensor, preds: Tensor) -> Tensor:
    """Row-wise cross entropy for (N, C) target/pred batches -> (N,)."""
    if targets.data.shape != preds.data.shape or targets.data.ndim != 2:
        raise ShapeError(
            f"batched cross entropy expects matching (N, C), got {targets.shape} vs {preds.shape}"
        )
    for i in range(preds.data.shape[0]):
        _check_distribution(preds.data[i], f"pred row {i}")
        _check_target(targets.data[i])
    return scale(tsum(mul(targets, clamp_log(preds)), axis=1), -1.0)


def _check_distribution(p: np.ndarray, what: str):
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError(f"{what} does not sum to 1 (got {p.sum():.12g})")


def _check_target(t: np.ndarray):
    if (t < 0).any():
        raise ValueError("target has negative entries")
    if abs(float(t.sum()) - 1.0) > 1e-9:
        raise ValueError(f"target does not sum to 1 (got {t.sum():.12g})")


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, k, k, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    # (N, C*k*k, OH*OW)
    return view.reshape(n, c * k * k, oh * ow).copy(), oh, ow


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    out = np.zeros((n, c, hp, wp))
    cols = cols.reshape(n, c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols[
                :, :, ki, kj
            ]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding over NCHW input.

    Kernel layout is (C_out, C_in, k, k); output spatial extents are
    floor((H + 2*pad - k) / stride) + 1.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4 (N,C,H,W), got {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4 (F,C,k,k), got {w.shape}")
    n, c, h, wd = x.data.shape
    f, cin, k1, k2 = w.data.shape
    if k1 != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k1}x{k2}")
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input C={c}, kernel C_in={cin}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be positive, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d pad must be non-negative, got {pad}")
    if k1 > h + 2 * pad or k1 > wd + 2 * pad:
        raise ShapeError(
            f"conv2d kernel {k1} exceeds padded input {h + 2 * pad}x{wd + 2 * pad}"
        )
    if not np.isfinite(x.data).all():
        raise ValueError("conv2d input contains non-finite values")

    k = k1
    cols, oh, ow = _im2col(x.data, k, stride, pad)
    wm = w.data.reshape(f, c * k * k)
    out = np.matmul(wm[None, :, :], cols).reshape(n, f, oh, ow)

    def bw(g):
        gm = g.reshape(n, f, oh * ow)
        if w.requires_grad:
            gw = np.einsum("nfp,ncp->fc", gm, cols).reshape(f, c, k, k)
            accumulate(w, gw)
        if x.requires_grad:
            gcols = np.matmul(wm.T[None, :, :], gm)
            accumulate(x, _col2im(gcols, x.data.shape, k, stride, pad))

    return make_op(out, (x, w), bw)


def instance_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize each (sample, channel) plane by its own spatial statistics.

    Statistics are computed on the fly (no learned running averages), so a
    sample's output never depends on the rest of the batch.  Degenerate
    planes with fewer than 2 elements pass through unchanged.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"instance_normalize expects rank-4 input, got {x.shape}")
    n, c, h, w = x.data.shape
    m = h * w
    if m < 2:
        return scale(x, 1.0)
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bw(g):
        gsum = g.sum(axis=(2, 3), keepdims=True)
        gdot = (g * xhat).sum(axis=(2, 3), keepdims=True)
        accumulate(x, inv * (g - gsum / m - xhat * gdot / m))

    return make_op(xhat, (x,), bw)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift for NCHW input; gamma/beta are (C,)."""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_affine expects rank-4 input, got {x.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"channel_affine params must be ({c},), got {gamma.shape} and {beta.shape}"
        )
    g4 = gamma.data[None, :, None, None]
    data = x.data * g4 + beta.data[None, :, None, None]

    def bw(g):
        accumulate(x, g * g4)
        accumulate(gamma, (g * x.data).sum(axis=(0, 2, 3)))
        accumulate(beta, g.sum(axis=(0, 2, 3)))

    return make_op(data, (x, gamma, beta), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank-4 input, got {x.shape}")
    n, c, h, w = x.data.shape
    m = h * w
    data = x.data.mean(axis=(2, 3))

    def bw(g):
        accumulate(x, np.broadcast_to(g[:, :, None, None] / m, x.data.shape).copy())

    return make_op(data, (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, params, tol: float = 1e-5, h: float = 1e-5):
    """Compare tape gradients against central finite differences.

    ``f()`` must rebuild the forward pass from scratch (all randomness
    frozen) and return a scalar loss Tensor.  Returns a report dict with
    per-parameter maximum relative error and an overall pass flag.

    The relative-error denominator is floored at 1e-4 so that parameters
    with near-zero true gradients are judged on an absolute scale of
    tol * 1e-4 instead of amplifying finite-difference roundoff.
    """
    ref = f()
    again = f()
    if not np.array_equal(ref.data, again.data):
        raise AutodiffError("non-deterministic forward: two identical calls disagree")

    zero_grads(params)
    backward(f())
    tape_grads = []
    for p in params:
        tape_grads.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())

    report = {"per_param": {}, "tol": tol, "passed": True, "max_rel_err": 0.0}
    for idx, p in enumerate(params):
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fdflat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = f().item()
            flat[i] = orig - h
            lm = f().item()
            flat[i] = orig
            fdflat[i] = (lp - lm) / (2.0 * h)
        tg = tape_grads[idx]
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(tg)), 1e-4)
        rel = float(np.max(np.abs(fd - tg) / denom)) if fd.size else 0.0
        report["per_param"][idx] = rel
        report["max_rel_err"] = max(report["max_rel_err"], rel)
    report["passed"] = report["max_rel_err"] <= tol
    return report
