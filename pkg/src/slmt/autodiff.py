"""Dense tensors with reverse-mode automatic differentiation.

The op set is exactly what a small encoder-decoder translation stack needs:
matmul, elementwise arithmetic, relu, softmax, layer norm, embedding lookup,
concat, masked mean, L2 norm, cosine similarity, dropout, scaling,
transpose/reshape and label-smoothed cross entropy. Forward values are
computed eagerly with numpy; when any input is tracked (and gradients are
enabled), the op records a backward closure so `backward(loss)` can push
gradients to every tracked tensor in one reverse topological sweep.

Broadcasting is limited to what `add`/`mul` need for biases and masks
(numpy-compatible shapes, gradients reduced back to each operand); all other
ops demand exact shapes and raise `OpError` otherwise.

Precision: every op preserves the dtype of its inputs. Verification code
(gradient checks) should run models at float64; float32 is fine for
training.
"""

import contextlib
import itertools
import math
from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-8  # added to each norm in cosine similarity
_L2_GRAD_EPS = 1e-12  # backward-only guard for the plain L2 norm
_LAYER_NORM_EPS = 1e-6

_grad_enabled = True
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class OpError(ValueError):
    """Structured op failure: carries the op kind and the offending shapes."""

    def __init__(self, kind, message, shapes=()):
        shape_note = ""
        if shapes:
            shape_note = " [shapes: " + ", ".join(str(tuple(s)) for s in shapes) + "]"
        super().__init__(f"{kind}: {message}{shape_note}")
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)


class Tensor:
    """A dense float array plus an optional gradient and graph record."""

    __slots__ = ("data", "grad", "tracked", "node_id", "_parents", "_backward_fn", "_backward_done")

    _ids = itertools.count()

    def __init__(self, data, tracked=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.tracked = bool(tracked)
        self.node_id = next(Tensor._ids)
        self._parents = ()
        self._backward_fn = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise OpError("item", "tensor is not scalar", [self.shape])
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(kind, a, b):
    if a.data.dtype != b.data.dtype:
        raise OpError(kind, f"mixed dtypes {a.data.dtype} and {b.data.dtype}", [a.shape, b.shape])


def _result(kind, data, parents, grad_fn):
    """Build the output tensor, recording the node when tracking applies.

    grad_fn maps the output gradient to a tuple of per-parent gradients
    (None for parents that need nothing).
    """
    if _grad_enabled and any(p.tracked for p in parents):
        out = Tensor(data, tracked=True)

        def _backward():
            grads = grad_fn(out.grad)
            for parent, g in zip(parents, grads):
                if parent.tracked and g is not None:
                    _accumulate(parent, g)

        out._parents = tuple(p for p in parents if p.tracked)
        out._backward_fn = _backward
        return out
    return Tensor(data)


def _accumulate(tensor, g):
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += g.astype(tensor.data.dtype, copy=False)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Run one reverse sweep from a tracked scalar loss.

    Gradients accumulate into `.grad` of every tracked tensor reachable from
    the loss; each graph node's rule runs exactly once (reverse topological
    order). Calling backward twice on the same loss is an error: rebuild the
    graph instead, so accumulation is always explicit.
    """
    if not isinstance(loss, Tensor):
        raise OpError("backward", f"loss must be a Tensor, got {type(loss).__name__}")
    if loss.data.size != 1:
        raise OpError("backward", "loss must be scalar", [loss.shape])
    if not loss.tracked:
        raise OpError("backward", "loss is not tracked; no graph was recorded")
    if loss._backward_done:
        raise OpError("backward", "backward() already ran for this loss; rebuild the graph")

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn()
    loss._backward_done = True


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    """Matrix product: (m,k)@(k,n), batched (..,m,k)@(k,n) or (..,m,k)@(..,k,n)."""
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.data.dtype)
    _check_dtypes("matmul", a, b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise OpError("matmul", "operands must have ndim >= 2", [A.shape, B.shape])
    if A.shape[-1] != B.shape[-2]:
        raise OpError("matmul", "inner dimensions do not agree", [A.shape, B.shape])
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise OpError("matmul", "batch dimensions do not agree", [A.shape, B.shape])
    out = np.matmul(A, B)

    def grad_fn(g):
        ga = gb = None
        if a.tracked:
            ga = np.matmul(g, np.swapaxes(B, -1, -2))
        if b.tracked:
            if B.ndim == 2 and A.ndim > 2:
                k = A.shape[-1]
                n = g.shape[-1]
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(A, -1, -2), g)
        return ga, gb

    return _result("matmul", out, (a, b), grad_fn)


def add(a, b):
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.data.dtype)
    _check_dtypes("add", a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise OpError("add", "shapes are not broadcast-compatible", [a.shape, b.shape]) from None
    out = a.data + b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if a.tracked else None,
                _unbroadcast(g, b.shape) if b.tracked else None)

    return _result("add", out, (a, b), grad_fn)


def sub(a, b):
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.data.dtype)
    _check_dtypes("sub", a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise OpError("sub", "shapes are not broadcast-compatible", [a.shape, b.shape]) from None
    out = a.data - b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if a.tracked else None,
                _unbroadcast(-g, b.shape) if b.tracked else None)

    return _result("sub", out, (a, b), grad_fn)


def mul(a, b):
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.data.dtype)
    _check_dtypes("mul", a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise OpError("mul", "shapes are not broadcast-compatible", [a.shape, b.shape]) from None
    out = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.tracked else None,
                _unbroadcast(g * a.data, b.shape) if b.tracked else None)

    return _result("mul", out, (a, b), grad_fn)


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = _as_tensor(a, None)
    c = float(c)
    out = a.data * c

    def grad_fn(g):
        return (g * c,)

    return _result("scale", out, (a,), grad_fn)


def relu(a):
    a = _as_tensor(a, None)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0).astype(a.data.dtype, copy=False)

    def grad_fn(g):
        return (g * mask,)

    return _result("relu", out, (a,), grad_fn)


def softmax(a, axis=-1):
    a = _as_tensor(a, None)
    if a.data.ndim == 0:
        raise OpError("softmax", "input must have at least one axis", [a.shape])
    if a.shape[axis] == 0:
        raise OpError("softmax", f"axis {axis} is empty", [a.shape])
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return ((g - inner) * s,)

    return _result("softmax", s, (a,), grad_fn)


def layer_norm(a, gain, bias, eps=_LAYER_NORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a = _as_tensor(a, None)
    gain = _as_tensor(gain, a.data.dtype)
    bias = _as_tensor(bias, a.data.dtype)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise OpError("layer-norm", "gain/bias must match the feature width",
                      [a.shape, gain.shape, bias.shape])
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        ga = ggain = gbias = None
        if gain.tracked:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.tracked:
            gbias = g.reshape(-1, d).sum(axis=0)
        if a.tracked:
            gx = g * gain.data
            ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return ga, ggain, gbias

    return _result("layer-norm", out, (a, gain, bias), grad_fn)


def embedding(table, ids):
    """Row lookup: table [V, d], integer ids of any shape -> ids.shape + (d,)."""
    table = _as_tensor(table, None)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise OpError("embedding-lookup", f"ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise OpError("embedding-lookup", "table must be 2-D", [table.shape])
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise OpError("embedding-lookup",
                      f"id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}")
    out = table.data[ids]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result("embedding-lookup", out, (table,), grad_fn)


def concat(parts, axis):
    parts = [_as_tensor(p, None) for p in parts]
    if not parts:
        raise OpError("concat", "nothing to concatenate")
    for p in parts[1:]:
        _check_dtypes("concat", parts[0], p)
    shapes = [p.shape for p in parts]
    base = list(shapes[0])
    ax = axis % len(base)
    for s in shapes[1:]:
        if len(s) != len(base) or any(i != ax and s[i] != base[i] for i in range(len(base))):
            raise OpError("concat", f"shapes differ outside axis {axis}", shapes)
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [s[ax] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        pieces = []
        for i in range(len(parts)):
            index = [slice(None)] * len(base)
            index[ax] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _result("concat", out, tuple(parts), grad_fn)


def masked_mean(a, mask, axis):
    """Mean over `axis` restricted to mask==1 positions.

    The mask covers the leading axes of `a` (its shape must equal
    a.shape[:mask.ndim]) and is broadcast over any trailing feature axes.
    Positions with mask 0 contribute nothing, so appending masked padding
    never changes the result.
    """
    a = _as_tensor(a, None)
    mask = np.asarray(mask)
    if mask.ndim > a.ndim or mask.shape != a.shape[:mask.ndim]:
        raise OpError("masked-mean", "mask must match the leading axes of the input",
                      [a.shape, mask.shape])
    ax = axis % a.ndim
    if ax >= mask.ndim:
        raise OpError("masked-mean", f"axis {axis} is not covered by the mask",
                      [a.shape, mask.shape])
    m = (mask != 0).astype(a.data.dtype)
    m_full = m.reshape(m.shape + (1,) * (a.ndim - m.ndim))
    counts = m_full.sum(axis=ax, keepdims=True)
    if np.any(counts == 0):
        raise OpError("masked-mean", "a slice has no unmasked positions", [a.shape, mask.shape])
    out = (a.data * m_full).sum(axis=ax) / np.squeeze(counts, axis=ax)

    def grad_fn(g):
        return (np.expand_dims(g, ax) * (m_full / counts),)

    return _result("masked-mean", out, (a,), grad_fn)


def l2_norm(a, axis=None):
    """sqrt(sum of squares) over the given axis/axes (all axes when None)."""
    a = _as_tensor(a, None)
    norm = np.sqrt((a.data * a.data).sum(axis=axis))
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)

    def grad_fn(g):
        ratio = np.asarray(g) / (norm + _L2_GRAD_EPS)
        shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        return (a.data * ratio.reshape(shape),)

    return _result("l2-norm", norm, (a,), grad_fn)


def cosine_similarity(u, v, axis=-1):
    """Cosine of the angle along `axis`; each norm gets +NORM_EPS for safety."""
    u = _as_tensor(u, None)
    v = _as_tensor(v, u.data.dtype)
    _check_dtypes("cosine-similarity", u, v)
    if u.shape != v.shape:
        raise OpError("cosine-similarity", "operands must have identical shapes",
                      [u.shape, v.shape])
    nu = np.sqrt((u.data * u.data).sum(axis=axis)) + NORM_EPS
    nv = np.sqrt((v.data * v.data).sum(axis=axis)) + NORM_EPS
    dot = (u.data * v.data).sum(axis=axis)
    cos = dot / (nu * nv)

    ax = axis % u.ndim

    def _expand(x):
        return np.expand_dims(x, ax)

    def grad_fn(g):
        gu = gv = None
        g_e, nu_e, nv_e, cos_e = _expand(g), _expand(nu), _expand(nv), _expand(cos)
        if u.tracked:
            gu = g_e * (v.data / (nu_e * nv_e) - cos_e * (u.data / nu_e) / nu_e)
        if v.tracked:
            gv = g_e * (u.data / (nu_e * nv_e) - cos_e * (v.data / nv_e) / nv_e)
        return gu, gv

    return _result("cosine-similarity", cos, (u, v), grad_fn)


def dropout(a, p, rng, training=True):
    """Inverted dropout. Eval mode (training=False) is the identity."""
    a = _as_tensor(a, None)
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise OpError("dropout", f"rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = a.data * keep

    def grad_fn(g):
        return (g * keep,)

    return _result("dropout", out, (a,), grad_fn)


def transpose(a, axes=None):
    a = _as_tensor(a, None)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise OpError("transpose", f"axes {axes} is not a permutation", [a.shape])
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _result("transpose", out, (a,), grad_fn)


def reshape(a, shape):
    a = _as_tensor(a, None)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise OpError("reshape", f"cannot reshape to {tuple(shape)}", [a.shape]) from None

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _result("reshape", out, (a,), grad_fn)


def tensor_sum(a, axis=None):
    a = _as_tensor(a, None)
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        return (np.broadcast_to(np.asarray(g).reshape(shape), a.shape).copy(),)

    return _result("sum", out, (a,), grad_fn)


def tensor_mean(a, axis=None):
    a = _as_tensor(a, None)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return scale(tensor_sum(a, axis=axis), 1.0 / count)


def label_smoothed_cross_entropy(logits, targets, mask=None, smoothing=0.0):
    """Token-mean label-smoothed cross entropy over [N, V] logits.

    The per-token target distribution mixes (1 - smoothing) of the one-hot
    label with smoothing/V of the uniform distribution, so the loss is a
    cross entropy against a proper distribution and therefore >= 0. Tokens
    with mask 0 are excluded from the mean.
    """
    logits = _as_tensor(logits, None)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise OpError("label-smoothed-cross-entropy", "logits must be [N, V]", [logits.shape])
    n, v = logits.shape
    if targets.shape != (n,):
        raise OpError("label-smoothed-cross-entropy", "targets must be [N]",
                      [logits.shape, targets.shape])
    if not np.issubdtype(targets.dtype, np.integer):
        raise OpError("label-smoothed-cross-entropy", f"targets must be integers, got {targets.dtype}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise OpError("label-smoothed-cross-entropy", "target id out of range")
    smoothing = float(smoothing)
    if not 0.0 <= smoothing < 1.0:
        raise OpError("label-smoothed-cross-entropy", f"smoothing must be in [0, 1), got {smoothing}")
    if mask is None:
        m = np.ones(n, dtype=logits.data.dtype)
    else:
        m = (np.asarray(mask) != 0).astype(logits.data.dtype)
        if m.shape != (n,):
            raise OpError("label-smoothed-cross-entropy", "mask must be [N]",
                          [logits.shape, np.asarray(mask).shape])
    total = m.sum()
    if total == 0:
        raise OpError("label-smoothed-cross-entropy", "all target positions are masked")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    nll = -logp[rows, targets]
    uniform = -logp.sum(axis=1) / v
    per_token = (1.0 - smoothing) * nll + smoothing * uniform
    loss = (per_token * m).sum() / total

    def grad_fn(g):
        grad = np.exp(logp)
        grad[rows, targets] -= (1.0 - smoothing)
        grad -= smoothing / v
        grad *= (m / total)[:, None]
        return (grad * g,)

    return _result("label-smoothed-cross-entropy", loss, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of autodiff against central differences."""

    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return bool(self.max_rel_err <= self.tol)


def grad_check(f, x, step=1e-5, tol=1e-4):
    """Check df/dx from the graph against central finite differences.

    `f` must be a deterministic scalar function of one float64 tensor
    (dropout off); it may close over other tracked tensors, whose gradients
    are ignored here. Raises OpError if f is non-finite at any probe point.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64), tracked=True)
    if x.data.dtype != np.float64:
        raise OpError("grad-check", f"input must be float64, got {x.data.dtype}")
    step = float(step)

    probe = Tensor(x.data.copy(), tracked=True)
    loss = f(probe)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise OpError("grad-check", "f must return a scalar tensor")
    backward(loss)
    analytic = (probe.grad if probe.grad is not None else np.zeros_like(probe.data)).copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            values = []
            for direction in (+1.0, -1.0):
                bumped = flat.copy()
                bumped[i] += direction * step
                out = f(Tensor(bumped.reshape(x.shape)))
                val = out.item()
                if not math.isfinite(val):
                    raise OpError("grad-check", f"f is non-finite at coordinate {i}")
                values.append(val)
            numeric[i] = (values[0] - values[1]) / (2.0 * step)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(analytic=analytic, numeric=numeric, rel_err=rel,
                           max_rel_err=float(rel.max()) if rel.size else 0.0, tol=float(tol))
