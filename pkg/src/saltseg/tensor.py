"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operators the segmentation network needs are provided. Every op
records a closure on a tape; ``backward`` walks the tape once in reverse
topological order.
"""
import contextlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        if data.ndim > 4:
            raise DimensionError(f"rank {data.ndim} exceeds the maximum of 4")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False
        self._retain = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def retain_grad(self):
        self._retain = True
        return self

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def custom_op(data, parents, backward_fn):
    """Wrap a forward result whose gradient ``backward_fn(g)`` returns one
    array (or None) per parent."""
    return _make(data, parents, backward_fn)


def backward(loss):
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    if loss._consumed:
        raise RuntimeError("backward was already run through this graph; rebuild it with a new forward pass")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# -- pointwise ---------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw)


def scale(x, s):
    return _make(x.data * s, (x,), lambda g: (g * s,))


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


# -- shape ---------------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _make(data, (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise DimensionError(f"concat rank mismatch: {ref} vs {t.shape}")
        for ax in range(len(ref)):
            if ax != axis and t.shape[ax] != ref[ax]:
                raise DimensionError(f"concat axis {ax} mismatch: {ref[ax]} vs {t.shape[ax]}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def split(x, sizes, axis=1):
    if int(np.sum(sizes)) != x.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not cover axis {axis} of length {x.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)

        def bw(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        outs.append(_make(x.data[sl], (x,), bw))
        start += n
    return outs


def crop(x, top, left, h, w):
    """Spatial crop of an N×C×H×W tensor."""
    H, W = x.shape[2:]
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise DimensionError(f"crop window ({top},{left},{h},{w}) outside {H}x{W}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, :, top:top + h, left:left + w] = g
        return (full,)

    return _make(x.data[:, :, top:top + h, left:left + w], (x,), bw)


# -- reductions ------------------------------------------------------------------

def sum(x):
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x):
    shape, n = x.shape, x.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def global_avg_pool(x):
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bw)


def dense(x, weight, bias=None):
    """x: N×in, weight: out×in, bias: out."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape} (axis 1)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"dense: bias {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ wd if x.requires_grad else None, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, bw)


# -- convolution -------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be N×C×H×W, got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be C'×C/g×k×k, got {weight.shape}")
    n, c, h, w = x.shape
    cout, cg, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {k}×{k2} (axes 2, 3)")
    if c % groups:
        raise DimensionError(f"input channels (axis 1) {c} not divisible by groups {groups}")
    if cout % groups:
        raise DimensionError(f"output channels (weight axis 0) {cout} not divisible by groups {groups}")
    if cg != c // groups:
        raise DimensionError(f"weight axis 1 is {cg}, expected C/g = {c // groups}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels (axis 0)")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} larger than padded input {h}×{w} (axes 2, 3)")
    og = cout // groups
    ckk = cg * k * k
    m = n * ho * wo

    if k == 1 and stride == 1 and padding == 0:
        cols_t = x.data.transpose(1, 0, 2, 3).reshape(groups, ckk, m)
    else:
        cols = kernels.im2col(x.data, k, stride, padding)
        cols_t = cols.reshape(n, groups, ckk, ho * wo).transpose(1, 2, 0, 3).reshape(groups, ckk, m)
    w_g = weight.data.reshape(groups, og, ckk)
    out = np.matmul(w_g, cols_t)  # groups × og × (n·ho·wo)
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        go = g.transpose(1, 0, 2, 3).reshape(groups, og, m)
        dw = np.matmul(go, cols_t.transpose(0, 2, 1)).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w_g.transpose(0, 2, 1), go)  # groups × ckk × m
            if k == 1 and stride == 1 and padding == 0:
                dx = np.ascontiguousarray(dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                dcols = np.ascontiguousarray(
                    dcols.reshape(groups, ckk, n, ho * wo).transpose(2, 0, 1, 3)
                ).reshape(n, c, k, k, ho, wo)
                dx = kernels.col2im(dcols, h, w, k, stride, padding)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, bw)


def maxpool2d(x, k, stride, padding=0):
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d input must be N×C×H×W, got {x.shape}")
    h, w = x.shape[2:]
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"pool window {k} larger than input {h}×{w} (axes 2, 3)")
    if padding >= k:
        raise DimensionError(f"pool padding {padding} must be smaller than window {k}")
    out, arg = kernels.maxpool_forward(x.data, k, stride, padding)

    def bw(g):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), arg, h, w),)

    return _make(out, (x,), bw)


def _interp_matrix(n_in, n_out):
    """Row i holds the align-corners-false bilinear weights of output i."""
    mat = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    return mat


def resize_bilinear(x, out_h, out_w):
    h, w = x.shape[2:]
    if (out_h, out_w) == (h, w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    uh = _interp_matrix(h, out_h)
    uw = _interp_matrix(w, out_w)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def bw(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _make(out, (x,), bw)


def bilinear_upsample(x, factor):
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample input must be N×C×H×W, got {x.shape}")
    h, w = x.shape[2:]
    return resize_bilinear(x, h * int(factor), w * int(factor))


# -- normalization -------------------------------------------------------------------

def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """``running_mean`` / ``running_var`` are numpy arrays updated in place in
    training mode (running variance uses the unbiased batch estimate)."""
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d input must be N×C×H×W, got {x.shape}")
    c = x.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data),
                       ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"batchnorm {label} has shape {arr.shape}, input has {c} channels (axis 1)")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        cnt = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * cnt / (cnt - 1) if cnt > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                cnt = g.shape[0] * g.shape[2] * g.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (inv_std[None, :, None, None] / cnt) * (cnt * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw)


# -- gradient checking ------------------------------------------------------------------

@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped: int


def gradcheck_report(fn, tensors, eps=1e-5, max_entries=None, seed=0, floor=1e-5, kink_tol=1e-4):
    """Compare analytic gradients of ``fn()`` (a scalar Tensor) with central
    differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``: components smaller
    than ``floor`` are compared in absolute terms, since float64 roundoff in
    the forward pass limits difference quotients to ~1e-10. An entry whose
    difference quotients at ``eps`` and ``eps / 10`` disagree by more than
    ``kink_tol`` (same relative measure) straddles a relu/maxpool kink and is
    skipped. ``max_entries`` caps checked entries per tensor (random subset).
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), floor)

    with no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                quotients = []
                for h in (eps, eps / 10):
                    flat[i] = orig + h
                    fp = fn().item()
                    flat[i] = orig - h
                    fm = fn().item()
                    flat[i] = orig
                    quotients.append((fp - fm) / (2 * h))
                if rel(*quotients) > kink_tol:
                    skipped += 1
                    continue
                checked += 1
                worst = max(worst, rel(a.reshape(-1)[i], quotients[0]))
    return GradcheckResult(worst, checked, skipped)


def gradcheck(fn, tensors, **kwargs):
    """Max relative error; see ``gradcheck_report``."""
    return gradcheck_report(fn, tensors, **kwargs).max_rel_error
