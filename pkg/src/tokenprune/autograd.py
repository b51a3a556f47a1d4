"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (up to 4 axes) and record the operations that
produced them; ``backward`` on a scalar loss walks the tape and accumulates
gradients into every leaf with ``requires_grad``. Gradients accumulate across
repeated backward calls until explicitly zeroed.

Training runs in 32-bit by default; pass ``dtype=np.float64`` (or call
``set_default_dtype``) for verification builds with tight gradient-check
tolerances.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, DistributionError

MAX_NDIM = 4
KL_FLOOR = 1e-12

_default_dtype = [np.float32]
_grad_enabled = [True]


def set_default_dtype(dtype) -> None:
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype!r}")
    _default_dtype[0] = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype[0]


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _grad_enabled[0]
        _grad_enabled[0] = False
        return self

    def __exit__(self, *exc):
        _grad_enabled[0] = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        arr = np.asarray(data, dtype=dtype)
    elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        arr = data
    else:
        arr = np.asarray(data, dtype=_default_dtype[0])
    if arr.ndim > MAX_NDIM:
        raise DimensionError(f"tensors support at most {MAX_NDIM} axes, got shape {arr.shape}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def all_finite(self) -> bool:
        """Validity check: True iff every stored value is finite."""
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grads of every reachable leaf; accumulates until zeroed."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is None:
                continue
            grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g if g.dtype == parent.data.dtype else g.astype(parent.data.dtype)
                else:
                    np.add(parent.grad, g, out=parent.grad)
            if node._parents:
                node.grad = None  # intermediate grads freed once consumed

    # -- operator sugar -------------------------------------------------

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _wrap(b, a)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _wrap(b, a)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward)


def pow_(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(data, (a,), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` else ``b``; grads flow to the chosen side."""
    cond = np.asarray(cond, dtype=bool)
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    a_d = a.data if a_t is not None else a
    b_d = b.data if b_t is not None else b
    data = np.where(cond, a_d, b_d)
    parents = tuple(t for t in (a_t, b_t) if t is not None)

    def backward(g):
        out = []
        if a_t is not None:
            out.append(_unbroadcast(np.where(cond, g, 0.0), a_t.shape))
        if b_t is not None:
            out.append(_unbroadcast(np.where(cond, 0.0, g), b_t.shape))
        return tuple(out)

    return _make(data, parents, backward)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, exact-erf form (pinned build choice)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    data = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf).astype(x.dtype),)

    return _make(data, (a,), backward)


# -- shape manipulation ------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}: {e}") from None
    if data.ndim > MAX_NDIM:
        raise DimensionError(f"reshape target {shape} exceeds {MAX_NDIM} axes")

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(data, (a,), backward)


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis), type(None))) for k in items)


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]
    if isinstance(data, np.ndarray) and data.ndim > MAX_NDIM:
        raise DimensionError(f"index result exceeds {MAX_NDIM} axes")
    basic = _is_basic_key(key)

    def backward(g):
        gx = np.zeros_like(a.data)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _make(np.asarray(data), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(data, tensors, backward)


def expand(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _make(data, (a,), backward)


def take_tokens(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-sample gather of rows along axis 1: a[B,T,d], idx[B,K] -> [B,K,d]."""
    idx = np.asarray(idx)
    data = np.take_along_axis(a.data, idx[:, :, None], axis=1)

    def backward(g):
        gx = np.zeros_like(a.data)
        b_idx = np.arange(a.shape[0])[:, None]
        np.add.at(gx, (b_idx, idx), g)
        return (gx,)

    return _make(data, (a,), backward)


# -- reductions --------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return _make(np.asarray(data), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise DimensionError(f"matmul batch extents incompatible: {a.shape} x {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- normalization and losses ------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx.astype(x.data.dtype), dgamma, dbeta

    return _make(data, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    data = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _make(data, (logits,), backward)


def kl_divergence(p: Tensor, q: Tensor, *, norm_tol: float = 1e-4) -> Tensor:
    """KL(p || q) with the last axis as the distribution axis.

    Rows must be non-negative and sum to 1 within ``norm_tol``. ``q`` is
    floored at 1e-12 before the log so vanishing reference mass stays finite;
    0*log 0 is taken as 0. Multi-row inputs reduce to the mean per-row KL.
    """
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p))
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q))
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if t.data.min() < 0:
            raise DistributionError(f"{name} has negative entries")
        sums = t.data.sum(axis=-1)
        if np.abs(sums - 1.0).max() > norm_tol:
            raise DistributionError(f"{name} rows do not sum to 1 (max deviation {np.abs(sums - 1.0).max():.3e})")
    qf = np.maximum(q.data, KL_FLOOR)
    pos = p.data > 0
    log_ratio = np.where(pos, np.log(np.where(pos, p.data, 1.0)) - np.log(qf), 0.0)
    terms = np.where(pos, p.data * log_ratio, 0.0)
    n_rows = max(p.data.size // p.shape[-1], 1) if p.ndim > 0 else 1
    data = np.asarray(terms.sum() / n_rows, dtype=p.data.dtype)

    def backward(g):
        gp = np.where(pos, log_ratio + 1.0, 0.0) * (g / n_rows)
        gq = np.where(q.data >= KL_FLOOR, -p.data / qf, 0.0) * (g / n_rows)
        return gp.astype(p.data.dtype), gq.astype(q.data.dtype)

    return _make(data, (p, q), backward)


# -- image patching ----------------------------------------------------


def extract_patches(images: Tensor, patch_size: int) -> Tensor:
    """[B,C,S,S] -> [B,N,C*p*p]: non-overlapping patches, row-major grid order."""
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image size {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p

    def fwd(arr):
        return (
            arr.reshape(b, c, gh, p, gw, p)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(b, gh * gw, c * p * p)
        )

    data = fwd(images.data)

    def backward(g):
        gx = (
            g.reshape(b, gh, gw, c, p, p)
            .transpose(0, 3, 1, 4, 2, 5)
            .reshape(b, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return _make(np.ascontiguousarray(data), (images,), backward)


# -- verification ------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor | Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
) -> float:
    """Max relative error between analytic grads of f() and central differences.

    ``f`` must be scalar-valued and re-read ``x`` on every call. Use 64-bit
    tensors; 32-bit differences drown in rounding noise. When ``max_coords``
    is set, a deterministic stride subsamples coordinates of large tensors.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.grad = None
    out = f()
    out.backward()
    worst = 0.0
    for t in xs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = np.linspace(0, n - 1, max_coords).astype(int)
        else:
            coords = range(n)
        a_flat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            cd = (up - down) / (2.0 * h)
            an = float(a_flat[i])
            err = abs(an - cd) / (abs(an) + abs(cd) + 1e-12)
            worst = max(worst, err)
    return worst
