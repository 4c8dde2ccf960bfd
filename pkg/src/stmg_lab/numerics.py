"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is exactly what the graph-attention network, the map renderer and
the loss stack need: elementwise arithmetic with numpy-style broadcasting,
2-D matmul, reductions, concat/slicing, a masked softmax over the last axis,
LeakyReLU/sigmoid/log/exp/sqrt/clamp, and a same-padded 2-D convolution.

Recording only happens while a :class:`GradTape` is active, so evaluation
code pays no tape overhead. One tape per training thread; tensors themselves
are immutable values and safe to share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    CovarianceError,
    DegenerateNeighborhoodError,
    DimensionError,
)

_TAPE = None  # the active tape, set by GradTape.__enter__ (single-threaded)


def _as_array(values):
    a = np.asarray(values, dtype=np.float64)
    return a


class Tensor:
    """Immutable row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_on_tape", "name")

    def __init__(self, values, requires_grad=False, name=None):
        self.data = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._on_tape = False
        self.name = name

    @staticmethod
    def param(values, name=None):
        return Tensor(values, requires_grad=True, name=name)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t):
    return t.requires_grad or t._on_tape


class GradTape:
    """Ordered record of primitive ops, replayable in reverse.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the scalar output. Single-threaded by design.
    """

    def __init__(self):
        self._records = []  # (output, inputs, backward_fn)

    def __enter__(self):
        global _TAPE
        if _TAPE is not None:
            raise ContractError("a GradTape is already active; tapes do not nest")
        _TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _TAPE
        _TAPE = None
        return False

    def _record(self, output, inputs, backward_fn):
        output._on_tape = True
        self._records.append((output, inputs, backward_fn))

    def backward(self, output, params=None):
        """Accumulate d(output)/d(t) for every tensor feeding ``output``.

        ``output`` must be scalar. Gradients are written to ``t.grad`` for
        every ``requires_grad`` tensor on the tape; tensors in ``params``
        that the output never touched get explicit zeros. Returns the full
        accumulator keyed by ``id(tensor)``.
        """
        if output.data.ndim != 0:
            raise ContractError(
                f"backward needs a scalar output, got shape {output.data.shape}"
            )
        acc = {id(output): np.ones(())}
        holders = {id(output): output}
        for out, inputs, backward_fn in reversed(self._records):
            g_out = acc.get(id(out))
            if g_out is None:
                continue
            for t, g in zip(inputs, backward_fn(g_out)):
                if g is None or not _tracked(t):
                    continue
                key = id(t)
                if key in acc:
                    acc[key] = acc[key] + g
                else:
                    acc[key] = g
                    holders[key] = t
        for key, t in holders.items():
            if t.requires_grad:
                t.grad = np.asarray(acc[key])
        if params is not None:
            for p in params:
                key = id(p)
                p.grad = np.asarray(acc[key]) if key in acc else np.zeros_like(p.data)
        return acc


def _emit(out_data, inputs, backward_fn):
    out = Tensor(out_data)
    if _TAPE is not None and any(_tracked(t) for t in inputs):
        _TAPE._record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(out, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit(out, (a, b), bwd)


def neg(a):
    a = _wrap(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _emit(out, (a, b), bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _emit(out, (a, b), bwd)


def log(a):
    a = _wrap(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g / (2.0 * out),))


def sigmoid(a):
    a = _wrap(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope=0.2):
    """x for x >= 0, slope*x otherwise. slope must sit in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must be in (0,1), got {slope}")
    a = _wrap(a)
    x = a.data
    out = np.where(x >= 0, x, slope * x)

    def bwd(g):
        return (g * np.where(x >= 0, 1.0, slope),)

    return _emit(out, (a,), bwd)


def clamp(a, lo=None, hi=None):
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    passed = np.ones_like(a.data)
    if lo is not None:
        passed = passed * (a.data >= lo)
    if hi is not None:
        passed = passed * (a.data <= hi)

    def bwd(g):
        return (g * passed,)

    return _emit(out, (a,), bwd)


# -- linear algebra and shape ops -------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit(out, (a, b), bwd)


def attn_matmul(a, b):
    """2-D matmul whose forward sums products in ascending value order.

    Relabeling attention neighbors permutes rows/columns of both operands;
    value-ordered summation makes the aggregated features bit-identical
    under such permutations, which plain BLAS order does not guarantee.
    Gradients use the ordinary matmul adjoints.
    """
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"attn_matmul expects compatible 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    prod = a.data[:, :, None] * b.data[None, :, :]
    prod.sort(axis=1)
    out = prod.sum(axis=1)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit(out, (a, b), bwd)


def transpose(a):
    a = _wrap(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.data.shape}")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = _wrap(a)
    old = a.data.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    ts = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, tuple(ts), bwd)


def stack(tensors, axis=0):
    ts = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(ts)))

    return _emit(out, tuple(ts), bwd)


def getitem(a, index):
    """Basic (slice/int) indexing; each element is referenced at most once."""
    a = _wrap(a)
    out = a.data[index]

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[index] = g
        return (gx,)

    return _emit(np.array(out), (a,), bwd)


def take_flat(a, flat_indices):
    """Gather from the flattened tensor; duplicate indices accumulate."""
    a = _wrap(a)
    idx = np.asarray(flat_indices, dtype=np.int64)
    out = a.data.reshape(-1)[idx]

    def bwd(g):
        gx = np.zeros(a.data.size)
        np.add.at(gx, idx, g)
        return (gx.reshape(a.data.shape),)

    return _emit(out, (a,), bwd)


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _emit(out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def masked_softmax(logits, mask):
    """Exponentiate-and-normalize the unmasked entries of each last-axis row.

    Masked entries come out exactly 0 and every row sums to 1. A row with no
    unmasked entry raises :class:`DegenerateNeighborhoodError`.
    """
    logits = _wrap(logits)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.data.shape)
    if not m.any(axis=-1).all():
        raise DegenerateNeighborhoodError("softmax row with every entry masked")
    shifted = np.where(m, logits.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    # value-ordered denominator: row sums stay bit-identical under any
    # permutation of the row's entries (neighbor relabeling)
    denom = np.sort(e, axis=-1).sum(axis=-1, keepdims=True)
    s = e / denom

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _emit(s, (logits,), bwd)


def softmax(logits):
    logits = _wrap(logits)
    return masked_softmax(logits, np.ones(logits.data.shape, dtype=bool))


def conv2d(x, kernel, bias=None):
    """Same-padded 2-D convolution: (B,Ci,H,W) * (Co,Ci,kh,kw) -> (B,Co,H,W).

    Kernel extents must be odd. Implemented as a shift-and-accumulate so the
    inner work is vectorized over batch and space.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects (B,Ci,H,W) and (Co,Ci,kh,kw), got {x.data.shape} and {kernel.data.shape}"
        )
    B, Ci, H, W = x.data.shape
    Co, Ci_k, kh, kw = kernel.data.shape
    if Ci != Ci_k:
        raise DimensionError(f"conv2d channel mismatch: {Ci} vs {Ci_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((B, Co, H, W))
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy : dy + H, dx : dx + W]
            # out[b,o] += k[o,i] . patch[b,i]  (BLAS via tensordot)
            out += np.tensordot(patch, kernel.data[:, :, dy, dx], axes=([1], [1])).transpose(
                0, 3, 1, 2
            )
    inputs = [x, kernel]
    if bias is not None:
        bias = _wrap(bias)
        if bias.data.shape != (Co,):
            raise DimensionError(f"conv2d bias must have shape ({Co},)")
        out += bias.data[None, :, None, None]
        inputs.append(bias)

    def bwd(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for dy in range(kh):
            for dx in range(kw):
                patch = xp[:, :, dy : dy + H, dx : dx + W]
                gk[:, :, dy, dx] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, dy : dy + H, dx : dx + W] += np.tensordot(
                    g, kernel.data[:, :, dy, dx], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph : ph + H, pw : pw + W]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _emit(out, tuple(inputs), bwd)


# -- dense Gaussian evaluation ----------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Pixel grid with integer cell centers x in [0, width), y in [0, height)."""

    width: int
    height: int

    def coords(self):
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        return xs, ys


def gaussian2d(mu, sigma, grid):
    """Unnormalized Gaussian bump on the grid, peak value 1 at ``mu``.

    ``sigma`` is a 2x2 symmetric positive-definite covariance over (x, y)
    pixel coordinates. Returns an (height, width) tensor.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(2)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(2, 2)
    det = sigma[0, 0] * sigma[1, 1] - sigma[0, 1] * sigma[1, 0]
    if not np.isfinite(det) or det <= 0 or sigma[0, 0] <= 0 or sigma[1, 1] <= 0:
        raise CovarianceError(f"covariance is not SPD: {sigma.tolist()}")
    inv = np.array([[sigma[1, 1], -sigma[0, 1]], [-sigma[1, 0], sigma[0, 0]]]) / det
    xs, ys = grid.coords()
    dx = xs - mu[0]
    dy = ys - mu[1]
    q = inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy
    return Tensor(np.exp(-0.5 * q))


# -- finite-difference oracle -------------------------------------------------


def finite_difference(loss_fn, param, coord, h=1e-5):
    """Central difference of ``loss_fn()`` w.r.t. one coordinate of ``param``."""
    flat = param.data.reshape(-1)
    orig = flat[coord]
    flat[coord] = orig + h
    fp = float(loss_fn().data)
    flat[coord] = orig - h
    fm = float(loss_fn().data)
    flat[coord] = orig
    return (fp - fm) / (2.0 * h)


def check_gradients(
    loss_fn,
    params,
    rel_tol=1e-4,
    abs_floor=1e-7,
    h=1e-5,
    max_coords_per_tensor=None,
    rng=None,
):
    """Compare reverse-mode gradients of ``loss_fn()`` against central differences.

    A coordinate passes when |analytic - numeric| stays within
    ``rel_tol * max(|analytic|, |numeric|)`` or, for near-zero gradients,
    within the absolute floor. ``params`` maps names to tensors; when
    ``max_coords_per_tensor`` is set a random subset of coordinates is
    checked per tensor (every tensor is still covered). Returns
    (ok, worst_excess, failures); excess is the error over its allowance,
    so values <= 1 pass.
    """
    named = list(params.items())
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss, params=[t for _, t in named])
    rng = rng or np.random.default_rng(0)
    failures = []
    worst = 0.0
    checked = 0
    for name, p in named:
        n = p.data.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        gflat = p.grad.reshape(-1)
        for c in coords:
            num = finite_difference(loss_fn, p, int(c), h=h)
            ana = float(gflat[c])
            allowance = max(rel_tol * max(abs(ana), abs(num)), abs_floor)
            excess = abs(ana - num) / allowance
            worst = max(worst, excess)
            checked += 1
            if excess > 1.0:
                failures.append((name, int(c), ana, num, excess))
    return not failures, worst, failures, checked


def backward(tape, output, params=None):
    """Module-level alias for :meth:`GradTape.backward`."""
    return tape.backward(output, params=params)
