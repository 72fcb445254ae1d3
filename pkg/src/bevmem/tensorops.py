"""Dense tensors with tape-free reverse-mode differentiation.

Feature maps are ``(C, H, W)`` or batched ``(N, C, H, W)`` arrays; every op
below acts on the trailing three axes. Each op that touches a tensor with
``requires_grad`` records a node holding its parents and an adjoint closure;
:func:`backward` orders the reachable nodes and replays the adjoints in
reverse.
"""

from __future__ import annotations

import contextlib
import functools
import os
from collections.abc import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .grid import GridSpec, Pose2, backward_flow

_dtype = np.dtype(np.float32)
_grad_enabled = True
# Names of ops whose adjoint is deliberately skewed; gradcheck negative controls only.
_corrupted: set[str] = set()
DEBUG = os.environ.get("BEVMEM_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


def get_dtype() -> np.dtype:
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working precision (float32 at runtime, float64 in tests)."""
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = old


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = old


@contextlib.contextmanager
def corrupt_adjoint(op: str):
    _corrupted.add(op)
    try:
        yield
    finally:
        _corrupted.discard(op)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_adjoint", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype, order="C")
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._adjoint is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mul(sum_all(self), 1.0 / self.data.size)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0)


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable) -> Tensor:
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
        if op in _corrupted:
            out._adjoint = lambda g, _f=adjoint: [None if d is None else 1.5 * d for d in _f(g)]
        else:
            out._adjoint = adjoint
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) if grad is None else grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._adjoint(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    return _node(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = _dtype.type(b)
        return _node("scale", a.data * s, (a,), lambda g: (g * s,))
    return _node(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def sum_all(a: Tensor) -> Tensor:
    return _node("sum", np.asarray(a.data.sum(), dtype=_dtype), (a,), lambda g: (np.full_like(a.data, g),))


def relu(f: Tensor) -> Tensor:
    mask = f.data > 0
    return _node("relu", f.data * mask, (f,), lambda g: (g * mask,))


def sigmoid(f: Tensor) -> Tensor:
    x = f.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval (0, 1) even where float32 would round to an endpoint
    fi = np.finfo(x.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)
    return _node("sigmoid", out, (f,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- spatial ops


def _as_batched(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    spatial = {p.shape[:-3] + p.shape[-2:] for p in parts}
    if len(spatial) != 1:
        raise ShapeError(f"spatial/batch mismatch in concat: {[p.shape for p in parts]}")
    sizes = [p.shape[-3] for p in parts]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([p.data for p in parts], axis=-3)

    def adjoint(g):
        return [g[..., lo:hi, :, :] for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _node("concat", data, tuple(parts), adjoint)


def split_channels(f: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat_channels` on plain values (no gradient)."""
    if sum(sizes) != f.shape[-3]:
        raise ShapeError(f"sizes {list(sizes)} do not sum to {f.shape[-3]} channels")
    bounds = np.cumsum([0] + list(sizes))
    return [Tensor(f.data[..., lo:hi, :, :]) for lo, hi in zip(bounds[:-1], bounds[1:])]


def conv2d(
    f: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    dilation: tuple[int, int] = (1, 1),
    grad_from: int = 0,
) -> Tensor:
    """Stride-1 convolution with zero same-padding ``dilation * (k - 1) / 2`` per axis.

    ``grad_from`` skips the input gradient of leading channels that are known
    constants (they receive zeros), which saves most of the backward cost when
    a large detached block is concatenated in front.
    """
    x = _as_batched(f.data)
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d weight expects {wcin} input channels, got {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d needs odd kernel sizes for same-padding")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    if not 0 <= grad_from <= cin:
        raise ValueError(f"grad_from={grad_from} outside [0, {cin}]")
    dh, dw = dilation
    ph, pw = dh * (kh - 1) // 2, dw * (kw - 1) // 2

    if kh == 1 and kw == 1:
        cols = x.transpose(1, 0, 2, 3).reshape(cin, n * h * wd)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols6 = np.empty((cin, kh, kw, n, h, wd), dtype=x.dtype)
        for a in range(kh):
            for c in range(kw):
                cols6[:, a, c] = xp[:, :, a * dh : a * dh + h, c * dw : c * dw + wd].transpose(1, 0, 2, 3)
        cols = cols6.reshape(cin * kh * kw, n * h * wd)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, n, h, wd).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if f.ndim == 3:
        out = out[0]

    def adjoint(g):
        g2 = _as_batched(g).transpose(1, 0, 2, 3).reshape(cout, n * h * wd)
        dw_ = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        db_ = g2.sum(axis=1) if b is not None and b.requires_grad else None
        dx = None
        if f.requires_grad:
            c0 = grad_from
            dcols = w2[:, c0 * kh * kw :].T @ g2
            m = cin - c0
            dx = np.zeros((n, cin, h, wd), dtype=g2.dtype)
            if kh == 1 and kw == 1:
                dx[:, c0:] = dcols.reshape(m, n, h, wd).transpose(1, 0, 2, 3)
            else:
                dcols6 = dcols.reshape(m, kh, kw, n, h, wd)
                dxp = np.zeros((n, m, h + 2 * ph, wd + 2 * pw), dtype=g2.dtype)
                for a in range(kh):
                    for c in range(kw):
                        dxp[:, :, a * dh : a * dh + h, c * dw : c * dw + wd] += dcols6[:, a, c].transpose(1, 0, 2, 3)
                dx[:, c0:] = dxp[:, :, ph : ph + h, pw : pw + wd]
            dx = dx.reshape(f.shape)
        return (dx, dw_, db_)

    parents = (f, w) if b is None else (f, w, b)
    return _node("conv2d", out, parents, lambda g: adjoint(g)[: len(parents)])


def layer_norm(f: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize across channels independently at every spatial location."""
    c = f.shape[-3]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm affine params must have {c} entries")
    x = f.data
    mu = x.mean(axis=-3, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-3, keepdims=True)
    inv = 1.0 / np.sqrt(var + _dtype.type(eps))
    xhat = xc * inv
    ga = gain.data[:, None, None]
    out = xhat * ga + bias.data[:, None, None]

    def adjoint(g):
        red = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
        dgain = (g * xhat).sum(axis=red) if gain.requires_grad else None
        dbias = g.sum(axis=red) if bias.requires_grad else None
        dx = None
        if f.requires_grad:
            dxhat = g * ga
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-3, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-3, keepdims=True)
            )
        return (dx, dgain, dbias)

    return _node("layer_norm", out, (f, gain, bias), adjoint)


@functools.lru_cache(maxsize=256)
def warp_matrix(spec: GridSpec, rel: Pose2) -> sp.csr_matrix:
    """Sparse bilinear resampling operator, rows = destination cells, cols = source cells.

    Taps that fall outside the grid are dropped (zero padding).
    """
    flow = backward_flow(spec, rel)
    h, w = spec.h_cells, spec.w_cells
    r, c = flow.rows.reshape(-1), flow.cols.reshape(-1)
    r0, c0 = np.floor(r), np.floor(c)
    fr, fc = r - r0, c - c0
    dest = np.arange(h * w)
    rows, cols, vals = [], [], []
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            wt = wr * wc
            keep = (wt > 0) & (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            rows.append(dest[keep])
            cols.append((rr[keep] * w + cc[keep]).astype(np.int64))
            vals.append(wt[keep])
    m = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(h * w, h * w),
        dtype=np.float64,
    )
    m.sort_indices()
    return m


def warp(f: Tensor, rel: Pose2, spec: GridSpec) -> Tensor:
    """Bilinear backward warp of a feature map into the frame reached by ``rel``."""
    if f.ndim not in (3, 4) or f.shape[-2:] != spec.shape:
        raise ShapeError(f"feature map shape {f.shape} does not match grid {spec.shape}")
    m = warp_matrix(spec, rel).astype(f.data.dtype)
    hw = spec.n_cells
    flat = f.data.reshape(-1, hw)
    out = np.ascontiguousarray((m @ flat.T).T).reshape(f.shape)

    def adjoint(g):
        return (np.ascontiguousarray((m.T @ g.reshape(-1, hw).T).T).reshape(f.shape),)

    return _node("warp", out, (f,), adjoint)


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adaptive moments with decoupled weight decay, updating ``Tensor.data`` in place."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 5e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - self.lr * self.weight_decay)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def optimizer_step(params, state: AdamW | None = None, lr=5e-4, betas=(0.9, 0.999), weight_decay=1e-2) -> AdamW:
    """Functional form: one AdamW update of ``params`` using their ``.grad``; returns the state."""
    if state is None:
        state = AdamW(params, lr=lr, betas=betas, weight_decay=weight_decay)
    state.step()
    return state
