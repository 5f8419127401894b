"""Minimal reverse-mode autodiff over dense numpy arrays.

Spatial tensors are laid out channels-last, ``[N, D, H, W, C]`` with
``(D, H, W) = (z, y, x)``. Convolution kernels are ``[3, 3, 3, C_in, C_out]``.
Only the operations the super-resolution networks need are provided; each
one defines its forward value and its adjoint.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self) -> None:
        self.grad = None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- convolution ---------------------------------------------------------------

_TAPS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


def _conv_taps(x: np.ndarray, wk: np.ndarray, b) -> Tuple[np.ndarray, Callable]:
    """Per-tap GEMMs on strided views; efficient when ``C_out`` is not tiny."""
    n, d, h, wd, ci = x.shape
    co = wk.shape[4]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.empty((n, d, h, wd, co), dtype=np.result_type(x, wk))
    out[...] = 0 if b is None else b
    for a, bb, c in _TAPS:
        out += xp[:, a:a + d, bb:bb + h, c:c + wd, :] @ wk[a, bb, c]

    def grads(g, need_w, need_x):
        gw = gx = None
        if need_w:
            g2 = g.reshape(-1, co)
            gw = np.empty_like(wk)
            for a, bb, c in _TAPS:
                xs = xp[:, a:a + d, bb:bb + h, c:c + wd, :].reshape(-1, ci)
                gw[a, bb, c] = xs.T @ g2
        if need_x:
            # adjoint is a correlation of the padded output grad with the flipped kernel
            gp = np.pad(g, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
            gx = np.zeros(x.shape, dtype=g.dtype)
            for a, bb, c in _TAPS:
                gx += gp[:, 2 - a:2 - a + d, 2 - bb:2 - bb + h, 2 - c:2 - c + wd, :] @ wk[a, bb, c].T
        return gw, gx

    return out, grads


def _conv_narrow(x: np.ndarray, wk: np.ndarray, b) -> Tuple[np.ndarray, Callable]:
    """One GEMM against all 27 taps, then shifted adds of the narrow result.

    For one or two output channels the per-tap products are matrix-vector
    shaped and slow; here the wide GEMM does the work and the shifts only
    move ``27 * C_out`` channels.
    """
    n, d, h, wd, ci = x.shape
    co = wk.shape[4]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    pshape = xp.shape[:4]
    wall = np.ascontiguousarray(wk.transpose(3, 0, 1, 2, 4).reshape(ci, 27 * co))
    z = (xp.reshape(-1, ci) @ wall).reshape(pshape + (27, co))
    out = np.empty((n, d, h, wd, co), dtype=np.result_type(x, wk))
    out[...] = 0 if b is None else b
    for t, (a, bb, c) in enumerate(_TAPS):
        out += z[:, a:a + d, bb:bb + h, c:c + wd, t]

    def grads(g, need_w, need_x):
        gs = np.zeros(pshape + (27, co), dtype=g.dtype)
        for t, (a, bb, c) in enumerate(_TAPS):
            gs[:, a:a + d, bb:bb + h, c:c + wd, t] = g
        gs = gs.reshape(-1, 27 * co)
        gw = gx = None
        if need_w:
            gw = (xp.reshape(-1, ci).T @ gs).reshape(ci, 3, 3, 3, co).transpose(1, 2, 3, 0, 4)
            gw = np.ascontiguousarray(gw)
        if need_x:
            gx = (gs @ wall.T).reshape(pshape + (ci,))[:, 1:-1, 1:-1, 1:-1, :]
        return gw, gx

    return out, grads


NARROW_MAX_COUT = 2


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """3x3x3 cross-correlation, stride 1, zero 'same' padding."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 5:
        raise ValueError(f"conv3d input must be [N,D,H,W,C], got {x.shape}")
    if w.data.shape[:3] != (3, 3, 3) or w.data.ndim != 5:
        raise ValueError(f"conv3d kernel must be [3,3,3,Cin,Cout], got {w.shape}")
    ci = x.shape[4]
    if w.shape[3] != ci:
        raise ValueError(f"channel mismatch: input has {ci}, kernel expects {w.shape[3]}")
    impl = _conv_narrow if w.shape[4] <= NARROW_MAX_COUT else _conv_taps
    out, grads = impl(x.data, w.data, None if b is None else b.data)

    def backward(g: np.ndarray) -> None:
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 1, 2, 3)))
        gw, gx = grads(g, w.requires_grad, x.requires_grad)
        if gw is not None:
            _accumulate(w, gw)
        if gx is not None:
            _accumulate(x, gx)

    parents = [x, w] + ([b] if b is not None else [])
    return _result(out, "conv3d", parents, backward)


# -- pointwise -----------------------------------------------------------------

class GateTape:
    """Record the on/off pattern of every rectifier, then replay it.

    While recording, each ``relu``/``leaky_relu`` call appends its activation
    mask. While replaying, the calls consume the stored masks in order instead
    of thresholding their input, so the network is evaluated on the linear
    piece of the recorded point. ``crossings`` counts voxels whose live
    pattern differs from the replayed one.
    """

    def __init__(self):
        self.masks: List[np.ndarray] = []
        self.replaying = False
        self.crossings = 0
        self._pos = 0

    def __enter__(self):
        global _TAPE
        self._prev, _TAPE = _TAPE, self
        self._pos = 0
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = self._prev
        if not exc[0] and self.replaying and self._pos != len(self.masks):
            raise RuntimeError("gate replay consumed a different number of masks")
        self.replaying = True
        return False

    def gate(self, live: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.masks.append(live)
            return live
        mask = self.masks[self._pos]
        self._pos += 1
        self.crossings += int(np.count_nonzero(mask != live))
        return mask


_TAPE: Optional[GateTape] = None


def _gate(x: np.ndarray) -> np.ndarray:
    live = x > 0
    return live if _TAPE is None else _TAPE.gate(live)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    active = _gate(x.data)
    out = np.where(active, x.data, 0).astype(x.dtype)

    def backward(g):
        _accumulate(x, np.where(active, g, 0))

    return _result(out, "relu", [x], backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    active = _gate(x.data)
    s = x.dtype.type(slope)
    out = np.where(active, x.data, x.data * s)

    def backward(g):
        _accumulate(x, np.where(active, g, g * s))

    return _result(out, "leaky_relu", [x], backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, "add", [a, b], backward)


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant (scalar or broadcastable array)."""
    x = _as_tensor(x)
    f = np.asarray(factor, dtype=x.dtype)

    def backward(g):
        gx = g * f
        if gx.shape != x.shape:
            gx = np.broadcast_to(gx, x.shape)
        _accumulate(x, gx)

    return _result(x.data * f, "scale", [x], backward)


def concat_channels(*xs: Tensor) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if len({x.shape[:-1] for x in xs}) != 1:
        raise ValueError("concat_channels needs matching spatial shapes")
    sizes = [x.shape[-1] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            _accumulate(x, g[..., lo:hi])

    return _result(np.concatenate([x.data for x in xs], axis=-1), "concat", xs, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel range ``[start, stop)``; adjoint of concatenation."""
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise ValueError(f"bad channel slice [{start}, {stop}) of {x.shape[-1]}")

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop] = g
        _accumulate(x, full)

    return _result(np.ascontiguousarray(x.data[..., start:stop]), "slice", [x], backward)


# -- trilinear x2 upsampling ---------------------------------------------------

def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """Half-pixel (align-corners-false) linear doubling along ``axis``."""
    a = np.moveaxis(a, axis, 0)
    prev = np.concatenate([a[:1], a[:-1]], axis=0)
    nxt = np.concatenate([a[1:], a[-1:]], axis=0)
    out = np.empty((2 * a.shape[0],) + a.shape[1:], dtype=a.dtype)
    out[0::2] = 0.75 * a + 0.25 * prev
    out[1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    even, odd = g[0::2], g[1::2]
    gx = 0.75 * (even + odd)
    gx[:-1] += 0.25 * even[1:]
    gx[0] += 0.25 * even[0]
    gx[1:] += 0.25 * odd[:-1]
    gx[-1] += 0.25 * odd[-1]
    return np.moveaxis(gx, 0, axis)


def upsample2_array(a: np.ndarray, axes: Iterable[int] = (1, 2, 3)) -> np.ndarray:
    for ax in axes:
        a = _up_axis(a, ax)
    return np.ascontiguousarray(a)


def upsample2_trilinear(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = upsample2_array(x.data)

    def backward(g):
        for ax in (3, 2, 1):
            g = _up_axis_adjoint(g, ax)
        _accumulate(x, g)

    return _result(out, "upsample2", [x], backward)


# -- reductions ----------------------------------------------------------------

def weighted_sum(x: Tensor, weights) -> Tensor:
    """``sum(weights * x)`` with constant, broadcastable weights."""
    x = _as_tensor(x)
    wts = np.asarray(weights, dtype=x.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g * wts, x.shape))

    return _result(np.asarray(np.sum(x.data * wts), dtype=x.dtype), "weighted_sum", [x], backward)


def weighted_sq_error(pred: Tensor, target: np.ndarray, weights) -> Tensor:
    """``sum(weights * (pred - target)**2)`` with constant target and weights."""
    pred = _as_tensor(pred)
    diff = pred.data - np.asarray(target, dtype=pred.dtype)
    wts = np.asarray(weights, dtype=pred.dtype)

    def backward(g):
        _accumulate(pred, np.broadcast_to(2 * g * wts * diff, pred.shape))

    return _result(np.asarray(np.sum(wts * diff * diff), dtype=pred.dtype), "weighted_sq_error",
                   [pred], backward)


def sum_squares(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    total = sum(float(np.vdot(t.data, t.data)) for t in tensors)

    def backward(g):
        for t in tensors:
            _accumulate(t, 2 * g * t.data)

    dtype = tensors[0].dtype if tensors else np.float64
    return _result(np.asarray(total, dtype=dtype), "sum_squares", tensors, backward)


def add_scalars(*xs: Tensor, coeffs: Optional[Sequence[float]] = None) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    coeffs = [1.0] * len(xs) if coeffs is None else list(coeffs)
    if any(x.data.size != 1 for x in xs):
        raise ValueError("add_scalars takes scalar tensors")
    total = sum(c * x.data.reshape(()) for c, x in zip(coeffs, xs))

    def backward(g):
        for c, x in zip(coeffs, xs):
            _accumulate(x, np.reshape(g * c, x.shape))

    return _result(np.asarray(total, dtype=xs[0].dtype), "add_scalars", xs, backward)


# -- graph traversal -----------------------------------------------------------

def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """Reverse-mode accumulation from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every tensor that requires them.
    If ``params`` is given their gradients are returned in order, with zeros
    for parameters the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            if not np.all(np.isfinite(node.grad)):
                raise NonFiniteError(f"non-finite gradient at {node.op}")
            node._backward(node.grad)
            node.grad = None
            node._backward = None
    # intermediate buffers are no longer needed
    for node in order:
        if node._parents:
            node._backward = None
            node._parents = ()
            node.grad = None
    if params is None:
        return []
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# -- finite-difference verification -------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: Tuple[int, ...]
    n_checked: int
    tolerance: float
    n_kinked: int = 0  # samples whose +-step probes crossed a rectifier kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(model, inputs: Sequence[np.ndarray], tolerance: float = 1e-4, n_samples: int = 200,
               step: float = 1e-4, seed: int = 0, freeze_gates: bool = True) -> GradCheckReport:
    """Compare backprop against central differences on sampled parameters.

    ``model`` exposes ``params`` (a :class:`~f4flow.models.ParameterSet` or a
    name->array mapping) and ``forward(*tensors, params=...) -> Tensor``. The
    scalar probe is a fixed random projection of the output. Must be run in
    float64.

    A rectifier network is piecewise linear in each weight, and a probe of
    width ``step`` can straddle a kink, where the difference quotient no
    longer estimates the derivative at the base point. With
    ``freeze_gates`` the perturbed evaluations replay the activation pattern
    of the unperturbed pass, so they stay on the linear piece whose slope
    backprop computes. Samples that would have crossed a kink are counted in
    ``n_kinked`` either way.
    """
    from .oracles import finite_diff_grad

    params = model.params
    arrays = dict(params.items())
    if any(a.dtype != np.float64 for a in arrays.values()):
        raise TypeError("grad_check requires a float64 model")
    rng = np.random.default_rng(seed)
    tape = GateTape()

    def run(track: bool):
        leaves = {k: Tensor(v, requires_grad=track, name=k) for k, v in arrays.items()}
        out = model.forward(*[Tensor(np.asarray(i, dtype=np.float64)) for i in inputs], params=leaves)
        return leaves, out

    with tape:
        leaves, out = run(True)
    probe = rng.standard_normal(out.shape)
    loss = weighted_sum(out, probe)
    names = list(arrays)
    grads = dict(zip(names, backward(loss, [leaves[k] for k in names])))

    # every tensor gets at least one sample; the rest are spread by size
    sizes = np.array([arrays[k].size for k in names])
    picks: List[Tuple[str, Tuple[int, ...]]] = []
    for k in names:
        picks.append((k, tuple(int(i) for i in np.unravel_index(rng.integers(arrays[k].size), arrays[k].shape))))
    extra = max(n_samples - len(picks), 0)
    which = rng.choice(len(names), extra, p=sizes / sizes.sum())
    for j in which:
        k = names[j]
        picks.append((k, tuple(int(i) for i in np.unravel_index(rng.integers(arrays[k].size), arrays[k].shape))))

    crossed: List[int] = []

    def f():
        tape.crossings = 0
        if freeze_gates:
            with tape:
                _, o = run(False)
        else:
            # still replay-free, but count crossings against the recorded pattern
            probe_tape = GateTape()
            with probe_tape:
                _, o = run(False)
            tape.crossings = sum(int(np.count_nonzero(a != b)) for a, b in zip(probe_tape.masks, tape.masks))
        crossed.append(tape.crossings)
        return float(np.sum(o.data * probe))

    numeric = finite_diff_grad(f, arrays, step=step, indices=picks)
    n_kinked = sum(1 for i in range(len(picks)) if crossed[2 * i] or crossed[2 * i + 1])
    worst = (0.0, names[0], picks[0][1])
    for (k, idx), n_val in zip(picks, numeric):
        a_val = float(grads[k][idx])
        rel = abs(a_val - n_val) / (abs(a_val) + abs(n_val) + 1e-12)
        if rel >= worst[0]:
            worst = (rel, k, idx)
    return GradCheckReport(worst[0], worst[1], worst[2], len(picks), tolerance, n_kinked)


def adjoint_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                  step: float = 1e-6) -> float:
    """Dot-product test of an op's backward pass.

    With random directions ``u`` (one per input) and ``v`` (output shape),
    compares ``<J u, v>`` against ``<u, J^T v>``. ``J u`` comes from a
    central difference along ``u``, which is exact for ops that are linear,
    bilinear or quadratic in their inputs and for piecewise-linear ops away
    from kinks. Returns the relative mismatch; inputs must be float64.
    """
    rng = np.random.default_rng(seed)
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    us = [rng.standard_normal(x.shape) for x in xs]
    leaves = [Tensor(x, requires_grad=True) for x in xs]
    out = fn(*leaves)
    v = rng.standard_normal(out.shape)
    grads = backward(weighted_sum(out, v), leaves)
    plus = fn(*[Tensor(x + step * u) for x, u in zip(xs, us)]).data
    minus = fn(*[Tensor(x - step * u) for x, u in zip(xs, us)]).data
    lhs = float(np.sum((plus - minus) / (2 * step) * v))
    rhs = float(sum(np.sum(u * g) for u, g in zip(us, grads)))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
