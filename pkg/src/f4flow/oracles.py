"""Naive reference implementations used to cross-check the fast paths.

Nothing here imports production numerics; agreement between the two is the
evidence. Everything is double precision and meant for inputs up to 16^3.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


@dataclass
class OracleReport:
    max_abs: float
    max_rel: float
    worst_index: Tuple[int, ...]


def compare(fast, reference) -> OracleReport:
    fast = np.asarray(fast)
    reference = np.asarray(reference)
    if fast.shape != reference.shape:
        raise ValueError(f"shape mismatch {fast.shape} vs {reference.shape}")
    diff = np.abs(fast - reference)
    scale = max(float(np.max(np.abs(reference))), 1e-300)
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape) if diff.size else ()
    return OracleReport(float(diff.max(initial=0.0)), float(diff.max(initial=0.0)) / scale,
                        tuple(int(i) for i in idx))


def dft3_direct(volume: np.ndarray) -> np.ndarray:
    """Unnormalized forward 3D DFT by the triple sum, one output row at a time.

    ``F[k] = sum_x f[x] * exp(-2 pi i sum_a k_a x_a / n_a)``
    """
    f = np.asarray(volume, dtype=np.complex128)
    shape = f.shape
    xs = np.indices(shape).reshape(3, -1).astype(np.float64)
    flat = f.reshape(-1)
    n = np.asarray(shape, dtype=np.float64)[:, None]
    out = np.empty(flat.size, dtype=np.complex128)
    ks = np.indices(shape).reshape(3, -1).astype(np.float64)
    for j in range(flat.size):
        phase = np.sum(ks[:, j:j + 1] * xs / n, axis=0)
        out[j] = np.sum(flat * np.exp(-2j * np.pi * phase))
    return out.reshape(shape)


def _idft3_from_freqs(coeffs: np.ndarray, freqs: Sequence[np.ndarray], out_shape) -> np.ndarray:
    """Inverse sum over signed frequencies onto a grid of ``out_shape``."""
    kz, ky, kx = np.meshgrid(*freqs, indexing="ij")
    ks = np.stack([kz.ravel(), ky.ravel(), kx.ravel()]).astype(np.float64)
    c = coeffs.reshape(-1)
    xs = np.indices(out_shape).reshape(3, -1).astype(np.float64)
    n = np.asarray(out_shape, dtype=np.float64)[:, None]
    out = np.empty(xs.shape[1], dtype=np.complex128)
    for j in range(xs.shape[1]):
        phase = np.sum(ks * xs[:, j:j + 1] / n, axis=0)
        out[j] = np.sum(c * np.exp(2j * np.pi * phase))
    return out.reshape(out_shape) / float(np.prod(out_shape))


def kspace_crop_direct(volume: np.ndarray, factor: int = 2) -> np.ndarray:
    """Direct-DFT low-pass crop: keep frequencies -(m//2)..(m-1)//2 per axis,
    invert on the ``m = n/factor`` grid, divide by ``factor**3``."""
    f = np.asarray(volume, dtype=np.complex128)
    spec = dft3_direct(f)
    freqs = []
    for n in f.shape:
        m = n // factor
        freqs.append(np.arange(-(m // 2), (m - 1) // 2 + 1))
    idx = np.ix_(*[np.mod(k, n) for k, n in zip(freqs, f.shape)])
    small_shape = tuple(n // factor for n in f.shape)
    return _idft3_from_freqs(spec[idx], freqs, small_shape) / factor ** 3


def finite_diff_grad(f: Callable[[], float], params: Dict[str, np.ndarray], step: float = 1e-4,
                     indices: Optional[Sequence[Tuple[str, Tuple[int, ...]]]] = None):
    """Central differences of ``f`` w.r.t. entries of ``params`` (perturbed in place).

    With ``indices`` a list of estimates is returned; otherwise a dict of full
    gradient arrays.
    """
    def one(name, idx):
        arr = params[name]
        old = arr[idx]
        arr[idx] = old + step
        up = f()
        arr[idx] = old - step
        down = f()
        arr[idx] = old
        return (up - down) / (2 * step)

    if indices is not None:
        return [one(name, tuple(idx)) for name, idx in indices]
    out = {}
    for name, arr in params.items():
        g = np.zeros(arr.shape, dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            g[idx] = one(name, idx)
        out[name] = g
    return out


def _components(field) -> np.ndarray:
    if hasattr(field, "stack"):
        return np.asarray(field.stack(), dtype=np.float64)
    return np.asarray(field, dtype=np.float64)


def metrics_naive(pred, ref, mask, eps: float = 1e-4) -> Dict[str, object]:
    """RE, per-region RMSE and through-origin regression by explicit voxel loops.

    ``pred``/``ref`` are ``(3, ...)`` arrays (or objects with ``stack()``);
    ``mask`` marks fluid voxels. Regression uses fluid voxels.
    """
    if hasattr(pred, "grid") and hasattr(ref, "grid") and pred.grid != ref.grid:
        raise ValueError("pred and ref live on different grids")
    p = _components(pred)
    r = _components(ref)
    m = np.asarray(getattr(mask, "fluid", mask), dtype=bool)
    if p.shape != r.shape or p.shape[1:] != m.shape:
        raise ValueError("mismatched grids")
    pf = [p[c].ravel().tolist() for c in range(3)]
    rf = [r[c].ravel().tolist() for c in range(3)]
    mf = m.ravel().tolist()

    re_sum, n_fluid, n_non = 0.0, 0, 0
    se_f = [0.0, 0.0, 0.0]
    se_n = [0.0, 0.0, 0.0]
    for i, is_fluid in enumerate(mf):
        if is_fluid:
            n_fluid += 1
            diff = 0.0
            norm = 0.0
            for c in range(3):
                d = pf[c][i] - rf[c][i]
                diff += d * d
                norm += rf[c][i] * rf[c][i]
                se_f[c] += d * d
            re_sum += math.tanh(math.sqrt(diff) / (math.sqrt(norm) + eps))
        else:
            n_non += 1
            for c in range(3):
                d = pf[c][i] - rf[c][i]
                se_n[c] += d * d

    k, r2 = [], []
    for c in range(3):
        sxy = sxx = 0.0
        xs, ys = [], []
        for i, is_fluid in enumerate(mf):
            if is_fluid:
                sxy += rf[c][i] * pf[c][i]
                sxx += rf[c][i] * rf[c][i]
                xs.append(rf[c][i])
                ys.append(pf[c][i])
        if sxx == 0.0:
            k.append(float("nan"))
            r2.append(float("nan"))
            continue
        slope = sxy / sxx
        mean_y = sum(ys) / len(ys)
        ss_res = sum((y - slope * x) ** 2 for x, y in zip(xs, ys))
        ss_tot = sum((y - mean_y) ** 2 for y in ys)
        k.append(slope)
        r2.append(1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan"))

    return {
        "re": re_sum / n_fluid if n_fluid else float("nan"),
        "rmse_fluid": tuple(math.sqrt(s / n_fluid) for s in se_f) if n_fluid else None,
        "rmse_nonfluid": tuple(math.sqrt(s / n_non) for s in se_n) if n_non else None,
        "k": tuple(k),
        "r2": tuple(r2),
        "n_fluid": n_fluid,
        "n_nonfluid": n_non,
    }


def adam_reference(w0: Sequence[float], grads: Sequence[Sequence[float]], lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> List[List[float]]:
    """Textbook Adam over plain Python floats; returns the trajectory."""
    w = [float(x) for x in w0]
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    path = []
    for t, g in enumerate(grads, start=1):
        for i, gi in enumerate(g):
            m[i] = beta1 * m[i] + (1 - beta1) * gi
            v[i] = beta2 * v[i] + (1 - beta2) * gi * gi
            m_hat = m[i] / (1 - beta1 ** t)
            v_hat = v[i] / (1 - beta2 ** t)
            w[i] = w[i] - lr * m_hat / (math.sqrt(v_hat) + eps)
        path.append(list(w))
    return path


def bootstrap_distinct_fraction(indices: Sequence[int], n: int) -> float:
    seen = set()
    for i in indices:
        seen.add(int(i))
    return len(seen) / float(n)


def expected_distinct_fraction(n: int) -> float:
    """``1 - (1 - 1/n)^n``, tending to ``1 - 1/e``."""
    return 1.0 - (1.0 - 1.0 / n) ** n
