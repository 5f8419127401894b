"""Evaluation metrics, whole-volume stitching and the report formats.

RE is the mean over fluid voxels of ``tanh(|V' - V| / (|V| + eps))``; the
regression is least squares through the origin per component.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import upsample2_array
from .patches import COMPARTMENT_NAMES, PATCH_LR, PatchSet
from .synth import NoiseSpec, synthesize_pair
from .volume import FlowSample, FluidMask, ScalarField, VectorField, VolumeGrid, _atomic_write

RE_EPS = 1e-4
STITCH_STRIDE = 8
STITCH_RIM = 4

REPORT_COLUMNS = (
    "model", "domain", "n_fluid", "n_nonfluid", "re",
    "rmse_x_fluid", "rmse_y_fluid", "rmse_z_fluid",
    "rmse_x_nonfluid", "rmse_y_nonfluid", "rmse_z_nonfluid",
    "k_x", "k_y", "k_z", "r2_x", "r2_y", "r2_z",
)


class DegenerateReferenceError(ValueError):
    code = "degenerate-reference"


def _stack(field) -> np.ndarray:
    """``(3, ...)`` float64 view of a VectorField or array."""
    if isinstance(field, VectorField):
        return field.stack().astype(np.float64)
    arr = np.asarray(field, dtype=np.float64)
    if arr.shape[0] != 3:
        raise ValueError(f"expected a leading component axis of 3, got {arr.shape}")
    return arr


def _region(mask) -> np.ndarray:
    return np.asarray(mask.fluid if isinstance(mask, FluidMask) else mask, dtype=bool)


def _aligned(pred, ref, mask):
    if isinstance(pred, VectorField) and isinstance(ref, VectorField) and pred.grid != ref.grid:
        raise ValueError("pred and ref live on different grids")
    p, r, m = _stack(pred), _stack(ref), _region(mask)
    if p.shape != r.shape or p.shape[1:] != m.shape:
        raise ValueError(f"misaligned inputs {p.shape}, {r.shape}, mask {m.shape}")
    return p, r, m


def relative_error(pred, ref, region, eps: float = RE_EPS) -> float:
    """Mean tanh-damped relative speed error over ``region``."""
    p, r, m = _aligned(pred, ref, region)
    if not m.any():
        raise ValueError("empty region")
    diff = np.sqrt(np.sum((p[:, m] - r[:, m]) ** 2, axis=0))
    norm = np.sqrt(np.sum(r[:, m] ** 2, axis=0))
    return float(np.mean(np.tanh(diff / (norm + eps))))


def rmse_regions(pred, ref, mask):
    """Per-component RMSE over fluid and non-fluid voxels; ``None`` for an empty region."""
    p, r, m = _aligned(pred, ref, mask)
    out = []
    for region in (m, ~m):
        if not region.any():
            out.append(None)
            continue
        d = p[:, region] - r[:, region]
        out.append(tuple(float(v) for v in np.sqrt(np.mean(d * d, axis=1))))
    return tuple(out)


def _regress(x: np.ndarray, y: np.ndarray, axis: str) -> Tuple[float, float]:
    sxx = float(np.dot(x, x))
    if sxx == 0.0:
        raise DegenerateReferenceError(f"degenerate-reference: component {axis} is all zero")
    k = float(np.dot(x, y)) / sxx
    ss_res = float(np.sum((y - k * x) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return k, (1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan)


def regression_stats(pred, ref, mask):
    """Through-origin slope ``k`` and ``R^2`` per component over fluid voxels."""
    p, r, m = _aligned(pred, ref, mask)
    ks, r2s = zip(*(_regress(r[c][m], p[c][m], "xyz"[c]) for c in range(3)))
    return tuple(ks), tuple(r2s)


def _regression_or_nan(pred, ref, mask):
    # reports keep going when one component is identically zero (planar flow)
    p, r, m = _aligned(pred, ref, mask)
    ks, r2s = [], []
    for c in range(3):
        try:
            k, r2 = _regress(r[c][m], p[c][m], "xyz"[c])
        except DegenerateReferenceError:
            k, r2 = math.nan, math.nan
        ks.append(k)
        r2s.append(r2)
    return tuple(ks), tuple(r2s)


@dataclass(frozen=True)
class EvalReport:
    re: float
    rmse_fluid: Optional[Tuple[float, float, float]]
    rmse_nonfluid: Optional[Tuple[float, float, float]]
    k: Tuple[float, float, float]
    r2: Tuple[float, float, float]
    n_fluid: int
    n_nonfluid: int
    model: str = ""
    domain: str = ""

    def row(self) -> List[str]:
        def f(v):
            return "" if v is None else repr(float(v))

        rf = self.rmse_fluid or (None,) * 3
        rn = self.rmse_nonfluid or (None,) * 3
        return ([self.model, self.domain, str(self.n_fluid), str(self.n_nonfluid), f(self.re)]
                + [f(v) for v in rf] + [f(v) for v in rn] + [f(v) for v in self.k] + [f(v) for v in self.r2])


def evaluate_fields(pred, ref, mask, model: str = "", domain: str = "") -> EvalReport:
    m = _region(mask)
    fluid, nonfluid = rmse_regions(pred, ref, m)
    k, r2 = _regression_or_nan(pred, ref, m)
    n = int(m.sum())
    return EvalReport(relative_error(pred, ref, m), fluid, nonfluid, k, r2, n, int(m.size - n), model, domain)


def evaluate_patches(pred: np.ndarray, ps: PatchSet, model: str = "", domain: str = "") -> EvalReport:
    """Metrics over all HR voxels of a patch set, patches treated as one region."""
    pred = np.asarray(pred)
    if pred.shape != ps.hr_vel.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match targets {ps.hr_vel.shape}")
    p = np.moveaxis(pred, 1, 0).reshape(3, -1)
    r = np.moveaxis(ps.hr_vel, 1, 0).reshape(3, -1)
    if not domain:
        domain = "+".join(ps.compartment_labels())
    return evaluate_fields(p, r, ps.hr_mask.reshape(-1), model, domain)


# -- tile predictors --------------------------------------------------------------

class TilePredictor:
    """Anything stitched by :func:`stitch_sr`.

    ``predict_tiles`` takes ``lr_vel (N,3,p,p,p)``, ``lr_mag (N,p,p,p)``,
    ``venc (N,)`` and tile ``origins (N,3)`` in LR ``(z, y, x)`` voxels and
    returns ``(N,3,2p,2p,2p)`` velocities in cm/s.
    """

    name = "model"

    def predict_tiles(self, lr_vel, lr_mag, venc, origins) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


class OracleStub(TilePredictor):
    """Returns the ground-truth HR tile at each origin (plumbing check)."""

    name = "oracle-stub"

    def __init__(self, reference: VectorField):
        self.reference = reference.stack()

    def predict_tiles(self, lr_vel, lr_mag, venc, origins):
        p = np.asarray(lr_vel).shape[-1]
        h = 2 * p
        return np.stack([self.reference[:, 2 * z:2 * z + h, 2 * y:2 * y + h, 2 * x:2 * x + h]
                         for z, y, x in np.asarray(origins)])


class TrilinearStub(TilePredictor):
    """Trilinear x2 upsampling of the LR velocities; the interpolation baseline."""

    name = "trilinear-stub"

    def predict_tiles(self, lr_vel, lr_mag, venc, origins):
        return upsample2_array(np.asarray(lr_vel, dtype=np.float32), axes=(2, 3, 4))


class CallablePredictor(TilePredictor):
    """Wraps ``fn(lr_vel, lr_mag, venc) -> hr`` (networks and ensembles)."""

    def __init__(self, fn, name: str = "model"):
        self.fn = fn
        self.name = name

    def predict_tiles(self, lr_vel, lr_mag, venc, origins):
        return self.fn(lr_vel, lr_mag, venc)


def as_predictor(model, name: Optional[str] = None) -> TilePredictor:
    """Adapt networks, estimators and ensembles to :class:`TilePredictor`."""
    if isinstance(model, TilePredictor):
        return model
    from .models import BaseSRNet, forward_sr
    if isinstance(model, BaseSRNet):
        return CallablePredictor(lambda v, m, venc: forward_sr(model, v, m, venc), name or "base")
    if hasattr(model, "predict_arrays"):
        return CallablePredictor(model.predict_arrays, name or type(model).__name__)
    if callable(model):
        return CallablePredictor(model, name or getattr(model, "__name__", "model"))
    raise TypeError(f"cannot use {type(model).__name__} as a tile predictor")


def tile_origins(n: int, patch: int = PATCH_LR, stride: int = STITCH_STRIDE) -> List[int]:
    """Window starts along one axis; the last window is flush with the far edge."""
    if n < patch:
        raise ValueError(f"axis of {n} voxels is smaller than one {patch}-voxel patch")
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] + patch < n:
        starts.append(n - patch)
    return starts


def _kept_range(start: int, patch: int, n: int, rim: int) -> Tuple[int, int]:
    """HR index range (relative to the tile) that a tile contributes."""
    h = 2 * patch
    lo = rim if start > 0 else 0
    hi = h - rim if start + patch < n else h
    return lo, hi


def stitch_sr(model, lr: FlowSample, patch: int = PATCH_LR, stride: int = STITCH_STRIDE,
              rim: int = STITCH_RIM, batch_size: int = 16) -> VectorField:
    """Super-resolve a whole LR volume tile by tile.

    Tiles of ``patch`` LR voxels at ``stride`` are predicted, a ``rim``-voxel
    HR margin is dropped on faces interior to the volume, and overlapping
    contributions are averaged in float64.
    """
    pred = as_predictor(model)
    nz, ny, nx = lr.grid.shape
    starts = [tile_origins(n, patch, stride) for n in (nz, ny, nx)]
    origins = np.array([(z, y, x) for z in starts[0] for y in starts[1] for x in starts[2]], dtype=np.int64)
    vel = lr.velocity.stack()
    mag = lr.magnitude.values
    acc = np.zeros((3, 2 * nz, 2 * ny, 2 * nx), dtype=np.float64)
    cnt = np.zeros((2 * nz, 2 * ny, 2 * nx), dtype=np.float64)
    for s in range(0, len(origins), batch_size):
        chunk = origins[s:s + batch_size]
        v = np.stack([vel[:, z:z + patch, y:y + patch, x:x + patch] for z, y, x in chunk])
        m = np.stack([mag[z:z + patch, y:y + patch, x:x + patch] for z, y, x in chunk])
        out = np.asarray(pred.predict_tiles(v, m, np.full(len(chunk), lr.venc, np.float32), chunk))
        for tile, (z, y, x) in zip(out, chunk):
            (z0, z1), (y0, y1), (x0, x1) = (_kept_range(o, patch, n, rim)
                                            for o, n in zip((z, y, x), (nz, ny, nx)))
            dst = (slice(2 * z + z0, 2 * z + z1), slice(2 * y + y0, 2 * y + y1), slice(2 * x + x0, 2 * x + x1))
            acc[(slice(None),) + dst] += tile[:, z0:z1, y0:y1, x0:x1]
            cnt[dst] += 1.0
    if np.any(cnt == 0):
        raise RuntimeError("stitching left HR voxels uncovered")
    out = acc / cnt
    grid = VolumeGrid(2 * nx, 2 * ny, 2 * nz, lr.grid.dx / 2)
    return VectorField(grid, *(out[c].astype(np.float32) for c in range(3)))


def recover_native_eval(native: FlowSample, model, noise: Optional[NoiseSpec] = None,
                        model_name: Optional[str] = None, **stitch_kw) -> EvalReport:
    """Downsample a native-resolution sample by k-space truncation, super-resolve
    it back and score the result against the native velocities."""
    if any(n % 4 for n in native.grid.shape):
        raise ValueError(f"native dims {native.grid.shape} must be divisible by 4")
    lr = synthesize_pair(native, noise if noise is not None else NoiseSpec(math.inf)).lr
    predictor = as_predictor(model, model_name)
    sr = stitch_sr(predictor, lr, **stitch_kw)
    return evaluate_fields(sr.stack(), native.velocity.stack(), native.mask,
                           model_name or predictor.name, native.compartment)


# -- reports and slices -----------------------------------------------------------

def format_report(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(REPORT_COLUMNS)
    for r in reports:
        wr.writerow(r.row())
    return buf.getvalue()


def export_report(reports: Sequence[EvalReport], path) -> None:
    _atomic_write(path, format_report(reports).encode())


def read_report(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError("unexpected report header")
        return [dict(zip(header, row)) for row in rd]


def _slice_plane(field, axis: str, index: int) -> np.ndarray:
    axes = {"z": 0, "y": 1, "x": 2}
    if axis not in axes:
        raise ValueError("axis must be one of x, y, z")
    if isinstance(field, VectorField):
        vol = np.sqrt(sum(c.astype(np.float64) ** 2 for c in (field.vx, field.vy, field.vz)))
    elif isinstance(field, ScalarField):
        vol = field.values
    else:
        vol = np.asarray(field)
        if vol.ndim != 3:
            raise ValueError("expected a 3D array")
    return np.take(vol, index, axis=axes[axis])


def export_slice(field, axis: str, index: int, path, fmt: Optional[str] = None) -> None:
    """Write one plane: 8-bit PGM (min-max scaled, scale in ``path + '.scale'``)
    or CSV of raw float32 values. Vector fields export their speed."""
    plane = _slice_plane(field, axis, index)
    fmt = fmt or ("csv" if os.fspath(path).endswith(".csv") else "pgm")
    if fmt == "csv":
        buf = io.StringIO()
        for row in plane.astype(np.float32):
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        _atomic_write(path, buf.getvalue().encode())
        return
    if fmt != "pgm":
        raise ValueError(f"unknown slice format {fmt!r}")
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        img = np.round((plane - lo) / (hi - lo) * 255.0)
    else:
        img = np.full(plane.shape, 128.0)
    data = img.astype(np.uint8)
    h, w = data.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
    _atomic_write(os.fspath(path) + ".scale", f"min={lo!r} max={hi!r}\n".encode())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8, w * h).reshape(h, w)


def domain_name(code: int) -> str:
    return COMPARTMENT_NAMES[int(code)]
