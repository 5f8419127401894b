"""Analytic flow phantoms standing in for patient-specific CFD models.

Four families, each mapped to a cardiovascular compartment analog:

=============  ===============  =============================================
family         compartment      geometry
=============  ===============  =============================================
tube-jet       aortic           straight tube, Poiseuille profile, stenosis
branch-slow    cerebrovascular  2-4 thin branching tubes, slow flow
cavity-vortex  cardiac          ellipsoidal cavity with a decaying swirl
dual-lumen     dissection       curved true/false lumen sharing an inlet
=============  ===============  =============================================

``dual-lumen`` is the held-out family used for unseen-domain evaluation.
"""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .volume import FlowSample, FluidMask, ScalarField, VectorField, VolumeGrid

FAMILIES = ("tube-jet", "branch-slow", "cavity-vortex", "dual-lumen")

COMPARTMENTS = {
    "tube-jet": "aortic",
    "branch-slow": "cerebrovascular",
    "cavity-vortex": "cardiac",
    "dual-lumen": "dissection",
}

# default peak speeds in cm/s; branch-slow stays below a quarter of tube-jet
DEFAULT_PEAK = {
    "tube-jet": 120.0,
    "branch-slow": 28.0,
    "cavity-vortex": 60.0,
    "dual-lumen": 100.0,
}

DEFAULT_VENC_CANDIDATES = (25.0, 50.0, 75.0, 100.0, 150.0, 200.0, 300.0)
VENC_SAFETY = 1.05

FLUID_MAGNITUDE = 1.0
BACKGROUND_MAGNITUDE = 0.05


class VencSaturationWarning(UserWarning):
    """No candidate VENC clears the maximum velocity; aliasing is possible."""


class PhantomGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one analytic phantom.

    Unset geometry (``None``) is derived from the grid and ``seed``. Radii are
    in voxels, ``center`` is an ``(x, y, z)`` voxel coordinate and
    ``direction`` an ``(x, y, z)`` vector.
    """

    family: str
    grid: VolumeGrid = VolumeGrid(48, 48, 48, 1.5)
    peak_speed: Optional[float] = None
    radius: Optional[float] = None
    severity: float = 0.0
    center: Optional[Tuple[float, float, float]] = None
    direction: Optional[Tuple[float, float, float]] = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown phantom family {self.family!r}; "
                             f"expected one of {', '.join(FAMILIES)}")
        if self.peak_speed is not None and not self.peak_speed > 0:
            raise ValueError("peak_speed must be positive")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("stenosis severity must lie in [0, 1]")
        if self.radius is not None and not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def peak(self) -> float:
        return float(self.peak_speed if self.peak_speed is not None
                     else DEFAULT_PEAK[self.family])

    @property
    def compartment(self) -> str:
        return COMPARTMENTS[self.family]


def choose_venc(max_abs_component: float, candidates: Sequence[float] = DEFAULT_VENC_CANDIDATES) -> float:
    """Smallest candidate at least 5% above the peak velocity component.

    Falls back to the largest candidate with a :class:`VencSaturationWarning`.
    """
    cands = [float(c) for c in candidates]
    if not cands:
        raise ValueError("empty VENC candidate list")
    if any(c <= 0 for c in cands):
        raise ValueError("VENC candidates must be positive")
    if any(b < a for a, b in zip(cands, cands[1:])):
        raise ValueError("VENC candidates must be ascending")
    need = VENC_SAFETY * float(max_abs_component)
    for c in cands:
        if c >= need:
            return c
    warnings.warn(f"max velocity {max_abs_component:.3g} cm/s exceeds every VENC "
                  f"candidate; using {cands[-1]:g}", VencSaturationWarning, stacklevel=2)
    return cands[-1]


def _coords(grid: VolumeGrid):
    z, y, x = np.indices(grid.shape, dtype=np.float64)
    return np.stack([x, y, z], axis=-1)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise PhantomGeometryError("zero direction vector")
    return v / n


def _grid_center(grid: VolumeGrid) -> np.ndarray:
    # integer centre for even grids so an axial voxel exists
    return np.array([grid.nx // 2, grid.ny // 2, grid.nz // 2], dtype=np.float64)


def _check_fits(grid: VolumeGrid, center, radius, axes) -> None:
    extent = np.array([grid.nx, grid.ny, grid.nz], dtype=np.float64)
    for a in axes:
        if center[a] - radius < 0 or center[a] + radius > extent[a] - 1:
            raise PhantomGeometryError(
                f"radius {radius:g} around {center[a]:g} exceeds grid extent {extent[a]:g} on axis {'xyz'[a]}")


def _segment_poiseuille(p, a, b, radius, peak):
    """Poiseuille speed and unit direction for the segment a->b (capped ends)."""
    d = b - a
    length = np.linalg.norm(d)
    d = d / length
    rel = p - a
    s = rel @ d
    inside_span = (s >= 0) & (s <= length)
    radial = rel - s[..., None] * d
    r = np.linalg.norm(radial, axis=-1)
    frac = r / radius
    speed = np.where(inside_span & (frac < 1), peak * (1 - frac ** 2), 0.0)
    return speed, frac, d


def _tube_jet(spec: PhantomSpec, rng, pts):
    g = spec.grid
    n_min = min(g.nx, g.ny, g.nz)
    radius = spec.radius if spec.radius is not None else round(0.2 * n_min)
    if spec.center is not None:
        center = np.asarray(spec.center, dtype=np.float64)
    else:
        center = _grid_center(g) + np.round(rng.uniform(-0.08, 0.08, 3) * n_min)
    if spec.direction is not None:
        d = _unit(spec.direction)
    else:
        d = _unit(np.array([0.0, 0.0, 1.0]) + rng.normal(0, 0.12, 3) * np.array([1, 1, 0]))
    axial = int(np.argmax(np.abs(d)))
    _check_fits(g, center, radius, [a for a in range(3) if a != axial])
    if spec.severity >= 1.0:
        raise PhantomGeometryError("severity 1 fully occludes the lumen")

    rel = pts - center
    s = rel @ d
    r = np.linalg.norm(rel - s[..., None] * d, axis=-1)
    # stenosis: cosine bump on the local radius, peak follows continuity
    s0 = rng.uniform(-0.15, 0.15) * n_min
    width = 2.0 * radius
    bump = np.where(np.abs(s - s0) < width, 0.5 * (1 + np.cos(np.pi * (s - s0) / width)), 0.0)
    local_r = radius * (1 - spec.severity * bump)
    local_peak = spec.peak * (radius / local_r) ** 2
    frac = r / local_r
    mask = frac < 1
    speed = np.where(mask, local_peak * (1 - frac ** 2), 0.0)
    vel = speed[..., None] * d
    return mask, vel


def _branch_slow(spec: PhantomSpec, rng, pts):
    g = spec.grid
    extent = np.array([g.nx, g.ny, g.nz], dtype=np.float64) - 1
    radius = spec.radius if spec.radius is not None else 3.0
    if radius > 3.0:
        raise PhantomGeometryError("branch-slow tubes are limited to radius <= 3 voxels")
    junction = (np.asarray(spec.center, dtype=np.float64) if spec.center is not None
                else _grid_center(g) + rng.uniform(-0.1, 0.1, 3) * extent)
    _check_fits(g, junction, radius, range(3))
    n_children = int(rng.integers(1, 4))
    parent_dir = _unit(spec.direction) if spec.direction is not None else _unit(
        np.array([0.0, 0.0, 1.0]) + rng.normal(0, 0.2, 3))
    # segments run boundary -> junction (parent), junction -> boundary (children)
    far = 2.0 * float(extent.max())
    segments = [(junction - far * parent_dir, junction, radius, spec.peak)]
    for k in range(n_children):
        spread = rng.normal(0, 0.6, 3)
        child = _unit(parent_dir + spread)
        if child @ parent_dir < 0.1:
            child = _unit(child + parent_dir)
        child_r = radius * (0.85 if n_children > 1 else 1.0)
        segments.append((junction, junction + far * child, child_r, 0.8 * spec.peak))

    best = np.full(pts.shape[:-1], np.inf)
    vel = np.zeros(pts.shape)
    for a, b, rad, peak in segments:
        speed, frac, d = _segment_poiseuille(pts, a, b, rad, peak)
        take = (frac < 1) & (frac < best) & (speed > 0)
        best = np.where(take, frac, best)
        vel = np.where(take[..., None], speed[..., None] * d, vel)
    # junction ball so parent and children connect without a gap
    jdist = np.linalg.norm(pts - junction, axis=-1) / radius
    mask = np.isfinite(best) | (jdist < 1)
    return mask, vel


def _cavity_vortex(spec: PhantomSpec, rng, pts):
    g = spec.grid
    extent = np.array([g.nx, g.ny, g.nz], dtype=np.float64)
    semi = extent * np.array([0.38, 0.34, 0.32]) * rng.uniform(0.9, 1.0, 3)
    if spec.radius is not None:
        semi = semi * (spec.radius / semi.min())
    center = (np.asarray(spec.center, dtype=np.float64) if spec.center is not None
              else _grid_center(g) + rng.uniform(-0.04, 0.04, 3) * extent)
    for a in range(3):
        _check_fits(g, center, semi[a], [a])
    axis = _unit(spec.direction) if spec.direction is not None else _unit(
        np.array([0.0, 0.0, 1.0]) + rng.normal(0, 0.25, 3))
    rel = pts - center
    mask = np.sum((rel / semi) ** 2, axis=-1) < 1
    radial = rel - (rel @ axis)[..., None] * axis
    r = np.linalg.norm(radial, axis=-1)
    core = 0.5 * semi.min()
    v_theta = spec.peak * (r / core) * np.exp(1 - r / core)
    tangent = np.cross(axis, radial)
    norm = np.linalg.norm(tangent, axis=-1)
    tangent = np.divide(tangent, norm[..., None], out=np.zeros_like(tangent),
                        where=norm[..., None] > 0)
    vel = np.where(mask[..., None], v_theta[..., None] * tangent, 0.0)
    return mask, vel


def _dual_lumen(spec: PhantomSpec, rng, pts):
    g = spec.grid
    n_min = min(g.nx, g.ny, g.nz)
    radius = spec.radius if spec.radius is not None else 0.11 * n_min
    x0 = g.nx / 2 + rng.uniform(-0.05, 0.05) * g.nx
    y0 = g.ny / 2 + rng.uniform(-0.05, 0.05) * g.ny
    amp = rng.uniform(0.04, 0.1) * g.nx
    phase = rng.uniform(0, 2 * np.pi)
    z_in = 0.3 * g.nz
    r_true, r_false = radius, radius * rng.uniform(1.1, 1.3)
    sep = r_true + r_false + 1.0
    _check_fits(g, np.array([x0, y0, 0.0]), amp + max(r_true, r_false), [0])
    _check_fits(g, np.array([x0, y0, 0.0]), sep / 2 + max(r_true, r_false), [1])
    p_true, p_false, p_inlet = spec.peak, 0.35 * spec.peak, 0.7 * spec.peak

    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    xc = x0 + amp * np.sin(2 * np.pi * z / g.nz + phase)
    dxc = amp * 2 * np.pi / g.nz * np.cos(2 * np.pi * z / g.nz + phase)
    tangent = np.stack([dxc, np.zeros_like(dxc), np.ones_like(dxc)], axis=-1)
    tangent /= np.linalg.norm(tangent, axis=-1, keepdims=True)
    # lumens diverge smoothly from the shared inlet
    t = np.clip((z - z_in) / (0.25 * g.nz), 0, 1)
    spread = t * t * (3 - 2 * t) * sep / 2

    speed = np.zeros(z.shape)
    mask = np.zeros(z.shape, dtype=bool)
    channels = [
        (z < z_in, y0, 0.5 * (r_true + r_false), p_inlet),
        (z >= z_in, y0 - spread, r_true, p_true),
        (z >= z_in, y0 + spread, r_false, p_false),
    ]
    for active, yc, rad, peak in channels:
        frac = np.hypot(x - xc, y - yc) / rad
        inside = active & (frac < 1)
        s = np.where(inside, peak * (1 - frac ** 2), 0.0)
        speed = np.maximum(speed, s)
        mask |= inside
    vel = speed[..., None] * tangent
    return mask, vel


_GENERATORS = {
    "tube-jet": _tube_jet,
    "branch-slow": _branch_slow,
    "cavity-vortex": _cavity_vortex,
    "dual-lumen": _dual_lumen,
}


def generate_phantom(spec: PhantomSpec, candidates: Sequence[float] = DEFAULT_VENC_CANDIDATES) -> FlowSample:
    """Voxelize the analytic phantom described by ``spec``.

    Velocity is zero outside the lumen mask; magnitude is 1.0 on fluid and
    0.05 on background. The VENC is picked with :func:`choose_venc`.
    """
    rng = np.random.default_rng(spec.seed)
    pts = _coords(spec.grid)
    mask, vel = _GENERATORS[spec.family](spec, rng, pts)
    if not mask.any():
        raise PhantomGeometryError("phantom lumen does not intersect the grid")
    vel = np.where(mask[..., None], vel, 0.0).astype(np.float32)
    grid = spec.grid
    velocity = VectorField(grid, vel[..., 0], vel[..., 1], vel[..., 2])
    magnitude = ScalarField(grid, np.where(mask, FLUID_MAGNITUDE, BACKGROUND_MAGNITUDE))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", VencSaturationWarning)
        venc = choose_venc(velocity.max_abs(), candidates)
    meta = {"family": spec.family, "seed": str(spec.seed)}
    if caught:
        meta["venc_saturated"] = "1"
        warnings.warn(str(caught[0].message), VencSaturationWarning, stacklevel=2)
    return FlowSample(magnitude, velocity, FluidMask(grid, mask), venc,
                      spec.compartment, 0, meta)


def default_schedule(n_frames: int) -> List[float]:
    """Cardiac-cycle-like amplitudes in (0, 1]; a single frame gets 1.0.

    Frames sample a skewed pulse ``(s/p)^2 exp(2 (1 - s/p))`` peaking at
    ``p = 1/3`` of the cycle (fast systolic rise, slow decay), so no two frames
    share an amplitude the way mirror-symmetric waveforms would.
    """
    if n_frames == 1:
        return [1.0]
    out = []
    for t in range(n_frames):
        r = 3.0 * (t + 0.5) / n_frames
        out.append(0.25 + 0.75 * r * r * math.exp(2.0 * (1.0 - r)))
    return out


def generate_sequence(spec: PhantomSpec, n_frames: int, amplitude_schedule: Optional[Sequence[float]] = None,
                      candidates: Sequence[float] = DEFAULT_VENC_CANDIDATES) -> List[FlowSample]:
    """Time frames of one phantom, velocity scaled per frame, VENC per frame."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    schedule = default_schedule(n_frames) if amplitude_schedule is None else list(amplitude_schedule)
    if not schedule:
        raise ValueError("empty amplitude schedule")
    if len(schedule) != n_frames:
        raise ValueError(f"schedule has {len(schedule)} entries for {n_frames} frames")
    if any(not 0 < a <= 1 for a in schedule):
        raise ValueError("schedule amplitudes must lie in (0, 1]")
    base = generate_phantom(spec, candidates)
    frames = []
    for t, amp in enumerate(schedule):
        a = np.float32(amp)
        vel = VectorField(base.grid, base.velocity.vx * a, base.velocity.vy * a, base.velocity.vz * a)
        meta = dict(base.meta)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", VencSaturationWarning)
            venc = choose_venc(vel.max_abs(), candidates)
        if caught:
            meta["venc_saturated"] = "1"
        else:
            meta.pop("venc_saturated", None)
        frames.append(FlowSample(base.magnitude, vel, base.mask, venc, base.compartment, t, meta))
    return frames


def model_name(spec: PhantomSpec) -> str:
    return f"{spec.family}-s{spec.seed}"


def write_manifest(path, rows, model: Optional[str] = None) -> None:
    """Plain-text frame manifest: ``path compartment frame venc`` per line."""
    from .volume import _atomic_write

    lines = [f"# model {model}"] if model else []
    for file_path, compartment, frame, venc in rows:
        lines.append(f"{file_path} {compartment} {int(frame)} {float(venc):g}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_manifest(path):
    """Return ``(model, rows)``; relative frame paths resolve against the manifest."""
    model = None
    rows = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "model":
                    model = parts[1]
                continue
            file_path, compartment, frame, venc = line.split()
            rows.append((os.path.join(base, file_path), compartment, int(frame), float(venc)))
    return model, rows


def with_grid(spec: PhantomSpec, n: int, dx: Optional[float] = None) -> PhantomSpec:
    return replace(spec, grid=VolumeGrid(n, n, n, dx if dx is not None else spec.grid.dx))
