"""Patch extraction, rotation augmentation, model-wise splitting and F4DP I/O."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .synth import SynthPair
from .volume import VolumeFormatError, _atomic_write

PATCH_LR = 12
FACTOR = 2
MIN_FLUID_FRAC = 0.05
DEFAULT_STRIDE = 6

COMPARTMENT_CODES = {"cardiac": 0, "aortic": 1, "cerebrovascular": 2, "dissection": 3}
COMPARTMENT_NAMES = {v: k for k, v in COMPARTMENT_CODES.items()}

F4DP_MAGIC = b"F4DP"
F4DP_VERSION = 1
_F4DP_HEADER = struct.Struct("<4sIHHQ")


def compartment_code(label: str) -> int:
    try:
        return COMPARTMENT_CODES[label]
    except KeyError:
        raise ValueError(f"unknown compartment {label!r}") from None


@dataclass(frozen=True, eq=False)
class PatchPair:
    """One low-resolution input patch and its aligned high-resolution target.

    Arrays are ``(z, y, x)`` ordered; velocity arrays carry a leading
    component axis ordered vx, vy, vz.
    """

    lr_mag: np.ndarray
    lr_vel: np.ndarray
    hr_vel: np.ndarray
    hr_mask: np.ndarray
    venc: float
    compartment: str
    source_model: int
    lr_mask: Optional[np.ndarray] = None


class PatchSet:
    """Column-oriented collection of patch pairs sharing one patch size.

    Indexing with an integer yields a :class:`PatchPair`; indexing with an
    array or slice yields a new :class:`PatchSet`.
    """

    def __init__(self, lr_mag, lr_vel, hr_vel, hr_mask, venc, compartment, source_model, lr_mask=None):
        self.lr_mag = np.asarray(lr_mag, dtype=np.float32)
        self.lr_vel = np.asarray(lr_vel, dtype=np.float32)
        self.hr_vel = np.asarray(hr_vel, dtype=np.float32)
        self.hr_mask = np.asarray(hr_mask, dtype=bool)
        self.venc = np.asarray(venc, dtype=np.float32)
        self.compartment = np.asarray(compartment, dtype=np.uint8)
        self.source_model = np.asarray(source_model, dtype=np.uint16)
        n = len(self.venc)
        if lr_mask is None:
            lr_mask = _majority(self.hr_mask, FACTOR) if n else np.zeros(self.lr_mag.shape, bool)
        self.lr_mask = np.asarray(lr_mask, dtype=bool)
        for name in ("lr_mag", "lr_vel", "hr_vel", "hr_mask", "compartment", "source_model", "lr_mask"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if n and (self.lr_vel.shape[1] != 3 or self.hr_vel.shape[1] != 3):
            raise ValueError("velocity arrays need a component axis of length 3")
        if n and self.hr_vel.shape[2:] != tuple(FACTOR * s for s in self.lr_vel.shape[2:]):
            raise ValueError("hr patches must be twice the lr patch size")

    @classmethod
    def empty(cls, patch: int = PATCH_LR) -> "PatchSet":
        p, h = patch, FACTOR * patch
        return cls(np.zeros((0, p, p, p)), np.zeros((0, 3, p, p, p)), np.zeros((0, 3, h, h, h)),
                   np.zeros((0, h, h, h)), [], [], [], np.zeros((0, p, p, p)))

    @classmethod
    def from_pairs(cls, pairs: Sequence[PatchPair]) -> "PatchSet":
        if not pairs:
            return cls.empty()
        return cls(np.stack([p.lr_mag for p in pairs]), np.stack([p.lr_vel for p in pairs]),
                   np.stack([p.hr_vel for p in pairs]), np.stack([p.hr_mask for p in pairs]),
                   [p.venc for p in pairs], [compartment_code(p.compartment) for p in pairs],
                   [p.source_model for p in pairs],
                   None if any(p.lr_mask is None for p in pairs) else np.stack([p.lr_mask for p in pairs]))

    @classmethod
    def concatenate(cls, sets: Sequence["PatchSet"]) -> "PatchSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        cat = lambda name: np.concatenate([getattr(s, name) for s in sets])
        return cls(cat("lr_mag"), cat("lr_vel"), cat("hr_vel"), cat("hr_mask"), cat("venc"),
                   cat("compartment"), cat("source_model"), cat("lr_mask"))

    def __len__(self) -> int:
        return len(self.venc)

    @property
    def patch_size(self) -> int:
        return self.lr_mag.shape[-1]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return PatchPair(self.lr_mag[idx], self.lr_vel[idx], self.hr_vel[idx], self.hr_mask[idx],
                             float(self.venc[idx]), COMPARTMENT_NAMES[int(self.compartment[idx])],
                             int(self.source_model[idx]), self.lr_mask[idx])
        return PatchSet(self.lr_mag[idx], self.lr_vel[idx], self.hr_vel[idx], self.hr_mask[idx],
                        self.venc[idx], self.compartment[idx], self.source_model[idx], self.lr_mask[idx])

    def __iter__(self) -> Iterator[PatchPair]:
        for i in range(len(self)):
            yield self[i]

    def compartment_labels(self) -> List[str]:
        return [COMPARTMENT_NAMES[int(c)] for c in np.unique(self.compartment)]

    def select_compartment(self, label: str) -> "PatchSet":
        return self[np.flatnonzero(self.compartment == compartment_code(label))]


def _majority(hr_mask: np.ndarray, f: int) -> np.ndarray:
    *lead, d, h, w = hr_mask.shape
    blocks = hr_mask.reshape(*lead, d // f, f, h // f, f, w // f, f)
    axes = tuple(len(lead) + a for a in (1, 3, 5))
    return 2 * blocks.sum(axis=axes) >= f ** 3


def min_fluid_count(patch: int, min_fluid_frac: float) -> int:
    # rounding guards against 0.05 * 1728 landing a hair above an integer
    return math.ceil(round(min_fluid_frac * patch ** 3, 9))


def extract_patches(pair: SynthPair, patch: int = PATCH_LR, stride: int = DEFAULT_STRIDE,
                    min_fluid_frac: float = MIN_FLUID_FRAC, source_model: int = 0,
                    return_counts: bool = False):
    """Slide a ``patch``-cube window over the LR grid and keep fluid-rich windows.

    A window is kept when its LR-footprint fluid count reaches
    ``ceil(min_fluid_frac * patch**3)``; it is paired with the aligned HR crop
    of twice the size. Windows come out in linear order of their origin.

    Returns a :class:`PatchSet`, or ``(PatchSet, kept, rejected)`` when
    ``return_counts`` is set.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    lr, hr = pair.lr, pair.hr
    nz, ny, nx = lr.grid.shape
    if patch > min(nz, ny, nx):
        raise ValueError(f"patch {patch} larger than volume {lr.grid.shape}")
    need = min_fluid_count(patch, min_fluid_frac)
    lr_mask = lr.mask.fluid
    lr_vel = lr.velocity.stack()
    hr_vel = hr.velocity.stack()
    code = compartment_code(lr.compartment)
    keep: List[Tuple[int, int, int]] = []
    rejected = 0
    for z in range(0, nz - patch + 1, stride):
        for y in range(0, ny - patch + 1, stride):
            for x in range(0, nx - patch + 1, stride):
                count = int(lr_mask[z:z + patch, y:y + patch, x:x + patch].sum())
                if count >= need:
                    keep.append((z, y, x))
                else:
                    rejected += 1
    h = FACTOR * patch
    out = PatchSet(
        [lr.magnitude.values[z:z + patch, y:y + patch, x:x + patch] for z, y, x in keep] or np.zeros((0, patch, patch, patch)),
        [lr_vel[:, z:z + patch, y:y + patch, x:x + patch] for z, y, x in keep] or np.zeros((0, 3, patch, patch, patch)),
        [hr_vel[:, 2 * z:2 * z + h, 2 * y:2 * y + h, 2 * x:2 * x + h] for z, y, x in keep] or np.zeros((0, 3, h, h, h)),
        [hr.mask.fluid[2 * z:2 * z + h, 2 * y:2 * y + h, 2 * x:2 * x + h] for z, y, x in keep] or np.zeros((0, h, h, h)),
        [lr.venc] * len(keep), [code] * len(keep), [source_model] * len(keep),
        [lr_mask[z:z + patch, y:y + patch, x:x + patch] for z, y, x in keep] or np.zeros((0, patch, patch, patch)),
    )
    if return_counts:
        return out, len(keep), rejected
    return out


# -- rotations ---------------------------------------------------------------

_AXES = "xyz"
_QUARTER = {
    "x": np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]]),
    "y": np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0]]),
    "z": np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]]),
}
ROTATIONS = [(a, t) for a in _AXES for t in (1, 2, 3)]


def rotation_matrix(axis: str, quarter_turns: int) -> np.ndarray:
    if axis not in _QUARTER:
        raise ValueError(f"axis must be one of x, y, z; got {axis!r}")
    if quarter_turns not in (1, 2, 3):
        raise ValueError("quarter_turns must be 1, 2 or 3")
    return np.linalg.matrix_power(_QUARTER[axis], quarter_turns)


def _rotate_lattice(arr: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Rotate the trailing (z, y, x) axes so that ``new[R p] = old[p]``."""
    lead = arr.ndim - 3
    perm = list(range(lead))
    flips = []
    # output xyz axis j draws from input axis pi(j) with sign s_j
    for a in range(3):
        j = 2 - a
        src = int(np.flatnonzero(rot[j])[0])
        perm.append(lead + 2 - src)
        if rot[j, src] < 0:
            flips.append(lead + a)
    out = np.transpose(arr, perm)
    if flips:
        out = np.flip(out, axis=flips)
    return np.ascontiguousarray(out)


def _rotate_vectors(vel: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """``vel`` has the component axis at position -4."""
    moved = _rotate_lattice(vel, rot)
    out = np.empty_like(moved)
    for j in range(3):
        src = int(np.flatnonzero(rot[j])[0])
        comp = moved[..., src, :, :, :]
        out[..., j, :, :, :] = comp if rot[j, src] > 0 else -comp
    return out


def rotate_patch(p: PatchPair, axis: str, quarter_turns: int) -> PatchPair:
    """Exact 90-degree rotation of lattice and velocity vectors (v' = R v)."""
    rot = rotation_matrix(axis, quarter_turns)
    return PatchPair(_rotate_lattice(p.lr_mag, rot), _rotate_vectors(p.lr_vel, rot),
                     _rotate_vectors(p.hr_vel, rot), _rotate_lattice(p.hr_mask, rot),
                     p.venc, p.compartment, p.source_model,
                     None if p.lr_mask is None else _rotate_lattice(p.lr_mask, rot))


def rotate_set(ps: PatchSet, axis: str, quarter_turns: int) -> PatchSet:
    rot = rotation_matrix(axis, quarter_turns)
    return PatchSet(_rotate_lattice(ps.lr_mag, rot), _rotate_vectors(ps.lr_vel, rot),
                    _rotate_vectors(ps.hr_vel, rot), _rotate_lattice(ps.hr_mask, rot),
                    ps.venc, ps.compartment, ps.source_model, _rotate_lattice(ps.lr_mask, rot))


def augment_rotations(ps: PatchSet, multiplier: int = 1, seed: int = 0) -> PatchSet:
    """Append ``multiplier`` distinct random rotations of every patch.

    Output is ordered by source window, then rotation id (original first).
    """
    if not 0 <= multiplier <= len(ROTATIONS):
        raise ValueError(f"multiplier must be in [0, {len(ROTATIONS)}]")
    if multiplier == 0 or not len(ps):
        return ps
    rng = np.random.default_rng(seed)
    picks = np.stack([np.sort(rng.choice(len(ROTATIONS), multiplier, replace=False))
                      for _ in range(len(ps))])
    rotated = {}
    for rid in np.unique(picks):
        rows = np.flatnonzero((picks == rid).any(axis=1))
        rotated[int(rid)] = (rows, rotate_set(ps[rows], *ROTATIONS[rid]))
    pieces = [ps]
    # (window, rotation id) keys give the final order
    keys = [np.stack([np.arange(len(ps)), np.full(len(ps), -1)], axis=1)]
    for rid, (rows, rset) in rotated.items():
        pieces.append(rset)
        keys.append(np.stack([rows, np.full(len(rows), rid)], axis=1))
    keys = np.concatenate(keys)
    order = np.lexsort((keys[:, 1], keys[:, 0]))
    return PatchSet.concatenate(pieces)[order]


# -- splitting and batching ----------------------------------------------------

@dataclass
class DatasetSplit:
    """Index arrays into a :class:`PatchSet` plus the model ids per split."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    models: Dict[str, List[int]] = field(default_factory=dict)

    def apply(self, ps: PatchSet) -> Tuple[PatchSet, PatchSet, PatchSet]:
        return ps[self.train], ps[self.validation], ps[self.test]


SPLIT_NAMES = ("train", "validation", "test")


def assign_models(counts: Dict[int, int], ratios=(6, 2, 2), seed: int = 0) -> Dict[int, str]:
    """Greedy seeded bin-fill of whole models into train/validation/test."""
    if len(counts) < len(ratios):
        raise ValueError(f"need at least {len(ratios)} source models, got {len(counts)}")
    rng = np.random.default_rng(seed)
    models = list(counts)
    models = [models[i] for i in rng.permutation(len(models))]
    models.sort(key=lambda m: -counts[m])  # stable: ties keep the seeded order
    total = float(sum(counts.values()))
    target = np.asarray(ratios, dtype=float) / float(sum(ratios)) * total
    filled = np.zeros(len(ratios))
    members: List[List[int]] = [[] for _ in ratios]
    for i, m in enumerate(models):
        remaining = len(models) - i
        empty = [k for k in range(len(ratios)) if not members[k]]
        choices = empty if remaining <= len(empty) else range(len(ratios))
        k = max(choices, key=lambda k: (target[k] - filled[k], -k))
        members[k].append(m)
        filled[k] += counts[m]
    return {m: SPLIT_NAMES[k] for k, ms in enumerate(members) for m in ms}


def split_by_model(patches: PatchSet, ratios=(6, 2, 2), seed: int = 0) -> DatasetSplit:
    """Partition patches so that no source model spans two splits."""
    ids, counts = np.unique(patches.source_model, return_counts=True)
    assignment = assign_models({int(i): int(c) for i, c in zip(ids, counts)}, ratios, seed)
    return split_from_assignment(patches, assignment)


def split_from_assignment(patches: PatchSet, assignment: Dict[int, str]) -> DatasetSplit:
    labels = np.array([assignment.get(int(m), "") for m in patches.source_model])
    return DatasetSplit(
        *(np.flatnonzero(labels == name) for name in SPLIT_NAMES),
        models={name: sorted(m for m, s in assignment.items() if s == name) for name in SPLIT_NAMES},
    )


@dataclass(frozen=True)
class BatchComposition:
    """Per-compartment sample counts of one batch (codes sorted ascending)."""

    codes: Tuple[int, ...]
    counts: Tuple[int, ...]

    @property
    def n_compartments(self) -> int:
        return len(self.codes)

    def as_dict(self) -> Dict[int, int]:
        return dict(zip(self.codes, self.counts))

    @classmethod
    def from_labels(cls, codes) -> "BatchComposition":
        u, c = np.unique(np.asarray(codes), return_counts=True)
        return cls(tuple(int(x) for x in u), tuple(int(x) for x in c))


def epoch_batches(n: int, batch_size: int, rng) -> Iterator[np.ndarray]:
    """One shuffled pass over ``n`` items; the last batch may be short."""
    if n == 0:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def compose_batch(dataset: PatchSet, batch_size: int, rng) -> Tuple[PatchSet, BatchComposition]:
    """Uniform draw without replacement plus its compartment composition."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if batch_size > len(dataset):
        raise ValueError("batch_size exceeds dataset size")
    idx = rng.choice(len(dataset), batch_size, replace=False)
    batch = dataset[idx]
    return batch, BatchComposition.from_labels(batch.compartment)


# -- F4DP ----------------------------------------------------------------------

def _record_dtype(patch: int, factor: int) -> np.dtype:
    n_lr = patch ** 3
    n_hr = (factor * patch) ** 3
    return np.dtype([("compartment", "u1"), ("source_model", "<u2"), ("venc", "<f4"),
                     ("lr_mag", "<f4", (n_lr,)), ("lr_vel", "<f4", (3 * n_lr,)),
                     ("hr_vel", "<f4", (3 * n_hr,)), ("hr_mask", "u1", (n_hr,))])


def record_size(patch: int = PATCH_LR, factor: int = FACTOR) -> int:
    return _record_dtype(patch, factor).itemsize


def encode_dataset(patches: PatchSet) -> bytes:
    p = patches.patch_size if len(patches) else PATCH_LR
    dt = _record_dtype(p, FACTOR)
    rec = np.zeros(len(patches), dtype=dt)
    n = len(patches)
    rec["compartment"] = patches.compartment
    rec["source_model"] = patches.source_model
    rec["venc"] = patches.venc
    for name in ("lr_mag", "lr_vel", "hr_vel", "hr_mask"):
        rec[name] = getattr(patches, name).reshape(n, rec.dtype[name].shape[0])
    return _F4DP_HEADER.pack(F4DP_MAGIC, F4DP_VERSION, p, FACTOR, n) + rec.tobytes()


def write_dataset(path, patches: PatchSet) -> None:
    _atomic_write(path, encode_dataset(patches))


def _records_to_set(rec: np.ndarray, patch: int, factor: int) -> PatchSet:
    n = len(rec)
    h = factor * patch
    return PatchSet(rec["lr_mag"].reshape(n, patch, patch, patch),
                    rec["lr_vel"].reshape(n, 3, patch, patch, patch),
                    rec["hr_vel"].reshape(n, 3, h, h, h),
                    rec["hr_mask"].reshape(n, h, h, h) != 0,
                    rec["venc"], rec["compartment"], rec["source_model"])


def _parse_header(head: bytes):
    if len(head) < 4 or head[:4] != F4DP_MAGIC:
        raise VolumeFormatError("bad-magic", repr(head[:4]))
    if len(head) < _F4DP_HEADER.size:
        raise VolumeFormatError("truncated", "header")
    _, version, patch, factor, count = _F4DP_HEADER.unpack_from(head, 0)
    if version != F4DP_VERSION:
        raise VolumeFormatError("bad-version", str(version))
    if factor != FACTOR or patch < 1:
        raise VolumeFormatError("bad-geometry", f"patch {patch}, factor {factor}")
    return patch, factor, count


def decode_dataset(buf: bytes) -> PatchSet:
    patch, factor, count = _parse_header(buf[:_F4DP_HEADER.size])
    dt = _record_dtype(patch, factor)
    expected = _F4DP_HEADER.size + count * dt.itemsize
    if len(buf) < expected:
        raise VolumeFormatError("truncated", f"{len(buf)} of {expected} bytes")
    if len(buf) > expected:
        raise VolumeFormatError("trailing-bytes", f"{len(buf) - expected} extra bytes")
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=_F4DP_HEADER.size)
    return _records_to_set(rec, patch, factor)


def read_dataset(path) -> PatchSet:
    with open(path, "rb") as fh:
        head = fh.read(_F4DP_HEADER.size)
    patch, factor, count = _parse_header(head)
    dt = _record_dtype(patch, factor)
    expected = _F4DP_HEADER.size + count * dt.itemsize
    size = os.path.getsize(path)
    if size < expected:
        raise VolumeFormatError("truncated", f"{size} of {expected} bytes")
    if size > expected:
        raise VolumeFormatError("trailing-bytes", f"{size - expected} extra bytes")
    rec = np.fromfile(path, dtype=dt, count=count, offset=_F4DP_HEADER.size)
    return _records_to_set(rec, patch, factor)
