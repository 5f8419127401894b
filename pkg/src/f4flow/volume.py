"""Voxel-grid containers and the F4DV volume file format.

Arrays are held in C order with shape ``(nz, ny, nx)`` so that ``ravel()``
yields the x-fastest linear layout ``x + nx * (y + ny * z)`` used by every
file format in this package.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Tuple, Union

import numpy as np

F4DV_MAGIC = b"F4DV"
F4DV_VERSION = 1

KIND_SCALAR = 0
KIND_VECTOR = 1
KIND_MASK = 2

_HEADER = struct.Struct("<4sIIIIfH")


class VolumeFormatError(ValueError):
    """Raised when a container file is malformed.

    ``code`` is one of ``bad-magic``, ``bad-version``, ``truncated``,
    ``bad-kind`` or ``trailing-bytes``.
    """

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass(frozen=True)
class VolumeGrid:
    nx: int
    ny: int
    nz: int
    dx: float = 1.0

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.dx > 0:
            raise ValueError("dx must be > 0")
        # spacing is stored as f32 on disk; keep it representable so grids round-trip
        object.__setattr__(self, "dx", float(np.float32(self.dx)))

    @property
    def shape(self) -> Tuple[int, int, int]:
        """Numpy array shape ``(nz, ny, nx)``."""
        return (self.nz, self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    def downsampled(self, factor: int) -> "VolumeGrid":
        if self.nx % factor or self.ny % factor or self.nz % factor:
            raise ValueError(f"grid {self.shape} not divisible by {factor}")
        return VolumeGrid(self.nx // factor, self.ny // factor,
                          self.nz // factor, self.dx * factor)


def linear_index(grid: VolumeGrid, x: int, y: int, z: int) -> int:
    """Linear voxel index with x varying fastest."""
    if not (0 <= x < grid.nx and 0 <= y < grid.ny and 0 <= z < grid.nz):
        raise IndexError(f"voxel ({x}, {y}, {z}) outside grid "
                         f"{grid.nx}x{grid.ny}x{grid.nz}")
    return x + grid.nx * (y + grid.ny * z)


def _as_volume(grid: VolumeGrid, values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.size != grid.size:
        raise ValueError(f"expected {grid.size} values, got {arr.size}")
    arr = np.ascontiguousarray(arr.reshape(grid.shape))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: VolumeGrid
    values: np.ndarray

    def __post_init__(self):
        arr = _as_volume(self.grid, self.values, np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("scalar field contains non-finite values")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: VolumeGrid
    vx: np.ndarray
    vy: np.ndarray
    vz: np.ndarray

    def __post_init__(self):
        for name in ("vx", "vy", "vz"):
            arr = _as_volume(self.grid, getattr(self, name), np.float32)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)

    @classmethod
    def from_array(cls, grid: VolumeGrid, arr) -> "VectorField":
        """Build from a ``(3, nz, ny, nx)`` array ordered vx, vy, vz."""
        arr = np.asarray(arr)
        return cls(grid, arr[0], arr[1], arr[2])

    def stack(self) -> np.ndarray:
        return np.stack([self.vx, self.vy, self.vz])

    def max_abs(self) -> float:
        return float(max(np.abs(self.vx).max(), np.abs(self.vy).max(),
                         np.abs(self.vz).max()))


@dataclass(frozen=True, eq=False)
class ComplexField:
    grid: VolumeGrid
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        # Signals keep the caller's float precision; the double path is used
        # for verification against the direct DFT.
        for name in ("re", "im"):
            arr = np.asarray(getattr(self, name))
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
            object.__setattr__(self, name, _as_volume(self.grid, arr, arr.dtype))

    @classmethod
    def from_complex(cls, grid: VolumeGrid, z: np.ndarray) -> "ComplexField":
        return cls(grid, z.real, z.imag)

    def to_complex(self) -> np.ndarray:
        return self.re.astype(np.float64) + 1j * self.im.astype(np.float64)


@dataclass(frozen=True, eq=False)
class FluidMask:
    grid: VolumeGrid
    fluid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "fluid", _as_volume(self.grid, self.fluid, bool))

    @property
    def count(self) -> int:
        return int(self.fluid.sum())


@dataclass(frozen=True, eq=False)
class FlowSample:
    magnitude: ScalarField
    velocity: VectorField
    mask: FluidMask
    venc: float
    compartment: str
    frame: int = 0
    meta: Dict[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        g = self.magnitude.grid
        if self.velocity.grid != g or self.mask.grid != g:
            raise ValueError("FlowSample fields must share one grid")
        if not self.venc > 0:
            raise ValueError("venc must be positive")

    @property
    def grid(self) -> VolumeGrid:
        return self.magnitude.grid


Field = Union[ScalarField, VectorField, FluidMask]


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_volume(fields: Dict[str, Field], grid: VolumeGrid) -> bytes:
    parts: List[bytes] = [_HEADER.pack(F4DV_MAGIC, F4DV_VERSION, grid.nx, grid.ny,
                                       grid.nz, grid.dx, len(fields))]
    for name, fld in fields.items():
        if fld.grid != grid:
            raise ValueError(f"field {name!r} is on a different grid")
        raw = name.encode("utf-8")
        if not 0 < len(raw) <= 255:
            raise ValueError(f"field name {name!r} must be 1..255 bytes")
        if isinstance(fld, ScalarField):
            kind, data = KIND_SCALAR, fld.values.astype("<f4").tobytes()
        elif isinstance(fld, VectorField):
            kind = KIND_VECTOR
            data = b"".join(c.astype("<f4").tobytes() for c in (fld.vx, fld.vy, fld.vz))
        elif isinstance(fld, FluidMask):
            kind, data = KIND_MASK, fld.fluid.astype(np.uint8).tobytes()
        else:
            raise TypeError(f"cannot store {type(fld).__name__}")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", kind))
        parts.append(data)
    return b"".join(parts)


def write_volume(path, fields, grid: VolumeGrid) -> None:
    """Write named fields to an F4DV container.

    ``fields`` is a mapping or a list of ``(name, field)`` pairs. All fields are
    validated before anything touches the disk and the file is written
    atomically.
    """
    if not isinstance(fields, dict):
        fields = list(fields)
        names = [n for n, _ in fields]
        if len(set(names)) != len(names):
            raise ValueError("field names must be unique")
        fields = dict(fields)
    _atomic_write(path, encode_volume(fields, grid))


def decode_volume(buf: bytes) -> Tuple[VolumeGrid, Dict[str, Field]]:
    if len(buf) < 4 or buf[:4] != F4DV_MAGIC:
        raise VolumeFormatError("bad-magic", repr(buf[:4]))
    if len(buf) < _HEADER.size:
        raise VolumeFormatError("truncated", "header")
    _, version, nx, ny, nz, dx, count = _HEADER.unpack_from(buf, 0)
    if version != F4DV_VERSION:
        raise VolumeFormatError("bad-version", str(version))
    grid = VolumeGrid(nx, ny, nz, float(dx))
    n = grid.size
    pos = _HEADER.size
    fields: Dict[str, Field] = {}

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise VolumeFormatError("truncated", f"needed {nbytes} bytes at {pos}")
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (kind,) = struct.unpack("<B", take(1))
        if kind == KIND_SCALAR:
            fields[name] = ScalarField(grid, np.frombuffer(take(4 * n), "<f4"))
        elif kind == KIND_VECTOR:
            comps = [np.frombuffer(take(4 * n), "<f4") for _ in range(3)]
            fields[name] = VectorField(grid, *comps)
        elif kind == KIND_MASK:
            fields[name] = FluidMask(grid, np.frombuffer(take(n), np.uint8) != 0)
        else:
            raise VolumeFormatError("bad-kind", str(kind))
    if pos != len(buf):
        raise VolumeFormatError("trailing-bytes", f"{len(buf) - pos} extra bytes")
    return grid, fields


def read_volume(path) -> Tuple[VolumeGrid, Dict[str, Field]]:
    with open(path, "rb") as fh:
        return decode_volume(fh.read())


def write_sample(path, sample: FlowSample) -> None:
    write_volume(path, {"magnitude": sample.magnitude, "velocity": sample.velocity,
                        "mask": sample.mask}, sample.grid)


def read_sample(path, venc: float, compartment: str, frame: int = 0) -> FlowSample:
    """Load a FlowSample; venc and labels live in the manifest, not the file."""
    grid, fields = read_volume(path)
    try:
        return FlowSample(fields["magnitude"], fields["velocity"], fields["mask"],
                          float(venc), compartment, int(frame))
    except KeyError as exc:
        raise VolumeFormatError("missing-field", str(exc)) from None
