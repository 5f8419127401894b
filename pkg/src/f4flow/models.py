"""Super-resolution networks, the stacking meta-learner and F4DW weights."""
from __future__ import annotations

import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .volume import VolumeFormatError, _atomic_write

BLOCK_KINDS = ("residual", "dense", "csp")
ACTIVATIONS = ("relu", "leaky")

F4DW_MAGIC = b"F4DW"
F4DW_VERSION = 1


class SpecMismatchError(ValueError):
    code = "spec-mismatch"


class ParameterSet:
    """Ordered ``name -> array`` mapping of network weights."""

    def __init__(self, items=()):
        self._data: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, arr in (items.items() if isinstance(items, dict) else items):
            if name in self._data:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._data[name] = np.asarray(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._data:
            raise KeyError(name)
        self._data[name] = np.asarray(value)

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, name) -> bool:
        return name in self._data

    def items(self):
        return self._data.items()

    def names(self) -> List[str]:
        return list(self._data)

    def shapes(self) -> List[Tuple[int, ...]]:
        return [a.shape for a in self._data.values()]

    def count(self) -> int:
        return int(sum(a.size for a in self._data.values()))

    def copy(self) -> "ParameterSet":
        return ParameterSet((k, v.copy()) for k, v in self._data.items())

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet((k, v.astype(dtype)) for k, v in self._data.items())

    def weights(self) -> List[str]:
        """Names of convolution kernels (the L2-regularized tensors)."""
        return [k for k in self._data if k.endswith(".w")]

    def equals(self, other: "ParameterSet") -> bool:
        return (self.names() == other.names()
                and all(np.array_equal(self[k], other[k]) and self[k].dtype == other[k].dtype
                        for k in self))


# -- specs ---------------------------------------------------------------------

def _spec_line(kind: str, spec) -> str:
    return " ".join([f"kind={kind}"] + [f"{f.name}={getattr(spec, f.name)}" for f in fields(spec)])


def _parse_value(text: str, template):
    if isinstance(template, bool):
        return text in ("1", "true", "True")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text


@dataclass(frozen=True)
class BaseModelSpec:
    channels: int = 16
    n_blocks_low: int = 4
    n_blocks_high: int = 4
    block_kind: str = "residual"
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.channels < 4:
            raise ValueError("channels must be >= 4")
        if self.n_blocks_low < 1 or self.n_blocks_high < 1:
            raise ValueError("block counts must be >= 1")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    def to_line(self) -> str:
        return _spec_line("base", self)


@dataclass(frozen=True)
class MetaModelSpec:
    n_base: int = 2
    channels: int = 32
    layers: int = 8
    activation: str = "relu"
    include_lr: bool = False
    zero_final: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_base < 2:
            raise ValueError("a stacking meta-learner fuses at least 2 base models")
        if self.layers != 8:
            raise ValueError("the meta-learner has exactly 8 convolutional layers")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    def to_line(self) -> str:
        return _spec_line("meta", self)


def parse_spec_line(line: str):
    """Inverse of ``to_line``; unknown trailing keys are returned as extras."""
    pairs = dict(tok.split("=", 1) for tok in line.split())
    kind = pairs.pop("kind", None)
    cls = {"base": BaseModelSpec, "meta": MetaModelSpec}.get(kind)
    if cls is None:
        raise ValueError(f"unknown model kind {kind!r}")
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        if f.name in pairs:
            kwargs[f.name] = _parse_value(pairs.pop(f.name), getattr(defaults, f.name))
    return cls(**kwargs), pairs


# -- architecture plans ----------------------------------------------------------

def _block_convs(prefix: str, kind: str, c: int) -> List[Tuple[str, int, int]]:
    if kind == "residual":
        return [(f"{prefix}.c1", c, c), (f"{prefix}.c2", c, c)]
    if kind == "dense":
        g = c // 2
        return [(f"{prefix}.c1", c, g), (f"{prefix}.c2", c + g, g), (f"{prefix}.proj", c + 2 * g, c)]
    h = c - c // 2
    return [(f"{prefix}.c1", h, h), (f"{prefix}.c2", h, h), (f"{prefix}.proj", c, c)]


def base_layer_plan(spec: BaseModelSpec) -> List[Tuple[str, int, int]]:
    """Ordered ``(conv name, c_in, c_out)`` list of a base network."""
    c = spec.channels
    plan = [("phase", 3, c), ("mag", 1, c)]
    for i in range(spec.n_blocks_low):
        plan += _block_convs(f"low{i}", spec.block_kind, c)
    plan.append(("up", c, c))
    for i in range(spec.n_blocks_high):
        plan += _block_convs(f"high{i}", spec.block_kind, c)
    for axis in "xyz":
        plan += [(f"head_{axis}.c1", c, c), (f"head_{axis}.c2", c, 1)]
    return plan


def meta_layer_plan(spec: MetaModelSpec) -> List[Tuple[str, int, int]]:
    c_in = 3 * spec.n_base + (3 if spec.include_lr else 0)
    plan = []
    for i in range(1, spec.layers):
        plan.append((f"meta.c{i}", c_in if i == 1 else spec.channels, spec.channels))
    plan.append((f"meta.c{spec.layers}", spec.channels, 3))
    return plan


def param_count(plan) -> int:
    return sum(27 * ci * co + co for _, ci, co in plan)


def _init_params(plan, seed: int, zero_final: bool = False) -> ParameterSet:
    # He-uniform kernels, zero biases, drawn in plan order
    rng = np.random.default_rng(seed)
    items = []
    for idx, (name, ci, co) in enumerate(plan):
        limit = np.sqrt(6.0 / (27 * ci))
        w = rng.uniform(-limit, limit, (3, 3, 3, ci, co))
        if zero_final and idx == len(plan) - 1:
            w = np.zeros_like(w)
        items.append((f"{name}.w", w.astype(np.float32)))
        items.append((f"{name}.b", np.zeros(co, dtype=np.float32)))
    return ParameterSet(items)


# -- networks --------------------------------------------------------------------

class _Net:
    spec = None

    def __init__(self, spec, params: Optional[ParameterSet] = None):
        self.spec = spec
        self.plan = self._plan()
        self.params = params if params is not None else _init_params(
            self.plan, spec.seed, getattr(spec, "zero_final", False))
        check_params(self.params, self.plan)

    @property
    def dtype(self):
        return next(iter(self.params.items()))[1].dtype

    def astype(self, dtype) -> "_Net":
        return type(self)(self.spec, self.params.astype(dtype))

    def leaves(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def _act(self, x: Tensor) -> Tensor:
        return ad.relu(x) if self.spec.activation == "relu" else ad.leaky_relu(x, 0.2)

    @staticmethod
    def _conv(p: Dict[str, Tensor], name: str, x: Tensor) -> Tensor:
        return ad.conv3d(x, p[f"{name}.w"], p[f"{name}.b"])

    def n_conv_layers(self) -> int:
        return len(self.plan)


class BaseSRNet(_Net):
    """Two-branch residual super-resolution network doubling each spatial dim.

    Input: normalized velocity ``[N,D,H,W,3]`` and magnitude ``[N,D,H,W,1]``;
    output: normalized velocity ``[N,2D,2H,2W,3]``.
    """

    def _plan(self):
        return base_layer_plan(self.spec)

    def _block(self, p, prefix: str, x: Tensor) -> Tensor:
        kind = self.spec.block_kind
        act = self._act
        if kind == "residual":
            y = self._conv(p, f"{prefix}.c2", act(self._conv(p, f"{prefix}.c1", x)))
            return ad.add(x, y)
        if kind == "dense":
            f1 = ad.concat_channels(x, act(self._conv(p, f"{prefix}.c1", x)))
            f2 = ad.concat_channels(f1, act(self._conv(p, f"{prefix}.c2", f1)))
            return self._conv(p, f"{prefix}.proj", f2)
        c = self.spec.channels
        h = c // 2
        left = ad.slice_channels(x, 0, h)
        right = ad.slice_channels(x, h, c)
        y = self._conv(p, f"{prefix}.c2", act(self._conv(p, f"{prefix}.c1", right)))
        return self._conv(p, f"{prefix}.proj", ad.concat_channels(left, ad.add(right, y)))

    def forward(self, vel: Tensor, mag: Tensor, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        p = params if params is not None else self.leaves()
        act = self._act
        x = ad.add(act(self._conv(p, "phase", vel)), act(self._conv(p, "mag", mag)))
        for i in range(self.spec.n_blocks_low):
            x = self._block(p, f"low{i}", x)
        x = act(self._conv(p, "up", ad.upsample2_trilinear(x)))
        for i in range(self.spec.n_blocks_high):
            x = self._block(p, f"high{i}", x)
        # the three c1 convs share their input: run them as one wider conv
        c = self.spec.channels
        w1 = ad.concat_channels(*[p[f"head_{a}.c1.w"] for a in "xyz"])
        b1 = ad.concat_channels(*[p[f"head_{a}.c1.b"] for a in "xyz"])
        hidden = act(ad.conv3d(x, w1, b1))
        heads = [self._conv(p, f"head_{a}.c2", ad.slice_channels(hidden, i * c, (i + 1) * c))
                 for i, a in enumerate("xyz")]
        return ad.concat_channels(*heads)


class MetaNet(_Net):
    """Plain 8-layer convolutional fuser of stacked base-model outputs."""

    def _plan(self):
        return meta_layer_plan(self.spec)

    def forward(self, stacked: Tensor, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        p = params if params is not None else self.leaves()
        x = stacked
        for i in range(1, self.spec.layers):
            x = self._act(self._conv(p, f"meta.c{i}", x))
        return self._conv(p, f"meta.c{self.spec.layers}", x)


def build_base(spec: BaseModelSpec) -> BaseSRNet:
    return BaseSRNet(spec)


def build_meta(spec: MetaModelSpec) -> MetaNet:
    return MetaNet(spec)


def build_from_spec(spec, params: Optional[ParameterSet] = None):
    if isinstance(spec, BaseModelSpec):
        return BaseSRNet(spec, params)
    if isinstance(spec, MetaModelSpec):
        return MetaNet(spec, params)
    raise TypeError(f"not a model spec: {spec!r}")


def check_params(params: ParameterSet, plan) -> None:
    expected = []
    for name, ci, co in plan:
        expected += [(f"{name}.w", (3, 3, 3, ci, co)), (f"{name}.b", (co,))]
    got = list(zip(params.names(), params.shapes()))
    if got != expected:
        raise SpecMismatchError("spec-mismatch: parameter names/shapes do not match the model spec")


# -- inference ---------------------------------------------------------------------

def _channels_last(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(a, 1, -1))


def _channels_first(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(a, -1, 1))


def normalize_inputs(lr_vel, lr_mag, venc, dtype=np.float32):
    """Batch and venc-normalize inputs into channels-last arrays.

    Accepts ``lr_vel`` of shape ``(3,D,H,W)`` or ``(N,3,D,H,W)`` and
    ``lr_mag`` of shape ``(D,H,W)``, ``(1,D,H,W)``, ``(N,D,H,W)`` or
    ``(N,1,D,H,W)``. Returns ``(vel, mag, venc, batched)``.
    """
    vel = np.asarray(lr_vel)
    batched = vel.ndim == 5
    if not batched:
        vel = vel[None]
    if vel.ndim != 5 or vel.shape[1] != 3:
        raise ValueError(f"lr_vel must be (N,3,D,H,W), got {np.shape(lr_vel)}")
    n = vel.shape[0]
    mag = np.asarray(lr_mag)
    if mag.ndim == 3:
        mag = mag[None, None]
    elif mag.ndim == 4:
        mag = mag[:, None] if (batched and mag.shape[0] == n and mag.shape[1:] == vel.shape[2:]) else mag[None]
    if mag.shape != (n, 1) + vel.shape[2:]:
        raise ValueError(f"lr_mag shape {np.shape(lr_mag)} does not match lr_vel {vel.shape}")
    if not (np.all(np.isfinite(vel)) and np.all(np.isfinite(mag))):
        raise ValueError("non-finite (NaN/Inf) input")
    v = np.broadcast_to(np.asarray(venc, dtype=dtype).reshape(-1), (n,)).astype(dtype)
    if np.any(v <= 0):
        raise ValueError("venc must be positive")
    scale = v.reshape(n, 1, 1, 1, 1)
    vel_n = _channels_last(vel.astype(dtype) / scale)
    mag_n = _channels_last(mag.astype(dtype))
    return vel_n, mag_n, v, batched


def forward_sr(model: BaseSRNet, lr_vel, lr_mag, venc, batch_size: int = 16) -> np.ndarray:
    """Super-resolve velocity patches in cm/s.

    Inputs are divided by ``venc`` on entry and outputs multiplied by it on
    exit, so one network serves every VENC.
    """
    dtype = model.dtype
    vel, mag, v, batched = normalize_inputs(lr_vel, lr_mag, venc, dtype)
    outs = []
    for s in range(0, len(v), batch_size):
        o = model.forward(Tensor(vel[s:s + batch_size]), Tensor(mag[s:s + batch_size])).data
        outs.append(_channels_first(o) * v[s:s + batch_size].reshape(-1, 1, 1, 1, 1))
    out = np.concatenate(outs)
    return out if batched else out[0]


def stack_inputs(base_outputs: Sequence[np.ndarray], venc: np.ndarray, lr_vel=None, dtype=np.float32) -> np.ndarray:
    """Channel-concatenate base outputs (cm/s, ``(N,3,...)``) normalized by venc."""
    scale = np.asarray(venc, dtype=dtype).reshape(-1, 1, 1, 1, 1)
    parts = [np.asarray(o, dtype=dtype) / scale for o in base_outputs]
    if lr_vel is not None:
        up = ad.upsample2_array(np.asarray(lr_vel, dtype=dtype) / scale, axes=(2, 3, 4))
        parts.append(up)
    return _channels_last(np.concatenate(parts, axis=1))


def forward_meta(meta: MetaNet, base_outputs: Sequence[np.ndarray], venc, lr_vel=None,
                 batch_size: int = 16) -> np.ndarray:
    if len(base_outputs) != meta.spec.n_base:
        raise ValueError(f"meta-learner expects {meta.spec.n_base} base outputs, got {len(base_outputs)}")
    if meta.spec.include_lr and lr_vel is None:
        raise ValueError("this meta-learner also consumes the LR velocities")
    v = np.asarray(venc, dtype=meta.dtype).reshape(-1)
    x = stack_inputs(base_outputs, v, lr_vel if meta.spec.include_lr else None, meta.dtype)
    outs = []
    for s in range(0, len(x), batch_size):
        o = meta.forward(Tensor(x[s:s + batch_size])).data
        outs.append(_channels_first(o) * v[s:s + batch_size].reshape(-1, 1, 1, 1, 1))
    return np.concatenate(outs)


# -- F4DW ------------------------------------------------------------------------

def encode_params(params: ParameterSet) -> bytes:
    parts = [F4DW_MAGIC, struct.pack("<II", F4DW_VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_params(buf: bytes) -> ParameterSet:
    if buf[:4] != F4DW_MAGIC:
        raise VolumeFormatError("bad-magic", repr(buf[:4]))
    if len(buf) < 12:
        raise VolumeFormatError("truncated", "header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != F4DW_VERSION:
        raise VolumeFormatError("bad-version", str(version))
    pos = 12
    items = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if dims else 1
            if pos + 4 * size > len(buf):
                raise VolumeFormatError("truncated", f"tensor {name}")
            arr = np.frombuffer(buf, "<f4", size, pos).reshape(dims).astype(np.float32)
            pos += 4 * size
            items.append((name, arr))
    except struct.error:
        raise VolumeFormatError("truncated", "tensor header") from None
    if pos != len(buf):
        raise VolumeFormatError("trailing-bytes", f"{len(buf) - pos} extra bytes")
    return ParameterSet(items)


def save_params(path, params: ParameterSet, spec=None, extras: Optional[Dict[str, str]] = None) -> None:
    """Write F4DW weights; with ``spec`` also write the ``.spec`` sidecar line."""
    _atomic_write(path, encode_params(params))
    if spec is not None:
        line = spec.to_line()
        for k, v in (extras or {}).items():
            line += f" {k}={v}"
        _atomic_write(os.fspath(path) + ".spec", (line + "\n").encode())


def load_params(path, spec=None) -> ParameterSet:
    with open(path, "rb") as fh:
        params = decode_params(fh.read())
    if spec is not None:
        plan = base_layer_plan(spec) if isinstance(spec, BaseModelSpec) else meta_layer_plan(spec)
        check_params(params, plan)
    return params


def read_spec_sidecar(path):
    with open(os.fspath(path) + ".spec") as fh:
        return parse_spec_line(fh.read().strip())


def load_model(path):
    """Load weights plus sidecar; returns ``(model, extras)``."""
    spec, extras = read_spec_sidecar(path)
    return build_from_spec(spec, load_params(path, spec)), extras
