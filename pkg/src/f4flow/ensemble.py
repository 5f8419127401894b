"""Text ensemble descriptors and loading saved models for prediction.

A descriptor is plain ``key=value`` lines::

    kind=stacking
    member=runs/a.f4w
    member=runs/b.f4w
    meta=runs/meta.f4w

Member order is kept verbatim; relative paths resolve against the
descriptor's directory.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Set

import numpy as np

from .models import BaseSRNet, MetaNet, forward_sr, load_model
from .training import bagging_predict, stacking_predict
from .volume import _atomic_write

KINDS = ("bagging", "stacking")


class DescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleDescriptor:
    kind: str
    members: tuple
    meta: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DescriptorError(f"ensemble kind must be one of {KINDS}, got {self.kind!r}")
        if not self.members:
            raise DescriptorError("an ensemble needs at least one member")
        if self.kind == "stacking":
            if self.meta is None:
                raise DescriptorError("a stacking ensemble needs a meta-learner")
            if len(self.members) < 2:
                raise DescriptorError("stacking needs at least 2 members")
        elif self.meta is not None:
            raise DescriptorError("bagging takes no meta-learner")

    def to_text(self) -> str:
        lines = [f"kind={self.kind}"] + [f"member={m}" for m in self.members]
        if self.meta is not None:
            lines.append(f"meta={self.meta}")
        return "\n".join(lines) + "\n"


def parse_descriptor(text: str) -> EnsembleDescriptor:
    kind, meta, members = None, None, []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DescriptorError(f"line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "kind":
            kind = value
        elif key == "member":
            members.append(value)
        elif key == "meta":
            meta = value
        else:
            raise DescriptorError(f"line {n}: unknown key {key!r}")
    if kind is None:
        raise DescriptorError("descriptor lacks kind=")
    return EnsembleDescriptor(kind, tuple(members), meta)


def write_descriptor(path, desc: EnsembleDescriptor) -> None:
    _atomic_write(path, desc.to_text().encode())


def read_descriptor(path) -> EnsembleDescriptor:
    with open(path) as fh:
        return parse_descriptor(fh.read())


def _resolve(base: str, p: str) -> str:
    return p if os.path.isabs(p) else os.path.join(base, p)


class LoadedModel:
    """A saved base model or ensemble, ready for ``predict_arrays``."""

    def __init__(self, kind: str, members: Sequence[BaseSRNet], meta: Optional[MetaNet] = None,
                 train_models: Optional[Set[str]] = None, name: str = ""):
        self.kind = kind
        self.members = list(members)
        self.meta = meta
        self.train_models = train_models
        self.name = name

    def predict_arrays(self, lr_vel, lr_mag, venc) -> np.ndarray:
        if self.kind == "base":
            return forward_sr(self.members[0], lr_vel, lr_mag, venc)
        if self.kind == "bagging":
            return bagging_predict(self.members, lr_vel, lr_mag, venc)
        return stacking_predict(self.members, self.meta, lr_vel, lr_mag, venc)


def _train_models(extras) -> Optional[Set[str]]:
    raw = extras.get("train_models")
    if raw is None:
        return None
    return {m for m in raw.split(",") if m}


def load_base(path) -> LoadedModel:
    model, extras = load_model(path)
    if not isinstance(model, BaseSRNet):
        raise DescriptorError(f"{path} is not a base model")
    return LoadedModel("base", [model], train_models=_train_models(extras), name=os.path.basename(path))


def load_any(path) -> LoadedModel:
    """Load an ``.f4w`` base model or an ensemble descriptor."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"F4DW":
        return load_base(path)
    desc = read_descriptor(path)
    base = os.path.dirname(os.path.abspath(path))
    members, seen = [], set()
    known = True
    for m in desc.members:
        lm = load_base(_resolve(base, m))
        members.append(lm.members[0])
        if lm.train_models is None:
            known = False
        else:
            seen |= lm.train_models
    meta = None
    if desc.meta is not None:
        meta, extras = load_model(_resolve(base, desc.meta))
        if not isinstance(meta, MetaNet):
            raise DescriptorError(f"{desc.meta} is not a meta-learner")
        tm = _train_models(extras)
        if tm is None:
            known = False
        else:
            seen |= tm
        if meta.spec.n_base != len(members):
            raise DescriptorError(f"meta-learner fuses {meta.spec.n_base} members, descriptor lists {len(members)}")
    return LoadedModel(desc.kind, members, meta, seen if known else None, os.path.basename(path))
