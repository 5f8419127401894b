"""scikit-learn style wrappers: one base network, bagging and stacking.

``fit`` takes a :class:`~f4flow.patches.PatchSet` (inputs and targets travel
together) and an optional validation set for checkpoint selection.
``predict`` accepts a PatchSet or an ``(lr_vel, lr_mag, venc)`` tuple and
returns ``(N, 3, 24, 24, 24)`` velocities in cm/s.
"""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_is_fitted

from .evaluate import evaluate_patches
from .models import BaseModelSpec, BaseSRNet, MetaModelSpec, forward_sr
from .patches import PatchSet
from .training import (TrainConfig, bagging_predict, bootstrap_dataset, member_seeds, stacking_predict,
                       train_base, train_meta)

BASE_DATA = ("pooled", "compartmentalized")


def check_patches(X, name: str = "X") -> PatchSet:
    """Validate a training/evaluation patch set."""
    if not isinstance(X, PatchSet):
        raise TypeError(f"{name} must be a PatchSet, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    for attr in ("lr_vel", "lr_mag", "hr_vel"):
        if not np.all(np.isfinite(getattr(X, attr))):
            raise ValueError(f"{name}.{attr} contains NaN or Inf")
    return X


def check_lr_input(X) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize prediction input to ``(lr_vel, lr_mag, venc)`` arrays."""
    if isinstance(X, PatchSet):
        return X.lr_vel, X.lr_mag, X.venc
    try:
        lr_vel, lr_mag, venc = X
    except (TypeError, ValueError):
        raise TypeError("X must be a PatchSet or an (lr_vel, lr_mag, venc) tuple") from None
    lr_vel = np.asarray(lr_vel, dtype=np.float32)
    if lr_vel.ndim != 5 or lr_vel.shape[1] != 3:
        raise ValueError(f"lr_vel must be (N,3,D,H,W), got {lr_vel.shape}")
    lr_mag = np.asarray(lr_mag, dtype=np.float32)
    venc = np.broadcast_to(np.asarray(venc, dtype=np.float32).reshape(-1), (len(lr_vel),))
    if not (np.all(np.isfinite(lr_vel)) and np.all(np.isfinite(lr_mag))):
        raise ValueError("input contains NaN or Inf")
    return lr_vel, lr_mag, venc


class _PatchScoreMixin:
    def score(self, X, y=None) -> float:
        """``1 - RE`` over the fluid voxels of ``X`` (higher is better)."""
        X = check_patches(X)
        return 1.0 - evaluate_patches(self.predict(X), X).re


class SuperResolutionNet(_PatchScoreMixin, RegressorMixin, BaseEstimator):
    """A single base learner trained with the compartment-weighted loss."""

    def __init__(self, channels: int = 16, n_blocks_low: int = 4, n_blocks_high: int = 4,
                 block_kind: str = "residual", activation: str = "relu", epochs: int = 60,
                 batch_size: int = 16, lr0: float = 1e-4, decay_every_epochs: int = 10,
                 l2_lambda: float = 5e-7, loss_units: str = "physical", seed: int = 0):
        self.channels = channels
        self.n_blocks_low = n_blocks_low
        self.n_blocks_high = n_blocks_high
        self.block_kind = block_kind
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.decay_every_epochs = decay_every_epochs
        self.l2_lambda = l2_lambda
        self.loss_units = loss_units
        self.seed = seed

    def model_spec(self) -> BaseModelSpec:
        return BaseModelSpec(self.channels, self.n_blocks_low, self.n_blocks_high, self.block_kind,
                             self.activation, self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, decay_every_epochs=self.decay_every_epochs, epochs=self.epochs,
                           batch_size=self.batch_size, l2_lambda=self.l2_lambda, seed=self.seed,
                           loss_units=self.loss_units)

    def fit(self, X, y=None, validation: Optional[PatchSet] = None, progress=None):
        X = check_patches(X)
        validation = X if validation is None else check_patches(validation, "validation")
        res = train_base(X, validation, self.model_spec(), self.train_config(), progress=progress)
        self.model_ = res.model
        self.log_ = res.log
        self.best_epoch_ = res.best_epoch
        return self

    @classmethod
    def from_model(cls, model: BaseSRNet) -> "SuperResolutionNet":
        s = model.spec
        est = cls(s.channels, s.n_blocks_low, s.n_blocks_high, s.block_kind, s.activation, seed=s.seed)
        est.model_ = model
        est.log_ = []
        est.best_epoch_ = -1
        return est

    def predict_arrays(self, lr_vel, lr_mag, venc) -> np.ndarray:
        check_is_fitted(self, "model_")
        return forward_sr(self.model_, lr_vel, lr_mag, venc, self.batch_size)

    def predict(self, X) -> np.ndarray:
        return self.predict_arrays(*check_lr_input(X))


def _as_model(m) -> BaseSRNet:
    if isinstance(m, BaseSRNet):
        return m
    check_is_fitted(m, "model_")
    return m.model_


def _member_data(X: PatchSet, validation: PatchSet, base_data: str, n: int, seeds: Sequence[int]):
    """Per-member (train, validation) pairs for pooled or compartmentalized bases."""
    if base_data == "pooled":
        return [(bootstrap_dataset(X, s), validation) for s in seeds]
    labels = X.compartment_labels()
    if len(labels) != n:
        raise ValueError(f"compartmentalized bases need one member per compartment: "
                         f"{len(labels)} compartments, {n} members")
    out = []
    for label in labels:
        val = validation.select_compartment(label)
        out.append((X.select_compartment(label), val if len(val) else validation))
    return out


class BaggingSR(_PatchScoreMixin, RegressorMixin, BaseEstimator):
    """Soft-voting ensemble of base learners.

    With ``base_data="pooled"`` each member sees its own bootstrap resample
    of the pooled training set; with ``"compartmentalized"`` member ``i``
    trains on the ``i``-th compartment (sorted by name). ``block_kinds``
    optionally gives each member its own block type.
    """

    def __init__(self, base_estimator: Optional[SuperResolutionNet] = None, n_estimators: int = 3,
                 base_data: str = "pooled", block_kinds: Optional[Sequence[str]] = None, seed: int = 0):
        self.base_estimator = base_estimator
        self.n_estimators = n_estimators
        self.base_data = base_data
        self.block_kinds = block_kinds
        self.seed = seed

    def _templates(self) -> List[SuperResolutionNet]:
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.base_data not in BASE_DATA:
            raise ValueError(f"base_data must be one of {BASE_DATA}")
        if self.block_kinds is not None and len(self.block_kinds) != self.n_estimators:
            raise ValueError("block_kinds needs one entry per member")
        base = self.base_estimator if self.base_estimator is not None else SuperResolutionNet()
        seeds = member_seeds(self.seed, self.n_estimators)
        out = []
        for i, s in enumerate(seeds):
            est = clone(base).set_params(seed=s)
            if self.block_kinds is not None:
                est.set_params(block_kind=self.block_kinds[i])
            out.append(est)
        return out

    def fit(self, X, y=None, validation: Optional[PatchSet] = None, progress=None):
        X = check_patches(X)
        validation = X if validation is None else check_patches(validation, "validation")
        templates = self._templates()
        data = _member_data(X, validation, self.base_data, len(templates), [t.seed for t in templates])
        self.estimators_ = [t.fit(tr, validation=va, progress=progress) for t, (tr, va) in zip(templates, data)]
        return self

    @classmethod
    def from_members(cls, members: Sequence) -> "BaggingSR":
        ens = cls(n_estimators=len(members))
        ens.estimators_ = [m if isinstance(m, SuperResolutionNet) else SuperResolutionNet.from_model(m)
                           for m in members]
        return ens

    @property
    def models_(self) -> List[BaseSRNet]:
        check_is_fitted(self, "estimators_")
        return [_as_model(e) for e in self.estimators_]

    def predict_arrays(self, lr_vel, lr_mag, venc) -> np.ndarray:
        return bagging_predict(self.models_, lr_vel, lr_mag, venc)

    def predict(self, X) -> np.ndarray:
        return self.predict_arrays(*check_lr_input(X))


class StackingSR(_PatchScoreMixin, RegressorMixin, BaseEstimator):
    """Meta-learner fusing frozen base learners.

    ``estimators`` may hold fitted members (kept frozen) or unfitted
    templates, which are then trained like :class:`BaggingSR` members.
    """

    def __init__(self, estimators: Optional[Sequence] = None, n_estimators: int = 2,
                 base_data: str = "pooled", meta_channels: int = 32, include_lr: bool = False,
                 activation: str = "relu", epochs: int = 80, batch_size: int = 16, lr0: float = 1e-4,
                 decay_every_epochs: int = 10, l2_lambda: float = 5e-7, loss_units: str = "physical",
                 seed: int = 0):
        self.estimators = estimators
        self.n_estimators = n_estimators
        self.base_data = base_data
        self.meta_channels = meta_channels
        self.include_lr = include_lr
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.decay_every_epochs = decay_every_epochs
        self.l2_lambda = l2_lambda
        self.loss_units = loss_units
        self.seed = seed

    def _bases(self, X, validation, progress) -> List[BaseSRNet]:
        if self.estimators is not None and all(
                isinstance(e, BaseSRNet) or hasattr(e, "model_") for e in self.estimators):
            return [_as_model(e) for e in self.estimators]
        bag = BaggingSR(self.estimators[0] if self.estimators else None,
                        len(self.estimators) if self.estimators else self.n_estimators,
                        self.base_data, seed=self.seed)
        bag.fit(X, validation=validation, progress=progress)
        return bag.models_

    def fit(self, X, y=None, validation: Optional[PatchSet] = None, progress=None):
        X = check_patches(X)
        validation = X if validation is None else check_patches(validation, "validation")
        bases = self._bases(X, validation, progress)
        spec = MetaModelSpec(n_base=len(bases), channels=self.meta_channels, activation=self.activation,
                             include_lr=self.include_lr, seed=self.seed)
        cfg = TrainConfig(lr0=self.lr0, decay_every_epochs=self.decay_every_epochs, epochs=self.epochs,
                          batch_size=self.batch_size, l2_lambda=self.l2_lambda, seed=self.seed,
                          loss_units=self.loss_units)
        res = train_meta(bases, spec, X, validation, cfg, progress=progress)
        self.bases_ = bases
        self.meta_ = res.model
        self.log_ = res.log
        return self

    def predict_arrays(self, lr_vel, lr_mag, venc) -> np.ndarray:
        check_is_fitted(self, "meta_")
        return stacking_predict(self.bases_, self.meta_, lr_vel, lr_mag, venc, self.batch_size)

    def predict(self, X) -> np.ndarray:
        return self.predict_arrays(*check_lr_input(X))
