"""Loss terms, Adam, and the training loops for base and meta learners.

Loss per sample is ``w_c * (l_fluid + l_nonfluid)`` where each term is the
mean squared velocity error over its voxel set and ``w_c`` rebalances
compartments within a batch; one ``lambda * sum(w**2)`` over the kernels is
added per batch.
"""
from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .models import (BaseModelSpec, BaseSRNet, MetaModelSpec, MetaNet, ParameterSet, build_base,
                     build_meta, encode_params, forward_meta, forward_sr, normalize_inputs,
                     stack_inputs)
from .patches import BatchComposition, PatchSet, epoch_batches
from .volume import _atomic_write

LAMBDA_L2 = 5e-7
LOSS_UNITS = ("physical", "normalized")
LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "wall_seconds")


class TrainingDivergedError(FloatingPointError):
    """Training hit a non-finite value; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: ParameterSet, log: list, epoch: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings.

    ``loss_units="physical"`` measures errors in cm/s (targets times venc);
    ``"normalized"`` measures them in venc units, which weighs slow and fast
    flows alike.
    """

    lr0: float = 1e-4
    decay_factor: float = math.sqrt(2.0)
    decay_every_epochs: int = 10
    epochs: int = 60
    batch_size: int = 16
    l2_lambda: float = LAMBDA_L2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_units: str = "physical"

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.loss_units not in LOSS_UNITS:
            raise ValueError(f"loss_units must be one of {LOSS_UNITS}")

    @classmethod
    def for_meta(cls, **overrides) -> "TrainConfig":
        return cls(**{"epochs": 80, **overrides})

    def with_(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides)


# -- loss algebra ------------------------------------------------------------------

def loss_mse(pred, target, region) -> float:
    """Mean over ``region`` voxels of the squared velocity-error norm.

    ``pred``/``target`` are ``(3, ...)`` arrays and ``region`` a boolean mask
    over the trailing axes. An empty region contributes 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.shape[1:] != region.shape or pred.shape[0] != 3:
        raise ValueError("region mask must match the spatial shape of (3, ...) velocities")
    n = int(np.count_nonzero(region))
    if n == 0:
        return 0.0
    diff = pred[:, region] - target[:, region]
    return float(np.sum(diff * diff) / n)


def compartment_weight(batch: BatchComposition) -> Dict[int, float]:
    """``w_c = N_c / (S_c * sum_i 1/S_i)`` for each compartment present.

    Evaluated in exact rational arithmetic and rounded once, so balanced
    batches give exactly 1.
    """
    if batch.n_compartments == 0:
        raise ValueError("empty batch composition")
    if any(s < 1 for s in batch.counts):
        raise ValueError("compartment counts must be >= 1")
    n_c = batch.n_compartments
    harmonic = sum(Fraction(1, s) for s in batch.counts)
    return {code: float(Fraction(n_c) / (s * harmonic)) for code, s in zip(batch.codes, batch.counts)}


def sample_weights(codes) -> np.ndarray:
    """Per-sample ``w_c`` for a batch given its compartment codes."""
    codes = np.asarray(codes)
    w = compartment_weight(BatchComposition.from_labels(codes))
    return np.array([w[int(c)] for c in codes], dtype=np.float64)


@dataclass(frozen=True)
class LossBreakdown:
    l_fluid: float
    l_nonfluid: float
    w_c: float
    l2: float
    l_total: float

    @classmethod
    def evaluate(cls, pred, target, fluid, w_c: float = 1.0, l2: float = 0.0) -> "LossBreakdown":
        fluid = np.asarray(fluid, dtype=bool)
        lf = loss_mse(pred, target, fluid)
        ln = loss_mse(pred, target, ~fluid)
        return cls(lf, ln, float(w_c), float(l2), float(w_c) * (lf + ln) + float(l2))


def region_weights(mask: np.ndarray, w: np.ndarray, scale: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-voxel factors turning a weighted squared error into the batch loss.

    Voxel ``v`` of sample ``b`` gets ``w[b] * scale[b]**2 / (B * N_region)``
    where ``N_region`` counts the fluid or non-fluid voxels it belongs to.
    """
    mask = np.asarray(mask, dtype=bool)
    b = mask.shape[0]
    flat = mask.reshape(b, -1)
    n_f = flat.sum(axis=1).astype(np.float64)
    n_n = flat.shape[1] - n_f
    s2 = np.ones(b) if scale is None else np.asarray(scale, dtype=np.float64) ** 2
    coef = np.asarray(w, dtype=np.float64) * s2 / b
    wf = np.divide(coef, n_f, out=np.zeros(b), where=n_f > 0)
    wn = np.divide(coef, n_n, out=np.zeros(b), where=n_n > 0)
    expand = (slice(None),) + (None,) * (mask.ndim - 1)
    return np.where(mask, wf[expand], wn[expand])


def total_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, w: np.ndarray,
               kernels: Sequence[Tensor] = (), l2_lambda: float = LAMBDA_L2,
               scale: Optional[np.ndarray] = None) -> Tuple[Tensor, Dict[str, float]]:
    """Differentiable batch loss.

    Parameters
    ----------
    pred, target
        Channels-last ``[B, D, H, W, 3]`` velocities.
    mask
        ``[B, D, H, W]`` fluid mask.
    w
        Per-sample compartment weights.
    kernels
        Convolution kernels entering the L2 term (biases are not penalized).
    scale
        Optional per-sample factor applied to both ``pred`` and ``target``
        before squaring (venc for losses in cm/s).
    """
    vox = region_weights(mask, w, scale)[..., None]
    data = ad.weighted_sq_error(pred, target, vox)
    info = {"data": float(data.data)}
    if kernels and l2_lambda > 0:
        ssq = ad.sum_squares(kernels)
        info["l2"] = float(l2_lambda * ssq.data)
        loss = ad.add_scalars(data, ssq, coeffs=(1.0, l2_lambda))
    else:
        info["l2"] = 0.0
        loss = data
    info["total"] = float(loss.data)
    return loss, info


# -- optimizer ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParameterSet, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update; ``params`` entries are replaced, not mutated."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        w = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        if state.m[name].shape != w.shape:
            raise ValueError(f"optimizer state for {name} does not match its parameter")
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * g * g
        state.m[name], state.v[name] = m.astype(w.dtype), v.astype(w.dtype)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params[name] = (w - step).astype(w.dtype)
    return state


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 / cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


# -- training loop -------------------------------------------------------------------

@dataclass(frozen=True)
class LogRow:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass
class TrainResult:
    model: object
    log: List[LogRow]
    best_epoch: int
    best_val_loss: float
    final_params: ParameterSet


def format_log(rows: Sequence[LogRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(LOG_COLUMNS)
    for r in rows:
        wr.writerow([r.epoch, repr(float(r.lr)), repr(float(r.train_loss)), repr(float(r.val_loss)),
                     f"{r.wall_seconds:.3f}"])
    return buf.getvalue()


def write_log(path, rows: Sequence[LogRow]) -> None:
    _atomic_write(path, format_log(rows).encode())


class _Task:
    """Adapter giving the loop batched inputs/targets for one data split."""

    def __init__(self, inputs: Callable[[np.ndarray], Tuple[np.ndarray, ...]], ps: PatchSet, dtype,
                 units: str):
        self.inputs = inputs
        self.ps = ps
        self.dtype = dtype
        self.units = units

    def __len__(self):
        return len(self.ps)

    def batch(self, idx):
        ps = self.ps
        venc = ps.venc[idx].astype(np.float64)
        target = np.moveaxis(ps.hr_vel[idx] / ps.venc[idx].reshape(-1, 1, 1, 1, 1), 1, -1)
        target = np.ascontiguousarray(target, dtype=self.dtype)
        scale = venc if self.units == "physical" else None
        return self.inputs(idx), target, ps.hr_mask[idx], sample_weights(ps.compartment[idx]), scale


def _evaluate(model, task: _Task, params: ParameterSet, batch_size: int, l2_lambda: float) -> float:
    leaves = {k: Tensor(v) for k, v in params.items()}
    kernels = [leaves[k] for k in params.weights()]
    total, count = 0.0, 0
    for s in range(0, len(task), batch_size):
        idx = np.arange(s, min(s + batch_size, len(task)))
        inputs, target, mask, w, scale = task.batch(idx)
        pred = model.forward(*[Tensor(a) for a in inputs], params=leaves)
        _, info = total_loss(pred, target, mask, w, kernels, l2_lambda, scale)
        total += info["total"] * len(idx)
        count += len(idx)
    return total / count


def _fit(model, train: _Task, val: _Task, cfg: TrainConfig,
         progress: Optional[Callable[[LogRow], None]] = None) -> TrainResult:
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    params = model.params.copy()
    names = params.names()
    kernel_names = set(params.weights())
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    best = (math.inf, -1, params.copy())
    log: List[LogRow] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        run_loss, seen = 0.0, 0
        try:
            for idx in epoch_batches(len(train), cfg.batch_size, rng):
                idx = np.sort(idx)
                inputs, target, mask, w, scale = train.batch(idx)
                leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
                pred = model.forward(*[Tensor(a) for a in inputs], params=leaves)
                loss, info = total_loss(pred, target, mask, w,
                                        [leaves[k] for k in names if k in kernel_names],
                                        cfg.l2_lambda, scale)
                grads = ad.backward(loss, [leaves[k] for k in names])
                adam_step(params, dict(zip(names, grads)), state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                run_loss += info["total"] * len(idx)
                seen += len(idx)
            val_loss = _evaluate(model, val, params, cfg.batch_size, cfg.l2_lambda)
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"diverged in epoch {epoch}: {exc}", best[2], log, epoch) from exc
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"validation loss non-finite in epoch {epoch}", best[2], log, epoch)
        row = LogRow(epoch, lr, run_loss / seen, val_loss, time.perf_counter() - t0)
        log.append(row)
        if progress is not None:
            progress(row)
        if val_loss < best[0]:
            best = (val_loss, epoch, params.copy())
    return TrainResult(type(model)(model.spec, best[2]), log, best[1], best[0], params)


def _base_inputs(ps: PatchSet, dtype):
    def inputs(idx):
        vel, mag, _, _ = normalize_inputs(ps.lr_vel[idx], ps.lr_mag[idx], ps.venc[idx], dtype)
        return vel, mag
    return inputs


def train_base(train: PatchSet, validation: PatchSet, spec: Optional[BaseModelSpec] = None,
               cfg: TrainConfig = TrainConfig(), model: Optional[BaseSRNet] = None,
               progress: Optional[Callable[[LogRow], None]] = None) -> TrainResult:
    """Train a base network; the returned model holds the best-validation weights."""
    if model is None:
        model = build_base(spec if spec is not None else BaseModelSpec())
    dtype = model.dtype
    return _fit(model, _Task(_base_inputs(train, dtype), train, dtype, cfg.loss_units),
                _Task(_base_inputs(validation, dtype), validation, dtype, cfg.loss_units), cfg, progress)


# -- ensembles ------------------------------------------------------------------------

def member_seeds(root_seed: int, n: int) -> List[int]:
    """Independent child seeds: ``SeedSequence(root).spawn(n)``, first state word each."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root_seed).spawn(n)]


def bootstrap_indices(n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("cannot bootstrap an empty split")
    return np.random.default_rng(seed).integers(0, n, n)


def bootstrap_dataset(train: PatchSet, seed: int) -> PatchSet:
    """``N`` draws with replacement from an ``N``-patch split."""
    return train[bootstrap_indices(len(train), seed)]


def member_id(model) -> str:
    """Content hash of a model's spec line and weights."""
    h = hashlib.sha256(model.spec.to_line().encode())
    h.update(encode_params(model.params))
    return h.hexdigest()


def bagging_predict(models: Sequence[BaseSRNet], lr_vel, lr_mag, venc, batch_size: int = 16) -> np.ndarray:
    """Soft-voting mean of member predictions.

    Members are summed in float64 in order of their content hash, so the
    result does not depend on list order, and identical members are
    evaluated once.
    """
    if not models:
        raise ValueError("bagging needs at least one member")
    for m in models:
        if not isinstance(m, BaseSRNet):
            raise TypeError("bagging members must be base super-resolution networks")
    groups: Dict[str, List] = {}
    for m in models:
        groups.setdefault(member_id(m), []).append(m)
    keys = sorted(groups)
    if len(keys) == 1:
        return forward_sr(groups[keys[0]][0], lr_vel, lr_mag, venc, batch_size)
    acc = None
    dtype = None
    for k in keys:
        out = forward_sr(groups[k][0], lr_vel, lr_mag, venc, batch_size)
        dtype = out.dtype
        term = len(groups[k]) * out.astype(np.float64)
        acc = term if acc is None else acc + term
    return (acc / len(models)).astype(dtype)


def base_outputs(models: Sequence[BaseSRNet], ps: PatchSet, batch_size: int = 16) -> List[np.ndarray]:
    return [forward_sr(m, ps.lr_vel, ps.lr_mag, ps.venc, batch_size) for m in models]


def train_meta(bases: Sequence[BaseSRNet], meta_spec: MetaModelSpec, train: PatchSet, validation: PatchSet,
               cfg: TrainConfig = TrainConfig.for_meta(), meta: Optional[MetaNet] = None,
               progress: Optional[Callable[[LogRow], None]] = None) -> TrainResult:
    """Fit a stacking meta-learner on outputs of frozen base models.

    Base outputs are computed once per split without gradient tracking; the
    bases' parameters are never touched.
    """
    if len(bases) < 2:
        raise ValueError("stacking needs at least 2 base models")
    if meta_spec.n_base != len(bases):
        raise ValueError(f"meta spec fuses {meta_spec.n_base} bases, got {len(bases)}")
    meta = meta if meta is not None else build_meta(meta_spec)
    dtype = meta.dtype

    def task(ps: PatchSet) -> _Task:
        x = stack_inputs(base_outputs(bases, ps, cfg.batch_size), ps.venc,
                         ps.lr_vel if meta_spec.include_lr else None, dtype)
        return _Task(lambda idx: (x[idx],), ps, dtype, cfg.loss_units)

    return _fit(meta, task(train), task(validation), cfg, progress)


def stacking_predict(bases: Sequence[BaseSRNet], meta: MetaNet, lr_vel, lr_mag, venc,
                     batch_size: int = 16) -> np.ndarray:
    """Meta-learner applied to the channel-stacked member outputs, in member order."""
    if len(bases) != meta.spec.n_base:
        raise ValueError(f"meta-learner expects {meta.spec.n_base} members, got {len(bases)}")
    vel = np.asarray(lr_vel)
    batched = vel.ndim == 5
    outs = [forward_sr(b, lr_vel, lr_mag, venc, batch_size) for b in bases]
    if not batched:
        outs = [o[None] for o in outs]
        vel = vel[None]
    v = np.broadcast_to(np.asarray(venc, dtype=np.float64).reshape(-1), (len(outs[0]),))
    res = forward_meta(meta, outs, v, vel, batch_size)
    return res if batched else res[0]
