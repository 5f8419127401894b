import dataclasses
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from f4flow import autodiff as ad
from f4flow.autodiff import Tensor
from f4flow.models import BaseModelSpec, MetaModelSpec, build_base, build_meta, forward_sr
from f4flow.oracles import adam_reference, bootstrap_distinct_fraction, expected_distinct_fraction
from f4flow.patches import BatchComposition
from f4flow.training import (AdamState, LossBreakdown, TrainConfig, TrainingDivergedError, adam_step,
                             bagging_predict, bootstrap_dataset, bootstrap_indices, compartment_weight,
                             format_log, loss_mse, lr_schedule, member_id, member_seeds, sample_weights,
                             stacking_predict, total_loss, train_base, train_meta)
from f4flow.models import ParameterSet

# desk settings for smoke runs: a larger step than the production lr0
DESK = TrainConfig(epochs=3, batch_size=4, lr0=1e-3)


def test_loss_mse_examples():
    t = np.zeros((3, 2, 2, 2))
    region = np.zeros((2, 2, 2), bool)
    assert loss_mse(t, t, np.ones((2, 2, 2), bool)) == 0.0
    p = t.copy()
    p[:, 0, 0, 0] = (1.0, 2.0, 2.0)
    region[0, 0, 0] = True
    assert loss_mse(p, t, region) == 9.0
    assert loss_mse(p, t, np.zeros((2, 2, 2), bool)) == 0.0
    with pytest.raises(ValueError):
        loss_mse(p, t[:, :1], region)


def test_compartment_weight_examples():
    assert compartment_weight(BatchComposition((0, 1), (4, 4))) == {0: 1.0, 1: 1.0}
    assert compartment_weight(BatchComposition((0, 2), (2, 6))) == {0: 1.5, 2: 0.5}
    assert compartment_weight(BatchComposition((3,), (8,))) == {3: 1.0}
    with pytest.raises(ValueError):
        compartment_weight(BatchComposition((0, 1), (0, 3)))


@settings(max_examples=50, deadline=None)
@given(counts=st.lists(st.integers(1, 64), min_size=1, max_size=4))
def test_weighted_contributions_balance(counts):
    w = compartment_weight(BatchComposition(tuple(range(len(counts))), tuple(counts)))
    contrib = [Fraction(s) * Fraction(w[i]) for i, s in enumerate(counts)]
    assert max(contrib) - min(contrib) <= Fraction(1, 10 ** 12) * max(contrib)
    if len(set(counts)) == 1:
        assert all(v == 1.0 for v in w.values())


def test_sample_weights_per_code():
    assert sample_weights([0, 2, 2, 2, 2, 2, 2, 0]).tolist() == [1.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 1.5]


def test_loss_breakdown_identity():
    rng = np.random.default_rng(0)
    p, t = rng.standard_normal((3, 4, 4, 4)), rng.standard_normal((3, 4, 4, 4))
    fluid = rng.random((4, 4, 4)) < 0.3
    b = LossBreakdown.evaluate(p, t, fluid, w_c=1.5, l2=0.25)
    assert b.l_total == pytest.approx(1.5 * (b.l_fluid + b.l_nonfluid) + 0.25, rel=1e-15)
    assert min(b.l_fluid, b.l_nonfluid, b.l2) >= 0


def test_total_loss_examples():
    t = np.random.default_rng(1).standard_normal((2, 4, 4, 4, 3))
    mask = np.zeros((2, 4, 4, 4), bool)
    mask[:, :2] = True
    w = np.ones(2)
    loss, _ = total_loss(Tensor(t), t, mask, w, l2_lambda=0.0)
    assert float(loss.data) == 0.0
    # one kernel tensor with sum of squares 2e6 and lambda 5e-7 gives exactly 1
    k = Tensor(np.full(2, 1000.0))
    loss, info = total_loss(Tensor(t), t, mask, w, [k], l2_lambda=5e-7)
    assert float(loss.data) == pytest.approx(1.0, rel=1e-12)


def test_total_loss_matches_breakdown_mean():
    rng = np.random.default_rng(2)
    p, t = rng.standard_normal((3, 4, 4, 4, 3)), rng.standard_normal((3, 4, 4, 4, 3))
    mask = rng.random((3, 4, 4, 4)) < 0.4
    codes = np.array([0, 1, 1])
    w = sample_weights(codes)
    loss, _ = total_loss(Tensor(p), t, mask, w, l2_lambda=0.0)
    expect = np.mean([LossBreakdown.evaluate(np.moveaxis(p[i], -1, 0), np.moveaxis(t[i], -1, 0), mask[i],
                                             w[i]).l_total for i in range(3)])
    assert float(loss.data) == pytest.approx(expect, rel=1e-12)
    # with physical units both prediction and target are scaled by venc
    venc = np.array([50.0, 100.0, 150.0])
    scaled, _ = total_loss(Tensor(p), t, mask, np.ones(3), l2_lambda=0.0, scale=venc)
    expect = np.mean([LossBreakdown.evaluate(v * np.moveaxis(p[i], -1, 0), v * np.moveaxis(t[i], -1, 0),
                                             mask[i]).l_total for i, v in enumerate(venc)])
    assert float(scaled.data) == pytest.approx(expect, rel=1e-12)


def test_adam_examples():
    ps = ParameterSet([("w", np.zeros(1))])
    adam_step(ps, {"w": np.ones(1)}, AdamState(), 0.1)
    assert ps["w"][0] == pytest.approx(-0.1, rel=1e-6)
    zero = ParameterSet([("w", np.array([0.7]))])
    adam_step(zero, {"w": np.zeros(1)}, AdamState(), 0.1)
    assert zero["w"][0] == 0.7
    with pytest.raises(FloatingPointError):
        adam_step(ps, {"w": np.array([np.nan])}, AdamState(), 0.1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 6))
def test_adam_matches_reference(seed, steps):
    rng = np.random.default_rng(seed)
    w0 = rng.standard_normal(3)
    grads = rng.standard_normal((steps, 3))
    ps = ParameterSet([("w", w0.copy())])
    state = AdamState()
    for g in grads:
        adam_step(ps, {"w": g}, state, 1e-2)
    ref = adam_reference(w0.tolist(), grads.tolist(), 1e-2)[-1]
    assert np.allclose(ps["w"], ref, rtol=0, atol=1e-12)


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(9, cfg) == 1e-4
    assert lr_schedule(10, cfg) == pytest.approx(7.0710678e-5)
    assert lr_schedule(25, cfg) == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_units="furlongs")
    assert TrainConfig.for_meta().epochs == 80 and TrainConfig().epochs == 60


def test_bootstrap_statistics():
    idx = bootstrap_indices(10_000, 3)
    assert len(idx) == 10_000
    frac = bootstrap_distinct_fraction(idx, 10_000)
    assert 0.61 <= frac <= 0.65
    assert expected_distinct_fraction(10_000) == pytest.approx(1 - math.exp(-1), abs=1e-4)
    multisets = {tuple(sorted(bootstrap_indices(50, s).tolist())) for s in range(5)}
    assert len(multisets) == 5
    assert np.array_equal(bootstrap_indices(50, 7), bootstrap_indices(50, 7))
    with pytest.raises(ValueError):
        bootstrap_indices(0, 1)


def test_bootstrap_dataset_size(small_patches):
    out = bootstrap_dataset(small_patches, 4)
    assert len(out) == len(small_patches)


def test_member_seeds_independent():
    s = member_seeds(0, 4)
    assert len(set(s)) == 4 and s == member_seeds(0, 4) and s[:2] == member_seeds(0, 2)


def rand_lr(n=2, p=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-50, 50, (n, 3, p, p, p)), rng.uniform(0.05, 1, (n, p, p, p)), np.array([100.0] * n)


def test_bagging_examples():
    models = [build_base(BaseModelSpec(4, 1, 1, seed=s)) for s in (1, 2, 3)]
    vel, mag, venc = rand_lr()
    single = forward_sr(models[0], vel, mag, venc)
    same = bagging_predict([models[0]] * 3, vel, mag, venc)
    assert same.tobytes() == single.tobytes()
    mean = np.mean([forward_sr(m, vel, mag, venc).astype(np.float64) for m in models], axis=0)
    out = bagging_predict(models, vel, mag, venc)
    assert np.allclose(out, mean, rtol=1e-6, atol=1e-6 * np.abs(mean).max())
    perm = bagging_predict(models[::-1], vel, mag, venc)
    assert perm.tobytes() == out.tobytes()
    with pytest.raises(ValueError):
        bagging_predict([], vel, mag, venc)
    with pytest.raises(TypeError):
        bagging_predict([build_meta(MetaModelSpec(channels=4))], vel, mag, venc)


def test_member_id_tracks_content(tiny_model):
    assert member_id(tiny_model) == member_id(build_base(tiny_model.spec))
    other = build_base(BaseModelSpec(4, 1, 1, seed=6))
    assert member_id(other) != member_id(tiny_model)


def test_train_base_log_and_determinism(small_patches):
    tr, va = small_patches[np.arange(6)], small_patches[np.arange(6, 9)]
    spec = BaseModelSpec(4, 1, 1, seed=2)
    a = train_base(tr, va, spec, DESK)
    b = train_base(tr, va, spec, DESK)
    assert len(a.log) == 3
    assert a.final_params.equals(b.final_params)
    assert [r.train_loss for r in a.log] == [r.train_loss for r in b.log]
    assert a.best_val_loss == min(r.val_loss for r in a.log)
    text = format_log(a.log)
    assert text.splitlines()[0] == "epoch,lr,train_loss,val_loss,wall_seconds"
    assert len(text.splitlines()) == 4
    with pytest.raises(ValueError):
        train_base(tr, va[:0], spec, DESK)


def test_divergence_keeps_checkpoint(small_patches):
    tr = small_patches[np.arange(4)]
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as e:
        train_base(tr, tr, BaseModelSpec(4, 1, 1), TrainConfig(epochs=4, batch_size=4, lr0=1e30))
    assert e.value.checkpoint is not None and e.value.epoch >= 0


def test_meta_leaves_bases_frozen(small_patches):
    tr, va = small_patches[np.arange(4)], small_patches[np.arange(4, 6)]
    bases = [build_base(BaseModelSpec(4, 1, 1, seed=s)) for s in (1, 2)]
    before = [b.params.copy() for b in bases]
    res = train_meta(bases, MetaModelSpec(n_base=2, channels=4), tr, va, DESK.with_(epochs=2))
    assert all(b.params.equals(p) for b, p in zip(bases, before))
    out = stacking_predict(bases, res.model, tr.lr_vel, tr.lr_mag, tr.venc)
    assert out.shape == (4, 3, 24, 24, 24)
    swapped = stacking_predict(bases[::-1], res.model, tr.lr_vel, tr.lr_mag, tr.venc)
    assert not np.allclose(out, swapped)
    with pytest.raises(ValueError):
        stacking_predict(bases[:1], res.model, tr.lr_vel, tr.lr_mag, tr.venc)


def test_zero_final_meta_starts_at_zero_prediction_loss(small_patches):
    tr = small_patches[np.arange(4)]
    bases = [build_base(BaseModelSpec(4, 1, 1, seed=s)) for s in (1, 2)]
    res = train_meta(bases, MetaModelSpec(n_base=2, channels=4, zero_final=True), tr, tr,
                     TrainConfig(epochs=1, batch_size=4, lr0=1e-12, l2_lambda=0.0))
    target = tr.hr_vel.astype(np.float64)
    zero = np.mean([LossBreakdown.evaluate(np.zeros_like(t), t, m, w).l_total
                    for t, m, w in zip(target, tr.hr_mask, sample_weights(tr.compartment))])
    assert res.log[0].val_loss == pytest.approx(zero, rel=1e-4)


def cropped(ps, n=10, p=6):
    """The first ``n`` patches cut down to ``p``-voxel LR windows (and their HR twins)."""
    idx = np.arange(n)
    h = 2 * p
    sub = ps[idx]
    return type(ps)(sub.lr_mag[:, :p, :p, :p], sub.lr_vel[:, :, :p, :p, :p], sub.hr_vel[:, :, :h, :h, :h],
                    sub.hr_mask[:, :h, :h, :h], sub.venc, sub.compartment, sub.source_model)


OVERFIT = TrainConfig(epochs=200, batch_size=10, lr0=1e-2, decay_every_epochs=50, loss_units="normalized")


@pytest.mark.slow
def test_overfit_base(small_patches):
    sub = cropped(small_patches)
    res = train_base(sub, sub, BaseModelSpec(4, 1, 1, seed=0), OVERFIT)
    assert len(res.log) == 200
    assert res.log[-1].train_loss < 0.01 * res.log[0].train_loss


@pytest.mark.slow
def test_overfit_meta(small_patches):
    sub = cropped(small_patches)
    bases = [build_base(BaseModelSpec(4, 1, 1, seed=s)) for s in (1, 2)]
    # the meta head plateaus near 0.04 at 1e-2; a gentler step reaches the floor
    cfg = dataclasses.replace(OVERFIT, lr0=1e-3)
    res = train_meta(bases, MetaModelSpec(n_base=2, channels=8, include_lr=True), sub, sub, cfg)
    assert res.log[-1].train_loss < 0.01 * res.log[0].train_loss
