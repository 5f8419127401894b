import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from f4flow.autodiff import upsample2_array
from f4flow.evaluate import (REPORT_COLUMNS, CallablePredictor, DegenerateReferenceError, OracleStub,
                             TrilinearStub, evaluate_fields, evaluate_patches, export_report, export_slice,
                             read_pgm, read_report, recover_native_eval, regression_stats, relative_error,
                             rmse_regions, stitch_sr, tile_origins)
from f4flow.oracles import metrics_naive
from f4flow.phantoms import PhantomSpec, generate_phantom
from f4flow.volume import ScalarField, VectorField, VolumeGrid

from conftest import make_sample


def fields(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((3, n, n, n)) * 40, rng.standard_normal((3, n, n, n)) * 40, rng.random((n, n, n)) < 0.5


def test_relative_error_examples():
    ref = np.zeros((3, 1, 1, 1))
    ref[0] = 1.0
    pred = ref.copy()
    pred[0] = 1.1
    one = np.ones((1, 1, 1), bool)
    assert relative_error(ref, ref, one) == 0.0
    assert relative_error(pred, ref, one) == pytest.approx(math.tanh(0.1 / 1.0001), rel=1e-12)
    assert relative_error(pred, ref, one) == pytest.approx(0.0997, abs=1e-4)
    with pytest.raises(ValueError):
        relative_error(pred, ref, np.zeros((1, 1, 1), bool))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metrics_match_naive_oracle(seed):
    p, r, m = fields(seed=seed)
    rep = evaluate_fields(p, r, m)
    naive = metrics_naive(p, r, m)
    assert rep.re < 1
    assert rep.re == pytest.approx(naive["re"], rel=1e-12, abs=1e-12)
    assert np.allclose(rep.rmse_fluid, naive["rmse_fluid"], rtol=1e-12)
    assert np.allclose(rep.rmse_nonfluid, naive["rmse_nonfluid"], rtol=1e-12)
    assert np.allclose(rep.k, naive["k"], rtol=1e-10)
    assert np.allclose(rep.r2, naive["r2"], rtol=1e-10)
    assert (rep.n_fluid, rep.n_nonfluid) == (naive["n_fluid"], naive["n_nonfluid"])


def test_rmse_examples():
    p, r, m = fields()
    assert rmse_regions(r, r, m) == ((0.0,) * 3, (0.0,) * 3)
    shifted = r.copy()
    shifted[0] += 2.0
    fluid, non = rmse_regions(shifted, r, m)
    assert fluid == pytest.approx((2.0, 0.0, 0.0), abs=1e-12) and non == pytest.approx((2.0, 0.0, 0.0), abs=1e-12)
    fluid, non = rmse_regions(p, r, np.ones(m.shape, bool))
    assert non is None


def test_regression_examples():
    _, r, m = fields()
    assert regression_stats(r, r, m) == ((1.0,) * 3, (1.0,) * 3)
    k, r2 = regression_stats(0.5 * r, r, m)
    assert k == pytest.approx((0.5,) * 3) and r2 == pytest.approx((1.0,) * 3)
    flat = r.copy()
    flat[1] = 0.0
    with pytest.raises(DegenerateReferenceError, match="degenerate-reference"):
        regression_stats(r, flat, m)
    rep = evaluate_fields(r, flat, m)
    assert math.isnan(rep.k[1]) and rep.k[0] == 1.0


def test_scale_behaviour():
    p, r, m = fields(seed=3)
    r = np.where(np.abs(r) < 1, 1.0, r)
    a, b = evaluate_fields(p, r, m), evaluate_fields(3 * p, 3 * r, m)
    assert np.allclose(a.k, b.k) and np.allclose(a.r2, b.r2)
    assert np.allclose(np.array(b.rmse_fluid), 3 * np.array(a.rmse_fluid))
    assert b.re == pytest.approx(a.re, abs=1e-6)


def test_tile_origins_cover():
    assert tile_origins(12) == [0]
    assert tile_origins(20) == [0, 8]
    assert tile_origins(22) == [0, 8, 10]
    with pytest.raises(ValueError):
        tile_origins(11)


def lr_volume(n=20, seed=0):
    return make_sample(n=n, seed=seed)


def test_stitch_trilinear_equals_global():
    lr = lr_volume(20)
    out = stitch_sr(TrilinearStub(), lr)
    assert out.grid.shape == (40, 40, 40)
    glob = upsample2_array(lr.velocity.stack().astype(np.float32), axes=(1, 2, 3))
    assert np.max(np.abs(out.stack() - glob)) < 1e-6 * max(1.0, np.abs(glob).max())


def test_stitch_order_independent():
    lr = lr_volume(22, seed=1)

    def fn(v, m, venc):
        return upsample2_array(np.asarray(v, np.float64) ** 2 / 50.0, axes=(2, 3, 4))

    a = stitch_sr(CallablePredictor(fn), lr, batch_size=16).stack()
    b = stitch_sr(CallablePredictor(fn), lr, batch_size=1).stack()
    assert np.array_equal(a, b)


def test_stitch_rejects_small():
    with pytest.raises(ValueError):
        stitch_sr(TrilinearStub(), lr_volume(8))


def test_recover_native_oracle_and_baseline():
    native = generate_phantom(PhantomSpec("tube-jet", grid=VolumeGrid(32, 32, 32, 1.5), seed=2))
    oracle = recover_native_eval(native, OracleStub(native.velocity))
    assert oracle.re == 0.0 and oracle.k[2] == 1.0 and oracle.r2[2] == 1.0
    assert oracle.domain == native.compartment
    tri = recover_native_eval(native, TrilinearStub())
    assert 0 < tri.re < 1 and math.isfinite(tri.re)
    with pytest.raises(ValueError):
        recover_native_eval(make_sample(n=30), TrilinearStub())


def test_evaluate_patches(small_patches):
    rep = evaluate_patches(small_patches.hr_vel, small_patches, model="oracle")
    assert rep.re == 0.0 and rep.domain == "cardiac+aortic"  # code order
    with pytest.raises(ValueError):
        evaluate_patches(small_patches.hr_vel[:1], small_patches)


def test_report_roundtrip(tmp_path):
    p, r, m = fields()
    rep = evaluate_fields(p, r, m, model="net", domain="aortic")
    export_report([rep], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(REPORT_COLUMNS)
    rows = read_report(tmp_path / "r.csv")
    assert rows[0]["model"] == "net" and float(rows[0]["re"]) == rep.re
    assert float(rows[0]["k_y"]) == rep.k[1]


def test_export_slice(tmp_path):
    g = VolumeGrid(4, 5, 6)
    export_slice(ScalarField(g, np.full(g.shape, 3.0)), "z", 2, tmp_path / "c.pgm")
    img = read_pgm(tmp_path / "c.pgm")
    assert img.shape == (5, 4) and len(np.unique(img)) == 1
    assert (tmp_path / "c.pgm.scale").read_text().startswith("min=3.0")
    rng = np.random.default_rng(0)
    v = VectorField.from_array(g, rng.standard_normal((3,) + g.shape).astype(np.float32))
    export_slice(v, "x", 1, tmp_path / "s.csv")
    back = np.loadtxt(tmp_path / "s.csv", delimiter=",", dtype=np.float32)
    speed = np.sqrt((v.stack().astype(np.float64) ** 2).sum(0))[:, :, 1].astype(np.float32)
    assert np.array_equal(back, speed)
    with pytest.raises(ValueError):
        export_slice(v, "w", 0, tmp_path / "bad.pgm")
