import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from f4flow import autodiff as ad
from f4flow.autodiff import NonFiniteError, Tensor, adjoint_check, backward, conv3d, grad_check, upsample2_array
from f4flow.models import BaseModelSpec, MetaModelSpec, build_base, build_meta


def conv_naive(x, w, b=None):
    """Direct loop over taps; zero padding, cross-correlation."""
    n, d, h, wd, _ = x.shape
    co = w.shape[4]
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, d, h, wd, co))
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                out += pad[:, a:a + d, bb:bb + h, c:c + wd, :] @ w[a, bb, c]
    return out if b is None else out + b


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_identity_kernel():
    x = rand(1, 4, 5, 3, 1)
    w = np.zeros((3, 3, 3, 1, 1))
    w[1, 1, 1] = 1.0
    assert np.array_equal(conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(1))).data, x)


def test_all_ones_kernel_counts_neighbours():
    out = conv3d(Tensor(np.ones((1, 5, 5, 5, 1))), Tensor(np.ones((3, 3, 3, 1, 1)))).data
    assert out[0, 2, 2, 2, 0] == 27.0
    assert out[0, 0, 0, 0, 0] == 8.0
    assert out[0, 0, 2, 2, 0] == 18.0


@pytest.mark.parametrize("cout", [1, 2, 5])
def test_conv_matches_naive(cout):
    x, w, b = rand(2, 3, 4, 5, 3), rand(3, 3, 3, 3, cout, seed=1), rand(cout, seed=2)
    fast = conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.allclose(fast, conv_naive(x, w, b), atol=1e-12)


def test_conv_validates_shapes():
    with pytest.raises(ValueError, match="channel mismatch"):
        conv3d(Tensor(np.zeros((1, 2, 2, 2, 3))), Tensor(np.zeros((3, 3, 3, 2, 1))))
    with pytest.raises(ValueError):
        conv3d(Tensor(np.zeros((2, 2, 2, 3))), Tensor(np.zeros((3, 3, 3, 3, 1))))
    with pytest.raises(ValueError):
        conv3d(Tensor(np.zeros((1, 2, 2, 2, 3))), Tensor(np.zeros((1, 1, 1, 3, 1))))


def test_pointwise_examples():
    x = Tensor(np.array([-2.0, 0.0, 3.0]))
    assert ad.relu(x).data.tolist() == [0.0, 0.0, 3.0]
    assert ad.leaky_relu(x, 0.2).data.tolist() == pytest.approx([-0.4, 0.0, 3.0])
    a, b = Tensor(np.ones((1, 2, 2, 2, 1))), Tensor(np.full((1, 2, 2, 2, 2), 2.0))
    cat = ad.concat_channels(a, b).data
    assert cat.shape == (1, 2, 2, 2, 3) and cat[..., 0].max() == 1.0 and cat[..., 2].min() == 2.0
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_upsample_1d_analog_and_constants():
    a = np.array([0.0, 1.0])
    assert upsample2_array(a, axes=(0,)).tolist() == [0.0, 0.25, 0.75, 1.0]
    c = np.full((1, 3, 4, 5, 2), 7.5)
    up = ad.upsample2_trilinear(Tensor(c)).data
    assert up.shape == (1, 6, 8, 10, 2) and np.all(up == 7.5)


def test_backward_linear_and_unused():
    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    unused = Tensor(np.ones(4), requires_grad=True)
    loss = ad.weighted_sum(w, np.array([4.0, 5.0, 6.0]))
    gw, gu = backward(loss, [w, unused])
    assert gw.tolist() == [4.0, 5.0, 6.0]
    assert gu.tolist() == [0.0] * 4


def test_backward_shared_input_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    (g,) = backward(ad.weighted_sum(ad.add(x, x), 1.0), [x])
    assert g.tolist() == [2.0, 2.0]


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(ad.scale(x, 2.0))


def test_non_finite_raises():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        ad.scale(Tensor(np.array([1e308])), 1e10)


def _ops():
    x = rand(1, 3, 4, 3, 3)
    return {
        "conv3d": (lambda a, w, b: conv3d(a, w, b), [x, rand(3, 3, 3, 3, 6, seed=1), rand(6, seed=2)]),
        "conv3d-narrow": (lambda a, w, b: conv3d(a, w, b), [x, rand(3, 3, 3, 3, 2, seed=3), rand(2, seed=4)]),
        "relu": (ad.relu, [x]),
        "leaky": (lambda a: ad.leaky_relu(a, 0.2), [x]),
        "add": (ad.add, [x, rand(1, 3, 4, 3, 3, seed=5)]),
        "scale": (lambda a: ad.scale(a, 0.3), [x]),
        "concat": (ad.concat_channels, [x, rand(1, 3, 4, 3, 2, seed=6)]),
        "slice": (lambda a: ad.slice_channels(a, 1, 3), [x]),
        "upsample": (ad.upsample2_trilinear, [x]),
        "weighted_sum": (lambda a: ad.weighted_sum(a, np.arange(3.0)), [x]),
        "weighted_sq_error": (lambda a: ad.weighted_sq_error(a, np.ones(x.shape), 0.5), [x]),
        "sum_squares": (lambda a, b: ad.sum_squares([a, b]), [x, rand(5, seed=7)]),
        "add_scalars": (lambda a, b: ad.add_scalars(a, b, coeffs=[2.0, -1.0]), [rand(1), rand(1, seed=8)]),
    }


@pytest.mark.parametrize("name", sorted(_ops()))
def test_adjoint_every_op(name):
    fn, inputs = _ops()[name]
    assert adjoint_check(fn, inputs) < 1e-7


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 4), h=st.integers(1, 4), w=st.integers(1, 4))
def test_upsample_adjoint_property(seed, d, h, w):
    rng = np.random.default_rng(seed)
    x, v = rng.standard_normal((2, d, h, w, 2)), rng.standard_normal((2, 2 * d, 2 * h, 2 * w, 2))
    t = Tensor(x, requires_grad=True)
    (g,) = backward(ad.weighted_sum(ad.upsample2_trilinear(t), v), [t])
    # upsampling is linear, so <U x, v> = <x, U^T v> exactly up to rounding
    assert np.sum(upsample2_array(x) * v) == pytest.approx(np.sum(x * g), rel=1e-10, abs=1e-10)


def test_grad_check_small_base_model():
    model = build_base(BaseModelSpec(4, 1, 1, seed=3)).astype(np.float64)
    rng = np.random.default_rng(0)
    inputs = [rng.uniform(-0.5, 0.5, (1, 4, 4, 4, 3)), rng.uniform(0.05, 1.0, (1, 4, 4, 4, 1))]
    rep = grad_check(model, inputs, tolerance=1e-4, n_samples=60, step=1e-6)
    assert rep.passed, rep
    assert rep.n_checked == 60
    assert rep.worst_param in model.params


def test_grad_check_gate_freezing():
    meta = build_meta(MetaModelSpec(n_base=2, channels=4, seed=1)).astype(np.float64)
    x = np.random.default_rng(1).standard_normal((1, 4, 4, 4, 6))
    small = grad_check(meta, [x], n_samples=40, step=1e-6, freeze_gates=False)
    assert small.passed and small.n_kinked == 0
    # a coarse step straddles kinks; replaying the gates keeps probes on one linear piece
    coarse = grad_check(meta, [x], n_samples=40, step=1e-1, freeze_gates=False)
    frozen = grad_check(meta, [x], n_samples=40, step=1e-1, freeze_gates=True)
    assert coarse.n_kinked > 0 and not coarse.passed
    assert frozen.n_kinked == coarse.n_kinked and frozen.max_rel_error < 1e-10


def test_grad_check_rejects_float32():
    with pytest.raises(TypeError):
        grad_check(build_base(BaseModelSpec(4, 1, 1)), [np.zeros((1, 2, 2, 2, 3)), np.zeros((1, 2, 2, 2, 1))])
