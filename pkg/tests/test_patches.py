import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from f4flow.patches import (COMPARTMENT_CODES, BatchComposition, PatchSet, VolumeFormatError, assign_models,
                            augment_rotations, compose_batch, decode_dataset, encode_dataset, epoch_batches,
                            extract_patches, min_fluid_count, read_dataset, record_size, rotate_patch,
                            split_by_model, write_dataset)
from f4flow.synth import SynthPair
from f4flow.volume import FlowSample, FluidMask, ScalarField, VectorField, VolumeGrid


def pair_with_mask(lr_mask, venc=100.0, seed=0):
    n = lr_mask.shape[0]
    rng = np.random.default_rng(seed)
    lg, hg = VolumeGrid(n, n, n, 3.0), VolumeGrid(2 * n, 2 * n, 2 * n, 1.5)
    hr_mask = lr_mask.repeat(2, 0).repeat(2, 1).repeat(2, 2)

    def sample(g, mask):
        vel = rng.uniform(-50, 50, (3,) + g.shape)
        return FlowSample(ScalarField(g, np.where(mask, 1.0, 0.05)), VectorField.from_array(g, vel),
                          FluidMask(g, mask), venc, "aortic")

    return SynthPair(sample(hg, hr_mask), sample(lg, lr_mask))


def random_set(n, seed=0, p=4):
    rng = np.random.default_rng(seed)
    h = 2 * p
    return PatchSet(rng.standard_normal((n, p, p, p)), rng.standard_normal((n, 3, p, p, p)),
                    rng.standard_normal((n, 3, h, h, h)), rng.random((n, h, h, h)) < 0.5,
                    rng.uniform(50, 150, n), rng.integers(0, 3, n), rng.integers(0, 5, n))


def test_threshold_arithmetic():
    assert min_fluid_count(12, 0.05) == 87


def test_threshold_86_rejected_87_kept():
    m = np.zeros((12, 12, 12), bool)
    m.flat[:86] = True
    assert len(extract_patches(pair_with_mask(m), stride=12)) == 0
    m.flat[86] = True
    ps = extract_patches(pair_with_mask(m), stride=12)
    assert len(ps) == 1 and int(ps.lr_mask.sum()) == 87


def test_all_nonfluid_gives_nothing():
    ps, kept, rejected = extract_patches(pair_with_mask(np.zeros((24, 24, 24), bool)), stride=12,
                                         return_counts=True)
    assert (len(ps), kept, rejected) == (0, 0, 8)


def test_window_count_and_alignment():
    pair = pair_with_mask(np.ones((24, 24, 24), bool))
    ps = extract_patches(pair, stride=12, source_model=9)
    assert len(ps) == 8
    assert ps.hr_vel.shape == (8, 3, 24, 24, 24)
    assert set(ps.source_model.tolist()) == {9}
    # second window in linear order starts at x = 12 (x fastest)
    assert np.array_equal(ps.lr_vel[1], pair.lr.velocity.stack()[:, 0:12, 0:12, 12:24])
    assert np.array_equal(ps.hr_vel[1], pair.hr.velocity.stack()[:, 0:24, 0:24, 24:48])


def test_patch_too_large():
    with pytest.raises(ValueError):
        extract_patches(pair_with_mask(np.ones((8, 8, 8), bool)))


def test_rotation_example_and_identity():
    ps = random_set(1, seed=3)
    p = ps[0]
    r = rotate_patch(p, "z", 2)
    # 180 deg about z: (vx, vy, vz) -> (-vx, -vy, vz) at (z, -y, -x)
    assert np.array_equal(r.lr_vel[0], -p.lr_vel[0][:, ::-1, ::-1])
    assert np.array_equal(r.lr_vel[2], p.lr_vel[2][:, ::-1, ::-1])
    for axis in "xyz":
        q = p
        for _ in range(4):
            q = rotate_patch(q, axis, 1)
        assert q.hr_vel.tobytes() == p.hr_vel.tobytes()
        assert np.array_equal(q.hr_mask, p.hr_mask)
    with pytest.raises(ValueError):
        rotate_patch(p, "w", 1)
    with pytest.raises(ValueError):
        rotate_patch(p, "x", 4)


@settings(max_examples=20, deadline=None)
@given(axis=st.sampled_from("xyz"), turns=st.integers(1, 3), seed=st.integers(0, 1000))
def test_rotation_preserves_speed(axis, turns, seed):
    p = random_set(1, seed=seed)[0]
    r = rotate_patch(p, axis, turns)
    speed = lambda v: np.sort(np.sqrt((v.astype(np.float64) ** 2).sum(0)).ravel())  # noqa: E731
    assert np.allclose(speed(r.hr_vel), speed(p.hr_vel), rtol=1e-6)
    assert r.venc == p.venc


def test_augment_multiplier():
    ps = random_set(5)
    out = augment_rotations(ps, multiplier=2, seed=1)
    assert len(out) == 15
    # ordered by window, original first, then its rotations
    assert np.array_equal(out.source_model, np.repeat(ps.source_model, 3))
    assert np.array_equal(out.hr_vel[::3], ps.hr_vel)


def test_split_exact_ratio_example():
    a = assign_models({0: 600, 1: 200, 2: 200})
    assert a[0] == "train"
    assert sorted(a.values()) == ["test", "train", "validation"]


def test_split_needs_three_models():
    with pytest.raises(ValueError):
        assign_models({0: 5, 1: 5})


@settings(max_examples=25, deadline=None)
@given(counts=st.lists(st.integers(1, 50), min_size=3, max_size=12), seed=st.integers(0, 100))
def test_split_is_partition_and_deterministic(counts, seed):
    c = dict(enumerate(counts))
    a = assign_models(c, seed=seed)
    assert set(a) == set(c)
    assert {"train", "validation", "test"} <= set(a.values())
    assert a == assign_models(c, seed=seed)


def test_split_by_model_disjoint():
    ps = random_set(40, seed=2)
    sp = split_by_model(ps, seed=4)
    tr, va, te = sp.apply(ps)
    sets = [set(x.source_model.tolist()) for x in (tr, va, te)]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert len(tr) + len(va) + len(te) == 40


def test_batch_composition():
    ps = random_set(8)
    ps.compartment[:] = [0, 0, 1, 1, 1, 1, 1, 1]
    comp = BatchComposition.from_labels(ps.compartment)
    assert comp.codes == (0, 1) and comp.counts == (2, 6) and comp.n_compartments == 2
    one = random_set(6)
    one.compartment[:] = 2
    _, c = compose_batch(one, 4, np.random.default_rng(0))
    assert c.n_compartments == 1 and c.counts == (4,)
    with pytest.raises(ValueError):
        compose_batch(one, 7, np.random.default_rng(0))


def test_epoch_touches_every_patch_once():
    idx = np.concatenate(list(epoch_batches(23, 5, np.random.default_rng(3))))
    assert sorted(idx.tolist()) == list(range(23))


def test_dataset_roundtrip_and_sizes(tmp_path):
    empty = PatchSet.empty()
    write_dataset(tmp_path / "e.f4p", empty)
    assert len(read_dataset(tmp_path / "e.f4p")) == 0
    assert (tmp_path / "e.f4p").stat().st_size == 20  # magic, version, patch, factor, count
    assert record_size() == 1 + 2 + 4 + 4 * (1728 + 3 * 1728 + 3 * 13824) + 13824
    ps = random_set(3, p=12)
    write_dataset(tmp_path / "d.f4p", ps[:1])
    assert (tmp_path / "d.f4p").stat().st_size == 20 + record_size()


def test_dataset_roundtrip_bit_exact(tmp_path):
    ps = random_set(100, seed=9)
    back = decode_dataset(encode_dataset(ps))
    for name in ("lr_mag", "lr_vel", "hr_vel", "venc", "compartment", "source_model"):
        assert getattr(back, name).tobytes() == getattr(ps, name).astype(getattr(back, name).dtype).tobytes()
    assert np.array_equal(back.hr_mask, ps.hr_mask)


def test_dataset_format_errors():
    buf = encode_dataset(random_set(2))
    for bad, code in ((b"NOPE" + buf[4:], "bad-magic"), (buf[:-1], "truncated"), (buf + b"x", "trailing-bytes")):
        with pytest.raises(VolumeFormatError) as e:
            decode_dataset(bad)
        assert e.value.code == code


def test_compartment_codes_fixed():
    assert COMPARTMENT_CODES == {"cardiac": 0, "aortic": 1, "cerebrovascular": 2, "dissection": 3}


def test_pipeline_patches_meet_rule(small_patches):
    assert len(small_patches) > 0
    lr_counts = small_patches.lr_mask.reshape(len(small_patches), -1).sum(1)
    assert lr_counts.min() >= 87
