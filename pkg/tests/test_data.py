import numpy as np
import pytest

from diffmargin.data import (CIFAR_RECORD_BYTES, AffineSubspaceSpec, Dataset, PairStream, axis_affine_spec,
                             gen_affine_lowrank, gen_nonlinear_2d, gen_synthetic_images, gen_two_balls,
                             load_cifar10_pair, random_affine_spec, read_cifar10_records, sample_pairs,
                             split, standardize, translate, write_cifar10_file)
from diffmargin.linear import LinearModel, svm_hard_margin_oracle, train_cross_entropy


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([1, 0]))


def test_affine_constraint_exact():
    spec = axis_affine_spec(2, 1, [10.0])
    ds = gen_affine_lowrank(spec, 2, 2, 2.0, seed=0)
    assert np.all(ds.points[:, 1] == 10.0)


def test_affine_zero_offsets_linear_subspace():
    spec = random_affine_spec(5, 2, 0.0, seed=1)
    ds = gen_affine_lowrank(spec, 4, 4, 1.0, seed=1)
    np.testing.assert_allclose(ds.points @ spec.directions.T, 0.0, atol=1e-12)


def test_affine_constraints_machine_precision():
    spec = random_affine_spec(10, 3, 2.0, seed=3)
    ds = gen_affine_lowrank(spec, 6, 5, 1.0, asymmetry=2.0, seed=3)
    dev = ds.points @ spec.directions.T - spec.offsets
    assert np.max(np.abs(dev)) <= 64 * np.finfo(float).eps * np.max(np.abs(ds.points)) * 10


@pytest.mark.parametrize("seed", range(5))
def test_affine_margin_is_half_separation(seed):
    spec = random_affine_spec(6, 2, 1.5, seed=seed)
    ds = gen_affine_lowrank(spec, 5, 4, 1.3, asymmetry=1.0, seed=seed)
    assert svm_hard_margin_oracle(ds).gamma == pytest.approx(0.65, abs=1e-6)


def test_affine_rejects_empty_class():
    with pytest.raises(ValueError):
        gen_affine_lowrank(axis_affine_spec(3, 1, [1.0]), 0, 2, 1.0)


def test_spec_requires_orthonormal():
    with pytest.raises(ValueError):
        AffineSubspaceSpec(2, np.array([[1.0, 1.0]]), np.array([0.0]))


def test_ring_vs_cluster_inside_ring():
    ds = gen_nonlinear_2d("ring-vs-cluster", 40, 0.0, seed=2)
    assert np.max(np.linalg.norm(ds.pos, axis=1)) < np.min(np.linalg.norm(ds.neg, axis=1))


def test_nonlinear_deterministic():
    a = gen_nonlinear_2d("two-moons", 10, 0.1, seed=7)
    b = gen_nonlinear_2d("two-moons", 10, 0.1, seed=7)
    np.testing.assert_array_equal(a.points, b.points)


def test_ring_vs_cluster_not_linearly_separable():
    ds = gen_nonlinear_2d("ring-vs-cluster", 60, 0.0, seed=0)
    model = train_cross_entropy(ds, iters=5000).final
    assert np.mean(model.predict(ds.points) == ds.labels) < 0.8


def test_cifar_file_size_and_roundtrip(tmp_path, rng):
    labels = rng.integers(0, 10, size=10)
    pixels = rng.integers(0, 256, size=(10, 3072), dtype=np.uint8)
    path = tmp_path / "batch.bin"
    write_cifar10_file(path, labels, pixels)
    assert path.stat().st_size == 10 * CIFAR_RECORD_BYTES
    lab, pix = read_cifar10_records(path)
    np.testing.assert_array_equal(lab, labels)
    np.testing.assert_array_equal(pix, pixels)


def test_cifar_pair_mapping(tmp_path):
    labels = np.array([0, 7, 3, 0])
    pixels = np.arange(4 * 3072).reshape(4, 3072) % 256
    path = tmp_path / "b.bin"
    write_cifar10_file(path, labels, pixels)
    ds = load_cifar10_pair([path], 0, 7)
    np.testing.assert_array_equal(ds.labels, [1, -1, 1])
    np.testing.assert_allclose(ds.points[1], pixels[1] / 255.0)
    raw = load_cifar10_pair([path], 0, 7, normalize=False)
    np.testing.assert_array_equal(raw.points[2], pixels[3])


def test_cifar_errors(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * (CIFAR_RECORD_BYTES + 5))
    with pytest.raises(ValueError, match="offset 3073"):
        read_cifar10_records(path)
    good = tmp_path / "good.bin"
    write_cifar10_file(good, [0, 0], np.zeros((2, 3072)))
    with pytest.raises(ValueError, match="label 7"):
        load_cifar10_pair([good], 0, 7)


def test_translate_identity_and_differences(rng):
    ds = gen_two_balls(3, 4, 5, 0.5, 5.0, seed=1)
    same = translate(ds, np.zeros(3))
    np.testing.assert_array_equal(same.points, ds.points)
    moved = translate(ds, rng.normal(size=3) * 10)
    np.testing.assert_allclose(moved.pair_differences(), ds.pair_differences(), atol=1e-12)
    with pytest.raises(ValueError):
        translate(ds, np.zeros(2))


def test_translate_svm_invariance(rng):
    ds = gen_two_balls(3, 4, 5, 0.5, 5.0, seed=2)
    v = rng.normal(size=3) * 5
    a, b = svm_hard_margin_oracle(ds), svm_hard_margin_oracle(translate(ds, v))
    np.testing.assert_allclose(a.w_svm, b.w_svm, atol=1e-9)
    assert a.gamma == pytest.approx(b.gamma, abs=1e-9)
    assert b.b_svm == pytest.approx(a.b_svm - a.w_svm @ v, abs=1e-8)


def test_pairstream_exhaustive_epoch():
    ds = Dataset(np.arange(5.0).reshape(5, 1), np.array([1, 1, -1, -1, -1]))
    stream = PairStream(ds, "exhaustive-shuffled", seed=3)
    epoch = stream.epoch()
    assert len(epoch) == 6
    assert {tuple(p) for p in epoch} == {(i, j) for i in (0, 1) for j in (2, 3, 4)}
    again = PairStream(ds, "exhaustive-shuffled", seed=3).epoch()
    np.testing.assert_array_equal(epoch, again)


def test_pairstream_hard_mining(rng):
    ds = gen_two_balls(2, 4, 4, 1.0, 4.0, seed=5)
    model = LinearModel(rng.normal(size=2), 0.0)
    first = sample_pairs(ds, "hard-mining", seed=0, model=model).epoch()[0]
    diffs = model.scores(ds.pos)[:, None] - model.scores(ds.neg)[None, :]
    i, j = np.unravel_index(np.argmin(diffs), diffs.shape)
    assert (first[0], first[1]) == (ds.pos_index[i], ds.neg_index[j])
    with pytest.raises(ValueError):
        sample_pairs(ds, "hard-mining", seed=0)


def test_pairstream_take_and_uniform():
    ds = gen_two_balls(2, 3, 3, 1.0, 4.0, seed=5)
    s = PairStream(ds, "uniform-random", seed=1)
    pairs = s.take(20)
    assert pairs.shape == (20, 2)
    assert np.all(ds.labels[pairs[:, 0]] == 1) and np.all(ds.labels[pairs[:, 1]] == -1)


def test_split_and_standardize():
    ds = gen_synthetic_images(10, seed=0)
    tr, te = split(ds, 4, seed=0)
    assert tr.n == 16 and te.n == 4
    z, mean, std = standardize(tr)
    np.testing.assert_allclose(z.points.mean(axis=0), 0, atol=1e-12)
    assert ds.dim == 3072 and ds.points.min() >= 0 and ds.points.max() <= 1
