import math

import numpy as np
import pytest

from conftest import random_separable
from diffmargin.data import Dataset, PairStream, gen_two_balls, translate
from diffmargin.linear import (LinearModel, NotSeparableError, canonical_scale, ce_loss_and_grad, cosine,
                               enumerate_active_sets, geometric_margin, linear_minimal_perturbation,
                               min_norm_dual, one_step_model, one_step_sgd_experiment, pair_loss_and_grad,
                               pairwise_positivity, sample_well_separated, select_bias, signed_rows,
                               svm_augmented, svm_hard_margin_oracle, train_cross_entropy,
                               train_differential_linear, training_error, well_separated)
from diffmargin.numerics import finite_diff_grad

PM_E1 = Dataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1, -1]))


def test_model_json_roundtrip(rng):
    m = LinearModel(rng.normal(size=4), 0.1 + 1e-17)
    back = LinearModel.from_json(m.to_json())
    np.testing.assert_array_equal(back.w, m.w)
    assert back.b == m.b
    with pytest.raises(ValueError):
        LinearModel.from_json('{"schema_version": 9, "d": 1, "w": [1], "b": 0}')


def test_model_rejects_nonfinite():
    with pytest.raises(ValueError):
        LinearModel(np.array([np.nan]), 0.0)


def test_ce_loss_at_zero():
    ds = gen_two_balls(3, 4, 5, 1.0, 5.0, seed=0)
    loss, gw, gb = ce_loss_and_grad(LinearModel(np.zeros(3), 0.0), ds)
    assert loss == pytest.approx(9 * math.log(2))


def test_ce_loss_separable_limit():
    for t, bound in [(10.0, 1e-4), (100.0, 1e-40)]:
        loss, _, _ = ce_loss_and_grad(LinearModel(np.array([t, 0.0]), 0.0), PM_E1)
        assert loss < bound


def test_ce_loss_no_overflow():
    loss, gw, gb = ce_loss_and_grad(LinearModel(np.array([-1e6, 0.0]), 0.0), PM_E1)
    assert math.isfinite(loss) and loss == pytest.approx(2e6)
    assert np.all(np.isfinite(gw))


def test_ce_gradient_matches_fd(rng):
    for _ in range(10):
        ds = random_separable(rng, 3, 8)
        w, b = rng.normal(size=3), rng.normal()

        def f(z):
            return ce_loss_and_grad(LinearModel(z[:-1], z[-1]), ds)[0]

        _, gw, gb = ce_loss_and_grad(LinearModel(w, b), ds)
        fd = finite_diff_grad(f, np.append(w, b))
        np.testing.assert_allclose(np.append(gw, gb), fd, rtol=1e-4, atol=1e-6)


def test_pair_gradient_matches_fd(rng):
    for _ in range(10):
        diffs = rng.normal(size=(6, 4))
        w = rng.normal(size=4)
        _, g = pair_loss_and_grad(w, diffs)
        fd = finite_diff_grad(lambda z: pair_loss_and_grad(z, diffs)[0], w)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6)


def test_pair_loss_at_zero():
    diffs = np.ones((7, 2))
    assert pair_loss_and_grad(np.zeros(2), diffs)[0] == pytest.approx(7 * math.log(2))


def test_ce_training_symmetric_pair():
    tr = train_cross_entropy(PM_E1, iters=5000)
    assert cosine(tr.final.w, [1.0, 0.0]) > 1 - 1e-12
    assert abs(tr.final.b) < 1e-9
    norms = [np.linalg.norm(m.w) for m in tr.snapshots]
    assert norms[-1] > norms[1]


def test_ce_direction_matches_augmented_svm(rng):
    for _ in range(3):
        ds = random_separable(rng, 3, 5)
        tr = train_cross_entropy(ds, iters=20000)
        z = svm_augmented(ds)
        assert cosine(np.append(tr.final.w, tr.final.b), np.append(z.w_svm, z.b_svm)) >= 0.999


def test_constant_step_rule_descends(rng):
    ds = random_separable(rng, 2, 6)
    tr = train_cross_entropy(ds, iters=2000, step="constant")
    assert tr.losses[-1] < tr.losses[0]


def test_differential_single_pair():
    ds = Dataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1, -1]))
    tr = train_differential_linear(PairStream(ds), iters=2000)
    assert cosine(tr.final.w, [1, 0]) > 1 - 1e-12
    assert tr.losses[0] == pytest.approx(math.log(2))


def test_differential_direction_matches_svm(rng):
    ds = random_separable(rng, 4, 12)
    tr = train_differential_linear(PairStream(ds), iters=20000)
    svm = svm_hard_margin_oracle(ds)
    cos = [cosine(d, svm.w_svm) for d in tr.directions()]
    assert cos[-1] >= 0.999
    assert tr.info["feasible"]


def test_select_bias_examples():
    ds = Dataset(np.array([[3.0], [5.0], [-2.0], [0.0]]), np.array([1, 1, -1, -1]))
    b, ok = select_bias(np.array([1.0]), ds)
    assert b == -1.5 and ok
    ds2 = Dataset(np.array([[1.0], [2.0]]), np.array([1, -1]))
    b, ok = select_bias(np.array([1.0]), ds2)
    assert b == -1.5 and not ok


def test_geometric_margin_examples():
    ds = Dataset(np.array([[2.0, 0.0], [-2.0, 0.0]]), np.array([1, -1]))
    m = LinearModel(np.array([1.0, 0.0]), 0.0)
    assert geometric_margin(m, ds) == 2.0
    assert geometric_margin(m.scaled(7.5), ds) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        geometric_margin(LinearModel(np.zeros(2), 1.0), ds)


def test_canonical_scale(rng):
    ds = random_separable(rng, 3, 10)
    svm = svm_hard_margin_oracle(ds)
    scaled, c = canonical_scale(svm.model().scaled(3.0), ds)
    gap = np.min(ds.pos @ scaled.w) - np.max(ds.neg @ scaled.w)
    assert gap == pytest.approx(2.0)


def test_linear_minimal_perturbation():
    m = LinearModel(np.array([1.0, 0.0]), 0.0)
    assert linear_minimal_perturbation(m, [3.0, 4.0]) == 3.0
    assert linear_minimal_perturbation(m, [0.0, 4.0]) == 0.0
    with pytest.raises(ValueError):
        linear_minimal_perturbation(LinearModel(np.zeros(2)), [1.0, 1.0])


def test_svm_symmetric_pair():
    s = svm_hard_margin_oracle(PM_E1)
    np.testing.assert_allclose(s.w_svm, [1, 0], atol=1e-9)
    assert s.gamma == pytest.approx(1.0)
    assert s.b_svm == pytest.approx(0.0, abs=1e-9)


def test_svm_augmented_symmetric_and_feasible(rng):
    z = svm_augmented(PM_E1)
    np.testing.assert_allclose(z.w_svm, [1, 0], atol=1e-9)
    assert abs(z.b_svm) < 1e-9
    for _ in range(5):
        ds = random_separable(rng, 3, 7)
        s = svm_augmented(ds)
        zz = np.append(s.w_svm, s.b_svm)
        aug = np.hstack([ds.points, np.ones((ds.n, 1))])
        assert np.all(aug[ds.labels > 0] @ zz >= 1 - 1e-8)
        assert np.all(aug[ds.labels < 0] @ zz <= -1 + 1e-8)


def test_svm_matches_enumeration_2d(rng):
    for _ in range(10):
        ds = random_separable(rng, 2, 6)
        s = svm_hard_margin_oracle(ds)
        d = ds.pair_differences()
        z, _ = enumerate_active_sets(d, np.full(d.shape[0], 2.0))
        np.testing.assert_allclose(s.w_svm, z, atol=1e-6)


def test_svm_augmented_matches_enumeration(rng):
    for _ in range(10):
        ds = random_separable(rng, 2, 5)
        s = svm_augmented(ds)
        a = signed_rows(ds, augment=True)
        z, _ = enumerate_active_sets(a, np.ones(a.shape[0]))
        np.testing.assert_allclose(np.append(s.w_svm, s.b_svm), z, atol=1e-6)


def test_svm_not_separable():
    ds = Dataset(np.array([[0.0], [1.0], [2.0]]), np.array([1, -1, 1]))
    with pytest.raises(NotSeparableError):
        svm_hard_margin_oracle(ds)


def test_min_norm_dual_ill_conditioned():
    # nearly parallel constraints: the accelerated iteration must still converge
    a = np.array([[1.0, 0.0], [1.0, 1e-3], [1.0, -1e-3]])
    z, alpha, it, res = min_norm_dual(a, np.ones(3))
    z_ref, _ = enumerate_active_sets(a, np.ones(3))
    np.testing.assert_allclose(z, z_ref, atol=1e-8)
    assert res <= 1e-10


def test_trained_margin_below_gamma(rng):
    ds = random_separable(rng, 3, 8)
    gamma = svm_hard_margin_oracle(ds).gamma
    m = train_cross_entropy(ds, iters=3000).final
    assert geometric_margin(m, ds) <= gamma + 1e-6


def test_one_step_singletons(rng):
    for _ in range(10):
        ds = Dataset(rng.normal(size=(2, 3)), np.array([1, -1]))
        assert one_step_sgd_experiment(ds, seed=0).train_error == 0.0


def test_one_step_step_size_irrelevant():
    ds = gen_two_balls(3, 3, 3, 0.2, 5.0, seed=1)
    a = one_step_model(ds, 0, 3, 1.0)
    b = one_step_model(ds, 0, 3, 0.01)
    assert cosine(a.w, b.w) == pytest.approx(1.0)
    assert training_error(a, ds) == training_error(b, ds)


def test_one_step_well_separated_all_pairs(rng):
    for _ in range(20):
        ds = sample_well_separated(rng)
        holds, strict, *_ = well_separated(ds)
        assert holds
        for i in ds.pos_index:
            for j in ds.neg_index:
                assert training_error(one_step_model(ds, i, j), ds) == 0.0
        assert pairwise_positivity(ds)
        assert select_bias(one_step_model(ds, ds.pos_index[0], ds.neg_index[0]).w, ds)[1]
