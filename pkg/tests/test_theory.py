import math

import numpy as np
import pytest

from diffmargin.data import (AffineSubspaceSpec, Dataset, axis_affine_spec, gen_affine_lowrank,
                             random_affine_spec, translate)
from diffmargin.linear import LinearModel, svm_hard_margin_oracle, train_cross_entropy
from diffmargin.numerics import eigh_symmetric
from diffmargin.theory import (ce_bound_report, corollary1_bound, detect_affine_subspace, lemma2_check,
                               prop1_rank_experiment, theorem1_bound, translation_table)


def test_detect_planted_single_constraint():
    ds = gen_affine_lowrank(axis_affine_spec(2, 1, [10.0]), 3, 3, 1.0, seed=0)
    spec = detect_affine_subspace(ds)
    assert spec.k == 1
    np.testing.assert_allclose(np.abs(spec.directions[0]), [0, 1], atol=1e-9)
    assert spec.offsets[0] == pytest.approx(10.0, abs=1e-9)


def test_detect_full_rank_empty(rng):
    ds = Dataset(rng.normal(size=(20, 4)), np.array([1, -1] * 10))
    assert detect_affine_subspace(ds).k == 0


def test_detect_three_constraints_r10():
    planted = random_affine_spec(10, 3, 2.0, seed=4)
    ds = gen_affine_lowrank(planted, 10, 10, 1.0, seed=4)
    spec = detect_affine_subspace(ds)
    assert spec.k == 3
    # same affine set: projector and squared offset norm agree
    np.testing.assert_allclose(spec.directions.T @ spec.directions, planted.directions.T @ planted.directions, atol=1e-8)
    assert spec.offset_sq_sum == pytest.approx(planted.offset_sq_sum, abs=1e-8)


def test_bound_symmetric_b_zero():
    # symmetric about the origin in the free direction, offset along e2
    ds = Dataset(np.array([[1.0, 3.0], [-1.0, 3.0]]), np.array([1, -1]))
    spec = AffineSubspaceSpec(2, np.array([[0.0, 1.0]]), np.array([3.0]))
    rep = theorem1_bound(ds, LinearModel(np.array([1.0, 0.0]), 0.0), spec)
    assert rep.B == 0.0
    assert rep.theorem1_bound == pytest.approx(rep.gamma)
    assert rep.corollary1_bound is None


def test_bound_zero_offsets_equals_gamma():
    spec = random_affine_spec(4, 1, 0.0, seed=2)
    ds = gen_affine_lowrank(spec, 4, 4, 1.0, asymmetry=3.0, seed=2)
    m = train_cross_entropy(ds, iters=3000).final
    rep = theorem1_bound(ds, m, spec)
    assert rep.theorem1_bound == pytest.approx(rep.gamma)


def test_bound_holds_after_training():
    spec = random_affine_spec(5, 2, 1.5, seed=7)
    ds = gen_affine_lowrank(spec, 6, 6, 1.0, asymmetry=2.0, seed=7)
    rep, _ = ce_bound_report(ds, iters=20000, spec=spec)
    assert rep.holds["theorem1"] and rep.holds["ordering"]
    assert rep.theorem1_bound <= rep.gamma
    assert "converged" in rep.diagnostics


def test_bound_rejects_non_affine(rng):
    ds = Dataset(rng.normal(size=(6, 3)) + np.array([[3, 0, 0]] * 3 + [[-3, 0, 0]] * 3), np.array([1, 1, 1, -1, -1, -1]))
    with pytest.raises(ValueError, match="affine"):
        theorem1_bound(ds, LinearModel(np.array([1.0, 0, 0]), 0.0))


def test_corollary_halves_with_doubled_offsets():
    spec1 = axis_affine_spec(3, 1, [1.0])
    spec2 = axis_affine_spec(3, 1, [2.0])
    ds1 = gen_affine_lowrank(spec1, 3, 3, 1.0, asymmetry=1.0, seed=1)
    ds2 = Dataset(ds1.points + np.array([0, 0, 1.0]), ds1.labels)
    m = LinearModel(np.array([1.0, 0.2, 0.0]), 0.0)
    svm = svm_hard_margin_oracle(ds1).model()
    r1 = corollary1_bound(ds1, svm, spec1)
    r2 = corollary1_bound(ds2, LinearModel(svm.w, svm.b), spec2)
    assert r1.B == pytest.approx(r2.B)
    assert r2.corollary1_bound == pytest.approx(r1.corollary1_bound / 2)


def test_corollary_lists_violations():
    spec = axis_affine_spec(2, 1, [1.0])
    ds = Dataset(np.array([[1.0, 0.5], [-1.0, 1.0]]), np.array([1, -1]))
    with pytest.raises(ValueError, match=r"point 0, direction 0"):
        corollary1_bound(ds, LinearModel(np.array([1.0, 0.0]), 0.0), spec)


def test_translation_table_svm_constant():
    spec = axis_affine_spec(2, 1, [1.0])
    ds = gen_affine_lowrank(spec, 5, 5, 1.0, asymmetry=1.0, seed=0)
    u = np.array(ds.provenance["split_direction"])
    rows = translation_table(ds, u, [0, 5], iters=5000)
    assert abs(rows[0]["svm_margin"] - rows[1]["svm_margin"]) < 1e-9
    assert rows[1]["ce_margin"] < rows[0]["ce_margin"]


def _small():
    return gen_affine_lowrank(random_affine_spec(6, 1, 1.0, seed=3), 6, 6, 1.0, seed=3)


@pytest.mark.parametrize("seed", range(3))
def test_prop1_zero_init_rank(seed):
    tr = prop1_rank_experiment(6, 4, _small(), "zero-W", iters=500, seed=seed)
    assert tr.zero_init_ok()
    assert max(tr.rank_W) <= 1
    assert min(tr.w_parallel) > 1 - 1e-10


def test_prop1_tanh_head_energy_increases():
    tr = prop1_rank_experiment(8, 5, _small(), "tanh-head", lr=0.05, iters=3000, seed=0)
    assert tr.top1_energy[-1] > tr.top1_energy[0]
    assert tr.to_csv().splitlines()[0] == "iteration,rank_phi,rank_W,top1_energy"


def test_lemma2_examples(rng):
    lam, vec = lemma2_check([3.0, 4.0])
    assert lam == pytest.approx(5.0)
    np.testing.assert_allclose(vec, [3, 4, 5], atol=1e-9)
    lam, _ = lemma2_check([1.0])
    assert lam == pytest.approx(1.0)
    with pytest.raises(ValueError):
        lemma2_check([0.0, 0.0])


def test_lemma2_random_closed_form(rng):
    for _ in range(100):
        v = rng.normal(size=9)
        lam, vec = lemma2_check(v)
        assert lam == pytest.approx(np.linalg.norm(v), abs=1e-8)
        np.testing.assert_allclose(vec, np.append(v, np.linalg.norm(v)), atol=1e-8)
