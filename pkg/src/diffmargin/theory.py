"""Executable margin bounds for cross-entropy trained linear classifiers on
affine-constrained data, and the feature-rank collapse experiment."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .data import AffineSubspaceSpec, Dataset, translate
from .linear import (
    LinearModel,
    NotSeparableError,
    canonical_scale,
    geometric_margin,
    svm_hard_margin_oracle,
    train_cross_entropy,
)
from .numerics import eigh_symmetric, numerical_rank, pca_spectrum, top_energy_fraction

EXACT_AFFINE_TOL = 1e-8
NEAR_AFFINE_TOL = 1e-3
BOUND_SLACK = 1e-6


def detect_affine_subspace(dataset: Dataset, tol: float = EXACT_AFFINE_TOL) -> AffineSubspaceSpec:
    """Directions along which every point has the same projection (within tol).

    Candidates are eigenvectors of the centered scatter matrix; a candidate is
    kept when the spread of projections around their mean is at most
    ``tol * max(1, max |p|)``. Signs are fixed so offsets are nonnegative.
    """
    pts = dataset.points
    if pts.shape[0] < 2:
        raise ValueError("detect_affine_subspace: need at least 2 points")
    d = pts.shape[1]
    mean = pts.mean(axis=0)
    centered = pts - mean
    scatter = centered.T @ centered
    _, vecs = eigh_symmetric(0.5 * (scatter + scatter.T))
    limit = tol * max(1.0, float(np.max(np.abs(pts))))
    dirs, offs = [], []
    for k in range(d - 1, -1, -1):
        r = vecs[:, k]
        proj = pts @ r
        if np.max(np.abs(proj - proj.mean())) > limit:
            break
        delta = float(proj.mean())
        if delta < 0:
            r, delta = -r, -delta
        dirs.append(r)
        offs.append(delta)
    if not dirs:
        return AffineSubspaceSpec(d, np.zeros((0, d)), np.zeros(0))
    r = np.array(dirs)
    # re-orthonormalize the kept block to clear rounding
    q, _ = np.linalg.qr(r.T)
    q = q.T * np.sign(np.sum(q.T * r, axis=1))[:, None]
    offs = (pts @ q.T).mean(axis=0)
    flip = offs < 0
    q[flip] *= -1
    offs[flip] *= -1
    return AffineSubspaceSpec(d, q, offs)


@dataclass
class BoundReport:
    gamma: float
    B: float
    delta_sq_sum: float
    theorem1_bound: float | None
    corollary1_bound: float | None
    measured_margin: float
    holds: dict = field(default_factory=dict)
    scale_factor: float = 1.0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _one_sided_violations(dataset: Dataset, spec: AffineSubspaceSpec, tol: float) -> list[tuple[int, int]]:
    proj = dataset.points @ spec.directions.T
    limit = tol * max(1.0, float(np.max(np.abs(dataset.points))))
    bad = []
    for row, (lab, p) in enumerate(zip(dataset.labels, proj)):
        for k, (pk, dk) in enumerate(zip(p, spec.offsets)):
            if (lab > 0 and pk < dk - limit) or (lab < 0 and pk > dk + limit):
                bad.append((row, k))
    return bad


def _svm_gamma(dataset: Dataset) -> float:
    try:
        return svm_hard_margin_oracle(dataset).gamma
    except NotSeparableError as exc:
        raise ValueError(f"separability hypothesis failed: {exc}") from exc


def _corollary(B: float, dsum: float) -> float | None:
    denom = B * B * dsum
    return None if denom == 0 else 1.0 / math.sqrt(denom)


def theorem1_bound(dataset: Dataset, trained: LinearModel, spec: AffineSubspaceSpec | None = None,
                   tol: float = EXACT_AFFINE_TOL, diagnostics: dict | None = None) -> BoundReport:
    """Upper bound 1 / sqrt(1/gamma^2 + B^2 sum Delta_k^2) on the trained margin.

    B is the bias of the trained model after canonical scaling.
    """
    if spec is None:
        spec = detect_affine_subspace(dataset, tol)
    else:
        bad = np.max(np.abs(dataset.points @ spec.directions.T - spec.offsets)) if spec.k else 0.0
        if bad > tol * max(1.0, float(np.max(np.abs(dataset.points)))):
            raise ValueError(f"affine hypothesis failed: max deviation {bad:.3e}")
    if spec.k == 0:
        raise ValueError("affine hypothesis failed: points span the full space")
    gamma = _svm_gamma(dataset)
    scaled, c = canonical_scale(trained, dataset)
    B = scaled.b
    dsum = spec.offset_sq_sum
    bound = 1.0 / math.sqrt(1.0 / gamma**2 + B * B * dsum)
    cor = _corollary(B, dsum)
    measured = geometric_margin(trained, dataset)
    holds = {
        "theorem1": measured <= bound + BOUND_SLACK,
        "corollary1": cor is None or measured <= cor + BOUND_SLACK,
        "ordering": bound <= gamma + 1e-9 and (cor is None or bound <= cor + 1e-9),
    }
    return BoundReport(gamma, B, dsum, bound, cor, measured, holds, c, dict(diagnostics or {}))


def corollary1_bound(dataset: Dataset, trained: LinearModel, spec: AffineSubspaceSpec | None = None,
                     tol: float = EXACT_AFFINE_TOL, diagnostics: dict | None = None) -> BoundReport:
    """Upper bound 1 / sqrt(B^2 sum Delta_k^2) for one-sided affine data.

    Requires <r_k, x_i> >= Delta_k and <r_k, y_j> <= Delta_k. The bound is
    reported as ``None`` (infinite) when B = 0 or all offsets vanish.
    """
    if spec is None:
        spec = detect_affine_subspace(dataset, tol)
    bad = _one_sided_violations(dataset, spec, tol)
    if bad:
        listed = ", ".join(f"(point {i}, direction {k})" for i, k in bad[:10])
        raise ValueError(f"one-sided affine hypothesis violated at {listed}")
    gamma = _svm_gamma(dataset)
    scaled, c = canonical_scale(trained, dataset)
    B = scaled.b
    dsum = spec.offset_sq_sum
    cor = _corollary(B, dsum)
    measured = geometric_margin(trained, dataset)
    holds = {"corollary1": cor is None or measured <= cor + BOUND_SLACK}
    return BoundReport(gamma, B, dsum, None, cor, measured, holds, c, dict(diagnostics or {}))


def ce_bound_report(dataset: Dataset, iters: int = 20_000, spec: AffineSubspaceSpec | None = None) -> tuple[BoundReport, object]:
    """Train by cross-entropy descent and evaluate the affine margin bound."""
    trace = train_cross_entropy(dataset, iters=iters)
    diag = {"iterations": trace.iterations[-1], "converged": trace.converged,
            "direction_change_per_1000": trace.last_direction_change}
    return theorem1_bound(dataset, trace.final, spec, diagnostics=diag), trace


def translation_table(dataset: Dataset, direction, shifts, iters: int = 20_000) -> list[dict]:
    """Margins of SVM and cross-entropy solutions as the data moves along ``direction``."""
    direction = np.asarray(direction, dtype=float)
    rows = []
    for c in shifts:
        moved = translate(dataset, c * direction)
        svm = svm_hard_margin_oracle(moved)
        trace = train_cross_entropy(moved, iters=iters)
        scaled, _ = canonical_scale(trace.final, moved)
        rows.append({
            "shift": float(c),
            "svm_margin": svm.gamma,
            "ce_margin": geometric_margin(trace.final, moved),
            "ce_B": scaled.b,
            "ce_converged": trace.converged,
        })
    return rows


# ---------------------------------------------------------------- rank collapse

@dataclass
class RankTrace:
    iterations: list[int]
    rank_phi: list[int]
    rank_W: list[int]
    top1_energy: list[float]
    w_parallel: list[float]
    spectra: dict = field(default_factory=dict)
    init: str = "zero-W"
    rel_tol: float = 1e-8

    @property
    def max_rank_phi(self) -> int:
        return max(self.rank_phi)

    def zero_init_ok(self) -> bool:
        return all(r <= 1 for r in self.rank_phi)

    def to_dict(self) -> dict:
        return {
            "init": self.init,
            "rel_tol": self.rel_tol,
            "iterations": self.iterations,
            "rank_phi": self.rank_phi,
            "rank_W": self.rank_W,
            "top1_energy": self.top1_energy,
            "w_parallel": self.w_parallel,
            "spectra": {str(k): v for k, v in self.spectra.items()},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iteration", "rank_phi", "rank_W", "top1_energy"])
        for row in zip(self.iterations, self.rank_phi, self.rank_W, self.top1_energy):
            wr.writerow([row[0], row[1], row[2], repr(float(row[3]))])
        return buf.getvalue()


PROP1_INITS = ("zero-W", "random-small", "tanh-head")


def prop1_rank_experiment(head_dim: int, feature_dim: int, dataset: Dataset, init: str = "zero-W",
                          lr: float = 0.05, iters: int = 2000, checkpoints: int = 10, seed: int = 0,
                          rel_tol: float = 1e-8, spectra: bool = False) -> RankTrace:
    """Gradient descent on sum log(1 + exp(-label * w^T W h(x))) with h fixed.

    ``h`` is the identity for ``zero-W``/``random-small`` when ``head_dim``
    equals the input dimension, otherwise a fixed random tanh layer of width
    ``head_dim``; ``tanh-head`` always uses the tanh layer. Updates are
    simultaneous: W += lr w v^T, w += lr W v with v = sum_i label_i
    sigma(-margin_i) h(x_i).
    """
    if init not in PROP1_INITS:
        raise ValueError(f"unknown init {init!r}")
    rng = np.random.default_rng(seed)
    x = dataset.points
    y = dataset.labels.astype(float)
    if init != "tanh-head" and head_dim == x.shape[1]:
        h = x.copy()
    else:
        u = rng.normal(scale=1.0 / math.sqrt(x.shape[1]), size=(head_dim, x.shape[1]))
        c = rng.normal(scale=0.1, size=head_dim)
        h = np.tanh(x @ u.T + c)
    w = rng.normal(scale=1.0 / math.sqrt(feature_dim), size=feature_dim)
    if init == "zero-W":
        W = np.zeros((feature_dim, head_dim))
    else:
        W = rng.normal(scale=1e-2, size=(feature_dim, head_dim))
    w0 = w.copy()
    marks = sorted(set(np.linspace(0, iters, checkpoints + 1).astype(int).tolist()))
    trace = RankTrace([], [], [], [], [], {}, init, rel_tol)

    def record(t):
        phi = h @ W.T
        trace.iterations.append(t)
        trace.rank_phi.append(numerical_rank(phi, rel_tol) if np.any(phi) else 0)
        trace.rank_W.append(numerical_rank(W, rel_tol) if np.any(W) else 0)
        trace.top1_energy.append(top_energy_fraction(W))
        trace.w_parallel.append(float(abs(w @ w0) / (np.linalg.norm(w) * np.linalg.norm(w0))))
        if spectra and np.any(phi):
            trace.spectra[t] = [float(v) for v in pca_spectrum(phi).cumulative_explained]

    for t in range(iters + 1):
        if t in marks:
            record(t)
        if t == iters:
            break
        margin = y * (h @ (W.T @ w))
        v = (y * expit(-margin)) @ h
        W, w = W + lr * np.outer(w, v), w + lr * (W @ v)
    return trace


def lemma2_check(v) -> tuple[float, np.ndarray]:
    """Unique positive eigenpair of [[0, v], [v^T, 0]], scaled as [v; ||v||]."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if not np.any(v):
        raise ValueError("lemma2_check: v must be nonzero")
    n = v.size + 1
    m = np.zeros((n, n))
    m[:-1, -1] = v
    m[-1, :-1] = v
    vals, vecs = eigh_symmetric(m)
    positive = vals > 1e-10 * np.linalg.norm(v)
    if int(np.sum(positive)) != 1:
        raise AssertionError(f"expected exactly one positive eigenvalue, found {int(np.sum(positive))}")
    lam = float(vals[0])
    vec = vecs[:, 0]
    vec = vec * (lam / vec[-1])
    return lam, vec
