"""Dense linear-algebra helpers: Jacobi eigensolvers, PCA spectra, numerical
rank and a central-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DEFAULT_RANK_TOL = 1e-8
DEFAULT_FD_STEP = 1e-5


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise ValueError."""
    m = np.array(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        bad = np.argwhere(~np.isfinite(m))[0]
        raise ValueError(f"{name}: non-finite entry at {tuple(int(i) for i in bad)}")
    return m


def eigh_symmetric(m, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose a symmetric matrix with cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors stored as columns.
    """
    a = as_matrix(m)
    n, k = a.shape
    if n != k:
        raise ValueError(f"eigh_symmetric: matrix must be square, got {n}x{k}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > 1e-10 * max(scale, np.finfo(float).tiny):
        raise ValueError(f"eigh_symmetric: matrix not symmetric (max |A - A^T| = {asym:.3e})")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n == 0 or scale == 0.0:
        return np.zeros(n), v

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= 1e-15 * np.linalg.norm(a):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :]
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("eigh_symmetric: Jacobi sweeps did not converge")

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def singular_values(m, max_sweeps: int = 100) -> np.ndarray:
    """Singular values (descending) via one-sided Jacobi orthogonalization.

    Works on the columns of the thinner orientation so tiny singular values
    keep their absolute accuracy (forming the Gram matrix would square the
    condition number).
    """
    a = as_matrix(m)
    if a.shape[1] > a.shape[0]:
        a = a.T
    a = a.copy()
    n = a.shape[1]
    if a.size == 0:
        return np.zeros(0)
    eps = np.finfo(float).eps
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, p], a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if abs(gamma) <= eps * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                a[:, p] = new_p
        if not rotated:
            break
    else:
        raise RuntimeError("singular_values: one-sided Jacobi did not converge")
    return np.sort(np.linalg.norm(a, axis=0))[::-1]


def numerical_rank(m, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Count singular values above ``rel_tol`` times the largest one."""
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    sv = singular_values(m)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rel_tol * sv[0]))


def top_energy_fraction(m, k: int = 1) -> float:
    """Share of the squared Frobenius norm carried by the top ``k`` singular values."""
    sv = singular_values(m)
    total = float(np.sum(sv**2))
    if total == 0.0:
        return 0.0
    return float(np.sum(sv[:k] ** 2) / total)


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    cumulative_explained: np.ndarray
    numerical_rank: int
    rel_tol: float = DEFAULT_RANK_TOL
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "cumulative_explained": [float(x) for x in self.cumulative_explained],
            "numerical_rank": int(self.numerical_rank),
            "rel_tol": self.rel_tol,
        }


def pca_spectrum(features, center: bool = True, rel_tol: float = DEFAULT_RANK_TOL) -> SpectrumReport:
    """Explained-variance spectrum of the rows of ``features``.

    Eigenvalues are those of the sample covariance ``X^T X / (n - 1)`` (after
    optional mean-centering). When there are fewer samples than features the
    smaller Gram matrix is decomposed instead; the nonzero spectrum is the same.
    """
    x = as_matrix(features, "features")
    n, d = x.shape
    if n < 2:
        raise ValueError("pca_spectrum: need at least 2 samples")
    if center:
        x = x - x.mean(axis=0)
    gram = x.T @ x if d <= n else x @ x.T
    gram = 0.5 * (gram + gram.T) / (n - 1)
    lam, _ = eigh_symmetric(gram)
    lam = np.clip(lam, 0.0, None)[: min(n, d)]
    total = float(np.sum(lam))
    if total == 0.0:
        return SpectrumReport(lam, np.zeros(0), 0, rel_tol)
    cum = np.cumsum(lam) / total
    cum = np.minimum(np.maximum.accumulate(cum), 1.0)
    return SpectrumReport(lam, cum, numerical_rank(x, rel_tol), rel_tol)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("finite_diff_grad: step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"finite_diff_grad: non-finite function value at coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
