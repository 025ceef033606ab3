"""Gradient attacks on binary score models (FGSM, PGD, Carlini-Wagner L2)
and robustness curves.

A model is anything exposing ``scores(X)``, ``score_grad(X) -> (scores,
d score / d x)`` and a ``threshold``. A point with label y is correctly
classified when ``y * (score - threshold) > 0``; an attack succeeds when that
quantity becomes <= 0.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .linear import linear_minimal_perturbation

__all__ = [
    "AttackConfig", "AttackResult", "RobustnessCurve", "fgsm", "pgd", "carlini_wagner_l2",
    "attack_batch", "robustness_curve", "linear_minimal_perturbation", "minimal_pgd_epsilon",
]


@dataclass
class AttackConfig:
    kind: str = "pgd"
    norm: str = "l2"
    epsilon: float = 0.0
    steps: int = 40
    step_size: float | None = None  # None: epsilon / 10
    box: tuple[float, float] | None = None
    random_start: bool = True
    c_init: float = 1e-2
    binary_search_steps: int = 9
    inner_iters: int = 200
    confidence: float = 0.0
    cw_lr: float = 1e-2
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("fgsm", "pgd", "cw"):
            raise ValueError(f"kind: unknown attack {self.kind!r}")
        if self.norm not in ("l2", "linf"):
            raise ValueError(f"norm: unknown norm {self.norm!r}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon: must be nonnegative")
        if self.kind == "pgd" and self.steps < 1:
            raise ValueError("steps: pgd needs at least one step")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size: must be positive")
        if self.box is not None and not self.box[0] < self.box[1]:
            raise ValueError("box: need lo < hi")
        if self.kind == "cw" and self.inner_iters < 1:
            raise ValueError("inner_iters: must be at least 1")

    def step(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 10.0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["box"] = list(self.box) if self.box is not None else None
        return d


@dataclass
class AttackResult:
    original: np.ndarray
    adversarial: np.ndarray
    perturbation_norm: float
    success: bool
    queries: int
    flag: str = ""

    def to_dict(self) -> dict:
        return {"original": [float(v) for v in self.original], "adversarial": [float(v) for v in self.adversarial],
                "perturbation_norm": self.perturbation_norm, "success": self.success,
                "queries": self.queries, "flag": self.flag}


def _margins(model, x, labels) -> np.ndarray:
    return labels * (np.asarray(model.scores(x), dtype=float) - model.threshold)


def _norms(delta, norm):
    if norm == "linf":
        return np.max(np.abs(delta), axis=1) if delta.shape[1] else np.zeros(delta.shape[0])
    return np.linalg.norm(delta, axis=1)


def _project(x, x0, eps, norm, box):
    delta = x - x0
    if norm == "linf":
        delta = np.clip(delta, -eps, eps)
    else:
        n = np.linalg.norm(delta, axis=1, keepdims=True)
        scale = np.where(n > eps, eps / np.maximum(n, 1e-300), 1.0)
        delta = delta * scale
    x = x0 + delta
    if box is not None:
        # clipping toward a box that contains x0 never increases |x - x0| per coordinate
        x = np.clip(x, box[0], box[1])
    return x


def _direction(grad, norm):
    if norm == "linf":
        return np.sign(grad)
    n = np.linalg.norm(grad, axis=1, keepdims=True)
    return np.where(n > 0, grad / np.maximum(n, 1e-300), 0.0)


def _results(model, x0, adv, labels, norm, queries, flags) -> list[AttackResult]:
    # independent re-verification of every success flag
    success = _margins(model, adv, labels) <= 0
    dn = _norms(adv - x0, norm)
    return [AttackResult(x0[k].copy(), adv[k].copy(), float(dn[k]), bool(success[k]), int(queries[k]), flags[k])
            for k in range(x0.shape[0])]


def _prep(x, labels):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = np.broadcast_to(np.asarray(labels, dtype=float).reshape(-1), (x.shape[0],)).copy()
    return x, labels


def _fgsm_batch(model, x0, labels, cfg):
    _, grad = model.score_grad(x0)
    g = _direction(grad, cfg.norm)
    flags = ["zero-gradient" if not np.any(grad[k]) else "" for k in range(x0.shape[0])]
    adv = _project(x0 - labels[:, None] * cfg.epsilon * g, x0, cfg.epsilon, cfg.norm, cfg.box)
    return adv, np.ones(x0.shape[0], dtype=int), flags


def _random_start(rng, x0, eps, norm):
    n, d = x0.shape
    if norm == "linf":
        return x0 + rng.uniform(-eps, eps, size=(n, d))
    u = rng.normal(size=(n, d))
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    r = eps * rng.uniform(size=(n, 1)) ** (1.0 / max(d, 1))
    return x0 + r * u


def _pgd_batch(model, x0, labels, cfg, start=None):
    eps = cfg.epsilon
    n = x0.shape[0]
    queries = np.zeros(n, dtype=int)
    flags = [""] * n
    if eps == 0:
        return x0.copy(), queries, flags
    rng = np.random.default_rng(cfg.seed)
    if start is not None:
        x = _project(np.asarray(start, dtype=float), x0, eps, cfg.norm, cfg.box)
    elif cfg.random_start:
        x = _project(_random_start(rng, x0, eps, cfg.norm), x0, eps, cfg.norm, cfg.box)
    else:
        x = x0.copy()
    done = _margins(model, x, labels) <= 0
    best = x.copy()
    alpha = cfg.step()
    for _ in range(cfg.steps):
        live = np.nonzero(~done)[0]
        if live.size == 0:
            break
        xl = x[live]
        _, grad = model.score_grad(xl)
        queries[live] += 1
        zero = ~np.any(grad, axis=1)
        for k in live[zero]:
            flags[k] = "zero-gradient"
        xl = _project(xl - labels[live, None] * alpha * _direction(grad, cfg.norm), x0[live], eps, cfg.norm, cfg.box)
        x[live] = xl
        hit = _margins(model, xl, labels[live]) <= 0
        best[live] = xl
        done[live[hit]] = True
    return best, queries, flags


def _cw_batch(model, x0, labels, cfg):
    n, d = x0.shape
    box = cfg.box
    kappa = cfg.confidence
    queries = np.zeros(n, dtype=int)
    flags = [""] * n
    best_adv = x0.copy()
    best_norm = np.full(n, np.inf)
    already = _margins(model, x0, labels) <= 0
    best_norm[already] = 0.0
    if box is not None:
        lo, hi = box
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        z0 = np.arctanh(np.clip((x0 - mid) / half, -1 + 1e-9, 1 - 1e-9))

        def to_x(z):
            return mid + half * np.tanh(z)
    else:
        z0 = x0.copy()

        def to_x(z):
            return z

    c = np.full(n, cfg.c_init)
    c_lo = np.zeros(n)
    c_hi = np.full(n, np.inf)
    live = ~already
    for _ in range(cfg.binary_search_steps):
        idx = np.nonzero(live)[0]
        if idx.size == 0:
            break
        z = z0[idx].copy()
        xo = x0[idx]
        lab = labels[idx]
        cc = c[idx]
        found = np.zeros(idx.size, dtype=bool)
        for _ in range(cfg.inner_iters):
            x = to_x(z)
            s, grad = model.score_grad(x)
            queries[idx] += 1
            f = lab * (s - model.threshold)
            ok = f <= 0
            dn = np.linalg.norm(x - xo, axis=1)
            better = ok & (dn < best_norm[idx])
            if np.any(better):
                best_norm[idx[better]] = dn[better]
                best_adv[idx[better]] = x[better]
            found |= ok
            active = (f > -kappa).astype(float)
            gx = 2.0 * (x - xo) + (cc * active * lab)[:, None] * grad
            if box is not None:
                gx = gx * half * (1.0 - np.tanh(z) ** 2)
            z = z - cfg.cw_lr * gx
        # binary search on c, per sample
        c_hi[idx[found]] = np.minimum(c_hi[idx[found]], cc[found])
        c_lo[idx[~found]] = np.maximum(c_lo[idx[~found]], cc[~found])
        new_c = np.where(np.isfinite(c_hi[idx]), 0.5 * (c_lo[idx] + c_hi[idx]), cc * 10.0)
        c[idx] = new_c
    adv = best_adv
    return adv, queries, flags


def attack_batch(model, x, labels, config: AttackConfig, start=None) -> list[AttackResult]:
    """Run the configured attack on every row of ``x``."""
    config.validate()
    x0, labels = _prep(x, labels)
    if config.kind == "fgsm":
        adv, q, flags = _fgsm_batch(model, x0, labels, config)
    elif config.kind == "pgd":
        adv, q, flags = _pgd_batch(model, x0, labels, config, start)
    else:
        adv, q, flags = _cw_batch(model, x0, labels, config)
    norm = "l2" if config.kind == "cw" else config.norm
    return _results(model, x0, adv, labels, norm, q, flags)


def fgsm(model, x, label, config: AttackConfig) -> AttackResult:
    return attack_batch(model, x, label, AttackConfig(**{**config.__dict__, "kind": "fgsm"}))[0]


def pgd(model, x, label, config: AttackConfig) -> AttackResult:
    return attack_batch(model, x, label, AttackConfig(**{**config.__dict__, "kind": "pgd"}))[0]


def carlini_wagner_l2(model, x, label, config: AttackConfig) -> AttackResult:
    """Smallest-norm L2 misclassification found by the penalty method with a binary search on c."""
    return attack_batch(model, x, label, AttackConfig(**{**config.__dict__, "kind": "cw"}))[0]


def minimal_pgd_epsilon(model, x, label, epsilons, config: AttackConfig) -> float:
    """Smallest epsilon on an ascending grid at which pgd succeeds (inf if none)."""
    for eps in epsilons:
        if pgd(model, x, label, AttackConfig(**{**config.__dict__, "epsilon": float(eps)})).success:
            return float(eps)
    return math.inf


@dataclass
class RobustnessCurve:
    epsilons: np.ndarray
    accuracy_train: np.ndarray
    accuracy_test: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def gap(self) -> np.ndarray | None:
        if self.accuracy_test is None:
            return None
        return np.abs(self.accuracy_train - self.accuracy_test)

    def to_dict(self) -> dict:
        out = {"epsilons": [float(e) for e in self.epsilons],
               "accuracy_train": [float(a) for a in self.accuracy_train],
               "accuracy_test": None if self.accuracy_test is None else [float(a) for a in self.accuracy_test]}
        out.update(self.meta)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["epsilon", "accuracy_train", "accuracy_test"])
        for k, e in enumerate(self.epsilons):
            te = "" if self.accuracy_test is None else repr(float(self.accuracy_test[k]))
            wr.writerow([repr(float(e)), repr(float(self.accuracy_train[k])), te])
        return buf.getvalue()


def _curve_one(model, dataset: Dataset, epsilons, config: AttackConfig, dump=None, tag="train"):
    x0, labels = dataset.points, dataset.labels.astype(float)
    correct = _margins(model, x0, labels) > 0
    acc = []
    start = None
    for eps in epsilons:
        if eps == 0:
            acc.append(float(np.mean(correct)))
            continue
        cfg = AttackConfig(**{**config.__dict__, "epsilon": float(eps)})
        res = attack_batch(model, x0, labels, cfg, start=start if cfg.kind == "pgd" else None)
        hit = np.array([r.success for r in res])
        # warm start: an adversarial found inside a smaller ball stays valid for larger ones
        correct = correct & ~hit
        if cfg.kind == "pgd":
            start = np.array([r.adversarial for r in res])
        acc.append(float(np.mean(correct)))
        if dump is not None:
            for k, r in enumerate(res):
                dump.write(json.dumps({"split": tag, "epsilon": float(eps), "index": k, "success": r.success,
                                       "perturbation_norm": r.perturbation_norm, "queries": r.queries,
                                       "flag": r.flag}) + "\n")
    return np.array(acc)


def robustness_curve(model, dataset: Dataset, epsilons, config: AttackConfig, test: Dataset | None = None,
                     dump=None) -> RobustnessCurve:
    """Accuracy under attack at each epsilon, for the training set and optionally a test set.

    Epsilons are swept in ascending order with warm starts, so the curve is
    nonincreasing by construction; ``dump`` (a text stream) receives one JSON
    line per attacked sample.
    """
    eps = np.asarray(epsilons, dtype=float)
    if eps.size and (np.any(np.diff(eps) < 0) or eps[0] < 0):
        raise ValueError("epsilons must be ascending and nonnegative")
    config.validate()
    tr = _curve_one(model, dataset, eps, config, dump, "train")
    te = _curve_one(model, test, eps, config, dump, "test") if test is not None else None
    return RobustnessCurve(eps, tr, te, {"attack": config.to_dict(), "units": "model input space"})
