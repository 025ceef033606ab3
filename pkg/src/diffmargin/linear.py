"""Linear classifiers: cross-entropy and pairwise (differential) logistic
training, bias selection, geometric margins and hard-margin SVM oracles."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .data import Dataset, PairStream

SCHEMA_VERSION = 1


class NotSeparableError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class LinearModel:
    w: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.b = float(self.b)
        if not (np.all(np.isfinite(self.w)) and math.isfinite(self.b)):
            raise ValueError("LinearModel parameters must be finite")

    threshold = 0.0

    @property
    def d(self) -> int:
        return self.w.shape[0]

    def scores(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.w + self.b

    def score_grad(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.scores(x), np.broadcast_to(self.w, x.shape).copy()

    def predict(self, x) -> np.ndarray:
        return np.where(self.scores(x) > 0, 1, -1)

    def scaled(self, c: float) -> "LinearModel":
        return LinearModel(c * self.w, c * self.b)

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, "d": self.d, "w": [float(v) for v in self.w], "b": self.b})

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {doc.get('schema_version')!r}")
        w = np.asarray(doc["w"], dtype=np.float64)
        if w.shape[0] != doc["d"]:
            raise ValueError("weight length does not match d")
        return cls(w, doc["b"])


@dataclass
class TrainTrace:
    iterations: list[int]
    snapshots: list[LinearModel]
    losses: np.ndarray
    final: LinearModel
    converged: bool = False
    last_direction_change: float = float("nan")
    lr: float = float("nan")
    info: dict = field(default_factory=dict)

    def directions(self) -> np.ndarray:
        out = []
        for m in self.snapshots:
            v = np.append(m.w, m.b) if self.info.get("augmented") else m.w
            n = np.linalg.norm(v)
            out.append(v / n if n > 0 else v)
        return np.array(out)


# ---------------------------------------------------------------- losses

def _softplus(z):
    return np.logaddexp(0.0, z)


def _log_softplus(z):
    """log(log(1 + e^z)) without underflow for very negative z."""
    z = np.asarray(z, dtype=np.float64)
    low = z < -30.0
    mid = np.log(_softplus(np.where(low, -30.0, z)))
    return np.where(low, z - 0.5 * np.exp(np.minimum(z, -30.0)), mid)


def signed_rows(dataset: Dataset, augment: bool) -> np.ndarray:
    """Rows label * x (or label * [x, 1]) so each loss term is softplus(-<a, w>)."""
    x = dataset.points
    if augment:
        x = np.hstack([x, np.ones((dataset.n, 1))])
    return dataset.labels[:, None] * x


def ce_loss_and_grad(model: LinearModel, dataset: Dataset) -> tuple[float, np.ndarray, float]:
    """Summed two-class cross-entropy and its gradient in (w, b)."""
    dataset.require_two_class()
    s = model.scores(dataset.points)
    z = -dataset.labels * s
    loss = float(np.sum(_softplus(z)))
    coef = -dataset.labels * expit(z)
    gw = coef @ dataset.points
    gb = float(np.sum(coef))
    if not (math.isfinite(loss) and np.all(np.isfinite(gw))):
        raise FloatingPointError("cross-entropy loss or gradient is not finite")
    return loss, gw, gb


def pair_loss_and_grad(w, diffs) -> tuple[float, np.ndarray]:
    """sum_p log(1 + exp(-<w, d_p>)) over pair differences d_p = x_i - y_j."""
    w = np.asarray(w, dtype=np.float64)
    m = diffs @ w
    loss = float(np.sum(_softplus(-m)))
    return loss, -(expit(-m) @ diffs)


def pair_differences(pairs: PairStream, idx=None) -> np.ndarray:
    idx = pairs.all_pairs() if idx is None else idx
    pts = pairs.dataset.points
    return pts[idx[:, 0]] - pts[idx[:, 1]]


# ---------------------------------------------------------------- descent

def _descend(a: np.ndarray, lr: float | None, iters: int, step: str, snapshot_every: int,
             stop_tol: float = 1e-9, stop_window: int = 1000):
    """Gradient descent on sum_p softplus(-<a_p, w>) from w = 0.

    ``step="constant"`` uses a fixed learning rate (default 0.5 / sigma_max(A)^2).
    ``step="normalized"`` divides the gradient by the current loss (default
    rate 1 / max ||a_p||^2); the quotient is computed in log space so it stays
    exact after the loss itself underflows. Any step that would increase the
    loss is retried with half the rate.
    """
    if step not in ("constant", "normalized"):
        raise ValueError(f"unknown step rule {step!r}")
    if lr is None:
        if step == "constant":
            lr = 0.5 / np.linalg.norm(a, 2) ** 2
        else:
            lr = 1.0 / np.max(np.sum(a * a, axis=1))
    if lr <= 0:
        raise ValueError("learning rate must be positive")

    def log_loss(w):
        return float(logsumexp(_log_softplus(-(a @ w))))

    w = np.zeros(a.shape[1])
    cur = log_loss(w)
    initial = cur
    losses = [math.exp(cur)]
    log_losses = [cur]
    iterations, snaps = [0], [w.copy()]
    window_dir = None
    converged = False
    change = float("nan")
    halvings = 0
    for t in range(1, iters + 1):
        m = a @ w
        if step == "constant":
            g = -(expit(-m) @ a)
            scale = lr
        else:
            wts = np.exp(-_softplus(m) - cur)
            g = -(wts @ a)
            scale = lr
        while True:
            cand = w - scale * g
            new = log_loss(cand)
            if new <= cur + 1e-12 * max(1.0, abs(cur)):
                break
            scale *= 0.5
            halvings += 1
            if new > initial + math.log(1e3) or halvings > 60:
                raise TrainingDivergedError(
                    f"loss diverged at iteration {t} (log-loss {new:.3e}); try a smaller learning rate",
                    last_good=w.copy(),
                )
        lr = scale
        w = cand
        cur = new
        losses.append(math.exp(cur))
        log_losses.append(cur)
        if t % snapshot_every == 0 or t == iters:
            iterations.append(t)
            snaps.append(w.copy())
        if t % stop_window == 0:
            d = w / np.linalg.norm(w)
            if window_dir is not None:
                change = float(np.linalg.norm(d - window_dir))
                if change < stop_tol:
                    converged = True
                    if iterations[-1] != t:
                        iterations.append(t)
                        snaps.append(w.copy())
                    break
            window_dir = d
    return w, iterations, snaps, np.array(losses), np.array(log_losses), converged, change, lr


def train_cross_entropy(dataset: Dataset, lr: float | None = None, iters: int = 200_000,
                        snapshot_every: int = 1000, step: str = "normalized") -> TrainTrace:
    """Full-batch descent on the summed cross-entropy in the augmented variable [w; b]."""
    dataset.require_two_class()
    a = signed_rows(dataset, augment=True)
    z, its, snaps, losses, logl, conv, change, lr = _descend(a, lr, iters, step, snapshot_every)
    models = [LinearModel(s[:-1], s[-1]) for s in snaps]
    return TrainTrace(its, models, losses, LinearModel(z[:-1], z[-1]), conv, change, lr,
                      {"augmented": True, "step": step, "log_losses": logl})


def train_differential_linear(pairs: PairStream, lr: float | None = None, iters: int = 200_000,
                              snapshot_every: int = 1000, step: str = "normalized") -> TrainTrace:
    """Full-batch descent on sum_{i,j} log(1 + exp(-<w, x_i - y_j>)).

    The final model's bias comes from :func:`select_bias`.
    """
    diffs = pair_differences(pairs)
    if diffs.shape[0] == 0:
        raise ValueError("empty pair stream")
    w, its, snaps, losses, logl, conv, change, lr = _descend(diffs, lr, iters, step, snapshot_every)
    b, feasible = select_bias(w, pairs.dataset)
    models = [LinearModel(s, 0.0) for s in snaps]
    return TrainTrace(its, models, losses, LinearModel(w, b), conv, change, lr,
                      {"augmented": False, "step": step, "feasible": feasible, "log_losses": logl})


# ---------------------------------------------------------------- geometry

def select_bias(w, dataset: Dataset) -> tuple[float, bool]:
    """Midpoint bias between the lowest positive and highest negative projection."""
    w = np.asarray(w, dtype=np.float64)
    dataset.require_two_class()
    px = dataset.pos @ w
    py = dataset.neg @ w
    b = -0.5 * float(np.min(px)) - 0.5 * float(np.max(py))
    feasible = bool(np.all(px + b >= 0) and np.all(py + b <= 0))
    return b, feasible


def geometric_margin(model: LinearModel, dataset: Dataset) -> float:
    """min label * (<w, p> + b) / ||w||; negative when some point is misclassified."""
    nw = np.linalg.norm(model.w)
    if nw == 0:
        raise ValueError("geometric_margin: w is zero")
    return float(np.min(dataset.labels * model.scores(dataset.points)) / nw)


def canonical_scale(model: LinearModel, dataset: Dataset) -> tuple[LinearModel, float]:
    """Rescale (w, b) so that min_{i,j} <w, x_i - y_j> = 2."""
    gap = float(np.min(dataset.pos @ model.w) - np.max(dataset.neg @ model.w))
    if gap <= 0:
        raise NotSeparableError("model does not separate the classes; canonical scaling undefined")
    c = 2.0 / gap
    return model.scaled(c), c


def linear_minimal_perturbation(model: LinearModel, x) -> float:
    """Euclidean distance from x to the hyperplane <w, .> + b = 0."""
    nw = np.linalg.norm(model.w)
    if nw == 0:
        raise ValueError("linear_minimal_perturbation: w is zero")
    return float(abs(model.scores(np.asarray(x, dtype=float))) / nw)


# ---------------------------------------------------------------- SVM

@dataclass
class SvmSolution:
    w_svm: np.ndarray
    b_svm: float
    gamma: float
    duals: np.ndarray
    iterations: int = 0
    kkt_residual: float = float("nan")

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.duals > 0)

    def model(self) -> LinearModel:
        return LinearModel(self.w_svm, self.b_svm)


def min_norm_dual(a: np.ndarray, c: np.ndarray, max_iter: int = 100_000, tol: float = 1e-10,
                  divergence: float = 1e8) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Solve min ||z||^2 s.t. A z >= c by projected gradient ascent on the dual.

    Dual: max c^T alpha - 1/2 ||A^T alpha||^2 over alpha >= 0, with z = A^T alpha.
    Fixed step 1/L where L = sigma_max(A)^2, with Nesterov extrapolation that
    restarts whenever the objective would decrease (nearly parallel constraints
    make the plain iteration crawl). Stops when the projected-gradient residual
    max|alpha - P(alpha + grad)| drops below ``tol``.
    """
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    lip = np.linalg.norm(a, 2) ** 2
    if lip == 0:
        raise NotSeparableError("all constraint vectors are zero")

    def residual(al):
        g = c - a @ (a.T @ al)
        return float(np.max(np.abs(al - np.maximum(0.0, al + g))))

    alpha = np.zeros(a.shape[0])
    y = alpha.copy()
    theta = 1.0
    res = residual(alpha)
    it = 0
    while res > tol and it < max_iter:
        it += 1
        if it % 10 == 0:
            res = residual(alpha)
            if res <= tol:
                break
        grad = c - a @ (a.T @ y)
        nxt = np.maximum(0.0, y + grad / lip)
        # gradient-based restart: drop momentum when it points against the ascent step
        if (nxt - alpha) @ (c - a @ (a.T @ nxt)) < 0 and theta > 1.0:
            theta = 1.0
            y = alpha.copy()
            continue
        theta_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
        y = nxt + ((theta - 1.0) / theta_next) * (nxt - alpha)
        alpha, theta = nxt, theta_next
        if np.sum(alpha) > divergence:
            break
    res = residual(alpha)
    z = a.T @ alpha
    infeas = float(np.max(c - a @ z))
    if infeas > 1e-6 * max(1.0, float(np.max(np.abs(c)))):
        raise NotSeparableError(
            f"constraints not satisfiable: primal infeasibility {infeas:.3e} with dual mass {np.sum(alpha):.3e}"
        )
    return z, alpha, it, res


def enumerate_active_sets(a: np.ndarray, c: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force oracle for min ||z||^2 s.t. A z >= c.

    Tries every subset S of constraints as the active set: z = A_S^T lam with
    A_S A_S^T lam = c_S. The first subset (by size) giving lam >= 0 and a
    feasible z is a KKT point, hence the unique optimum.
    """
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    p = a.shape[0]
    if p > 16:
        raise ValueError("enumeration limited to 16 constraints")
    scale = max(1.0, float(np.max(np.abs(c))))
    for size in range(0, p + 1):
        for s in itertools.combinations(range(p), size):
            s = list(s)
            if size:
                g = a[s] @ a[s].T
                if np.linalg.matrix_rank(g) < size:
                    continue
                lam = np.linalg.solve(g, c[s])
                if np.any(lam < -tol):
                    continue
                z = a[s].T @ lam
            else:
                lam = np.zeros(0)
                z = np.zeros(a.shape[1])
            if np.all(a @ z >= c - tol * scale):
                duals = np.zeros(p)
                duals[s] = lam
                return z, duals
    raise NotSeparableError("no feasible active set")


def svm_hard_margin_oracle(dataset: Dataset, max_iter: int = 100_000, tol: float = 1e-10) -> SvmSolution:
    """Hard-margin SVM through the difference formulation.

    min ||w||^2 s.t. <w, x_i - y_j> >= 2; gamma = 1/||w|| is the per-side
    geometric margin and the bias is the midpoint rule of :func:`select_bias`.
    """
    dataset.require_two_class()
    diffs = dataset.pair_differences()
    w, alpha, it, res = min_norm_dual(diffs, np.full(diffs.shape[0], 2.0), max_iter, tol)
    b, _ = select_bias(w, dataset)
    return SvmSolution(w, b, 1.0 / float(np.linalg.norm(w)), alpha, it, res)


def svm_augmented(dataset: Dataset, max_iter: int = 100_000, tol: float = 1e-10) -> SvmSolution:
    """Through-origin max-margin problem in R^{d+1} that cross-entropy descent
    converges to: min ||z||^2 s.t. <z, [x_i; 1]> >= 1 and <z, [y_j; 1]> <= -1.

    Returns the first d coordinates as ``w_svm`` and the last as ``b_svm``.
    """
    dataset.require_two_class()
    a = signed_rows(dataset, augment=True)
    z, alpha, it, res = min_norm_dual(a, np.ones(a.shape[0]), max_iter, tol)
    return SvmSolution(z[:-1], float(z[-1]), 1.0 / float(np.linalg.norm(z)), alpha, it, res)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    den = float(np.linalg.norm(u) * np.linalg.norm(v))
    return float(u @ v) / den if den > 0 else float("nan")


# ---------------------------------------------------------------- one-step SGD

def class_diameters(dataset: Dataset) -> tuple[float, float]:
    def diam(p):
        if len(p) < 2:
            return 0.0
        return float(np.max(np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)))
    return diam(dataset.pos), diam(dataset.neg)


@dataclass
class OneStepReport:
    pair_used: tuple[int, int]
    model: LinearModel
    train_error: float
    condition_holds: bool
    condition_holds_strict: bool
    gamma: float
    r_x: float
    r_y: float
    feasible: bool

    def to_dict(self) -> dict:
        return {
            "pair_used": list(self.pair_used),
            "w": self.model.w.tolist(),
            "b": self.model.b,
            "train_error": self.train_error,
            "condition_holds": self.condition_holds,
            "condition_holds_strict": self.condition_holds_strict,
            "gamma": self.gamma,
            "r_x": self.r_x,
            "r_y": self.r_y,
            "feasible": self.feasible,
        }


def well_separated(dataset: Dataset, svm: SvmSolution | None = None) -> tuple[bool, bool, float, float, float]:
    """(2g >= 5R, g > 5R/2, gamma, R_x, R_y) for the one-step guarantee."""
    svm = svm or svm_hard_margin_oracle(dataset)
    rx, ry = class_diameters(dataset)
    r = max(rx, ry)
    return 2 * svm.gamma >= 5 * r, svm.gamma > 2.5 * r, svm.gamma, rx, ry


def one_step_model(dataset: Dataset, i: int, j: int, step: float = 1.0) -> LinearModel:
    """One gradient step from w = 0 on log(1 + exp(-<w, x_i - y_j>))."""
    d = dataset.points[i] - dataset.points[j]
    # gradient at zero is -d/2
    w = step * 0.5 * d
    b, _ = select_bias(w, dataset)
    return LinearModel(w, b)


def training_error(model: LinearModel, dataset: Dataset) -> float:
    s = model.scores(dataset.points)
    wrong = np.where(dataset.labels > 0, s < 0, s > 0)
    return float(np.mean(wrong))


def one_step_sgd_experiment(dataset: Dataset, seed: int = 0, pair: tuple[int, int] | None = None,
                            step: float = 1.0) -> OneStepReport:
    dataset.require_two_class()
    if pair is None:
        rng = np.random.default_rng(seed)
        pair = (int(rng.choice(dataset.pos_index)), int(rng.choice(dataset.neg_index)))
    model = one_step_model(dataset, pair[0], pair[1], step)
    _, feasible = select_bias(model.w, dataset)
    try:
        holds, strict, gamma, rx, ry = well_separated(dataset)
    except NotSeparableError:
        rx, ry = class_diameters(dataset)
        holds, strict, gamma = False, False, float("nan")
    return OneStepReport(pair, model, training_error(model, dataset), holds, strict, gamma, rx, ry, feasible)


def sample_well_separated(rng: np.random.Generator, max_tries: int = 1000) -> Dataset:
    """Random two-ball instance satisfying 2 gamma >= 5 max(R_x, R_y) (rejection sampling)."""
    from .data import gen_two_balls

    for _ in range(max_tries):
        dim = int(rng.integers(2, 6))
        radius = float(rng.uniform(0.2, 1.0))
        ds = gen_two_balls(dim, int(rng.integers(1, 9)), int(rng.integers(1, 9)), radius,
                           radius * float(rng.uniform(10.0, 20.0)), int(rng.integers(1 << 30)))
        if well_separated(ds)[0]:
            return ds
    raise RuntimeError("could not draw a well-separated instance")


def pairwise_positivity(dataset: Dataset) -> bool:
    """<x_i' - y_j', x_i - y_j> > 0 for every quadruple (brute force)."""
    d = dataset.pair_differences()
    return bool(np.all(d @ d.T > 0))
