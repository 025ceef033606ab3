"""Small feedforward networks with hand-written backpropagation.

A model is a stack of layers producing penultimate features ``phi(x)`` and a
linear readout ``score = w . phi(x)`` (plus a scalar bias in cross-entropy
mode). Pair losses evaluate both members of a pair with the same parameters
and accumulate both branch gradients into one parameter set.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import Dataset, PairStream
from .linear import TrainingDivergedError

LOSS_KINDS = ("bce", "diff_log", "diff_squared")
OPTIMIZERS = ("gd", "momentum", "adam")


# ---------------------------------------------------------------- layers

class Dense:
    kind = "dense"

    def __init__(self, W, b):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        return x @ self.W.T + self.b, x

    def backward(self, dout, x):
        return dout @ self.W, [dout.T @ x, dout.sum(axis=0)]

    def spec(self):
        return {"type": "dense", "in": self.in_dim, "out": self.out_dim}


class Activation:
    kind = "activation"

    def __init__(self, fn: str, dim: int):
        if fn not in ("relu", "tanh", "identity"):
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn
        self.dim = dim

    in_dim = property(lambda self: self.dim)
    out_dim = property(lambda self: self.dim)

    def params(self):
        return []

    def forward(self, x):
        if self.fn == "relu":
            return np.maximum(x, 0.0), x
        if self.fn == "tanh":
            y = np.tanh(x)
            return y, y
        return x, None

    def backward(self, dout, cache):
        if self.fn == "relu":
            return dout * (cache > 0), []
        if self.fn == "tanh":
            return dout * (1.0 - cache**2), []
        return dout, []

    def spec(self):
        return {"type": "activation", "fn": self.fn, "dim": self.dim}


class Conv2d:
    """Valid (unpadded) 2-D convolution on flattened (C, H, W) inputs."""

    kind = "conv2d"

    def __init__(self, kernels, bias, in_shape, stride: int = 1):
        self.K = np.asarray(kernels, dtype=np.float64)
        self.b = np.asarray(bias, dtype=np.float64)
        self.in_shape = tuple(int(v) for v in in_shape)
        self.stride = int(stride)
        oc, ic, kh, kw = self.K.shape
        c, h, w = self.in_shape
        if ic != c:
            raise ValueError("kernel input channels do not match input shape")
        self.out_hw = ((h - kh) // self.stride + 1, (w - kw) // self.stride + 1)

    @property
    def in_dim(self):
        return int(np.prod(self.in_shape))

    @property
    def out_dim(self):
        return self.K.shape[0] * self.out_hw[0] * self.out_hw[1]

    @property
    def out_shape(self):
        return (self.K.shape[0],) + self.out_hw

    def params(self):
        return [self.K, self.b]

    def _cols(self, x):
        n = x.shape[0]
        c, h, w = self.in_shape
        _, _, kh, kw = self.K.shape
        oh, ow = self.out_hw
        s = self.stride
        img = x.reshape(n, c, h, w)
        cols = np.empty((n, c, kh, kw, oh, ow))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = img[:, :, i:i + s * oh:s, j:j + s * ow:s]
        return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)

    def forward(self, x):
        n = x.shape[0]
        oc = self.K.shape[0]
        oh, ow = self.out_hw
        cols = self._cols(x)
        out = cols @ self.K.reshape(oc, -1).T + self.b
        return out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2).reshape(n, -1), cols

    def backward(self, dout, cols):
        oc, c, kh, kw = self.K.shape
        oh, ow = self.out_hw
        n = dout.shape[0]
        s = self.stride
        dmat = dout.reshape(n, oc, oh, ow).transpose(0, 2, 3, 1).reshape(-1, oc)
        dK = (dmat.T @ cols).reshape(self.K.shape)
        db = dmat.sum(axis=0)
        dcols = (dmat @ self.K.reshape(oc, -1)).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dimg = np.zeros((n,) + self.in_shape)
        for i in range(kh):
            for j in range(kw):
                dimg[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
        return dimg.reshape(n, -1), [dK, db]

    def spec(self):
        return {"type": "conv2d", "in_shape": list(self.in_shape), "out_channels": int(self.K.shape[0]),
                "kernel": [int(self.K.shape[2]), int(self.K.shape[3])], "stride": self.stride}


# ---------------------------------------------------------------- model

class MlpModel:
    """Layer stack + linear readout.

    ``use_bias`` adds a readout bias (cross-entropy mode). ``threshold`` is the
    decision level on the score; prediction is +1 when score > threshold.
    """

    def __init__(self, layers, w, bias: float = 0.0, use_bias: bool = True, threshold: float = 0.0):
        self.layers = list(layers)
        self.w = np.asarray(w, dtype=np.float64).reshape(-1)
        self.bias = np.array([float(bias)])
        self.use_bias = use_bias
        self.threshold = float(threshold)
        dims = [self.input_dim] + [l.out_dim for l in self.layers]
        for l, d_in in zip(self.layers, dims[:-1]):
            if l.in_dim != d_in:
                raise ValueError(f"layer {l.spec()} expects input dim {l.in_dim}, got {d_in}")
        if dims[-1] != self.w.size:
            raise ValueError(f"readout has {self.w.size} weights for {dims[-1]} features")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim if self.layers else self.w.size

    @property
    def feature_dim(self) -> int:
        return self.w.size

    def params(self) -> list[np.ndarray]:
        out = [p for l in self.layers for p in l.params()]
        out.append(self.w)
        if self.use_bias:
            out.append(self.bias)
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        k = 0
        for p in self.params():
            p[...] = flat[k:k + p.size].reshape(p.shape)
            k += p.size
        if k != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def _forward(self, x):
        caches = []
        h = x
        for l in self.layers:
            h, c = l.forward(h)
            caches.append(c)
        return h, caches

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.input_dim:
            raise ValueError(f"input dim {x.shape[1]} does not match model input dim {self.input_dim}")
        return x, single

    def features(self, x) -> np.ndarray:
        x, _ = self._check_input(x)
        return self._forward(x)[0]

    def scores(self, x) -> np.ndarray:
        x, _ = self._check_input(x)
        phi = self._forward(x)[0]
        s = phi @ self.w
        if self.use_bias:
            s = s + self.bias[0]
        return s

    def forward(self, x):
        """(score, features) for one input or a batch."""
        x, single = self._check_input(x)
        phi = self._forward(x)[0]
        s = phi @ self.w + (self.bias[0] if self.use_bias else 0.0)
        if single:
            return float(s[0]), phi[0]
        return s, phi

    def backward(self, x, dscore, caches=None, phi=None):
        """Gradients of sum_k dscore_k * score(x_k) w.r.t. params and inputs."""
        if caches is None:
            phi, caches = self._forward(x)
        grads_rev = []
        grads_w = phi.T @ dscore
        grads_b = np.array([dscore.sum()])
        dh = np.outer(dscore, self.w)
        layer_grads = []
        for l, c in zip(reversed(self.layers), reversed(caches)):
            dh, g = l.backward(dh, c)
            layer_grads.append(g)
        for g in reversed(layer_grads):
            grads_rev.extend(g)
        grads_rev.append(grads_w)
        if self.use_bias:
            grads_rev.append(grads_b)
        return grads_rev, dh

    def score_grad(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Scores and d score / d input for a batch (used by attacks)."""
        x, _ = self._check_input(x)
        phi, caches = self._forward(x)
        s = phi @ self.w + (self.bias[0] if self.use_bias else 0.0)
        _, dx = self.backward(x, np.ones(x.shape[0]), caches, phi)
        return s, dx

    def predict(self, x) -> np.ndarray:
        return np.where(self.scores(x) > self.threshold, 1, -1)

    def accuracy(self, dataset: Dataset) -> float:
        return float(np.mean(self.predict(dataset.points) == dataset.labels))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "input_dim": self.input_dim,
            "layers": [l.spec() for l in self.layers],
            "use_bias": self.use_bias,
            "threshold": self.threshold,
            "params": [[float(v) for v in p.reshape(-1)] for p in self.params()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        doc = json.loads(text)
        layers = []
        d = doc["input_dim"]
        for sp in doc["layers"]:
            if sp["type"] == "dense":
                layers.append(Dense(np.zeros((sp["out"], sp["in"])), np.zeros(sp["out"])))
            elif sp["type"] == "activation":
                layers.append(Activation(sp["fn"], sp["dim"]))
            elif sp["type"] == "conv2d":
                c = sp["in_shape"][0]
                kh, kw = sp["kernel"]
                layers.append(Conv2d(np.zeros((sp["out_channels"], c, kh, kw)), np.zeros(sp["out_channels"]),
                                     sp["in_shape"], sp["stride"]))
            else:
                raise ValueError(f"unknown layer type {sp['type']!r}")
            d = layers[-1].out_dim
        model = cls(layers, np.zeros(d), 0.0, doc["use_bias"], doc["threshold"])
        model.set_flat(np.concatenate([np.asarray(p, dtype=np.float64) for p in doc["params"]]))
        return model


def _init_weights(rng, shape, fan_in, relu):
    std = math.sqrt((2.0 if relu else 1.0) / fan_in)
    return rng.normal(scale=std, size=shape)


def build_mlp(input_dim: int, hidden: list[int], activation: str = "relu", seed: int = 0,
              use_bias: bool = True, conv: list[dict] | None = None, in_shape=None) -> MlpModel:
    """Dense (optionally conv-first) network; the last hidden activation is the feature map.

    Weights are normal with variance 2/fan_in before relu and 1/fan_in otherwise.
    """
    rng = np.random.default_rng(seed)
    layers = []
    relu = activation == "relu"
    d = input_dim
    if conv:
        shape = tuple(in_shape)
        for cs in conv:
            oc, k, s = cs["out_channels"], cs.get("kernel", 3), cs.get("stride", 1)
            fan = shape[0] * k * k
            layer = Conv2d(_init_weights(rng, (oc, shape[0], k, k), fan, relu), np.zeros(oc), shape, s)
            layers += [layer, Activation(activation, layer.out_dim)]
            shape = layer.out_shape
            d = layer.out_dim
    for h in hidden:
        layers.append(Dense(_init_weights(rng, (h, d), d, relu), np.zeros(h)))
        layers.append(Activation(activation, h))
        d = h
    w = _init_weights(rng, (d,), d, False)
    return MlpModel(layers, w, 0.0, use_bias)


def default_image_mlp(seed: int = 0, use_bias: bool = True) -> MlpModel:
    return build_mlp(3072, [256, 84], "relu", seed, use_bias)


# ---------------------------------------------------------------- losses

@dataclass
class PairBatch:
    """Opposite-class pairs given as row indices (i, j) into ``points``."""

    points: np.ndarray
    pairs: np.ndarray

    @classmethod
    def from_arrays(cls, xa, xb) -> "PairBatch":
        xa = np.atleast_2d(np.asarray(xa, dtype=float))
        xb = np.atleast_2d(np.asarray(xb, dtype=float))
        n = xa.shape[0]
        idx = np.column_stack([np.arange(n), n + np.arange(xb.shape[0])])
        return cls(np.vstack([xa, xb]), idx)


def _pair_terms(kind, diff):
    if kind == "diff_log":
        return np.logaddexp(0.0, -diff), -expit(-diff)
    r = diff - 1.0
    return r * r, 2.0 * r


def loss_and_grads(model: MlpModel, batch, loss_kind: str) -> tuple[float, list[np.ndarray]]:
    """Summed loss and gradients aligned with ``model.params()``.

    ``bce`` takes ``(X, labels)`` or a Dataset; the pair losses take a
    :class:`PairBatch`. Each distinct point is evaluated once and the
    pair-level derivative is scattered back to both members.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {loss_kind!r}")
    if loss_kind == "bce":
        if isinstance(batch, Dataset):
            x, y = batch.points, batch.labels
        else:
            x, y = batch
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        if x.shape[0] == 0:
            raise ValueError("empty batch")
        phi, caches = model._forward(x)
        s = phi @ model.w + (model.bias[0] if model.use_bias else 0.0)
        loss = float(np.sum(np.logaddexp(0.0, -y * s)))
        dscore = -y * expit(-y * s)
        grads, _ = model.backward(x, dscore, caches, phi)
        return loss, grads
    if not isinstance(batch, PairBatch):
        raise TypeError("pair losses need a PairBatch")
    if batch.pairs.shape[0] == 0:
        raise ValueError("empty batch")
    rows, inv = np.unique(batch.pairs.reshape(-1), return_inverse=True)
    inv = inv.reshape(-1, 2)
    x = batch.points[rows]
    phi, caches = model._forward(x)
    s = phi @ model.w
    diff = s[inv[:, 0]] - s[inv[:, 1]]
    terms, dd = _pair_terms(loss_kind, diff)
    dscore = np.bincount(inv[:, 0], weights=dd, minlength=rows.size) - np.bincount(inv[:, 1], weights=dd, minlength=rows.size)
    grads, _ = model.backward(x, dscore, caches, phi)
    if model.use_bias:
        grads[-1] = np.zeros(1)
    return float(np.sum(terms)), grads


# ---------------------------------------------------------------- training

@dataclass
class FitConfig:
    loss: str = "bce"
    optimizer: str = "adam"
    lr: float = 1e-3
    iters: int = 1000
    batch_size: int | None = None
    pair_budget: float = 0.05
    pairs_per_step: int = 256
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    snapshot_every: int = 100

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss: unknown kind {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer: unknown kind {self.optimizer!r}")
        if self.lr < 0:
            raise ValueError("lr: must be nonnegative")
        for name in ("beta", "beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name}: must lie in [0, 1)")
        if not 0.0 < self.pair_budget <= 1.0:
            raise ValueError("pair_budget: must lie in (0, 1]")


class _Optimizer:
    def __init__(self, cfg: FitConfig, params):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        cfg = self.cfg
        self.t += 1
        for k, (p, g) in enumerate(zip(params, grads)):
            if cfg.optimizer == "gd":
                p -= cfg.lr * g
            elif cfg.optimizer == "momentum":
                self.m[k] = cfg.beta * self.m[k] + g
                p -= cfg.lr * self.m[k]
            else:
                self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
                self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
                mh = self.m[k] / (1 - cfg.beta1**self.t)
                vh = self.v[k] / (1 - cfg.beta2**self.t)
                p -= cfg.lr * mh / (np.sqrt(vh) + cfg.eps)


def training_pairs(dataset: Dataset, budget: float, seed: int) -> np.ndarray:
    """Fixed uniform sample of ceil(budget * |I||J|) distinct pairs."""
    stream = PairStream(dataset, "exhaustive-shuffled", seed)
    k = max(1, int(math.ceil(budget * stream.n_pairs)))
    return stream.take(k)


def choose_threshold(model: MlpModel, dataset: Dataset) -> float:
    """Midpoint between the lowest positive and highest negative readout score."""
    s = model.scores(dataset.points)
    return 0.5 * float(np.min(s[dataset.labels > 0])) + 0.5 * float(np.max(s[dataset.labels < 0]))


def sweep_thresholds(model: MlpModel, dataset: Dataset) -> list[tuple[float, float, float]]:
    """(threshold, false-negative rate, false-positive rate) at every distinct score."""
    s = model.scores(dataset.points)
    out = []
    pos = dataset.labels > 0
    for t in np.unique(s):
        out.append((float(t), float(np.mean(s[pos] <= t)), float(np.mean(s[~pos] > t))))
    return out


def fit(model: MlpModel, data: Dataset, config: FitConfig, pairs: np.ndarray | None = None):
    """Train in place; returns ``(model, history)``.

    Pair losses draw mini-batches of ``pairs_per_step`` from a fixed pair set
    (``pairs`` or a uniform ``pair_budget`` fraction of all opposite-class
    pairs). Steps use the batch-mean gradient so ``lr`` does not depend on
    the batch size; the recorded loss is the batch sum. After pair training the decision threshold is set to the midpoint
    rule on the training scores.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    pair_mode = config.loss != "bce"
    if pair_mode:
        model.use_bias = False
        if pairs is None:
            pairs = training_pairs(data, config.pair_budget, config.seed)
        pairs = np.asarray(pairs)
        if pairs.shape[0] == 0:
            raise ValueError("pair losses need at least one pair")
    opt = _Optimizer(config, model.params())
    history = {"loss": [], "snapshots": [], "train_accuracy": []}
    last_good = model.copy()
    order = np.zeros(0, dtype=int)
    cursor = 0
    n_items = pairs.shape[0] if pair_mode else data.n
    step_size = config.pairs_per_step if pair_mode else (config.batch_size or data.n)
    step_size = min(step_size, n_items)
    for t in range(config.iters):
        if step_size < n_items:
            if cursor + step_size > order.size:
                order = rng.permutation(n_items)
                cursor = 0
            sel = order[cursor:cursor + step_size]
            cursor += step_size
        else:
            sel = slice(None)
        if pair_mode:
            batch = PairBatch(data.points, pairs[sel])
        else:
            batch = (data.points[sel], data.labels[sel])
        loss, grads = loss_and_grads(model, batch, config.loss)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergedError(f"non-finite loss at iteration {t}", last_good)
        history["loss"].append(loss)
        count = batch[1].size if not pair_mode else batch.pairs.shape[0]
        grads = [g / count for g in grads]
        if config.snapshot_every and t % config.snapshot_every == 0:
            last_good = model.copy()
            history["snapshots"].append(t)
        opt.step(model.params(), grads)
    if pair_mode:
        model.threshold = choose_threshold(model, data)
    else:
        model.threshold = 0.0
    history["train_accuracy"] = model.accuracy(data)
    return model, history


def penultimate_features(model: MlpModel, dataset: Dataset) -> np.ndarray:
    return model.features(dataset.points)


# ---------------------------------------------------------------- boundary grids

@dataclass
class BoundaryGrid:
    xs: np.ndarray
    ys: np.ndarray
    scores: np.ndarray  # shape (len(ys), len(xs))
    threshold: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def bounds(self):
        return (float(self.xs[0]), float(self.xs[-1]), float(self.ys[0]), float(self.ys[-1]))

    def predicted(self) -> np.ndarray:
        return np.where(self.scores > self.threshold, 1, -1)

    def crossings(self) -> np.ndarray:
        """Zero-level crossings of score - threshold along grid edges (linear interpolation)."""
        f = self.scores - self.threshold
        pts = []
        # horizontal edges
        a, b = f[:, :-1], f[:, 1:]
        r, c = np.nonzero((a > 0) != (b > 0))
        t = a[r, c] / (a[r, c] - b[r, c])
        pts.append(np.column_stack([self.xs[c] + t * (self.xs[c + 1] - self.xs[c]), self.ys[r]]))
        a, b = f[:-1, :], f[1:, :]
        r, c = np.nonzero((a > 0) != (b > 0))
        t = a[r, c] / (a[r, c] - b[r, c])
        pts.append(np.column_stack([self.xs[c], self.ys[r] + t * (self.ys[r + 1] - self.ys[r])]))
        return np.vstack(pts)

    def min_boundary_distance(self, points) -> float:
        """Smallest distance from any point to the sign-change set (inf when none)."""
        cr = self.crossings()
        if cr.shape[0] == 0:
            return float("inf")
        from scipy.spatial import cKDTree

        dist, _ = cKDTree(cr).query(np.asarray(points, dtype=float))
        return float(np.min(dist))

    def covers(self, points, pad: float = 0.1) -> bool:
        p = np.asarray(points, dtype=float)
        lo, hi = p.min(axis=0), p.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        x0, x1, y0, y1 = self.bounds
        return bool(x0 <= lo[0] - pad * span[0] + 1e-12 and x1 >= hi[0] + pad * span[0] - 1e-12
                    and y0 <= lo[1] - pad * span[1] + 1e-12 and y1 >= hi[1] + pad * span[1] - 1e-12)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["x", "y", "score"])
        for iy, y in enumerate(self.ys):
            for ix, x in enumerate(self.xs):
                wr.writerow([repr(float(x)), repr(float(y)), repr(float(self.scores[iy, ix]))])
        return buf.getvalue()


def grid_bounds(points, pad: float = 0.1) -> tuple[float, float, float, float]:
    p = np.asarray(points, dtype=float)
    lo, hi = p.min(axis=0), p.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    lo = lo - pad * span
    hi = hi + pad * span
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def boundary_grid(model, bounds, resolution: int = 200, threshold: float | None = None) -> BoundaryGrid:
    """Scores on a regular ``resolution x resolution`` grid over ``bounds``.

    ``model`` is anything with ``scores(X)`` on 2-D inputs; ``threshold``
    defaults to the model's own.
    """
    dim = getattr(model, "input_dim", None) or getattr(model, "d", None)
    if dim != 2:
        raise ValueError(f"boundary_grid needs a 2-D input model, got input dim {dim}")
    x0, x1, y0, y1 = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    s = np.asarray(model.scores(np.column_stack([gx.ravel(), gy.ravel()])), dtype=float).reshape(gy.shape)
    thr = getattr(model, "threshold", 0.0) if threshold is None else threshold
    return BoundaryGrid(xs, ys, s, float(thr))
