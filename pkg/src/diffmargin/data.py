"""Two-class datasets: synthetic generators, the CIFAR-10 binary reader and
deterministic pair sampling for differential training."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

CIFAR_RECORD_BYTES = 3073
CIFAR_PIXELS = 3072
CIFAR_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
CIFAR_ENV_VAR = "DIFFMARGIN_CIFAR_DIR"
CIFAR_TRAIN_FILES = tuple(f"data_batch_{k}.bin" for k in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass(frozen=True)
class Dataset:
    """Labelled point set with labels in {+1, -1}.

    ``points`` has one row per sample. Index sets ``pos_index`` (label +1,
    the I set) and ``neg_index`` (label -1, the J set) refer to rows.
    """

    points: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError(f"points must be 2-D, got shape {pts.shape}")
        lab = np.array(self.labels).astype(np.int64).reshape(-1)
        if lab.shape[0] != pts.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {lab.shape[0]} labels")
        if not np.all(np.isin(lab, (-1, 1))):
            raise ValueError("labels must be +1 or -1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite values")
        pts.setflags(write=False)
        lab.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def pos_index(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def neg_index(self) -> np.ndarray:
        return np.flatnonzero(self.labels == -1)

    @property
    def pos(self) -> np.ndarray:
        return self.points[self.labels == 1]

    @property
    def neg(self) -> np.ndarray:
        return self.points[self.labels == -1]

    def require_two_class(self) -> None:
        if self.pos_index.size == 0 or self.neg_index.size == 0:
            raise ValueError(f"{self.name}: both classes must be nonempty")

    def pair_differences(self) -> np.ndarray:
        """All x_i - y_j, row-major over (i, j)."""
        xp, xn = self.pos, self.neg
        return (xp[:, None, :] - xn[None, :, :]).reshape(-1, self.dim)

    @classmethod
    def from_classes(cls, pos, neg, name: str = "dataset", provenance: dict | None = None) -> "Dataset":
        pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
        neg = np.atleast_2d(np.asarray(neg, dtype=np.float64))
        pts = np.vstack([pos, neg])
        lab = np.concatenate([np.ones(len(pos), dtype=np.int64), -np.ones(len(neg), dtype=np.int64)])
        return cls(pts, lab, name, dict(provenance or {}))

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.points[idx], self.labels[idx], name or self.name, dict(self.provenance))


@dataclass(frozen=True)
class AffineSubspaceSpec:
    """Orthonormal directions ``directions[k]`` with shared projections ``offsets[k]``."""

    ambient_dim: int
    directions: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        r = np.array(self.directions, dtype=np.float64).reshape(-1, self.ambient_dim)
        off = np.array(self.offsets, dtype=np.float64).reshape(-1)
        if r.shape[0] != off.shape[0]:
            raise ValueError("one offset per direction required")
        if r.shape[0] and np.max(np.abs(r @ r.T - np.eye(r.shape[0]))) > 1e-10:
            raise ValueError("directions must be orthonormal")
        object.__setattr__(self, "directions", r)
        object.__setattr__(self, "offsets", off)

    @property
    def k(self) -> int:
        return self.directions.shape[0]

    @property
    def offset_sq_sum(self) -> float:
        return float(np.sum(self.offsets**2))

    def to_dict(self) -> dict:
        return {
            "ambient_dim": self.ambient_dim,
            "directions": self.directions.tolist(),
            "offsets": self.offsets.tolist(),
        }


def _complement_basis(r: np.ndarray, d: int) -> np.ndarray:
    """Orthonormal basis (columns) of the orthogonal complement of the rows of r."""
    if r.shape[0] == 0:
        return np.eye(d)
    q, _ = np.linalg.qr(np.hstack([r.T, np.eye(d)]))
    return q[:, r.shape[0]:d]


def _project_out(v: np.ndarray, r: np.ndarray) -> np.ndarray:
    for rk in r:
        v = v - np.outer(v @ rk, rk)
    return v


def gen_affine_lowrank(
    spec: AffineSubspaceSpec,
    n_pos: int,
    n_neg: int,
    separation: float,
    asymmetry: float = 0.0,
    spread: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Two separable classes lying exactly on the affine set <r_k, p> = offset_k.

    Inside the complement of the directions, classes are split along a unit
    vector ``u`` with a gap of exactly ``separation``: the closest pair differs
    by ``separation * u`` only, so the hard margin is ``separation / 2``. Both
    classes are shifted by ``asymmetry * u``, which moves the positive centroid
    further from the origin than the negative one without changing the margin.
    """
    if n_pos < 1 or n_neg < 1:
        raise ValueError("gen_affine_lowrank: n_pos and n_neg must be >= 1")
    if separation <= 0:
        raise ValueError("gen_affine_lowrank: separation must be positive")
    d = spec.ambient_dim
    r = spec.directions
    if d - spec.k < 1:
        raise ValueError("gen_affine_lowrank: directions leave no room for the classes")
    rng = np.random.default_rng(seed)
    basis = _complement_basis(r, d)
    u = basis[:, 0]
    others = basis[:, 1:]

    def draw(n, sign):
        along = asymmetry + sign * (separation / 2 + spread * np.abs(rng.normal(size=n)))
        along[0] = asymmetry + sign * separation / 2
        side = rng.normal(scale=spread, size=(n, others.shape[1]))
        return along, side

    a_pos, s_pos = draw(n_pos, 1.0)
    a_neg, s_neg = draw(n_neg, -1.0)
    # the closest pair shares every coordinate except the one along u
    s_neg[0] = s_pos[0]
    q_pos = np.outer(a_pos, u) + s_pos @ others.T
    q_neg = np.outer(a_neg, u) + s_neg @ others.T
    q_pos = _project_out(q_pos, r)
    q_neg = _project_out(q_neg, r)
    base = spec.offsets @ r if spec.k else np.zeros(d)
    ds = Dataset.from_classes(
        q_pos + base,
        q_neg + base,
        name="affine-lowrank",
        provenance={
            "generator": "gen_affine_lowrank",
            "seed": seed,
            "separation": separation,
            "asymmetry": asymmetry,
            "spread": spread,
            "split_direction": u.tolist(),
        },
    )
    return ds


def axis_affine_spec(d: int, k: int, offsets: Sequence[float]) -> AffineSubspaceSpec:
    """Spec whose directions are the last ``k`` standard basis vectors."""
    r = np.eye(d)[d - k:]
    return AffineSubspaceSpec(d, r, np.asarray(offsets, dtype=float))


def random_affine_spec(d: int, k: int, offset_scale: float, seed: int = 0) -> AffineSubspaceSpec:
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, k)))
    return AffineSubspaceSpec(d, q.T, offset_scale * rng.uniform(0.5, 1.5, size=k))


def gen_nonlinear_2d(kind: str, n_per_class: int, noise: float = 0.0, seed: int = 0) -> Dataset:
    """2-D two-class sets that no line separates.

    ``ring-vs-cluster``: label +1 is a compact cluster elongated along the
    x-axis, label -1 a surrounding ring of radius 1.
    ``two-moons``: the usual interleaved half circles.
    """
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    if kind == "ring-vs-cluster":
        t = rng.uniform(-1.0, 1.0, size=n_per_class)
        cluster = np.column_stack([0.45 * t, 0.04 * rng.uniform(-1.0, 1.0, size=n_per_class)])
        ang = rng.uniform(0, 2 * np.pi, size=n_per_class)
        ring = np.column_stack([np.cos(ang), np.sin(ang)])
        cluster = cluster + noise * rng.normal(size=cluster.shape)
        ring = ring * (1.0 + noise * rng.normal(size=(n_per_class, 1)))
        pos, neg = cluster, ring
    elif kind in ("two-moons", "two-moons-like"):
        a = rng.uniform(0, np.pi, size=n_per_class)
        b = rng.uniform(0, np.pi, size=n_per_class)
        pos = np.column_stack([np.cos(a), np.sin(a)])
        neg = np.column_stack([1 - np.cos(b), 0.5 - np.sin(b)])
        pos = pos + noise * rng.normal(size=pos.shape)
        neg = neg + noise * rng.normal(size=neg.shape)
    else:
        raise ValueError(f"unknown nonlinear dataset kind {kind!r}")
    return Dataset.from_classes(pos, neg, name=kind, provenance={"generator": "gen_nonlinear_2d", "seed": seed, "noise": noise})


def read_cifar10_records(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (labels uint8[n], pixels uint8[n, 3072]) from one binary batch file.

    Record layout: 1 label byte, then 1024 red, 1024 green, 1024 blue bytes,
    each plane row-major over the 32x32 image.
    """
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES:
        bad = raw.size - raw.size % CIFAR_RECORD_BYTES
        raise ValueError(
            f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}; "
            f"truncated record starts at byte offset {bad}"
        )
    rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
    return rec[:, 0].copy(), rec[:, 1:].copy()


def load_cifar10_pair(paths, class_a: int = 0, class_b: int = 7, normalize: bool = True, limit_per_class: int | None = None) -> Dataset:
    """Keep records labelled ``class_a`` (-> +1) or ``class_b`` (-> -1)."""
    if class_a == class_b:
        raise ValueError("class_a and class_b must differ")
    labels, pixels = [], []
    for p in paths:
        lab, pix = read_cifar10_records(p)
        keep = (lab == class_a) | (lab == class_b)
        labels.append(lab[keep])
        pixels.append(pix[keep])
    lab = np.concatenate(labels) if labels else np.zeros(0, np.uint8)
    pix = np.concatenate(pixels) if pixels else np.zeros((0, CIFAR_PIXELS), np.uint8)
    if limit_per_class is not None:
        ia = np.flatnonzero(lab == class_a)[:limit_per_class]
        ib = np.flatnonzero(lab == class_b)[:limit_per_class]
        keep = np.sort(np.concatenate([ia, ib]))
        lab, pix = lab[keep], pix[keep]
    for c in (class_a, class_b):
        if not np.any(lab == c):
            raise ValueError(f"no records with label {c} in {[str(p) for p in paths]}")
    x = pix.astype(np.float64)
    if normalize:
        x /= 255.0
    y = np.where(lab == class_a, 1, -1)
    return Dataset(x, y, name=f"cifar10-{class_a}v{class_b}", provenance={
        "files": [str(p) for p in paths],
        "class_a": int(class_a),
        "class_b": int(class_b),
        "normalize": bool(normalize),
    })


def cifar_root(explicit: str | None = None) -> Path | None:
    root = explicit or os.environ.get(CIFAR_ENV_VAR)
    if not root:
        return None
    root = Path(root)
    for cand in (root, root / "cifar-10-batches-bin"):
        if (cand / CIFAR_TEST_FILES[0]).exists():
            return cand
    return None


def write_cifar10_file(path, labels, pixels) -> None:
    """Write records in the binary batch layout (used for fixtures and tests)."""
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(labels.shape[0], CIFAR_PIXELS)
    np.hstack([labels, pixels]).tofile(path)


def gen_two_balls(dim: int, n_pos: int, n_neg: int, radius: float, distance: float, seed: int = 0) -> Dataset:
    """Uniform samples from two balls of equal radius whose centres are ``distance`` apart."""
    if n_pos < 1 or n_neg < 1:
        raise ValueError("gen_two_balls: need at least one point per class")
    rng = np.random.default_rng(seed)
    centre = rng.normal(size=dim)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)

    def ball(n, c):
        v = rng.normal(size=(n, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return c + radius * rng.uniform(size=(n, 1)) ** (1.0 / dim) * v

    pos = ball(n_pos, centre + 0.5 * distance * direction)
    neg = ball(n_neg, centre - 0.5 * distance * direction)
    return Dataset.from_classes(pos, neg, name="two-balls", provenance={
        "generator": "gen_two_balls", "seed": seed, "radius": radius, "distance": distance})


def gen_synthetic_images(n_per_class: int, seed: int = 0, side: int = 32, channels: int = 3,
                         signal: float = 0.08, noise: float = 0.05) -> Dataset:
    """Stand-in image task in the CIFAR layout (channel planes, values in [0, 1]).

    Each class owns a few smooth templates; a sample mixes its class templates
    with random weights, adds class-independent smooth clutter and pixel noise.
    """
    rng = np.random.default_rng(seed)
    block = side // 4

    def smooth(k):
        coarse = rng.normal(size=(k, channels, 4, 4))
        return np.kron(coarse, np.ones((block, block))).reshape(k, -1)

    templates = {1: smooth(3), -1: smooth(3)}
    clutter = smooth(6)
    pts, labels = [], []
    for lab in (1, -1):
        mix = rng.uniform(0.5, 1.5, size=(n_per_class, 3)) @ templates[lab]
        junk = rng.normal(size=(n_per_class, 6)) @ clutter
        x = 0.5 + signal * mix + 0.1 * junk + noise * rng.normal(size=mix.shape)
        pts.append(np.clip(x, 0.0, 1.0))
        labels.append(np.full(n_per_class, lab))
    return Dataset(np.vstack(pts), np.concatenate(labels), name="synthetic-images",
                   provenance={"generator": "gen_synthetic_images", "seed": seed, "signal": signal, "noise": noise})


def translate(dataset: Dataset, v) -> Dataset:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != dataset.dim:
        raise ValueError(f"translate: vector of dim {v.shape[0]} for data of dim {dataset.dim}")
    prov = dict(dataset.provenance)
    prov["translated_by"] = v.tolist()
    return Dataset(dataset.points + v, dataset.labels, dataset.name, prov)


def standardize(dataset: Dataset, mean=None, std=None) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Per-feature standardization; pass train statistics to transform test data."""
    if mean is None:
        mean = dataset.points.mean(axis=0)
    if std is None:
        std = dataset.points.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    return Dataset((dataset.points - mean) / std, dataset.labels, dataset.name, dict(dataset.provenance)), mean, std


def split(dataset: Dataset, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.n)
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


PAIR_STRATEGIES = ("exhaustive-shuffled", "uniform-random", "hard-mining")


class PairStream:
    """Deterministic stream of opposite-class index pairs (i in I, j in J).

    Pairs are returned as rows ``(i, j)`` of dataset row indices. For
    ``hard-mining`` the stream needs ``score_fn`` mapping the point matrix to
    readout scores; pairs are ordered by ascending score difference.
    """

    def __init__(self, dataset: Dataset, strategy: str = "exhaustive-shuffled", seed: int = 0,
                 score_fn: Callable[[np.ndarray], np.ndarray] | None = None):
        if strategy not in PAIR_STRATEGIES:
            raise ValueError(f"unknown pair strategy {strategy!r}")
        dataset.require_two_class()
        if strategy == "hard-mining" and score_fn is None:
            raise ValueError("hard-mining needs a model to score pairs")
        self.dataset = dataset
        self.strategy = strategy
        self.seed = seed
        self.score_fn = score_fn
        self.cursor = 0
        self._rng = np.random.default_rng(seed)
        self._order: np.ndarray | None = None
        self._I = dataset.pos_index
        self._J = dataset.neg_index

    @property
    def n_pairs(self) -> int:
        return self._I.size * self._J.size

    def _decode(self, flat: np.ndarray) -> np.ndarray:
        nj = self._J.size
        return np.column_stack([self._I[flat // nj], self._J[flat % nj]])

    def _ranked(self) -> np.ndarray:
        s = np.asarray(self.score_fn(self.dataset.points), dtype=float).reshape(-1)
        diff = (s[self._I][:, None] - s[self._J][None, :]).reshape(-1)
        return np.argsort(diff, kind="stable")

    def epoch(self) -> np.ndarray:
        """One pass: all pairs once (exhaustive/hard-mining) or |I||J| uniform draws."""
        if self.strategy == "exhaustive-shuffled":
            flat = self._rng.permutation(self.n_pairs)
        elif self.strategy == "uniform-random":
            flat = self._rng.integers(0, self.n_pairs, size=self.n_pairs)
        else:
            flat = self._ranked()
        return self._decode(flat)

    def all_pairs(self) -> np.ndarray:
        return self._decode(np.arange(self.n_pairs))

    def take(self, k: int) -> np.ndarray:
        """Next ``k`` pairs, crossing epoch boundaries as needed."""
        if k < 1:
            raise ValueError("take: k must be >= 1")
        if self.strategy == "uniform-random":
            self.cursor += k
            return self._decode(self._rng.integers(0, self.n_pairs, size=k))
        out = []
        need = k
        while need:
            if self._order is None or self.cursor >= self._order.size:
                self._order = self._rng.permutation(self.n_pairs) if self.strategy == "exhaustive-shuffled" else self._ranked()
                self.cursor = 0
            chunk = self._order[self.cursor:self.cursor + need]
            self.cursor += chunk.size
            need -= chunk.size
            out.append(chunk)
        return self._decode(np.concatenate(out))

    def __iter__(self) -> Iterator[tuple[int, int]]:
        for i, j in self.epoch():
            yield int(i), int(j)


def sample_pairs(dataset: Dataset, strategy: str = "exhaustive-shuffled", seed: int = 0, model=None) -> PairStream:
    """Build a PairStream; ``model`` must expose ``scores(X)`` for hard mining."""
    score_fn = None
    if model is not None:
        score_fn = model.scores
    return PairStream(dataset, strategy, seed, score_fn)
