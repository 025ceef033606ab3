"""Command-line experiment runner.

    diffmargin run <experiment> [--config FILE] [--out DIR] [--seed N] [key=value ...]

Configuration precedence (later wins): experiment defaults, the flat JSON
config file, ``--seed``/``--out``, then ``key=value`` overrides (values are
parsed as JSON when possible, else kept as strings).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, robustness_curve
from .data import (CIFAR_TEST_FILES, CIFAR_TRAIN_FILES, Dataset, PairStream, axis_affine_spec, cifar_root,
                   gen_affine_lowrank, gen_nonlinear_2d, gen_synthetic_images, load_cifar10_pair,
                   random_affine_spec, split)
from .linear import (LinearModel, NotSeparableError, cosine, geometric_margin, one_step_sgd_experiment,
                     pairwise_positivity, sample_well_separated, svm_hard_margin_oracle, train_cross_entropy,
                     train_differential_linear)
from .nn import (FitConfig, boundary_grid, build_mlp, choose_threshold, fit, grid_bounds, sweep_thresholds)
from .numerics import pca_spectrum
from .svg import hyperplane_segment, line_chart, scatter
from .theory import (corollary1_bound, lemma2_check, prop1_rank_experiment, theorem1_bound,
                     translation_table)

EXIT_OK, EXIT_CHECKS_FAILED, EXIT_CONFIG, EXIT_CRASH = 0, 1, 2, 3

CSV_COLUMNS = {
    "translation.csv": "shift, svm_margin, ce_margin, ce_B",
    "spectrum.csv": "checkpoint, k, cumulative_explained",
    "rank_trace_<init>_seed<n>.csv": "iteration, rank_phi, rank_W, top1_energy",
    "grid_<loss>.csv": "x, y, score",
    "robustness_<loss>.csv": "epsilon, accuracy_train, accuracy_test",
    "one_step.csv": "instance, gamma, r_x, r_y, condition_strict, train_error",
}

DEFAULTS = {
    "synth-margin": {
        "dim": 2, "k": 1, "offset": 1.0, "n_pos": 10, "n_neg": 10, "separation": 1.0,
        "asymmetry": 2.0, "spread": 1.0, "iters": 100000, "shifts": [0, 5, 10, 20],
    },
    "rank-spectrum": {
        "dataset": "synthetic-images", "n_per_class": 250, "hidden": [256, 84], "optimizer": "adam",
        "lr": 1e-3, "iters": 300, "batch_size": 128, "checkpoints": 4, "signal": 0.006,
        "prop1_head_dim": 8, "prop1_feature_dim": 6, "prop1_iters": 2000, "prop1_seeds": 3,
        "prop1_lr": 0.05,
    },
    "nonlinear-demo": {
        "kind": "ring-vs-cluster", "n_per_class": 60, "noise": 0.0, "hidden": [32], "activation": "relu",
        "optimizer": "gd", "lr": 0.2, "iters": 8000, "pair_budget": 0.05, "pairs_per_step": 256,
        "resolution": 300, "losses": ["bce", "diff_squared", "diff_log"],
    },
    "robustness": {
        "dataset": "auto", "cifar_dir": "", "class_a": 0, "class_b": 7, "n_train": 2000, "n_val": 200,
        "n_test": 400, "signal": 0.006, "hidden": [256, 84], "optimizer": "adam", "lr": 1e-3, "iters": 1500,
        "batch_size": 128, "pairs_per_step": 128, "pair_budget": 0.05, "norm": "l2",
        "epsilons": [0.0, 0.05, 0.1, 0.2, 0.4, 0.8], "steps": 40, "random_start": True, "box": [0.0, 1.0],
        "attack_train_subset": 0, "dump_attacks": False,
    },
    "theorems": {
        "n_affine": 5, "ce_iters": 20000, "n_one_step": 20, "prop1_seeds": 3, "prop1_iters": 1000,
        "lemma2_dim": 5,
    },
    "train": {
        "dataset": "nonlinear:two-moons", "n_per_class": 50, "noise": 0.1, "model": "mlp", "loss": "bce",
        "hidden": [16], "activation": "relu", "optimizer": "adam", "lr": 1e-2, "iters": 2000,
        "pair_budget": 0.05, "pairs_per_step": 256, "n_test": 20,
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class Outcome:
    report: dict
    artifacts: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)


# ---------------------------------------------------------------- config

def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"field '{key}': expected true/false, got {value!r}")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field '{key}': expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            if float(value) != int(value):
                raise ConfigError(f"field '{key}': expected an integer, got {value!r}")
            value = int(value)
        else:
            value = float(value)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"field '{key}': expected a list, got {value!r}")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"field '{key}': expected a string, got {value!r}")
    return value


def build_config(experiment: str, file_cfg: dict | None = None, seed: int | None = None,
                 overrides: dict | None = None) -> dict:
    if experiment not in DEFAULTS:
        raise ConfigError(f"field 'experiment': unknown experiment {experiment!r} (choose from {', '.join(DEFAULTS)})")
    cfg = dict(DEFAULTS[experiment])
    cfg["seed"] = None
    for layer in (file_cfg or {}, {"seed": seed} if seed is not None else {}, overrides or {}):
        for key, value in layer.items():
            if key in ("experiment", "out"):
                continue
            if key not in cfg:
                raise ConfigError(f"field '{key}': not a setting of experiment {experiment!r}")
            cfg[key] = value if key == "seed" else _coerce(key, value, DEFAULTS[experiment][key])
    if cfg["seed"] is None:
        raise ConfigError("field 'seed': a seed is required (config file or --seed)")
    if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"field 'seed': expected a nonnegative integer, got {cfg['seed']!r}")
    cfg["experiment"] = experiment
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _parse_override(token: str) -> tuple[str, object]:
    if "=" not in token:
        raise ConfigError(f"override {token!r}: expected key=value")
    key, raw = token.split("=", 1)
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def _csv(rows, header) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r))
    return "\n".join(lines) + "\n"


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


# ---------------------------------------------------------------- experiments

def exp_synth_margin(cfg) -> Outcome:
    spec = axis_affine_spec(cfg["dim"], cfg["k"], [cfg["offset"]] * cfg["k"])
    ds = gen_affine_lowrank(spec, cfg["n_pos"], cfg["n_neg"], cfg["separation"], cfg["asymmetry"],
                            cfg["spread"], cfg["seed"])
    svm = svm_hard_margin_oracle(ds)
    trace = train_cross_entropy(ds, iters=cfg["iters"])
    ce = trace.final
    bound = theorem1_bound(ds, ce, spec)
    u = np.asarray(ds.provenance["split_direction"])
    table = translation_table(ds, u, cfg["shifts"], cfg["iters"])
    rep = {
        "svm": {"w": svm.w_svm, "b": svm.b_svm, "gamma": svm.gamma},
        "ce": {"w": ce.w, "b": ce.b, "margin": geometric_margin(ce, ds), "iterations": trace.iterations[-1]},
        "cosine_ce_svm_w": cosine(ce.w, svm.w_svm),
        "bound": bound.to_dict(),
        "translation_direction": u,
        "translation": table,
    }
    checks = {
        "theorem1_bound_holds": bound.holds["theorem1"],
        "bound_ordering": bound.holds["ordering"],
        "svm_margin_constant_under_translation": max(abs(r["svm_margin"] - table[0]["svm_margin"]) for r in table) <= 1e-9,
    }
    rep["ce_margin_drops_with_translation"] = table[-1]["ce_margin"] < table[0]["ce_margin"]
    art = {"translation.csv": _csv([(r["shift"], r["svm_margin"], r["ce_margin"], r["ce_B"]) for r in table],
                                   ["shift", "svm_margin", "ce_margin", "ce_B"])}
    if ds.dim == 2:
        (x0, x1), (y0, y1) = _box(ds.points)
        lines = [("svm", hyperplane_segment(svm.w_svm, svm.b_svm, (x0, x1), (y0, y1)), None),
                 ("cross-entropy", hyperplane_segment(ce.w, ce.b, (x0, x1), (y0, y1)), "4,3")]
        art["scatter.svg"] = scatter(ds.points, ds.labels, lines, title="cross-entropy vs max-margin",
                                     xlim=(x0, x1), ylim=(y0, y1))
    return Outcome(rep, art, checks)


def _box(points, pad=0.15):
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.maximum(hi - lo, 1.0)
    return (lo[0] - pad * span[0], hi[0] + pad * span[0]), (lo[1] - pad * span[1], hi[1] + pad * span[1])


def _image_data(cfg):
    """(train, val, test, info) for the image experiments."""
    name = cfg["dataset"]
    root = cifar_root(cfg.get("cifar_dir") or None)
    if name == "cifar" and root is None:
        raise ConfigError("field 'dataset': cifar requested but no CIFAR-10 binary files found "
                          "(set cifar_dir or DIFFMARGIN_CIFAR_DIR)")
    n_train, n_val, n_test = cfg.get("n_train", 2 * cfg.get("n_per_class", 0)), cfg.get("n_val", 0), cfg.get("n_test", 0)
    if name == "cifar" or (name == "auto" and root is not None):
        full = load_cifar10_pair([root / f for f in CIFAR_TRAIN_FILES], cfg.get("class_a", 0), cfg.get("class_b", 7))
        test = load_cifar10_pair([root / f for f in CIFAR_TEST_FILES], cfg.get("class_a", 0), cfg.get("class_b", 7))
        rng = np.random.default_rng(cfg["seed"])
        pos = rng.permutation(full.pos_index)
        neg = rng.permutation(full.neg_index)
        half_tr, half_val = n_train // 2, n_val // 2
        tr = full.subset(np.sort(np.concatenate([pos[:half_tr], neg[:half_tr]])))
        val = full.subset(np.sort(np.concatenate([pos[half_tr:half_tr + half_val], neg[half_tr:half_tr + half_val]])))
        tp = rng.permutation(test.pos_index)[: n_test // 2]
        tn = rng.permutation(test.neg_index)[: n_test // 2]
        te = test.subset(np.sort(np.concatenate([tp, tn])))
        return tr, val, te, {"source": "cifar10", "root": str(root), "stand_in": False}
    if name in ("auto", "synthetic-images"):
        total = n_train + n_val + n_test
        ds = gen_synthetic_images((total + 1) // 2, cfg["seed"], signal=cfg["signal"])
        rest, te = split(ds, n_test, cfg["seed"])
        tr, val = split(rest, n_val, cfg["seed"] + 1) if n_val else (rest, None)
        return tr, val, te, {"source": "synthetic-images", "stand_in": True}
    raise ConfigError(f"field 'dataset': unknown image dataset {name!r}")


def exp_rank_spectrum(cfg) -> Outcome:
    tr, _, _, info = _image_data({**cfg, "n_train": 2 * cfg["n_per_class"], "n_val": 0, "n_test": 0}) \
        if cfg["dataset"] != "synthetic-images" else \
        (gen_synthetic_images(cfg["n_per_class"], cfg["seed"], signal=cfg["signal"]), None, None,
         {"source": "synthetic-images", "stand_in": True})
    model = build_mlp(tr.dim, cfg["hidden"], "relu", cfg["seed"])
    per = max(1, cfg["iters"] // cfg["checkpoints"])
    rows, spectra = [], {}
    done = 0
    for c in range(cfg["checkpoints"] + 1):
        if c:
            fit(model, tr, FitConfig(loss="bce", optimizer=cfg["optimizer"], lr=cfg["lr"], iters=per,
                                     batch_size=cfg["batch_size"], seed=cfg["seed"] + c))
            done += per
        sp = pca_spectrum(model.features(tr.points))
        spectra[done] = sp.to_dict()
        rows += [(done, k + 1, v) for k, v in enumerate(sp.cumulative_explained)]
    art = {"spectrum.csv": _csv(rows, ["checkpoint", "k", "cumulative_explained"])}
    last = spectra[done]["cumulative_explained"]
    art["spectrum.svg"] = line_chart(np.arange(1, len(last) + 1), {f"iter {k}": v["cumulative_explained"]
                                     for k, v in spectra.items() if len(v["cumulative_explained"]) == len(last)},
                                     "penultimate explained variance", "k", "cumulative explained")
    # zero-initialised two-layer head: feature rank stays <= 1
    spec = random_affine_spec(cfg["prop1_head_dim"], 1, 1.0, cfg["seed"])
    small = gen_affine_lowrank(spec, 12, 12, 1.0, seed=cfg["seed"], spread=1.0)
    traces = {}
    ok = True
    for s in range(cfg["prop1_seeds"]):
        for init in ("zero-W", "tanh-head"):
            t = prop1_rank_experiment(cfg["prop1_head_dim"], cfg["prop1_feature_dim"], small, init,
                                      cfg["prop1_lr"], cfg["prop1_iters"], 10, cfg["seed"] + s)
            traces[f"{init}/seed{s}"] = t.to_dict()
            art[f"rank_trace_{init}_seed{s}.csv"] = t.to_csv()
            if init == "zero-W":
                ok = ok and t.zero_init_ok()
    rep = {"data": info, "spectra": spectra, "prop1": traces, "train_accuracy": model.accuracy(tr)}
    return Outcome(rep, art, {"zero_init_rank_le_1": ok})


def exp_nonlinear_demo(cfg) -> Outcome:
    ds = gen_nonlinear_2d(cfg["kind"], cfg["n_per_class"], cfg["noise"], cfg["seed"])
    bounds = grid_bounds(ds.points)
    rep = {"losses": {}}
    art = {}
    lines = []
    checks = {}
    for loss in cfg["losses"]:
        model = build_mlp(2, cfg["hidden"], cfg["activation"], cfg["seed"], use_bias=(loss == "bce"))
        fit(model, ds, FitConfig(loss=loss, optimizer=cfg["optimizer"], lr=cfg["lr"], iters=cfg["iters"],
                                 pair_budget=cfg["pair_budget"], pairs_per_step=cfg["pairs_per_step"],
                                 seed=cfg["seed"]))
        grid = boundary_grid(model, bounds, cfg["resolution"])
        checks[f"grid_covers_points_{loss}"] = grid.covers(ds.points)
        rep["losses"][loss] = {
            "train_accuracy": model.accuracy(ds),
            "threshold": model.threshold,
            "min_boundary_distance": grid.min_boundary_distance(ds.points),
        }
        art[f"grid_{loss}.csv"] = grid.to_csv()
        lines.append((loss, grid.crossings()))
    if "bce" in rep["losses"] and "diff_squared" in rep["losses"]:
        a = rep["losses"]["diff_squared"]["min_boundary_distance"]
        b = rep["losses"]["bce"]["min_boundary_distance"]
        rep["distance_ratio_diff_squared_over_bce"] = a / b if b > 0 else math.inf
    art["boundaries.svg"] = scatter(ds.points, ds.labels, markers=lines, title="decision boundaries",
                                    xlim=bounds[:2], ylim=bounds[2:])
    return Outcome(rep, art, checks)


def _curve_ok(curve, clean_train, clean_test):
    a = curve.accuracy_train
    ok = bool(np.all(np.diff(a) <= 1e-12))
    if curve.epsilons[0] == 0:
        ok = ok and abs(a[0] - clean_train) < 1e-12 and abs(curve.accuracy_test[0] - clean_test) < 1e-12
    return ok


def exp_robustness(cfg, out: Path | None = None) -> Outcome:
    tr, val, te, info = _image_data(cfg)
    attack = AttackConfig(kind="pgd", norm=cfg["norm"], steps=cfg["steps"], random_start=cfg["random_start"],
                          box=tuple(cfg["box"]) if cfg["box"] else None, seed=cfg["seed"])
    rep = {"data": {**info, "n_train": tr.n, "n_val": 0 if val is None else val.n, "n_test": te.n},
           "attack": attack.to_dict(), "epsilon_units": "model input space (pixels scaled to [0, 1])",
           "models": {}}
    art = {}
    checks = {}
    curves = {}
    attack_tr = tr if not cfg["attack_train_subset"] else tr.subset(np.arange(min(tr.n, cfg["attack_train_subset"])))
    for loss in ("bce", "diff_squared"):
        model = build_mlp(tr.dim, cfg["hidden"], "relu", cfg["seed"], use_bias=(loss == "bce"))
        fit(model, tr, FitConfig(loss=loss, optimizer=cfg["optimizer"], lr=cfg["lr"], iters=cfg["iters"],
                                 batch_size=cfg["batch_size"], pairs_per_step=cfg["pairs_per_step"],
                                 pair_budget=cfg["pair_budget"], seed=cfg["seed"]))
        entry = {"train_accuracy": model.accuracy(tr), "test_accuracy": model.accuracy(te),
                 "threshold": model.threshold}
        if loss != "bce" and val is not None:
            sweep = sweep_thresholds(model, val)
            best = min(sweep, key=lambda r: r[1] + r[2])
            saved = model.threshold
            model.threshold = best[0]
            entry["best_validation_threshold"] = best[0]
            entry["test_accuracy_best_validation_threshold"] = model.accuracy(te)
            model.threshold = saved
        dump = open(out / f"attacks_{loss}.jsonl", "w") if (out is not None and cfg["dump_attacks"]) else None
        try:
            curve = robustness_curve(model, attack_tr, cfg["epsilons"], attack, test=te, dump=dump)
        finally:
            if dump is not None:
                dump.close()
        curves[loss] = curve
        entry["curve"] = curve.to_dict()
        entry["train_test_gap"] = curve.gap()
        checks[f"curve_invariants_{loss}"] = _curve_ok(curve, model.accuracy(attack_tr), entry["test_accuracy"])
        rep["models"][loss] = entry
        art[f"robustness_{loss}.csv"] = curve.to_csv()
    b, d = curves["bce"], curves["diff_squared"]
    rep["differential_dominates_train"] = bool(np.all(d.accuracy_train >= b.accuracy_train))
    rep["differential_dominates_test"] = bool(np.all(d.accuracy_test >= b.accuracy_test))
    rep["clean_test_accuracy_difference"] = abs(rep["models"]["bce"]["test_accuracy"] - rep["models"]["diff_squared"]["test_accuracy"])
    rep["max_train_test_gap_differential"] = float(np.max(d.gap()))
    art["robustness.svg"] = line_chart(b.epsilons, {"bce train": b.accuracy_train, "bce test": b.accuracy_test,
                                                    "diff train": d.accuracy_train, "diff test": d.accuracy_test},
                                       "accuracy under PGD", "epsilon", "accuracy")
    return Outcome(rep, art, checks)


def exp_theorems(cfg) -> Outcome:
    rng = np.random.default_rng(cfg["seed"])
    rep = {"theorem1": [], "corollary1": [], "one_step": [], "prop1": [], "lemma2": {}}
    checks = {}
    t1_ok = order_ok = c1_ok = True
    for k in range(cfg["n_affine"]):
        d = int(rng.integers(3, 7))
        kk = int(rng.integers(1, d - 1))
        spec = random_affine_spec(d, kk, 1.0, int(rng.integers(1 << 30)))
        ds = gen_affine_lowrank(spec, int(rng.integers(2, 8)), int(rng.integers(2, 8)), float(rng.uniform(0.5, 2)),
                                float(rng.uniform(0, 3)), 1.0, int(rng.integers(1 << 30)))
        trace = train_cross_entropy(ds, iters=cfg["ce_iters"])
        r1 = theorem1_bound(ds, trace.final, spec)
        r2 = corollary1_bound(ds, trace.final, spec)
        rep["theorem1"].append(r1.to_dict())
        rep["corollary1"].append(r2.to_dict())
        t1_ok &= r1.holds["theorem1"]
        order_ok &= r1.holds["ordering"]
        c1_ok &= r2.holds["corollary1"]
    checks.update({"theorem1_bound_holds": t1_ok, "bound_ordering": order_ok, "corollary1_bound_holds": c1_ok})
    rows = []
    zero_err = True
    positivity = True
    for k in range(cfg["n_one_step"]):
        ds = sample_well_separated(rng)
        r = one_step_sgd_experiment(ds, seed=int(rng.integers(1 << 30)))
        rows.append((k, r.gamma, r.r_x, r.r_y, r.condition_holds_strict, r.train_error))
        rep["one_step"].append(r.to_dict())
        if r.condition_holds:
            zero_err &= r.train_error == 0.0
            if ds.pos.shape[0] * ds.neg.shape[0] <= 100:
                positivity &= pairwise_positivity(ds)
    checks["one_step_zero_training_error"] = zero_err
    checks["pairwise_positivity"] = positivity
    spec = random_affine_spec(6, 1, 1.0, cfg["seed"])
    small = gen_affine_lowrank(spec, 8, 8, 1.0, seed=cfg["seed"])
    p_ok = True
    for s in range(cfg["prop1_seeds"]):
        t = prop1_rank_experiment(6, 4, small, "zero-W", 0.05, cfg["prop1_iters"], 10, cfg["seed"] + s)
        rep["prop1"].append(t.to_dict())
        p_ok &= t.zero_init_ok()
    checks["zero_init_rank_le_1"] = p_ok
    v = rng.normal(size=cfg["lemma2_dim"])
    lam, vec = lemma2_check(v)
    rep["lemma2"] = {"v": v, "eigenvalue": lam, "eigenvector": vec}
    checks["lemma2_eigenvalue_is_norm"] = abs(lam - np.linalg.norm(v)) <= 1e-10 * max(1.0, np.linalg.norm(v))
    art = {"one_step.csv": _csv(rows, ["instance", "gamma", "r_x", "r_y", "condition_strict", "train_error"]),
           "bounds.json": json.dumps(_json_safe({"theorem1": rep["theorem1"], "corollary1": rep["corollary1"]}),
                                     indent=2, sort_keys=True) + "\n"}
    return Outcome(rep, art, checks)


def exp_train(cfg) -> Outcome:
    kind = cfg["dataset"]
    if kind.startswith("nonlinear:"):
        ds = gen_nonlinear_2d(kind.split(":", 1)[1], cfg["n_per_class"], cfg["noise"], cfg["seed"])
    elif kind == "affine":
        spec = random_affine_spec(5, 2, 1.0, cfg["seed"])
        ds = gen_affine_lowrank(spec, cfg["n_per_class"], cfg["n_per_class"], 1.0, 1.0, 1.0, cfg["seed"])
    else:
        raise ConfigError(f"field 'dataset': unknown dataset {kind!r} (nonlinear:<kind> or affine)")
    tr, te = split(ds, cfg["n_test"], cfg["seed"]) if cfg["n_test"] else (ds, None)
    if cfg["model"] == "linear":
        if cfg["loss"] == "bce":
            model = train_cross_entropy(tr, iters=cfg["iters"]).final
        else:
            model = train_differential_linear(PairStream(tr, "exhaustive-shuffled", cfg["seed"]), iters=cfg["iters"]).final
        acc = lambda d: float(np.mean(model.predict(d.points) == d.labels))
    elif cfg["model"] == "mlp":
        model = build_mlp(tr.dim, cfg["hidden"], cfg["activation"], cfg["seed"], use_bias=cfg["loss"] == "bce")
        fit(model, tr, FitConfig(loss=cfg["loss"], optimizer=cfg["optimizer"], lr=cfg["lr"], iters=cfg["iters"],
                                 pair_budget=cfg["pair_budget"], pairs_per_step=cfg["pairs_per_step"], seed=cfg["seed"]))
        acc = model.accuracy
    else:
        raise ConfigError(f"field 'model': expected 'linear' or 'mlp', got {cfg['model']!r}")
    rep = {"train_accuracy": acc(tr), "test_accuracy": acc(te) if te is not None else None, "n_train": tr.n}
    return Outcome(rep, {"model.json": model.to_json() + "\n"}, {})


EXPERIMENTS = {
    "synth-margin": exp_synth_margin,
    "rank-spectrum": exp_rank_spectrum,
    "nonlinear-demo": exp_nonlinear_demo,
    "robustness": exp_robustness,
    "theorems": exp_theorems,
    "train": exp_train,
}


# ---------------------------------------------------------------- running

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(cfg: dict, out: Path) -> tuple[int, dict]:
    """Execute one experiment, write its artifacts and manifest; return (exit code, manifest)."""
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    start = time.perf_counter()
    written = []
    status = "ok"
    code = EXIT_OK
    try:
        fn = EXPERIMENTS[cfg["experiment"]]
        outcome = fn(cfg, out) if fn is exp_robustness else fn(cfg)
        checks = {k: bool(v) for k, v in outcome.checks.items()}
        report = {"experiment": cfg["experiment"], "config": cfg, "checks": checks,
                  "all_checks_held": all(checks.values()), "results": outcome.report}
        for name, text in sorted(outcome.artifacts.items()):
            (out / name).write_text(text)
            written.append(name)
        (out / "report.json").write_text(json.dumps(_json_safe(report), indent=2, sort_keys=True) + "\n")
        written.append("report.json")
        if cfg["experiment"] == "robustness" and cfg["dump_attacks"]:
            written += [p.name for p in sorted(out.glob("attacks_*.jsonl"))]
        if not report["all_checks_held"]:
            status, code = "checks-failed", EXIT_CHECKS_FAILED
    except ConfigError:
        raise
    except NotSeparableError as exc:
        status, code = "failed", EXIT_CRASH
        marker.write_text(f"failed: data not separable: {exc}\n")
    except Exception:
        status, code = "failed", EXIT_CRASH
        marker.write_text("failed\n" + traceback.format_exc())
    if marker.exists():
        written.append("FAILED")
    manifest = {
        "tool": "diffmargin",
        "version": __version__,
        "experiment": cfg["experiment"],
        "config_hash": config_hash(cfg),
        "status": status,
        "artifacts": [{"file": n, "sha256": _sha256(out / n), "bytes": (out / n).stat().st_size} for n in sorted(set(written))],
        "duration_seconds": round(time.perf_counter() - start, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return code, manifest


def _parser() -> argparse.ArgumentParser:
    columns = "\n".join(f"  {k}: {v}" for k, v in CSV_COLUMNS.items())
    p = argparse.ArgumentParser(
        prog="diffmargin",
        description="Margin experiments for cross-entropy versus differential training.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=("precedence: defaults < --config file < --seed/--out < key=value overrides\n"
                "exit codes: 0 all checks held, 1 a check failed, 2 bad config, 3 experiment error\n"
                "CSV columns (fixed order):\n" + columns),
    )
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a named experiment")
    r.add_argument("experiment", choices=sorted(EXPERIMENTS))
    r.add_argument("--config", type=Path, help="flat JSON config file")
    r.add_argument("--out", type=Path, default=None, help="output directory (default runs/<experiment>)")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting; bare KEY=VALUE tokens work too")
    sub.add_parser("list", help="list experiments and their default settings")
    return p


def main(argv=None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    bad = [t for t in extra if t.startswith("-") or "=" not in t]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = extra
    if args.command == "list":
        print(json.dumps(DEFAULTS, indent=2))
        return EXIT_OK
    try:
        file_cfg = {}
        if args.config is not None:
            if not args.config.exists():
                raise ConfigError(f"field 'config': file {args.config} does not exist")
            file_cfg = json.loads(args.config.read_text())
            if not isinstance(file_cfg, dict):
                raise ConfigError("field 'config': expected a flat JSON object")
        overrides = dict(_parse_override(t) for t in args.sets + args.overrides)
        cfg = build_config(args.experiment, file_cfg, args.seed, overrides)
        out = args.out or Path(file_cfg.get("out", f"runs/{args.experiment}"))
        code, manifest = run(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"config error: field 'config': invalid JSON ({exc})", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{manifest['experiment']}: {manifest['status']} -> {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
