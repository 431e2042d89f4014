"""Experiment grid: clean, scale, optionally encode, then cross-validate, fit
and test every classifier for each (split, seed) cell.

A run writes ``config.json``, ``results.json`` and one model archive per
fitted model. :func:`write_reports` turns ``results.json`` into the CSV
tables; :func:`run_experiment` calls it at the end of every run.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from .baseline_models import LogRegParams, predict_gnb, predict_logreg, train_gnb, train_logreg
from .dataio import (
    Dataset,
    ScalerParams,
    SplitSpec,
    SyntheticSpec,
    _atomic_write,
    apply_scaler,
    drop_unlabeled,
    fit_scaler,
    generate_synthetic,
    load_dataset,
    scale_matrix,
    split,
)
from .errors import LatentmalError, PreconditionError
from .evaluation import kfold_cv, roc_curve_points, score_probabilities, time_execution, ttest_ind
from .numcore import derive_seed
from .persist import save_model
from .tree_models import (
    ForestParams,
    GbdtParams,
    TreeParams,
    predict_proba,
    train_decision_tree,
    train_gbdt,
    train_random_forest,
)
from .vae import VaeModel, TrainConfig, encode, extract_latent, init_vae, train_vae

__all__ = [
    "CLASSIFIERS",
    "FEATURE_MODES",
    "METRICS_HEADER",
    "VaeSettings",
    "ExperimentConfig",
    "classifier_proba",
    "train_classifier",
    "InferencePipeline",
    "run_experiment",
    "write_reports",
    "cell_count",
]

CLASSIFIERS = ("dtree", "rforest", "gbdt", "logreg", "gnb")
FEATURE_MODES = ("raw", "latent")
DEFAULT_SPLITS = ("30/30", "50/30", "70/30")
DEFAULT_SEEDS = (42, 123)
METRICS_HEADER = ["split", "seed", "mode", "classifier", "cv_mean", "cv_std", "test_accuracy",
                  "auc", "precision", "recall", "f1", "seconds"]


# -- classifiers -------------------------------------------------------------

def train_classifier(name: str, x, y, seed: int):
    """Fit classifier ``name`` with its default hyperparameters."""
    if name == "dtree":
        return train_decision_tree(x, y, TreeParams())
    if name == "rforest":
        return train_random_forest(x, y, ForestParams(seed=seed))
    if name == "gbdt":
        return train_gbdt(x, y, GbdtParams(seed=seed))
    if name == "logreg":
        return train_logreg(x, y, LogRegParams())
    if name == "gnb":
        return train_gnb(x, y)
    raise PreconditionError(f"unknown classifier {name!r}; choose from {', '.join(CLASSIFIERS)}")


def classifier_proba(model, x) -> np.ndarray:
    """Class-1 probabilities from any trained classifier."""
    kind = getattr(model, "kind", None)
    if kind in ("dtree", "rforest", "gbdt"):
        return predict_proba(model, x)
    if kind == "logreg":
        return predict_logreg(model, x)
    if kind == "gnb":
        return predict_gnb(model, x)
    raise TypeError(f"not a classifier: {type(model).__name__}")


class InferencePipeline:
    """Scaler, optional encoder and classifier chained for scoring raw rows.

    Rows are scored one at a time so a probability never depends on which
    other rows share its batch; the network service and offline scoring
    therefore agree bit for bit.
    """

    def __init__(self, scaler: ScalerParams, classifier, encoder: VaeModel | None = None):
        d = scaler.dim
        if encoder is not None and encoder.input_dim != d:
            raise PreconditionError(
                f"scaler width {d} does not match encoder input {encoder.input_dim}")
        expect = encoder.latent_dim if encoder is not None else d
        if classifier.n_features != expect:
            raise PreconditionError(
                f"classifier expects {classifier.n_features} features, pipeline yields {expect}")
        self.scaler = scaler
        self.encoder = encoder
        self.classifier = classifier
        self.input_dim = d

    def score_one(self, features) -> float:
        row = np.asarray(features, dtype=np.float64).reshape(1, -1)
        if row.shape[1] != self.input_dim:
            raise PreconditionError(f"expected {self.input_dim} features, got {row.shape[1]}")
        h = scale_matrix(self.scaler, row)
        if self.encoder is not None:
            h = encode(self.encoder, h)[0]
        return float(classifier_proba(self.classifier, h)[0])

    def score_many(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.array([self.score_one(row) for row in x.reshape(x.shape[0], -1)])


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class VaeSettings:
    hidden_dims: tuple = (512, 128)
    latent_dim: int = 32
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment grid.

    ``dataset`` is ``{"path": ..., "format": ..., "label_column": ...}``;
    without it ``synthetic`` (``SyntheticSpec`` fields plus ``seed``) is
    generated in memory. Splits are ``"train/test"`` percentage labels; the
    remainder of each split is held out and unused.
    """

    output_dir: str = "run"
    dataset: dict | None = None
    synthetic: dict | None = None
    splits: tuple = DEFAULT_SPLITS
    seeds: tuple = DEFAULT_SEEDS
    feature_mode: str = "both"
    classifiers: tuple = CLASSIFIERS
    vae: VaeSettings = field(default_factory=VaeSettings)
    cv_folds: int = 5
    run_seed: int = 0
    stratify: bool = False
    record_timing: bool = True
    save_models: bool = True

    def __post_init__(self):
        object.__setattr__(self, "splits", tuple(str(s) for s in self.splits))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "classifiers", tuple(self.classifiers))
        if isinstance(self.vae, dict):
            vae = dict(self.vae)
            if "hidden_dims" in vae:
                vae["hidden_dims"] = tuple(vae["hidden_dims"])
            object.__setattr__(self, "vae", VaeSettings(**vae))
        if not self.splits or not self.seeds or not self.classifiers:
            raise PreconditionError("need at least one split, one seed and one classifier")
        for s in self.splits:
            SplitSpec.from_label(s)
        for c in self.classifiers:
            if c not in CLASSIFIERS:
                raise PreconditionError(f"unknown classifier {c!r}")
        if self.feature_mode not in ("raw", "latent", "both"):
            raise PreconditionError("feature_mode must be raw, latent or both")
        if len(set(self.splits)) != len(self.splits) or len(set(self.seeds)) != len(self.seeds):
            raise PreconditionError("splits and seeds must not repeat")
        if self.cv_folds < 2:
            raise PreconditionError("cv_folds must be >= 2")
        if (self.dataset is None) == (self.synthetic is None):
            raise PreconditionError("configure exactly one of dataset or synthetic")

    @property
    def modes(self) -> tuple:
        return FEATURE_MODES if self.feature_mode == "both" else (self.feature_mode,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["splits"] = list(self.splits)
        d["seeds"] = list(self.seeds)
        d["classifiers"] = list(self.classifiers)
        d["vae"]["hidden_dims"] = list(self.vae.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def cell_count(cfg: ExperimentConfig) -> int:
    return len(cfg.splits) * len(cfg.seeds) * len(cfg.modes) * len(cfg.classifiers)


def load_config_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset is not None:
        d = cfg.dataset
        ds = load_dataset(d["path"], d.get("format"), d.get("label_column", -1))
    else:
        syn = dict(cfg.synthetic)
        seed = int(syn.pop("seed", 0))
        ds = generate_synthetic(SyntheticSpec(**syn), seed)
    return drop_unlabeled(ds)


# -- running -----------------------------------------------------------------

def _slug(split_label: str) -> str:
    return split_label.replace("/", "-")


def _model_seeds(cfg, split_index, seed):
    # keyed by the seed value so reordering the seed list changes nothing
    base = derive_seed(cfg.run_seed, split_index, seed)
    return {
        "vae": derive_seed(base, 0),
        "cv": derive_seed(base, 1),
        "fit": derive_seed(base, 2),
    }


def _run_classifier(cfg, name, x_tr, y_tr, x_te, y_te, seeds):
    def trainer(x, y, fold_seed):
        m = train_classifier(name, x, y, fold_seed)
        return lambda z: classifier_proba(m, z)

    cv, cv_time = time_execution("cv", lambda: kfold_cv(trainer, x_tr, y_tr, cfg.cv_folds,
                                                        seeds["cv"]))
    model, fit_time = time_execution("fit", lambda: train_classifier(name, x_tr, y_tr,
                                                                     seeds["fit"]))
    proba, pred_time = time_execution("predict", lambda: classifier_proba(model, x_te))
    scores = score_probabilities(proba, y_te)
    try:
        roc = [list(p) for p in roc_curve_points(proba, y_te)]
    except LatentmalError:
        roc = []
    return model, {
        "cv_folds": list(cv.fold_scores),
        "cv_mean": cv.mean,
        "cv_std": cv.std,
        "test_accuracy": scores.accuracy,
        "auc": scores.auc,
        "precision": scores.precision,
        "recall": scores.recall,
        "f1": scores.f1,
        "confusion": asdict(scores.confusion),
        "roc": roc,
        "timings": {"cv": cv_time.wall_seconds, "fit": fit_time.wall_seconds,
                    "predict": pred_time.wall_seconds},
    }


def _error_text(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def run_experiment(cfg: ExperimentConfig, log=None) -> dict:
    """Run the full grid and write every artifact under ``cfg.output_dir``.

    A failure inside one cell is recorded and the remaining cells proceed.
    Returns the results document also written to ``results.json``.
    """
    log = log or (lambda msg: None)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "config.json", _dumps(cfg.to_dict()))
    ds = load_config_dataset(cfg)
    cells, failures, stages = [], [], []

    for si, split_label in enumerate(cfg.splits):
        for seed in cfg.seeds:
            seeds = _model_seeds(cfg, si, seed)
            tag = f"{_slug(split_label)}_seed{seed}"
            log(f"cell split={split_label} seed={seed}")
            try:
                train, test, _ = split(ds, SplitSpec.from_label(split_label, seed=seed),
                                       stratify=cfg.stratify)
                scaler = fit_scaler(train)
                train_s, test_s = apply_scaler(scaler, train), apply_scaler(scaler, test)
                if cfg.save_models:
                    save_model(scaler, out / "models" / tag / "scaler.lmlm")
            except Exception as exc:
                for mode in cfg.modes:
                    for name in cfg.classifiers:
                        failures.append(_failure(split_label, seed, mode, name, "prepare", exc))
                continue

            for mode in cfg.modes:
                try:
                    if mode == "raw":
                        x_tr, x_te = train_s.features, test_s.features
                    else:
                        x_tr, x_te = _encode_cell(cfg, train_s, test_s, seeds["vae"], out, tag,
                                                  split_label, seed, stages)
                except Exception as exc:
                    for name in cfg.classifiers:
                        failures.append(_failure(split_label, seed, mode, name, "encode", exc))
                    continue
                for name in cfg.classifiers:
                    try:
                        model, res = _run_classifier(cfg, name, x_tr, train_s.labels, x_te,
                                                     test_s.labels, seeds)
                        if cfg.save_models:
                            save_model(model, out / "models" / tag / f"{mode}_{name}.lmlm")
                    except Exception as exc:
                        failures.append(_failure(split_label, seed, mode, name, "classify", exc))
                        continue
                    for stage, secs in res.pop("timings").items():
                        stages.append({"split": split_label, "seed": seed, "mode": mode,
                                       "stage": f"{name}_{stage}", "seconds": secs})
                    cells.append({"split": split_label, "seed": seed, "mode": mode,
                                  "classifier": name, "n_train": train.n_samples,
                                  "n_test": test.n_samples, **res})
                    log(f"  {mode:6s} {name:8s} acc={res['test_accuracy']:.4f} "
                        f"auc={res['auc']:.4f}")

    if not cfg.record_timing:
        for s in stages:
            s["seconds"] = None
    results = {"config": cfg.to_dict(), "dataset": {"name": ds.name, "n": ds.n_samples,
                                                    "d": ds.feature_dim},
               "cells": cells, "failures": failures, "timings": stages}
    _atomic_write(out / "results.json", _dumps(results))
    write_reports(out)
    return results


def _encode_cell(cfg, train_s, test_s, vae_seed, out, tag, split_label, seed, stages):
    v = cfg.vae
    model = init_vae(train_s.feature_dim, v.hidden_dims, v.latent_dim, seed=vae_seed)
    tc = TrainConfig(epochs=v.epochs, batch_size=v.batch_size, learning_rate=v.learning_rate,
                     seed=vae_seed)
    (model, _), t_train = time_execution("vae_train", lambda: train_vae(model, train_s, tc))
    (lat_tr, lat_te), t_ext = time_execution(
        "vae_extract", lambda: (extract_latent(model, train_s), extract_latent(model, test_s)))
    if cfg.save_models:
        save_model(model, out / "models" / tag / "vae.lmlm")
    for rec in (t_train, t_ext):
        stages.append({"split": split_label, "seed": seed, "mode": "latent",
                       "stage": rec.label, "seconds": rec.wall_seconds})
    return lat_tr.features, lat_te.features


def _failure(split_label, seed, mode, name, stage, exc):
    return {"split": split_label, "seed": seed, "mode": mode, "classifier": name,
            "stage": stage, "error": _error_text(exc)}


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8")


# -- reports -----------------------------------------------------------------

def _num(v) -> str:
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def _fixed4(v: float) -> str:
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    s = f"{v:.4f}"
    return "0.0000" if s == "-0.0000" else s


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _cell_seconds(doc, cell):
    for s in doc["timings"]:
        if (s["split"], s["seed"], s["mode"], s["stage"]) == (
                cell["split"], cell["seed"], cell["mode"], f"{cell['classifier']}_fit"):
            return s["seconds"]
    return None


def write_reports(run_dir) -> list:
    """Emit the CSV tables for a finished run. Returns the written paths."""
    run_dir = Path(run_dir)
    src = run_dir / "results.json"
    if not src.exists():
        raise FileNotFoundError(f"{src} not found; run the experiment first")
    doc = json.loads(src.read_text())
    cells = doc["cells"]
    written = []

    def emit(name, header, rows):
        path = run_dir / name
        _atomic_write(path, _csv_bytes(header, rows))
        written.append(path)

    emit("metrics.csv", METRICS_HEADER, [
        [c["split"], c["seed"], c["mode"], c["classifier"], _num(c["cv_mean"]),
         _num(c["cv_std"]), _num(c["test_accuracy"]), _num(c["auc"]), _num(c["precision"]),
         _num(c["recall"]), _num(c["f1"]), _num(_cell_seconds(doc, c))] for c in cells])
    emit("confusion.csv", ["split", "seed", "mode", "classifier", "tp", "fp", "tn", "fn"], [
        [c["split"], c["seed"], c["mode"], c["classifier"], c["confusion"]["tp"],
         c["confusion"]["fp"], c["confusion"]["tn"], c["confusion"]["fn"]] for c in cells])
    emit("execution_times.csv", ["split", "seed", "mode", "stage", "seconds"], [
        [s["split"], s["seed"], s["mode"], s["stage"], _num(s["seconds"])]
        for s in doc["timings"]])
    emit("failures.csv", ["split", "seed", "mode", "classifier", "stage", "error"], [
        [f["split"], f["seed"], f["mode"], f["classifier"], f["stage"], f["error"]]
        for f in doc["failures"]])

    folds = {(c["split"], c["seed"], c["mode"], c["classifier"]): c["cv_folds"] for c in cells}
    cfg = doc["config"]
    modes = FEATURE_MODES if cfg["feature_mode"] == "both" else (cfg["feature_mode"],)
    seed_rows, split_rows = [], []
    for mode in modes:
        for name in cfg["classifiers"]:
            for sp in cfg["splits"]:
                for a, b in combinations(cfg["seeds"], 2):
                    fa, fb = folds.get((sp, a, mode, name)), folds.get((sp, b, mode, name))
                    if fa and fb:
                        r = ttest_ind(fa, fb)
                        seed_rows.append([sp, mode, name, a, b, _fixed4(r.t_statistic),
                                          _fixed4(r.p_value)])
            for seed in cfg["seeds"]:
                for a, b in combinations(cfg["splits"], 2):
                    fa, fb = folds.get((a, seed, mode, name)), folds.get((b, seed, mode, name))
                    if fa and fb:
                        r = ttest_ind(fa, fb)
                        split_rows.append([seed, mode, name, a, b, _fixed4(r.t_statistic),
                                           _fixed4(r.p_value)])
    emit("seed_ttests.csv", ["split", "mode", "classifier", "seed_a", "seed_b", "t", "p"],
         seed_rows)
    emit("split_ttests.csv", ["seed", "mode", "classifier", "split_a", "split_b", "t", "p"],
         split_rows)

    for c in cells:
        if not c["roc"]:
            continue
        name = f"roc/{_slug(c['split'])}_seed{c['seed']}_{c['mode']}_{c['classifier']}.csv"
        emit(name, ["fpr", "tpr", "threshold"],
             [[_num(f), _num(t), "inf" if math.isinf(th) else _num(th)]
              for f, t, th in c["roc"]])
    return written
