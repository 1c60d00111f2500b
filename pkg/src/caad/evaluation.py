"""Metrics and the comparison experiments (threshold sweep, imbalance, dataset shift)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import rankdata
from sklearn.model_selection import StratifiedKFold

from .confidence import DecisionThresholds
from .data import Dataset, SynthConfig, synth_tabular
from .estimator import BinaryBaselineClassifier, CAADetector, binary_cross_entropy
from .pipeline import diagnose_batch

DEFAULT_TCONF_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95)
DEFAULT_FRACTIONS = (1.0, 0.5, 0.1)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def _check_two_classes(labels):
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    return labels, n_pos, n_neg


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score of a positive > score of a negative).

    Tied pairs count one half, which midranks give for free.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels, n_pos, n_neg = _check_two_classes(labels)
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve_points(scores, labels):
    """(fpr, tpr) at every distinct score threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels, n_pos, n_neg = _check_two_classes(labels)
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    tps = np.cumsum(l == 1)
    fps = np.cumsum(l == 0)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    return np.r_[0.0, fps[last] / n_neg], np.r_[0.0, tps[last] / n_pos]


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    t_ano: float | None = None
    t_conf: float | None = None
    label: str = ""

    def to_dict(self):
        return asdict(self)


def confusion_metrics(diagnoses, labels, *, thresholds: DecisionThresholds | None = None,
                      auc=None, label="") -> MetricsReport:
    """Accuracy, sensitivity and specificity of 0/1 (or POSITIVE/NEGATIVE) diagnoses."""
    d = np.asarray([getattr(x, "positive", x) for x in diagnoses], dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if d.shape != y.shape:
        raise ValueError("diagnoses and labels differ in length")
    tp = int(((d == 1) & (y == 1)).sum())
    fp = int(((d == 1) & (y == 0)).sum())
    tn = int(((d == 0) & (y == 0)).sum())
    fn = int(((d == 0) & (y == 1)).sum())
    n = len(y)
    return MetricsReport(
        accuracy=(tp + tn) / n if n else float("nan"),
        sensitivity=tp / (tp + fn) if tp + fn else float("nan"),
        specificity=tn / (tn + fp) if tn + fp else float("nan"),
        auc=auc, tp=tp, fp=fp, tn=tn, fn=fn, n=n,
        t_ano=None if thresholds is None else thresholds.t_ano,
        t_conf=None if thresholds is None else thresholds.t_conf,
        label=label,
    )


def sweep_from_scores(nu, iota, labels, t_ano, t_confs=DEFAULT_TCONF_GRID, include_baseline=True):
    """One report per confidence threshold; every row shares the score AUC.

    With ``include_baseline`` the first row is pure score thresholding
    (``t_conf = 0``, confidence ignored).
    """
    auc = roc_auc(nu, labels)
    grid = ([0.0] if include_baseline else []) + [float(t) for t in t_confs]
    rows = []
    for i, t in enumerate(grid):
        th = DecisionThresholds(t_ano, t)
        name = "score-only" if include_baseline and i == 0 else "caad"
        rows.append(confusion_metrics(diagnose_batch(nu, iota, th), labels, thresholds=th, auc=auc, label=name))
    return rows


def confidence_sweep(model: CAADetector, X, y, t_confs=DEFAULT_TCONF_GRID, t_ano=None, include_baseline=True):
    nu, iota = model.score_and_confidence(X)
    t_ano = model.thresholds_.t_ano if t_ano is None else t_ano
    return sweep_from_scores(nu, iota, y, t_ano, t_confs, include_baseline)


def confidence_separation(nu, iota, labels, t_ano):
    """Mean confidence on correct minus mean confidence on wrong score-only predictions."""
    pred = (np.asarray(nu) >= t_ano).astype(np.int64)
    ok = pred == np.asarray(labels)
    if ok.all() or not ok.any():
        return float("nan")
    iota = np.asarray(iota)
    return float(iota[ok].mean() - iota[~ok].mean())


def train_binary_baseline(X, y, **params) -> BinaryBaselineClassifier:
    return BinaryBaselineClassifier(**params).fit(X, y)


# ---------------------------------------------------------------------------
# experiment protocols


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    seeds: tuple = DEFAULT_SEEDS
    fractions: tuple = DEFAULT_FRACTIONS
    detector: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    n_jobs: int = 1


def novel_split(test: Dataset) -> Dataset:
    """Normals plus held-out-cluster anomalies."""
    tags = test.subclass.astype(str)
    return test.subset((test.y == 0) | (tags == "novel"))


def known_split(test: Dataset) -> Dataset:
    """Normals plus anomalies from clusters seen in training."""
    return test.subset(test.subclass.astype(str) != "novel")


def subsample_positives(train: Dataset, fraction: float) -> Dataset:
    """Keep every negative and the first ``fraction`` of the positives (generation order)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    pos = np.flatnonzero(train.y == 1)
    keep = np.zeros(len(train), dtype=bool)
    keep[train.y == 0] = True
    keep[pos[:max(1, int(round(fraction * len(pos))))]] = True
    return train.subset(keep)


def _baseline_params(detector: dict, baseline: dict, seed: int):
    shared = {k: detector[k] for k in ("extractor", "feature_dim", "cnn_channels", "batch_size", "lr",
                                       "lr_final", "augment", "crop_fraction") if k in detector}
    if "stage1_epochs" in detector:
        shared["epochs"] = detector["stage1_epochs"]
    return {**shared, **baseline, "random_state": seed}


def run_cell(train: Dataset, test: Dataset, seed: int, detector: dict, baseline: dict, fraction=1.0):
    """Train both models on one (seed, fraction) cell and score them on the test splits."""
    sub = subsample_positives(train, fraction) if fraction < 1 else train
    det = CAADetector(**{**detector, "random_state": seed}).fit(sub.X, sub.y)
    base = BinaryBaselineClassifier(**_baseline_params(detector, baseline, seed)).fit(sub.X, sub.y)
    known, novel = known_split(test), novel_split(test)
    rows = []
    for name, model in (("caad", det), ("binary", base)):
        row = {"model": name, "seed": seed, "fraction": fraction,
               "n_train_pos": int(sub.y.sum()), "n_train_neg": int((sub.y == 0).sum())}
        for split_name, split in (("known", known), ("novel", novel)):
            if len(np.unique(split.y)) == 2:
                row[f"auc_{split_name}"] = roc_auc(model.decision_function(split.X), split.y)
        if name == "caad":
            nu, iota = det.score_and_confidence(known.X)
            row["separation"] = confidence_separation(nu, iota, known.y, det.thresholds_.t_ano)
            th = det.thresholds_
            rep = confusion_metrics(det.predict(novel.X), novel.y, thresholds=th)
        else:
            rep = confusion_metrics(base.predict(novel.X), novel.y)
        row["novel_sensitivity"], row["novel_specificity"] = rep.sensitivity, rep.specificity
        rows.append(row)
    return rows, det, base


def stratified_folds(data: Dataset, n_splits=5, seed=0):
    """Yield ``(train, validation)`` pairs of a shuffled k-fold split.

    Folds are stratified on the subclass tag, which also keeps the
    anomaly/normal ratio of every fold close to that of the whole set.
    """
    tags = data.subclass.astype(str)
    folds = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
    for tr, va in folds.split(np.zeros(len(data)), tags):
        yield data.subset(tr), data.subset(va)


def cross_validated_auc(data: Dataset, detector: dict | None = None, n_splits=5, seed=0):
    """Per-fold validation AUC of a detector trained on the remaining folds."""
    aucs = []
    for k, (tr, va) in enumerate(stratified_folds(data, n_splits, seed)):
        model = CAADetector(**{**(detector or {}), "random_state": seed + k}).fit(tr.X, tr.y)
        aucs.append(roc_auc(model.decision_function(va.X), va.y))
    return aucs


def _grid(cfg: ExperimentConfig, fractions, synth_overrides=None):
    cells = []
    for seed in cfg.seeds:
        synth = replace(cfg.synth, seed=seed, **(synth_overrides or {}))
        for frac in fractions:
            cells.append((synth, seed, frac))

    def one(synth, seed, frac):
        train, test = synth_tabular(synth)
        return run_cell(train, test, seed, cfg.detector, cfg.baseline, frac)[0]

    if cfg.n_jobs == 1:
        results = [one(*c) for c in cells]
    else:
        results = Parallel(n_jobs=cfg.n_jobs)(delayed(one)(*c) for c in cells)
    return [row for rows in results for row in rows]


def summarize(rows, key, by=("model", "fraction")):
    """Median of ``key`` over seeds for each group."""
    groups = {}
    for r in rows:
        if key in r and np.isfinite(r[key]):
            groups.setdefault(tuple(r[b] for b in by), []).append(r[key])
    return {g: float(np.median(v)) for g, v in sorted(groups.items())}


def median_drops(rows, high=1.0, low=0.1, key="auc_novel"):
    """Median over seeds of the per-seed AUC drop between two positive fractions."""
    out = {}
    for model in sorted({r["model"] for r in rows}):
        by_seed = {}
        for r in rows:
            if r["model"] == model and key in r:
                by_seed.setdefault(r["seed"], {})[r["fraction"]] = r[key]
        drops = [d[high] - d[low] for d in by_seed.values() if high in d and low in d]
        out[model] = float(np.median(drops)) if drops else float("nan")
    return out


def imbalance_experiment(cfg: ExperimentConfig | None = None):
    """Both models at each positive fraction with all negatives kept.

    Returns per-cell rows plus medians; ``auc_novel`` (held-out cluster) is the
    headline metric.
    """
    cfg = cfg or ExperimentConfig()
    rows = _grid(cfg, cfg.fractions)
    hi, lo = max(cfg.fractions), min(cfg.fractions)
    return {"fractions": list(cfg.fractions), "rows": rows,
            "median_auc_novel": summarize(rows, "auc_novel"),
            "median_auc_known": summarize(rows, "auc_known"),
            "median_drop": median_drops(rows, hi, lo)}


def shift_experiment(cfg: ExperimentConfig | None = None, with_novel_in_training=True):
    """Both models trained without the novel cluster, evaluated on it.

    With ``with_novel_in_training`` a second pass adds novel-cluster anomalies
    to training so the size of the shift penalty can be compared.
    """
    cfg = cfg or ExperimentConfig()
    rows = _grid(cfg, (1.0,))
    out = {"rows": rows, "median_auc_novel": summarize(rows, "auc_novel", ("model",)),
           "median_auc_known": summarize(rows, "auc_known", ("model",))}
    if with_novel_in_training:
        inc = _grid(cfg, (1.0,), {"novel_train_fraction": 0.2})
        out["rows_novel_in_training"] = inc
        out["median_auc_novel_in_training"] = summarize(inc, "auc_novel", ("model",))
    return out


# ---------------------------------------------------------------------------
# report output


REPORT_COLUMNS = ("label", "t_ano", "t_conf", "accuracy", "sensitivity", "specificity", "auc",
                  "tp", "fp", "tn", "fn", "n")


def format_table(rows, columns=None) -> str:
    """Fixed-width text table of dicts or :class:`MetricsReport` rows."""
    dicts = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in rows]
    if not dicts:
        return ""
    columns = list(columns or dicts[0].keys())

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(d.get(c)) for c in columns] for d in dicts]
    widths = [max(len(c), *(len(r[i]) for r in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines)


def to_jsonl(rows) -> str:
    dicts = [r.to_dict() if hasattr(r, "to_dict") else r for r in rows]
    return "".join(json.dumps(d, sort_keys=True) + "\n" for d in dicts)


def columns_text(header, *cols) -> str:
    """Whitespace-separated numeric columns with a ``#`` header line, for plotting."""
    lines = ["# " + " ".join(header)]
    for vals in zip(*cols):
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


__all__ = [
    "roc_auc", "roc_curve_points", "MetricsReport", "confusion_metrics", "confidence_sweep",
    "sweep_from_scores", "confidence_separation", "train_binary_baseline", "ExperimentConfig",
    "imbalance_experiment", "shift_experiment", "run_cell", "summarize", "median_drops",
    "format_table", "to_jsonl", "columns_text", "binary_cross_entropy",
]
