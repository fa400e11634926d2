"""Evaluation math: detection metrics, flip rates, forgetting, aggregation.

Conventions:

* precision/recall/F1 with a zero denominator are 0, never NaN;
* a flip rate over an empty class subset is ``None`` (absent), and absent
  values are skipped by every average;
* rates are fractions in [0, 1]; reports render them as percentages.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError

FORGETTING_MODES = ("max", "prev", "self")


def classification_metrics(tp, fp, fn, tn=0):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "accuracy": accuracy}


def binary_counts(labels, preds, positive):
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    pos_true = labels == positive
    pos_pred = preds == positive
    tp = int(np.sum(pos_true & pos_pred))
    fp = int(np.sum(~pos_true & pos_pred))
    fn = int(np.sum(pos_true & ~pos_pred))
    tn = int(np.sum(~pos_true & ~pos_pred))
    return tp, fp, fn, tn


@dataclass(frozen=True)
class FlipRates:
    nfr: float | None
    pfr: float | None
    nf: int
    pf: int
    n: int


def flip_rates(old_preds, new_preds, labels, cls=None):
    """Negative/positive flips of ``old -> new``; restricted to true class ``cls`` if given."""
    old_preds = np.asarray(old_preds)
    new_preds = np.asarray(new_preds)
    labels = np.asarray(labels)
    if not (old_preds.shape == new_preds.shape == labels.shape):
        raise DataError("prediction and label vectors must have equal length")
    if cls is not None:
        sel = labels == cls
        old_preds, new_preds, labels = old_preds[sel], new_preds[sel], labels[sel]
    old_ok = old_preds == labels
    new_ok = new_preds == labels
    nf = int(np.sum(old_ok & ~new_ok))
    pf = int(np.sum(~old_ok & new_ok))
    n = len(labels)
    if n == 0:
        return FlipRates(None, None, 0, 0, 0)
    return FlipRates(nf / n, pf / n, nf, pf, n)


# --------------------------------------------------------------------------
# per-(update, experience) records
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRecord:
    """Counts for model f_k (and its predecessor) on test experience j.

    ``confusion[true, pred]`` is f_k's confusion matrix. The per-class
    ``old_correct``, ``nf`` and ``pf`` arrays are ``None`` at k = 1.
    """

    update: int
    experience: int
    confusion: np.ndarray
    old_correct: np.ndarray | None = None
    nf: np.ndarray | None = None
    pf: np.ndarray | None = None

    @property
    def n(self):
        return int(self.confusion.sum())

    @property
    def n_per_class(self):
        return self.confusion.sum(axis=1)

    @property
    def correct_per_class(self):
        return np.diag(self.confusion)

    @property
    def accuracy(self):
        return float(np.trace(self.confusion)) / self.n

    @property
    def has_old(self):
        return self.nf is not None

    @property
    def old_accuracy(self):
        return float(self.old_correct.sum()) / self.n

    def _rate(self, counts, cls):
        if counts is None:
            return None
        if cls is None:
            return float(counts.sum()) / self.n
        n_c = int(self.n_per_class[cls])
        return float(counts[cls]) / n_c if n_c else None

    def nfr(self, cls=None):
        return self._rate(self.nf, cls)

    def pfr(self, cls=None):
        return self._rate(self.pf, cls)

    def binary_metrics(self, positive):
        c = self.confusion
        tp = int(c[positive, positive])
        fp = int(c[:, positive].sum()) - tp
        fn = int(c[positive, :].sum()) - tp
        tn = self.n - tp - fp - fn
        return classification_metrics(tp, fp, fn, tn)


def make_record(update, experience, labels, new_preds, old_preds=None, n_classes=None):
    labels = np.asarray(labels)
    new_preds = np.asarray(new_preds)
    if n_classes is None:
        n_classes = int(max(labels.max(), new_preds.max())) + 1
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, new_preds), 1)
    if old_preds is None:
        return EvalRecord(update, experience, confusion)
    old_preds = np.asarray(old_preds)
    old_ok = old_preds == labels
    new_ok = new_preds == labels
    count = lambda m: np.bincount(labels[m], minlength=n_classes)
    return EvalRecord(update, experience, confusion, count(old_ok), count(old_ok & ~new_ok),
                      count(~old_ok & new_ok))


# --------------------------------------------------------------------------
# aggregation over test experiences
# --------------------------------------------------------------------------

def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def backward_horizon(k, kind):
    return k if kind == "DIL" else k - 1


def backward_mean(records, k, kind, value, pairwise=True):
    """Unweighted mean of ``value(record)`` over test experiences j <= k'.

    ``pairwise`` marks metrics comparing f_k with f_{k-1}; in CIL those stop at
    k - 1 so both models know every evaluated class. Single-model metrics use
    every experience seen so far.
    """
    k_prime = backward_horizon(k, kind) if pairwise else k
    if k_prime < 1:
        return None
    return _mean(value(records[(k, j)]) for j in range(1, k_prime + 1) if (k, j) in records)


def forward_mean(records, k, K, kind, value):
    if kind != "DIL":
        raise ContractError("forward evaluation is only defined for DIL")
    return _mean(value(records[(k, j)]) for j in range(k, K + 1) if (k, j) in records)


def backward_nfr(records, k, kind, cls=None):
    return backward_mean(records, k, kind, lambda r: r.nfr(cls))


def forward_nfr(records, k, K, kind="DIL", cls=None):
    return forward_mean(records, k, K, kind, lambda r: r.nfr(cls))


def forgetting(acc, k, mode="max"):
    """Per-experience forgetting F_j^k for j < k and their mean.

    ``acc`` maps (update o, experience j) -> accuracy. In ``max`` mode the
    reference is the best accuracy on j among updates 1..k-1 that were
    evaluated on j.
    """
    if mode not in FORGETTING_MODES:
        raise ContractError(f"unknown forgetting mode {mode!r}")
    if k < 2:
        raise ContractError("forgetting needs k >= 2")
    per_j = {}
    for j in range(1, k):
        if mode == "max":
            ref = [acc[(o, j)] for o in range(1, k) if (o, j) in acc]
            if not ref:
                continue
            best = max(ref)
        elif mode == "prev":
            best = acc[(k - 1, j)]
        else:
            best = acc[(j, j)]
        per_j[j] = best - acc[(k, j)]
    return per_j, (float(np.mean(list(per_j.values()))) if per_j else None)


def forgetting_identity_check(record):
    """(A_old - A_new) - (NFR - PFR) over all classes; zero up to rounding."""
    if not record.has_old:
        raise ContractError("identity check needs predecessor predictions")
    return (record.old_accuracy - record.accuracy) - (record.nfr() - record.pfr())


# --------------------------------------------------------------------------
# curves and cross-seed aggregation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricCurve:
    metric: str
    mode: str
    seed: int
    updates: tuple
    values: tuple

    @property
    def overall(self):
        return _mean(self.values)


@dataclass
class AggregateCurve:
    metric: str
    mode: str
    updates: tuple
    mean: list
    std: list
    worst: list
    overall_mean: float | None
    overall_std: float | None
    overall_worst: float | None
    n_seeds: int
    single_seed: bool = False


# metrics where larger is better; the rest (flip rates, forgetting) are worse when larger
HIGHER_IS_BETTER_PREFIXES = ("precision", "recall", "f1", "accuracy", "pfr")


def higher_is_better(metric):
    return metric.startswith(HIGHER_IS_BETTER_PREFIXES)


def _std(values):
    if len(values) < 2 or min(values) == max(values):
        return 0.0
    return float(np.std(values, ddof=1))


def seed_aggregate(curves, higher_better=None):
    """Pointwise mean, sample std (n-1) and worst value across seeds."""
    curves = list(curves)
    if not curves:
        raise DataError("no curves to aggregate")
    first = curves[0]
    if any(c.updates != first.updates for c in curves):
        raise DataError("curves have mismatched lengths across seeds")
    if higher_better is None:
        higher_better = higher_is_better(first.metric)
    pick = min if higher_better else max
    mean, std, worst = [], [], []
    for i in range(len(first.updates)):
        vals = [c.values[i] for c in curves if c.values[i] is not None]
        mean.append(float(np.mean(vals)) if vals else None)
        std.append(_std(vals) if vals else None)
        worst.append(pick(vals) if vals else None)
    overall = [c.overall for c in curves if c.overall is not None]
    return AggregateCurve(
        first.metric, first.mode, first.updates, mean, std, worst,
        float(np.mean(overall)) if overall else None,
        _std(overall) if overall else None,
        pick(overall) if overall else None,
        len(curves), single_seed=len(curves) == 1,
    )


DIL_CLASSES = {"mw": 1, "gw": 0}


def curves_for_seed(records, kind, K, seed, forgetting_mode="max"):
    """All per-update curves of one seed's evaluation records."""
    out = []

    def add(metric, mode, updates, fn):
        out.append(MetricCurve(metric, mode, seed, tuple(updates), tuple(fn(k) for k in updates)))

    all_k = range(1, K + 1)
    flip_k = range(2, K + 1)
    modes = [("backward", lambda k, f, pairwise=True: backward_mean(records, k, kind, f, pairwise))]
    if kind == "DIL":
        modes.append(("forward", lambda k, f, pairwise=True: forward_mean(records, k, K, kind, f)))
    for mode, agg in modes:
        if kind == "DIL":
            for tag, cls in DIL_CLASSES.items():
                for name in ("precision", "recall", "f1"):
                    add(f"{name}_{tag}", mode, all_k,
                        lambda k, name=name, cls=cls: agg(k, lambda r: r.binary_metrics(cls)[name], False))
        add("accuracy", mode, all_k, lambda k: agg(k, lambda r: r.accuracy, False))
        if kind == "DIL":
            for tag, cls in DIL_CLASSES.items():
                add(f"nfr_{tag}", mode, flip_k, lambda k, cls=cls: agg(k, lambda r: r.nfr(cls)))
                add(f"pfr_{tag}", mode, flip_k, lambda k, cls=cls: agg(k, lambda r: r.pfr(cls)))
        add("nfr", mode, flip_k, lambda k: agg(k, lambda r: r.nfr()))
        add("pfr", mode, flip_k, lambda k: agg(k, lambda r: r.pfr()))
    acc = {key: r.accuracy for key, r in records.items()}
    add("forgetting", "backward", flip_k, lambda k: forgetting(acc, k, forgetting_mode)[1])
    return out
