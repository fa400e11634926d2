"""Sparse binary datasets, the sparse text format, and variance filtering.

Text format, one sample per line::

    <label> [t=<days>] <feat>:1 <feat>:1 ...

``#`` starts a comment line. Feature ids must be strictly increasing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ParseError


@dataclass(frozen=True)
class SparseSample:
    active_features: tuple
    label: int
    timestamp: int | None = None

    def __post_init__(self):
        feats = tuple(int(f) for f in self.active_features)
        if any(b <= a for a, b in zip(feats, feats[1:])):
            raise DataError(f"feature indices must be strictly increasing: {feats}")
        if feats and feats[0] < 0:
            raise DataError("negative feature index")
        if self.label < 0:
            raise DataError(f"negative label {self.label}")
        object.__setattr__(self, "active_features", feats)


class Dataset:
    """Samples stored as CSR rows of active feature ids plus label/timestamp columns.

    ``samples`` materializes :class:`SparseSample` objects on demand; the hot
    paths only touch the arrays.
    """

    def __init__(self, indptr, indices, labels, feature_dim, class_count,
                 timestamps=None, class_names=None):
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.timestamps = None if timestamps is None else np.ascontiguousarray(timestamps, dtype=np.int64)
        self.feature_dim = int(feature_dim)
        self.class_count = int(class_count)
        self.class_names = None if class_names is None else list(class_names)
        self._validate()

    def _validate(self):
        n = len(self.labels)
        if n == 0:
            raise DataError("empty dataset")
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise DataError("inconsistent CSR row pointers")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.feature_dim):
            raise DataError(f"feature index outside [0, {self.feature_dim})")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"label outside [0, {self.class_count})")
        if self.timestamps is not None and self.timestamps.shape != (n,):
            raise DataError("timestamp column length mismatch")

    @classmethod
    def from_samples(cls, samples: Sequence[SparseSample], feature_dim=None, class_count=None,
                     class_names=None):
        samples = list(samples)
        if not samples:
            raise DataError("empty dataset")
        lengths = [len(s.active_features) for s in samples]
        indptr = np.zeros(len(samples) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        indices = np.fromiter((f for s in samples for f in s.active_features), dtype=np.int64,
                              count=int(indptr[-1]))
        labels = np.array([s.label for s in samples], dtype=np.int64)
        has_t = [s.timestamp is not None for s in samples]
        if any(has_t) and not all(has_t):
            raise DataError("timestamps must be present on all samples or none")
        timestamps = np.array([s.timestamp for s in samples], dtype=np.int64) if all(has_t) else None
        if feature_dim is None:
            feature_dim = int(indices.max()) + 1 if len(indices) else 1
        if class_count is None:
            class_count = int(labels.max()) + 1
        return cls(indptr, indices, labels, feature_dim, class_count, timestamps, class_names)

    @classmethod
    def from_dense(cls, x, labels, class_count=None, timestamps=None):
        x = np.asarray(x).astype(bool)
        rows, cols = np.nonzero(x)
        indptr = np.zeros(x.shape[0] + 1, dtype=np.int64)
        np.cumsum(x.sum(axis=1), out=indptr[1:])
        labels = np.asarray(labels, dtype=np.int64)
        if class_count is None:
            class_count = int(labels.max()) + 1
        return cls(indptr, cols, labels, x.shape[1], class_count, timestamps)

    def __len__(self):
        return len(self.labels)

    @property
    def samples(self):
        out = []
        for i in range(len(self)):
            t = None if self.timestamps is None else int(self.timestamps[i])
            feats = tuple(int(f) for f in self.indices[self.indptr[i]:self.indptr[i + 1]])
            out.append(SparseSample(feats, int(self.labels[i]), t))
        return out

    def row(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def to_dense(self):
        x = np.zeros((len(self), self.feature_dim))
        rows = np.repeat(np.arange(len(self)), np.diff(self.indptr))
        x[rows, self.indices] = 1.0
        return x

    def take(self, rows):
        """Subset (and reorder) by row positions."""
        rows = np.asarray(rows, dtype=np.int64)
        starts = self.indptr[rows]
        lengths = self.indptr[rows + 1] - starts
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        # gather positions of each selected row's feature block
        offsets = np.repeat(starts - indptr[:-1], lengths)
        pos = np.arange(indptr[-1], dtype=np.int64) + offsets
        ts = None if self.timestamps is None else self.timestamps[rows]
        return Dataset(indptr, self.indices[pos], self.labels[rows], self.feature_dim,
                       self.class_count, ts, self.class_names)

    def feature_counts(self):
        return np.bincount(self.indices, minlength=self.feature_dim)

    def digest_bytes(self):
        parts = [self.indptr.tobytes(), self.indices.tobytes(), self.labels.tobytes()]
        if self.timestamps is not None:
            parts.append(self.timestamps.tobytes())
        return b"".join(parts)


def concat(datasets: Iterable[Dataset]) -> Dataset:
    datasets = [d for d in datasets if d is not None]
    if not datasets:
        raise DataError("nothing to concatenate")
    if len(datasets) == 1:
        return datasets[0]
    first = datasets[0]
    if any(d.feature_dim != first.feature_dim or d.class_count != first.class_count for d in datasets):
        raise DataError("cannot concatenate datasets with different feature or class spaces")
    indptr = [np.zeros(1, dtype=np.int64)]
    base = 0
    for d in datasets:
        indptr.append(d.indptr[1:] + base)
        base += int(d.indptr[-1])
    with_t = [d.timestamps is not None for d in datasets]
    ts = np.concatenate([d.timestamps for d in datasets]) if all(with_t) else None
    return Dataset(np.concatenate(indptr), np.concatenate([d.indices for d in datasets]),
                   np.concatenate([d.labels for d in datasets]), first.feature_dim,
                   first.class_count, ts, first.class_names)


# --------------------------------------------------------------------------
# text format
# --------------------------------------------------------------------------

def _parse_line(text, lineno):
    tokens = text.split()
    try:
        label = int(tokens[0])
    except ValueError:
        raise ParseError(f"bad label {tokens[0]!r}", lineno) from None
    if label < 0:
        raise ParseError(f"negative label {label}", lineno)
    rest = tokens[1:]
    timestamp = None
    if rest and rest[0].startswith("t="):
        try:
            timestamp = int(rest[0][2:])
        except ValueError:
            raise ParseError(f"bad timestamp {rest[0]!r}", lineno) from None
        rest = rest[1:]
    feats = []
    for tok in rest:
        idx, sep, val = tok.partition(":")
        if not sep:
            raise ParseError(f"bad feature token {tok!r}", lineno)
        try:
            f = int(idx)
        except ValueError:
            raise ParseError(f"bad feature index {idx!r}", lineno) from None
        if val != "1":
            raise ParseError(f"feature values must be 1, got {val!r}", lineno)
        if f < 0:
            raise ParseError(f"negative feature index {f}", lineno)
        if feats and f == feats[-1]:
            raise ParseError(f"duplicate feature index {f}", lineno)
        if feats and f < feats[-1]:
            raise ParseError(f"feature indices not increasing at {f}", lineno)
        feats.append(f)
    return label, timestamp, feats


def load_sparse_text(path, feature_dim=None, class_count=None, require_timestamps=False) -> Dataset:
    """Read the sparse text format.

    ``feature_dim`` / ``class_count`` default to one past the largest id seen;
    pass them to validate against a known space. ``require_timestamps`` is the
    DIL mode: every sample must carry ``t=``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    labels, stamps, lengths, indices = [], [], [], []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            label, t, feats = _parse_line(text, lineno)
            if require_timestamps and t is None:
                raise ParseError("missing timestamp", lineno)
            if feature_dim is not None and feats and feats[-1] >= feature_dim:
                raise ParseError(f"feature index {feats[-1]} >= feature_dim {feature_dim}", lineno)
            if class_count is not None and label >= class_count:
                raise ParseError(f"label {label} >= class_count {class_count}", lineno)
            labels.append(label)
            stamps.append(t)
            lengths.append(len(feats))
            indices.extend(feats)
    if not labels:
        raise DataError(f"empty dataset: {path}")
    has_t = [t is not None for t in stamps]
    if any(has_t) and not all(has_t):
        raise DataError("timestamps present on some samples but not others")
    indptr = np.zeros(len(labels) + 1, dtype=np.int64)
    np.cumsum(lengths, out=indptr[1:])
    indices = np.array(indices, dtype=np.int64)
    labels = np.array(labels, dtype=np.int64)
    if feature_dim is None:
        feature_dim = int(indices.max()) + 1 if len(indices) else 1
    if class_count is None:
        class_count = int(labels.max()) + 1
    ts = np.array(stamps, dtype=np.int64) if all(has_t) else None
    return Dataset(indptr, indices, labels, feature_dim, class_count, ts)


def write_sparse_text(dataset: Dataset, path, header=None):
    path = Path(path)
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header)
    for i in range(len(dataset)):
        parts = [str(int(dataset.labels[i]))]
        if dataset.timestamps is not None:
            parts.append(f"t={int(dataset.timestamps[i])}")
        parts.extend(f"{int(f)}:1" for f in dataset.row(i))
        lines.append(" ".join(parts))
    path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# variance filter
# --------------------------------------------------------------------------

@dataclass
class FeatureFilter:
    kept: np.ndarray
    threshold: float = 1e-3
    original_dim: int | None = None
    variances: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=np.int64)
        if len(np.unique(self.kept)) != len(self.kept) or np.any(np.diff(self.kept) <= 0):
            raise DataError("filter indices must be unique and sorted")

    @property
    def feature_dim(self):
        return len(self.kept)

    def save(self, path):
        body = [f"threshold={self.threshold!r}"] + [str(int(k)) for k in self.kept]
        Path(path).write_text("\n".join(body) + "\n")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().split()
        if not lines or not lines[0].startswith("threshold="):
            raise ParseError("filter file must start with threshold=<real>", 1)
        try:
            threshold = float(lines[0].split("=", 1)[1])
            kept = [int(x) for x in lines[1:]]
        except ValueError as exc:
            raise ParseError(f"malformed filter file: {exc}") from None
        return cls(np.array(kept, dtype=np.int64), threshold)


def variance_filter_fit(train: Dataset, threshold: float = 1e-3) -> FeatureFilter:
    """Keep features whose Bernoulli variance p(1-p) over ``train`` is >= threshold."""
    p = train.feature_counts() / len(train)
    var = p * (1.0 - p)
    kept = np.flatnonzero(var >= threshold)
    return FeatureFilter(kept, threshold, train.feature_dim, var)


def apply_filter(filt: FeatureFilter, dataset: Dataset) -> Dataset:
    """Drop filtered-out features and renumber survivors densely, order preserved."""
    if len(filt.kept) == 0:
        raise DataError("filter removed all features")
    if filt.kept[-1] >= dataset.feature_dim:
        raise DataError(f"filter index {int(filt.kept[-1])} beyond feature space {dataset.feature_dim}")
    if filt.original_dim is not None and filt.original_dim != dataset.feature_dim:
        raise DataError(f"filter fitted on {filt.original_dim} features, dataset has {dataset.feature_dim}")
    remap = np.full(dataset.feature_dim, -1, dtype=np.int64)
    remap[filt.kept] = np.arange(len(filt.kept))
    new = remap[dataset.indices]
    keep = new >= 0
    rows = np.repeat(np.arange(len(dataset)), np.diff(dataset.indptr))
    counts = np.bincount(rows[keep], minlength=len(dataset))
    indptr = np.zeros(len(dataset) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return Dataset(indptr, new[keep], dataset.labels, len(filt.kept), dataset.class_count,
                   dataset.timestamps, dataset.class_names)
