"""Experience streams: time windows for DIL, class groups for CIL."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

DIL = "DIL"
CIL = "CIL"


@dataclass(frozen=True)
class Experience:
    id: int
    train: Dataset
    test: Dataset
    window: tuple | None = None
    classes: frozenset | None = None

    def summary(self):
        extra = ""
        if self.window is not None:
            extra = f" window=[{self.window[0]},{self.window[1]})"
        if self.classes is not None:
            extra = f" classes={sorted(self.classes)}"
        return f"exp {self.id}: train={len(self.train)} test={len(self.test)}{extra}"


@dataclass(frozen=True)
class ScenarioStream:
    kind: str
    experiences: tuple

    def __post_init__(self):
        if self.kind not in (DIL, CIL):
            raise ConfigurationError(f"unknown scenario {self.kind!r}")
        object.__setattr__(self, "experiences", tuple(self.experiences))
        if len(self.experiences) < 2:
            raise ConfigurationError("a stream needs at least 2 experiences")
        if self.kind == CIL:
            seen = set()
            for e in self.experiences:
                if e.classes is None or seen & e.classes:
                    raise ConfigurationError("CIL class sets must be present and pairwise disjoint")
                seen |= e.classes

    @property
    def K(self):
        return len(self.experiences)

    @property
    def class_count(self):
        return self.experiences[0].train.class_count

    @property
    def feature_dim(self):
        return self.experiences[0].train.feature_dim

    def seen_classes(self, k):
        """Classes known after training on experiences 1..k (all classes in DIL)."""
        if self.kind == DIL:
            return frozenset(range(self.class_count))
        out = set()
        for e in self.experiences[:k]:
            out |= e.classes
        return frozenset(out)

    def summary(self):
        return [e.summary() for e in self.experiences]


def _split_counts(n, fraction):
    n_train = int(round(fraction * n))
    return min(max(n_train, 1), n - 1)


def build_dil_stream(dataset, window_length_days=90, train_fraction=0.8, seed=0):
    """Bucket by half-open windows ``[t0 + b*w, t0 + (b+1)*w)`` from the earliest timestamp."""
    if dataset.timestamps is None:
        raise DataError("DIL streams need timestamps")
    if window_length_days <= 0:
        raise ConfigurationError("window_length_days must be positive")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    t0 = int(dataset.timestamps.min())
    bucket = (dataset.timestamps - t0) // window_length_days
    experiences = []
    for b in range(int(bucket.max()) + 1):
        rows = np.flatnonzero(bucket == b)
        window = (t0 + b * window_length_days, t0 + (b + 1) * window_length_days)
        if len(rows) < 2:
            log.warning("dropping window %s with %d sample(s)", window, len(rows))
            continue
        rows = rng.permutation(rows)
        n_train = _split_counts(len(rows), train_fraction)
        experiences.append(Experience(len(experiences) + 1, dataset.take(np.sort(rows[:n_train])),
                                      dataset.take(np.sort(rows[n_train:])), window=window))
    if len(experiences) < 2:
        raise ConfigurationError("fewer than 2 non-empty time windows")
    return ScenarioStream(DIL, experiences)


def build_cil_stream(dataset, classes_per_experience=10, order_seed=0, train_fraction=0.9, split_seed=None):
    """Seeded class permutation chunked into groups; stratified split per class."""
    n_classes = dataset.class_count
    if classes_per_experience <= 0 or n_classes % classes_per_experience:
        raise ConfigurationError(f"{n_classes} classes not divisible into groups of {classes_per_experience}")
    order = np.random.default_rng(order_seed).permutation(n_classes)
    split_rng = np.random.default_rng(order_seed if split_seed is None else split_seed)
    train_rows, test_rows = {}, {}
    for c in range(n_classes):
        rows = np.flatnonzero(dataset.labels == c)
        if len(rows) < 2:
            raise DataError(f"class {c} has {len(rows)} sample(s); need at least 2")
        rows = split_rng.permutation(rows)
        n_train = _split_counts(len(rows), train_fraction)
        train_rows[c], test_rows[c] = rows[:n_train], rows[n_train:]
    experiences = []
    for k, start in enumerate(range(0, n_classes, classes_per_experience), start=1):
        group = [int(c) for c in order[start:start + classes_per_experience]]
        tr = np.sort(np.concatenate([train_rows[c] for c in group]))
        te = np.sort(np.concatenate([test_rows[c] for c in group]))
        experiences.append(Experience(k, dataset.take(tr), dataset.take(te), classes=frozenset(group)))
    return ScenarioStream(CIL, experiences)
