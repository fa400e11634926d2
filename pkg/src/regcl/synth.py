"""Synthetic drifting streams of binary feature vectors.

Each class has a prototype bit-vector. A sample is its class prototype with
every bit flipped independently with probability ``flip_noise``. In the DIL
generator both prototypes drift: before each new experience a
``drift_rate`` fraction of coordinates is redrawn from Bernoulli(density).

DIL malware differs from goodware only on a signature set covering a
``class_separation`` fraction of coordinates, and each malware sample keeps
every differing bit with probability ``signature_coverage`` (else it takes
the goodware value). Values below 1 make some malware look benign, which is
what gives an updated model something to flip.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, concat
from .errors import ConfigurationError
from .scenarios import Experience

# 2017-01-01 in days since the Unix epoch
DEFAULT_START_DAY = 17167


@dataclass(frozen=True)
class SynthConfig:
    feature_dim: int = 500
    experiences: int = 8
    samples_per_class: int = 50
    class_ratio: tuple = (9, 1)
    prototype_density: float = 0.05
    drift_rate: float = 0.05
    flip_noise: float = 0.01
    class_separation: float = 1.0
    drift_steps: int = 1
    signature_coverage: float = 1.0
    classes_total: int = 100
    classes_per_experience: int = 10
    window_days: int = 90
    start_day: int = DEFAULT_START_DAY

    def __post_init__(self):
        for name in ("prototype_density", "drift_rate", "flip_noise", "class_separation",
                     "signature_coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"synth.{name} must lie in [0, 1], got {v}")
        for name in ("feature_dim", "experiences", "samples_per_class", "classes_total",
                     "classes_per_experience", "window_days", "drift_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"synth.{name} must be positive")
        if self.samples_per_class < 2:
            raise ConfigurationError("synth.samples_per_class must be >= 2 for a train/test split")
        if len(self.class_ratio) != 2 or min(self.class_ratio) < 1:
            raise ConfigurationError("synth.class_ratio needs two positive integers")
        if self.classes_total % self.classes_per_experience:
            raise ConfigurationError("synth.classes_total must be divisible by synth.classes_per_experience")

    @property
    def cil_experiences(self):
        return self.classes_total // self.classes_per_experience


def _noisy_copies(rng, prototype, count, noise):
    flips = rng.random((count, prototype.size)) < noise
    return prototype[None, :] ^ flips


def _stratified_split(rng, per_class_blocks, fraction):
    train, test = [], []
    for x, y, t in per_class_blocks:
        n = len(y)
        n_train = min(max(int(round(fraction * n)), 1), n - 1)
        perm = rng.permutation(n)
        tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        train.append((x[tr], y[tr], None if t is None else t[tr]))
        test.append((x[te], y[te], None if t is None else t[te]))
    return train, test


def _to_dataset(blocks, class_count):
    x = np.concatenate([b[0] for b in blocks])
    y = np.concatenate([b[1] for b in blocks])
    ts = None if blocks[0][2] is None else np.concatenate([b[2] for b in blocks])
    return Dataset.from_dense(x, y, class_count=class_count, timestamps=ts)


def _dil_prototype_path(rng, cfg):
    """Prototype pairs (goodware, malware) for every drift sub-step.

    Malware equals goodware outside a fixed signature set covering a
    ``class_separation`` fraction of coordinates; inside it malware bits are
    drawn independently. Each experience is cut into ``drift_steps`` equal
    sub-windows and ``drift_rate * d`` coordinates are redrawn per experience,
    spread over the sub-steps. A redrawn coordinate takes one shared value for
    both classes, except that malware draws its own value on signature
    coordinates.
    """
    d = cfg.feature_dim
    p = cfg.prototype_density
    good = rng.random(d) < p
    signature = np.zeros(d, dtype=bool)
    signature[rng.choice(d, int(round(cfg.class_separation * d)), replace=False)] = True
    mal = good.copy()
    mal[signature] = rng.random(int(signature.sum())) < p
    total = int(round(cfg.drift_rate * d))
    per_step = np.diff(np.round(np.linspace(0, total, cfg.drift_steps + 1)).astype(int))
    path = []
    for k in range(cfg.experiences):
        for s in range(cfg.drift_steps):
            n = per_step[s]
            if k + s > 0 and n:
                coords = rng.choice(d, n, replace=False)
                values = rng.random(n) < p
                good[coords] = values
                mal[coords] = values
                own = coords[signature[coords]]
                mal[own] = rng.random(len(own)) < p
            path.append((good.copy(), mal.copy()))
    return path


def synth_dil_generate(cfg: SynthConfig, seed=0, train_fraction=0.8):
    """Binary goodware(0)/malware(1) stream with drifting prototypes."""
    rng = np.random.default_rng(seed)
    path = _dil_prototype_path(rng, cfg)
    counts = [cfg.samples_per_class * r for r in cfg.class_ratio]
    steps = cfg.drift_steps
    experiences = []
    for k in range(1, cfg.experiences + 1):
        lo = cfg.start_day + (k - 1) * cfg.window_days
        blocks = []
        for c in range(2):
            offset = np.sort(rng.integers(0, cfg.window_days, counts[c]))
            sub = offset * steps // cfg.window_days
            x = np.empty((counts[c], cfg.feature_dim), dtype=bool)
            for s in range(steps):
                rows = np.flatnonzero(sub == s)
                good, mal = path[(k - 1) * steps + s]
                if c == 0:
                    x[rows] = _noisy_copies(rng, good, len(rows), cfg.flip_noise)
                else:
                    base = np.broadcast_to(mal, (len(rows), cfg.feature_dim)).copy()
                    if cfg.signature_coverage < 1.0:
                        differ = np.flatnonzero(good != mal)
                        drop = rng.random((len(rows), len(differ))) >= cfg.signature_coverage
                        base[:, differ] = np.where(drop, good[differ], mal[differ])
                    x[rows] = base ^ (rng.random(base.shape) < cfg.flip_noise)
            blocks.append((x, np.full(counts[c], c), lo + offset))
        train, test = _stratified_split(rng, blocks, train_fraction)
        experiences.append(Experience(k, _to_dataset(train, 2), _to_dataset(test, 2),
                                      window=(lo, lo + cfg.window_days)))
    return experiences


def synth_cil_generate(cfg: SynthConfig, seed=0, order_seed=None, train_fraction=0.9):
    """Independent class prototypes; classes grouped into experiences by a seeded permutation.

    ``seed`` fixes the class contents, ``order_seed`` (default: ``seed``) the grouping.
    """
    rng = np.random.default_rng(seed)
    c_total, d = cfg.classes_total, cfg.feature_dim
    protos = rng.random((c_total, d)) < cfg.prototype_density
    blocks = []
    for c in range(c_total):
        x = _noisy_copies(rng, protos[c], cfg.samples_per_class, cfg.flip_noise)
        blocks.append((x, np.full(cfg.samples_per_class, c), None))
    train, test = _stratified_split(rng, blocks, train_fraction)
    order = np.random.default_rng(seed if order_seed is None else order_seed).permutation(c_total)
    experiences = []
    per = cfg.classes_per_experience
    for k, start in enumerate(range(0, c_total, per), start=1):
        group = sorted(int(c) for c in order[start:start + per])
        experiences.append(Experience(k, _to_dataset([train[c] for c in group], c_total),
                                      _to_dataset([test[c] for c in group], c_total),
                                      classes=frozenset(group)))
    return experiences


def materialize(experiences):
    """Flatten an experience list back into one dataset (train then test per experience)."""
    parts = []
    for e in experiences:
        parts.extend([e.train, e.test])
    return concat(parts)
