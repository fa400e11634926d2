"""One-hidden-layer ReLU classifier with hand-written backprop and momentum SGD.

Parameters live in one flat float64 vector holding the first-layer weights
input-major (``w1t``, shape input x hidden, so a sparse row gathers contiguous
memory), then ``b1``, ``w2`` (output x hidden) and ``b2``. Named arrays are
views into it, so flattening is a copy and gradients share the layout.
``w1`` is exposed as the usual hidden x input view. Snapshot files store
``w1`` row-major in hidden x input order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, DataError, NumericError

SNAPSHOT_MAGIC = b"RCL1"
SNAPSHOT_VERSION = 1
SCENARIO_CODES = {"DIL": 0, "CIL": 1}

# masked logits; exp() of it underflows to exactly 0
MASKED = -np.inf


def param_count(input_dim, hidden_dim, output_dim):
    return hidden_dim * (input_dim + 1) + output_dim * (hidden_dim + 1)


def _views(theta, input_dim, hidden_dim, output_dim):
    i = hidden_dim * input_dim
    w1t = theta[:i].reshape(input_dim, hidden_dim)
    b1 = theta[i:i + hidden_dim]
    i += hidden_dim
    w2 = theta[i:i + output_dim * hidden_dim].reshape(output_dim, hidden_dim)
    i += output_dim * hidden_dim
    b2 = theta[i:i + output_dim]
    return w1t, b1, w2, b2


def _to_file_order(theta, input_dim, hidden_dim, output_dim):
    w1t, b1, w2, b2 = _views(theta, input_dim, hidden_dim, output_dim)
    return np.concatenate([w1t.T.ravel(), b1, w2.ravel(), b2])


def _from_file_order(payload, input_dim, hidden_dim, output_dim):
    i = hidden_dim * input_dim
    w1 = payload[:i].reshape(hidden_dim, input_dim)
    return np.concatenate([w1.T.ravel(), payload[i:]])


@dataclass
class ClassMask:
    active: np.ndarray

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        if not self.active.any():
            raise ConfigurationError("class mask has no active class")

    @classmethod
    def all(cls, n):
        return cls(np.ones(n, dtype=bool))

    @classmethod
    def from_classes(cls, n, classes):
        active = np.zeros(n, dtype=bool)
        active[list(classes)] = True
        return cls(active)

    @property
    def classes(self):
        return tuple(int(c) for c in np.flatnonzero(self.active))

    def __len__(self):
        return len(self.active)


class MlpModel:
    def __init__(self, input_dim, output_dim, hidden_dim=512, theta=None):
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.output_dim = int(output_dim)
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ConfigurationError("layer sizes must be positive")
        n = param_count(self.input_dim, self.hidden_dim, self.output_dim)
        if theta is None:
            theta = np.zeros(n)
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise ConfigurationError(f"expected {n} parameters, got {theta.shape}")
        self.theta = theta
        self.w1t, self.b1, self.w2, self.b2 = _views(theta, self.input_dim, self.hidden_dim, self.output_dim)

    @property
    def w1(self):
        return self.w1t.T

    @classmethod
    def init(cls, input_dim, output_dim, hidden_dim=512, rng=None):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        model = cls(input_dim, output_dim, hidden_dim)
        for w in (model.w1, model.w2):
            fan_out, fan_in = w.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w[...] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        return model

    @property
    def n_params(self):
        return self.theta.size

    @property
    def shape(self):
        return self.input_dim, self.hidden_dim, self.output_dim

    def flatten(self):
        return self.theta.copy()

    def unflatten(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != self.theta.shape:
            raise ContractError("parameter vector length mismatch")
        self.theta[...] = vector

    def copy(self):
        return MlpModel(self.input_dim, self.output_dim, self.hidden_dim, self.theta)

    def snapshot(self, experience_id=0, seed=0, scenario="DIL", seen_classes=None):
        if seen_classes is None:
            seen_classes = range(self.output_dim)
        return ModelSnapshot(self.theta, self.input_dim, self.hidden_dim, self.output_dim,
                             int(experience_id), int(seed), scenario, tuple(sorted(int(c) for c in seen_classes)))


@dataclass(frozen=True)
class ModelSnapshot:
    theta: np.ndarray = field(repr=False)
    input_dim: int
    hidden_dim: int
    output_dim: int
    experience_id: int = 0
    seed: int = 0
    scenario: str = "DIL"
    seen_classes: tuple = ()

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.shape != (param_count(self.input_dim, self.hidden_dim, self.output_dim),):
            raise ContractError("snapshot parameter length mismatch")
        if self.scenario not in SCENARIO_CODES:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        w1t, b1, w2, b2 = _views(theta, self.input_dim, self.hidden_dim, self.output_dim)
        for name, arr in (("w1t", w1t), ("w1", w1t.T), ("b1", b1), ("w2", w2), ("b2", b2)):
            object.__setattr__(self, name, arr)

    @property
    def shape(self):
        return self.input_dim, self.hidden_dim, self.output_dim

    @property
    def n_params(self):
        return self.theta.size

    @property
    def mask(self):
        return ClassMask.from_classes(self.output_dim, self.seen_classes)

    def to_model(self):
        return MlpModel(self.input_dim, self.output_dim, self.hidden_dim, self.theta)

    def to_bytes(self):
        header = struct.pack(
            "<4s8I", SNAPSHOT_MAGIC, SNAPSHOT_VERSION, SCENARIO_CODES[self.scenario],
            self.experience_id, self.seed, self.input_dim, self.hidden_dim, self.output_dim,
            len(self.seen_classes),
        )
        classes = struct.pack(f"<{len(self.seen_classes)}I", *self.seen_classes)
        payload = _to_file_order(self.theta, self.input_dim, self.hidden_dim, self.output_dim)
        return header + classes + payload.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob):
        head = struct.calcsize("<4s8I")
        if len(blob) < head:
            raise DataError("snapshot truncated")
        magic, version, scen, exp_id, seed, d_in, d_h, d_out, n_seen = struct.unpack_from("<4s8I", blob)
        if magic != SNAPSHOT_MAGIC:
            raise DataError(f"bad snapshot magic {magic!r}")
        if version != SNAPSHOT_VERSION:
            raise DataError(f"unsupported snapshot version {version}")
        scenario = {v: k for k, v in SCENARIO_CODES.items()}.get(scen)
        if scenario is None:
            raise DataError(f"bad scenario code {scen}")
        seen = struct.unpack_from(f"<{n_seen}I", blob, head)
        offset = head + 4 * n_seen
        n = param_count(d_in, d_h, d_out)
        if len(blob) != offset + 8 * n:
            raise DataError("snapshot payload size mismatch")
        payload = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64)
        theta = _from_file_order(payload, d_in, d_h, d_out)
        return cls(theta, d_in, d_h, d_out, exp_id, seed, scenario, tuple(seen))

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class OptimizerState:
    velocity: np.ndarray
    learning_rate: float = 1e-3
    momentum: float = 0.9

    @classmethod
    def for_model(cls, model, learning_rate=1e-3, momentum=0.9):
        return cls(np.zeros(model.n_params), learning_rate, momentum)

    def reset(self):
        self.velocity[...] = 0.0


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _check_batch(model, batch):
    if batch.feature_dim != model.input_dim:
        raise ConfigurationError(f"batch has {batch.feature_dim} features, model expects {model.input_dim}")
    if len(batch.indices) and batch.indices.max() >= model.input_dim:
        raise DataError("feature index out of range")


def _check_mask(model, mask):
    if mask is None:
        return ClassMask.all(model.output_dim)
    if len(mask) != model.output_dim:
        raise ConfigurationError(f"mask covers {len(mask)} classes, model has {model.output_dim}")
    return mask


def forward_cache(model, batch):
    """Unmasked forward pass. Returns (pre-activation, hidden, logits)."""
    _check_batch(model, batch)
    pre = kernels.sparse_affine(batch.indptr, batch.indices, model.w1t, model.b1)
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ model.w2.T + model.b2
    return pre, hidden, logits


def apply_mask(logits, mask):
    if not mask.active.all():
        logits[:, ~mask.active] = MASKED
    return logits


def forward_logits(model, batch, mask=None):
    """Logits with inactive classes set to -inf. Works on models and snapshots."""
    mask = _check_mask(model, mask)
    return apply_mask(forward_cache(model, batch)[2], mask)


def backward(model, batch, pre, hidden, dlogits):
    """Flat gradient of a loss whose derivative w.r.t. the logits is ``dlogits``."""
    grad = np.zeros(model.n_params)
    gw1t, gb1, gw2, gb2 = _views(grad, *model.shape)
    gw2[...] = dlogits.T @ hidden
    gb2[...] = dlogits.sum(axis=0)
    dpre = dlogits @ model.w2
    dpre *= pre > 0.0
    gb1[...] = dpre.sum(axis=0)
    kernels.sparse_outer_accumulate(batch.indptr, batch.indices, dpre, gw1t)
    return grad


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels, mask):
    """Mean masked cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    if not mask.active[labels].all():
        raise DataError("label outside the active class mask")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1)
    rows = np.arange(len(labels))
    loss = float(np.mean(np.log(s) - z[rows, labels]))
    dlogits = e / s[:, None]
    dlogits[rows, labels] -= 1.0
    dlogits /= len(labels)
    return loss, dlogits


def loss_and_grad(model, batch, labels=None, mask=None):
    mask = _check_mask(model, mask)
    labels = batch.labels if labels is None else labels
    pre, hidden, logits = forward_cache(model, batch)
    loss, dlogits = cross_entropy(apply_mask(logits, mask), labels, mask)
    return loss, backward(model, batch, pre, hidden, dlogits)


def sgd_step(model, opt, grad):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.theta.shape:
        raise ContractError(f"gradient length {grad.shape} != parameter count {model.n_params}")
    if not np.isfinite(grad).all():
        raise NumericError("non-finite gradient; step refused")
    kernels.momentum_step(model.theta, opt.velocity, grad, opt.learning_rate, opt.momentum)
    return model


def predict(model, batch, mask=None):
    """Arg-max over active classes; ties go to the smallest class id."""
    if mask is None and isinstance(model, ModelSnapshot):
        mask = model.mask
    return np.argmax(forward_logits(model, batch, mask), axis=1)
