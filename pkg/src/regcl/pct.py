"""Positive-congruent training: focal distillation with logit matching.

The penalty pulls the new model's logits toward the previous model's logits,
with an extra weight ``beta`` on samples the previous model got right::

    loss = lam / B * sum_i (alpha + beta * [old(x_i) == y_i]) * 0.5 * ||f(x_i) - f_old(x_i)||^2
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .nn import ClassMask, backward, forward_cache


@dataclass(frozen=True)
class PctConfig:
    enabled: bool = False
    alpha: float = 1.0
    beta: float = 0.5
    lam: float = 1.0

    def __post_init__(self):
        for key, v in (("pct.alpha", self.alpha), ("pct.beta", self.beta), ("pct.lambda", self.lam)):
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"{key} must be a finite non-negative number, got {v}")

    @property
    def is_noop(self):
        return not self.enabled or self.lam == 0 or (self.alpha == 0 and self.beta == 0)


def fd_lm(new_logits, old_logits):
    new_logits = np.asarray(new_logits, dtype=np.float64)
    old_logits = np.asarray(old_logits, dtype=np.float64)
    if new_logits.shape != old_logits.shape:
        raise ContractError(f"logit shapes differ: {new_logits.shape} vs {old_logits.shape}")
    diff = new_logits - old_logits
    return 0.5 * float(diff @ diff), diff


def focal_weight(old_prediction, true_label, alpha, beta):
    return alpha + beta if old_prediction == true_label else alpha


def pct_terms(new_logits, old_logits, labels, cfg, old_mask):
    """Batch loss and dlogits given both models' raw logits.

    Only the columns active in ``old_mask`` are compared; the old model's
    prediction is its arg-max over those columns.
    """
    cols = old_mask.active
    old = old_logits[:, cols]
    diff = new_logits[:, cols] - old
    old_pred = np.flatnonzero(cols)[np.argmax(old, axis=1)]
    w = cfg.alpha + cfg.beta * (old_pred == np.asarray(labels))
    n = len(w)
    loss = cfg.lam * float(np.sum(w * 0.5 * np.einsum("ij,ij->i", diff, diff))) / n
    dlogits = np.zeros_like(new_logits)
    dlogits[:, cols] = (cfg.lam / n) * w[:, None] * diff
    return loss, dlogits


def pct_loss(model, old_snapshot, batch, labels=None, cfg=None, class_mask_old=None):
    """PCT penalty of ``model`` against a frozen snapshot, with its exact gradient."""
    cfg = cfg or PctConfig(enabled=True)
    if not cfg.enabled:
        raise ContractError("pct_loss called with PCT disabled")
    if old_snapshot is None:
        raise ContractError("PCT needs a previous snapshot")
    if cfg.is_noop:
        return 0.0, np.zeros(model.n_params)
    labels = batch.labels if labels is None else labels
    if class_mask_old is None:
        class_mask_old = getattr(old_snapshot, "mask", None)
    if class_mask_old is None:
        class_mask_old = ClassMask.all(model.output_dim)
    old_logits = forward_cache(old_snapshot, batch)[2]
    pre, hidden, logits = forward_cache(model, batch)
    loss, dlogits = pct_terms(logits, old_logits, labels, cfg, class_mask_old)
    return loss, backward(model, batch, pre, hidden, dlogits)
