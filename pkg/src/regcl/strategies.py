"""Continual-learning strategies and the per-experience training loop.

Every strategy implements the same hooks, all no-ops on :class:`Strategy`:

``on_experience_start(model, experience, stream)``
``augment_training_set(train) -> train``
``extra_loss(model, batch) -> (loss, flat gradient or None)``
``transform_gradient(model, grad) -> grad``
``after_step(grad, delta)``  (only called when ``tracks_steps`` is set)
``on_experience_end(model, experience)``

A ``None`` gradient from ``extra_loss`` means "no contribution" and keeps the
plain fine-tuning path free of extra floating-point work.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset, concat
from .errors import ConfigurationError, ContractError
from .nn import (ClassMask, _views, apply_mask, backward, cross_entropy, forward_cache,
                 loss_and_grad, sgd_step, softmax)
from . import kernels
from .pct import PctConfig, pct_terms

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    hidden: int = 512


class Strategy:
    name = "naive"
    tracks_steps = False

    def on_experience_start(self, model, experience, stream):
        pass

    def augment_training_set(self, train):
        return train

    def extra_loss(self, model, batch):
        return 0.0, None

    def transform_gradient(self, model, grad):
        return grad

    def after_step(self, grad, delta):
        pass

    def on_experience_end(self, model, experience):
        pass


Naive = Strategy


class Cumulative(Strategy):
    name = "cumulative"

    def __init__(self):
        self.past = []

    def augment_training_set(self, train):
        return concat(self.past + [train])

    def on_experience_end(self, model, experience):
        self.past.append(experience.train)


# --------------------------------------------------------------------------
# replay
# --------------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity store; each experience gets ``capacity // k_total`` slots."""

    def __init__(self, capacity, k_total, seed=0):
        if capacity < 0 or k_total < 1:
            raise ConfigurationError("replay capacity must be >= 0 and k_total >= 1")
        self.capacity = int(capacity)
        self.k_total = int(k_total)
        self.quota = self.capacity // self.k_total
        self.seed = seed
        self.stored: Dataset | None = None
        self.sources = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return 0 if self.stored is None else len(self.stored)

    def per_experience(self):
        ids, counts = np.unique(self.sources, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))


def _proportional_allocation(counts, total):
    """Largest-remainder split of ``total`` proportional to ``counts``; ties go to lower index."""
    counts = np.asarray(counts)
    exact = total * counts / counts.sum()
    alloc = np.floor(exact).astype(np.int64)
    remainder = exact - alloc
    order = sorted(range(len(counts)), key=lambda i: (-remainder[i], i))
    for i in order[:total - int(alloc.sum())]:
        alloc[i] += 1
    return alloc


def replay_update(buffer, experience, seed=None):
    """Append this experience's quota, stratified by class; never evicts."""
    train = experience.train
    rng = np.random.default_rng([buffer.seed if seed is None else seed, experience.id])
    room = buffer.capacity - len(buffer)
    quota = min(buffer.quota, room)
    if quota <= 0:
        return buffer
    n = len(train)
    if n <= quota:
        rows = np.arange(n)
    else:
        classes, counts = np.unique(train.labels, return_counts=True)
        if len(classes) >= 2:
            alloc = _proportional_allocation(counts, quota)
            picks = [rng.choice(np.flatnonzero(train.labels == c), a, replace=False)
                     for c, a in zip(classes, alloc) if a]
            rows = np.sort(np.concatenate(picks))
        else:
            rows = np.sort(rng.choice(n, quota, replace=False))
    chosen = train.take(rows)
    buffer.stored = chosen if buffer.stored is None else concat([buffer.stored, chosen])
    buffer.sources = np.concatenate([buffer.sources, np.full(len(rows), experience.id)])
    return buffer


class Replay(Strategy):
    name = "replay"

    def __init__(self, capacity, k_total, seed=0):
        self.buffer = ReplayBuffer(capacity, k_total, seed)

    def augment_training_set(self, train):
        if not len(self.buffer):
            return train
        return concat([train, self.buffer.stored])

    def on_experience_end(self, model, experience):
        replay_update(self.buffer, experience)


# --------------------------------------------------------------------------
# A-GEM
# --------------------------------------------------------------------------

def agem_project(grad, ref_grad):
    """Remove the component of ``grad`` that conflicts with ``ref_grad``."""
    dot = float(grad @ ref_grad)
    if dot >= 0.0:
        return grad
    ref_sq = float(ref_grad @ ref_grad)
    if ref_sq <= 0.0:
        return grad
    return grad - (dot / ref_sq) * ref_grad


class Agem(Strategy):
    name = "agem"

    def __init__(self, capacity, k_total, seed=0, ref_batch_size=32):
        self.memory = ReplayBuffer(capacity, k_total, seed)
        self.ref_batch_size = ref_batch_size
        self.rng = np.random.default_rng([seed, 0xA6E])
        self.mask = None

    def on_experience_start(self, model, experience, stream):
        self.mask = ClassMask.from_classes(model.output_dim, stream.seen_classes(experience.id))

    def transform_gradient(self, model, grad):
        m = len(self.memory)
        if m == 0:
            return grad
        rows = self.rng.choice(m, min(self.ref_batch_size, m), replace=False)
        ref = loss_and_grad(model, self.memory.stored.take(rows), mask=self.mask)[1]
        return agem_project(grad, ref)

    def on_experience_end(self, model, experience):
        replay_update(self.memory, experience)


# --------------------------------------------------------------------------
# EWC
# --------------------------------------------------------------------------

def ewc_fisher(model, train, mask=None, sample_cap=1000, seed=0, chunk=256):
    """Empirical diagonal Fisher: mean squared per-sample gradient of log p(y|x).

    Inputs are binary, so the squared first-layer gradient of one sample is
    ``dpre**2`` on its active columns; the whole estimate is assembled from
    batched quantities without per-sample backward passes.
    """
    if mask is None:
        mask = ClassMask.all(model.output_dim)
    n = len(train)
    if n > sample_cap:
        rows = np.sort(np.random.default_rng(seed).choice(n, sample_cap, replace=False))
        train = train.take(rows)
        n = sample_cap
    fisher = np.zeros(model.n_params)
    fw1t, fb1, fw2, fb2 = _views(fisher, *model.shape)
    for start in range(0, n, chunk):
        part = train.take(np.arange(start, min(start + chunk, n)))
        pre, hidden, logits = forward_cache(model, part)
        dl = softmax(apply_mask(logits, mask))
        dl[np.arange(len(part)), part.labels] -= 1.0
        dl_sq = dl * dl
        fw2 += dl_sq.T @ (hidden * hidden)
        fb2 += dl_sq.sum(axis=0)
        dpre = (dl @ model.w2) * (pre > 0.0)
        dpre_sq = dpre * dpre
        fb1 += dpre_sq.sum(axis=0)
        kernels.sparse_outer_accumulate(part.indptr, part.indices, dpre_sq, fw1t)
    fisher /= n
    return fisher


@dataclass
class EwcState:
    lam: float = 0.001
    anchors: list = None

    def __post_init__(self):
        if self.anchors is None:
            self.anchors = []


def ewc_penalty(model, state):
    theta = model.theta
    grad = np.zeros_like(theta)
    loss = 0.0
    for star, fisher in state.anchors:
        if star.shape != theta.shape or fisher.shape != theta.shape:
            raise ContractError("EWC anchor length does not match the model")
        diff = theta - star
        fd = fisher * diff
        loss += 0.5 * state.lam * float(fd @ diff)
        grad += state.lam * fd
    return loss, grad


class Ewc(Strategy):
    name = "ewc"

    def __init__(self, lam=0.001, fisher_samples=1000, seed=0):
        self.state = EwcState(lam)
        self.fisher_samples = fisher_samples
        self.seed = seed
        self.mask = None

    def on_experience_start(self, model, experience, stream):
        self.mask = ClassMask.from_classes(model.output_dim, stream.seen_classes(experience.id))

    def extra_loss(self, model, batch):
        if not self.state.anchors:
            return 0.0, None
        return ewc_penalty(model, self.state)

    def on_experience_end(self, model, experience):
        fisher = ewc_fisher(model, experience.train, self.mask, self.fisher_samples,
                            seed=[self.seed, experience.id])
        self.state.anchors.append((model.flatten(), fisher))


# --------------------------------------------------------------------------
# SI
# --------------------------------------------------------------------------

class SiState:
    def __init__(self, n_params, lam=0.001, eps=0.1):
        self.lam = lam
        self.eps = eps
        self.omega = np.zeros(n_params)
        self.importance = np.zeros(n_params)
        self.theta_star = None


def si_accumulate(state, grad, delta):
    state.omega -= grad * delta


def si_consolidate(state, model):
    theta = model.theta
    if state.theta_star is None:
        state.theta_star = np.zeros_like(theta)
    moved = theta - state.theta_star
    state.importance += np.maximum(state.omega, 0.0) / (moved * moved + state.eps)
    state.theta_star = theta.copy()
    state.omega[...] = 0.0


def si_penalty(model, state):
    if state.theta_star is None:
        return 0.0, np.zeros(model.n_params)
    diff = model.theta - state.theta_star
    wd = state.importance * diff
    return state.lam * float(wd @ diff), 2.0 * state.lam * wd


class Si(Strategy):
    name = "si"
    tracks_steps = True

    def __init__(self, n_params, lam=0.001, eps=0.1):
        self.state = SiState(n_params, lam, eps)
        self.consolidated = False

    def on_experience_start(self, model, experience, stream):
        if self.state.theta_star is None:
            self.state.theta_star = model.flatten()

    def extra_loss(self, model, batch):
        if not self.consolidated:
            return 0.0, None
        return si_penalty(model, self.state)

    def after_step(self, grad, delta):
        si_accumulate(self.state, grad, delta)

    def on_experience_end(self, model, experience):
        si_consolidate(self.state, model)
        self.consolidated = True


# --------------------------------------------------------------------------
# LwF
# --------------------------------------------------------------------------

def lwf_distill(new_logits, old_logits, temperature=1.0, old_class_mask=None):
    """T^2-scaled cross-entropy from softened old to softened new outputs.

    Restricted to ``old_class_mask`` columns; returns (mean loss, dlogits).
    """
    new_logits = np.atleast_2d(np.asarray(new_logits, dtype=np.float64))
    old_logits = np.atleast_2d(np.asarray(old_logits, dtype=np.float64))
    cols = np.ones(new_logits.shape[1], bool) if old_class_mask is None else old_class_mask.active
    t = float(temperature)
    p_old = softmax(old_logits[:, cols] / t)
    z = new_logits[:, cols] / t
    z = z - z.max(axis=1, keepdims=True)
    log_q = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(new_logits)
    loss = t * t * float(-(p_old * log_q).sum()) / n
    dlogits = np.zeros_like(new_logits)
    dlogits[:, cols] = t * (np.exp(log_q) - p_old) / n
    return loss, dlogits


class Lwf(Strategy):
    name = "lwf"

    def __init__(self, alpha=1.0, temperature=1.0):
        self.alpha = alpha
        self.temperature = temperature
        self.snapshot = None
        self.old_mask = None

    def on_experience_start(self, model, experience, stream):
        if experience.id > 1:
            self.old_mask = ClassMask.from_classes(model.output_dim, stream.seen_classes(experience.id - 1))

    def extra_loss(self, model, batch):
        if self.snapshot is None:
            return 0.0, None
        old_logits = forward_cache(self.snapshot, batch)[2]
        pre, hidden, logits = forward_cache(model, batch)
        loss, dl = lwf_distill(logits, old_logits, self.temperature, self.old_mask)
        return self.alpha * loss, backward(model, batch, pre, hidden, self.alpha * dl)

    def on_experience_end(self, model, experience):
        self.snapshot = model.snapshot(experience.id)


# --------------------------------------------------------------------------
# composition
# --------------------------------------------------------------------------

class Composite(Strategy):
    """Several strategies applied together, hooks run in listed order."""

    def __init__(self, parts):
        self.parts = list(parts)
        self.name = "+".join(p.name for p in self.parts)
        self.tracks_steps = any(p.tracks_steps for p in self.parts)

    def on_experience_start(self, model, experience, stream):
        for p in self.parts:
            p.on_experience_start(model, experience, stream)

    def augment_training_set(self, train):
        for p in self.parts:
            train = p.augment_training_set(train)
        return train

    def extra_loss(self, model, batch):
        total, grad = 0.0, None
        for p in self.parts:
            loss, g = p.extra_loss(model, batch)
            total += loss
            if g is not None:
                grad = g if grad is None else grad + g
        return total, grad

    def transform_gradient(self, model, grad):
        for p in self.parts:
            grad = p.transform_gradient(model, grad)
        return grad

    def after_step(self, grad, delta):
        for p in self.parts:
            if p.tracks_steps:
                p.after_step(grad, delta)

    def on_experience_end(self, model, experience):
        for p in self.parts:
            p.on_experience_end(model, experience)


STRATEGY_NAMES = ("naive", "cumulative", "replay", "agem", "ewc", "si", "lwf")


def build_strategy(names, n_params, k_total, scenario="DIL", seed=0, replay_capacity=None,
                   agem_capacity=None, agem_batch=32, ewc_lambda=0.001, fisher_samples=1000,
                   si_lambda=0.001, si_eps=0.1, lwf_alpha=1.0, lwf_temperature=1.0):
    """``names`` is one name or several joined by ``+`` (e.g. ``"si+replay"``)."""
    default_cap = 200 if scenario == "DIL" else 1000
    parts = []
    for name in names.lower().split("+"):
        name = name.strip()
        if name == "naive":
            continue
        if name == "cumulative":
            parts.append(Cumulative())
        elif name == "replay":
            parts.append(Replay(replay_capacity or default_cap, k_total, seed))
        elif name == "agem":
            parts.append(Agem(agem_capacity or default_cap, k_total, seed, agem_batch))
        elif name == "ewc":
            parts.append(Ewc(ewc_lambda, fisher_samples, seed))
        elif name == "si":
            parts.append(Si(n_params, si_lambda, si_eps))
        elif name == "lwf":
            parts.append(Lwf(lwf_alpha, lwf_temperature))
        else:
            raise ConfigurationError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGY_NAMES)}")
    if not parts:
        return Strategy()
    if len(parts) == 1:
        return parts[0]
    return Composite(parts)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def run_experience(cfg, strategy, pct_cfg, model, opt, experience, stream, rng,
                   old_snapshot=None, seed=0):
    """Train ``model`` on one experience in place; returns (model, snapshot).

    ``rng`` drives the per-epoch shuffles. ``old_snapshot`` is the model
    emitted after the previous experience; PCT is skipped without it.
    """
    k = experience.id
    seen = stream.seen_classes(k)
    mask = ClassMask.from_classes(model.output_dim, seen)
    opt.reset()
    strategy.on_experience_start(model, experience, stream)
    train = strategy.augment_training_set(experience.train)
    pct_cfg = pct_cfg or PctConfig()
    use_pct = old_snapshot is not None and not pct_cfg.is_noop
    old_mask = old_snapshot.mask if use_pct else None
    n = len(train)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = train.take(order[start:start + cfg.batch_size])
            pre, hidden, logits = forward_cache(model, batch)
            if use_pct:
                old_logits = forward_cache(old_snapshot, batch)[2]
                pct_val, pct_dl = pct_terms(logits, old_logits, batch.labels, pct_cfg, old_mask)
            loss, dlogits = cross_entropy(apply_mask(logits, mask), batch.labels, mask)
            if use_pct:
                loss += pct_val
                dlogits += pct_dl
            grad = backward(model, batch, pre, hidden, dlogits)
            extra, extra_grad = strategy.extra_loss(model, batch)
            if extra_grad is not None:
                loss += extra
                grad += extra_grad
            grad = strategy.transform_gradient(model, grad)
            if strategy.tracks_steps:
                before = model.flatten()
                sgd_step(model, opt, grad)
                strategy.after_step(grad, model.theta - before)
            else:
                sgd_step(model, opt, grad)
            total += loss * len(batch)
        log.debug("exp %d epoch %d loss %.6f", k, epoch + 1, total / n)
    strategy.on_experience_end(model, experience)
    return model, model.snapshot(k, seed, stream.kind, seen)
