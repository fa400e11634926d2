from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference, max_relative_error, random_batch, sample_coords
from regcl.errors import ConfigurationError, ContractError
from regcl.nn import ClassMask, MlpModel, forward_logits, predict
from regcl.pct import PctConfig, fd_lm, focal_weight, pct_loss, pct_terms


def test_fd_lm_examples():
    loss, d = fd_lm(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert loss == 1.0 and d.tolist() == [1.0, -1.0]
    loss, d = fd_lm(np.ones(3), np.ones(3))
    assert loss == 0.0 and not d.any()
    with pytest.raises(ContractError):
        fd_lm(np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.lists(st.floats(-50, 50), min_size=3, max_size=3),
       st.floats(0.1, 10))
def test_fd_lm_is_quadratically_homogeneous(a, b, c):
    a, b = np.array(a), np.array(b)
    assert fd_lm(c * a, c * b)[0] == pytest.approx(c * c * fd_lm(a, b)[0], rel=1e-9, abs=1e-9)


def test_focal_weight_examples():
    assert focal_weight(1, 1, 1.0, 0.5) == 1.5
    assert focal_weight(0, 1, 1.0, 0.5) == 1.0
    assert [focal_weight(p, 1, 0.0, 1.0) for p in (0, 1)] == [0.0, 1.0]


def test_config_ranges():
    with pytest.raises(ConfigurationError, match="pct.beta"):
        PctConfig(enabled=True, beta=-1)
    with pytest.raises(ConfigurationError, match="pct.lambda"):
        PctConfig(enabled=True, lam=float("nan"))
    assert PctConfig(enabled=True, alpha=0, beta=0).is_noop
    assert PctConfig().is_noop and not PctConfig(enabled=True).is_noop


def _pair(seed, d=10, h=6, c=3):
    rng = np.random.default_rng(seed)
    m = MlpModel.init(d, c, hidden_dim=h, rng=rng)
    m.b1[...] = rng.uniform(0.05, 0.2, h)
    old = MlpModel(d, c, h, m.theta + rng.normal(0, 0.3, m.n_params)).snapshot()
    batch = random_batch(rng, 8, d, c, density=0.4)
    return rng, m, old, batch


def test_equal_parameters_give_zero():
    _, m, _, batch = _pair(0)
    loss, grad = pct_loss(m, m.snapshot(), batch, cfg=PctConfig(enabled=True))
    assert loss == 0.0 and not grad.any()


def test_beta_zero_reduces_to_alpha_times_mean_fdlm():
    _, m, old, batch = _pair(1)
    new_l, old_l = forward_logits(m, batch), forward_logits(old, batch)
    mean_fd = np.mean([fd_lm(a, b)[0] for a, b in zip(new_l, old_l)])
    loss, _ = pct_loss(m, old, batch, cfg=PctConfig(enabled=True, alpha=0.7, beta=0.0))
    assert loss == pytest.approx(0.7 * mean_fd, rel=1e-12)


def test_focal_weights_follow_old_correctness():
    _, m, old, batch = _pair(2)
    correct = predict(old, batch) == batch.labels
    new_l, old_l = forward_logits(m, batch), forward_logits(old, batch)
    per = np.array([fd_lm(a, b)[0] for a, b in zip(new_l, old_l)])
    expected = 2.0 * np.mean((1.0 + 0.5 * correct) * per)
    loss, _ = pct_loss(m, old, batch, cfg=PctConfig(enabled=True, lam=2.0))
    assert loss == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("seed", range(15))
def test_pct_gradient_matches_finite_differences(seed):
    rng, m, old, batch = _pair(seed, d=8 + seed, h=4 + seed % 4, c=2 + seed % 3)
    cfg = PctConfig(enabled=True, alpha=1.0, beta=0.5, lam=1.3)
    _, grad = pct_loss(m, old, batch, cfg=cfg)

    def f(theta):
        return pct_loss(MlpModel(m.input_dim, m.output_dim, m.hidden_dim, theta), old, batch, cfg=cfg)[0]

    numeric = central_difference(f, m.theta, h=1e-5, coords=sample_coords(rng, m.n_params, 50))
    assert max_relative_error(grad, numeric) < 1e-4


def test_strictly_increasing_in_beta():
    for seed in range(5):
        _, m, old, batch = _pair(seed)
        assert (predict(old, batch) == batch.labels).any()
        losses = [pct_loss(m, old, batch, cfg=PctConfig(enabled=True, beta=b))[0] for b in (0.0, 0.25, 0.5, 1.0)]
        assert all(a < b for a, b in zip(losses, losses[1:]))


def test_cil_ignores_logits_outside_old_classes():
    rng = np.random.default_rng(4)
    new = rng.normal(size=(5, 6))
    old = rng.normal(size=(5, 6))
    labels = np.array([0, 1, 2, 0, 1])
    mask = ClassMask.from_classes(6, [0, 1, 2])
    loss, dl = pct_terms(new, old, labels, PctConfig(enabled=True), mask)
    new2, old2 = new.copy(), old.copy()
    new2[:, 3:] += 100.0
    old2[:, 3:] -= 50.0
    loss2, dl2 = pct_terms(new2, old2, labels, PctConfig(enabled=True), mask)
    assert loss == loss2 and np.array_equal(dl, dl2)
    assert not dl[:, 3:].any()


def test_contract_violations():
    _, m, old, batch = _pair(0)
    with pytest.raises(ContractError):
        pct_loss(m, None, batch, cfg=PctConfig(enabled=True))
    with pytest.raises(ContractError):
        pct_loss(m, old, batch, cfg=PctConfig(enabled=False))
    loss, grad = pct_loss(m, old, batch, cfg=PctConfig(enabled=True, lam=0.0))
    assert loss == 0.0 and not grad.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
def test_loss_is_nonnegative(seed, alpha, beta, lam):
    _, m, old, batch = _pair(seed % 1000)
    loss, _ = pct_loss(m, old, batch, cfg=PctConfig(enabled=True, alpha=alpha, beta=beta, lam=lam))
    assert loss >= 0.0
