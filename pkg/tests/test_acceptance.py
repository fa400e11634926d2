"""Acceptance criteria 1-11.

Every test records a one-line verdict that is printed in the pytest terminal
summary (section "acceptance criteria") and then asserts it. The trend
criteria (5-9) train full-size models on the synthetic benchmarks and take
several minutes; they carry the ``slow`` marker but run by default.
"""
from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import brute_force_flips, central_difference, max_relative_error, random_batch, sample_coords
from regcl.config import build_config
from regcl.harness import run
from regcl.metrics import backward_nfr, flip_rates, forward_nfr, make_record
from regcl.nn import ClassMask, MlpModel, loss_and_grad
from regcl.pct import PctConfig, pct_loss
from regcl.strategies import EwcState, Lwf, SiState, agem_project, ewc_penalty, si_penalty

# synthetic DIL benchmark: d=500, K=8, drift 0.1, noise 0.01, 9:1 goodware:malware, 5 seeds
DIL_BENCH = {
    "scenario": "DIL", "synth.feature_dim": 500, "synth.experiences": 8, "synth.drift_rate": 0.1,
    "synth.flip_noise": 0.01, "synth.class_ratio": "9:1", "synth.samples_per_class": 100,
    "synth.class_separation": 0.2, "synth.signature_coverage": 0.5, "run.seeds": "0,1,2,3,4",
}
PCT_ON = {"pct.enabled": "true", "pct.alpha": "1", "pct.beta": "0.5", "pct.lambda": "1"}
DIL_RUNS = {
    "naive": {},
    "naive+pct": PCT_ON,
    "si": {"strategy.name": "si"},
    "si+pct": {"strategy.name": "si", **PCT_ON},
    "replay+pct": {"strategy.name": "replay", **PCT_ON},
    "naive+pct(0.1,0.1)": {**PCT_ON, "pct.alpha": "0.1", "pct.beta": "0.1"},
}

# synthetic CIL benchmark: 50 classes in 5 experiences of 10; the data is pinned and
# the five master seeds give five class orders
CIL_BENCH = {
    "scenario": "CIL", "synth.feature_dim": 500, "synth.classes_total": 50, "synth.classes_per_experience": 10,
    "synth.samples_per_class": 50, "synth.flip_noise": 0.25, "data.seed": "0", "run.seeds": "0,1,2,3,4",
}
CIL_RUNS = {
    "naive": {},
    "si+replay": {"strategy.name": "si+replay"},
    "si+replay+pct": {"strategy.name": "si+replay", **PCT_ON},
    "cumulative": {"strategy.name": "cumulative"},
}

_CACHE = {}


def _runs(base, runs, tmp_path_factory, tag):
    if tag not in _CACHE:
        root = tmp_path_factory.mktemp(tag)
        _CACHE[tag] = {name: run(build_config({**base, **extra}), root / name.replace("+", "_"))
                       for name, extra in runs.items()}
    return _CACHE[tag]


@pytest.fixture(scope="module")
def dil(tmp_path_factory):
    return _runs(DIL_BENCH, DIL_RUNS, tmp_path_factory, "dil")


@pytest.fixture(scope="module")
def cil(tmp_path_factory):
    return _runs(CIL_BENCH, CIL_RUNS, tmp_path_factory, "cil")


def verdict(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def mean(m, metric, mode="backward"):
    return m.overall(metric, mode)


# --------------------------------------------------------------------------
# 1. exact accuracy/flip identity on every (k, j) pair of every run
# --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_01_identity(dil, cil):
    worst, pairs = 0.0, 0
    for m in list(dil.values()) + list(cil.values()):
        assert m.ok
        for s in m.seeds:
            for (k, j), r in s.records.items():
                if not r.has_old:
                    continue
                residual = abs((r.old_accuracy - r.accuracy) - (r.nfr() - r.pfr()))
                worst = max(worst, residual)
                pairs += 1
    verdict(1, pairs > 0 and worst <= 1e-12, f"max residual {worst:.2e} over {pairs} (k, j) pairs")


# --------------------------------------------------------------------------
# 2. gradient oracles
# --------------------------------------------------------------------------

def _fd_instances(n=15):
    for i in range(n):
        rng = np.random.default_rng(1000 + i)
        d, h, c = 6 + i % 5, 3 + i % 4, 2 + i % 3
        m = MlpModel.init(d, c, hidden_dim=h, rng=rng)
        m.b1[...] = rng.uniform(0.05, 0.2, h)
        batch = random_batch(rng, 5 + i % 4, d, c, density=0.4)
        yield rng, m, batch


def _like(m, theta):
    return MlpModel(m.input_dim, m.output_dim, m.hidden_dim, theta)


def _fd_error(rng, m, grad, fn):
    numeric = central_difference(fn, m.theta, h=1e-5, coords=sample_coords(rng, m.n_params, 40))
    return max_relative_error(grad, numeric)


def test_criterion_02_gradient_oracles():
    t0 = time.perf_counter()
    errors = {}
    for rng, m, batch in _fd_instances():
        mask = ClassMask.from_classes(m.output_dim, range(m.output_dim))
        _, g = loss_and_grad(m, batch, mask=mask)
        errors.setdefault("ce", []).append(_fd_error(rng, m, g, lambda t: loss_and_grad(_like(m, t), batch, mask=mask)[0]))

        old = _like(m, m.theta + rng.normal(0, 0.3, m.n_params)).snapshot()
        cfg = PctConfig(enabled=True, alpha=1.0, beta=0.5, lam=1.0)
        _, g = pct_loss(m, old, batch, cfg=cfg)
        errors.setdefault("pct", []).append(_fd_error(rng, m, g, lambda t: pct_loss(_like(m, t), old, batch, cfg=cfg)[0]))

        ewc = EwcState(0.5, [(m.flatten() + rng.normal(0, 0.1, m.n_params), rng.random(m.n_params))])
        _, g = ewc_penalty(m, ewc)
        errors.setdefault("ewc", []).append(_fd_error(rng, m, g, lambda t: ewc_penalty(_like(m, t), ewc)[0]))

        si = SiState(m.n_params, lam=0.5)
        si.importance = rng.random(m.n_params)
        si.theta_star = m.flatten() + rng.normal(0, 0.1, m.n_params)
        _, g = si_penalty(m, si)
        errors.setdefault("si", []).append(_fd_error(rng, m, g, lambda t: si_penalty(_like(m, t), si)[0]))

        lwf = Lwf(alpha=1.0, temperature=2.0)
        lwf.snapshot, lwf.old_mask = old, ClassMask.from_classes(m.output_dim, range(m.output_dim))
        _, g = lwf.extra_loss(m, batch)
        errors.setdefault("lwf", []).append(_fd_error(rng, m, g, lambda t: lwf.extra_loss(_like(m, t), batch)[0]))
    elapsed = time.perf_counter() - t0
    worst = {k: max(v) for k, v in errors.items()}
    ok = all(len(v) >= 15 for v in errors.values()) and max(worst.values()) < 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, ok, f"max rel. error {detail}; {len(errors['ce'])} instances each; {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 3. flip counts against brute force
# --------------------------------------------------------------------------

def test_criterion_03_flip_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(1, 51))
        old, new, labels = (rng.integers(0, 4, n) for _ in range(3))
        for cls in (None, 0, 1, 2, 3):
            fr = flip_rates(old, new, labels, cls)
            nf, pf, cnt = brute_force_flips(old.tolist(), new.tolist(), labels.tolist(), cls)
            exact = (fr.nf, fr.pf, fr.n) == (nf, pf, cnt)
            if cnt:
                exact &= fr.nfr == nf / cnt and fr.pfr == pf / cnt
            mismatches += not exact
    elapsed = time.perf_counter() - t0
    verdict(3, mismatches == 0 and elapsed < 5, f"{mismatches} mismatches over 200 triples; {elapsed:.2f}s")


# --------------------------------------------------------------------------
# 4. A-GEM projection
# --------------------------------------------------------------------------

def test_criterion_04_agem_projection():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_dot, passthrough_ok = np.inf, True
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        g, r = rng.normal(size=n), rng.normal(size=n)
        out = agem_project(g, r)
        worst_dot = min(worst_dot, float(out @ r))
        if g @ r >= 0:
            passthrough_ok &= np.array_equal(out, g)
    elapsed = time.perf_counter() - t0
    verdict(4, worst_dot >= -1e-9 and passthrough_ok and elapsed < 5,
            f"min output.ref {worst_dot:.2e}; pass-through exact: {passthrough_ok}; {elapsed:.2f}s")


# --------------------------------------------------------------------------
# 5-7, 9. DIL trends
# --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_05_pct_reduces_backward_nfr(dil):
    parts, ok = [], True
    for base, with_pct in (("naive", "naive+pct"), ("si", "si+pct")):
        b, p = mean(dil[base], "nfr_mw"), mean(dil[with_pct], "nfr_mw")
        f1_drop = mean(dil[base], "f1_mw") - mean(dil[with_pct], "f1_mw")
        reduction = 1 - p / b if b > 0 else 0.0
        ok &= b > 0 and p <= 0.7 * b and f1_drop <= 0.05
        parts.append(f"{with_pct} NFR_mw {100 * p:.2f}% vs {100 * b:.2f}% (-{100 * reduction:.0f}%), "
                     f"F1 drop {100 * f1_drop:.2f}pp")
    verdict(5, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_06_replay_compounds_pct(dil):
    p, rp = mean(dil["naive+pct"], "nfr_mw"), mean(dil["replay+pct"], "nfr_mw")
    verdict(6, rp <= p, f"replay+pct NFR_mw {100 * rp:.3f}% vs pct {100 * p:.3f}%")


@pytest.mark.slow
def test_criterion_07_forward_mode(dil):
    b, p = mean(dil["naive"], "nfr_mw", "forward"), mean(dil["naive+pct"], "nfr_mw", "forward")
    verdict(7, p < b, f"forward NFR_mw naive+pct {100 * p:.3f}% vs naive {100 * b:.3f}%")


@pytest.mark.slow
def test_criterion_09_alpha_beta_monotonicity(dil):
    hi, lo = mean(dil["naive+pct"], "nfr_mw"), mean(dil["naive+pct(0.1,0.1)"], "nfr_mw")
    verdict(9, hi < lo, f"NFR_mw at (1, 0.5) {100 * hi:.3f}% vs (0.1, 0.1) {100 * lo:.3f}%")


# --------------------------------------------------------------------------
# 8. CIL trend
# --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_cil_trend(cil):
    base, with_pct = cil["si+replay"], cil["si+replay+pct"]
    nfr_b, nfr_p = mean(base, "nfr"), mean(with_pct, "nfr")
    fg_b, fg_p = mean(base, "forgetting"), mean(with_pct, "forgetting")
    acc = {name: mean(m, "accuracy") for name, m in cil.items()}
    best_other = max(v for k, v in acc.items() if k != "cumulative")
    ok = nfr_p <= nfr_b and fg_p <= fg_b and acc["cumulative"] > best_other
    verdict(8, ok, f"NFR {100 * nfr_p:.2f}% vs {100 * nfr_b:.2f}%, forgetting {100 * fg_p:.2f}% vs "
                   f"{100 * fg_b:.2f}%, accuracy " + ", ".join(f"{k} {100 * v:.1f}%" for k, v in acc.items()))


# --------------------------------------------------------------------------
# 10. masking and scenario invariants
# --------------------------------------------------------------------------

def _hand_records(values):
    out = {}
    for (k, j), v in values.items():
        labels, old, new = np.zeros(100, int), np.zeros(100, int), np.zeros(100, int)
        new[: int(round(100 * v))] = 1
        out[(k, j)] = make_record(k, j, labels, new, old, 2)
    return out


def test_criterion_10_scenario_invariants():
    from regcl.errors import ContractError
    from regcl.nn import predict

    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    m = MlpModel.init(20, 10, hidden_dim=8, rng=rng)
    m.b2[...] = np.linspace(0, 50, 10)  # unseen classes would win without the mask
    seen = [0, 3, 5]
    preds = predict(m, random_batch(rng, 200, 20, 10, density=0.3, classes=seen),
                    ClassMask.from_classes(10, seen))
    masked_ok = set(preds.tolist()) <= set(seen)

    recs = _hand_records({(3, 1): 0.02, (3, 2): 0.04, (3, 3): 0.00})
    dil_ok = backward_nfr(recs, 3, "DIL") == pytest.approx(0.02)
    cil_ok = backward_nfr(recs, 3, "CIL") == pytest.approx(0.03)
    try:
        forward_nfr(recs, 2, 3, kind="CIL")
        forward_rejected = False
    except ContractError:
        forward_rejected = True
    elapsed = time.perf_counter() - t0
    ok = masked_ok and dil_ok and cil_ok and forward_rejected and elapsed < 1
    verdict(10, ok, f"masked predictions in seen set: {masked_ok}; DIL k'=k: {dil_ok}; CIL k'=k-1: {cil_ok}; "
                    f"forward rejected in CIL: {forward_rejected}")


# --------------------------------------------------------------------------
# 11. determinism
# --------------------------------------------------------------------------

def _bodies(out):
    files = {n: (out / n).read_bytes() for n in ("report.csv", "records.csv", "summary.txt")}
    for p in sorted((out / "snapshots").rglob("*.rcl")):
        files[str(p.relative_to(out))] = p.read_bytes()
    return files


def test_criterion_11_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = build_config({"synth.feature_dim": 120, "synth.experiences": 3, "synth.samples_per_class": 30,
                        "train.epochs": 3, "train.hidden": 32, "run.seeds": "0,1",
                        "strategy.name": "replay+ewc", **PCT_ON})
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    a, b = _bodies(tmp_path / "a"), _bodies(tmp_path / "b")
    elapsed = time.perf_counter() - t0
    same = a.keys() == b.keys() and a == b
    verdict(11, same and len(a) > 3 and elapsed < 60, f"{len(a)} files byte-identical: {same}; {elapsed:.1f}s")
