"""Experiment runner: stream assembly, training, evaluation and report files.

Output layout under the run directory::

    config.txt              effective configuration (all keys)
    report.csv              metric,mode,update,value,seed,std,worst
    records.csv             raw per-(seed, update, experience) counts
    summary.txt             mean +/- std tables in percent
    manifest.json           digests, per-seed status, snapshot paths, timings
    snapshots/seed<s>/exp<k>.rcl

Everything except ``manifest.json`` (which records wall-clock timings) is a
deterministic function of the configuration.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .config import RunConfig, stage_seed
from .data import apply_filter, concat, load_sparse_text, variance_filter_fit
from .errors import NumericError, RegclError
from .metrics import curves_for_seed, forgetting_identity_check, make_record, seed_aggregate
from .nn import MlpModel, ModelSnapshot, OptimizerState, predict
from .scenarios import CIL, DIL, ScenarioStream, build_cil_stream, build_dil_stream
from .strategies import build_strategy, run_experience
from .synth import synth_cil_generate, synth_dil_generate

log = logging.getLogger(__name__)

IDENTITY_TOLERANCE = 1e-12


@dataclass
class SeedResult:
    seed: int
    status: str = "ok"
    error: str | None = None
    exit_code: int = 0
    records: dict = field(default_factory=dict, repr=False)
    curves: list = field(default_factory=list, repr=False)
    stream_summary: list = field(default_factory=list)
    feature_dim: int | None = None
    data_digest: str | None = None
    snapshots: dict = field(default_factory=dict)
    filter_path: Path | None = None
    max_identity_residual: float = 0.0
    timings: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.status == "ok"

    def curve(self, metric, mode="backward"):
        for c in self.curves:
            if c.metric == metric and c.mode == mode:
                return c
        raise KeyError(f"no curve {metric}/{mode}")


@dataclass
class RunManifest:
    config: RunConfig = field(repr=False)
    out_dir: Path
    seeds: list = field(default_factory=list)
    aggregates: list = field(default_factory=list, repr=False)
    data_digest: str = ""
    reports: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def config_digest(self):
        return self.config.digest

    @property
    def ok(self):
        return all(s.ok for s in self.seeds)

    @property
    def failed(self):
        return [s for s in self.seeds if not s.ok]

    def aggregate(self, metric, mode="backward"):
        for a in self.aggregates:
            if a.metric == metric and a.mode == mode:
                return a
        raise KeyError(f"no aggregate {metric}/{mode}")

    def overall(self, metric, mode="backward"):
        """Cross-seed mean of the per-seed mean over updates."""
        return self.aggregate(metric, mode).overall_mean

    def to_json(self):
        return {
            "config_digest": self.config_digest,
            "data_digest": self.data_digest,
            "scenario": self.config.scenario,
            "strategy": self.config["strategy.name"],
            "backend": kernels.BACKEND,
            "out_dir": str(self.out_dir),
            "reports": {k: str(v) for k, v in self.reports.items()},
            "timings": self.timings,
            "seeds": [
                {
                    "seed": s.seed, "status": s.status, "error": s.error, "exit_code": s.exit_code,
                    "data_digest": s.data_digest, "feature_dim": s.feature_dim,
                    "max_identity_residual": s.max_identity_residual,
                    "snapshots": {str(k): str(p) for k, p in sorted(s.snapshots.items())},
                    "filter": None if s.filter_path is None else str(s.filter_path),
                    "timings": s.timings,
                }
                for s in self.seeds
            ],
        }


# --------------------------------------------------------------------------
# stream assembly
# --------------------------------------------------------------------------

def _data_seed(config, seed):
    pinned = config["data.seed"]
    return pinned if pinned is not None else stage_seed(seed, "data")


def build_stream(config: RunConfig, seed: int) -> ScenarioStream:
    """Unfiltered experience stream for one master seed."""
    kind = config.scenario
    frac = config.train_fraction
    data_seed = _data_seed(config, seed)
    order_seed = stage_seed(seed, "order")
    if config["data.source"] == "synth":
        if kind == DIL:
            return ScenarioStream(DIL, synth_dil_generate(config.synth, data_seed, frac))
        return ScenarioStream(CIL, synth_cil_generate(config.synth, data_seed, order_seed, frac))
    dataset = load_sparse_text(config["data.path"], require_timestamps=kind == DIL)
    split_seed = config["data.seed"] if config["data.seed"] is not None else stage_seed(seed, "split")
    if kind == DIL:
        return build_dil_stream(dataset, config["data.window_days"], frac, split_seed)
    return build_cil_stream(dataset, config["data.classes_per_experience"], order_seed, frac, split_seed)


def stream_digest(stream):
    h = hashlib.sha256()
    for e in stream.experiences:
        h.update(e.train.digest_bytes())
        h.update(e.test.digest_bytes())
    return h.hexdigest()


def filter_stream(stream, mode="first-split", threshold=1e-3):
    """Fit the variance filter on training data only and apply it to every split."""
    if mode == "none":
        return stream, None
    if mode == "first-split":
        fit_on = stream.experiences[0].train
    else:
        fit_on = concat(e.train for e in stream.experiences)
    filt = variance_filter_fit(fit_on, threshold)
    exps = [dataclasses.replace(e, train=apply_filter(filt, e.train), test=apply_filter(filt, e.test))
            for e in stream.experiences]
    return ScenarioStream(stream.kind, exps), filt


# --------------------------------------------------------------------------
# one seed
# --------------------------------------------------------------------------

def _evaluate(stream, k, new_snap, old_snap):
    """Records of f_k (and f_{k-1}) on every test set the configured modes need."""
    last = stream.K if stream.kind == DIL else k
    out = {}
    for j in range(1, last + 1):
        test = stream.experiences[j - 1].test
        new = predict(new_snap, test)
        old = predict(old_snap, test) if old_snap is not None else None
        out[(k, j)] = make_record(k, j, test.labels, new, old, stream.class_count)
    return out


def run_seed(config: RunConfig, seed: int, out_dir: Path) -> SeedResult:
    res = SeedResult(seed)
    t0 = time.perf_counter()
    stream = build_stream(config, seed)
    res.data_digest = stream_digest(stream)
    stream, filt = filter_stream(stream, config["data.filter"], config["data.filter_threshold"])
    res.feature_dim = stream.feature_dim
    res.stream_summary = stream.summary()
    res.timings["data"] = time.perf_counter() - t0

    tc = config.train
    model = MlpModel.init(stream.feature_dim, stream.class_count, tc.hidden, rng=stage_seed(seed, "init"))
    opt = OptimizerState.for_model(model, tc.lr, tc.momentum)
    strategy = build_strategy(config["strategy.name"], model.n_params, stream.K, stream.kind,
                              seed=stage_seed(seed, "strategy"), **config.strategy_kwargs())
    rng = np.random.default_rng(stage_seed(seed, "train"))
    snap_dir = out_dir / "snapshots" / f"seed{seed}"
    snap_dir.mkdir(parents=True, exist_ok=True)
    if filt is not None:
        filt.save(snap_dir / "filter.txt")
        res.filter_path = snap_dir / "filter.txt"

    prev_path = None
    t_train = t_eval = 0.0
    for exp in stream.experiences:
        k = exp.id
        # the predecessor always comes back from disk so every run exercises the file format
        old_snap = ModelSnapshot.load(prev_path) if prev_path is not None else None
        t1 = time.perf_counter()
        model, snap = run_experience(tc, strategy, config.pct, model, opt, exp, stream, rng, old_snap, seed)
        path = snap_dir / f"exp{k}.rcl"
        snap.save(path)
        res.snapshots[k] = path
        t2 = time.perf_counter()
        recs = _evaluate(stream, k, snap, old_snap)
        for rec in recs.values():
            if rec.has_old:
                r = abs(forgetting_identity_check(rec))
                if r > IDENTITY_TOLERANCE:
                    raise NumericError(f"accuracy/flip identity off by {r:.3g} at ({rec.update}, {rec.experience})")
                res.max_identity_residual = max(res.max_identity_residual, r)
        res.records.update(recs)
        t_eval += time.perf_counter() - t2
        t_train += t2 - t1
        if not config.keep_all and k >= 3:
            stale = res.snapshots.pop(k - 2)
            stale.unlink(missing_ok=True)
        prev_path = path
        log.info("seed %d: finished experience %d/%d", seed, k, stream.K)
    res.timings["train"] = t_train
    res.timings["eval"] = t_eval
    res.curves = curves_for_seed(res.records, stream.kind, stream.K, seed, config["run.forgetting"])
    return res


# --------------------------------------------------------------------------
# whole run
# --------------------------------------------------------------------------

def run(config: RunConfig, out_dir=None) -> RunManifest:
    """Run every configured seed, aggregate across seeds and write the report files.

    A failing seed is recorded (status, message, exit code) and the others
    proceed; aggregates cover the seeds that finished.
    """
    out_dir = Path(out_dir if out_dir is not None else config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config, out_dir)
    t0 = time.perf_counter()
    for seed in config.seeds:
        try:
            manifest.seeds.append(run_seed(config, seed, out_dir))
        except RegclError as exc:
            log.error("seed %d failed: %s", seed, exc)
            manifest.seeds.append(SeedResult(seed, "failed", f"{type(exc).__name__}: {exc}", exc.exit_code))
        except (FloatingPointError, OverflowError) as exc:
            manifest.seeds.append(SeedResult(seed, "failed", f"{type(exc).__name__}: {exc}",
                                             NumericError.exit_code))
    done = [s for s in manifest.seeds if s.ok]
    h = hashlib.sha256()
    for s in manifest.seeds:
        h.update((s.data_digest or "").encode())
    manifest.data_digest = h.hexdigest()
    if done:
        for i, first in enumerate(done[0].curves):
            manifest.aggregates.append(seed_aggregate([s.curves[i] for s in done]))
    t1 = time.perf_counter()
    manifest.reports = write_reports(manifest, out_dir)
    manifest.timings = {"total": time.perf_counter() - t0, "report": time.perf_counter() - t1}
    (out_dir / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    manifest.reports["manifest"] = out_dir / "manifest.json"
    return manifest


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------

REPORT_HEADER = "metric,mode,update,value,seed,std,worst"


def _num(v, digits=4):
    return "" if v is None else f"{v:.{digits}f}"


def _pct(v):
    return "n/a" if v is None else f"{100 * v:.2f}"


def report_rows(curves_by_seed, aggregates):
    """CSV lines: one per metric x update x seed, then the cross-seed aggregate rows.

    ``update = all`` rows carry the mean over updates.
    """
    lines = [REPORT_HEADER]
    for i, agg in enumerate(aggregates):
        for seed, curves in curves_by_seed:
            c = curves[i]
            for k, v in zip(c.updates, c.values):
                lines.append(f"{c.metric},{c.mode},{k},{_num(v)},{seed},,")
            lines.append(f"{c.metric},{c.mode},all,{_num(c.overall)},{seed},,")
        for k, m, s, w in zip(agg.updates, agg.mean, agg.std, agg.worst):
            lines.append(f"{agg.metric},{agg.mode},{k},{_num(m)},mean,{_num(s)},{_num(w)}")
        lines.append(f"{agg.metric},{agg.mode},all,{_num(agg.overall_mean)},mean,"
                     f"{_num(agg.overall_std)},{_num(agg.overall_worst)}")
    return lines


def _summary_lines(manifest):
    cfg = manifest.config
    pct = cfg.pct
    done = [s for s in manifest.seeds if s.ok]
    lines = [
        "regcl run summary",
        f"config digest: {cfg.digest}",
        f"data digest:   {manifest.data_digest}",
        f"scenario: {cfg.scenario}   strategy: {cfg['strategy.name']}   "
        + (f"pct: on (alpha={pct.alpha:g}, beta={pct.beta:g}, lambda={pct.lam:g})" if pct.enabled else "pct: off"),
        f"seeds: {','.join(str(s) for s in cfg.seeds)}   finished: {len(done)}   failed: {len(manifest.failed)}",
    ]
    if len(done) == 1:
        lines.append("note: single seed, standard deviations are reported as 0")
    lines.append("")
    lines.append("streams:")
    for s in manifest.seeds:
        if s.ok:
            lines.append(f"  seed {s.seed} (features after filter: {s.feature_dim}, data {s.data_digest[:16]})")
            lines.extend(f"    {row}" for row in s.stream_summary)
    show_worst = cfg.scenario == CIL
    modes = ["backward"] + (["forward"] if cfg.scenario == DIL else [])
    for mode in modes:
        lines.append("")
        lines.append(f"[{mode}] mean over updates, percent, mean +/- std across seeds"
                     + (" (worst)" if show_worst else ""))
        for agg in manifest.aggregates:
            if agg.mode != mode:
                continue
            cell = f"{_pct(agg.overall_mean)} +/- {_pct(agg.overall_std)}"
            if show_worst:
                cell += f"  ({_pct(agg.overall_worst)})"
            lines.append(f"  {agg.metric:<14} {cell}")
        lines.append("  per update:")
        for agg in manifest.aggregates:
            if agg.mode != mode:
                continue
            cells = " ".join(f"k={k}:{_pct(m)}" for k, m in zip(agg.updates, agg.mean))
            lines.append(f"    {agg.metric:<14} {cells}")
    if manifest.failed:
        lines.append("")
        lines.append("failures:")
        lines.extend(f"  seed {s.seed}: {s.error}" for s in manifest.failed)
    return lines


def _record_lines(manifest):
    lines = ["seed,update,experience,n,correct,old_correct,nf,pf,accuracy,nfr,pfr"]
    for s in manifest.seeds:
        for (k, j), r in sorted(s.records.items()):
            old = "" if r.old_correct is None else int(r.old_correct.sum())
            nf = "" if r.nf is None else int(r.nf.sum())
            pf = "" if r.pf is None else int(r.pf.sum())
            lines.append(f"{s.seed},{k},{j},{r.n},{int(r.correct_per_class.sum())},{old},{nf},{pf},"
                         f"{_num(r.accuracy, 6)},{_num(r.nfr(), 6)},{_num(r.pfr(), 6)}")
    return lines


def write_reports(manifest, out_dir):
    out_dir = Path(out_dir)
    paths = {
        "config": out_dir / "config.txt",
        "report": out_dir / "report.csv",
        "records": out_dir / "records.csv",
        "summary": out_dir / "summary.txt",
    }
    done = [s for s in manifest.seeds if s.ok]
    paths["config"].write_text(manifest.config.to_text())
    rows = report_rows([(s.seed, s.curves) for s in done], manifest.aggregates)
    paths["report"].write_text("\n".join(rows) + "\n")
    paths["records"].write_text("\n".join(_record_lines(manifest)) + "\n")
    paths["summary"].write_text("\n".join(_summary_lines(manifest)) + "\n")
    return paths
