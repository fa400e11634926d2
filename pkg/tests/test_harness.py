from __future__ import annotations

import json

import numpy as np
import pytest

from regcl.config import SCHEMA, build_config, parse_config, parse_text, stage_seed
from regcl.data import Dataset, write_sparse_text
from regcl.errors import ConfigurationError
from regcl.harness import REPORT_HEADER, build_stream, report_rows, run
from regcl.metrics import MetricCurve, seed_aggregate
from regcl.nn import ModelSnapshot

TINY = {
    "synth.feature_dim": 60, "synth.experiences": 4, "synth.samples_per_class": 20,
    "train.epochs": 2, "train.hidden": 16, "run.seeds": "0,1",
}
TINY_CIL = {
    "scenario": "CIL", "synth.feature_dim": 60, "synth.samples_per_class": 10, "synth.classes_total": 6,
    "synth.classes_per_experience": 2, "train.epochs": 2, "train.hidden": 16, "run.seeds": "0,1",
}


def tiny(**extra):
    return build_config({**TINY, **extra})


def test_defaults_match_training_setup():
    cfg = build_config()
    assert (cfg.train.epochs, cfg.train.batch_size, cfg.train.lr, cfg.train.momentum, cfg.train.hidden) == \
        (30, 32, 1e-3, 0.9, 512)
    assert cfg.seeds == (0, 1, 2, 3, 4)
    assert cfg["pct.alpha"] == 1.0 and cfg["pct.beta"] == 0.5 and cfg["pct.lambda"] == 1.0
    assert not cfg.pct.enabled
    assert cfg.train_fraction == 0.8
    assert build_config({"scenario": "CIL"}).train_fraction == 0.9


@pytest.mark.parametrize("raw, key", [
    ({"pct.beta": "-1"}, "pct.beta"),
    ({"pct.lambda": "nan"}, "pct.lambda"),
    ({"bogus.key": "1"}, "bogus.key"),
    ({"strategy.name": "naive+magic"}, "strategy.name"),
    ({"train.momentum": "1.0"}, "train.momentum"),
    ({"run.seeds": "1,1"}, "run.seeds"),
    ({"data.source": "file", "data.path": "/nonexistent/x.txt"}, "data.path"),
    ({"scenario": "TIL"}, "scenario"),
])
def test_config_errors_name_the_key(raw, key):
    with pytest.raises(ConfigurationError, match=key.replace(".", r"\.")):
        build_config(raw)


def test_config_text_format(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nscenario = CIL  # trailing\npct.enabled = yes\n")
    cfg = parse_config(p, {"run.seeds": (3, 4)})
    assert cfg.scenario == "CIL" and cfg.pct.enabled and cfg.seeds == (3, 4)
    with pytest.raises(ConfigurationError, match="line 2"):
        parse_text("a = 1\na = 2\n")
    with pytest.raises(ConfigurationError, match="line 1"):
        parse_text("no equals sign\n")


def test_digest_ignores_output_keys_only():
    a = tiny()
    assert a.digest == tiny(**{"run.out": "/elsewhere", "run.keep_all": "true"}).digest
    assert a.digest != tiny(**{"pct.enabled": "true"}).digest


def test_every_schema_default_validates():
    assert set(build_config().as_dict()) == set(SCHEMA)


def test_stage_seeds_are_independent_and_stable():
    seeds = {stage_seed(0, s) for s in ("data", "split", "order", "init", "train", "strategy")}
    assert len(seeds) == 6
    assert stage_seed(7, "train") == stage_seed(7, "train")


def test_strategy_and_pct_do_not_change_data():
    a, b = tiny(), tiny(**{"pct.enabled": "true", "strategy.name": "replay"})
    from regcl.harness import stream_digest
    assert stream_digest(build_stream(a, 3)) == stream_digest(build_stream(b, 3))
    assert stream_digest(build_stream(a, 3)) != stream_digest(build_stream(a, 4))


def test_pinned_data_seed_varies_only_class_order():
    cfg = build_config({**TINY_CIL, "data.seed": "5"})
    streams = [build_stream(cfg, s) for s in range(4)]

    def by_class(stream):
        out = {}
        for e in stream.experiences:
            x = e.train.to_dense()
            for c in e.classes:
                out[c] = x[e.train.labels == c].tobytes()
        return out

    assert len({tuple(e.classes for e in s.experiences) for s in streams}) > 1
    assert all(by_class(s) == by_class(streams[0]) for s in streams)


def _bodies(out):
    files = {n: (out / n).read_bytes() for n in ("report.csv", "records.csv", "summary.txt")}
    for p in sorted((out / "snapshots").rglob("*")):
        if p.is_file():
            files[str(p.relative_to(out))] = p.read_bytes()
    return files


def test_identical_configs_give_identical_outputs(tmp_path):
    cfg = tiny(**{"pct.enabled": "true", "strategy.name": "replay+si"})
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    a, b = _bodies(tmp_path / "a"), _bodies(tmp_path / "b")
    assert a.keys() == b.keys() and a == b


def test_run_outputs_and_retention(tmp_path):
    m = run(tiny(), tmp_path / "r")
    assert m.ok and len(m.seeds) == 2
    assert sorted(p.name for p in (tmp_path / "r/snapshots/seed0").iterdir()) == \
        ["exp3.rcl", "exp4.rcl", "filter.txt"]
    lines = (tmp_path / "r/report.csv").read_text().splitlines()
    assert lines[0] == REPORT_HEADER
    assert any(l.startswith("nfr_mw,backward,2,") and l.endswith(",0,,") for l in lines)
    summary = (tmp_path / "r/summary.txt").read_text()
    assert "[backward]" in summary and "[forward]" in summary
    man = json.loads((tmp_path / "r/manifest.json").read_text())
    assert man["config_digest"] == m.config_digest and {s["status"] for s in man["seeds"]} == {"ok"}
    assert max(s.max_identity_residual for s in m.seeds) <= 1e-12
    snap = ModelSnapshot.load(tmp_path / "r/snapshots/seed0/exp4.rcl")
    assert snap.hidden_dim == 16


def test_keep_all_retains_every_snapshot(tmp_path):
    run(tiny(**{"run.keep_all": "true", "run.seeds": "0"}), tmp_path / "k")
    names = sorted(p.name for p in (tmp_path / "k/snapshots/seed0").glob("*.rcl"))
    assert names == [f"exp{k}.rcl" for k in range(1, 5)]


def test_cil_report_has_no_forward_section_and_fills_worst(tmp_path):
    m = run(build_config(TINY_CIL), tmp_path / "c")
    summary = (tmp_path / "c/summary.txt").read_text()
    assert "[forward]" not in summary and "(worst)" in summary
    rows = [l.split(",") for l in (tmp_path / "c/report.csv").read_text().splitlines()[1:]]
    assert not any(r[1] == "forward" for r in rows)
    means = [r for r in rows if r[4] == "mean"]
    assert means and all(r[6] != "" for r in means if r[3] != "")
    assert m.aggregate("nfr", "backward").updates == (2, 3)


def test_report_row_format():
    agg = seed_aggregate([MetricCurve("nfr_mw", "backward", 0, (2,), (0.02,))])
    lines = report_rows([(0, [MetricCurve("nfr_mw", "backward", 0, (2,), (0.02,))])], [agg])
    assert "nfr_mw,backward,2,0.0200,0,," in lines
    assert "nfr_mw,backward,2,0.0200,mean,0.0000,0.0200" in lines
    assert "nfr_mw,backward,all,0.0200,mean,0.0000,0.0200" in lines


def test_failing_seed_is_recorded_and_others_continue(tmp_path):
    data = tmp_path / "d.txt"
    rng = np.random.default_rng(0)
    ds = Dataset.from_dense(rng.random((40, 12)) < 0.3, np.tile([0, 1], 20), 2,
                            timestamps=np.repeat([0, 100, 200, 300], 10))
    write_sparse_text(ds, data)
    cfg = build_config({"data.source": "file", "data.path": str(data), "train.epochs": "1",
                        "train.hidden": "8", "run.seeds": "0", "data.filter": "none"})
    m = run(cfg, tmp_path / "f")
    assert m.ok and m.seeds[0].feature_dim == 12
    data.write_text("")
    m = run(cfg, tmp_path / "g")
    assert not m.ok and m.failed[0].exit_code == 3
    assert "failures:" in (tmp_path / "g/summary.txt").read_text()
