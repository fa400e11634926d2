"""Run configuration: a flat ``key = value`` text format with dotted sections.

Example::

    # naive + PCT on the synthetic DIL stream
    scenario = DIL
    strategy.name = naive
    pct.enabled = true
    pct.beta = 0.5
    run.seeds = 0,1,2,3,4

Every key has a type and a default, unknown keys are rejected, and the fully
defaulted config has a canonical text form whose sha256 is the config digest.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .metrics import FORGETTING_MODES
from .pct import PctConfig
from .strategies import STRATEGY_NAMES, TrainConfig
from .synth import SynthConfig

FILTER_MODES = ("first-split", "global", "none")

# keys that only steer where and how outputs are kept; they never change a result
_OUTPUT_KEYS = ("run.out", "run.keep_all")


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ValueError("empty list")
    return tuple(int(s) for s in items)


def _ratio(text):
    parts = text.replace(",", ":").split(":")
    if len(parts) != 2:
        raise ValueError(f"expected a:b, got {text!r}")
    return tuple(int(p) for p in parts)


def _opt_int(text):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _upper(text):
    return text.strip().upper()


def _lower(text):
    return text.strip().lower()


_SYNTH = SynthConfig()
_TRAIN = TrainConfig()

# key -> (parser, default)
SCHEMA = {
    "scenario": (_upper, "DIL"),
    "data.source": (str.strip, "synth"),
    "data.path": (str.strip, ""),
    "data.seed": (_opt_int, None),
    "data.window_days": (int, 90),
    "data.train_fraction": (float, None),
    "data.classes_per_experience": (int, 10),
    "data.filter": (_lower, "first-split"),
    "data.filter_threshold": (float, 1e-3),
    "synth.feature_dim": (int, _SYNTH.feature_dim),
    "synth.experiences": (int, _SYNTH.experiences),
    "synth.samples_per_class": (int, _SYNTH.samples_per_class),
    "synth.class_ratio": (_ratio, _SYNTH.class_ratio),
    "synth.prototype_density": (float, _SYNTH.prototype_density),
    "synth.drift_rate": (float, _SYNTH.drift_rate),
    "synth.flip_noise": (float, _SYNTH.flip_noise),
    "synth.class_separation": (float, _SYNTH.class_separation),
    "synth.signature_coverage": (float, _SYNTH.signature_coverage),
    "synth.drift_steps": (int, _SYNTH.drift_steps),
    "synth.classes_total": (int, _SYNTH.classes_total),
    "synth.classes_per_experience": (int, _SYNTH.classes_per_experience),
    "strategy.name": (_lower, "naive"),
    "strategy.replay_capacity": (_opt_int, None),
    "strategy.agem_capacity": (_opt_int, None),
    "strategy.agem_batch": (int, 32),
    "strategy.ewc_lambda": (float, 0.001),
    "strategy.fisher_samples": (int, 1000),
    "strategy.si_lambda": (float, 0.001),
    "strategy.si_eps": (float, 0.1),
    "strategy.lwf_alpha": (float, 1.0),
    "strategy.lwf_temperature": (float, 1.0),
    "pct.enabled": (_bool, False),
    "pct.alpha": (float, 1.0),
    "pct.beta": (float, 0.5),
    "pct.lambda": (float, 1.0),
    "train.epochs": (int, _TRAIN.epochs),
    "train.batch_size": (int, _TRAIN.batch_size),
    "train.lr": (float, _TRAIN.lr),
    "train.momentum": (float, _TRAIN.momentum),
    "train.hidden": (int, _TRAIN.hidden),
    "run.seeds": (_int_list, (0, 1, 2, 3, 4)),
    "run.forgetting": (_lower, "max"),
    "run.out": (str.strip, "regcl-out"),
    "run.keep_all": (_bool, False),
}


def _render(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Fully defaulted, validated settings. ``values`` maps every schema key to its value."""

    values: tuple

    def __getitem__(self, key):
        return dict(self.values)[key]

    def get(self, key):
        return self[key]

    def as_dict(self):
        return dict(self.values)

    def override(self, updates):
        """Validated copy with ``{dotted key: value}`` applied on top."""
        return build_config(updates, base=self)

    @property
    def scenario(self):
        return self["scenario"]

    @property
    def seeds(self):
        return self["run.seeds"]

    @property
    def out_dir(self):
        return Path(self["run.out"])

    @property
    def keep_all(self):
        return self["run.keep_all"]

    @property
    def train(self):
        return TrainConfig(self["train.epochs"], self["train.batch_size"], self["train.lr"],
                           self["train.momentum"], self["train.hidden"])

    @property
    def pct(self):
        return PctConfig(self["pct.enabled"], self["pct.alpha"], self["pct.beta"], self["pct.lambda"])

    @property
    def synth(self):
        fields = {k.split(".", 1)[1]: v for k, v in self.values if k.startswith("synth.")}
        return SynthConfig(**fields)

    @property
    def train_fraction(self):
        frac = self["data.train_fraction"]
        if frac is None:
            return 0.8 if self.scenario == "DIL" else 0.9
        return frac

    def strategy_kwargs(self):
        v = self.as_dict()
        return dict(
            replay_capacity=v["strategy.replay_capacity"], agem_capacity=v["strategy.agem_capacity"],
            agem_batch=v["strategy.agem_batch"], ewc_lambda=v["strategy.ewc_lambda"],
            fisher_samples=v["strategy.fisher_samples"], si_lambda=v["strategy.si_lambda"],
            si_eps=v["strategy.si_eps"], lwf_alpha=v["strategy.lwf_alpha"],
            lwf_temperature=v["strategy.lwf_temperature"],
        )

    def canonical(self):
        """Sorted ``key = value`` lines of every result-affecting key."""
        return "\n".join(f"{k} = {_render(v)}" for k, v in sorted(self.values) if k not in _OUTPUT_KEYS) + "\n"

    @property
    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def to_text(self):
        return "\n".join(f"{k} = {_render(v)}" for k, v in sorted(self.values)) + "\n"


def parse_text(text):
    """Raw ``{key: string}`` pairs from config text; later duplicates are an error."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"config line {lineno}: empty key")
        if key in raw:
            raise ConfigurationError(f"config line {lineno}: duplicate key {key}")
        raw[key] = value
    return raw


def _coerce(key, value):
    if key not in SCHEMA:
        raise ConfigurationError(f"unknown config key: {key}")
    parser, _ = SCHEMA[key]
    if not isinstance(value, str):
        return value
    try:
        return parser(value)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: {exc}") from None


def _check_range(key, ok, what):
    if not ok:
        raise ConfigurationError(f"{key} {what}")


def _validate(v):
    _check_range("scenario", v["scenario"] in ("DIL", "CIL"), "must be DIL or CIL")
    src = v["data.source"]
    _check_range("data.source", src in ("synth", "file"), "must be 'synth' or 'file'")
    if src == "file":
        if not v["data.path"]:
            raise ConfigurationError("data.path is required when data.source = file")
        if not Path(v["data.path"]).is_file():
            raise ConfigurationError(f"data.path: no such file {v['data.path']}")
    _check_range("data.filter", v["data.filter"] in FILTER_MODES, f"must be one of {', '.join(FILTER_MODES)}")
    _check_range("data.filter_threshold", 0.0 <= v["data.filter_threshold"] <= 0.25, "must lie in [0, 0.25]")
    frac = v["data.train_fraction"]
    if frac is not None:
        _check_range("data.train_fraction", 0.0 < frac < 1.0, "must lie in (0, 1)")
    for key in ("data.window_days", "data.classes_per_experience", "train.epochs", "train.batch_size",
                "train.hidden", "strategy.agem_batch", "strategy.fisher_samples"):
        _check_range(key, v[key] >= 1, "must be a positive integer")
    for key in ("strategy.replay_capacity", "strategy.agem_capacity"):
        if v[key] is not None:
            _check_range(key, v[key] >= 1, "must be a positive integer")
    for key in ("train.lr", "strategy.ewc_lambda", "strategy.si_lambda", "strategy.si_eps",
                "strategy.lwf_alpha", "strategy.lwf_temperature", "pct.alpha", "pct.beta", "pct.lambda"):
        x = v[key]
        _check_range(key, math.isfinite(x) and x >= 0, f"must be a finite non-negative number, got {x}")
    _check_range("train.lr", v["train.lr"] > 0, "must be positive")
    _check_range("strategy.si_eps", v["strategy.si_eps"] > 0, "must be positive")
    _check_range("strategy.lwf_temperature", v["strategy.lwf_temperature"] > 0, "must be positive")
    _check_range("train.momentum", 0.0 <= v["train.momentum"] < 1.0, "must lie in [0, 1)")
    _check_range("run.forgetting", v["run.forgetting"] in FORGETTING_MODES,
                 f"must be one of {', '.join(FORGETTING_MODES)}")
    seeds = v["run.seeds"]
    _check_range("run.seeds", len(set(seeds)) == len(seeds), "must not repeat a seed")
    _check_range("run.seeds", all(0 <= s < 2**32 for s in seeds), "must be integers in [0, 2^32)")
    for part in v["strategy.name"].split("+"):
        _check_range("strategy.name", part.strip() in STRATEGY_NAMES,
                     f"has unknown strategy {part.strip()!r}; choose from {', '.join(STRATEGY_NAMES)}")
    if src == "synth":
        fields = {k.split(".", 1)[1]: val for k, val in v.items() if k.startswith("synth.")}
        SynthConfig(**fields)


def build_config(raw=None, base=None):
    """Merge ``raw`` (strings or typed values) over ``base`` (or the defaults) and validate."""
    values = dict(base.values) if base is not None else {k: d for k, (_, d) in SCHEMA.items()}
    for key, value in (raw or {}).items():
        values[key] = _coerce(key, value)
    _validate(values)
    return RunConfig(tuple(sorted(values.items())))


def parse_config(path=None, overrides=None):
    """Read a config file (optional) and apply ``overrides``, e.g. from CLI flags."""
    raw = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        raw = parse_text(text)
        if "data.path" in raw and raw["data.path"] and not Path(raw["data.path"]).is_absolute():
            raw["data.path"] = str((path.parent / raw["data.path"]).resolve())
    raw.update(overrides or {})
    return build_config(raw)


# --------------------------------------------------------------------------
# seed splitting
# --------------------------------------------------------------------------

STAGES = {"data": 1, "split": 2, "order": 3, "init": 4, "train": 5, "strategy": 6}


def stage_seed(master, stage):
    """Sub-seed for one pipeline stage: the first word of SeedSequence([master, stage id]).

    Stages draw from independent streams, so switching strategy or PCT never
    changes the data, split, order or initialization of a seed.
    """
    if stage not in STAGES:
        raise ConfigurationError(f"unknown seed stage {stage!r}")
    return int(np.random.SeedSequence([int(master), STAGES[stage]]).generate_state(1)[0])
