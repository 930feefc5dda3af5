"""TOML run configuration with unit-suffixed keys.

A config file has the sections ``[run]``, ``[scenario]``, ``[radio]``,
``[attack]``, ``[detector]``, ``[filter]``, ``[sweep]`` and ``[calibration]``.
Every key is optional; missing keys take the defaults in :data:`DEFAULTS`,
which describe the baseline scenario (6 anchors, 1 malicious, 0.5 dB
shadowing, 20 m attack spread, 100 m x 100 m field).
"""

from __future__ import annotations

import copy
import re
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from securetrack.detection import DEFAULT_GAMMA, DEFAULT_MAHA_MARGIN, DetectorConfig
from securetrack.ekf import FilterConfig
from securetrack.harness import DEFAULT_PERCENTILE, DEFAULT_TRIALS, SweepAxis, SweepSpec
from securetrack.propagation import RadioParams
from securetrack.scenario import AttackSpec, ScenarioConfig

DEFAULTS: dict[str, dict] = {
    "run": {
        "seed": 0,
        "trials": DEFAULT_TRIALS,
        "workers": 1,
        "out_dir": "out",
    },
    "scenario": {
        "field_size_m": [100.0, 100.0],
        "n_anchors": 6,
        "n_malicious": 1,
        "n_steps": 100,
        "start_m": [10.0, 10.0],
        "velocity_mps": [0.8, 0.8],
    },
    "radio": {
        "p0_db": -40.0,
        "alpha": 20.0,
        "sigma_db": 0.5,
    },
    "attack": {
        "kind": "location_perturbation",
        "sigma_attack_m": 20.0,
        "bias_db": 0.0,
        "persistent": True,
    },
    "detector": {
        "mode": "delta",
        "gamma": DEFAULT_GAMMA,
        "maha_margin": DEFAULT_MAHA_MARGIN,
        "warmup_steps": 10,
        "window_steps": 10,
        "min_anchors": 3,
        "innovation_domain": "db",
    },
    "filter": {
        "q_accel_m2": 0.001,
        "noise_scale": "measured",
        "init": "multilateration",
        "pos_var_m2": 100.0,
        "vel_var_m2": 10.0,
    },
    "sweep": {
        "axis": "n_anchors",
        "values": [5, 7, 9, 11],
    },
    "calibration": {
        "percentile": DEFAULT_PERCENTILE,
        "trials": 200,
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is dotted (``radio.sigma_db``), ``line`` 1-based or None."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None,
                 source: str | None = None):
        self.key = key
        self.line = line
        self.source = source
        where = source or "<config>"
        if line is not None:
            where += f":{line}"
        prefix = f"{where}: " + (f"key '{key}': " if key else "")
        super().__init__(prefix + message)


@dataclass(frozen=True)
class CliConfig:
    """Everything one command needs, resolved from file, defaults and overrides."""

    raw: dict
    scenario: ScenarioConfig
    detector: DetectorConfig
    filt: FilterConfig
    sweep_axis: SweepAxis
    sweep_values: tuple
    seed: int
    trials: int
    workers: int
    out_dir: Path
    calibration_percentile: float
    calibration_trials: int

    def sweep_spec(self) -> SweepSpec:
        return SweepSpec(self.sweep_axis, self.sweep_values, self.trials, self.scenario,
                         self.detector, self.filt, self.seed)

    def to_toml(self) -> str:
        return dump_toml(self.raw)


def defaults() -> dict:
    return copy.deepcopy(DEFAULTS)


def _key_line(text: str | None, section: str, key: str | None = None) -> int | None:
    """Line of ``key`` inside ``[section]`` (or of the header itself)."""
    if not text:
        return None
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\[\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if current == section and key and re.match(rf"^{re.escape(key)}\s*=", s):
            return n
    return None


def merge(base: dict, update: dict, text: str | None = None, source: str | None = None) -> dict:
    """Overlay ``update`` on ``base``; unknown sections or keys are errors."""
    out = copy.deepcopy(base)
    for section, table in update.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section (expected one of {sorted(DEFAULTS)})",
                              section, _key_line(text, section), source)
        if not isinstance(table, dict):
            raise ConfigError("expected a table", section, _key_line(text, section), source)
        for key, value in table.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key (expected one of {sorted(DEFAULTS[section])})",
                                  f"{section}.{key}", _key_line(text, section, key), source)
            out[section][key] = value
    return out


def parse_override(item: str) -> tuple[str, str, object]:
    """``section.key=value`` with a TOML value; bare words are taken as strings."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    dotted, value = (s.strip() for s in item.split("=", 1))
    if dotted.count(".") != 1:
        raise ConfigError(f"override key {dotted!r} must be section.key", dotted)
    section, key = dotted.split(".")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return section, key, parsed


def load_raw(path: str | Path | None = None, overrides=()) -> tuple[dict, str | None, str | None]:
    """Merged config dict plus the file text and name used for diagnostics."""
    raw = defaults()
    text = source = None
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", source=source) from exc
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            m = re.search(r"line (\d+)", str(exc))
            raise ConfigError(f"malformed TOML: {exc}", line=int(m.group(1)) if m else None,
                              source=source) from exc
        raw = merge(raw, data, text, source)
    for item in overrides:
        section, key, value = parse_override(item)
        raw = merge(raw, {section: {key: value}}, source="--set")
    return raw, text, source


def _get(raw, section, key, kind, text, source):
    value = raw[section][key]
    ok = {
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        bool: lambda v: isinstance(v, bool),
        str: lambda v: isinstance(v, str),
        "pair": lambda v: (isinstance(v, list) and len(v) == 2
                           and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)),
        list: lambda v: isinstance(v, list) and len(v) > 0,
    }[kind](value)
    if not ok:
        want = {"pair": "a list of two numbers", list: "a non-empty list"}.get(
            kind, getattr(kind, "__name__", str(kind)))
        raise ConfigError(f"expected {want}, got {value!r}", f"{section}.{key}",
                          _key_line(text, section, key), source)
    if kind is float:
        return float(value)
    if kind == "pair":
        return (float(value[0]), float(value[1]))
    return value


def build_config(raw: dict, text: str | None = None, source: str | None = None) -> CliConfig:
    """Typed objects from a merged dict; domain validation errors carry the key."""
    def g(section, key, kind):
        return _get(raw, section, key, kind, text, source)

    def guard(section, key, fn):
        try:
            return fn()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), f"{section}.{key}" if key else section,
                              _key_line(text, section, key) if key else _key_line(text, section),
                              source) from exc

    seed = g("run", "seed", int)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be in [0, 2**64)", "run.seed",
                          _key_line(text, "run", "seed"), source)
    radio = guard("radio", None, lambda: RadioParams(
        p0=g("radio", "p0_db", float), alpha=g("radio", "alpha", float),
        sigma_db=g("radio", "sigma_db", float)))
    attack = guard("attack", None, lambda: AttackSpec(
        kind=g("attack", "kind", str), sigma_attack_m=g("attack", "sigma_attack_m", float),
        bias_db=g("attack", "bias_db", float), persistent=g("attack", "persistent", bool)))
    scenario = guard("scenario", None, lambda: ScenarioConfig(
        field_size_m=g("scenario", "field_size_m", "pair"),
        n_anchors=g("scenario", "n_anchors", int),
        n_malicious=g("scenario", "n_malicious", int),
        n_steps=g("scenario", "n_steps", int),
        start_m=g("scenario", "start_m", "pair"),
        velocity_mps=g("scenario", "velocity_mps", "pair"),
        radio=radio, attack=attack, seed=seed))
    detector = guard("detector", None, lambda: DetectorConfig(
        gamma=g("detector", "gamma", float),
        warmup=g("detector", "warmup_steps", int),
        window=g("detector", "window_steps", int),
        mode=g("detector", "mode", str),
        maha_margin=g("detector", "maha_margin", float),
        min_anchors=g("detector", "min_anchors", int),
        innovation_domain=g("detector", "innovation_domain", str)))
    filt = guard("filter", None, lambda: FilterConfig(
        q_accel=g("filter", "q_accel_m2", float),
        noise_scale=g("filter", "noise_scale", str),
        init=g("filter", "init", str),
        pos_var=g("filter", "pos_var_m2", float),
        vel_var=g("filter", "vel_var_m2", float)))
    axis = guard("sweep", "axis", lambda: SweepAxis(g("sweep", "axis", str)))
    values = tuple(g("sweep", "values", list))
    trials = g("run", "trials", int)
    workers = g("run", "workers", int)
    if trials < 1:
        raise ConfigError("must be >= 1", "run.trials", _key_line(text, "run", "trials"), source)
    if workers < 1:
        raise ConfigError("must be >= 1", "run.workers", _key_line(text, "run", "workers"), source)
    guard("sweep", "values", lambda: SweepSpec(axis, values, trials, scenario, detector, filt, seed))
    pct = g("calibration", "percentile", float)
    if not 0 < pct <= 100:
        raise ConfigError("must be in (0, 100]", "calibration.percentile",
                          _key_line(text, "calibration", "percentile"), source)
    cal_trials = g("calibration", "trials", int)
    if cal_trials < 1:
        raise ConfigError("must be >= 1", "calibration.trials",
                          _key_line(text, "calibration", "trials"), source)
    return CliConfig(raw=raw, scenario=scenario, detector=detector, filt=filt,
                     sweep_axis=axis, sweep_values=values, seed=seed, trials=trials,
                     workers=workers, out_dir=Path(g("run", "out_dir", str)),
                     calibration_percentile=pct, calibration_trials=cal_trials)


def load_config(path: str | Path | None = None, overrides=()) -> CliConfig:
    raw, text, source = load_raw(path, overrides)
    return build_config(raw, text, source)


def parse_config(text: str, source: str = "<string>") -> CliConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed TOML: {exc}", line=int(m.group(1)) if m else None,
                          source=source) from exc
    return build_config(merge(defaults(), data, text, source), text, source)


def dump_toml(raw: dict) -> str:
    return tomli_w.dumps(raw)
