"""Monte-Carlo trials, parameter sweeps and threshold calibration.

Per-trial seeds are derived from ``(root_seed, trial_index)`` only, so the same
trial index sees the same deployment and noise at every sweep point, and the
result does not depend on how trials are scheduled across workers.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from securetrack.detection import (
    DetectorConfig,
    DetectorMode,
    RunReport,
    delta_spread_ratio,
    secure_track,
    track_pass,
)
from securetrack.ekf import FilterConfig
from securetrack.scenario import ScenarioConfig, build

DEFAULT_TRIALS = 500
DEFAULT_PERCENTILE = 99.25


class SweepAxis(str, Enum):
    N_ANCHORS = "n_anchors"
    N_MALICIOUS = "n_malicious"
    SIGMA_DB = "sigma_db"
    SIGMA_ATTACK = "sigma_attack"


def trial_seed(root_seed: int, index: int) -> int:
    """64-bit seed for trial ``index`` under ``root_seed``."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def run_trial(cfg: ScenarioConfig, detector: DetectorConfig | None = None,
              seed: int | None = None, filt: FilterConfig | None = None) -> RunReport:
    """Build one scenario, track it securely and score the final pass.

    The report's ``sq_error`` holds the per-step squared position error and
    ``mse`` its mean over the steps from ``detector.warmup`` on.
    """
    detector = detector or DetectorConfig()
    filt = filt or FilterConfig()
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    truth, stream = build(cfg)
    noise = filt.noise_model(cfg.radio.sigma_db)
    report = secure_track(stream, detector, noise, cfg.radio.alpha, filt=filt)
    diff = report.estimates[:, [0, 2]] - truth.target
    report.sq_error = (diff * diff).sum(axis=1)
    scored = report.sq_error[detector.warmup:]
    report.mse = float(scored.mean()) if len(scored) else float("nan")
    report.truth = truth
    report.seed = cfg.seed
    return report


@dataclass(frozen=True)
class TrialSummary:
    """The handful of numbers a sweep needs from one trial."""

    seed: int
    n_malicious: int
    n_honest: int
    flagged_malicious: int
    flagged_honest: int
    mse: float
    runtime_s: float = 0.0
    n_passes: int = 1
    observable: bool = True

    @classmethod
    def from_report(cls, report: RunReport, runtime_s: float = 0.0) -> TrialSummary:
        mal = report.truth.malicious
        flagged = np.zeros(len(mal), dtype=bool)
        flagged[list(report.flagged)] = True
        return cls(seed=report.seed,
                   n_malicious=int(mal.sum()),
                   n_honest=int((~mal).sum()),
                   flagged_malicious=int((flagged & mal).sum()),
                   flagged_honest=int((flagged & ~mal).sum()),
                   mse=report.mse,
                   runtime_s=runtime_s,
                   n_passes=report.n_passes,
                   observable=report.observable)


@dataclass(frozen=True)
class MetricRow:
    axis: str
    value: float
    true_detection_rate: float | None
    false_detection_rate: float | None
    mse: float
    trials: int
    mean_runtime_s: float = 0.0
    flagged_malicious: int = 0
    total_malicious: int = 0
    flagged_honest: int = 0
    total_honest: int = 0
    unobservable: int = 0

    # Runtime is excluded so that CSVs are reproducible across machines and schedules.
    CSV_FIELDS = ("axis", "value", "true_detection_rate", "false_detection_rate", "mse",
                  "trials", "flagged_malicious", "total_malicious", "flagged_honest",
                  "total_honest", "unobservable")

    def csv_row(self) -> list[str]:
        return [_fmt(getattr(self, f)) for f in self.CSV_FIELDS]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def aggregate(axis: str, value: float, trials: list[TrialSummary]) -> MetricRow:
    """Pool trial counts into rates; an empty denominator gives ``None``."""
    tm = sum(t.n_malicious for t in trials)
    th = sum(t.n_honest for t in trials)
    fm = sum(t.flagged_malicious for t in trials)
    fh = sum(t.flagged_honest for t in trials)
    return MetricRow(
        axis=axis,
        value=value,
        true_detection_rate=fm / tm if tm else None,
        false_detection_rate=fh / th if th else None,
        mse=float(np.mean([t.mse for t in trials])),
        trials=len(trials),
        mean_runtime_s=float(np.mean([t.runtime_s for t in trials])),
        flagged_malicious=fm,
        total_malicious=tm,
        flagged_honest=fh,
        total_honest=th,
        unobservable=sum(not t.observable for t in trials),
    )


@dataclass(frozen=True)
class SweepSpec:
    axis: SweepAxis
    values: tuple
    trials: int = DEFAULT_TRIALS
    base: ScenarioConfig = field(default_factory=ScenarioConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    filt: FilterConfig = field(default_factory=FilterConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "axis", SweepAxis(self.axis))
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ValueError("sweep values must be non-empty")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        for v in self.values:
            self.config_for(v)

    def config_for(self, value) -> ScenarioConfig:
        base = self.base
        if self.axis is SweepAxis.N_ANCHORS:
            return replace(base, n_anchors=_as_int(value))
        if self.axis is SweepAxis.N_MALICIOUS:
            return replace(base, n_malicious=_as_int(value))
        if self.axis is SweepAxis.SIGMA_DB:
            return replace(base, radio=replace(base.radio, sigma_db=float(value)))
        return replace(base, attack=replace(base.attack, sigma_attack_m=float(value)))

    def trial_seeds(self) -> list[int]:
        return [trial_seed(self.seed, i) for i in range(self.trials)]


def _as_int(value) -> int:
    if float(value) != int(value):
        raise ValueError(f"expected an integer axis value, got {value}")
    return int(value)


def _trial_task(args) -> TrialSummary:
    cfg, detector, filt, seed = args
    t0 = time.perf_counter()
    report = run_trial(cfg, detector, seed, filt)
    return TrialSummary.from_report(report, time.perf_counter() - t0)


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def run_sweep(spec: SweepSpec, workers: int = 1) -> list[MetricRow]:
    """One :class:`MetricRow` per axis value, each pooling ``spec.trials`` trials."""
    seeds = spec.trial_seeds()
    tasks = [(spec.config_for(v), spec.detector, spec.filt, s)
             for v in spec.values for s in seeds]
    results = _map(_trial_task, tasks, workers)
    rows = []
    for j, v in enumerate(spec.values):
        chunk = results[j * spec.trials:(j + 1) * spec.trials]
        rows.append(aggregate(spec.axis.value, v, chunk))
    return rows


def spearman_trend(values, metric) -> float:
    """Spearman rank correlation of ``metric`` against ``values`` (NaN if constant)."""
    from scipy.stats import spearmanr

    rho = spearmanr(values, metric).statistic
    return float(rho)


@dataclass(frozen=True)
class Calibration:
    gamma: float
    maha_margin: float
    percentile: float
    trials: int
    seed: int
    samples_delta: int
    samples_maha: int

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "maha_margin": self.maha_margin,
            "percentile": self.percentile,
            "trials": self.trials,
            "seed": self.seed,
            "samples_delta": self.samples_delta,
            "samples_maha": self.samples_maha,
        }


def _calibration_task(args):
    cfg, detector, filt, seed = args
    cfg = replace(cfg, seed=seed)
    truth, stream = build(cfg)
    rec = track_pass(stream, range(stream.n_anchors), detector,
                     filt.noise_model(cfg.radio.sigma_db), cfg.radio.alpha,
                     detect=False, filt=filt)
    return step_max_ratios(rec.delta, rec.maha, detector)


def step_max_ratios(delta, maha, detector: DetectorConfig):
    """Largest scale-free statistic at each detection step of one pass.

    For the delta test this is ``max_i (delta_i - avg) / (max - min)``; for the
    Mahalanobis test ``max_i stat_i / mean(stat)``. A classifier flags at a
    step exactly when this value exceeds gamma or the margin respectively.
    """
    d = delta[detector.warmup:]
    d = d[np.isfinite(d).sum(axis=1) >= 2]
    dr = np.full(len(d), np.nan)
    for j, row in enumerate(d):
        ratio = delta_spread_ratio(row[np.isfinite(row)])
        if np.isfinite(ratio).any():
            dr[j] = np.nanmax(ratio)

    m = maha[detector.warmup + detector.window:]
    m = m[np.isfinite(m).sum(axis=1) >= 2]
    mr = np.full(len(m), np.nan)
    for j, row in enumerate(m):
        row = row[np.isfinite(row)]
        mu = row.mean()
        mr[j] = row.max() / mu if mu > 0 else np.nan
    return dr[np.isfinite(dr)], mr[np.isfinite(mr)]


def calibrate(cfg: ScenarioConfig, trials: int = 200, percentile: float = DEFAULT_PERCENTILE,
              seed: int = 1, detector: DetectorConfig | None = None,
              filt: FilterConfig | None = None, workers: int = 1) -> Calibration:
    """Estimate gamma and the Mahalanobis margin from attack-free runs.

    Each trial runs one undetected pass over all anchors; the per-step maxima
    of the two scale-free statistics are pooled and the thresholds set at
    ``percentile``.
    """
    if cfg.n_malicious > 0:
        raise ValueError("calibration needs an attack-free config (n_malicious = 0)")
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    detector = detector or DetectorConfig()
    filt = filt or FilterConfig()
    tasks = [(cfg, detector, filt, trial_seed(seed, i)) for i in range(trials)]
    out = _map(_calibration_task, tasks, workers)
    d = np.concatenate([o[0] for o in out]) if out else np.array([])
    m = np.concatenate([o[1] for o in out]) if out else np.array([])
    gamma = float(np.percentile(d, percentile)) if len(d) else 0.0
    margin = float(np.percentile(m, percentile)) if len(m) else 1.0
    if not math.isfinite(gamma):
        gamma = 0.0
    return Calibration(gamma=max(gamma, 0.0), maha_margin=max(margin, 1.0),
                       percentile=percentile, trials=trials, seed=seed,
                       samples_delta=len(d), samples_maha=len(m))


def paired_detection(cfg: ScenarioConfig, trials: int, seed: int = 0,
                     detectors: dict[str, DetectorConfig] | None = None,
                     filt: FilterConfig | None = None, workers: int = 1,
                     ) -> dict[str, MetricRow]:
    """Run several detector configs on identical trial seeds."""
    detectors = detectors or {
        m.value: DetectorConfig(mode=m) for m in DetectorMode
    }
    out = {}
    for name, det in detectors.items():
        spec = SweepSpec(SweepAxis.N_MALICIOUS, (cfg.n_malicious,), trials, cfg, det,
                         filt or FilterConfig(), seed)
        out[name] = run_sweep(spec, workers)[0]
    return out
