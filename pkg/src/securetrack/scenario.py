"""Ground-truth synthesis: anchor deployment, target path, honest and malicious streams.

Every random draw comes from a named substream of one root seed, so changing
one knob (say, switching the attack off) leaves the other draws untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from securetrack.propagation import RadioParams, rss_from_sq_distance, sq_distance_from_db

log = logging.getLogger(__name__)

_SUBSTREAMS = {"deployment": 0, "selection": 1, "attack": 2, "shadowing": 3}


class AttackKind(str, Enum):
    LOCATION = "location_perturbation"
    RSS_BIAS = "rss_bias"


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind = AttackKind.LOCATION
    sigma_attack_m: float = 20.0
    bias_db: float = 0.0
    persistent: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not self.sigma_attack_m >= 0:
            raise ValueError(f"sigma_attack_m must be >= 0, got {self.sigma_attack_m}")


@dataclass(frozen=True)
class ScenarioConfig:
    """One deployment and target run.

    The target moves in a straight line from ``start_m`` with constant
    ``velocity_mps`` (metres per step).
    """

    field_size_m: tuple[float, float] = (100.0, 100.0)
    n_anchors: int = 6
    n_malicious: int = 1
    n_steps: int = 100
    start_m: tuple[float, float] = (10.0, 10.0)
    velocity_mps: tuple[float, float] = (0.8, 0.8)
    radio: RadioParams = field(default_factory=RadioParams)
    attack: AttackSpec = field(default_factory=AttackSpec)
    seed: int = 0

    def __post_init__(self):
        if self.n_anchors < 1:
            raise ValueError(f"n_anchors must be >= 1, got {self.n_anchors}")
        if not 0 <= self.n_malicious < self.n_anchors:
            raise ValueError(
                f"n_malicious must satisfy 0 <= n_malicious < n_anchors "
                f"({self.n_malicious} vs {self.n_anchors})")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if min(self.field_size_m) <= 0:
            raise ValueError(f"field_size_m must be positive, got {self.field_size_m}")


class ScenarioRng:
    """Independent generators per purpose, all derived from one root seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens = {
            name: np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(self.seed, spawn_key=(idx,))))
            for name, idx in _SUBSTREAMS.items()
        }

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._gens[name]


@dataclass
class GroundTruth:
    """What actually happened, against which estimates are scored.

    ``reported`` has shape ``(n_steps, n_anchors, 2)``; for honest anchors it
    equals ``anchors`` at every step.
    """

    target: np.ndarray          # (n_steps, 2)
    anchors: np.ndarray         # (n_anchors, 2) true positions
    reported: np.ndarray        # (n_steps, n_anchors, 2) positions the tracker is told
    malicious: np.ndarray       # (n_anchors,) bool

    @property
    def honest(self) -> np.ndarray:
        return ~self.malicious

    def to_dict(self) -> dict:
        out = {
            "target_m": self.target.tolist(),
            "anchors_m": self.anchors.tolist(),
            "malicious": self.malicious.tolist(),
        }
        if np.all(self.reported == self.reported[0]):
            out["reported_m"] = self.reported[0].tolist()
        else:
            out["reported_per_step_m"] = self.reported.tolist()
        return out


@dataclass
class MeasurementSet:
    """Measurements of one step as the tracker sees them."""

    k: int
    anchor_ids: np.ndarray
    z: np.ndarray               # squared distances, m^2
    positions: np.ndarray       # reported anchor positions, m


@dataclass
class MeasurementStream:
    """All steps of one run. Dropped samples are NaN in ``pr_db`` and ``z``."""

    pr_db: np.ndarray           # (n_steps, n_anchors)
    z: np.ndarray               # (n_steps, n_anchors)
    positions: np.ndarray       # (n_steps, n_anchors, 2)
    dropped: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.z.shape[0]

    @property
    def n_anchors(self) -> int:
        return self.z.shape[1]

    def step(self, k: int, live=None) -> MeasurementSet:
        ids = np.arange(self.n_anchors) if live is None else np.asarray(live, dtype=int)
        ok = ids[np.isfinite(self.z[k, ids])]
        return MeasurementSet(k, ok, self.z[k, ok], self.positions[k, ok])

    def __iter__(self):
        return (self.step(k) for k in range(self.n_steps))


def target_path(cfg: ScenarioConfig) -> np.ndarray:
    k = np.arange(cfg.n_steps, dtype=float)[:, None]
    return np.asarray(cfg.start_m, dtype=float) + k * np.asarray(cfg.velocity_mps, dtype=float)


def deploy(cfg: ScenarioConfig, rng: ScenarioRng | None = None) -> GroundTruth:
    """Place anchors, choose the malicious subset and draw their false positions."""
    rng = rng or ScenarioRng(cfg.seed)
    size = np.asarray(cfg.field_size_m, dtype=float)
    anchors = rng["deployment"].uniform(0.0, 1.0, size=(cfg.n_anchors, 2)) * size

    malicious = np.zeros(cfg.n_anchors, dtype=bool)
    if cfg.n_malicious:
        malicious[rng["selection"].choice(cfg.n_anchors, cfg.n_malicious, replace=False)] = True

    reported = np.broadcast_to(anchors, (cfg.n_steps, cfg.n_anchors, 2)).copy()
    atk = cfg.attack
    if atk.kind is AttackKind.LOCATION and cfg.n_malicious:
        # Drawn for every anchor so the offsets do not depend on which are malicious.
        if atk.persistent:
            offsets = rng["attack"].standard_normal((cfg.n_anchors, 2)) * atk.sigma_attack_m
            offsets = np.broadcast_to(offsets, reported.shape)
        else:
            offsets = rng["attack"].standard_normal(reported.shape) * atk.sigma_attack_m
        reported[:, malicious] += offsets[:, malicious]

    return GroundTruth(target=target_path(cfg), anchors=anchors,
                       reported=reported, malicious=malicious)


def synthesize_measurements(truth: GroundTruth, radio: RadioParams,
                            rng: ScenarioRng, attack: AttackSpec | None = None,
                            ) -> MeasurementStream:
    """RSS from the true anchor positions, paired with the reported positions.

    Shadowing draws are taken for the full step-by-anchor grid up front, so
    they are independent of the attack and of ``sigma_db`` (which only scales
    them). A target sitting exactly on an anchor drops that sample.
    """
    attack = attack or AttackSpec()
    n_steps, n_anchors = len(truth.target), len(truth.anchors)
    diff = truth.target[:, None, :] - truth.anchors[None, :, :]
    sq = np.einsum("kij,kij->ki", diff, diff)
    shadow = rng["shadowing"].standard_normal((n_steps, n_anchors)) * radio.sigma_db

    dropped = [(int(k), int(i)) for k, i in zip(*np.nonzero(sq == 0.0))]
    for k, i in dropped:
        log.warning("target on anchor %d at step %d; sample dropped", i, k)
    safe = np.where(sq == 0.0, 1.0, sq)
    pr = rss_from_sq_distance(radio, safe, shadow)
    if attack.kind is AttackKind.RSS_BIAS:
        pr = pr + np.where(truth.malicious, attack.bias_db, 0.0)[None, :]
    pr[sq == 0.0] = np.nan
    z = sq_distance_from_db(radio, pr)
    return MeasurementStream(pr_db=pr, z=z, positions=truth.reported.copy(), dropped=dropped)


def build(cfg: ScenarioConfig) -> tuple[GroundTruth, MeasurementStream]:
    rng = ScenarioRng(cfg.seed)
    truth = deploy(cfg, rng)
    return truth, synthesize_measurements(truth, cfg.radio, rng, cfg.attack)
