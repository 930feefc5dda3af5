"""Log-distance path loss with log-normal shadowing.

Received power is modelled against the *squared* anchor distance::

    pr_db = p0 - alpha * log10(d^2 / d0^2) + n

so ``alpha = 10`` is free space (exponent 2) and the default ``alpha = 20``
an exponent of 4, typical of cluttered indoor links. Inverting the
model gives the squared-distance measurement fed to the filter, which carries
the shadowing as a multiplicative factor ``10 ** (-n / alpha)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REFERENCE_DISTANCE_M = 1.0


class DegenerateGeometryError(ValueError):
    """Raised when a target coincides with an anchor (log of zero distance)."""


@dataclass(frozen=True)
class RadioParams:
    """Path-loss parameters.

    Attributes:
        p0: Power at the 1 m reference distance, dB.
        alpha: Path-loss parameter multiplying ``log10`` of the squared distance.
        sigma_db: Standard deviation of the shadowing term, dB.
        d0: Reference distance in metres. Only 1.0 is supported.
    """

    p0: float = -40.0
    alpha: float = 20.0
    sigma_db: float = 0.5
    d0: float = REFERENCE_DISTANCE_M

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.sigma_db >= 0:
            raise ValueError(f"sigma_db must be non-negative, got {self.sigma_db}")
        if self.d0 != REFERENCE_DISTANCE_M:
            raise ValueError(f"d0 is fixed at 1.0 m, got {self.d0}")


@dataclass(frozen=True)
class RssSample:
    anchor_id: int
    pr_db: float
    k: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"time step must be >= 0, got {self.k}")


def emit_rss(params: RadioParams, target_pos, anchor_pos, shadow_db: float = 0.0,
             anchor_id: int = 0, k: int = 0) -> RssSample:
    """Received power at ``anchor_pos`` from a transmitter at ``target_pos``.

    ``shadow_db`` is a single shadowing draw; the caller owns the RNG.
    """
    dx = float(target_pos[0]) - float(anchor_pos[0])
    dy = float(target_pos[1]) - float(anchor_pos[1])
    sq = dx * dx + dy * dy
    if sq == 0.0:
        raise DegenerateGeometryError(
            f"target {tuple(target_pos)} coincides with anchor {anchor_id}")
    pr = params.p0 - params.alpha * np.log10(sq) + shadow_db
    return RssSample(anchor_id=anchor_id, pr_db=float(pr), k=k)


def rss_to_sq_distance(params: RadioParams, sample: RssSample) -> float:
    """Squared-distance measurement ``10 ** (-(pr_db - p0) / alpha)`` in m^2."""
    return float(sq_distance_from_db(params, sample.pr_db))


def rss_to_distance(params: RadioParams, sample: RssSample) -> float:
    """RSS-implied range in metres (square root of the squared-distance measurement)."""
    return float(np.sqrt(rss_to_sq_distance(params, sample)))


def sq_distance_from_db(params: RadioParams, pr_db):
    """Vectorised inversion of the path-loss model; NaN inputs stay NaN."""
    return np.power(10.0, -(np.asarray(pr_db, dtype=float) - params.p0) / params.alpha)


def rss_from_sq_distance(params: RadioParams, sq_dist, shadow_db=0.0):
    """Vectorised forward model over arrays of squared distances (all > 0)."""
    sq_dist = np.asarray(sq_dist, dtype=float)
    return params.p0 - params.alpha * np.log10(sq_dist) + shadow_db
