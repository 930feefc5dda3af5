"""Extended Kalman filter for a constant-velocity target ranged by RSS.

State ordering is ``[x, vx, y, vy]`` with unit time step. Measurements are
squared distances to each live anchor, ``h_i(x) = (x - x_i)^2 + (y - y_i)^2``,
and the shadowing noise enters through the dB domain, so its Jacobian ``V``
scales with the squared distance (the received one by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LN10 = np.log(10.0)
COND_LIMIT = 1e12
RIDGE_SCALE = 1e-9

# Constant-velocity transition for a unit step.
A = np.array([
    [1.0, 1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 1.0],
    [0.0, 0.0, 0.0, 1.0],
])
I4 = np.eye(4)


class FilterNumericalError(ArithmeticError):
    """Innovation covariance could not be inverted even after regularisation."""


@dataclass(frozen=True)
class TargetState:
    x: float
    vx: float
    y: float
    vy: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.vx, self.y, self.vy], dtype=float)

    @classmethod
    def from_array(cls, arr) -> TargetState:
        x, vx, y, vy = (float(v) for v in arr)
        return cls(x, vx, y, vy)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class EkfBelief:
    """Gaussian belief over the target state.

    ``mean`` is a length-4 array in state order, ``cov`` the matching 4x4
    covariance.
    """

    mean: np.ndarray
    cov: np.ndarray

    @property
    def position(self) -> np.ndarray:
        return self.mean[[0, 2]]

    @property
    def state(self) -> TargetState:
        return TargetState.from_array(self.mean)


def cv_process_noise(q: float) -> np.ndarray:
    """Discrete white-acceleration process noise for the unit-step CV model."""
    block = q * np.array([[1.0 / 3.0, 0.5], [0.5, 1.0]])
    out = np.zeros((4, 4))
    out[:2, :2] = block
    out[2:, 2:] = block
    return out


@dataclass(frozen=True)
class NoiseModel:
    """Process noise ``q`` (4x4) and dB-domain measurement variance ``r_db``.

    ``r_db`` is either a scalar shared by all anchors or one variance per
    anchor, in the same order as the anchors passed to the update.
    """

    q: np.ndarray = field(default_factory=lambda: cv_process_noise(0.001))
    r_db: float | np.ndarray = 0.25
    noise_scale: str = "measured"

    def __post_init__(self):
        if self.noise_scale not in ("measured", "predicted"):
            raise ValueError(f"noise_scale must be 'measured' or 'predicted', got {self.noise_scale!r}")
        q = np.asarray(self.q, dtype=float)
        if q.shape != (4, 4):
            raise ValueError(f"q must be 4x4, got shape {q.shape}")
        if np.linalg.eigvalsh(0.5 * (q + q.T)).min() < -1e-12:
            raise ValueError("q must be positive semidefinite")
        if np.any(np.asarray(self.r_db) <= 0):
            raise ValueError("r_db entries must be positive")
        object.__setattr__(self, "q", q)

    @classmethod
    def from_params(cls, q_accel: float = 0.001, sigma_db: float = 0.5,
                    floor_db: float = 1e-6, noise_scale: str = "measured") -> NoiseModel:
        """CV process noise plus ``sigma_db**2`` measurement variance.

        ``floor_db`` keeps R positive when the shadowing is switched off.
        """
        return cls(q=cv_process_noise(q_accel), r_db=max(sigma_db**2, floor_db**2),
                   noise_scale=noise_scale)


@dataclass(frozen=True)
class FilterConfig:
    """Tracker tuning that is independent of the scenario.

    Attributes:
        q_accel: White-acceleration intensity of the CV process noise, m^2/step^3.
        noise_scale: Where the shadowing Jacobian is evaluated, ``"measured"``
            (at the received squared distance) or ``"predicted"`` (at the prior).
        init: ``"multilateration"`` or ``"centroid"`` starting position.
        pos_var: Initial position variance, m^2.
        vel_var: Initial velocity variance, (m/step)^2.
    """

    q_accel: float = 0.001
    noise_scale: str = "measured"
    init: str = "multilateration"
    pos_var: float = 100.0
    vel_var: float = 10.0

    def __post_init__(self):
        if self.q_accel < 0:
            raise ValueError(f"q_accel must be >= 0, got {self.q_accel}")
        if self.noise_scale not in ("measured", "predicted"):
            raise ValueError(f"noise_scale must be 'measured' or 'predicted', got {self.noise_scale!r}")
        if self.init not in ("multilateration", "centroid"):
            raise ValueError(f"init must be 'multilateration' or 'centroid', got {self.init!r}")
        if self.pos_var <= 0 or self.vel_var <= 0:
            raise ValueError("initial variances must be positive")

    def noise_model(self, sigma_db: float) -> NoiseModel:
        return NoiseModel.from_params(self.q_accel, sigma_db, noise_scale=self.noise_scale)


def multilaterate(anchor_positions, sq_dist) -> np.ndarray:
    """Linear least-squares position from squared ranges.

    Solves ``z_i - |a_i|^2 = -2 a_i . p + |p|^2`` for ``(p, |p|^2)``; needs at
    least three non-collinear anchors.
    """
    a = np.asarray(anchor_positions, dtype=float).reshape(-1, 2)
    z = np.asarray(sq_dist, dtype=float).reshape(-1)
    M = np.column_stack([-2.0 * a, np.ones(len(a))])
    theta, *_ = np.linalg.lstsq(M, z - (a * a).sum(axis=1), rcond=None)
    return theta[:2]


def initial_belief(anchor_positions, sq_dist=None, pos_var: float = 100.0,
                   vel_var: float = 10.0) -> EkfBelief:
    """Zero-velocity starting belief.

    Centred on the multilateration fix of ``sq_dist`` when at least three
    ranges are given, otherwise on the anchor centroid.
    """
    anchors = np.asarray(anchor_positions, dtype=float).reshape(-1, 2)
    if sq_dist is not None and len(anchors) >= 3:
        c = multilaterate(anchors, sq_dist)
    else:
        c = anchors.mean(axis=0)
    mean = np.array([c[0], 0.0, c[1], 0.0])
    cov = np.diag([pos_var, vel_var, pos_var, vel_var])
    return EkfBelief(mean, cov)


def time_update(belief: EkfBelief, noise: NoiseModel) -> EkfBelief:
    mean = A @ belief.mean
    cov = A @ belief.cov @ A.T + noise.q
    return EkfBelief(mean, 0.5 * (cov + cov.T))


def predicted_sq_distances(mean, anchors) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 2)
    dx = mean[0] - anchors[:, 0]
    dy = mean[2] - anchors[:, 1]
    return dx * dx + dy * dy


def measurement_jacobian_h(prior_mean, anchors) -> np.ndarray:
    """Jacobian of the squared-distance measurements w.r.t. the state.

    Row ``i`` is ``[2(x - x_i), 0, 2(y - y_i), 0]`` evaluated at ``prior_mean``.
    """
    mean = _as_mean(prior_mean)
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 2)
    if len(anchors) == 0:
        raise ValueError("at least one anchor is required")
    H = np.zeros((len(anchors), 4))
    H[:, 0] = 2.0 * (mean[0] - anchors[:, 0])
    H[:, 2] = 2.0 * (mean[2] - anchors[:, 1])
    return H


def noise_jacobian_v(prior_mean, anchors, alpha: float) -> np.ndarray:
    """Diagonal Jacobian w.r.t. the dB shadowing: ``-(ln 10 / alpha) * d_i^2``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    d2 = predicted_sq_distances(_as_mean(prior_mean), anchors)
    return np.diag(-(LN10 / alpha) * d2)


def measurement_update(prior: EkfBelief, z, anchors, noise: NoiseModel,
                       alpha: float) -> tuple[EkfBelief, np.ndarray]:
    """Fold one vector of squared-distance measurements into ``prior``.

    Returns the posterior and the raw innovation ``z - h(prior)``, one entry
    per anchor. Both Jacobians are evaluated at the prior mean.

    Raises:
        ValueError: if ``z`` and ``anchors`` disagree in length.
        FilterNumericalError: if the innovation covariance stays singular
            after the ridge is applied.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 2)
    if len(z) != len(anchors):
        raise ValueError(f"{len(z)} measurements for {len(anchors)} anchors")
    m = prior.mean
    P = prior.cov
    h = predicted_sq_distances(m, anchors)
    innovation = z - h

    H = measurement_jacobian_h(m, anchors)
    if not H.any():
        return prior, innovation
    v = -(LN10 / alpha) * (h if noise.noise_scale == "predicted" else z)
    r = np.broadcast_to(np.asarray(noise.r_db, dtype=float), h.shape)
    HP = H @ P
    S = HP @ H.T + np.diag(v * v * r)
    S = 0.5 * (S + S.T)
    S = _regularise(S)
    try:
        # K = P H^T S^-1, and S, P are symmetric.
        K = np.linalg.solve(S, HP).T
    except np.linalg.LinAlgError as exc:
        raise FilterNumericalError("innovation covariance is singular") from exc

    mean = m + K @ innovation
    cov = (I4 - K @ H) @ P
    cov = 0.5 * (cov + cov.T)
    return EkfBelief(mean, cov), innovation


def _regularise(S: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvalsh(S)
    top = np.abs(eig).max()
    low = np.abs(eig).min()
    if top == 0.0:
        raise FilterNumericalError("innovation covariance is identically zero")
    if low == 0.0 or top / low > COND_LIMIT:
        ridge = RIDGE_SCALE * np.trace(S) / len(S)
        S = S + ridge * np.eye(len(S))
        if np.linalg.eigvalsh(S).min() <= 0.0:
            raise FilterNumericalError("innovation covariance is singular after ridge")
    return S


def _as_mean(prior_mean) -> np.ndarray:
    if isinstance(prior_mean, TargetState):
        return prior_mean.as_array()
    if isinstance(prior_mean, EkfBelief):
        return prior_mean.mean
    return np.asarray(prior_mean, dtype=float)
