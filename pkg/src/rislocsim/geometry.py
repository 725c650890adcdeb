"""Ground-truth kinematics, clock models, and channel-parameter geometry.

All clock quantities are kept in range-equivalent units: the clock bias in
meters and the clock drift in meters per second.  Pseudoranges are true
distances plus the epoch clock bias; pseudorange rates are radial speeds
plus the clock drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError

SPEED_OF_LIGHT = 299_792_458.0  # m/s

# Ranges below this are treated as degenerate geometry rather than clamped.
MIN_RANGE_M = 1e-6


def _as_vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise GeometryError(f"{name} must be a 3-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"{name} must be finite")
    return v


@dataclass(frozen=True)
class UEState:
    """Initial user state: position, constant velocity, clock bias/drift.

    Parameters
    ----------
    p : array_like, shape (3,)
        Initial position at the first epoch [m].
    v : array_like, shape (3,)
        Constant velocity [m/s].
    clock_bias_m : float
        Initial clock bias in range units [m].
    clock_drift_mps : float
        Clock drift in range-rate units [m/s].
    """

    p: np.ndarray
    v: np.ndarray
    clock_bias_m: float = 0.0
    clock_drift_mps: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "p", _as_vec3(self.p, "p"))
        object.__setattr__(self, "v", _as_vec3(self.v, "v"))
        if not (np.isfinite(self.clock_bias_m) and np.isfinite(self.clock_drift_mps)):
            raise GeometryError("clock parameters must be finite")

    @property
    def theta(self) -> np.ndarray:
        """Clock-free state [p, v], shape (6,)."""
        return np.concatenate([self.p, self.v])

    @property
    def xi(self) -> np.ndarray:
        """Full state [p, v, bias, drift], shape (8,)."""
        return np.concatenate([self.p, self.v, [self.clock_bias_m, self.clock_drift_mps]])

    @classmethod
    def from_xi(cls, xi) -> "UEState":
        xi = np.asarray(xi, dtype=float).reshape(-1)
        if xi.shape != (8,):
            raise GeometryError(f"state vector must have 8 entries, got {xi.shape}")
        return cls(p=xi[:3], v=xi[3:6], clock_bias_m=float(xi[6]), clock_drift_mps=float(xi[7]))


@dataclass(frozen=True)
class AnchorSet:
    """Fixed base-station and reflective-panel geometry.

    The panel orientation ``R`` maps panel-local coordinates to the global
    frame; the panel lies in its local XOY plane.  The arrival direction pair
    ``phi_a`` is derived from the base-station direction in panel-local
    coordinates and is fixed across epochs.
    """

    q1: np.ndarray                      # BS position [m]
    q2: np.ndarray                      # panel position [m]
    R: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "q1", _as_vec3(self.q1, "q1"))
        object.__setattr__(self, "q2", _as_vec3(self.q2, "q2"))
        R = np.asarray(self.R, dtype=float)
        if R.shape != (3, 3):
            raise GeometryError("R must be 3x3")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-12:
            raise GeometryError("R must be orthogonal (R^T R = I within 1e-12)")
        if np.linalg.det(R) < 0:
            raise GeometryError("R must be a proper rotation (det +1)")
        object.__setattr__(self, "R", R)
        if self.d0 < MIN_RANGE_M:
            raise GeometryError("BS and panel positions coincide")

    @property
    def d0(self) -> float:
        """BS-panel distance [m]."""
        return float(np.linalg.norm(self.q1 - self.q2))

    @property
    def phi_a(self) -> np.ndarray:
        """Arrival (azimuth, elevation) pair at the panel, radians."""
        e = self.R.T @ (self.q1 - self.q2) / self.d0
        return angles_from_direction(e)


@dataclass(frozen=True)
class EpochSchedule:
    """Absolute snapshot times, strictly increasing."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        if t.size < 1 or not np.all(np.isfinite(t)):
            raise GeometryError("schedule must contain at least one finite time")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise GeometryError("snapshot times must be strictly increasing")
        object.__setattr__(self, "t", t)

    @classmethod
    def uniform(cls, n_epochs: int, spacing_s: float, t0: float = 0.0) -> "EpochSchedule":
        return cls(t0 + spacing_s * np.arange(n_epochs))

    @property
    def n_epochs(self) -> int:
        return self.t.size

    @property
    def t_n1(self) -> np.ndarray:
        """Offsets t_n - t_1, shape (N,); first entry is zero."""
        return self.t - self.t[0]


@dataclass
class ChannelParams:
    """Per-epoch channel parameters (pseudoranges, rates, departure angles).

    Each field is an array of shape (N,).  The stacked vector interleaves the
    six parameters epoch by epoch in the order (d1, d2, r1, r2, az, el).
    """

    d1: np.ndarray
    d2: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    phi_az: np.ndarray
    phi_el: np.ndarray

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(getattr(self, f), dtype=float))
                for f in ("d1", "d2", "r1", "r2", "phi_az", "phi_el")]
        n = arrs[0].size
        if any(a.shape != (n,) for a in arrs):
            raise GeometryError("all parameter arrays must share shape (N,)")
        self.d1, self.d2, self.r1, self.r2, self.phi_az, self.phi_el = arrs

    @property
    def n_epochs(self) -> int:
        return self.d1.size

    def stack(self) -> np.ndarray:
        """Interleaved (6N,) vector, epoch-major."""
        return np.column_stack(
            [self.d1, self.d2, self.r1, self.r2, self.phi_az, self.phi_el]
        ).ravel()

    @classmethod
    def from_stack(cls, eta) -> "ChannelParams":
        eta = np.asarray(eta, dtype=float).reshape(-1, 6)
        return cls(d1=eta[:, 0], d2=eta[:, 1], r1=eta[:, 2], r2=eta[:, 3],
                   phi_az=eta[:, 4], phi_el=eta[:, 5])

    def epoch(self, n: int) -> np.ndarray:
        """Six parameters of 1-based epoch ``n``."""
        i = n - 1
        return np.array([self.d1[i], self.d2[i], self.r1[i], self.r2[i],
                         self.phi_az[i], self.phi_el[i]])


def unit_frame(phi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-handed orthonormal triad (e, f, g) attached to an angle pair.

    ``e`` is the unit direction for azimuth/elevation ``phi``;
    ``f`` and ``g`` span its orthogonal complement (f horizontal).
    """
    az, el = float(phi[0]), float(phi[1])
    ca, sa, ce, se = np.cos(az), np.sin(az), np.cos(el), np.sin(el)
    e = np.array([ca * ce, sa * ce, se])
    f = np.array([-sa, ca, 0.0])
    g = np.array([-ca * se, -sa * se, ce])
    return e, f, g


def direction_derivatives(az: float, el: float) -> tuple[np.ndarray, np.ndarray]:
    """Partials of the unit direction vector wrt azimuth and elevation."""
    ca, sa, ce, se = np.cos(az), np.sin(az), np.cos(el), np.sin(el)
    de_az = np.array([-sa * ce, ca * ce, 0.0])
    de_el = np.array([-ca * se, -sa * se, ce])
    return de_az, de_el


def angles_from_direction(e) -> np.ndarray:
    """Recover (azimuth, elevation) from a unit direction vector.

    Azimuth is the two-argument arctangent in (-pi, pi] (ties at +-pi resolve
    to +pi); elevation is the arcsine of the third component, preserving its
    sign.
    """
    e = np.asarray(e, dtype=float)
    az = float(np.arctan2(e[1], e[0]))
    if az == -np.pi:
        az = np.pi
    el = float(np.arcsin(np.clip(e[2], -1.0, 1.0)))
    return np.array([az, el])


def propagate_state(ue: UEState, sched: EpochSchedule, n: int) -> tuple[np.ndarray, float]:
    """Position and clock bias at 1-based epoch ``n`` under the linear model."""
    if not 1 <= n <= sched.n_epochs:
        raise GeometryError(f"epoch index {n} out of range 1..{sched.n_epochs}")
    dt = sched.t_n1[n - 1]
    return ue.p + dt * ue.v, ue.clock_bias_m + dt * ue.clock_drift_mps


def true_channel_params(ue: UEState, anchors: AnchorSet, sched: EpochSchedule) -> ChannelParams:
    """Map a user trajectory to per-epoch channel parameters.

    Pseudoranges add the epoch clock bias to the geometric ranges; rates add
    the drift to the radial speeds; the departure angles come from the
    panel-local direction of the user.

    Raises
    ------
    GeometryError
        If the user coincides with either anchor at any epoch.
    """
    n = sched.n_epochs
    d1 = np.empty(n); d2 = np.empty(n)
    r1 = np.empty(n); r2 = np.empty(n)
    az = np.empty(n); el = np.empty(n)
    for i in range(n):
        pn, bn = propagate_state(ue, sched, i + 1)
        b1 = anchors.q1 - pn
        b2 = anchors.q2 - pn
        n1 = np.linalg.norm(b1)
        n2 = np.linalg.norm(b2)
        if n1 < MIN_RANGE_M or n2 < MIN_RANGE_M:
            raise GeometryError(f"degenerate geometry at epoch {i + 1}: zero range")
        d1[i] = n1 + bn
        d2[i] = n2 + bn
        r1[i] = ue.v @ b1 / n1 + ue.clock_drift_mps
        r2[i] = ue.v @ b2 / n2 + ue.clock_drift_mps
        e = anchors.R.T @ b2 / n2
        az[i], el[i] = angles_from_direction(e)
    return ChannelParams(d1=d1, d2=d2, r1=r1, r2=r2, phi_az=az, phi_el=el)


def clock_bias_from_ns(bias_ns: float) -> float:
    """Clock bias in seconds-equivalent nanoseconds to range units [m]."""
    return bias_ns * 1e-9 * SPEED_OF_LIGHT


def clock_drift_from_ppm(drift_ppm: float) -> float:
    """Fractional clock drift in parts per million to range-rate units [m/s]."""
    return drift_ppm * 1e-6 * SPEED_OF_LIGHT
