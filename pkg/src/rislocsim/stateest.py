"""Two-stage state estimation from multi-epoch channel measurements.

Stage I differences the two links' pseudoranges and rates, substitutes the
panel-frame angle information, and solves the resulting linear system by
iteratively reweighted least squares.  Stage II returns to the original
per-link measurements and polishes the full eight-dimensional state
(position, velocity, clock bias, clock drift) with Gauss-Newton steps
weighted by the inverse measurement covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import crlb
from .errors import InfeasibleGeometryError
from .geometry import (
    AnchorSet,
    ChannelParams,
    EpochSchedule,
    UEState,
    direction_derivatives,
    true_channel_params,
    unit_frame,
)

WLS_TOL = 1e-6
WLS_MAX_ITER = 10
GN_TOL = 1e-8
GN_MAX_ITER = 20


def _wrap_angle(x):
    return (np.asarray(x) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class MeasurementSet:
    """Stacked per-epoch measurements (d1, d2, r1, r2, az, el) with covariance."""

    eta: np.ndarray            # (6N,)
    sigma: np.ndarray          # (6N, 6N), block diagonal per epoch

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=float)
        n6 = self.eta.size
        if n6 % 6 != 0:
            raise ValueError("measurement vector length must be a multiple of 6")
        if self.sigma.shape != (n6, n6):
            raise ValueError("covariance shape must match the measurement vector")
        if np.max(np.abs(self.sigma - self.sigma.T)) > 1e-9 * max(np.max(np.abs(self.sigma)), 1e-300):
            raise ValueError("covariance must be symmetric")
        try:
            np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError:
            raise ValueError("covariance must be positive definite") from None

    @property
    def n_epochs(self) -> int:
        return self.eta.size // 6

    @property
    def params(self) -> ChannelParams:
        return ChannelParams.from_stack(self.eta)

    @classmethod
    def from_params(cls, params: ChannelParams, sigma: np.ndarray) -> "MeasurementSet":
        return cls(eta=params.stack(), sigma=sigma)


@dataclass
class DiffSystem:
    """Linearized differential system: rho ~ phi @ theta with error model.

    Rows per epoch: squared-range difference, its rate, and the two
    angle-orthogonality rows.  ``j_err`` is the first-order error Jacobian
    (identity until a state estimate is available).
    """

    rho: np.ndarray            # (4N,)
    phi: np.ndarray            # (4N, 6)
    sigma_d: np.ndarray        # (4N, 4N)
    j_err: np.ndarray          # (4N, 4N)


@dataclass
class StateEstimate:
    """State estimate with covariance and solver diagnostics."""

    theta: np.ndarray                 # (6,) position + velocity
    xi: np.ndarray | None = None      # (8,) with clock bias/drift
    covariance: np.ndarray | None = None
    stage: str = "coarse"
    iterations: int = 0
    converged: bool = True
    flags: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)


def measurement_model(xi: np.ndarray, anchors: AnchorSet,
                      sched: EpochSchedule) -> np.ndarray:
    """Stacked noise-free measurements h(xi), shape (6N,)."""
    return true_channel_params(UEState.from_xi(xi), anchors, sched).stack()


def differentials(m: MeasurementSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-epoch link differences and their covariance.

    Returns (d12, r12, sigma_d) with ``sigma_d`` the (4N, 4N) covariance of
    the stacked (d12, r12, az, el) errors, propagated linearly from the
    measurement covariance.
    """
    p = m.params
    tmap = crlb.differential_map(m.n_epochs)
    return p.d1 - p.d2, p.r1 - p.r2, tmap @ m.sigma @ tmap.T


def error_jacobian(m: MeasurementSet, anchors: AnchorSet, sched: EpochSchedule,
                   theta: np.ndarray) -> np.ndarray:
    """First-order Jacobian of the linear-system error wrt differential errors.

    Evaluated with true distances/rates taken from the current state
    estimate and differential ranges/angles from the measurements; only the
    documented entries are nonzero.
    """
    n = m.n_epochs
    p_est, v_est = theta[:3], theta[3:6]
    prm = m.params
    d12, _, _ = differentials(m)
    jerr = np.zeros((4 * n, 4 * n))
    for i in range(n):
        t = sched.t_n1[i]
        pn = p_est + t * v_est
        d1o = np.linalg.norm(anchors.q1 - pn)
        d2o = np.linalg.norm(anchors.q2 - pn)
        r1o = v_est @ (anchors.q1 - pn) / d1o
        de_az, de_el = direction_derivatives(prm.phi_az[i], prm.phi_el[i])
        b = 4 * i
        jerr[b, b] = 2.0 * d1o
        jerr[b + 1, b] = r1o
        jerr[b + 1, b + 1] = d1o
        jerr[b + 1, b + 2] = v_est @ (anchors.R @ (d12[i] * de_az))
        jerr[b + 1, b + 3] = v_est @ (anchors.R @ (d12[i] * de_el))
        jerr[b + 2, b + 2] = -d2o * np.cos(prm.phi_el[i])
        jerr[b + 3, b + 3] = -d2o
    return jerr


def build_linear_system(m: MeasurementSet, anchors: AnchorSet,
                        sched: EpochSchedule,
                        theta: np.ndarray | None = None) -> DiffSystem:
    """Assemble the differential linear system from measurements.

    With no state estimate the error Jacobian defaults to the identity;
    passing ``theta`` fills in the first-order error model used to reweight
    the solve.
    """
    n = m.n_epochs
    prm = m.params
    d12, r12, sigma_d = differentials(m)
    q1, q2, rot = anchors.q1, anchors.q2, anchors.R
    rho = np.zeros(4 * n)
    phi = np.zeros((4 * n, 6))
    for i in range(n):
        t = sched.t_n1[i]
        e, f, g = unit_frame((prm.phi_az[i], prm.phi_el[i]))
        e_glob, f_glob, g_glob = rot @ e, rot @ f, rot @ g
        b = 4 * i
        rho[b] = d12[i] ** 2 + 2.0 * d12[i] * (e @ (rot.T @ q2)) - q1 @ q1 + q2 @ q2
        phi[b, :3] = 2.0 * (d12[i] * e_glob - q1 + q2)
        phi[b, 3:] = t * phi[b, :3]
        rho[b + 1] = d12[i] * r12[i] + r12[i] * (e @ (rot.T @ q2))
        phi[b + 1, :3] = r12[i] * e_glob
        phi[b + 1, 3:] = (t * r12[i] - d12[i]) * e_glob + q1 - q2
        rho[b + 2] = f @ (rot.T @ q2)
        phi[b + 2, :3] = f_glob
        phi[b + 2, 3:] = t * f_glob
        rho[b + 3] = g @ (rot.T @ q2)
        phi[b + 3, :3] = g_glob
        phi[b + 3, 3:] = t * g_glob
    j_err = (np.eye(4 * n) if theta is None
             else error_jacobian(m, anchors, sched, theta))
    return DiffSystem(rho=rho, phi=phi, sigma_d=sigma_d, j_err=j_err)


def _weight_from(j_err: np.ndarray, sigma_d: np.ndarray) -> tuple[np.ndarray, bool]:
    cov = j_err @ sigma_d @ j_err.T
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    floored = False
    floor = 1e-12 * max(evals[-1], 1e-300)
    if evals[0] < floor:
        floored = True
        evals = np.maximum(evals, floor)
        cov = (evecs * evals) @ evecs.T
    return np.linalg.inv(cov), floored


def wls_coarse(m: MeasurementSet, anchors: AnchorSet,
               sched: EpochSchedule) -> StateEstimate:
    """Stage-I clock-free state via iteratively reweighted least squares.

    The first pass weights with the raw differential covariance (identity
    error Jacobian); subsequent passes rebuild the weight from the previous
    state estimate.  Requires at least two epochs for the six unknowns.
    """
    sys0 = build_linear_system(m, anchors, sched)
    if np.linalg.matrix_rank(sys0.phi) < 6:
        raise InfeasibleGeometryError(
            f"differential system rank deficient with N={m.n_epochs} epochs")
    flags = []
    weight, floored = _weight_from(sys0.j_err, sys0.sigma_d)
    if floored:
        flags.append("weight_floored")
    a = sys0.phi.T @ weight
    theta = np.linalg.solve(a @ sys0.phi, a @ sys0.rho)
    iterations = 1
    for _ in range(WLS_MAX_ITER - 1):
        sys_i = build_linear_system(m, anchors, sched, theta=theta)
        weight, floored = _weight_from(sys_i.j_err, sys_i.sigma_d)
        if floored and "weight_floored" not in flags:
            flags.append("weight_floored")
        a = sys_i.phi.T @ weight
        theta_new = np.linalg.solve(a @ sys_i.phi, a @ sys_i.rho)
        iterations += 1
        step = np.linalg.norm(theta_new - theta)
        theta = theta_new
        if step < WLS_TOL * (1.0 + np.linalg.norm(theta)):
            break
    cov = np.linalg.inv(sys_i.phi.T @ weight @ sys_i.phi)
    return StateEstimate(theta=theta, covariance=cov, stage="coarse",
                         iterations=iterations, flags=flags)


def clock_init(theta: np.ndarray, m: MeasurementSet, anchors: AnchorSet,
               sched: EpochSchedule) -> tuple[float, float]:
    """Weighted linear solve for (bias, drift) given a clock-free state.

    Pseudorange residuals constrain bias + t drift; rate residuals
    constrain the drift alone.  Rows are weighted by the inverse measurement
    variances.
    """
    p_est, v_est = theta[:3], theta[3:6]
    var = np.diag(m.sigma)
    rows = []
    rhs = []
    wts = []
    for i in range(m.n_epochs):
        t = sched.t_n1[i]
        pn = p_est + t * v_est
        for link, q in enumerate((anchors.q1, anchors.q2)):
            rng = np.linalg.norm(q - pn)
            k = (q - pn) / rng
            rows.append([1.0, t])
            rhs.append(m.eta[6 * i + link] - rng)
            wts.append(1.0 / var[6 * i + link])
            rows.append([0.0, 1.0])
            rhs.append(m.eta[6 * i + 2 + link] - v_est @ k)
            wts.append(1.0 / var[6 * i + 2 + link])
    a = np.asarray(rows)
    b = np.asarray(rhs)
    w = np.sqrt(np.asarray(wts))
    sol, *_ = np.linalg.lstsq(a * w[:, None], b * w, rcond=None)
    return float(sol[0]), float(sol[1])


def gauss_newton_refine(m: MeasurementSet, xi0: np.ndarray, anchors: AnchorSet,
                        sched: EpochSchedule) -> StateEstimate:
    """Stage-II full-state refinement on the original measurements.

    Weighted Gauss-Newton with the inverse measurement covariance; angle
    residuals are wrapped before weighting.  If the weighted residual norm
    doubles twice relative to the best seen, the initial state is returned
    with a failure flag.
    """
    weight = np.linalg.inv(m.sigma)
    xi = np.asarray(xi0, dtype=float).copy()
    angle_rows = np.concatenate([[6 * i + 4, 6 * i + 5] for i in range(m.n_epochs)])
    best = np.inf
    doublings = 0
    iterations = 0
    converged = False
    jac = None
    steps = []
    for _ in range(GN_MAX_ITER):
        resid = m.eta - measurement_model(xi, anchors, sched)
        resid[angle_rows] = _wrap_angle(resid[angle_rows])
        rnorm = float(np.sqrt(resid @ weight @ resid))
        if rnorm > 2.0 * best:
            doublings += 1
            if doublings >= 2:
                return StateEstimate(theta=xi0[:6].copy(), xi=np.asarray(xi0, float),
                                     covariance=None, stage="refined",
                                     iterations=iterations, converged=False,
                                     flags=["diverged"])
        best = min(best, rnorm)
        jac = crlb.jacobian_state(UEState.from_xi(xi), anchors, sched)
        a = jac.T @ weight
        delta = np.linalg.solve(a @ jac, a @ resid)
        xi = xi + delta
        iterations += 1
        steps.append(float(np.linalg.norm(delta)))
        if np.linalg.norm(delta) < GN_TOL * (1.0 + np.linalg.norm(xi)):
            converged = True
            break
    cov = np.linalg.inv(jac.T @ weight @ jac)
    return StateEstimate(theta=xi[:6], xi=xi, covariance=cov, stage="refined",
                         iterations=iterations, converged=converged,
                         step_norms=steps)


def solve_state(m: MeasurementSet, anchors: AnchorSet,
                sched: EpochSchedule) -> tuple[StateEstimate, StateEstimate]:
    """Full pipeline: coarse differential solve, clock init, refinement."""
    coarse = wls_coarse(m, anchors, sched)
    bias, drift = clock_init(coarse.theta, m, anchors, sched)
    coarse.xi = np.concatenate([coarse.theta, [bias, drift]])
    refined = gauss_newton_refine(m, coarse.xi, anchors, sched)
    return coarse, refined
