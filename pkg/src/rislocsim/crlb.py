"""Fisher information, estimation bounds, and feasibility rank analysis.

The observation Jacobian is assembled per snapshot over the ten per-epoch
parameters (six geometric parameters plus the real/imaginary parts of the
two unknown gains); the gain rows are removed by a Schur complement to give
the equivalent information on the geometric parameters alone.  State-domain
bounds follow from the measurement Jacobians of the original and
differential measurement models.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    AnchorSet,
    EpochSchedule,
    UEState,
    direction_derivatives,
    propagate_state,
    true_channel_params,
)
from .signal import (
    OfdmConfig,
    PathGains,
    RisConfig,
    design_ris_profile,
    combined_steering,
    position_matrix,
)

RANK_TOL = 1e-8          # numerical-rank threshold, relative to sigma_max
FIM_SINGULAR_TOL = 1e-10


def jacobian_channel_block(params, n: int, anchors: AnchorSet,
                           ofdm: OfdmConfig, ris: RisConfig, gains: PathGains,
                           profile: np.ndarray | None = None) -> np.ndarray:
    """Observation Jacobian of 1-based epoch ``n``: real (2KG, 10).

    Evaluated at the given per-epoch channel parameters (truth or
    estimates).  Columns: (d1, d2, r1, r2, az, el, Re aL, Im aL, Re aR2,
    Im aR2); rows stack the real then imaginary parts of the row-major
    raveled K x G grid.
    """
    i = n - 1
    lam = ofdm.wavelength
    if profile is None:
        profile = design_ris_profile(ris, ofdm)

    from .geometry import SPEED_OF_LIGHT
    omega_k = -2.0 * np.pi / SPEED_OF_LIGHT * ofdm.delta_f * np.arange(ofdm.n_subcarriers)
    theta_g = 2.0 * np.pi / lam * ofdm.delta_t * np.arange(ofdm.n_symbols)

    delta1 = np.exp(1j * omega_k * params.d1[i])
    delta2 = np.exp(1j * omega_k * (params.d2[i] + anchors.d0))
    th1 = np.exp(1j * theta_g * params.r1[i])
    th2 = np.exp(1j * theta_g * params.r2[i])

    phi_n = (params.phi_az[i], params.phi_el[i])
    abrev = combined_steering(anchors.phi_a, phi_n, ris, lam)
    rho = profile @ abrev
    de_az, de_el = direction_derivatives(*phi_n)
    pr = position_matrix(ris)
    rho_dot_az = 1j * 2.0 * np.pi / lam * (profile @ (abrev * (pr @ de_az)))
    rho_dot_el = 1j * 2.0 * np.pi / lam * (profile @ (abrev * (pr @ de_el)))

    x = ofdm.pilot
    beta_l = gains.alpha_l[i] * x
    beta_r = gains.alpha_r1 * gains.alpha_r2[i] * x
    y_l = beta_l * np.outer(delta1, th1)
    y_r = beta_r * np.outer(delta2, th2 * rho)

    d_d1 = (1j * omega_k)[:, None] * y_l
    d_d2 = (1j * omega_k)[:, None] * y_r
    d_r1 = y_l * (1j * theta_g)[None, :]
    d_r2 = y_r * (1j * theta_g)[None, :]
    d_az = beta_r * np.outer(delta2, th2 * rho_dot_az)
    d_el = beta_r * np.outer(delta2, th2 * rho_dot_el)
    d_al = x * np.outer(delta1, th1)
    d_ar = x * gains.alpha_r1 * np.outer(delta2, th2 * rho)

    cols = [d_d1, d_d2, d_r1, d_r2, d_az, d_el, d_al, 1j * d_al, d_ar, 1j * d_ar]
    flat = np.column_stack([c.ravel() for c in cols])
    return np.vstack([flat.real, flat.imag])


def jacobian_channel(params, anchors, ofdm, ris, gains) -> list[np.ndarray]:
    """Per-snapshot observation Jacobian blocks (the full matrix is their
    block diagonal)."""
    profile = design_ris_profile(ris, ofdm)
    return [jacobian_channel_block(params, n, anchors, ofdm, ris, gains,
                                   profile=profile)
            for n in range(1, params.n_epochs + 1)]


@dataclass
class ChannelBounds:
    """Per-snapshot information and bounds on the six geometric parameters."""

    fim_full: list            # (10, 10) per snapshot
    fim_equiv: list           # (6, 6) per snapshot
    crlb: np.ndarray          # (6N,) variances, epoch-major
    ill_conditioned: bool = False

    @property
    def n_epochs(self) -> int:
        return len(self.fim_full)

    def covariance(self) -> np.ndarray:
        """Block-diagonal (6N, 6N) covariance = inverse equivalent FIM."""
        n = self.n_epochs
        cov = np.zeros((6 * n, 6 * n))
        for i, f in enumerate(self.fim_equiv):
            cov[6 * i:6 * i + 6, 6 * i:6 * i + 6] = np.linalg.inv(f)
        return cov


def fim_channel(blocks: list[np.ndarray], sigma_n2: np.ndarray) -> ChannelBounds:
    """Channel-parameter information from Jacobian blocks and noise levels.

    The per-snapshot 10 x 10 information is Schur-complemented onto the six
    geometric parameters (gains are nuisance); a singular gain block falls
    back to a pseudo-inverse with a conditioning warning.
    """
    sigma_n2 = np.atleast_1d(np.asarray(sigma_n2, dtype=float))
    fim_full = []
    fim_equiv = []
    crlb = []
    ill = False
    for i, jb in enumerate(blocks):
        om = jb.T @ jb / (sigma_n2[i] / 2.0)
        om = 0.5 * (om + om.T)
        o1 = om[:6, :6]
        o2 = om[:6, 6:]
        o3 = om[6:, 6:]
        cond = np.linalg.cond(o3)
        if not np.isfinite(cond) or cond > 1e14:
            ill = True
            warnings.warn("singular gain information block; using pseudo-inverse",
                          RuntimeWarning, stacklevel=2)
            equiv = o1 - o2 @ np.linalg.pinv(o3) @ o2.T
        else:
            equiv = o1 - o2 @ np.linalg.solve(o3, o2.T)
        equiv = 0.5 * (equiv + equiv.T)
        fim_full.append(om)
        fim_equiv.append(equiv)
        crlb.append(np.diag(np.linalg.inv(equiv)))
    return ChannelBounds(fim_full=fim_full, fim_equiv=fim_equiv,
                         crlb=np.concatenate(crlb), ill_conditioned=ill)


def jacobian_state(ue: UEState, anchors: AnchorSet, sched: EpochSchedule) -> np.ndarray:
    """Measurement Jacobian d eta / d xi, shape (6N, 8).

    Rows follow the epoch-major (d1, d2, r1, r2, az, el) stacking; columns
    are (p, v, bias, drift).
    """
    n = sched.n_epochs
    jac = np.zeros((6 * n, 8))
    r_cols = [anchors.R[:, l] for l in range(3)]
    for idx in range(n):
        t = sched.t_n1[idx]
        pn, _ = propagate_state(ue, sched, idx + 1)
        base = 6 * idx
        for link, q in enumerate((anchors.q1, anchors.q2)):
            b = q - pn
            s = 1.0 / np.linalg.norm(b)
            k = s * b
            row = base + link
            jac[row, :3] = -k
            jac[row, 3:6] = -t * k
            jac[row, 6] = 1.0
            jac[row, 7] = t
            row = base + 2 + link
            bv = b @ ue.v
            jac[row, :3] = s ** 3 * bv * b - s * ue.v
            jac[row, 3:6] = s * (b - t * ue.v) + t * s ** 3 * bv * b
            jac[row, 7] = 1.0
        b2 = anchors.q2 - pn
        s2 = 1.0 / np.linalg.norm(b2)
        w = np.array([r_cols[l] @ b2 for l in range(3)])
        row = base + 4
        jac[row, :3] = (w[1] * r_cols[0] - w[0] * r_cols[1]) / (w[0] ** 2 + w[1] ** 2)
        jac[row, 3:6] = t * jac[row, :3]
        row = base + 5
        se = s2 * w[2]
        jac[row, :3] = s2 / np.sqrt(max(1.0 - se ** 2, 1e-300)) * (s2 ** 2 * w[2] * b2 - r_cols[2])
        jac[row, 3:6] = t * jac[row, :3]
    return jac


def differential_map(n_epochs: int) -> np.ndarray:
    """Linear map from (d1, d2, r1, r2, az, el) to (d12, r12, az, el), (4N, 6N)."""
    t = np.zeros((4, 6))
    t[0, 0], t[0, 1] = 1.0, -1.0
    t[1, 2], t[1, 3] = 1.0, -1.0
    t[2, 4] = 1.0
    t[3, 5] = 1.0
    return np.kron(np.eye(n_epochs), t)


def jacobian_state_diff(jac: np.ndarray) -> np.ndarray:
    """Differential-model Jacobian d h_d / d theta, shape (4N, 6)."""
    n = jac.shape[0] // 6
    return differential_map(n) @ jac[:, :6]


def jacobian_wo_ris(ue: UEState, anchors: AnchorSet, sched: EpochSchedule) -> np.ndarray:
    """BS-only measurement Jacobian (d1, r1 rows per epoch), shape (2N, 8)."""
    full = jacobian_state(ue, anchors, sched)
    n = sched.n_epochs
    rows = np.concatenate([[6 * i, 6 * i + 2] for i in range(n)])
    return full[rows, :]


@dataclass
class StateBounds:
    """FIM, bound diagonal, and aggregate position/velocity bounds."""

    fim: np.ndarray
    crlb: np.ndarray
    peb: float
    veb: float
    feasible: bool
    rank: int


def _bounds_from_fim(fim: np.ndarray) -> StateBounds:
    fim = 0.5 * (fim + fim.T)
    svals = np.linalg.svd(fim, compute_uv=False)
    rank = int(np.sum(svals > FIM_SINGULAR_TOL * max(svals[0], 1e-300)))
    if rank < fim.shape[0]:
        nan = np.full(fim.shape[0], np.nan)
        return StateBounds(fim=fim, crlb=nan, peb=np.nan, veb=np.nan,
                           feasible=False, rank=rank)
    crlb = np.diag(np.linalg.inv(fim))
    return StateBounds(fim=fim, crlb=crlb, peb=float(np.sum(crlb[:3])),
                       veb=float(np.sum(crlb[3:6])), feasible=True, rank=rank)


def fim_state(jac: np.ndarray, fim_eta_blocks: list[np.ndarray]) -> StateBounds:
    """Full-state information via the measurement-model chain rule."""
    n = len(fim_eta_blocks)
    omega_eta = np.zeros((6 * n, 6 * n))
    for i, blk in enumerate(fim_eta_blocks):
        omega_eta[6 * i:6 * i + 6, 6 * i:6 * i + 6] = blk
    return _bounds_from_fim(jac.T @ omega_eta @ jac)


def fim_dmm(jac_d: np.ndarray, sigma_d: np.ndarray) -> StateBounds:
    """Clock-free state information under the differential model."""
    if np.linalg.cond(sigma_d) > 1e14:
        raise np.linalg.LinAlgError("differential covariance is singular")
    return _bounds_from_fim(jac_d.T @ np.linalg.solve(sigma_d, jac_d))


@dataclass
class RankReport:
    """Numerical rank of the measurement Jacobian for a scenario."""

    n_epochs: int
    include_ris: bool
    rank: int
    n_rows: int
    singular_values: np.ndarray = field(repr=False, default=None)


def rank_analysis(ue: UEState, anchors: AnchorSet, sched: EpochSchedule,
                  include_ris: bool = True) -> RankReport:
    """Numerical rank of the (2N, 8) BS-only or (6N, 8) full Jacobian.

    Rank counts singular values above ``1e-8 * sigma_max``.  Without panel
    rows the Jacobian stays rank deficient (<= 6) no matter how many epochs
    are stacked; with them it reaches 8 from two epochs for generic
    geometry.
    """
    jac = (jacobian_state(ue, anchors, sched) if include_ris
           else jacobian_wo_ris(ue, anchors, sched))
    svals = np.linalg.svd(jac, compute_uv=False)
    rank = int(np.sum(svals > RANK_TOL * max(svals[0], 1e-300)))
    return RankReport(n_epochs=sched.n_epochs, include_ris=include_ris,
                      rank=rank, n_rows=jac.shape[0], singular_values=svals)


@dataclass
class FimReport:
    """All bounds for one scenario: channel, full-state, and differential."""

    channel: ChannelBounds
    state_omm: StateBounds
    state_dmm: StateBounds
    sigma_eta: np.ndarray     # (6N, 6N) block-diagonal channel covariance

    @property
    def peb(self) -> float:
        return self.state_omm.peb

    @property
    def veb(self) -> float:
        return self.state_omm.veb


def noise_variances(ris: RisConfig, gains: PathGains, sigma_u: float,
                    sigma_r: float | None = None) -> np.ndarray:
    """Per-epoch total noise variance (receiver plus amplified panel noise)."""
    if sigma_r is None:
        sigma_r = ris.sigma_r
    return np.array([sigma_u ** 2 + ris.n_elements * ris.eta ** 2
                     * abs(a) ** 2 * sigma_r ** 2 for a in gains.alpha_r2])


def evaluate_bounds(ue: UEState, anchors: AnchorSet, sched: EpochSchedule,
                    ofdm: OfdmConfig, ris: RisConfig, gains: PathGains,
                    sigma_u: float, sigma_r: float | None = None) -> FimReport:
    """End-to-end bound evaluation for one scenario."""
    sig2 = noise_variances(ris, gains, sigma_u, sigma_r)
    params = true_channel_params(ue, anchors, sched)
    blocks = jacobian_channel(params, anchors, ofdm, ris, gains)
    channel = fim_channel(blocks, sig2)
    jac = jacobian_state(ue, anchors, sched)
    omm = fim_state(jac, channel.fim_equiv)
    sigma_eta = channel.covariance()
    tmap = differential_map(sched.n_epochs)
    sigma_d = tmap @ sigma_eta @ tmap.T
    dmm = fim_dmm(jacobian_state_diff(jac), sigma_d)
    return FimReport(channel=channel, state_omm=omm, state_dmm=dmm,
                     sigma_eta=sigma_eta)
