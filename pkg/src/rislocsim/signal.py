"""Pilot-grid snapshot synthesis with a Kronecker-Vandermonde panel profile.

The received K x G matrix per snapshot is the sum of a direct path, a
cascaded path through the reflective panel, and noise.  In the amplifying
("active") panel mode the panel injects its own thermal noise, which reaches
the receiver through the panel-user channel; per entry the total noise
variance is ``sigma_u^2 + M * eta^2 * |alpha_r2|^2 * sigma_r^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError
from .geometry import (
    SPEED_OF_LIGHT,
    AnchorSet,
    ChannelParams,
    EpochSchedule,
    UEState,
    true_channel_params,
    unit_frame,
)


def atom(length: int, omega: float) -> np.ndarray:
    """Vandermonde column [1, e^{jw}, ..., e^{j(L-1)w}] on the unit circle."""
    return np.exp(1j * omega * np.arange(length))


@dataclass(frozen=True)
class OfdmConfig:
    """Pilot-grid dimensions and numerology.

    ``delta_f`` is the subcarrier spacing (total bandwidth over the full
    subcarrier count, of which only the first ``n_subcarriers`` carry
    pilots); ``delta_t`` the symbol duration.  The pilot symbol is a fixed
    unit-modulus scalar shared by all subcarriers and symbols.
    """

    n_subcarriers: int              # K, pilot subcarriers
    n_symbols: int                  # G, pilot symbols per snapshot
    g1: int
    g2: int
    delta_f: float                  # Hz
    delta_t: float                  # s
    carrier_hz: float
    pilot: complex = 1.0 + 0.0j

    def __post_init__(self):
        if self.g1 * self.g2 != self.n_symbols:
            raise ConfigError(f"symbol split {self.g1}x{self.g2} != G={self.n_symbols}")
        if min(self.n_subcarriers, self.n_symbols, self.g1, self.g2) < 1:
            raise ConfigError("all pilot-grid dimensions must be positive")
        if min(self.delta_f, self.delta_t, self.carrier_hz) <= 0:
            raise ConfigError("delta_f, delta_t, carrier_hz must be positive")
        if abs(abs(self.pilot) - 1.0) > 1e-12:
            raise ConfigError("pilot must be unit modulus")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def delay_range_m(self) -> float:
        """Unambiguous pseudorange span c / delta_f."""
        return SPEED_OF_LIGHT / self.delta_f

    @property
    def rate_range_mps(self) -> float:
        """Unambiguous pseudorange-rate half-span lambda / (2 delta_t g2)."""
        return self.wavelength / (2.0 * self.delta_t * self.g2)


@dataclass(frozen=True)
class RisConfig:
    """Reflective panel: geometry, amplification, and panel-noise level."""

    mx: int
    my: int
    spacing_m: float                # element pitch [m]
    eta: float = 1.0                # amplification gain >= 1
    sigma_r: float = 0.0            # panel thermal-noise std (0 in passive mode)

    def __post_init__(self):
        if self.mx < 1 or self.my < 1:
            raise ConfigError("panel dimensions must be positive")
        if self.spacing_m <= 0:
            raise ConfigError("element spacing must be positive")
        if self.eta < 1.0:
            raise ConfigError("amplification gain must be >= 1")
        if self.sigma_r < 0:
            raise ConfigError("sigma_r must be nonnegative")

    @property
    def n_elements(self) -> int:
        return self.mx * self.my


@dataclass
class PathGains:
    """Complex path gains: direct (per epoch), BS-panel (known), panel-user."""

    alpha_l: np.ndarray             # (N,) direct link
    alpha_r1: complex               # BS-panel, measured in advance
    alpha_r2: np.ndarray            # (N,) panel-user

    def __post_init__(self):
        self.alpha_l = np.atleast_1d(np.asarray(self.alpha_l, dtype=complex))
        self.alpha_r2 = np.atleast_1d(np.asarray(self.alpha_r2, dtype=complex))
        if self.alpha_l.shape != self.alpha_r2.shape:
            raise ConfigError("alpha_l and alpha_r2 must have matching shapes")
        self.alpha_r1 = complex(self.alpha_r1)


@dataclass
class ReceivedSnapshot:
    """One K x G pilot observation with its noise level.

    ``y_signal`` retains the noise-free part so that realized SNR can be
    accounted for exactly.
    """

    y: np.ndarray
    sigma_n2: float
    epoch: int
    y_signal: np.ndarray = field(repr=False, default=None)


def free_space_amplitude(distance_m: float, wavelength: float) -> float:
    """Free-space path-gain amplitude lambda / (4 pi d)."""
    if distance_m < 1e-9:
        raise GeometryError("path distance must be positive")
    return wavelength / (4.0 * np.pi * distance_m)


def draw_path_gains(ue: UEState, anchors: AnchorSet, sched: EpochSchedule,
                    ofdm: OfdmConfig, rng: np.random.Generator,
                    tx_amplitude: float = 1.0) -> PathGains:
    """Random-phase path gains with free-space amplitudes.

    Phases are uniform on [0, 2 pi), drawn fresh per call (one draw per
    trial).  ``tx_amplitude`` scales the transmit-side gains (direct and
    BS-panel) for absolute power budgets; the default keeps pure
    lambda/(4 pi d) amplitudes.
    """
    lam = ofdm.wavelength
    n = sched.n_epochs
    params = true_channel_params(ue, anchors, sched)
    d1o = params.d1 - (ue.clock_bias_m + sched.t_n1 * ue.clock_drift_mps)
    d2o = params.d2 - (ue.clock_bias_m + sched.t_n1 * ue.clock_drift_mps)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=2 * n + 1)
    alpha_l = np.array([tx_amplitude * free_space_amplitude(d1o[i], lam)
                        * np.exp(1j * phases[i]) for i in range(n)])
    alpha_r1 = tx_amplitude * free_space_amplitude(anchors.d0, lam) * np.exp(1j * phases[n])
    alpha_r2 = np.array([free_space_amplitude(d2o[i], lam)
                         * np.exp(1j * phases[n + 1 + i]) for i in range(n)])
    return PathGains(alpha_l=alpha_l, alpha_r1=alpha_r1, alpha_r2=alpha_r2)


def psi_matrices(ris: RisConfig, ofdm: OfdmConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unimodular Vandermonde generators of the panel profile.

    ``psi_x`` is Mx x G1 with [psi_x]_{m,g} = exp(j (m-1) 2 pi (g-1) / G1);
    ``psi_y`` analogous with (My, G2).  Columns are unit-circle atoms at
    DFT-spaced angles, which keeps the profile phase-only and the
    transformed-space shift-invariance solvable.
    """
    if ofdm.g1 < 2 or ofdm.g2 < 2:
        raise ConfigError("g1 and g2 must both be >= 2 for an identifiable profile")
    px = np.exp(1j * 2.0 * np.pi / ofdm.g1
                * np.outer(np.arange(ris.mx), np.arange(ofdm.g1)))
    py = np.exp(1j * 2.0 * np.pi / ofdm.g2
                * np.outer(np.arange(ris.my), np.arange(ofdm.g2)))
    return px, py


def design_ris_profile(ris: RisConfig, ofdm: OfdmConfig) -> np.ndarray:
    """Panel profile matrix (G x M), identical across snapshots.

    The profile is eta times the Kronecker product of the conjugated
    generator matrices, so every entry has magnitude exactly eta.
    """
    px, py = psi_matrices(ris, ofdm)
    return ris.eta * np.kron(px.conj().T, py.conj().T)


def position_matrix(ris: RisConfig) -> np.ndarray:
    """Panel-local element positions, shape (M, 3), x-major ordering."""
    xs = ris.spacing_m * np.arange(ris.mx)
    ys = ris.spacing_m * np.arange(ris.my)
    return np.column_stack([
        np.kron(xs, np.ones(ris.my)),
        np.kron(np.ones(ris.mx), ys),
        np.zeros(ris.n_elements),
    ])


def array_response(phi, ris: RisConfig, wavelength: float) -> np.ndarray:
    """Panel steering vector for an (azimuth, elevation) pair, shape (M,)."""
    e, _, _ = unit_frame(phi)
    pr = position_matrix(ris)
    return np.exp(1j * 2.0 * np.pi / wavelength * (pr @ e))


def combined_steering(phi_a, phi, ris: RisConfig, wavelength: float) -> np.ndarray:
    """Elementwise product of arrival and departure steering vectors."""
    return array_response(phi_a, ris, wavelength) * array_response(phi, ris, wavelength)


def psi_components(phi_a, phi) -> tuple[float, float]:
    """Sums of arrival and departure direction cosines along panel axes."""
    ea, _, _ = unit_frame(phi_a)
    en, _, _ = unit_frame(phi)
    return float(ea[0] + en[0]), float(ea[1] + en[1])


def aod_spatial_freqs(phi_a, phi, ris: RisConfig, wavelength: float) -> tuple[float, float]:
    """Spatial angular frequencies (rad/element) of the combined steering."""
    px, py = psi_components(phi_a, phi)
    k = 2.0 * np.pi / wavelength * ris.spacing_m
    return k * px, k * py


def delay_angular_freq(total_pseudorange_m: float, ofdm: OfdmConfig) -> float:
    """Angular frequency per subcarrier of a propagation pseudorange."""
    return -2.0 * np.pi / SPEED_OF_LIGHT * ofdm.delta_f * total_pseudorange_m


def doppler_angular_freq(rate_mps: float, ofdm: OfdmConfig) -> float:
    """Angular frequency per symbol of a pseudorange rate."""
    return 2.0 * np.pi / ofdm.wavelength * ofdm.delta_t * rate_mps


def _noise_variance(ris: RisConfig, alpha_r2: complex, sigma_u: float, sigma_r: float) -> float:
    return sigma_u ** 2 + ris.n_elements * ris.eta ** 2 * abs(alpha_r2) ** 2 * sigma_r ** 2


def snapshot_signal(params: ChannelParams, n: int, anchors: AnchorSet,
                    ofdm: OfdmConfig, ris: RisConfig, gains: PathGains,
                    profile: np.ndarray | None = None) -> np.ndarray:
    """Noise-free K x G pilot matrix of 1-based epoch ``n``.

    Built from the physical delay/Doppler/steering factors; the panel
    profile contributes through the combined steering vector.
    """
    k_axis = ofdm.delta_f * np.arange(ofdm.n_subcarriers)      # F^(k)
    g_axis = ofdm.delta_t * np.arange(ofdm.n_symbols)          # T^(g)
    lam = ofdm.wavelength
    if profile is None:
        profile = design_ris_profile(ris, ofdm)
    if profile.shape != (ofdm.n_symbols, ris.n_elements):
        raise ConfigError(
            f"profile shape {profile.shape} does not match (G, M)="
            f"({ofdm.n_symbols}, {ris.n_elements})")

    i = n - 1
    tau_l = params.d1[i] / SPEED_OF_LIGHT
    tau_r = (anchors.d0 + params.d2[i]) / SPEED_OF_LIGHT
    nu_l = params.r1[i] / lam
    nu_r = params.r2[i] / lam
    phi_n = np.array([params.phi_az[i], params.phi_el[i]])

    beta_l = gains.alpha_l[i] * ofdm.pilot
    beta_r = gains.alpha_r1 * gains.alpha_r2[i] * ofdm.pilot

    f_l = np.exp(-2j * np.pi * k_axis * tau_l)
    f_r = np.exp(-2j * np.pi * k_axis * tau_r)
    t_l = np.exp(2j * np.pi * nu_l * g_axis)
    t_r = np.exp(2j * np.pi * nu_r * g_axis)
    s_row = profile @ combined_steering(anchors.phi_a, phi_n, ris, lam)

    y_l = beta_l * np.outer(f_l, t_l)
    y_r = beta_r * np.outer(f_r, t_r * s_row)
    return y_l + y_r


def synthesize_snapshot(ue: UEState, anchors: AnchorSet, sched: EpochSchedule,
                        n: int, ofdm: OfdmConfig, ris: RisConfig, gains: PathGains,
                        sigma_u: float = 0.0, sigma_r: float | None = None,
                        rng: np.random.Generator | None = None,
                        profile: np.ndarray | None = None) -> ReceivedSnapshot:
    """Synthesize the received pilot matrix of 1-based epoch ``n``.

    The two independent noise sources (receiver and amplified panel noise)
    combine into a circular complex Gaussian per entry; ``sigma_r`` defaults
    to the panel configuration value.  Deterministic for a given generator
    state.
    """
    if sigma_r is None:
        sigma_r = ris.sigma_r
    y_sig = snapshot_signal(true_channel_params(ue, anchors, sched), n,
                            anchors, ofdm, ris, gains, profile=profile)
    sigma_n2 = _noise_variance(ris, gains.alpha_r2[n - 1], sigma_u, sigma_r)
    if sigma_n2 > 0:
        if rng is None:
            raise ConfigError("rng required when noise level is nonzero")
        scale = np.sqrt(sigma_n2 / 2.0)
        noise = scale * (rng.standard_normal(y_sig.shape)
                         + 1j * rng.standard_normal(y_sig.shape))
    else:
        noise = np.zeros_like(y_sig)
    return ReceivedSnapshot(y=y_sig + noise, sigma_n2=float(sigma_n2),
                            epoch=n, y_signal=y_sig)


def synthesize_all(ue, anchors, sched, ofdm, ris, gains, sigma_u=0.0,
                   sigma_r=None, rng=None) -> list[ReceivedSnapshot]:
    """Synthesize every epoch of the schedule (shared profile)."""
    profile = design_ris_profile(ris, ofdm)
    return [synthesize_snapshot(ue, anchors, sched, n, ofdm, ris, gains,
                                sigma_u=sigma_u, sigma_r=sigma_r, rng=rng,
                                profile=profile)
            for n in range(1, sched.n_epochs + 1)]


def snr_of(snapshots: list[ReceivedSnapshot]) -> float:
    """Realized SNR in dB over all snapshots: signal vs noise energy.

    Returns +inf when the realized noise is exactly zero.
    """
    e_sig = sum(np.linalg.norm(s.y_signal) ** 2 for s in snapshots)
    e_noise = sum(np.linalg.norm(s.y - s.y_signal) ** 2 for s in snapshots)
    if e_noise == 0.0:
        return np.inf
    return 10.0 * np.log10(e_sig / e_noise)


def sigma_for_snr(snapshots_signal: list[np.ndarray], target_snr_db: float,
                  ris: RisConfig, gains: PathGains, sigma_ratio: float = 1.0) -> float:
    """Receiver-noise std hitting a target expected SNR.

    Solves for sigma_u with the panel-noise std tied as
    ``sigma_r = sigma_ratio * sigma_u``; in expectation the per-entry noise
    variance at epoch n is
    ``sigma_u^2 (1 + M eta^2 |alpha_r2_n|^2 sigma_ratio^2)``.
    """
    e_sig = sum(float(np.linalg.norm(y) ** 2) for y in snapshots_signal)
    if e_sig == 0.0:
        raise ConfigError("cannot calibrate noise for an all-zero signal")
    snr_lin = 10.0 ** (target_snr_db / 10.0)
    per_entry = 0.0
    for i, y in enumerate(snapshots_signal):
        fac = 1.0 + ris.n_elements * ris.eta ** 2 * abs(gains.alpha_r2[i]) ** 2 * sigma_ratio ** 2
        per_entry += y.size * fac
    return float(np.sqrt(e_sig / (snr_lin * per_entry)))


def amplification_from_power(p_ris_w: float, p_incident_w: float,
                             n_elements: int, sigma_r: float) -> float:
    """Panel amplification from its power budget.

    ``eta^2 = P_R / (P_inc + M sigma_r^2)`` with ``P_inc`` the total signal
    power incident on the panel.  This is the default policy; callers may
    substitute their own.
    """
    denom = p_incident_w + n_elements * sigma_r ** 2
    if denom <= 0:
        raise ConfigError("incident power plus panel noise must be positive")
    return float(np.sqrt(p_ris_w / denom))
