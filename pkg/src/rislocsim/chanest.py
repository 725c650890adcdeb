"""Two-stage per-snapshot channel-parameter estimation.

Stage I reads the six angular frequencies off the rank-2 tensor factors:
normalized-correlation peaks for the delay/Doppler generators, a
transformed-space shift-invariance solve for the departure angles coupled to
the cascaded Doppler, and one round of alternating refinement.  Stage II
polishes all six parameters jointly by minimizing the concentrated
least-squares objective with the two path gains eliminated in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .errors import DegenerateSignalError
from .geometry import SPEED_OF_LIGHT, AnchorSet, ChannelParams
from .signal import (
    OfdmConfig,
    PathGains,
    ReceivedSnapshot,
    RisConfig,
    atom,
    psi_matrices,
)
from .tensor import decompose

# Correlation peaks below this are flagged as unreliable factor estimates.
UNRELIABLE_PEAK = 0.2

_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


def _wrap(w: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = (-w + np.pi) % (2.0 * np.pi) - np.pi
    return -w


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    """Golden-section maximization of a unimodal scalar function."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _quadratic_vertex(x0, x1, x2, f0, f1, f2) -> float:
    denom = f0 - 2.0 * f1 + f2
    if abs(denom) < 1e-300:
        return x1
    return x1 + 0.5 * (x0 - x1) * (f0 - f2) / denom  # equal spacing assumed


def _autocorr_coeffs(u: np.ndarray) -> np.ndarray:
    """Lag coefficients of |u^H a(w)|^2 as a trig polynomial (lags -(L-1)..L-1)."""
    return np.conj(np.correlate(u, u, mode="full"))


def _trig_ratio_newton(p: np.ndarray, lags_p: np.ndarray, b: np.ndarray,
                       lags_b: np.ndarray, w0: float, lo: float, hi: float,
                       iters: int = 40) -> float:
    """Newton polish of a maximum of N(w)/D(w) for trig polynomials N, D.

    Solves N'D - ND' = 0; both sides are exact trig polynomials, so the peak
    is located to machine precision (value-based searches stall at the
    sqrt(eps) plateau of the flat top).  Falls back to the seed if Newton
    leaves the bracket.
    """
    w = w0
    for _ in range(iters):
        ep = np.exp(1j * lags_p * w)
        nn = float(np.real(p @ ep))
        n1 = float(np.real((1j * lags_p * p) @ ep))
        n2 = float(np.real((-(lags_p ** 2)) * p @ ep))
        eb = np.exp(1j * lags_b * w)
        dd = float(np.real(b @ eb))
        d1 = float(np.real((1j * lags_b * b) @ eb))
        d2 = float(np.real((-(lags_b ** 2)) * b @ eb))
        g = n1 * dd - nn * d1
        gp = n2 * dd - nn * d2
        if gp == 0.0 or not np.isfinite(g / gp):
            break
        step = g / gp
        w_new = w - step
        if not lo <= w_new <= hi:
            return w0
        if abs(step) < 1e-15 * max(abs(w), 1.0):
            return w_new
        w = w_new
    return w if lo <= w <= hi else w0


def correlation_peak(u: np.ndarray, lo: float, hi: float, scale: float = 1.0,
                     oversample: int = 4, tol: float = 1e-12) -> tuple[float, float]:
    """Maximize |u^H a(scale * w)| over w in (lo, hi].

    Coarse grid (``oversample`` times the 2 pi / (scale L) resolution),
    quadratic interpolation at the best cell, a golden-section narrowing,
    and a Newton finish on the exact trig-polynomial derivative (the
    value-based searches alone stall at the sqrt(eps) flat-top plateau).
    Returns the peak location and the normalized correlation there.
    """
    length = u.size
    span = hi - lo
    n_grid = max(int(np.ceil(oversample * length * span * scale / (2.0 * np.pi))), 16)
    grid = lo + span * (np.arange(1, n_grid + 1) / n_grid)
    em = np.exp(1j * np.outer(np.arange(length), grid * scale))
    vals = np.abs(u.conj() @ em)
    i0 = int(np.argmax(vals))
    f = lambda w: abs(u.conj() @ atom(length, scale * w))
    if 0 < i0 < n_grid - 1:
        seed = _quadratic_vertex(grid[i0 - 1], grid[i0], grid[i0 + 1],
                                 vals[i0 - 1], vals[i0], vals[i0 + 1])
    else:
        seed = grid[i0]
    h = span / n_grid
    a = max(lo, min(seed, grid[i0]) - h)
    b = min(hi, max(seed, grid[i0]) + h)
    w = _golden_max(f, a, b, max(tol, 1e-7))
    # derivative-based polish: |u^H a|^2 is an exact trig polynomial
    p = _autocorr_coeffs(u)
    lags = np.arange(-(length - 1), length) * scale
    w = _trig_ratio_newton(p, lags, np.array([1.0 + 0j]), np.array([0]),
                           w, a, b)
    norm = np.linalg.norm(u) * np.sqrt(length)
    peak = f(w) / norm if norm > 0 else 0.0
    return w, float(peak)


def correlation_peak_rooting(u: np.ndarray, lo: float, hi: float,
                             scale: float = 1.0) -> float:
    """Exact peak of |u^H a(scale * w)| via polynomial rooting.

    The squared correlation is a Laurent polynomial in z = e^{j scale w};
    stationary points solve a degree 2L-2 polynomial whose near-unit-circle
    roots are the candidates.
    """
    length = u.size
    if not np.any(u):
        raise DegenerateSignalError("zero factor column")
    # |u^H a(theta)|^2 = sum_l a_l z^l on z = e^{j theta}, with the lag-l
    # autocorrelation a_l = conj(sum_n u[n+l] conj(u[n]))
    acf = np.conj(np.correlate(u, u, mode="full"))
    lags = np.arange(-(length - 1), length)
    coeffs = (lags * acf)[::-1]  # np.roots wants highest power first
    roots = np.roots(coeffs)
    cands = [np.angle(z) / scale for z in roots if abs(abs(z) - 1.0) < 1e-6]
    cands = [w for w in cands if lo - 1e-12 <= w <= hi + 1e-12]
    cands.append(hi)
    f = lambda w: abs(u.conj() @ atom(length, scale * w))
    best = max(cands, key=f)
    return float(min(max(best, lo), hi))


@dataclass
class AngularFrequencies:
    """The six angular frequencies of one snapshot, each wrapped to (-pi, pi]."""

    omega_d1: float
    omega_d2: float
    omega_r1: float
    omega_r2: float
    omega_phi_x: float
    omega_phi_y: float

    def __post_init__(self):
        for name in ("omega_d1", "omega_d2", "omega_r1", "omega_r2",
                     "omega_phi_x", "omega_phi_y"):
            setattr(self, name, _wrap(float(getattr(self, name))))


def estimate_delay_freqs(u1: np.ndarray, ofdm: OfdmConfig,
                         backend: str = "grid") -> tuple[float, float, tuple[int, int], tuple[float, float]]:
    """Delay generators of both mode-1 columns, permutation resolved.

    Searches the full (-pi, pi] interval per column; the column whose
    wrapped propagation pseudorange is larger is assigned to the cascaded
    link (the reflected path is always longer than the direct one).

    Returns ``(omega_direct, omega_cascaded, (i_direct, i_cascaded), peaks)``.
    """
    omegas = np.empty(2)
    peaks = np.empty(2)
    for r in range(2):
        if backend == "rooting":
            omegas[r] = correlation_peak_rooting(u1[:, r], -np.pi, np.pi)
            peaks[r] = abs(u1[:, r].conj() @ atom(u1.shape[0], omegas[r])) / (
                np.linalg.norm(u1[:, r]) * np.sqrt(u1.shape[0]))
        else:
            omegas[r], peaks[r] = correlation_peak(u1[:, r], -np.pi, np.pi)
    pseudo = (-omegas) % (2.0 * np.pi)   # monotone in propagation pseudorange
    casc = int(np.argmax(pseudo))
    direct = 1 - casc
    return (float(omegas[direct]), float(omegas[casc]), (direct, casc),
            (float(peaks[direct]), float(peaks[casc])))


def estimate_omega_r1(u2_direct: np.ndarray, g2: int,
                      backend: str = "grid") -> tuple[float, float]:
    """Direct-path Doppler frequency from the mode-2 column.

    The mode-2 column is an atom at ``g2 * omega_r1``; the search covers the
    unambiguous interval (-pi/g2, pi/g2].
    """
    if backend == "rooting":
        w = correlation_peak_rooting(u2_direct, -np.pi / g2, np.pi / g2, scale=g2)
        peak = abs(u2_direct.conj() @ atom(u2_direct.size, g2 * w)) / (
            np.linalg.norm(u2_direct) * np.sqrt(u2_direct.size))
        return w, float(peak)
    return correlation_peak(u2_direct, -np.pi / g2, np.pi / g2, scale=g2)


def estimate_omega_r1_mode3(u3_direct: np.ndarray, g2: int) -> tuple[float, float]:
    """Alternative direct-path Doppler estimate from the mode-3 column.

    The per-sample phase lever here is 1 instead of g2, so this estimator is
    noisier than the mode-2 one; provided for comparison.
    """
    return correlation_peak(u3_direct, -np.pi / g2, np.pi / g2, scale=1.0)


def _ts_esprit_system(ut: np.ndarray, mx: int, g1: int):
    g = np.arange(g1)
    rot = np.exp(-1j * 2.0 * np.pi / g1 * g)
    mu = mx % g1
    if mu == 0:
        cols = [rot * ut, np.ones(g1)]
    else:
        if g1 < 3:
            raise DegenerateSignalError(
                "shift-invariance solve needs g1 >= 3 when mx is not a multiple of g1")
        cols = [rot * ut, np.ones(g1), -np.exp(-1j * 2.0 * np.pi / g1 * g * mu)]
    return np.column_stack(cols)


def ts_esprit_aod_x(u2_cascaded: np.ndarray, omega_r2: float, mx: int,
                    g1: int, g2: int) -> float:
    """Departure-angle generator along x for a candidate cascaded Doppler.

    De-rotates the mode-2 cascaded column by the candidate Doppler atom,
    leaving the Vandermonde-compressed steering vector, whose single
    generator solves a linear shift-invariance system (scale invariant).
    """
    if g1 < 2:
        raise DegenerateSignalError("g1 must be at least 2 for the shift-invariance solve")
    ut = u2_cascaded * np.exp(-1j * np.arange(g1) * g2 * omega_r2)
    a = _ts_esprit_system(ut, mx, g1)
    sol = np.linalg.lstsq(a, ut, rcond=None)[0]
    return float(np.angle(sol[0]))


def _ts_esprit_batch(ut: np.ndarray, mx: int, g1: int) -> np.ndarray:
    """Vectorized shift-invariance solve on (B, G1) de-rotated columns."""
    b = ut.shape[0]
    g = np.arange(g1)
    rot = np.exp(-1j * 2.0 * np.pi / g1 * g)
    mu = mx % g1
    c0 = rot[None, :] * ut
    ones = np.ones((b, g1), dtype=complex)
    if mu == 0:
        a = np.stack([c0, ones], axis=2)
    else:
        c2 = -np.exp(-1j * 2.0 * np.pi / g1 * g * mu)
        a = np.stack([c0, ones, np.broadcast_to(c2, (b, g1))], axis=2)
    ah = a.conj().transpose(0, 2, 1)
    gram = ah @ a
    tr = np.einsum("bii->b", gram).real
    gram += (1e-12 * np.maximum(tr, 1e-30) / gram.shape[1])[:, None, None] * np.eye(gram.shape[1])
    rhs = ah @ ut[:, :, None]
    sol = np.linalg.solve(gram, rhs)[:, 0, 0]
    return np.angle(sol)


def _cascade_mode_vector(psi: np.ndarray, m_len: int, omega_phi: float,
                         omega_rot: float, g_len: int) -> np.ndarray:
    """Doppler-rotated compressed steering vector of one mode."""
    return atom(g_len, omega_rot) * (psi.conj().T @ atom(m_len, omega_phi))


def cascade_doppler_candidates(u2_cascaded: np.ndarray, psi_x: np.ndarray,
                               g1: int, g2: int, n_grid: int = 512,
                               max_candidates: int = 3,
                               rel_threshold: float = 0.4) -> list[tuple[float, float]]:
    """Leading local peaks of the cascaded-Doppler objective.

    The grid objective is periodic over the unambiguous interval; every
    cyclic local maximum within ``rel_threshold`` of the best is polished
    and returned (best first).  On short pilot grids the coupled
    Doppler/angle objective can carry near-tied secondary peaks; candidates
    let the caller disambiguate on the full snapshot fit.
    """
    mx = psi_x.shape[0]
    lo, hi = -np.pi / g2, np.pi / g2
    grid = lo + (hi - lo) * (np.arange(1, n_grid + 1) / n_grid)
    g = np.arange(g1)
    derot = u2_cascaded[None, :] * np.exp(-1j * np.outer(grid * g2, g))
    wx = _ts_esprit_batch(derot, mx, g1)
    steer = psi_x.conj().T @ np.exp(1j * np.outer(np.arange(mx), wx))
    model = steer.T * np.exp(1j * np.outer(grid * g2, g))
    norms = np.linalg.norm(model, axis=1)
    good = norms > 1e-300
    if not np.any(good):
        raise DegenerateSignalError("flat cascaded-Doppler objective")
    vals = np.zeros(n_grid)
    vals[good] = np.abs(model[good] @ u2_cascaded.conj()) / norms[good]

    def f(w):
        wx1 = ts_esprit_aod_x(u2_cascaded, w, mx, g1, g2)
        vec = _cascade_mode_vector(psi_x, mx, wx1, g2 * w, g1)
        nv = np.linalg.norm(vec)
        return abs(u2_cascaded.conj() @ vec) / nv if nv > 0 else 0.0

    is_peak = (vals >= np.roll(vals, 1)) & (vals >= np.roll(vals, -1))
    order = np.argsort(-vals, kind="stable")
    peak_idx = [i for i in order if is_peak[i] and vals[i] >= rel_threshold * vals[order[0]]]
    h = (hi - lo) / n_grid
    cands = []
    for i in peak_idx[:max_candidates]:
        w = _golden_max(f, max(lo, grid[i] - h), min(hi, grid[i] + h), 1e-8)
        cands.append((float(w), float(f(w))))
    cands.sort(key=lambda c: -c[1])
    return cands


def estimate_omega_r2(u2_cascaded: np.ndarray, psi_x: np.ndarray, g1: int,
                      g2: int, n_grid: int = 512) -> float:
    """Cascaded Doppler via 1D search with the angle generator slaved.

    Every candidate Doppler fixes the x departure angle through the
    shift-invariance solve, and the normalized correlation of the resulting
    mode-2 model vector is maximized; a golden-section polish refines the
    best grid cell to 1e-8.
    """
    return cascade_doppler_candidates(u2_cascaded, psi_x, g1, g2,
                                      n_grid=n_grid, max_candidates=1)[0][0]


def _peak_compressed(u: np.ndarray, psi: np.ndarray, omega_rot: float,
                     g_len: int, tol: float = 1e-12) -> tuple[float, float]:
    """Peak of the normalized correlation against a compressed steering atom."""
    m_len = psi.shape[0]
    n_grid = max(8 * m_len, 64)
    grid = -np.pi + 2.0 * np.pi * (np.arange(1, n_grid + 1) / n_grid)
    steer = psi.conj().T @ np.exp(1j * np.outer(np.arange(m_len), grid))  # (G, B)
    rot = atom(g_len, omega_rot)
    model = steer * rot[:, None]
    norms = np.linalg.norm(model, axis=0)
    vals = np.where(norms > 1e-300, np.abs(u.conj() @ model) / norms, 0.0)
    i0 = int(np.argmax(vals))

    def f(w):
        vec = _cascade_mode_vector(psi, m_len, w, omega_rot, g_len)
        nv = np.linalg.norm(vec)
        return abs(u.conj() @ vec) / nv if nv > 0 else 0.0

    h = 2.0 * np.pi / n_grid
    a, b = grid[i0] - h, min(np.pi, grid[i0] + h)
    w = _golden_max(f, a, b, max(tol, 1e-7))
    # polish on the exact trig-polynomial ratio |v^H a(w)|^2 / (a^H B a)
    veff = psi @ (u * rot.conj())
    p = _autocorr_coeffs(veff)
    lags = np.arange(-(m_len - 1), m_len)
    bmat = psi @ psi.conj().T
    band = np.array([bmat.diagonal(int(l)).sum() for l in lags])
    w = _trig_ratio_newton(p, lags, band, lags, w, a, b)
    return w, f(w) / np.linalg.norm(u)


def estimate_aods(u2_cascaded: np.ndarray, u3_cascaded: np.ndarray,
                  omega_r2: float, psi_x: np.ndarray, psi_y: np.ndarray,
                  g1: int, g2: int) -> tuple[float, float, tuple[float, float]]:
    """Departure-angle frequencies along both panel axes at a fixed Doppler."""
    wx, px = _peak_compressed(u2_cascaded, psi_x, g2 * omega_r2, g1)
    wy, py = _peak_compressed(u3_cascaded, psi_y, omega_r2, g2)
    return wx, wy, (px, py)


def refine_once(u2_cascaded: np.ndarray, u3_cascaded: np.ndarray,
                omega_phi_x: float, psi_x: np.ndarray, psi_y: np.ndarray,
                g1: int, g2: int) -> tuple[float, float, float]:
    """One alternating-refinement round of the coupled cascade triple.

    Re-estimates the cascaded Doppler with the x-angle steering held fixed
    (the diagonal-compression form reduces to a plain atom peak), then
    re-estimates both departure angles.
    """
    mx = psi_x.shape[0]
    w = psi_x.conj().T @ atom(mx, omega_phi_x)
    wr2, _ = correlation_peak(u2_cascaded * w.conj(), -np.pi / g2, np.pi / g2,
                              scale=g2, tol=1e-12)
    wx, wy, _ = estimate_aods(u2_cascaded, u3_cascaded, wr2, psi_x, psi_y, g1, g2)
    return wr2, wx, wy


def params_from_frequencies(af: AngularFrequencies, anchors: AnchorSet,
                            ofdm: OfdmConfig, ris: RisConfig,
                            el_sign: float = 1.0) -> tuple[np.ndarray, bool]:
    """Map angular frequencies to the six channel parameters.

    Delays unwrap into [0, c/delta_f) (propagation distances are positive);
    the cascaded one subtracts the known BS-panel distance.  The departure
    direction components subtract the known arrival terms; elevation keeps
    only its magnitude from the signal, so its sign is supplied by
    ``el_sign``.  Returns the parameters and a flag set when the direction
    components had to be clamped to the unit disk.
    """
    lam = ofdm.wavelength
    span = ofdm.delay_range_m
    d1 = (-SPEED_OF_LIGHT / (2.0 * np.pi * ofdm.delta_f) * af.omega_d1) % span
    d2 = (-SPEED_OF_LIGHT / (2.0 * np.pi * ofdm.delta_f) * af.omega_d2) % span - anchors.d0
    r1 = lam / (2.0 * np.pi * ofdm.delta_t) * af.omega_r1
    r2 = lam / (2.0 * np.pi * ofdm.delta_t) * af.omega_r2
    az_a, el_a = anchors.phi_a
    ex = lam * af.omega_phi_x / (2.0 * np.pi * ris.spacing_m) - np.cos(az_a) * np.cos(el_a)
    ey = lam * af.omega_phi_y / (2.0 * np.pi * ris.spacing_m) - np.sin(az_a) * np.cos(el_a)
    rho = float(np.hypot(ex, ey))
    clamped = rho > 1.0
    az = float(np.arctan2(ey, ex))
    if az == -np.pi:
        az = np.pi
    el = float(np.sign(el_sign) if el_sign != 0 else 1.0) * float(np.arccos(min(rho, 1.0)))
    return np.array([d1, d2, r1, r2, az, el]), clamped


def frequencies_from_params(par: np.ndarray, anchors: AnchorSet,
                            ofdm: OfdmConfig, ris: RisConfig) -> AngularFrequencies:
    """Forward map from the six channel parameters to angular frequencies."""
    from .signal import aod_spatial_freqs, delay_angular_freq, doppler_angular_freq

    d1, d2, r1, r2, az, el = par
    wx, wy = aod_spatial_freqs(anchors.phi_a, (az, el), ris, ofdm.wavelength)
    return AngularFrequencies(
        omega_d1=delay_angular_freq(d1, ofdm),
        omega_d2=delay_angular_freq(anchors.d0 + d2, ofdm),
        omega_r1=doppler_angular_freq(r1, ofdm),
        omega_r2=doppler_angular_freq(r2, ofdm),
        omega_phi_x=wx,
        omega_phi_y=wy,
    )


@dataclass
class ChannelEstimate:
    """Channel-parameter estimates over all epochs, with gain estimates.

    ``stage`` is "coarse" after the tensor stage, "refined" after the
    concentrated-objective polish.  Diagnostics collect per-epoch peak
    values, iteration counts, and failure flags.
    """

    params: ChannelParams
    alpha_l: np.ndarray
    alpha_r2: np.ndarray
    stage: str
    diagnostics: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any("failed" in f or "unreliable_factor" in f for f in self.flags)


def model_columns(par: np.ndarray, anchors: AnchorSet, ofdm: OfdmConfig,
                  ris: RisConfig, alpha_r1: complex,
                  psi: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Concentrated-model matrix: direct and cascaded atoms, gains excluded.

    Column 1 multiplies the direct gain, column 2 the panel-user gain; the
    known BS-panel gain, pilot, and panel amplification are folded in.
    Rows follow the row-major raveling of the K x G grid.
    """
    from .signal import aod_spatial_freqs, delay_angular_freq, doppler_angular_freq

    psi_x, psi_y = psi if psi is not None else psi_matrices(ris, ofdm)
    d1, d2, r1, r2, az, el = par
    k, g = ofdm.n_subcarriers, ofdm.n_symbols
    wd1 = delay_angular_freq(d1, ofdm)
    wd2 = delay_angular_freq(anchors.d0 + d2, ofdm)
    wr1 = doppler_angular_freq(r1, ofdm)
    wr2 = doppler_angular_freq(r2, ofdm)
    wx, wy = aod_spatial_freqs(anchors.phi_a, (az, el), ris, ofdm.wavelength)
    col_l = ofdm.pilot * np.outer(atom(k, wd1), atom(g, wr1)).ravel()
    mode2 = _cascade_mode_vector(psi_x, ris.mx, wx, ofdm.g2 * wr2, ofdm.g1)
    mode3 = _cascade_mode_vector(psi_y, ris.my, wy, wr2, ofdm.g2)
    col_r = (ofdm.pilot * alpha_r1 * ris.eta
             * np.outer(atom(k, wd2), np.kron(mode2, mode3)).ravel())
    return np.column_stack([col_l, col_r])


def concentrated_gains(y: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, bool]:
    """Closed-form gain pair minimizing ||y - Xi alpha||; ridge on collinearity."""
    gram = xi.conj().T @ xi
    rhs = xi.conj().T @ y
    ridged = False
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        ridged = True
        gram = gram + 1e-12 * max(np.trace(gram).real, 1e-300) * np.eye(2)
    return np.linalg.solve(gram, rhs), ridged


def concentrated_objective(y: np.ndarray, par: np.ndarray, anchors: AnchorSet,
                           ofdm: OfdmConfig, ris: RisConfig,
                           alpha_r1: complex = 1.0 + 0.0j,
                           psi=None) -> float:
    """Normalized concentrated residual energy of one snapshot.

    Invariant to the known-gain scaling of the cascaded column (it only
    rescales the solved gain), so candidate selection may use a unit gain.
    """
    xi = model_columns(par, anchors, ofdm, ris, alpha_r1, psi=psi)
    alpha, _ = concentrated_gains(y, xi)
    res = y - xi @ alpha
    denom = float(np.real(y.conj() @ y))
    return float(np.real(res.conj() @ res)) / denom if denom > 0 else 0.0


def estimate_snapshot_coarse(snapshot: ReceivedSnapshot, anchors: AnchorSet,
                             ofdm: OfdmConfig, ris: RisConfig,
                             el_sign: float = 1.0,
                             als_max_iter: int = 50, als_tol: float = 1e-8) -> dict:
    """Stage I for one snapshot: tensor factors, frequencies, parameters.

    Near-tied peaks of the cascaded-Doppler search are each completed into
    a full parameter vector; the one with the smallest concentrated
    snapshot residual wins, and the runners-up are kept for the refinement
    stage to multi-start from.
    """
    psi_x, psi_y = psi_matrices(ris, ofdm)
    factors = decompose(snapshot.y, ofdm.g1, ofdm.g2,
                        max_iter=als_max_iter, tol=als_tol)
    wd_dir, wd_casc, perm, dpeaks = estimate_delay_freqs(factors.u1, ofdm)
    u2d = factors.u2[:, perm[0]]
    u2c = factors.u2[:, perm[1]]
    u3c = factors.u3[:, perm[1]]
    wr1, r1peak = estimate_omega_r1(u2d, ofdm.g2)

    y = snapshot.y.ravel()
    completions = []
    for wr2_cand, _ in cascade_doppler_candidates(u2c, psi_x, ofdm.g1, ofdm.g2):
        wx, wy, _ = estimate_aods(u2c, u3c, wr2_cand, psi_x, psi_y,
                                  ofdm.g1, ofdm.g2)
        wr2, wx, wy = refine_once(u2c, u3c, wx, psi_x, psi_y, ofdm.g1, ofdm.g2)
        af = AngularFrequencies(omega_d1=wd_dir, omega_d2=wd_casc,
                                omega_r1=wr1, omega_r2=wr2,
                                omega_phi_x=wx, omega_phi_y=wy)
        par, clamped = params_from_frequencies(af, anchors, ofdm, ris,
                                               el_sign=el_sign)
        fit = concentrated_objective(y, par, anchors, ofdm, ris,
                                     psi=(psi_x, psi_y))
        completions.append({"params": par, "frequencies": af,
                            "clamped": clamped, "fit": fit})
    completions.sort(key=lambda c: c["fit"])
    best = completions[0]

    flags = []
    if min(*dpeaks, r1peak) < UNRELIABLE_PEAK:
        flags.append("unreliable_factor")
    if best["clamped"]:
        flags.append("direction_clamped")
    if factors.regularized:
        flags.append("als_regularized")
    return {
        "params": best["params"],
        "frequencies": best["frequencies"],
        "candidates": [c["params"] for c in completions],
        "factors": factors,
        "peaks": {"d_direct": dpeaks[0], "d_cascaded": dpeaks[1], "r1": r1peak},
        "flags": flags,
    }


def mle_refine_snapshot(snapshot: ReceivedSnapshot, coarse_par: np.ndarray,
                        anchors: AnchorSet, ofdm: OfdmConfig, ris: RisConfig,
                        alpha_r1: complex, el_sign: float = 1.0,
                        extra_inits=(), max_nfev: int = 1000) -> dict:
    """Stage II: concentrated least squares over the six parameters.

    Minimizes ``||y - Xi(par) pinv(Xi) y||`` with Levenberg-Marquardt on the
    projected residual; the gain pair is recovered in closed form at the
    solution.  Additional starting points (Stage-I runners-up) are polished
    too and the best fit wins.  Falls back to the coarse result (with a
    failure flag) on a non-finite objective or if the objective did not
    improve.
    """
    psi = psi_matrices(ris, ofdm)
    y = snapshot.y.ravel()
    ny = np.linalg.norm(y)
    if ny == 0:
        return {"params": coarse_par.copy(), "alpha": np.zeros(2, complex),
                "flags": ["mle_failed"], "iterations": 0, "objective": 0.0}
    scales = np.array([1.0, 1.0, 1.0, 1.0, 0.01, 0.01])
    ridge_seen = [False]

    def residual(x):
        xi = model_columns(x * scales, anchors, ofdm, ris, alpha_r1, psi=psi)
        alpha, ridged = concentrated_gains(y, xi)
        ridge_seen[0] |= ridged
        res = (y - xi @ alpha) / ny
        return np.concatenate([res.real, res.imag])

    r0 = residual(coarse_par / scales)
    f0 = float(r0 @ r0)
    if not np.isfinite(f0):
        return {"params": coarse_par.copy(), "alpha": np.zeros(2, complex),
                "flags": ["mle_failed"], "iterations": 0, "objective": np.nan}
    best = None
    nfev = 0
    for par0 in (coarse_par, *extra_inits):
        sol = scipy.optimize.least_squares(residual, par0 / scales, method="lm",
                                           xtol=1e-12, ftol=1e-12, gtol=1e-12,
                                           max_nfev=max_nfev)
        nfev += int(sol.nfev)
        f1 = float(2.0 * sol.cost)
        if np.isfinite(f1) and (best is None or f1 < best[1]):
            best = (sol.x * scales, f1)
    flags = []
    if ridge_seen[0]:
        flags.append("gain_solve_ridged")
    if best is None or best[1] > f0 + 1e-15:
        return {"params": coarse_par.copy(), "alpha": np.zeros(2, complex),
                "flags": flags + ["mle_failed"], "iterations": nfev,
                "objective": f0}
    par = best[0]
    par[4] = _wrap(par[4])
    par[5] = float(np.sign(el_sign) if el_sign != 0 else 1.0) * abs(par[5])
    xi = model_columns(par, anchors, ofdm, ris, alpha_r1, psi=psi)
    alpha, _ = concentrated_gains(y, xi)
    return {"params": par, "alpha": alpha, "flags": flags,
            "iterations": nfev, "objective": best[1]}


def _pack_estimate(pars, alpha_l, alpha_r2, stage, diagnostics, flags) -> ChannelEstimate:
    params = ChannelParams(d1=pars[:, 0], d2=pars[:, 1], r1=pars[:, 2],
                           r2=pars[:, 3], phi_az=pars[:, 4], phi_el=pars[:, 5])
    return ChannelEstimate(params=params, alpha_l=alpha_l, alpha_r2=alpha_r2,
                           stage=stage, diagnostics=diagnostics, flags=flags)


def estimate_channel(snapshots: list[ReceivedSnapshot], anchors: AnchorSet,
                     ofdm: OfdmConfig, ris: RisConfig, alpha_r1: complex,
                     stage: str = "refined", el_sign=1.0) -> ChannelEstimate:
    """Run the estimator on every snapshot up to the requested stage.

    ``el_sign`` may be a scalar or a per-epoch array giving the prior sign
    of the departure elevation (the pilot grid only observes its cosine).
    """
    if stage not in ("coarse", "refined"):
        raise ValueError("stage must be 'coarse' or 'refined'")
    n = len(snapshots)
    signs = np.broadcast_to(np.atleast_1d(np.asarray(el_sign, dtype=float)), (n,))
    pars = np.empty((n, 6))
    alpha_l = np.empty(n, complex)
    alpha_r2 = np.empty(n, complex)
    flags = []
    diagnostics = {"peaks": [], "stage1_candidates": []}
    psi = psi_matrices(ris, ofdm)
    for i, snap in enumerate(snapshots):
        coarse = estimate_snapshot_coarse(snap, anchors, ofdm, ris, el_sign=signs[i])
        diagnostics["peaks"].append(coarse["peaks"])
        diagnostics["stage1_candidates"].append(coarse["candidates"])
        flags += [f"epoch{snap.epoch}:{f}" for f in coarse["flags"]]
        pars[i] = coarse["params"]
        xi = model_columns(pars[i], anchors, ofdm, ris, alpha_r1, psi=psi)
        alpha, _ = concentrated_gains(snap.y.ravel(), xi)
        alpha_l[i] = alpha[0]
        alpha_r2[i] = alpha[1]
    est = _pack_estimate(pars, alpha_l, alpha_r2, "coarse", diagnostics, flags)
    if stage == "coarse":
        return est
    return refine_channel(snapshots, est, anchors, ofdm, ris, alpha_r1,
                          el_sign=el_sign)


def refine_channel(snapshots: list[ReceivedSnapshot], coarse: ChannelEstimate,
                   anchors: AnchorSet, ofdm: OfdmConfig, ris: RisConfig,
                   alpha_r1: complex, el_sign=1.0) -> ChannelEstimate:
    """Stage-II polish of an existing coarse estimate, snapshot by snapshot."""
    n = len(snapshots)
    signs = np.broadcast_to(np.atleast_1d(np.asarray(el_sign, dtype=float)), (n,))
    pars = np.empty((n, 6))
    alpha_l = np.empty(n, complex)
    alpha_r2 = np.empty(n, complex)
    flags = list(coarse.flags)
    diagnostics = {"peaks": list(coarse.diagnostics.get("peaks", [])),
                   "mle_iterations": []}
    all_cands = coarse.diagnostics.get("stage1_candidates", [])
    for i, snap in enumerate(snapshots):
        primary = coarse.params.epoch(i + 1)
        extras = [c for c in (all_cands[i] if i < len(all_cands) else [])
                  if np.max(np.abs(c - primary)) > 1e-12][:1]
        fine = mle_refine_snapshot(snap, primary, anchors,
                                   ofdm, ris, alpha_r1, el_sign=signs[i],
                                   extra_inits=extras)
        diagnostics["mle_iterations"].append(fine["iterations"])
        flags += [f"epoch{snap.epoch}:{f}" for f in fine["flags"]]
        pars[i] = fine["params"]
        alpha_l[i] = fine["alpha"][0]
        alpha_r2[i] = fine["alpha"][1]
    return _pack_estimate(pars, alpha_l, alpha_r2, "refined", diagnostics, flags)


def estimated_gains(est: ChannelEstimate, alpha_r1: complex) -> PathGains:
    """Package estimated gains alongside the known BS-panel gain."""
    return PathGains(alpha_l=est.alpha_l, alpha_r1=alpha_r1, alpha_r2=est.alpha_r2)
