"""Rank-2 third-order tensor factorization of a pilot snapshot.

A K x G snapshot reshapes into a K x G1 x G2 tensor whose mode-1 factor is
Vandermonde.  Coarse factors come from spatial smoothing plus a
shift-invariance eigenproblem (pure linear algebra); alternating least
squares then refines the fit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSignalError
from .signal import atom

RANK = 2  # direct + cascaded path

# Relative second-singular-value threshold below which the smoothed matrix is
# treated as rank deficient.
DEGENERACY_TOL = 1e-10


@dataclass
class Tensor3:
    """K x G1 x G2 complex tensor with its originating matrix layout."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.ndim != 3:
            raise ValueError("tensor must be three-dimensional")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def to_matrix(self) -> np.ndarray:
        """Inverse of :func:`reshape_to_tensor` (bit-exact)."""
        k, g1, g2 = self.dims
        return self.data.reshape(k, g1 * g2)


@dataclass
class CpdFactors:
    """Rank-2 factor matrices; overall column scale is carried by ``u1``.

    ``regularized`` flags a ridge-stabilized least-squares step during
    refinement; ``als_iterations`` counts completed refinement sweeps.
    """

    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray
    als_iterations: int = 0
    regularized: bool = False
    fit_history: list = field(default_factory=list, repr=False)

    def reconstruct(self) -> np.ndarray:
        return np.einsum("kr,ir,jr->kij", self.u1, self.u2, self.u3)

    def normalized(self) -> "CpdFactors":
        """Unit-norm mode-2/3 columns, scale absorbed into mode 1."""
        u1 = self.u1.copy(); u2 = self.u2.copy(); u3 = self.u3.copy()
        for r in range(u1.shape[1]):
            s2 = np.linalg.norm(u2[:, r])
            s3 = np.linalg.norm(u3[:, r])
            if s2 > 0:
                u2[:, r] /= s2
            if s3 > 0:
                u3[:, r] /= s3
            u1[:, r] *= s2 * s3
        return CpdFactors(u1=u1, u2=u2, u3=u3,
                          als_iterations=self.als_iterations,
                          regularized=self.regularized,
                          fit_history=list(self.fit_history))


def reshape_to_tensor(y: np.ndarray, g1: int, g2: int) -> Tensor3:
    """Reshape a K x G snapshot into K x G1 x G2, symbol-major split.

    Entry (k, i, j) equals ``y[k, i * g2 + j]`` (0-based), matching the
    Kronecker factorization of the symbol axis.
    """
    y = np.asarray(y)
    k, g = y.shape
    if g1 * g2 != g:
        raise ValueError(f"cannot split {g} symbols into {g1} x {g2}")
    return Tensor3(y.reshape(k, g1, g2))


def smoothing_split(k: int) -> tuple[int, int]:
    """Balanced window/shift split (K1, K2) with K1 + K2 = K + 1."""
    k1 = (k + 1 + 1) // 2  # ceil((K+1)/2)
    return k1, k - k1 + 1


def _unfold1(t: np.ndarray) -> np.ndarray:
    k = t.shape[0]
    return t.reshape(k, -1)


def _khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Columnwise Kronecker product, left factor index slower."""
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], -1)


def vscpd(t: Tensor3) -> CpdFactors:
    """Coarse rank-2 factors via spatial smoothing and shift invariance.

    The mode-1 unfolding is Hankel-stacked into a K1 x (K2 G1 G2) matrix
    whose column space is spanned by the two short Vandermonde columns; a
    one-sample-shift least-squares eigenproblem yields the generators, after
    which the remaining factors follow from two linear solves and a rank-1
    split.  Recovery is up to per-column scaling and a common permutation.

    Raises
    ------
    DegenerateSignalError
        If the smoothed matrix is (numerically) rank deficient, e.g. when
        one path vanishes or the two delay generators coincide.
    """
    k, g1, g2 = t.dims
    if k < 4:
        raise ValueError("mode-1 length must be at least 4 for smoothing")
    y1 = _unfold1(t.data)
    k1, k2 = smoothing_split(k)
    ys = np.concatenate([y1[i:i + k1, :] for i in range(k2)], axis=1)
    u, s, _ = np.linalg.svd(ys, full_matrices=False)
    if s[0] == 0.0 or s[1] / s[0] < DEGENERACY_TOL:
        raise DegenerateSignalError(
            "smoothed snapshot is rank deficient; cannot separate two paths")
    us = u[:, :RANK]
    shift = np.linalg.lstsq(us[:-1, :], us[1:, :], rcond=None)[0]
    eigvals = np.linalg.eigvals(shift)
    eigvals = eigvals[np.argsort(-np.abs(eigvals), kind="stable")]
    omegas = np.angle(eigvals)

    u1 = np.column_stack([atom(k, w) for w in omegas])
    mixing = np.linalg.lstsq(u1, y1, rcond=None)[0].T    # (G1 G2, R)
    u2 = np.empty((g1, RANK), dtype=complex)
    u3 = np.empty((g2, RANK), dtype=complex)
    for r in range(RANK):
        block = mixing[:, r].reshape(g1, g2)
        bu, bs, bvh = np.linalg.svd(block)
        u2[:, r] = bu[:, 0] * bs[0]
        u3[:, r] = bvh[0, :]
    return CpdFactors(u1=u1, u2=u2, u3=u3).normalized()


def als_refine(t: Tensor3, init: CpdFactors, max_iter: int = 50,
               tol: float = 1e-8) -> CpdFactors:
    """Alternating least squares from a given starting point.

    Each sweep solves the three linear problems exactly, so the Frobenius
    fit is nonincreasing; iteration stops when the relative fit change drops
    below ``tol``.  A severely ill-conditioned Khatri-Rao system falls back
    to a ridge-stabilized solve and sets the ``regularized`` flag.
    """
    k, g1, g2 = t.dims
    t1 = t.data.reshape(k, -1)
    t2 = t.data.transpose(1, 0, 2).reshape(g1, -1)
    t3 = t.data.transpose(2, 0, 1).reshape(g2, -1)
    u1, u2, u3 = init.u1.copy(), init.u2.copy(), init.u3.copy()
    regularized = False

    def solve(z, rhs):
        nonlocal regularized
        gram = z.conj().T @ z
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > 1e12:
            regularized = True
            warnings.warn("ill-conditioned factor system; ridge-stabilized solve",
                          RuntimeWarning, stacklevel=3)
            ridge = 1e-12 * max(np.trace(gram).real, 1.0)
            gram = gram + ridge * np.eye(gram.shape[0])
        return np.linalg.solve(gram, z.conj().T @ rhs).T

    def fit(u1, u2, u3):
        rec = np.einsum("kr,ir,jr->kij", u1, u2, u3)
        return float(np.linalg.norm(rec - t.data))

    fit_prev = fit(u1, u2, u3)
    history = [fit_prev]
    iterations = 0
    floor = 1e-14 * np.linalg.norm(t.data)  # fit at machine precision
    for _ in range(max_iter):
        u1 = solve(_khatri_rao(u2, u3), t1.T)
        u2 = solve(_khatri_rao(u1, u3), t2.T)
        u3 = solve(_khatri_rao(u1, u2), t3.T)
        iterations += 1
        fit_now = fit(u1, u2, u3)
        history.append(fit_now)
        if fit_now <= floor or abs(fit_prev - fit_now) <= tol * max(fit_prev, 1e-30):
            break
        fit_prev = fit_now
    return CpdFactors(u1=u1, u2=u2, u3=u3, als_iterations=iterations,
                      regularized=regularized, fit_history=history).normalized()


def decompose(y: np.ndarray, g1: int, g2: int, max_iter: int = 50,
              tol: float = 1e-8) -> CpdFactors:
    """Reshape, coarse-factor, and refine a snapshot in one call."""
    t = reshape_to_tensor(y, g1, g2)
    return als_refine(t, vscpd(t), max_iter=max_iter, tol=tol)
