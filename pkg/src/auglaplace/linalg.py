"""Dense symmetric linear algebra, 3x3 matrix exponentials and Kronecker identities.

Everything here works in float64. The matrix-exponential helpers accept
stacks of matrices (leading batch axes) because the augmentation code
builds one transform per (datum, sample) pair.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class ShapeError(ValueError):
    """Raised when array dimensions do not conform."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix that must be inverted is (numerically) singular."""


class IndefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorisation fails; the caller should add damping."""


SYM_TOL = 1e-10
EIG_CLAMP_TOL = 1e-10


@dataclass(frozen=True)
class SymEig:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthonormal columns


def _check_square(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def sym_eigh(m) -> SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""
    m = _check_square(m)
    if np.max(np.abs(m - m.T), initial=0.0) > SYM_TOL:
        raise ShapeError("matrix is not symmetric within 1e-10")
    lam, vec = np.linalg.eigh(m)
    return SymEig(lam, vec)


def logdet_spd(m) -> float:
    """Log-determinant of a symmetric positive-definite matrix via Cholesky."""
    m = _check_square(m)
    try:
        chol = scipy.linalg.cholesky(m, lower=True, check_finite=False)
    except np.linalg.LinAlgError as err:
        raise IndefiniteError("matrix is not positive definite; increase damping") from err
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


# --- matrix exponential -------------------------------------------------------

_TAYLOR_DEGREE = 13
_SCALE_THRESHOLD = 0.5


def _expm_batched(m):
    """exp(m) for a stack of square matrices by scaling and squaring.

    Each matrix is scaled by 2**-s so that its 1-norm is at most 0.5, the
    degree-13 Taylor polynomial is evaluated (truncation error below 1e-16
    relative) and the result squared s times.
    """
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[-1]
    norms = np.abs(m).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.where(norms > _SCALE_THRESHOLD, np.ceil(np.log2(norms / _SCALE_THRESHOLD)), 0.0)
    s = s.astype(np.int64)
    a = m / np.ldexp(1.0, s)[..., None, None]
    eye = np.broadcast_to(np.eye(n), a.shape)
    # Horner evaluation of sum_k a^k / k!
    out = eye + a / _TAYLOR_DEGREE
    for k in range(_TAYLOR_DEGREE - 1, 0, -1):
        out = eye + (a @ out) / k
    smax = int(s.max(initial=0))
    for level in range(smax):
        sq = out @ out
        out = np.where((s > level)[..., None, None], sq, out)
    return out


def expm3(m) -> np.ndarray:
    """Matrix exponential of a 3x3 matrix (or a stack of them)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise ShapeError(f"expected (..., 3, 3), got {m.shape}")
    return _expm_batched(m)


def expm3_frechet(m, e):
    """Return ``(exp(m), L(m, e))`` with L the Frechet derivative of exp at m along e.

    Uses exp([[m, e], [0, m]]) = [[exp(m), L], [0, exp(m)]].
    """
    m = np.asarray(m, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if m.shape[-2:] != (3, 3) or e.shape[-2:] != (3, 3):
        raise ShapeError("expected 3x3 matrices")
    m, e = np.broadcast_arrays(m, e)
    block = np.zeros(m.shape[:-2] + (6, 6))
    block[..., :3, :3] = m
    block[..., 3:, 3:] = m
    block[..., :3, 3:] = e
    big = _expm_batched(block)
    return big[..., :3, :3], big[..., :3, 3:]


def inv3(m) -> np.ndarray:
    """Inverse of a 3x3 matrix (or stack) by the adjugate formula."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise ShapeError(f"expected (..., 3, 3), got {m.shape}")
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    g, h, i = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    co00 = e * i - f * h
    co01 = f * g - d * i
    co02 = d * h - e * g
    det = a * co00 + b * co01 + c * co02
    if np.any(np.abs(det) <= 1e-12):
        raise SingularMatrixError("3x3 matrix is singular (|det| <= 1e-12)")
    adj = np.stack(
        [
            np.stack([co00, c * h - b * i, b * f - c * e], axis=-1),
            np.stack([co01, a * i - c * g, c * d - a * f], axis=-1),
            np.stack([co02, b * g - a * h, a * e - b * d], axis=-1),
        ],
        axis=-2,
    )
    return adj / det[..., None, None]


# --- Kronecker-structured identities -----------------------------------------

def _kron_eigs(lam_a, lam_g, scale, gamma):
    if gamma <= 0:
        raise ValueError(f"damping gamma must be positive, got {gamma}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    lam_a = np.maximum(np.asarray(lam_a, dtype=np.float64), 0.0)
    lam_g = np.maximum(np.asarray(lam_g, dtype=np.float64), 0.0)
    return scale * np.outer(lam_a, lam_g) + gamma


def kron_damped_logdet(lam_a, lam_g, scale, gamma) -> float:
    """log|scale * (A kron G) + gamma I| from the eigenvalues of A and G."""
    return float(np.sum(np.log(_kron_eigs(lam_a, lam_g, scale, gamma))))


def kron_damped_bilinear_trace(p_diag, q_diag, lam_a, lam_g, scale, gamma) -> float:
    """sum_ij p_i q_j / (scale * lam_a[i] * lam_g[j] + gamma).

    With ``p_diag = diag(Va^T X Va)`` and ``q_diag = diag(Vg^T Y Vg)`` this is
    tr[(scale * A kron G + gamma I)^-1 (X kron Y)].
    """
    p_diag = np.asarray(p_diag, dtype=np.float64)
    q_diag = np.asarray(q_diag, dtype=np.float64)
    if p_diag.shape != np.shape(lam_a) or q_diag.shape != np.shape(lam_g):
        raise ShapeError("diagonal vectors must match the eigenvalue vectors in length")
    denom = _kron_eigs(lam_a, lam_g, scale, gamma)
    return float(p_diag @ (1.0 / denom) @ q_diag)


def rotated_diag(vecs, x):
    """diag(V^T X V) without forming the full product; x may carry leading axes."""
    return np.sum(vecs * (np.asarray(x) @ vecs), axis=-2)
