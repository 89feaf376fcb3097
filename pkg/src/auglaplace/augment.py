"""Reparameterised augmentation distributions and their derivatives in eta.

Two families are supported:

* ``PointRotation`` rotates 2-D points about the origin by ``eps * eta[0]``.
* ``ImageAffine`` warps an image with ``expm(sum_i eps_i eta_i G_i)`` using
  the six affine generators (x-shift, y-shift, rotation, x-scale, y-scale,
  shear) and bilinear resampling.

Noise ``eps`` is uniform on [-1, 1]^k. Image coordinates are normalised to
[-1, 1] with (-1, -1) the centre of the top-left pixel and (1, 1) the centre
of the bottom-right pixel, so a translation of ``p`` pixels on a ``W`` wide
image is ``2 p / (W - 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .linalg import expm3_frechet, inv3


class Family(str, Enum):
    POINT_ROTATION = "PointRotation"
    IMAGE_AFFINE = "ImageAffine"


class ConfigurationError(ValueError):
    pass


GENERATORS = np.array(
    [
        [[0, 0, 1], [0, 0, 0], [0, 0, 0]],  # horizontal translation
        [[0, 0, 0], [0, 0, 1], [0, 0, 0]],  # vertical translation
        [[0, -1, 0], [1, 0, 0], [0, 0, 0]],  # rotation
        [[1, 0, 0], [0, 0, 0], [0, 0, 0]],  # horizontal scale
        [[0, 0, 0], [0, 1, 0], [0, 0, 0]],  # vertical scale
        [[0, 1, 0], [1, 0, 0], [0, 0, 0]],  # shear
    ],
    dtype=np.float64,
)
COMPONENT_NAMES = ("h_translate", "v_translate", "rotate", "h_scale", "v_scale", "shear")


@dataclass
class AugmentationParams:
    family: Family
    eta: np.ndarray = field(default=None)

    def __post_init__(self):
        self.family = Family(self.family)
        k = 1 if self.family is Family.POINT_ROTATION else 6
        if self.eta is None:
            self.eta = np.zeros(k)
        self.eta = np.array(self.eta, dtype=np.float64).reshape(-1)
        if self.eta.shape != (k,):
            raise ConfigurationError(f"{self.family.value} needs {k} eta components, got {self.eta.shape}")
        if not np.all(np.isfinite(self.eta)):
            raise ConfigurationError("eta must be finite")

    @property
    def k(self) -> int:
        return self.eta.shape[0]

    def with_eta(self, eta) -> "AugmentationParams":
        return AugmentationParams(self.family, np.array(eta, dtype=np.float64))


def sample_eps(rng: np.random.Generator, n_samples: int, k: int, antithetic: bool = False, batch=()):
    """Draw ``n_samples`` reparameterisation vectors uniform on [-1, 1]^k.

    The result has shape ``batch + (n_samples, k)``. With ``antithetic`` the
    second half of the samples is the negation of the first half, so the
    empirical mean is exactly zero.
    """
    if k not in (1, 6):
        raise ConfigurationError(f"k must be 1 or 6, got {k}")
    if n_samples < 1:
        raise ConfigurationError("need at least one sample")
    batch = tuple(np.atleast_1d(batch)) if batch != () else ()
    if antithetic:
        if n_samples % 2:
            raise ConfigurationError("antithetic sampling needs an even sample count")
        half = rng.uniform(-1.0, 1.0, size=batch + (n_samples // 2, k))
        return np.concatenate([half, -half], axis=-2)
    return rng.uniform(-1.0, 1.0, size=batch + (n_samples, k))


# --- affine family ------------------------------------------------------------

def affine_matrix(eta, eps):
    """Transform ``T = expm(sum_i eps_i eta_i G_i)`` and its tangents dT/deta_i.

    ``eps`` may carry leading batch axes; returns ``T`` of shape ``(..., 3, 3)``
    and tangents of shape ``(..., 6, 3, 3)``.
    """
    eta = np.asarray(eta, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    gen = np.einsum("...i,ijk->...jk", eps * eta, GENERATORS)
    directions = eps[..., :, None, None] * GENERATORS  # (..., 6, 3, 3)
    T, tangents = expm3_frechet(gen[..., None, :, :], directions)
    return T[..., 0, :, :], tangents


def _source_offsets(Tinv, height, width):
    """Source positions of every output pixel, in pixel units.

    Computed as the output index plus an offset so that the identity
    transform maps every pixel exactly onto itself.
    """
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    delta = Tinv - np.eye(3)
    dx = delta[..., 0, 0, None, None] * xs[None, :] + delta[..., 0, 1, None, None] * ys[:, None] + delta[..., 0, 2, None, None]
    dy = delta[..., 1, 0, None, None] * xs[None, :] + delta[..., 1, 1, None, None] * ys[:, None] + delta[..., 1, 2, None, None]
    u = np.arange(width)[None, :] + dx * (width - 1) / 2.0
    v = np.arange(height)[:, None] + dy * (height - 1) / 2.0
    return u, v, xs, ys


def _bilinear_setup(img, u, v):
    """Corner values and fractional offsets for bilinear lookup with zero padding.

    The cell is chosen as [ceil(u) - 1, ceil(u)], so a source exactly on a
    grid line uses the left/upper cell.
    """
    height, width = img.shape[-2:]
    u0 = np.ceil(u).astype(np.int64) - 1
    v0 = np.ceil(v).astype(np.int64) - 1
    fu = u - u0
    fv = v - v0
    batch_shape = u.shape[:-2]
    # one ring of zero padding; every out-of-grid corner is clipped onto it
    padded = np.pad(img.reshape((-1, height, width)), ((0, 0), (1, 1), (1, 1)))
    flat = padded.reshape((padded.shape[0], -1))
    if flat.shape[0] == 1:
        rows = np.zeros(batch_shape + (1, 1), dtype=np.int64)
    else:
        rows = np.arange(flat.shape[0]).reshape(batch_shape + (1, 1))
    pw = width + 2
    cu0 = np.clip(u0, -1, width) + 1
    cu1 = np.clip(u0 + 1, -1, width) + 1
    cv0 = (np.clip(v0, -1, height) + 1) * pw
    cv1 = (np.clip(v0 + 1, -1, height) + 1) * pw
    rows = np.broadcast_to(rows, u0.shape)
    i00 = flat[rows, cv0 + cu0]
    i01 = flat[rows, cv0 + cu1]
    i10 = flat[rows, cv1 + cu0]
    i11 = flat[rows, cv1 + cu1]
    return i00, i01, i10, i11, fu, fv


def _prepare(img, T):
    img = np.asarray(img, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    batch = np.broadcast_shapes(img.shape[:-2], T.shape[:-2])
    img = np.broadcast_to(img, batch + img.shape[-2:])
    T = np.broadcast_to(T, batch + (3, 3))
    return img, T


def warp_image(img, T):
    """Resample ``img`` (..., H, W) under the forward transform ``T`` (..., 3, 3).

    Each output pixel reads the input at ``inv(T) @ (x', y', 1)`` by bilinear
    interpolation; locations outside the grid read zero.
    """
    img, T = _prepare(img, T)
    u, v, _, _ = _source_offsets(inv3(T), *img.shape[-2:])
    i00, i01, i10, i11, fu, fv = _bilinear_setup(img, u, v)
    return (1 - fv) * ((1 - fu) * i00 + fu * i01) + fv * ((1 - fu) * i10 + fu * i11)


def warp_image_jvp(img, T, dT, return_value=False):
    """Directional derivative of :func:`warp_image` in ``T`` along ``dT``.

    ``dT`` may have one extra axis before the matrix axes (several directions
    at once): shapes ``(..., 3, 3)`` or ``(..., k, 3, 3)``.
    """
    img, T = _prepare(img, T)
    dT = np.asarray(dT, dtype=np.float64)
    height, width = img.shape[-2:]
    Tinv = inv3(T)
    u, v, xs, ys = _source_offsets(Tinv, height, width)
    i00, i01, i10, i11, fu, fv = _bilinear_setup(img, u, v)
    grad_u = (1 - fv) * (i01 - i00) + fv * (i11 - i10)
    grad_v = (1 - fu) * (i10 - i00) + fu * (i11 - i01)

    multi = dT.ndim == T.ndim + 1
    Ti = Tinv[..., None, :, :] if multi else Tinv
    dTinv = -Ti @ dT @ Ti
    # the tangent image is linear in the top two rows of dTinv:
    # sum_m coeff[m] * basis[m] with basis (gu x, gu y, gu, gv x, gv y, gv)
    su, sv = (width - 1) / 2.0, (height - 1) / 2.0
    gx, gy = np.broadcast_arrays(xs[None, :], ys[:, None])
    basis = np.stack(
        [grad_u * (su * gx), grad_u * (su * gy), grad_u * su, grad_v * (sv * gx), grad_v * (sv * gy), grad_v * sv],
        axis=-3,
    )  # (..., 6, H, W)
    coeff = dTinv[..., :2, :].reshape(dTinv.shape[:-2] + (6,))
    flat_basis = basis.reshape(basis.shape[:-2] + (-1,))
    if multi:
        out = (coeff @ flat_basis).reshape(coeff.shape[:-1] + (height, width))
    else:
        out = (coeff[..., None, :] @ flat_basis)[..., 0, :].reshape(coeff.shape[:-1] + (height, width))
    if return_value:
        value = (1 - fv) * ((1 - fu) * i00 + fu * i01) + fv * ((1 - fu) * i10 + fu * i11)
        return value, out
    return out


# --- point rotation -----------------------------------------------------------

def rotate_point(x, eta_rot, eps):
    """Rotate 2-D points by angle ``eps * eta_rot``.

    Returns ``(x', dx'/deta_rot)``; ``x`` is (..., 2) and ``eps`` broadcasts
    against its leading axes.
    """
    x = np.asarray(x, dtype=np.float64)
    angle = np.asarray(eps, dtype=np.float64) * eta_rot
    c, s = np.cos(angle), np.sin(angle)
    x1, x2 = x[..., 0], x[..., 1]
    xr = np.stack([c * x1 - s * x2, s * x1 + c * x2], axis=-1)
    # d/deta R(eps*eta) x = eps * R'(angle) x with R' = [[-s, -c], [c, -s]]
    tangent = np.asarray(eps, dtype=np.float64)[..., None] * np.stack([-s * x1 - c * x2, c * x1 - s * x2], axis=-1)
    return xr, tangent


# --- batched sampler used by the model ----------------------------------------

def augment_batch(aug: AugmentationParams, x, eps, with_tangent=False):
    """Apply the augmentation to a batch.

    ``x`` is (B, 2) for points or (B, H, W) for images, ``eps`` is (B, S, k).
    Returns flattened augmented inputs (B, S, D) and, if requested, their
    tangents (B, S, k, D).
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    n, S = eps.shape[:2]
    if aug.family is Family.POINT_ROTATION:
        xr, tan = rotate_point(x[:, None, :], aug.eta[0], eps[..., 0])
        if with_tangent:
            return xr, tan[:, :, None, :]
        return xr, None
    height, width = x.shape[-2:]
    T, dT = affine_matrix(aug.eta, eps)
    imgs = x[:, None, :, :]
    if not with_tangent:
        return warp_image(imgs, T).reshape(n, S, height * width), None
    value, jvp = warp_image_jvp(imgs, T, dT, return_value=True)
    return value.reshape(n, S, height * width), jvp.reshape(n, S, aug.k, height * width)
