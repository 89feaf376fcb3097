"""Accumulation of augmented GGN and KFAC curvature and of their eta-tangents.

All states hold plain sums over data, so two shards accumulated separately
merge by addition. The ``1/N`` of the Kronecker approximation is applied
only when a KFAC state is finalised.

Two weighting modes exist for augmented inputs:

``"invariant"``
    Curvature of the averaged model ``fhat``: Jacobians and KFAC factors are
    averaged over augmentation samples before the outer products and
    ``Lambda`` is taken at ``fhat``.
``"augmented_data"``
    Classical data augmentation: each augmented copy is a datum of weight
    ``1/S`` with its own ``Lambda(f(x'))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentationParams, augment_batch
from .likelihood import lambda_, lambda_tangent
from .linalg import ShapeError, sym_eigh
from .model import (
    MlpModel,
    back_grads,
    back_grads_tangent,
    flatten_inputs,
    forward,
    forward_tangent,
    compensated_mean,
)

MAX_DENSE_PARAMS = 20_000


class CapacityError(RuntimeError):
    pass


# --- states -------------------------------------------------------------------

@dataclass
class FullGgnState:
    H: np.ndarray
    n_seen: int = 0

    @classmethod
    def empty(cls, model: MlpModel):
        _check_capacity(model)
        return cls(np.zeros((model.n_params, model.n_params)))


@dataclass
class FullGgnTangentState:
    dH: np.ndarray  # (k, P, P)
    m_seen: int = 0

    @classmethod
    def empty(cls, model: MlpModel, k: int):
        _check_capacity(model)
        return cls(np.zeros((k, model.n_params, model.n_params)))


@dataclass
class KfacState:
    A: list
    G: list
    n_seen: int = 0

    @classmethod
    def empty(cls, model: MlpModel):
        return cls(
            [np.zeros((w.shape[1], w.shape[1])) for w in model.weights],
            [np.zeros((w.shape[0], w.shape[0])) for w in model.weights],
        )


@dataclass
class KfacTangentState:
    dA: list  # (k, D+1, D+1) per layer
    dG: list  # (k, G, G) per layer
    m_seen: int = 0

    @classmethod
    def empty(cls, model: MlpModel, k: int):
        return cls(
            [np.zeros((k, w.shape[1], w.shape[1])) for w in model.weights],
            [np.zeros((k, w.shape[0], w.shape[0])) for w in model.weights],
        )

    def scaled(self, n_total):
        """Tangents rescaled by N / M so they estimate the full-data sums."""
        if self.m_seen == 0:
            raise ValueError("no tangent data accumulated")
        c = n_total / self.m_seen
        return [c * a for a in self.dA], [c * g for g in self.dG]


def merge(a, b):
    """Sum two curvature states of the same kind and shape."""
    if type(a) is not type(b):
        raise ShapeError("cannot merge states of different kinds")

    def add(x, y):
        if np.shape(x) != np.shape(y):
            raise ShapeError(f"shape mismatch {np.shape(x)} vs {np.shape(y)}")
        return x + y

    if isinstance(a, FullGgnState):
        return FullGgnState(add(a.H, b.H), a.n_seen + b.n_seen)
    if isinstance(a, FullGgnTangentState):
        return FullGgnTangentState(add(a.dH, b.dH), a.m_seen + b.m_seen)
    if isinstance(a, KfacState):
        if len(a.A) != len(b.A):
            raise ShapeError("layer count mismatch")
        return KfacState([add(x, y) for x, y in zip(a.A, b.A)], [add(x, y) for x, y in zip(a.G, b.G)], a.n_seen + b.n_seen)
    if len(a.dA) != len(b.dA):
        raise ShapeError("layer count mismatch")
    return KfacTangentState(
        [add(x, y) for x, y in zip(a.dA, b.dA)], [add(x, y) for x, y in zip(a.dG, b.dG)], a.m_seen + b.m_seen
    )


def _check_capacity(model):
    if model.n_params > MAX_DENSE_PARAMS:
        raise CapacityError(
            f"dense GGN needs P <= {MAX_DENSE_PARAMS}, model has {model.n_params}; use the KFAC curvature"
        )


# --- per-batch sample pass ----------------------------------------------------

@dataclass
class SamplePass:
    """Per-(datum, sample) forward quantities for one batch; axes (B, S, ...)."""
    logits: np.ndarray
    inputs: list
    grads: list
    d_inputs: list = field(default=None)  # (B, S, k, D+1)
    d_grads: list = field(default=None)  # (B, S, k, G, C)
    d_logits: np.ndarray = field(default=None)  # (B, S, k, C)

    @property
    def fhat(self):
        return compensated_mean(self.logits, axis=1)

    @property
    def dfhat(self):
        """(B, k, C)"""
        return compensated_mean(self.d_logits, axis=1)


def sample_pass(model: MlpModel, x, aug: AugmentationParams | None, eps=None, tangents=False) -> SamplePass:
    """Run the network on every augmented copy of the batch ``x``.

    ``eps`` is (B, S, k); with ``aug=None`` the raw inputs are used (S = 1).
    ``tangents="logits"`` computes only the logit tangents, ``True`` also the
    layer-input and back-gradient tangents.
    """
    x = np.asarray(x, dtype=np.float64)
    if aug is None:
        xa, dxa = flatten_inputs(x)[:, None, :], None
        if tangents:
            raise ValueError("tangents need an augmentation")
    else:
        xa, dxa = augment_batch(aug, x, eps, with_tangent=tangents)
    logits, trace = forward(model, xa)
    grads = back_grads(model, trace)
    sp = SamplePass(logits, trace.inputs, grads)
    if tangents:
        d_inputs, d_preacts, d_logits = forward_tangent(model, trace, dxa)
        sp.d_logits = d_logits
        if tangents != "logits":
            sp.d_inputs = d_inputs
            sp.d_grads = back_grads_tangent(model, trace, grads, d_preacts)
    return sp


def _chunks(n, size):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _eps_chunk(eps, sl):
    return None if eps is None else eps[sl]


# --- full GGN -----------------------------------------------------------------

def _mean_jacobian(sp: SamplePass):
    """Jhat per datum (B, C, P), averaged over samples."""
    S = sp.logits.shape[1]
    blocks = []
    for at, g in zip(sp.inputs, sp.grads):
        blk = np.einsum("bsk,bsjc->bckj", at, g, optimize=True) / S
        blocks.append(blk.reshape(blk.shape[:2] + (-1,)))
    return np.concatenate(blocks, axis=-1)


def _mean_jacobian_tangent(sp: SamplePass):
    """d Jhat / d eta per datum (B, k, C, P)."""
    blocks = []
    for at, g, dat, dg in zip(sp.inputs, sp.grads, sp.d_inputs, sp.d_grads):
        # per-sample terms first, so antithetic pairs cancel exactly in the mean
        blk = dat[:, :, :, None, :, None] * g.transpose(0, 1, 3, 2)[:, :, None, :, None, :]
        blk += at[:, :, None, None, :, None] * dg.transpose(0, 1, 2, 4, 3)[:, :, :, :, None, :]
        blk = compensated_mean(blk, axis=1)
        blocks.append(blk.reshape(blk.shape[:3] + (-1,)))
    return np.concatenate(blocks, axis=-1)


def full_ggn_from_pass(sp: SamplePass, mode="invariant"):
    """GGN contribution ``sum_b Jhat^T Lambda Jhat`` of one sample pass."""
    if mode == "invariant":
        J = _mean_jacobian(sp)
        return np.einsum("bcp,bcd,bdq->pq", J, lambda_(sp.fhat), J, optimize=True)
    if mode == "augmented_data":
        S = sp.logits.shape[1]
        lam = lambda_(sp.logits)
        blocks = []
        for at, g in zip(sp.inputs, sp.grads):
            blk = np.einsum("bsk,bsjc->bsckj", at, g, optimize=True)
            blocks.append(blk.reshape(blk.shape[:3] + (-1,)))
        J = np.concatenate(blocks, axis=-1)
        return np.einsum("bscp,bscd,bsdq->pq", J, lam, J, optimize=True) / S
    raise ValueError(f"unknown mode {mode!r}")


def accumulate_full_ggn(state: FullGgnState, model, x, aug=None, eps=None, mode="invariant", chunk=64):
    """Add ``sum_n Jhat^T Lambda(fhat) Jhat`` over the batch to ``state``."""
    _check_capacity(model)
    H = state.H.copy()
    for sl in _chunks(len(x), chunk):
        H += full_ggn_from_pass(sample_pass(model, x[sl], aug, _eps_chunk(eps, sl)), mode)
    return FullGgnState(0.5 * (H + H.T), state.n_seen + len(x))


def accumulate_full_ggn_tangents(tstate: FullGgnTangentState, model, x, aug, eps, differentiate_lambda=True, chunk=32):
    """Add ``d/deta_i sum_n Jhat^T Lambda(fhat) Jhat`` over the batch."""
    dH = tstate.dH.copy()
    for sl in _chunks(len(x), chunk):
        sp = sample_pass(model, x[sl], aug, eps[sl], tangents=True)
        J = _mean_jacobian(sp)
        dJ = _mean_jacobian_tangent(sp)
        fhat = sp.fhat
        lam = lambda_(fhat)
        half = np.einsum("bqcp,bcd,bdr->qpr", dJ, lam, J, optimize=True)
        dH += half + np.swapaxes(half, -1, -2)
        if differentiate_lambda:
            dlam = lambda_tangent(fhat, sp.dfhat)
            dH += np.einsum("bcp,bqcd,bdr->qpr", J, dlam, J, optimize=True)
    return FullGgnTangentState(dH, tstate.m_seen + len(x))


# --- KFAC ---------------------------------------------------------------------

def kfac_from_pass(sp: SamplePass, mode="invariant"):
    """Per-layer factor contributions (A_l, G_l) of one sample pass.

    ``abar`` / ``gbar`` are the sample means of the homogeneous layer inputs
    and output Jacobians (expectation of the Kronecker product replaced by the
    Kronecker product of expectations).
    """
    A, G = [], []
    if mode == "invariant":
        lam = lambda_(sp.fhat)
        for at, g in zip(sp.inputs, sp.grads):
            abar = compensated_mean(at, axis=1)
            gbar = compensated_mean(g, axis=1)
            A.append(abar.T @ abar)
            G.append(np.einsum("bic,bcd,bjd->ij", gbar, lam, gbar, optimize=True))
    elif mode == "augmented_data":
        S = sp.logits.shape[1]
        lam = lambda_(sp.logits)
        for at, g in zip(sp.inputs, sp.grads):
            A.append(np.einsum("bsi,bsj->ij", at, at, optimize=True) / S)
            G.append(np.einsum("bsic,bscd,bsjd->ij", g, lam, g, optimize=True) / S)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return A, G


def accumulate_kfac(state: KfacState, model, x, aug=None, eps=None, mode="invariant", chunk=256):
    """Add per-layer factors ``abar abar^T`` and ``gbar Lambda(fhat) gbar^T`` over the batch."""
    A = [a.copy() for a in state.A]
    G = [g.copy() for g in state.G]
    for sl in _chunks(len(x), chunk):
        dA, dG = kfac_from_pass(sample_pass(model, x[sl], aug, _eps_chunk(eps, sl)), mode)
        for l in range(len(A)):
            A[l] += dA[l]
            G[l] += dG[l]
    return KfacState([0.5 * (a + a.T) for a in A], [0.5 * (g + g.T) for g in G], state.n_seen + len(x))


def _sandwich(left, mid, right):
    """``sum_b left[b, q] @ mid[b, q] @ right[b].T`` for (B, k, i, c), (B, k, c, d), (B, j, d) operands."""
    t = left @ mid  # (B, k, i, d)
    B, k, i, d = t.shape
    return t.transpose(1, 2, 0, 3).reshape(k, i, B * d) @ right.transpose(0, 2, 1).reshape(B * d, -1)


def accumulate_kfac_tangents(tstate: KfacTangentState, model, x, aug, eps, differentiate_lambda=True, chunk=128):
    """Add eta-tangents of the KFAC factors over the batch."""
    dA = [a.copy() for a in tstate.dA]
    dG = [g.copy() for g in tstate.dG]
    for sl in _chunks(len(x), chunk):
        sp = sample_pass(model, x[sl], aug, eps[sl], tangents=True)
        fhat = sp.fhat
        lam = lambda_(fhat)
        dlam = lambda_tangent(fhat, sp.dfhat) if differentiate_lambda else None
        for l in range(model.n_layers):
            abar = compensated_mean(sp.inputs[l], axis=1)
            dabar = compensated_mean(sp.d_inputs[l], axis=1)
            gbar = compensated_mean(sp.grads[l], axis=1)
            dgbar = compensated_mean(sp.d_grads[l], axis=1)
            xa = np.swapaxes(dabar, 0, 1).transpose(0, 2, 1) @ abar  # (k, i, j)
            dA[l] += xa + np.swapaxes(xa, -1, -2)
            xg = _sandwich(dgbar, lam[:, None], gbar)
            dG[l] += xg + np.swapaxes(xg, -1, -2)
            if dlam is not None:
                dG[l] += _sandwich(gbar[:, None], dlam, gbar)
    return KfacTangentState(
        [0.5 * (a + np.swapaxes(a, -1, -2)) for a in dA],
        [0.5 * (g + np.swapaxes(g, -1, -2)) for g in dG],
        tstate.m_seen + len(x),
    )


@dataclass(frozen=True)
class KfacCurvature:
    """Finalised KFAC: eigen-pairs of each layer's factors and the data count N."""
    lam_a: list
    vec_a: list
    lam_g: list
    vec_g: list
    n: int

    def dense_block(self, l):
        """(1/N) A kron G for layer ``l`` (for testing on small layers)."""
        a = (self.vec_a[l] * self.lam_a[l]) @ self.vec_a[l].T
        g = (self.vec_g[l] * self.lam_g[l]) @ self.vec_g[l].T
        return np.kron(a, g) / self.n


def finalize_kfac(state: KfacState) -> KfacCurvature:
    if state.n_seen == 0:
        raise ValueError("cannot finalise an empty KFAC state")
    lam_a, vec_a, lam_g, vec_g = [], [], [], []
    for A, G in zip(state.A, state.G):
        ea = sym_eigh(0.5 * (A + A.T))
        eg = sym_eigh(0.5 * (G + G.T))
        lam_a.append(np.maximum(ea.eigenvalues, 0.0))
        vec_a.append(ea.eigenvectors)
        lam_g.append(np.maximum(eg.eigenvalues, 0.0))
        vec_g.append(eg.eigenvectors)
    return KfacCurvature(lam_a, vec_a, lam_g, vec_g, state.n_seen)
