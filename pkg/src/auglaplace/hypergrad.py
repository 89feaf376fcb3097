"""Gradients of the Laplace marginal likelihood with respect to augmentation parameters.

The data-fit part is differentiated with forward mode through the averaged
model. The log-determinant part uses

    d/deta_i log|Hbar| = sum_pq [Hbar^-1]_pq d[Hbar]_pq / deta_i,

where ``Hbar^-1`` (the pre-conditioner) comes from a curvature pass over all
``N`` data and ``dHbar/deta_i`` is estimated on ``M <= N`` of them and scaled
by ``N / M``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .augment import AugmentationParams, sample_eps
from .curvature import (
    FullGgnState,
    FullGgnTangentState,
    KfacCurvature,
    KfacState,
    KfacTangentState,
    accumulate_full_ggn_tangents,
    accumulate_kfac_tangents,
    finalize_kfac,
    full_ggn_from_pass,
    kfac_from_pass,
    sample_pass,
    _check_capacity,
    _chunks,
)
from .laplace import MarglikReport, Prior, damped_dense, log_marglik
from .likelihood import nll, nll_grad
from .linalg import ShapeError, kron_damped_bilinear_trace, rotated_diag


@dataclass
class EtaGradient:
    loglik_part: np.ndarray
    logdet_part: np.ndarray

    @property
    def total(self):
        return self.loglik_part + self.logdet_part


@dataclass
class HyperPass:
    """Everything one hyper-step needs: the eta gradient plus the curvature it used."""
    gradient: EtaGradient
    curvature: object  # KfacCurvature or FullGgnState
    loglik: float
    report: MarglikReport


def _draw(rng, n, S, aug, antithetic):
    return sample_eps(rng, S, aug.k, antithetic, batch=(n,))


def grad_eta_loglik(model, x, y, aug: AugmentationParams, S, rng=None, eps=None, antithetic=True, chunk=256):
    """d/deta sum_n log p(y_n | fhat(x_n)); returns ``(gradient, loglik)``."""
    if eps is None:
        eps = _draw(rng, len(x), S, aug, antithetic)
    grad = np.zeros(aug.k)
    loglik = 0.0
    for sl in _chunks(len(x), chunk):
        sp = sample_pass(model, x[sl], aug, eps[sl], tangents="logits")
        fhat = sp.fhat
        loglik -= float(np.sum(nll(fhat, y[sl])))
        grad -= np.einsum("bc,bkc->k", nll_grad(fhat, y[sl]), sp.dfhat)
    return grad, loglik


def grad_eta_logdet(curv: KfacCurvature, tangents: KfacTangentState, prior: Prior, n_total=None):
    """d/deta log|Hbar| for the KFAC curvature; ``tangents`` are rescaled by N / M."""
    n_total = curv.n if n_total is None else n_total
    dA, dG = tangents.scaled(n_total)
    if len(dA) != len(curv.lam_a):
        raise ShapeError("tangent state and curvature have different layer counts")
    k = dA[0].shape[0]
    out = np.zeros(k)
    scale = 1.0 / curv.n
    for l, gamma in enumerate(prior.prec):
        la, lg = curv.lam_a[l], curv.lam_g[l]
        if dA[l].shape[1:] != (la.size, la.size) or dG[l].shape[1:] != (lg.size, lg.size):
            raise ShapeError(f"layer {l}: tangent shape does not match the factors")
        p_da = rotated_diag(curv.vec_a[l], dA[l])  # (k, Da)
        q_dg = rotated_diag(curv.vec_g[l], dG[l])  # (k, Dg)
        for i in range(k):
            out[i] += scale * (
                kron_damped_bilinear_trace(p_da[i], lg, la, lg, scale, gamma)
                + kron_damped_bilinear_trace(la, q_dg[i], la, lg, scale, gamma)
            )
    return out


def grad_eta_logdet_dense(state: FullGgnState, tangents: FullGgnTangentState, model, prior: Prior, n_total=None):
    """d/deta log|Hbar| for the dense GGN: tr(Hbar^-1 dH_i)."""
    n_total = state.n_seen if n_total is None else n_total
    hbar = damped_dense(state, model, prior)
    chol = scipy.linalg.cho_factor(hbar, lower=True)
    inv = scipy.linalg.cho_solve(chol, np.eye(hbar.shape[0]))
    dH = tangents.dH * (n_total / tangents.m_seen)
    return np.einsum("pq,kpq->k", inv, dH)


def _pass_one(model, x, y, aug, eps, curvature, chunk, mode="invariant", eta_grad=True):
    """Curvature over all data, the data fit, and (optionally) its eta-gradient in one sweep."""
    eta_grad = eta_grad and aug is not None and mode == "invariant"
    grad = np.zeros(aug.k) if aug is not None else np.zeros(0)
    loglik = 0.0
    if curvature == "kfac":
        A = [np.zeros((w.shape[1], w.shape[1])) for w in model.weights]
        G = [np.zeros((w.shape[0], w.shape[0])) for w in model.weights]
    elif curvature == "full":
        H = np.zeros((model.n_params, model.n_params))
    else:
        raise ValueError(f"unknown curvature {curvature!r}")
    for sl in _chunks(len(x), chunk):
        sp = sample_pass(model, x[sl], aug, None if eps is None else eps[sl], tangents="logits" if eta_grad else False)
        if mode == "augmented_data":
            loglik -= float(np.sum(nll(sp.logits, y[sl][:, None]))) / sp.logits.shape[1]
        else:
            fhat = sp.fhat
            loglik -= float(np.sum(nll(fhat, y[sl])))
            if eta_grad:
                grad -= np.einsum("bc,bkc->k", nll_grad(fhat, y[sl]), sp.dfhat)
        if curvature == "kfac":
            dA, dG = kfac_from_pass(sp, mode)
            for l in range(len(A)):
                A[l] += dA[l]
                G[l] += dG[l]
        else:
            H += full_ggn_from_pass(sp, mode)
    if curvature == "kfac":
        state = KfacState([0.5 * (a + a.T) for a in A], [0.5 * (g + g.T) for g in G], len(x))
    else:
        state = FullGgnState(0.5 * (H + H.T), len(x))
    return state, loglik, grad


def laplace_pass(model, x, y, aug, prior: Prior, eps=None, curvature="kfac", mode="invariant", chunk=128):
    """Curvature and Laplace report at fixed eta (no eta-gradient).

    ``aug=None`` evaluates the plain network; ``mode="augmented_data"``
    scores classical data augmentation (each augmented copy a datum of
    weight 1/S).
    """
    if curvature == "full":
        _check_capacity(model)
    state, loglik, _ = _pass_one(model, x, y, aug, eps, curvature, chunk, mode=mode, eta_grad=False)
    curv = finalize_kfac(state) if curvature == "kfac" else state
    return curv, log_marglik(curv, model, prior, loglik)


def grad_eta_total(
    model,
    x,
    y,
    aug: AugmentationParams,
    prior: Prior,
    S: int,
    curvature="kfac",
    subsample=None,
    rng=None,
    eps=None,
    antithetic=True,
    share_eps=False,
    differentiate_lambda=True,
    chunk=128,
) -> HyperPass:
    """Two-pass eta-gradient of the Laplace log marginal likelihood.

    Pass 1 accumulates the curvature (the pre-conditioner), the data fit and
    its gradient over all N points. Pass 2 accumulates curvature tangents on
    a subsample of ``subsample`` points drawn without replacement. With
    ``share_eps`` (or an explicit ``eps``) pass 2 reuses the pass-1 noise;
    otherwise fresh noise is drawn.
    """
    n = len(x)
    if eps is None:
        eps = _draw(rng, n, S, aug, antithetic)
        eps_fixed = share_eps
    else:
        eps_fixed = True
    state, loglik, grad_fit = _pass_one(model, x, y, aug, eps, curvature, chunk)

    m = n if subsample is None else int(subsample)
    if not 1 <= m <= n:
        raise ValueError(f"subsample size must be in [1, {n}], got {m}")
    idx = np.arange(n) if m == n else np.sort(rng.choice(n, size=m, replace=False))
    eps2 = eps[idx] if eps_fixed else _draw(rng, m, S, aug, antithetic)

    if curvature == "kfac":
        tstate = accumulate_kfac_tangents(
            KfacTangentState.empty(model, aug.k), model, x[idx], aug, eps2, differentiate_lambda, chunk=chunk
        )
        curv = finalize_kfac(state)
        dlogdet = grad_eta_logdet(curv, tstate, prior, n)
    elif curvature == "full":
        tstate = accumulate_full_ggn_tangents(
            FullGgnTangentState.empty(model, aug.k), model, x[idx], aug, eps2, differentiate_lambda, chunk=max(1, chunk // 4)
        )
        curv = state
        dlogdet = grad_eta_logdet_dense(state, tstate, model, prior, n)
    else:
        raise ValueError(f"unknown curvature {curvature!r}")
    report = log_marglik(curv, model, prior, loglik)
    return HyperPass(EtaGradient(grad_fit, -0.5 * dlogdet), curv, loglik, report)


def marglik_at(model, x, y, aug: AugmentationParams, prior: Prior, eps, curvature="kfac", chunk=128) -> MarglikReport:
    """Laplace log marginal likelihood at ``aug.eta`` with frozen noise ``eps``."""
    return laplace_pass(model, x, y, aug, prior, eps, curvature, chunk=chunk)[1]


def fd_oracle(objective, eta, h=1e-5):
    """Central finite differences of a scalar ``objective(eta)``.

    The objective must freeze its own randomness (common random numbers).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    eta = np.asarray(eta, dtype=np.float64)
    out = np.zeros_like(eta)
    for i in range(eta.size):
        e = np.zeros_like(eta)
        e.flat[i] = h
        out.flat[i] = (objective(eta + e) - objective(eta - e)) / (2 * h)
    return out
