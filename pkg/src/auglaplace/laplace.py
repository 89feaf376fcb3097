"""Laplace-GGN log marginal likelihood with per-layer Gaussian priors.

The damped curvature is ``Hbar = H_ggn + diag(gamma_l)`` where ``gamma_l``
is the prior precision of layer ``l``. For KFAC the layer block is
``(1/N) A kron G + gamma_l I``, handled exactly through eigenvalue shifts.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg

from .curvature import FullGgnState, KfacCurvature, KfacState, finalize_kfac
from .linalg import IndefiniteError, kron_damped_bilinear_trace, kron_damped_logdet, logdet_spd
from .model import MlpModel

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class Prior:
    log_prec: np.ndarray  # one entry per layer

    def __post_init__(self):
        self.log_prec = np.array(self.log_prec, dtype=np.float64).reshape(-1)

    @classmethod
    def constant(cls, model: MlpModel, prec=1.0):
        return cls(np.full(model.n_layers, np.log(prec)))

    @property
    def prec(self):
        return np.exp(self.log_prec)

    def param_precisions(self, model: MlpModel):
        return np.concatenate([np.full(d, g) for d, g in zip(model.layer_sizes, self.prec)])


@dataclass
class MarglikReport:
    loglik: float
    logprior: float
    logdet_term: float
    total: float

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def compose(cls, loglik, logprior, logdet_term):
        loglik, logprior, logdet_term = float(loglik), float(logprior), float(logdet_term)
        return cls(loglik, logprior, logdet_term, loglik + logprior + logdet_term)


def _layer_sq_norms(model):
    return np.array([float(np.sum(w * w)) for w in model.weights])


def log_prior(model: MlpModel, prior: Prior) -> float:
    d = np.array(model.layer_sizes, dtype=np.float64)
    return float(np.sum(0.5 * d * (prior.log_prec - LOG_2PI) - 0.5 * prior.prec * _layer_sq_norms(model)))


def _as_curvature(state):
    if isinstance(state, KfacState):
        return None if state.n_seen == 0 else finalize_kfac(state)
    return state


def damped_dense(state: FullGgnState, model, prior) -> np.ndarray:
    return state.H + np.diag(prior.param_precisions(model))


def log_det_damped(state, model: MlpModel, prior: Prior) -> float:
    """log|Hbar| for a full-GGN state or (finalised) KFAC curvature."""
    curv = _as_curvature(state)
    if curv is None:
        return float(np.sum(np.array(model.layer_sizes) * prior.log_prec))
    if isinstance(curv, FullGgnState):
        try:
            return logdet_spd(damped_dense(curv, model, prior))
        except IndefiniteError as err:
            raise IndefiniteError("damped GGN is not positive definite; prior precision too small") from err
    if isinstance(curv, KfacCurvature):
        return sum(
            kron_damped_logdet(la, lg, 1.0 / curv.n, g)
            for la, lg, g in zip(curv.lam_a, curv.lam_g, prior.prec)
        )
    raise TypeError(f"unsupported curvature state {type(state).__name__}")


def log_marglik(state, model: MlpModel, prior: Prior, loglik: float) -> MarglikReport:
    """Laplace approximation ``loglik + log p(theta) - 1/2 log|Hbar / 2pi|``."""
    logdet = log_det_damped(state, model, prior)
    logdet_term = -0.5 * logdet + 0.5 * model.n_params * LOG_2PI
    return MarglikReport.compose(loglik, log_prior(model, prior), logdet_term)


def inverse_trace_per_layer(state, model: MlpModel, prior: Prior) -> np.ndarray:
    """tr([Hbar^-1]_ll) for each layer block."""
    curv = _as_curvature(state)
    if curv is None:
        return np.array(model.layer_sizes) / prior.prec
    if isinstance(curv, FullGgnState):
        chol = scipy.linalg.cho_factor(damped_dense(curv, model, prior), lower=True)
        inv = scipy.linalg.cho_solve(chol, np.eye(model.n_params))
        diag = np.diag(inv)
        return np.array([diag[sl].sum() for sl in model.layer_slices()])
    return np.array(
        [
            kron_damped_bilinear_trace(np.ones_like(la), np.ones_like(lg), la, lg, 1.0 / curv.n, g)
            for la, lg, g in zip(curv.lam_a, curv.lam_g, prior.prec)
        ]
    )


def grad_log_precision(state, model: MlpModel, prior: Prior) -> np.ndarray:
    """d total / d log gamma_l = d_l/2 - gamma_l |theta_l|^2 / 2 - gamma_l tr(Hbar_l^-1) / 2."""
    d = np.array(model.layer_sizes, dtype=np.float64)
    gamma = prior.prec
    return 0.5 * d - 0.5 * gamma * _layer_sq_norms(model) - 0.5 * gamma * inverse_trace_per_layer(state, model, prior)
