"""Interleaved MAP training and marginal-likelihood hyper-steps.

Methods
-------
``baseline``
    Plain network, no augmentation; prior precisions learned by marginal likelihood.
``data_aug``
    Classical data augmentation at a fixed eta: every augmented copy is a
    training point of weight 1/S, predictions use the plain network.
``invariant``
    Averaged (invariant) model with a fixed eta; prior precisions learned.
``augerino``
    Averaged model trained jointly in (theta, eta) on the cross-entropy with
    the ``-1e-2 |eta|_2`` width bonus and weight decay 1e-4.
``marglik``
    Averaged model; eta and prior precisions follow the Laplace marginal likelihood.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentationParams, Family, augment_batch, sample_eps
from .curvature import MAX_DENSE_PARAMS
from .hypergrad import grad_eta_total, laplace_pass
from .laplace import MarglikReport, Prior, grad_log_precision
from .likelihood import nll, nll_grad
from .model import MlpModel, flatten_inputs, hidden_slopes, forward, forward_tangent, compensated_mean

log = logging.getLogger(__name__)

METHODS = ("baseline", "data_aug", "invariant", "augerino", "marglik")
AUGERINO_WIDTH_BONUS = 1e-2
AUGERINO_WEIGHT_DECAY = 1e-4


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int | None = None  # None: full batch
    S_train: int = 8
    S_test: int = 8
    S_hyper: int | None = None  # None: S_train
    lr_theta: float = 5e-3
    lr_theta_floor: float = 1e-4
    lr_hyper: float = 0.05
    lr_hyper_floor: float | None = None  # None: constant
    lr_prior: float | None = None  # None: lr_hyper
    burnin_epochs: int = 10
    hyper_every: int = 1
    hyper_subsample: int | None = None  # M; None: N
    curvature: str = "kfac"
    final_curvature: str = "auto"
    method: str = "marglik"
    family: str = "PointRotation"
    fixed_eta: list | None = None
    eta_init: float = 0.0
    prior_prec_init: float = 1.0
    tied_prior: bool = False  # one precision shared by all layers
    antithetic: bool = True
    differentiate_lambda: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.curvature not in ("kfac", "full") or self.final_curvature not in ("kfac", "full", "auto"):
            raise ValueError("curvature must be 'kfac' or 'full' (final_curvature may also be 'auto')")
        if self.burnin_epochs < 0 or self.hyper_every < 1 or self.epochs < 1:
            raise ValueError("need epochs >= 1, burnin_epochs >= 0, hyper_every >= 1")
        if min(self.S_train, self.S_test, self.s_hyper) < 1:
            raise ValueError("sample counts must be >= 1")
        if self.antithetic and self.s_hyper % 2:
            raise ValueError("antithetic hyper-gradients need an even S_hyper")

    @property
    def s_hyper(self):
        return self.S_train if self.S_hyper is None else self.S_hyper

    @property
    def k(self):
        return 1 if Family(self.family) is Family.POINT_ROTATION else 6


@dataclass
class RunResult:
    eta_trajectory: np.ndarray  # (epochs, k), |eta|
    marglik_trajectory: np.ndarray
    rows: list  # per-epoch dicts for trajectory.csv
    test_accuracy: float
    test_nll: float
    final_report: MarglikReport
    final_eta: np.ndarray
    final_log_prec: np.ndarray
    model: MlpModel
    wallclock: float
    config: TrainConfig = field(repr=False, default=None)


# --- schedules and optimiser --------------------------------------------------

def cosine_lr(epoch, epochs, lr0, floor):
    """Cosine decay from ``lr0`` at epoch 0 to ``floor`` at ``epochs``."""
    if floor is None:
        return lr0
    return floor + 0.5 * (lr0 - floor) * (1.0 + np.cos(np.pi * min(epoch, epochs) / epochs))


class Adam:
    """Adam for minimisation on a flat vector."""

    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


def _stream(seed, epoch, tag):
    return np.random.default_rng([seed, epoch, tag])


_THETA, _HYPER, _EVAL, _BATCH = 1, 2, 3, 4


# --- theta gradients ----------------------------------------------------------

def _backprop(model, trace, delta):
    """Parameter gradient given dLoss/dlogits ``delta`` for every traced row."""
    grads = [None] * model.n_layers
    for l in range(model.n_layers - 1, -1, -1):
        at = trace.inputs[l]
        grads[l] = delta.reshape(-1, delta.shape[-1]).T @ at.reshape(-1, at.shape[-1])
        if l > 0:
            delta = (delta @ model.weights[l][:, :-1]) * hidden_slopes(model, trace, l - 1)
    return np.concatenate([g.ravel(order="F") for g in grads])


def data_fit_grad(model, x, y, aug, eps, mode, eta_tangent=False):
    """Sum of nll over the batch, its theta-gradient and optionally its eta-gradient.

    ``mode``: ``"plain"`` (no augmentation), ``"invariant"`` (nll of fhat) or
    ``"augmented_data"`` (mean over copies of the per-copy nll).
    """
    if mode == "plain":
        logits, trace = forward(model, flatten_inputs(x))
        loss = float(np.sum(nll(logits, y)))
        return loss, _backprop(model, trace, nll_grad(logits, y)), None
    xa, dxa = augment_batch(aug, x, eps, with_tangent=eta_tangent)
    logits, trace = forward(model, xa)  # (B, S, C)
    S = logits.shape[1]
    if mode == "augmented_data":
        loss = float(np.sum(nll(logits, y[:, None]))) / S
        delta = nll_grad(logits, y[:, None]) / S
        return loss, _backprop(model, trace, delta), None
    fhat = compensated_mean(logits, axis=1)
    loss = float(np.sum(nll(fhat, y)))
    g = nll_grad(fhat, y)
    delta = np.broadcast_to(g[:, None, :], logits.shape) / S
    deta = None
    if eta_tangent:
        _, _, dl = forward_tangent(model, trace, dxa)
        deta = np.einsum("bc,bkc->k", g, compensated_mean(dl, axis=1))
    return loss, _backprop(model, trace, delta), deta


def augerino_width_grad(eta):
    """Gradient of the width bonus ``-c |eta|_2`` (to be minimised); zero at eta = 0."""
    eta = np.asarray(eta, dtype=np.float64)
    norm = np.linalg.norm(eta)
    if norm == 0:
        return np.zeros_like(eta)
    return -AUGERINO_WIDTH_BONUS * eta / norm


def _prior_grad_theta(model, prior):
    return np.concatenate([g * w.ravel(order="F") for g, w in zip(prior.prec, model.weights)])


# --- training -----------------------------------------------------------------

class Trainer:
    """Holds the mutable training state of one run."""

    def __init__(self, model: MlpModel, cfg: TrainConfig, x, y):
        self.cfg = cfg
        self.model = model
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.n = len(self.y)
        eta0 = np.full(cfg.k, 0.0 if cfg.method == "baseline" else cfg.eta_init)
        if cfg.method in ("data_aug", "invariant"):
            if cfg.fixed_eta is None:
                raise ValueError(f"method {cfg.method} needs fixed_eta")
            eta0 = np.asarray(cfg.fixed_eta, dtype=np.float64).reshape(cfg.k)
        self.aug = AugmentationParams(cfg.family, eta0)
        self.prior = Prior.constant(model, cfg.prior_prec_init)
        self.opt_theta = Adam(model.n_params)
        self.opt_eta = Adam(cfg.k)
        self.opt_prior = Adam(model.n_layers)
        self.last_report = None

    # which likelihood each method uses
    @property
    def fit_mode(self):
        return {"baseline": "plain", "data_aug": "augmented_data"}.get(self.cfg.method, "invariant")

    @property
    def uses_averaged_model(self):
        return self.cfg.method in ("invariant", "augerino", "marglik")

    def map_epoch(self, epoch):
        """One pass of minibatch Adam steps on theta; returns the mean training nll."""
        cfg = self.cfg
        rng = _stream(cfg.seed, epoch, _THETA)
        bs = self.n if cfg.batch_size is None else min(cfg.batch_size, self.n)
        order = _stream(cfg.seed, epoch, _BATCH).permutation(self.n) if bs < self.n else np.arange(self.n)
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_theta, cfg.lr_theta_floor)
        total = 0.0
        augerino = cfg.method == "augerino"
        for start in range(0, self.n, bs):
            idx = order[start:start + bs]
            xb, yb = self.x[idx], self.y[idx]
            eps = None
            if self.fit_mode != "plain":
                eps = sample_eps(rng, cfg.S_train, cfg.k, False, batch=(len(idx),))
            loss, g, geta = data_fit_grad(self.model, xb, yb, self.aug, eps, self.fit_mode, eta_tangent=augerino)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: loss={loss}, |theta|={np.linalg.norm(self.model.flat_params())}"
                )
            total += loss
            theta = self.model.flat_params()
            if augerino:
                # batch-mean cross-entropy as in the augerino objective
                g = g / len(idx) + AUGERINO_WEIGHT_DECAY * theta
                geta = geta / len(idx) + augerino_width_grad(self.aug.eta)
                lr_eta = cosine_lr(epoch, cfg.epochs, cfg.lr_hyper, cfg.lr_hyper_floor)
                self.aug = self.aug.with_eta(self.opt_eta.step(self.aug.eta, geta, lr_eta))
            else:
                g = g + (len(idx) / self.n) * _prior_grad_theta(self.model, self.prior)
            self.model = self.model.with_params(self.opt_theta.step(theta, g, lr))
        return total / self.n

    def _report_aug(self):
        return self.aug if self.fit_mode != "plain" else None

    def hyper_due(self, epoch):
        cfg = self.cfg
        return epoch >= cfg.burnin_epochs and (epoch - cfg.burnin_epochs) % cfg.hyper_every == 0

    def hyper_step(self, epoch):
        """Marginal-likelihood step on eta and prior precisions; returns the Laplace report.

        Before burn-in (or between scheduled steps) only the report is computed.
        """
        cfg = self.cfg
        rng = _stream(cfg.seed, epoch, _HYPER)
        S = cfg.s_hyper
        aug = self._report_aug()
        due = self.hyper_due(epoch) and cfg.method != "augerino"
        learn_eta = due and cfg.method == "marglik"
        if learn_eta:
            hp = grad_eta_total(
                self.model, self.x, self.y, self.aug, self.prior, S,
                curvature=cfg.curvature, subsample=cfg.hyper_subsample, rng=rng,
                antithetic=cfg.antithetic, differentiate_lambda=cfg.differentiate_lambda,
            )
            curv, report = hp.curvature, hp.report
            g_eta = hp.gradient.total
        else:
            eps = sample_eps(rng, S, cfg.k, cfg.antithetic, batch=(self.n,)) if aug is not None else None
            curv, report = laplace_pass(self.model, self.x, self.y, aug, self.prior, eps, cfg.curvature, self.fit_mode if aug is not None else "invariant")
        if due:
            g_prior = grad_log_precision(curv, self.model, self.prior)
            if cfg.tied_prior:
                g_prior = np.full_like(g_prior, g_prior.sum())
            lr_prior = cfg.lr_hyper if cfg.lr_prior is None else cfg.lr_prior
            self.prior = Prior(self.opt_prior.step(self.prior.log_prec, -g_prior, lr_prior))
        if learn_eta:
            lr_eta = cosine_lr(epoch, cfg.epochs, cfg.lr_hyper, cfg.lr_hyper_floor)
            self.aug = self.aug.with_eta(self.opt_eta.step(self.aug.eta, -g_eta, lr_eta))
        self.last_report = report
        return report

    def final_report(self, seed_tag=0):
        cfg = self.cfg
        curvature = cfg.final_curvature
        if curvature == "auto":
            curvature = "full" if self.model.n_params <= MAX_DENSE_PARAMS else "kfac"
        aug = self._report_aug()
        rng = _stream(cfg.seed, cfg.epochs + seed_tag, _HYPER)
        eps = sample_eps(rng, cfg.s_hyper, cfg.k, cfg.antithetic, batch=(self.n,)) if aug is not None else None
        mode = self.fit_mode if aug is not None else "invariant"
        return laplace_pass(self.model, self.x, self.y, aug, self.prior, eps, curvature, mode)[1]


def evaluate(model: MlpModel, aug: AugmentationParams | None, x, y, S_test, rng, chunk=500):
    """Accuracy (argmax, ties to the lowest class) and mean nll of softmax(fhat)."""
    correct = 0
    total_nll = 0.0
    for start in range(0, len(y), chunk):
        xb, yb = x[start:start + chunk], y[start:start + chunk]
        if aug is None or not np.any(aug.eta):
            logits, _ = forward(model, flatten_inputs(xb))
        else:
            eps = sample_eps(rng, S_test, aug.k, False, batch=(len(yb),))
            xa, _ = augment_batch(aug, xb, eps)
            logits = compensated_mean(forward(model, xa)[0], axis=1)
        correct += int(np.sum(np.argmax(logits, axis=-1) == yb))
        total_nll += float(np.sum(nll(logits, yb)))
    return correct / len(y), total_nll / len(y)


def run(cfg: TrainConfig, train, test, hidden_sizes=(50,), activation="tanh", on_epoch=None) -> RunResult:
    """Train one model with ``cfg`` on ``train`` and evaluate it on ``test``."""
    t0 = time.perf_counter()
    sizes = [train.input_dim, *hidden_sizes, train.n_classes]
    model = MlpModel.init(sizes, activation, seed=cfg.seed)
    tr = Trainer(model, cfg, train.inputs, train.labels)
    rows = []
    for epoch in range(cfg.epochs):
        train_nll = tr.map_epoch(epoch)
        report = tr.hyper_step(epoch)
        row = {
            "epoch": epoch,
            **{f"eta_{i + 1}": float(abs(e)) for i, e in enumerate(tr.aug.eta)},
            "loglik": report.loglik,
            "logprior": report.logprior,
            "logdet_term": report.logdet_term,
            "marglik_total": report.total,
            "train_nll": train_nll,
            "lr_theta": cosine_lr(epoch, cfg.epochs, cfg.lr_theta, cfg.lr_theta_floor),
        }
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d: %s", epoch, row)
    final = tr.final_report()
    eval_aug = tr.aug if tr.uses_averaged_model else None
    acc, tnll = evaluate(tr.model, eval_aug, test.inputs, test.labels, cfg.S_test, _stream(cfg.seed, cfg.epochs, _EVAL))
    eta_traj = np.array([[r[f"eta_{i + 1}"] for i in range(cfg.k)] for r in rows])
    return RunResult(
        eta_trajectory=eta_traj,
        marglik_trajectory=np.array([r["marglik_total"] for r in rows]),
        rows=rows,
        test_accuracy=acc,
        test_nll=tnll,
        final_report=final,
        final_eta=tr.aug.eta.copy(),
        final_log_prec=tr.prior.log_prec.copy(),
        model=tr.model,
        wallclock=time.perf_counter() - t0,
        config=cfg,
    )
