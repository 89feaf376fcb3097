"""Fully-connected networks with the derivative passes the Laplace machinery needs.

Layer ``l`` stores a bias-augmented weight matrix ``W~ = [W | b]`` of shape
``(out, in + 1)`` acting on the homogeneous input ``a~ = [a; 1]``. The flat
parameter vector concatenates ``W~`` of every layer in column-major order, so
the per-sample Jacobian block of layer ``l`` is ``kron(a~_{l-1}, g_l[:, c])``
and its GGN block is ``(a~ a~^T) kron (g Lambda g^T)``.

``g_l`` is the transposed Jacobian of the logits with respect to the
pre-activation ``s_l`` of layer ``l``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentationParams, augment_batch, sample_eps
from .linalg import ShapeError

ACTIVATIONS = ("tanh", "relu", "identity")


def _act(name, s):
    if name == "tanh":
        return np.tanh(s)
    if name == "relu":
        return np.maximum(s, 0.0)
    return s


def _act_d1(name, s):
    if name == "tanh":
        t = np.tanh(s)
        return 1.0 - t * t
    if name == "relu":
        return (s > 0).astype(np.float64)
    return np.ones_like(s)


def _act_d2(name, s):
    if name == "tanh":
        t = np.tanh(s)
        return -2.0 * t * (1.0 - t * t)
    return np.zeros_like(s)


@dataclass
class MlpModel:
    weights: list  # W~ per layer, (out, in + 1)
    activations: list
    seed: int | None = None

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        if len(self.weights) != len(self.activations):
            raise ShapeError("one activation per layer required")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.activations[-1] != "identity":
            raise ValueError("the last layer must output logits (identity activation)")
        for prev, nxt in zip(self.weights[:-1], self.weights[1:]):
            if nxt.shape[1] != prev.shape[0] + 1:
                raise ShapeError("consecutive layer dimensions do not chain")

    @classmethod
    def init(cls, sizes, activation="tanh", seed=0):
        """Glorot-style initialisation with zero biases; ``sizes = [D, h1, ..., C]``."""
        rng = np.random.default_rng(seed)
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_out, fan_in))
            weights.append(np.hstack([w, np.zeros((fan_out, 1))]))
        acts = [activation] * (len(sizes) - 2) + ["identity"]
        return cls(weights, acts, seed=seed)

    @property
    def sizes(self):
        return [self.weights[0].shape[1] - 1] + [w.shape[0] for w in self.weights]

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def layer_sizes(self):
        return [w.size for w in self.weights]

    @property
    def n_params(self):
        return sum(self.layer_sizes)

    @property
    def n_outputs(self):
        return self.weights[-1].shape[0]

    def flat_params(self):
        return np.concatenate([w.ravel(order="F") for w in self.weights])

    def with_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {theta.shape}")
        out, offset = [], 0
        for w in self.weights:
            out.append(theta[offset:offset + w.size].reshape(w.shape, order="F"))
            offset += w.size
        return MlpModel(out, list(self.activations), seed=self.seed)

    def layer_slices(self):
        offs = np.cumsum([0] + self.layer_sizes)
        return [slice(a, b) for a, b in zip(offs[:-1], offs[1:])]


@dataclass
class ForwardTrace:
    inputs: list  # homogeneous layer inputs a~_{l-1}, (..., in + 1)
    preacts: list  # s_l, (..., out)
    logits: np.ndarray


def hidden_slopes(model: MlpModel, trace: ForwardTrace, l, second=False):
    """phi'(s_l) (and phi''(s_l)) of hidden layer ``l``, reusing the stored outputs for tanh."""
    act = model.activations[l]
    if act != "tanh":
        d1 = _act_d1(act, trace.preacts[l])
        return (d1, _act_d2(act, trace.preacts[l])) if second else d1
    t = trace.inputs[l + 1][..., :-1]
    d1 = 1.0 - t * t
    return (d1, -2.0 * t * d1) if second else d1


def _homogeneous(a):
    return np.concatenate([a, np.ones(a.shape[:-1] + (1,))], axis=-1)


def forward(model: MlpModel, x):
    """Logits and forward trace for inputs ``x`` of shape (..., D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.sizes[0]:
        raise ShapeError(f"input dimension {x.shape[-1]} != {model.sizes[0]}")
    inputs, preacts = [], []
    a = x
    for w, act in zip(model.weights, model.activations):
        at = _homogeneous(a)
        s = at @ w.T
        inputs.append(at)
        preacts.append(s)
        a = _act(act, s)
    return a, ForwardTrace(inputs, preacts, a)


def _pull_back(w, g):
    """``sum_j w[j, i] g[..., j, c]`` as one 2-D matmul."""
    gs = np.ascontiguousarray(np.swapaxes(g, -1, -2))
    r = gs.reshape(-1, gs.shape[-1]) @ w
    return np.swapaxes(r.reshape(gs.shape[:-1] + (w.shape[1],)), -1, -2)


def back_grads(model: MlpModel, trace: ForwardTrace):
    """Per-layer ``g_l = d logits / d s_l`` transposed, shape (..., out_l, C)."""
    C = model.n_outputs
    batch = trace.logits.shape[:-1]
    g = np.broadcast_to(np.eye(C), batch + (C, C))
    out = [None] * model.n_layers
    out[-1] = g
    for l in range(model.n_layers - 2, -1, -1):
        w_next = model.weights[l + 1][:, :-1]  # (out_{l+1}, out_l)
        d1 = hidden_slopes(model, trace, l)
        g = d1[..., :, None] * _pull_back(w_next, g)
        out[l] = g
    return out


def jacobian_from_factors(inputs, grads):
    """Assemble (..., C, P) parameter Jacobians from per-layer a~ and g."""
    blocks = []
    for at, g in zip(inputs, grads):
        blk = np.einsum("...k,...jc->...ckj", at, g)
        blocks.append(blk.reshape(blk.shape[:-2] + (-1,)))
    return np.concatenate(blocks, axis=-1)


def jacobian_params(model: MlpModel, x):
    """Jacobian of the logits in the flat parameters, shape (..., C, P)."""
    _, trace = forward(model, x)
    return jacobian_from_factors(trace.inputs, back_grads(model, trace))


def forward_tangent(model: MlpModel, trace: ForwardTrace, dx):
    """Forward-mode pass along input directions ``dx``.

    ``dx`` has shape ``batch + (k, D)`` where ``batch`` matches the trace.
    Returns homogeneous input tangents, pre-activation tangents and logit
    tangents, each with the extra ``k`` axis before the feature axis.
    """
    dx = np.asarray(dx, dtype=np.float64)
    d_inputs, d_preacts = [], []
    da = dx
    for l, (w, act) in enumerate(zip(model.weights, model.activations)):
        dat = np.concatenate([da, np.zeros(da.shape[:-1] + (1,))], axis=-1)
        ds = da @ w[:, :-1].T
        d_inputs.append(dat)
        d_preacts.append(ds)
        # the output layer is linear
        da = hidden_slopes(model, trace, l)[..., None, :] * ds if l < model.n_layers - 1 else ds
    return d_inputs, d_preacts, da


def input_jvp(model: MlpModel, trace: ForwardTrace, dx):
    """Directional derivative of the logits along input direction ``dx`` (same shape as x)."""
    dx = np.asarray(dx, dtype=np.float64)
    _, _, dl = forward_tangent(model, trace, dx[..., None, :])
    return dl[..., 0, :]


def back_grads_tangent(model: MlpModel, trace: ForwardTrace, grads, d_preacts):
    """Forward-over-reverse: tangents of every ``g_l`` given pre-activation tangents.

    ``d_preacts[l]`` has shape ``batch + (k, out_l)``; returns ``dg_l`` of shape
    ``batch + (k, out_l, C)``.
    """
    L = model.n_layers
    C = model.n_outputs
    k = d_preacts[0].shape[-2]
    batch = trace.logits.shape[:-1]
    dg = np.zeros(batch + (k, C, C))
    out = [None] * L
    out[-1] = dg
    for l in range(L - 2, -1, -1):
        w_next = model.weights[l + 1][:, :-1]
        d1, d2 = hidden_slopes(model, trace, l, second=True)
        wg = _pull_back(w_next, grads[l + 1])  # batch + (out_l, C)
        wdg = _pull_back(w_next, dg)
        dg = (d2[..., None, :] * d_preacts[l])[..., :, :, None] * wg[..., None, :, :] + d1[..., None, :, None] * wdg
        out[l] = dg
    return out


# --- augmentation-averaged predictor ------------------------------------------

def compensated_mean(x, axis):
    """Mean along ``axis`` with a second pass that corrects the rounding error of the first.

    An even-length axis is first folded by adding its two halves, so
    antithetic samples (second half the mirror of the first) whose
    contributions are odd in the noise cancel exactly rather than to rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    if n % 2 == 0:
        half = n // 2
        x = np.take(x, np.arange(half), axis=axis) + np.take(x, np.arange(half, n), axis=axis)
        scale = 0.5
    else:
        scale = 1.0
    m = np.mean(x, axis=axis, keepdims=True)
    m = m + np.mean(x - m, axis=axis, keepdims=True)
    return scale * np.squeeze(m, axis=axis)


def flatten_inputs(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def averaged_forward(model: MlpModel, x, aug: AugmentationParams | None, S: int, rng=None, eps=None, antithetic=False):
    """Invariant predictor ``fhat(x) = mean_s f(g(x, eps_s; eta))``.

    Returns ``(fhat, trace, eps)``; the trace covers all (B, S) augmented
    inputs. Without ``aug`` the plain network is evaluated with S = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if aug is None:
        logits, trace = forward(model, flatten_inputs(x)[:, None, :])
        return logits[:, 0, :], trace, None
    if eps is None:
        eps = sample_eps(rng, S, aug.k, antithetic, batch=(x.shape[0],))
    xa, _ = augment_batch(aug, x, eps)
    logits, trace = forward(model, xa)
    return compensated_mean(logits, axis=1), trace, eps


def averaged_forward_tangent(model: MlpModel, x, aug: AugmentationParams, S: int, rng=None, eps=None, antithetic=False):
    """``fhat`` together with ``d fhat / d eta`` of shape (B, C, k)."""
    x = np.asarray(x, dtype=np.float64)
    if eps is None:
        eps = sample_eps(rng, S, aug.k, antithetic, batch=(x.shape[0],))
    xa, dxa = augment_batch(aug, x, eps, with_tangent=True)
    logits, trace = forward(model, xa)
    _, _, dl = forward_tangent(model, trace, dxa)  # (B, S, k, C)
    fhat = compensated_mean(logits, axis=1)
    dfhat = compensated_mean(dl, axis=1)
    return fhat, np.swapaxes(dfhat, -1, -2)


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(model: MlpModel, path, extra=None):
    """Write ``<path>.json`` (header) and ``<path>.bin`` (little-endian float64 parameters)."""
    from ._io import atomic_write_bytes, atomic_write_text

    path = Path(path)
    header = {
        "layer_sizes": model.sizes,
        "activations": list(model.activations),
        "seed": model.seed,
        "n_params": model.n_params,
        "param_order": "per layer [W | b], column-major",
        "dtype": "<f8",
    }
    if extra:
        header.update(extra)
    atomic_write_bytes(path.with_suffix(".bin"), model.flat_params().astype("<f8").tobytes())
    atomic_write_text(path.with_suffix(".json"), json.dumps(header, indent=2))


def load_checkpoint(path) -> MlpModel:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    theta = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    sizes = header["layer_sizes"]
    skeleton = MlpModel(
        [np.zeros((o, i + 1)) for i, o in zip(sizes[:-1], sizes[1:])], header["activations"], seed=header.get("seed")
    )
    return skeleton.with_params(theta)
