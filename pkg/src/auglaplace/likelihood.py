"""Softmax-categorical likelihood: negative log-density, logit Hessian and its tangent."""
import numpy as np
from scipy.special import log_softmax, softmax


def _check_labels(y, C):
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= C):
        raise IndexError(f"class index out of range [0, {C})")
    return y.astype(np.int64)


def nll(f, y):
    """-log softmax(f)[y]; broadcasts over leading axes of ``f`` and ``y``."""
    f = np.asarray(f, dtype=np.float64)
    y = _check_labels(y, f.shape[-1])
    logp = log_softmax(f, axis=-1)
    return -np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]


def nll_grad(f, y):
    """Gradient of :func:`nll` in the logits: softmax(f) - onehot(y)."""
    f = np.asarray(f, dtype=np.float64)
    y = _check_labels(y, f.shape[-1])
    p = softmax(f, axis=-1)
    np.put_along_axis(p, y[..., None], np.take_along_axis(p, y[..., None], axis=-1) - 1.0, axis=-1)
    return p


def lambda_(f):
    """Hessian of the nll in the logits, diag(p) - p p^T (independent of the label)."""
    p = softmax(np.asarray(f, dtype=np.float64), axis=-1)
    return _diag(p) - p[..., :, None] * p[..., None, :]


def lambda_tangent(f, df):
    """Directional derivative of :func:`lambda_` at ``f`` along ``df``.

    ``df`` may carry one extra axis before the class axis (several directions).
    """
    f = np.asarray(f, dtype=np.float64)
    df = np.asarray(df, dtype=np.float64)
    p = softmax(f, axis=-1)
    lam = _diag(p) - p[..., :, None] * p[..., None, :]
    if df.ndim == f.ndim + 1:
        p = p[..., None, :]
        lam = lam[..., None, :, :]
    dp = np.einsum("...ij,...j->...i", lam, df)
    return _diag(dp) - dp[..., :, None] * p[..., None, :] - p[..., :, None] * dp[..., None, :]


def _diag(v):
    out = np.zeros(v.shape + (v.shape[-1],))
    idx = np.arange(v.shape[-1])
    out[..., idx, idx] = v
    return out
