"""Scalar objectives and the reparameterised Gaussian sample."""

import numpy as np
from scipy.special import expit

from ..errors import ShapeError
from .rng import RngState
from .tensor import Tensor


def _check(a: Tensor, b, label: str) -> None:
    shape = b.shape if hasattr(b, "shape") else np.shape(b)
    if a.shape != tuple(shape):
        raise ShapeError(f"{label}: shape mismatch {a.shape} vs {tuple(shape)}")


def bce_loss(logits: Tensor, target) -> Tensor:
    """
    Mean binary cross-entropy on logits.

    Uses ``max(z, 0) - z*y + log(1 + exp(-|z|))`` which cannot overflow.

    Args:
        logits: Raw network outputs.
        target: Array or Tensor of the same shape with values in {0, 1}.
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    _check(logits, y, "bce_loss")
    z = logits.data
    y = y.astype(z.dtype, copy=False)
    n = z.size
    elementwise = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value = np.asarray(elementwise.mean(dtype=np.float64), dtype=z.dtype)

    def backward(g: np.ndarray):
        return ((expit(z) - y) * (g / n),)

    return Tensor.from_op(value, (logits,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; gradient ``2 (pred - target) / N``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    _check(pred, t, "mse_loss")
    diff = pred.data - t.astype(pred.dtype, copy=False)
    n = diff.size
    value = np.asarray((diff * diff).mean(dtype=np.float64), dtype=pred.dtype)
    return Tensor.from_op(value, (pred,), lambda g: (diff * (2.0 * g / n),))


def kl_diag_gauss(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """
    KL(q || p) between diagonal Gaussians.

    Summed over all non-batch dimensions and averaged over the batch:
    ``0.5 * sum(logvar_p - logvar_q + (exp(logvar_q) + (mu_q - mu_p)^2) / exp(logvar_p) - 1)``.
    """
    for other, label in ((logvar_q, "logvar_q"), (mu_p, "mu_p"), (logvar_p, "logvar_p")):
        if other.shape != mu_q.shape:
            raise ShapeError(f"kl_diag_gauss: {label} shape {other.shape} != mu_q shape {mu_q.shape}")
    batch = mu_q.shape[0] if mu_q.ndim else 1
    var_q = np.exp(logvar_q.data)
    inv_var_p = np.exp(-logvar_p.data)
    delta = mu_q.data - mu_p.data
    terms = 0.5 * (logvar_p.data - logvar_q.data + (var_q + delta * delta) * inv_var_p - 1.0)
    value = np.asarray(terms.sum(dtype=np.float64) / batch, dtype=mu_q.dtype)

    def backward(g: np.ndarray):
        scale = g / batch
        grad_mu_q = delta * inv_var_p * scale
        grad_logvar_q = 0.5 * (var_q * inv_var_p - 1.0) * scale
        grad_mu_p = -grad_mu_q
        grad_logvar_p = 0.5 * (1.0 - (var_q + delta * delta) * inv_var_p) * scale
        return grad_mu_q, grad_logvar_q, grad_mu_p, grad_logvar_p

    return Tensor.from_op(value, (mu_q, logvar_q, mu_p, logvar_p), backward)


def reparam_sample(mu: Tensor, logvar: Tensor, rng: RngState) -> Tensor:
    """``mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, 1)``; differentiable in both."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"reparam_sample: mu {mu.shape} vs logvar {logvar.shape}")
    eps = rng.normal(mu.shape).astype(mu.dtype)
    sigma = np.exp(0.5 * logvar.data)
    noise = sigma * eps

    def backward(g: np.ndarray):
        return g, g * noise * 0.5

    return Tensor.from_op(mu.data + noise, (mu, logvar), backward)
