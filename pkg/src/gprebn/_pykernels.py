"""Pure numpy BN kernels (fallback backend).

Contracts shared with the compiled ``_ckernels`` module:

``batch_mean_var(x)``
    per-column mean and population variance (two-pass, divide by B).
``normalize_affine(x, mu, var, gamma, beta, eps)``
    ``(out, xhat)`` with ``xhat = (x - mu) / sqrt(var + eps)`` and
    ``out = xhat * gamma + beta``.
``bn_input_grad(g, xhat, scale, preserve)``
    ``(grad_x, sum_g, sum_g_xhat)``. With ``preserve`` the gradient flows
    through the batch mean and variance,
    ``scale * (g - mean(g) - xhat * mean(g * xhat))``; otherwise it is the
    per-instance ``g * scale``.

All inputs are float64 and C-contiguous; ``kernels`` enforces that.
"""
import numpy as np


def batch_mean_var(x):
    n = x.shape[0]
    mu = x.sum(axis=0) / n
    diff = x - mu
    var = (diff * diff).sum(axis=0) / n
    return mu, var


def normalize_affine(x, mu, var, gamma, beta, eps):
    std = np.sqrt(var + eps)
    xhat = (x - mu) / std
    return xhat * gamma + beta, xhat


def bn_input_grad(g, xhat, scale, preserve):
    n = g.shape[0]
    sg = g.sum(axis=0)
    sgx = (g * xhat).sum(axis=0)
    if preserve:
        gx = scale * (g - sg / n - xhat * (sgx / n))
    else:
        gx = g * scale
    return gx, sg, sgx
