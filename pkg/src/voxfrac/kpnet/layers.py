"""Forward and backward passes for the network's building blocks.

Each ``*_forward`` returns its output together with a cache consumed by the
matching ``*_backward``.  Arrays are float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAKY_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_FAR = 1e6


# --- rigid kernel point convolution -----------------------------------------

def kernel_influence(query_points, support_points, neighbors, kernel_points, sigma):
    """Correlation h[q, n, k] = max(0, 1 - |x_n - x_q - k_k| / sigma).

    Sentinel neighbors (index == len(support_points)) get zero influence.
    """
    pad = np.concatenate([support_points, np.full((1, 3), _FAR)])
    rel = pad[neighbors] - query_points[:, None, :]
    diff = rel[:, :, None, :] - kernel_points[None, None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return np.maximum(0.0, 1.0 - dist / sigma)


def kpconv_forward(query_points, support_points, neighbors, features, kernel_points, sigma, weights):
    """out[q] = sum_k sum_n h[q,n,k] * features[n] @ weights[k].

    ``weights`` has shape (K, C_in, C_out).
    """
    q = np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(support_points, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 3:
        raise ValueError(f"weights must be (K, C_in, C_out), got shape {weights.shape}")
    K, c_in, c_out = weights.shape
    if f.ndim != 2 or f.shape != (len(s), c_in):
        raise ValueError(f"features must be ({len(s)}, {c_in}), got {f.shape}")
    if np.shape(kernel_points) != (K, 3):
        raise ValueError(f"{np.shape(kernel_points)[0]} kernel points for {K} weight matrices")
    neighbors = np.asarray(neighbors, dtype=np.int64).reshape(len(q), -1)
    h = kernel_influence(q, s, neighbors, kernel_points, sigma)
    fpad = np.concatenate([f, np.zeros((1, c_in))])
    nb = fpad[neighbors]
    weighted = np.einsum("qnk,qnc->qkc", h, nb).reshape(len(q), K * c_in)
    out = weighted @ weights.reshape(K * c_in, c_out)
    return out, (h, neighbors, weighted, weights, len(s))


def kpconv_backward(grad_out, cache):
    """Returns (grad_features, grad_weights)."""
    if cache is None:
        raise ValueError("kpconv_backward needs the cache from kpconv_forward")
    h, neighbors, weighted, weights, n_support = cache
    K, c_in, c_out = weights.shape
    grad_w = (weighted.T @ grad_out).reshape(K, c_in, c_out)
    grad_weighted = (grad_out @ weights.reshape(K * c_in, c_out).T).reshape(-1, K, c_in)
    grad_nb = np.einsum("qnk,qkc->qnc", h, grad_weighted)
    grad_f = np.zeros((n_support + 1, c_in))
    np.add.at(grad_f, neighbors.ravel(), grad_nb.reshape(-1, c_in))
    return grad_f[:n_support], grad_w


# --- batch normalization -------------------------------------------------------

@dataclass
class NormState:
    """Affine parameters and running statistics of a batch normalization."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray = None
    running_var: np.ndarray = None

    def __post_init__(self):
        c = len(self.gamma)
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)

    @classmethod
    def identity(cls, channels: int) -> "NormState":
        return cls(np.ones(channels), np.zeros(channels))


def batchnorm_forward(x, state: NormState, training: bool, momentum: float = BN_MOMENTUM):
    if training and len(x) > 1:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        n = len(x)
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var = (1 - momentum) * state.running_var + momentum * var * n / (n - 1)
        batch_stats = True
    else:
        mean, var = state.running_mean, state.running_var
        batch_stats = False
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return state.gamma * xhat + state.beta, (xhat, inv_std, state.gamma, batch_stats)


def batchnorm_backward(grad_out, cache):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma, batch_stats = cache
    grad_gamma = np.sum(grad_out * xhat, axis=0)
    grad_beta = grad_out.sum(axis=0)
    g = grad_out * gamma
    if batch_stats:
        n = len(xhat)
        grad_x = inv_std / n * (n * g - g.sum(axis=0) - xhat * np.sum(g * xhat, axis=0))
    else:
        grad_x = g * inv_std
    return grad_x, grad_gamma, grad_beta


# --- activations ----------------------------------------------------------------

def leaky_forward(x, slope: float = LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x), x > 0


def leaky_backward(grad_out, positive, slope: float = LEAKY_SLOPE):
    return np.where(positive, grad_out, slope * grad_out)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_out, probs):
    return probs * (grad_out - np.sum(grad_out * probs, axis=-1, keepdims=True))


# --- composite blocks -------------------------------------------------------------

def norm_act_forward(x, state: NormState, training: bool):
    y, bn_cache = batchnorm_forward(x, state, training)
    out, pos = leaky_forward(y)
    return out, (bn_cache, pos)


def norm_act_backward(grad_out, cache):
    bn_cache, pos = cache
    return batchnorm_backward(leaky_backward(grad_out, pos), bn_cache)


def unary_forward(features, weights, state: NormState, training: bool = True):
    """Shared per-point linear map, then batch normalization, then leaky ReLU.

    In evaluation mode with identity weights, zero running mean, unit running
    variance and unit/zero affine, positive inputs pass through (up to the
    normalization epsilon).
    """
    x = np.asarray(features, dtype=np.float64)
    z = x @ weights
    out, na_cache = norm_act_forward(z, state, training)
    return out, (x, weights, na_cache)


def unary_backward(grad_out, cache):
    """Returns (grad_features, grad_weights, grad_gamma, grad_beta)."""
    x, weights, na_cache = cache
    grad_z, grad_gamma, grad_beta = norm_act_backward(grad_out, na_cache)
    return grad_z @ weights.T, x.T @ grad_z, grad_gamma, grad_beta


def unary_block(features, weights, norm_state: NormState, training: bool = False):
    return unary_forward(features, weights, norm_state, training)[0]
