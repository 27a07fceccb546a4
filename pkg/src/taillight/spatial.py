"""Per-step soft selection over the grid cells of the split-layer features.

A 1x1 conv stack reduces the features to one scalar per cell; each cell's
scalar and the previous hidden state are scored additively in a small hidden
space, and a softmax over all cells gives the weights.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import linear, uniform_init, zeros_param

PREFIX = "spatial."


def init_spatial(channels: int, hidden: int, attn_hidden: int, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    k, d = attn_hidden, channels
    return {
        "spatial.phi1": uniform_init(rng, (d, d, 1, 1), d, 1.0, dtype),
        "spatial.phi2": uniform_init(rng, (1, d, 1, 1), d, 1.0, dtype),
        "spatial.W_a_z": uniform_init(rng, (k, 1), 1, 1.0, dtype),
        "spatial.W_a_h": uniform_init(rng, (k, hidden), hidden, 1.0, dtype),
        "spatial.b_a_zh": zeros_param((k,), dtype),
        "spatial.W_a": uniform_init(rng, (1, k), k, 1.0, dtype),
        "spatial.b_a": zeros_param((1,), dtype),
    }


def scalar_map(z: Tensor, params) -> Tensor:
    """``phi2(phi1(z))``: ``(N, d, G, G) -> (N, G, G)``."""
    phi1 = params["spatial.phi1"]
    if z.shape[-3] != phi1.shape[1]:
        raise ShapeError(f"spatial: features have {z.shape[-3]} channels, phi1 expects {phi1.shape[1]}")
    m = ad.conv2d(ad.conv2d(z, phi1), params["spatial.phi2"])
    return ad.reshape(m, m.shape[:-3] + m.shape[-2:])


def scores_from_map(m: Tensor, h_prev: Tensor, params) -> Tensor:
    """Additive scores for a batch of scalar maps ``(N, G, G)`` and ``h_prev`` ``(N, hidden)``."""
    n, gh, gw = m.shape
    if h_prev.shape != (n, params["spatial.W_a_h"].shape[1]):
        raise ShapeError(f"spatial: h_prev shape {h_prev.shape} does not fit batch {n} / W_a_h {params['spatial.W_a_h'].shape}")
    cells = ad.reshape(m, (n, gh * gw, 1))
    from_cells = linear(cells, params["spatial.W_a_z"])  # (n, G, k)
    from_h = ad.reshape(linear(h_prev, params["spatial.W_a_h"]), (n, 1, -1))
    hidden = ad.tanh(from_cells + from_h + params["spatial.b_a_zh"])
    a = linear(hidden, params["spatial.W_a"], params["spatial.b_a"])  # (n, G, 1)
    return ad.reshape(a, (n, gh, gw))


def spatial_scores(z: Tensor, h_prev: Tensor, params) -> Tensor:
    """Scores ``a_t`` for features ``(d, G, G)``/``(N, d, G, G)`` and ``h_prev``."""
    single = z.ndim == 3
    if single:
        z = ad.reshape(z, (1,) + z.shape)
        h_prev = ad.reshape(h_prev, (1,) + h_prev.shape)
    a = scores_from_map(scalar_map(z, params), h_prev, params)
    return ad.reshape(a, a.shape[1:]) if single else a


def spatial_weights(a: Tensor) -> Tensor:
    """Softmax over all grid cells of ``(..., G, G)`` scores."""
    lead, gh, gw = a.shape[:-2], a.shape[-2], a.shape[-1]
    alpha = ad.softmax(ad.reshape(a, lead + (gh * gw,)), axis=-1)
    return ad.reshape(alpha, lead + (gh, gw))


def apply_spatial(z: Tensor, alpha: Tensor) -> Tensor:
    if z.shape[-2:] != alpha.shape[-2:]:
        raise ShapeError(f"apply_spatial: feature grid {z.shape[-2:]} vs weight grid {alpha.shape[-2:]}")
    return z * ad.reshape(alpha, alpha.shape[:-2] + (1,) + alpha.shape[-2:])


def uniform_weights(batch: int, grid: int, dtype) -> Tensor:
    return Tensor(np.full((batch, grid, grid), 1.0 / (grid * grid)), dtype=dtype)
