"""Frame selection over LSTM outputs and the prediction head.

All functions accept a leading batch axis: ``H`` and ``C`` are ``(..., T, hidden)``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import linear, uniform_init, zeros_param


def init_temporal(hidden: int, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    return {
        "temporal.W_d_h": uniform_init(rng, (hidden, hidden), hidden, 1.0, dtype),
        "temporal.W_d_c": uniform_init(rng, (hidden, hidden), hidden, 1.0, dtype),
        "temporal.b_d_hc": zeros_param((hidden,), dtype),
    }


def init_head(hidden: int, num_classes: int, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    return {
        "head.W_p_h": uniform_init(rng, (hidden, hidden), hidden, 1.0, dtype),
        "head.W_p_c": uniform_init(rng, (hidden, hidden), hidden, 1.0, dtype),
        "head.b_p_hc": zeros_param((hidden,), dtype),
        "head.W_p": uniform_init(rng, (num_classes, hidden), hidden, 1.0, dtype),
        "head.b_p": zeros_param((num_classes,), dtype),
    }


def state_summary(h: Tensor, c: Tensor, params) -> Tensor:
    """``d = W_d_h h + W_d_c tanh(c) + b_d_hc``."""
    return linear(h, params["temporal.W_d_h"]) + linear(ad.tanh(c), params["temporal.W_d_c"]) + params["temporal.b_d_hc"]


def temporal_weights(d: Tensor, h: Tensor) -> Tensor:
    """Row-softmax of ``D @ H^T``; row ``t`` holds beta_{t, u}."""
    if d.shape != h.shape:
        raise ShapeError(f"temporal_weights: summaries {d.shape} and hidden states {h.shape} differ")
    return ad.softmax(ad.matmul(d, ad.swapaxes(h, -1, -2)), axis=-1)


def mix_hidden(beta: Tensor, h: Tensor) -> Tensor:
    if beta.shape[-1] != h.shape[-2]:
        raise ShapeError(f"mix_hidden: beta {beta.shape} does not match hidden states {h.shape}")
    out = ad.matmul(beta, h)
    # rounding can put a saturated row one ulp outside [min_t h, max_t h]; snap it back
    # with a constant offset so the gradient is that of the plain product
    lo, hi = h.data.min(axis=-2, keepdims=True), h.data.max(axis=-2, keepdims=True)
    fix = np.clip(out.data, lo, hi) - out.data
    return out + Tensor(fix, dtype=out.data.dtype) if fix.any() else out


def predict(h_mixed: Tensor, c: Tensor, params) -> Tensor:
    """Class logits ``W_p tanh(W_p_h h' + W_p_c c + b_p_hc) + b_p``."""
    inner = linear(h_mixed, params["head.W_p_h"]) + linear(c, params["head.W_p_c"]) + params["head.b_p_hc"]
    return linear(ad.tanh(inner), params["head.W_p"], params["head.b_p"])


def predicted_class(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)
