"""Symmetric InfoNCE over paired embedding batches, with analytic gradients."""
import math

import numpy as np

from .errors import DimensionMismatch

# Temperature clamp: the effective scale exp(t) never exceeds 100.
MAX_LOGIT_SCALE = math.log(100.0)


def _check(mat, part):
    mat = np.asarray(mat)
    part = np.asarray(part)
    if mat.ndim != 2 or mat.shape != part.shape or mat.shape[0] < 1:
        raise DimensionMismatch(f"embedding batches must share shape (B>=1, D), got {mat.shape} and {part.shape}")
    return mat, part


def _log_softmax(logits, axis):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _forward(mat, part, t):
    t_eff = min(float(t), MAX_LOGIT_SCALE)
    scale = np.asarray(math.exp(t_eff), dtype=mat.dtype)
    sims = mat @ part.T
    logits = scale * sims
    lp_rows = _log_softmax(logits, axis=1)
    lp_cols = _log_softmax(logits, axis=0)
    b = mat.shape[0]
    loss = -0.5 * (np.trace(lp_rows) + np.trace(lp_cols)) / b
    return loss, scale, sims, lp_rows, lp_cols


def info_nce(mat, part, t):
    """Mean of the material->part and part->material cross-entropies."""
    mat, part = _check(mat, part)
    loss = _forward(mat, part, t)[0]
    return float(max(loss, 0.0))


def info_nce_grads(mat, part, t):
    """Gradients ``(d_mat, d_part, d_t)`` of :func:`info_nce`."""
    return info_nce_and_grads(mat, part, t)[1:]


def info_nce_and_grads(mat, part, t):
    """Return ``(loss, d_mat, d_part, d_t)`` from a single forward pass.

    ``d_t`` is zero while ``t`` sits at or above the clamp, where the loss no
    longer depends on it.
    """
    mat, part = _check(mat, part)
    loss, scale, sims, lp_rows, lp_cols = _forward(mat, part, t)
    b = mat.shape[0]
    eye = np.eye(b, dtype=mat.dtype)
    d_logits = 0.5 * ((np.exp(lp_rows) - eye) + (np.exp(lp_cols) - eye)) / b
    d_mat = scale * (d_logits @ part)
    d_part = scale * (d_logits.T @ mat)
    d_t = float(scale * np.sum(d_logits * sims)) if float(t) < MAX_LOGIT_SCALE else 0.0
    return float(max(loss, 0.0)), d_mat, d_part, d_t
