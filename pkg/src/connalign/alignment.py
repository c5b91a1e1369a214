"""Connectome-level and subject-level cross-modal alignment.

Connectome level: every brain subnetwork token attends over report tokens and
vice versa, cosine similarities between the two attention outputs form an
N×M matrix, and a weighted-similarity loss pulls each row/column towards 1.

Subject level: whole-subject brain and report features attend across the batch,
and an InfoNCE loss over the B×B cosine matrix treats the diagonal as the
matched pairs.

All functions accept an optional leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

REMAP_EPS = 1e-6
DEFAULT_TAU = 0.07


@dataclass
class AlignmentOutputs:
    brain2text_cl: Tensor
    text2brain_cl: Tensor
    s_cl: Tensor
    attn_b2t: np.ndarray
    attn_t2b: np.ndarray
    brain2text_sl: Tensor | None = None
    text2brain_sl: Tensor | None = None
    s_sl: Tensor | None = None


def _check_dims(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"{what}: feature dims differ, {a.shape} vs {b.shape}")


def connectome_cross_attention(x_local: Tensor, v_local: Tensor, text_mask=None):
    """Bidirectional attention between subnetwork tokens (N×D) and report tokens (M×D).

    ``text_mask`` is true on real tokens; padded tokens are excluded as keys.
    Returns ``(brain2text, text2brain, attn_b2t, attn_t2b)``.
    """
    _check_dims(x_local, v_local, "connectome cross-attention")
    scale = 1.0 / np.sqrt(x_local.shape[-1])
    valid = None
    if text_mask is not None:
        valid = np.asarray(text_mask, dtype=bool)[..., None, :]
    attn_b2t = ad.softmax(ad.matmul(x_local, v_local.T) * scale, axis=-1, valid=valid)
    attn_t2b = ad.softmax(ad.matmul(v_local, x_local.T) * scale, axis=-1)
    return ad.matmul(attn_b2t, v_local), ad.matmul(attn_t2b, x_local), attn_b2t, attn_t2b


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(ad.l2_normalize(a), ad.l2_normalize(b).T)


def connectome_similarity(brain2text: Tensor, text2brain: Tensor) -> Tensor:
    _check_dims(brain2text, text2brain, "connectome similarity")
    return cosine_matrix(brain2text, text2brain)


def connectome_alignment_loss(s_cl: Tensor, text_mask=None, eps: float = REMAP_EPS) -> Tensor:
    """½ (brain→text + text→brain) weighted-similarity loss, averaged over the batch.

    Each row (column) is scored by -log Σ softmax(s)·remap(s) with
    remap(s) = clip((1 + s) / 2, eps, 1); the softmax weights use the raw
    similarities. Padded tokens are dropped from both directions.
    """
    s_cl = ad.as_tensor(s_cl)
    n, m = s_cl.shape[-2:]
    if text_mask is None:
        text_mask = np.ones(s_cl.shape[:-2] + (m,), dtype=bool)
    text_mask = np.asarray(text_mask, dtype=bool)
    counts = text_mask.sum(axis=-1)
    if (counts == 0).any():
        raise ShapeError("connectome alignment loss needs at least one unmasked token per subject")
    remapped = ad.clamp(s_cl * 0.5 + 0.5, eps, 1.0)

    w_bt = ad.softmax(s_cl, axis=-1, valid=text_mask[..., None, :])
    loss_bt = -ad.log((w_bt * remapped).sum(axis=-1)).mean(axis=-1)

    s_t = ad.transpose(s_cl, _swap_last(s_cl.ndim))
    r_t = ad.transpose(remapped, _swap_last(s_cl.ndim))
    w_tb = ad.softmax(s_t, axis=-1)
    per_token = -ad.log((w_tb * r_t).sum(axis=-1))
    weights = text_mask / counts[..., None]
    loss_tb = (per_token * weights).sum(axis=-1)
    return ((loss_bt + loss_tb) * 0.5).mean()


def _swap_last(ndim: int) -> list[int]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def subject_cross_attention(x_global: Tensor, v_global: Tensor, mode: str = "batch"):
    """Batch-level cross-attention of B subject features in each direction.

    ``mode="batch"``: brain queries attend over every subject's report feature
    in the batch (and the reverse). ``mode="degenerate"``: each subject attends
    only to its own partner, so the outputs are the partner features.
    """
    _check_dims(x_global, v_global, "subject cross-attention")
    if x_global.shape != v_global.shape:
        raise ShapeError(f"subject cross-attention: batch shapes differ, {x_global.shape} vs {v_global.shape}")
    if mode == "degenerate":
        return v_global, x_global
    if mode != "batch":
        raise ConfigError(f"unknown subject attention mode {mode!r}")
    scale = 1.0 / np.sqrt(x_global.shape[-1])
    attn_b2t = ad.softmax(ad.matmul(x_global, v_global.T) * scale, axis=-1)
    attn_t2b = ad.softmax(ad.matmul(v_global, x_global.T) * scale, axis=-1)
    return ad.matmul(attn_b2t, v_global), ad.matmul(attn_t2b, x_global)


def subject_similarity(brain2text: Tensor, text2brain: Tensor) -> Tensor:
    _check_dims(brain2text, text2brain, "subject similarity")
    return cosine_matrix(brain2text, text2brain)


def infonce_loss(s_sl: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Symmetric InfoNCE over a square similarity matrix; diagonal entries are the positives."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    s_sl = ad.as_tensor(s_sl)
    if s_sl.ndim != 2 or s_sl.shape[0] != s_sl.shape[1]:
        raise ShapeError(f"InfoNCE needs a square matrix, got shape {s_sl.shape}")
    diag = (np.arange(s_sl.shape[0]),) * 2
    logits = s_sl * (1.0 / tau)
    loss_bt = -ad.log_softmax(logits, axis=1)[diag].mean()
    loss_tb = -ad.log_softmax(logits, axis=0)[diag].mean()
    return (loss_bt + loss_tb) * 0.5
