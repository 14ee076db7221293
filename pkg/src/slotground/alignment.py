"""Slot alignment loss: match slot-induced token affinity to an external affinity."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def slot_similarity(attn: Tensor, eps: float = 1e-12) -> Tensor:
    """Token-pair affinity 2 * Abar Abar^T - 1 from slot-axis attention (..., N, K)."""
    abar = ad.l2_normalize_axis(attn, -1, eps)
    return ad.scale(abar @ ad.transpose_last2(abar), 2.0) - 1.0


def feature_affinity(features, eps: float = 1e-12) -> Tensor:
    """Cosine gram matrix per frame of (..., N, d_f) features. Treated as a constant target."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if not np.isfinite(f).all():
        raise ad.NumericError("non-finite feature values")
    norm = np.sqrt((f * f).sum(-1, keepdims=True))
    fbar = f / np.maximum(norm, eps)
    return Tensor(fbar @ np.swapaxes(fbar, -1, -2))


def labels_affinity(labels) -> np.ndarray:
    """+1 where two tokens share a label, -1 otherwise; labels (..., N)."""
    labels = np.asarray(labels)
    same = labels[..., :, None] == labels[..., None, :]
    return np.where(same, 1.0, -1.0)


def sa_loss(m_slot: Tensor, m_target, mask_diagonal: bool = False, eps: float = 1e-12) -> Tensor:
    """1 - mean over frames of cos(flatten(m_slot), flatten(m_target)).

    A zero matrix contributes cos = 0 for its frame. The target gets no gradient.
    """
    target = m_target.data if isinstance(m_target, Tensor) else np.asarray(m_target, dtype=np.float64)
    if m_slot.shape != target.shape:
        raise ad.DimensionError(f"affinity shapes differ: {m_slot.shape} vs {target.shape}")
    n = m_slot.shape[-1]
    if mask_diagonal:
        keep = 1.0 - np.eye(n)
        m_slot = m_slot * keep
        target = target * keep
    flat = ad.reshape(m_slot, (-1, n * n))
    tflat = target.reshape(-1, n * n)
    tnorm = np.sqrt((tflat * tflat).sum(-1, keepdims=True))
    tunit = tflat / np.maximum(tnorm, eps)
    cos = ad.sum_axis(ad.l2_normalize_axis(flat, -1, eps) * tunit, -1)
    return 1.0 - ad.mean_axis(cos)


def total_loss(ce: Tensor, sa: Tensor | None, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if sa is None or lam == 0:
        return ce
    return ce + ad.scale(sa, lam)
