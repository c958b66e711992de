"""Differentiable AP surrogate built on soft histogram binning of distances.

Distances between unit embeddings lie in ``[0, 2]``.  That interval is cut into
``b - 1`` bins of width ``delta = 2 / (b - 1)`` and every distance spreads its mass
over the two nearest bin centres with a triangular kernel.  Precision is then
evaluated per bin instead of per rank position, which avoids sorting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_DIST_FLOOR = 1e-9


@dataclass(frozen=True)
class SoftApConfig:
    bins: int = 25
    denom_epsilon: float = 1e-8

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least 2 bins")
        if self.denom_epsilon <= 0:
            raise ValueError("denom_epsilon must be positive")

    @property
    def delta(self) -> float:
        return 2.0 / (self.bins - 1)

    @property
    def centers(self) -> np.ndarray:
        return np.arange(self.bins) * self.delta


def soft_indicator(d, k, cfg: SoftApConfig):
    """Triangular kernel weight of distance ``d`` in bin ``k`` (1-based)."""
    if np.any(np.asarray(k) < 1) or np.any(np.asarray(k) > cfg.bins):
        raise ValueError(f"bin index must be in 1..{cfg.bins}")
    center = (np.asarray(k) - 1) * cfg.delta
    return np.maximum(1.0 - np.abs(np.asarray(d, dtype=np.float64) - center) / cfg.delta, 0.0)


def bin_weights(d, cfg: SoftApConfig) -> np.ndarray:
    """``(l, b)`` matrix of kernel weights for every distance and bin."""
    d = np.asarray(d, dtype=np.float64)
    return np.maximum(1.0 - np.abs(d[:, None] - cfg.centers[None, :]) / cfg.delta, 0.0)


def _bin_slopes(d, cfg: SoftApConfig) -> np.ndarray:
    # derivative of each kernel w.r.t. d; zero at kinks and outside the support
    offset = np.asarray(d, dtype=np.float64)[:, None] - cfg.centers[None, :]
    inside = np.abs(offset) < cfg.delta
    return np.where(inside, -np.sign(offset) / cfg.delta, 0.0)


def soft_precision(weights, labels, cfg: SoftApConfig) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    pos = np.cumsum(labels @ weights)
    tot = np.cumsum(weights.sum(axis=0))
    return pos / (tot + cfg.denom_epsilon)


def soft_ap_from_distances(d, labels, cfg: SoftApConfig, with_grad=False):
    """Soft AP of one ranking list and, optionally, its gradient w.r.t. ``d``."""
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n_pos = y.sum()
    if n_pos == 0:
        raise ValueError("ranking list has no positives")
    A = bin_weights(d, cfg)
    h_pos = y @ A
    h_tot = A.sum(axis=0)
    H_pos = np.cumsum(h_pos)
    denom = np.cumsum(h_tot) + cfg.denom_epsilon
    prec = H_pos / denom
    loss = float(prec @ h_pos / n_pos)
    if not with_grad:
        return loss
    # reverse cumulative sums give the effect of a bin's mass on all later precisions
    tail_pos = np.cumsum((h_pos / denom)[::-1])[::-1]
    tail_tot = np.cumsum((h_pos * H_pos / denom**2)[::-1])[::-1]
    g_hpos = (prec + tail_pos) / n_pos
    g_htot = -tail_tot / n_pos
    g_A = y[:, None] * g_hpos[None, :] + g_htot[None, :]
    g_d = np.sum(g_A * _bin_slopes(d, cfg), axis=1)
    return loss, g_d


def ap_loss_embedding(query_emb, gallery_emb, labels, cfg: SoftApConfig, with_grad=False):
    """Soft AP of one embedded query; gradient is w.r.t. the query embedding."""
    e = np.asarray(query_emb, dtype=np.float64)
    G = np.asarray(gallery_emb, dtype=np.float64)
    diff = e[None, :] - G
    d = np.sqrt(np.sum(diff * diff, axis=1))
    if not with_grad:
        return soft_ap_from_distances(d, labels, cfg)
    loss, g_d = soft_ap_from_distances(d, labels, cfg, with_grad=True)
    safe = d >= _DIST_FLOOR
    scale = np.where(safe, g_d / np.where(safe, d, 1.0), 0.0)
    return loss, scale @ diff


def ap_loss(query_image_perturbed, model, gallery_embeddings, labels, cfg: SoftApConfig | None = None) -> float:
    cfg = cfg or SoftApConfig()
    e = model.forward(query_image_perturbed)
    return ap_loss_embedding(e, gallery_embeddings, labels, cfg)


def ap_loss_grad(query_image_perturbed, model, gallery_embeddings, labels, cfg: SoftApConfig | None = None):
    """Gradient of :func:`ap_loss` with respect to the perturbed query image."""
    cfg = cfg or SoftApConfig()
    x = np.asarray(query_image_perturbed)
    e = model.forward(x)
    _, g_e = ap_loss_embedding(e, gallery_embeddings, labels, cfg, with_grad=True)
    return model.backward_input(x, g_e.astype(e.dtype))
