"""Pixel-wise cross-entropy with online hard example mining (OHEM)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE_INDEX = 255


@dataclass
class OHEMConfig:
    theta: float = 0.7            # pixels with true-class probability below this are hard
    min_kept: int | None = None   # None -> 1/16 of the valid pixels
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if self.min_kept is not None and self.min_kept < 0:
            raise ValueError("min_kept must be non-negative")


@dataclass
class PixelLossMap:
    loss: np.ndarray      # (N, H, W), -log p; zero where invalid
    prob: np.ndarray      # (N, H, W), softmax probability of the true class
    valid: np.ndarray     # (N, H, W) bool
    softmax: np.ndarray   # (N, K, H, W)


def per_pixel_ce(logits: np.ndarray, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> PixelLossMap:
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"label values {np.unique(labels[bad]).tolist()} out of range for {k} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_sm = shifted - lse
    safe = np.where(valid, labels, 0).astype(np.intp)
    logp = np.take_along_axis(log_sm, safe[:, None], axis=1)[:, 0]
    loss = np.where(valid, -logp, 0).astype(logits.dtype)
    prob = np.where(valid, np.exp(logp), 1).astype(logits.dtype)
    return PixelLossMap(loss, prob, valid, np.exp(log_sm))


def resolve_min_kept(cfg: OHEMConfig, num_valid: int) -> int:
    return num_valid // 16 if cfg.min_kept is None else cfg.min_kept


def ohem_select(m: PixelLossMap, cfg: OHEMConfig) -> np.ndarray:
    """Boolean mask of the hard pixel set.

    Valid pixels whose true-class probability is below ``theta``; if fewer
    than ``min_kept`` qualify, the ``min_kept`` highest-loss valid pixels
    instead (ties go to the smaller flat index).
    """
    valid = m.valid.reshape(-1)
    hard = valid & (m.prob.reshape(-1) < cfg.theta)
    num_valid = int(valid.sum())
    keep = min(resolve_min_kept(cfg, num_valid), num_valid)
    if hard.sum() < keep:
        idx = np.flatnonzero(valid)
        order = np.argsort(-m.loss.reshape(-1)[idx], kind="stable")
        hard = np.zeros_like(valid)
        hard[idx[order[:keep]]] = True
    return hard.reshape(m.valid.shape)


def ohem_loss(logits: np.ndarray, labels: np.ndarray, cfg: OHEMConfig | None = None,
              selected: np.ndarray | None = None):
    """Mean cross-entropy over the hard set. Returns (loss, dlogits, selected).

    Pass ``selected`` to reuse a fixed hard set (selection is not differentiated).
    """
    cfg = cfg or OHEMConfig()
    m = per_pixel_ce(logits, labels, cfg.ignore_index)
    if selected is None:
        selected = ohem_select(m, cfg)
    count = int(selected.sum())
    dlogits = np.zeros_like(logits)
    if count == 0:
        return 0.0, dlogits, selected
    loss = float(m.loss[selected].astype(np.float64).sum() / count)
    onehot = np.zeros_like(logits)
    safe = np.where(m.valid, labels, 0).astype(np.intp)
    np.put_along_axis(onehot, safe[:, None], 1, axis=1)
    dlogits = (m.softmax - onehot) * (selected[:, None] / count).astype(logits.dtype)
    return loss, dlogits.astype(logits.dtype, copy=False), selected
