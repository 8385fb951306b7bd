"""Foreground masks from attention maps: Otsu's threshold on the final
layer's CLS-token attention, computed per image."""

from __future__ import annotations

import numpy as np

__all__ = ["otsu_threshold", "attention_mask"]


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """The histogram split maximizing inter-class variance.  Returned as an
    inclusive lower bound for the foreground class (mask = values >= t); both
    classes are nonempty whenever the input is not constant."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot threshold an empty array")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return lo  # constant input: the caller decides what a one-class map means
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / v.size
    omega = np.cumsum(p)
    mu = np.cumsum(p * (edges[:-1] + edges[1:]) / 2.0)
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_total * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = -1.0
    # the maximum is a plateau when the histogram has an empty valley; use its
    # middle so the threshold sits between the modes rather than hugging one
    best = np.flatnonzero(sigma_b == sigma_b.max())
    return float(edges[int(round(best.mean())) + 1])


def attention_mask(attn: np.ndarray) -> np.ndarray:
    """Binary uint8 foreground mask of an (H, W) attention map.  A constant
    map has no background evidence and comes back all-foreground."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 2:
        raise ValueError(f"attention map must be (H, W), got {attn.shape}")
    if attn.min() == attn.max():
        return np.ones(attn.shape, dtype=np.uint8)
    t = otsu_threshold(attn)
    return (attn >= t).astype(np.uint8)
