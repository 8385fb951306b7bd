"""Differentiable planar warping of feature maps.

Conventions, fixed once and relied on everywhere:
  - Normalized coordinates: pixel centers span [-1, 1] in x and y with the
    extreme pixel centers exactly at +-1, so the identity grid reproduces the
    input bit-for-bit.
  - Warp direction: sampling a map f with transform t reads f at t.x for each
    output location x (output-to-input).  A point visible at pixel p of the
    warped result therefore came from t.p in the source.
  - Out-of-range reads are zero (zero padding).
  - Horizontal flips are exact column reversals when standalone; the matrix
    diag(-1, 1, 1) is used only when a flip must be fused into a transform
    chain so the chain still costs a single interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache, reduce

import numpy as np

from . import lie
from .autodiff import Tensor, _make
from .lie import GroupTransform

__all__ = [
    "SampleGrid",
    "FlipConfig",
    "DegenerateGridError",
    "make_grid",
    "sample",
    "warp",
    "warp_cascade",
    "transfer_point",
    "flip",
    "warp_op",
    "normalize_points",
    "denormalize_points",
]

MIN_PERSPECTIVE_Z = 1e-8


class DegenerateGridError(ValueError):
    """The perspective divide collapsed: some grid point has |z| < 1e-8."""


class FlipConfig(Enum):
    IDENTITY = "identity"
    HORIZONTAL = "horizontal"

    @property
    def matrix(self) -> np.ndarray:
        if self is FlipConfig.IDENTITY:
            return np.eye(3)
        return np.diag([-1.0, 1.0, 1.0])


@dataclass(frozen=True, eq=False)
class SampleGrid:
    """Normalized (x, y) sampling locations, one pair per output pixel."""

    coords: np.ndarray  # (H, W, 2) float64

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[-1] != 2:
            raise ValueError(f"grid must have shape (H, W, 2), got {coords.shape}")
        object.__setattr__(self, "coords", coords)


@lru_cache(maxsize=32)
def _base_points(h: int, w: int) -> np.ndarray:
    """Homogeneous pixel-center coordinates, shape (h*w, 3) float64."""
    if h < 2 or w < 2:
        raise ValueError("grids need at least 2 pixels per axis")
    xs = 2.0 * np.arange(w) / (w - 1) - 1.0
    ys = 2.0 * np.arange(h) / (h - 1) - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel(), np.ones(h * w)], axis=1)


def normalize_points(p: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pixel (x, y) to normalized coordinates; (..., 2) in, (..., 2) out."""
    p = np.asarray(p, dtype=np.float64)
    return np.stack([2.0 * p[..., 0] / (w - 1) - 1.0, 2.0 * p[..., 1] / (h - 1) - 1.0], axis=-1)


def denormalize_points(p: np.ndarray, h: int, w: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.stack([(p[..., 0] + 1.0) * 0.5 * (w - 1), (p[..., 1] + 1.0) * 0.5 * (h - 1)], axis=-1)


def _as_matrix(t) -> np.ndarray:
    if isinstance(t, GroupTransform):
        return t.t
    m = np.asarray(t, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"expected 3x3 transform(s), got shape {m.shape}")
    return m


def _make_grid_kernel(mats: np.ndarray, h: int, w: int):
    """Grids for a batch of transforms: (..., 3, 3) -> coords (..., h, w, 2) + cache."""
    base = _base_points(h, w)
    pts = np.einsum("...ij,pj->...pi", mats, base)
    z = pts[..., 2]
    if np.any(np.abs(z) < MIN_PERSPECTIVE_Z):
        raise DegenerateGridError(
            f"perspective divide hit |z| < {MIN_PERSPECTIVE_Z:g}; the transform maps "
            "part of the grid to infinity"
        )
    gx = pts[..., 0] / z
    gy = pts[..., 1] / z
    coords = np.stack([gx, gy], axis=-1).reshape(mats.shape[:-2] + (h, w, 2))
    cache = {"base": base, "z": z, "gx": gx, "gy": gy}
    return coords, cache


def _make_grid_vjp(cache: dict, g: np.ndarray) -> np.ndarray:
    """Pull grid gradients (..., h, w, 2) back to transform gradients (..., 3, 3)."""
    base, z = cache["base"], cache["z"]
    g = g.reshape(z.shape + (2,))
    w1 = g[..., 0] / z
    w2 = g[..., 1] / z
    w3 = -(g[..., 0] * cache["gx"] + g[..., 1] * cache["gy"]) / z
    rows = [np.einsum("...p,pk->...k", wr, base) for wr in (w1, w2, w3)]
    return np.stack(rows, axis=-2)


def make_grid(t, h: int, w: int) -> SampleGrid:
    """Sampling grid for one transform (values only; see warp_op for gradients)."""
    coords, _ = _make_grid_kernel(_as_matrix(t), h, w)
    return SampleGrid(coords)


def _sample_kernel(f: np.ndarray, coords: np.ndarray):
    """Bilinear lookup: f (B, C, H, W), coords (B, Ho, Wo, 2) -> (B, C, Ho, Wo) + cache.

    Interpolation weights are computed in float64 and cast to the feature
    dtype for the blend, keeping float32 pipelines in float32.
    """
    b, c, h, w = f.shape
    ho, wo = coords.shape[1:3]
    px = (coords[..., 0] + 1.0) * 0.5 * (w - 1)
    py = (coords[..., 1] + 1.0) * 0.5 * (h - 1)
    # snap to exact pixel centers so an identity grid is the identity map
    rx, ry = np.round(px), np.round(py)
    px = np.where(np.abs(px - rx) < 1e-9, rx, px)
    py = np.where(np.abs(py - ry) < 1e-9, ry, py)

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx = px - x0
    wy = py - y0

    flat = f.reshape(b, c, h * w)
    batch_idx = np.arange(b)[:, None]
    corners = {}
    values = {}
    for name, (yi, xi) in {
        "00": (y0, x0),
        "01": (y0, x0 + 1),
        "10": (y0 + 1, x0),
        "11": (y0 + 1, x0 + 1),
    }.items():
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        lin = np.where(valid, yi * w + xi, 0)
        vals = flat[batch_idx, :, lin.reshape(b, -1)]  # (B, Ho*Wo, C)
        vals = vals.transpose(0, 2, 1).reshape(b, c, ho, wo)
        vals = vals * valid[:, None].astype(f.dtype)
        corners[name] = (lin, valid)
        values[name] = vals

    w00 = (1.0 - wy) * (1.0 - wx)
    w01 = (1.0 - wy) * wx
    w10 = wy * (1.0 - wx)
    w11 = wy * wx
    weights = {"00": w00, "01": w01, "10": w10, "11": w11}
    out = np.zeros((b, c, ho, wo), dtype=f.dtype)
    for name in ("00", "01", "10", "11"):
        out += weights[name][:, None].astype(f.dtype) * values[name]

    cache = {
        "f_shape": f.shape,
        "dtype": f.dtype,
        "corners": corners,
        "weights": weights,
        "values": values,
        "wx": wx,
        "wy": wy,
        "hw_scale": ((w - 1) * 0.5, (h - 1) * 0.5),
    }
    return out, cache


def _sample_vjp(cache: dict, g: np.ndarray):
    """Gradients of bilinear sampling w.r.t. features and grid coordinates.

    The feature gradient is scattered with bincount over flat indices, which
    is a fixed-order reduction: results are identical run to run.
    """
    b, c, h, w = cache["f_shape"]
    ho, wo = g.shape[2:]
    weights, corners, values = cache["weights"], cache["corners"], cache["values"]

    df_flat = np.zeros(b * c * h * w, dtype=np.float64)
    chan_off = (np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    for name in ("00", "01", "10", "11"):
        lin, valid = corners[name]
        wgt = weights[name][:, None].astype(cache["dtype"])
        contrib = (g * wgt) * valid[:, None]
        idx = chan_off + lin[:, None]
        df_flat += np.bincount(idx.ravel(), weights=contrib.ravel().astype(np.float64), minlength=df_flat.size)
    df = df_flat.reshape(b, c, h, w).astype(cache["dtype"], copy=False)

    wx, wy = cache["wx"], cache["wy"]
    v00, v01, v10, v11 = (values[k].astype(np.float64) for k in ("00", "01", "10", "11"))
    g64 = g.astype(np.float64)
    dpx = (g64 * ((1.0 - wy)[:, None] * (v01 - v00) + wy[:, None] * (v11 - v10))).sum(axis=1)
    dpy = (g64 * ((1.0 - wx)[:, None] * (v10 - v00) + wx[:, None] * (v11 - v01))).sum(axis=1)
    sx, sy = cache["hw_scale"]
    dcoords = np.stack([dpx * sx, dpy * sy], axis=-1)
    return df, dcoords


def sample(f: np.ndarray, g: SampleGrid) -> np.ndarray:
    """Bilinear sampling of one map f (C, H, W) at grid g (values only)."""
    f = np.asarray(f)
    if f.ndim != 3:
        raise ValueError(f"feature map must be (C, H, W), got {f.shape}")
    out, _ = _sample_kernel(f[None], g.coords[None])
    return out[0]


def warp(f: np.ndarray, t, out_h: int | None = None, out_w: int | None = None) -> np.ndarray:
    """Sample f through the grid of transform t in one step."""
    f = np.asarray(f)
    h = out_h if out_h is not None else f.shape[-2]
    w = out_w if out_w is not None else f.shape[-1]
    return sample(f, make_grid(t, h, w))


def warp_cascade(f: np.ndarray, transforms) -> np.ndarray:
    """Warp by a sequence of transforms: compose all matrices first, then
    interpolate exactly once.  Bit-identical to warping by the precomposed
    product because it IS warping by the precomposed product."""
    transforms = list(transforms)
    if not transforms:
        raise ValueError("warp_cascade requires at least one transform")
    composed = reduce(lie.compose, transforms)
    return warp(f, composed)


def flip(f: np.ndarray, k: FlipConfig) -> np.ndarray:
    """Exact horizontal mirror (column reversal); identity config is a no-op."""
    f = np.asarray(f)
    if k is FlipConfig.IDENTITY:
        return f
    return np.ascontiguousarray(f[..., ::-1])


def transfer_point(p: np.ndarray, t_i, t_j, h: int, w: int) -> np.ndarray:
    """Map pixel coordinates from image i to image j given both images'
    atlas-to-image transforms: p_j = t_j . t_i^-1 . p_i in normalized space.

    Inverting t_i numerically is fine here; this is evaluation-time plumbing,
    not part of any training graph.
    """
    m = _as_matrix(t_j) @ np.linalg.inv(_as_matrix(t_i))
    pn = normalize_points(p, h, w)
    hom = np.concatenate([pn, np.ones(pn.shape[:-1] + (1,))], axis=-1)
    out = hom @ m.T
    z = out[..., 2]
    if np.any(np.abs(z) < MIN_PERSPECTIVE_Z):
        raise DegenerateGridError("point transfer hit a degenerate perspective divide")
    return denormalize_points(out[..., :2] / z[..., None], h, w)


def warp_op(features: Tensor, mats: Tensor, out_h: int | None = None, out_w: int | None = None) -> Tensor:
    """Differentiable batched warp: features (B, C, H, W) sampled through the
    grids of mats (B, 3, 3); gradients flow to both features and matrices."""
    b, _, h, w = features.data.shape
    ho = out_h if out_h is not None else h
    wo = out_w if out_w is not None else w
    coords, grid_cache = _make_grid_kernel(mats.data, ho, wo)
    out, samp_cache = _sample_kernel(features.data, coords)

    def backward(g):
        df, dcoords = _sample_vjp(samp_cache, g)
        if features.requires_grad:
            features._accumulate(df)
        if mats.requires_grad:
            mats._accumulate(_make_grid_vjp(grid_cache, dcoords))

    return _make(out, (features, mats), backward)
