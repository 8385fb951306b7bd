"""Feature-bundle ingestion and PCA channel reduction.

A bundle file carries a whole collection: per image a raw feature map
(d, H, W) float32, a binary foreground mask (H, W), and optionally keypoints
in feature-map pixel units.  PCA is fit once per collection on the pooled
foreground pixels and reduces d channels to K before alignment.

Bundle file layout (little-endian):
  magic "SJAM" | version u32 = 1 | N u32 | d u32 | H u32 | W u32 | flags u32
  (flags bit 0: keypoints present); then per image: features d*H*W float32
  C-order channel-major, mask H*W uint8, and if flagged: kp_count u32 then
  kp_count * (x float32, y float32, visible uint8).
A JSON sidecar with the same basename (".json") may carry image names and
original resolutions; it is optional on load.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SJAM"
VERSION = 1
FLAG_KEYPOINTS = 1

__all__ = [
    "FeatureBundle",
    "PcaModel",
    "BundleFormatError",
    "RankDeficiencyError",
    "load_bundle",
    "save_bundle",
    "sidecar_path",
    "fit_pca",
    "reduce_and_mask",
    "save_pca",
    "load_pca",
]


class BundleFormatError(ValueError):
    pass


class RankDeficiencyError(ValueError):
    pass


@dataclass(eq=False)
class FeatureBundle:
    """One image's worth of precomputed features.

    features: (d, H, W) float32; mask: (H, W) uint8 in {0, 1};
    keypoints: (M, 2) float32 pixel (x, y) or None; visible: (M,) uint8.
    """

    features: np.ndarray
    mask: np.ndarray
    keypoints: np.ndarray | None = None
    visible: np.ndarray | None = None
    name: str | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if self.features.ndim != 3:
            raise BundleFormatError(f"features must be (d, H, W), got {self.features.shape}")
        if self.mask.shape != self.features.shape[1:]:
            raise BundleFormatError(
                f"mask shape {self.mask.shape} does not match feature map {self.features.shape[1:]}"
            )
        if self.keypoints is not None:
            self.keypoints = np.ascontiguousarray(self.keypoints, dtype=np.float32).reshape(-1, 2)
            if self.visible is None:
                self.visible = np.ones(len(self.keypoints), dtype=np.uint8)
            self.visible = np.ascontiguousarray(self.visible, dtype=np.uint8)
            if self.visible.shape != (len(self.keypoints),):
                raise BundleFormatError("visible flags must match keypoint count")

    def validate(self) -> None:
        if not np.all(np.isfinite(self.features)):
            raise BundleFormatError("non-finite feature values")
        bad = ~np.isin(self.mask, (0, 1))
        if np.any(bad):
            raise BundleFormatError(f"non-binary mask (found value {self.mask[bad].flat[0]})")
        if self.keypoints is not None and len(self.keypoints):
            h, w = self.mask.shape
            x, y = self.keypoints[:, 0], self.keypoints[:, 1]
            vis = self.visible.astype(bool)
            if np.any((x[vis] < 0) | (x[vis] >= w) | (y[vis] < 0) | (y[vis] >= h)):
                raise BundleFormatError("visible keypoint outside the feature map")


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_bundle(path, bundles: list[FeatureBundle], sidecar: dict | None = None) -> None:
    if len(bundles) < 2:
        raise BundleFormatError("a bundle must hold at least 2 images")
    d, h, w = bundles[0].features.shape
    has_kp = any(b.keypoints is not None for b in bundles)
    parts = [MAGIC, struct.pack("<IIIIII", VERSION, len(bundles), d, h, w, FLAG_KEYPOINTS if has_kp else 0)]
    for b in bundles:
        if b.features.shape != (d, h, w):
            raise BundleFormatError(
                f"shape mismatch across images: {b.features.shape} vs {(d, h, w)}"
            )
        b.validate()
        parts.append(np.ascontiguousarray(b.features, dtype="<f4").tobytes())
        parts.append(b.mask.tobytes())
        if has_kp:
            kps = b.keypoints if b.keypoints is not None else np.zeros((0, 2), np.float32)
            vis = b.visible if b.visible is not None else np.zeros(0, np.uint8)
            parts.append(struct.pack("<I", len(kps)))
            for (x, y), v in zip(kps, vis):
                parts.append(struct.pack("<ffB", float(x), float(y), int(v)))
    Path(path).write_bytes(b"".join(parts))
    if sidecar is not None:
        sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def load_bundle(path) -> list[FeatureBundle]:
    """Read and validate a collection; raises BundleFormatError with a
    diagnostic naming the first offending section or image."""
    buf = Path(path).read_bytes()
    if len(buf) < 28:
        raise BundleFormatError("truncated file: missing header")
    if buf[:4] != MAGIC:
        raise BundleFormatError(f"bad magic: {path} is not a feature bundle")
    version, n, d, h, w, flags = struct.unpack("<IIIIII", buf[4:28])
    if version != VERSION:
        raise BundleFormatError(f"unsupported bundle version {version}")
    if n < 2:
        raise BundleFormatError(f"a collection needs at least 2 images, file declares {n}")
    has_kp = bool(flags & FLAG_KEYPOINTS)

    names = [None] * n
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        if isinstance(meta.get("images"), list) and len(meta["images"]) == n:
            names = meta["images"]

    pos = 28
    feat_bytes = d * h * w * 4
    out = []
    for i in range(n):
        if pos + feat_bytes + h * w > len(buf):
            raise BundleFormatError(f"truncated file: missing features or mask of image {i}")
        feats = np.frombuffer(buf, dtype="<f4", count=d * h * w, offset=pos).reshape(d, h, w)
        pos += feat_bytes
        mask = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)
        pos += h * w
        kps = vis = None
        if has_kp:
            if pos + 4 > len(buf):
                raise BundleFormatError(f"truncated file: missing keypoint count of image {i}")
            (m,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + 9 * m > len(buf):
                raise BundleFormatError(f"truncated file: missing keypoints of image {i}")
            kps = np.zeros((m, 2), np.float32)
            vis = np.zeros(m, np.uint8)
            for j in range(m):
                x, y, v = struct.unpack_from("<ffB", buf, pos)
                pos += 9
                kps[j] = (x, y)
                vis[j] = v
        b = FeatureBundle(feats.copy(), mask.copy(), kps, vis, name=names[i])
        b.validate()
        out.append(b)
    if pos != len(buf):
        raise BundleFormatError("trailing bytes after last image")
    return out


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Per-pixel linear reduction: project centered d-vectors onto K rows."""

    mean: np.ndarray  # (d,)
    components: np.ndarray  # (K, d), orthonormal rows
    explained_variance: np.ndarray = field(default=None)  # (K,) optional
    total_variance: float = None  # trace of the fitted covariance, optional

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        comps = np.asarray(self.components, dtype=np.float64)
        if comps.ndim != 2 or mean.shape != (comps.shape[1],):
            raise ValueError(f"inconsistent PCA shapes: mean {mean.shape}, components {comps.shape}")
        k, d = comps.shape
        if k > d:
            raise ValueError(f"cannot keep {k} components of {d}-dim data")
        gram = comps @ comps.T
        if np.max(np.abs(gram - np.eye(k))) > 1e-5:
            raise ValueError("PCA components are not orthonormal")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        if self.explained_variance is not None:
            object.__setattr__(
                self, "explained_variance", np.asarray(self.explained_variance, dtype=np.float64)
            )
        if self.total_variance is not None:
            object.__setattr__(self, "total_variance", float(self.total_variance))

    @property
    def k(self) -> int:
        return self.components.shape[0]


def fit_pca(collection: list[FeatureBundle], k: int = 25) -> PcaModel:
    """Fit on the pooled foreground pixels of the whole collection.

    Uses an exact eigendecomposition of the d x d covariance so results are
    deterministic; component signs are fixed by making each row's largest
    entry positive.
    """
    cols = []
    for b in collection:
        fg = b.mask.astype(bool)
        cols.append(b.features[:, fg].T)  # (pixels, d)
    x = np.concatenate(cols, axis=0).astype(np.float64)
    if x.shape[0] < k:
        raise RankDeficiencyError(f"only {x.shape[0]} foreground pixels for {k} components")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / max(x.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    if k > len(evals) or evals[k - 1] <= max(evals[0], 0.0) * 1e-12:
        raise RankDeficiencyError(
            f"data rank below {k} (component {k} has no variance); use a smaller K"
        )
    comps = evecs[:, :k].T
    flip_sign = np.where(comps[np.arange(k), np.abs(comps).argmax(axis=1)] < 0, -1.0, 1.0)
    comps = comps * flip_sign[:, None]
    return PcaModel(mean, comps, evals[:k], float(np.trace(cov)))


def reduce_and_mask(bundle: FeatureBundle, pca: PcaModel) -> np.ndarray:
    """Project each pixel onto the components and zero the background:
    output (K, H, W) float32, exactly zero where the mask is zero."""
    d, h, w = bundle.features.shape
    if d != pca.components.shape[1]:
        raise ValueError(f"bundle has {d} channels, PCA expects {pca.components.shape[1]}")
    flat = bundle.features.reshape(d, h * w).astype(np.float64)
    proj = pca.components @ (flat - pca.mean[:, None])
    proj = proj.reshape(pca.k, h, w)
    proj *= bundle.mask[None].astype(np.float64)
    return proj.astype(np.float32)


def save_pca(path, pca: PcaModel) -> None:
    from . import tensorio

    tensors = {"mean": pca.mean, "components": pca.components}
    if pca.explained_variance is not None:
        tensors["explained_variance"] = pca.explained_variance
    if pca.total_variance is not None:
        tensors["total_variance"] = np.array([pca.total_variance])
    tensorio.save_tensors(path, tensors)


def load_pca(path) -> PcaModel:
    from . import tensorio

    t = tensorio.load_tensors(path)
    total = t.get("total_variance")
    return PcaModel(
        t["mean"],
        t["components"],
        t.get("explained_variance"),
        float(total[0]) if total is not None else None,
    )
