"""Writer/reader for the alignment pipeline's bundle file format.

This is an independent implementation of the documented byte layout, so the
two packages stay coupled only through files on disk:

  magic "SJAM" | version u32 = 1 | N u32 | d u32 | H u32 | W u32 | flags u32
  (flags bit 0: keypoints present); then per image: features d*H*W float32
  C-order channel-major, mask H*W uint8, and if flagged: kp_count u32 then
  kp_count * (x float32, y float32, visible uint8).  Little-endian.

A JSON sidecar with the same basename (".json") carries image names, original
sizes, and scale factors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SJAM"
VERSION = 1
FLAG_KEYPOINTS = 1

__all__ = ["BundleContractError", "BundleImage", "write_bundle", "read_bundle", "sidecar_path"]


class BundleContractError(ValueError):
    pass


@dataclass(eq=False)
class BundleImage:
    """One image's features (d, H, W) float32, binary mask (H, W) uint8, and
    optional keypoints (M, 2) float32 in feature-map pixels with visibility."""

    features: np.ndarray
    mask: np.ndarray
    keypoints: np.ndarray | None = None
    visible: np.ndarray | None = None
    name: str | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype="<f4")
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if self.features.ndim != 3:
            raise BundleContractError(f"features must be (d, H, W), got {self.features.shape}")
        if self.mask.shape != self.features.shape[1:]:
            raise BundleContractError(
                f"mask shape {self.mask.shape} does not match feature map {self.features.shape[1:]}"
            )
        if self.keypoints is not None:
            self.keypoints = np.ascontiguousarray(self.keypoints, dtype="<f4").reshape(-1, 2)
            if self.visible is None:
                self.visible = np.ones(len(self.keypoints), dtype=np.uint8)
            self.visible = np.ascontiguousarray(self.visible, dtype=np.uint8)
            if self.visible.shape != (len(self.keypoints),):
                raise BundleContractError("visible flags must match keypoint count")

    def check(self) -> None:
        if not np.all(np.isfinite(self.features)):
            raise BundleContractError(f"non-finite feature values in {self.name or 'image'}")
        if not np.all(np.isin(self.mask, (0, 1))):
            raise BundleContractError(f"non-binary mask in {self.name or 'image'}")
        if self.keypoints is not None and len(self.keypoints):
            h, w = self.mask.shape
            vis = self.visible.astype(bool)
            x, y = self.keypoints[vis, 0], self.keypoints[vis, 1]
            if np.any((x < 0) | (x >= w) | (y < 0) | (y >= h)):
                raise BundleContractError(
                    f"visible keypoint outside the {h}x{w} feature map in {self.name or 'image'}"
                )


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_bundle(path, images: list[BundleImage], sidecar: dict | None = None) -> Path:
    if len(images) < 2:
        raise BundleContractError("a bundle must hold at least 2 images")
    d, h, w = images[0].features.shape
    has_kp = any(im.keypoints is not None for im in images)
    parts = [MAGIC, struct.pack("<IIIIII", VERSION, len(images), d, h, w, FLAG_KEYPOINTS if has_kp else 0)]
    for im in images:
        if im.features.shape != (d, h, w):
            raise BundleContractError(
                f"shape mismatch across images: {im.features.shape} vs {(d, h, w)}"
            )
        im.check()
        parts.append(im.features.tobytes())
        parts.append(im.mask.tobytes())
        if has_kp:
            kps = im.keypoints if im.keypoints is not None else np.zeros((0, 2), "<f4")
            vis = im.visible if im.visible is not None else np.zeros(0, np.uint8)
            parts.append(struct.pack("<I", len(kps)))
            for (x, y), v in zip(kps, vis):
                parts.append(struct.pack("<ffB", float(x), float(y), int(v)))
    out = Path(path)
    out.write_bytes(b"".join(parts))
    if sidecar is not None:
        sidecar_path(out).write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return out


def read_bundle(path) -> list[BundleImage]:
    buf = Path(path).read_bytes()
    if len(buf) < 28 or buf[:4] != MAGIC:
        raise BundleContractError(f"{path} is not a feature bundle")
    version, n, d, h, w, flags = struct.unpack("<IIIIII", buf[4:28])
    if version != VERSION:
        raise BundleContractError(f"unsupported bundle version {version}")
    has_kp = bool(flags & FLAG_KEYPOINTS)

    names = [None] * n
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        if isinstance(meta.get("images"), list) and len(meta["images"]) == n:
            names = meta["images"]

    pos = 28
    out = []
    for i in range(n):
        if pos + d * h * w * 4 + h * w > len(buf):
            raise BundleContractError(f"truncated file at image {i}")
        feats = np.frombuffer(buf, dtype="<f4", count=d * h * w, offset=pos).reshape(d, h, w)
        pos += d * h * w * 4
        mask = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)
        pos += h * w
        kps = vis = None
        if has_kp:
            (m,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            kps = np.zeros((m, 2), "<f4")
            vis = np.zeros(m, np.uint8)
            for j in range(m):
                x, y, v = struct.unpack_from("<ffB", buf, pos)
                pos += 9
                kps[j] = (x, y)
                vis[j] = v
        out.append(BundleImage(feats.copy(), mask.copy(), kps, vis, name=names[i]))
    if pos != len(buf):
        raise BundleContractError("trailing bytes after last image")
    return out
