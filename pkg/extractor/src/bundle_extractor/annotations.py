"""Keypoint/bbox annotation parsing for the two common correspondence
dataset layouts:

- SPair-71k: per-image JSON files under ImageAnnotation/<category>/ with a
  "kps" dict (index -> [x, y] or null), plus pair JSONs listing the shared
  visible keypoints of a source/target pair.
- CUB-200-2011: images.txt (id path), parts/part_locs.txt
  (id part x y visible), bounding_boxes.txt (id x y w h).

Coordinates stay in original-image pixels here; scale_keypoints maps them to
feature-map pixels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "AnnotationFormatError",
    "ImageAnnotation",
    "parse_spair",
    "parse_spair_pair",
    "parse_cub",
    "parse_annotations",
    "scale_keypoints",
]


class AnnotationFormatError(ValueError):
    pass


@dataclass(eq=False)
class ImageAnnotation:
    """Keypoints (M, 2) in original-image pixel (x, y), visibility flags, and
    an optional (h, w) bbox size.  M may be zero."""

    name: str
    keypoints: np.ndarray
    visible: np.ndarray
    bbox_hw: tuple[float, float] | None = None
    image_size: tuple[int, int] | None = None  # (width, height) when the file records it
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if self.visible.shape[0] != self.keypoints.shape[0]:
            raise AnnotationFormatError(
                f"{self.name}: {self.visible.shape[0]} visibility flags for {self.keypoints.shape[0]} keypoints"
            )
        if self.bbox_hw is not None:
            bh, bw = self.bbox_hw
            if not (bh > 0 and bw > 0):
                raise AnnotationFormatError(f"{self.name}: non-positive bbox {self.bbox_hw}")


def _spair_image_annotation(payload: dict, name: str) -> ImageAnnotation:
    kps_dict = payload.get("kps")
    if not isinstance(kps_dict, dict):
        raise AnnotationFormatError(f"{name}: missing 'kps' dict")
    indices = sorted(kps_dict, key=int)
    xy, vis = [], []
    for idx in indices:
        entry = kps_dict[idx]
        if entry is None:
            xy.append((0.0, 0.0))
            vis.append(False)
        else:
            xy.append((float(entry[0]), float(entry[1])))
            vis.append(True)
    bbox = payload.get("bndbox")
    bbox_hw = None
    if bbox is not None:
        xmin, ymin, xmax, ymax = map(float, bbox)
        bbox_hw = (ymax - ymin, xmax - xmin)
    size = None
    if "image_width" in payload and "image_height" in payload:
        size = (int(payload["image_width"]), int(payload["image_height"]))
    return ImageAnnotation(name, np.array(xy).reshape(-1, 2), vis, bbox_hw, size)


def parse_spair(dataset_dir, category: str) -> dict[str, ImageAnnotation]:
    """All per-image annotations of one category, keyed by image file name."""
    ann_dir = Path(dataset_dir) / "ImageAnnotation" / category
    if not ann_dir.is_dir():
        raise AnnotationFormatError(f"no SPair image annotations at {ann_dir}")
    out = {}
    for path in sorted(ann_dir.glob("*.json")):
        payload = json.loads(path.read_text())
        name = payload.get("filename", path.stem + ".jpg")
        out[name] = _spair_image_annotation(payload, name)
    if not out:
        raise AnnotationFormatError(f"no annotation files in {ann_dir}")
    return out


def parse_spair_pair(pair_json) -> tuple[ImageAnnotation, ImageAnnotation]:
    """One SPair pair file: the shared keypoints of both images, all visible
    by construction (the file lists only correspondences present in both)."""
    payload = json.loads(Path(pair_json).read_text())
    try:
        src = np.asarray(payload["src_kps"], dtype=np.float64).reshape(-1, 2)
        trg = np.asarray(payload["trg_kps"], dtype=np.float64).reshape(-1, 2)
    except KeyError as exc:
        raise AnnotationFormatError(f"{pair_json}: missing {exc} field") from exc
    if src.shape != trg.shape:
        raise AnnotationFormatError(
            f"{pair_json}: {src.shape[0]} source vs {trg.shape[0]} target keypoints"
        )
    vis = np.ones(src.shape[0], dtype=bool)

    def bbox_of(key: str):
        if key not in payload:
            return None
        xmin, ymin, xmax, ymax = map(float, payload[key])
        return (ymax - ymin, xmax - xmin)

    return (
        ImageAnnotation(payload.get("src_imname", "src"), src, vis, bbox_of("src_bndbox")),
        ImageAnnotation(payload.get("trg_imname", "trg"), trg, vis.copy(), bbox_of("trg_bndbox")),
    )


def _read_id_table(path: Path, expected_cols: int) -> dict[int, list[str]]:
    rows: dict[int, list[str]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != expected_cols:
            raise AnnotationFormatError(f"{path}:{lineno}: expected {expected_cols} columns, got {len(parts)}")
        rows[int(parts[0])] = parts[1:]
    return rows


def parse_cub(dataset_dir) -> dict[str, ImageAnnotation]:
    """CUB-style annotations keyed by image file name (path basename)."""
    root = Path(dataset_dir)
    images = _read_id_table(root / "images.txt", 2)
    boxes = _read_id_table(root / "bounding_boxes.txt", 5)

    parts_path = root / "parts" / "part_locs.txt"
    kp_rows: dict[int, list[tuple[int, float, float, bool]]] = {}
    for lineno, line in enumerate(parts_path.read_text().splitlines(), 1):
        cols = line.split()
        if not cols:
            continue
        if len(cols) != 5:
            raise AnnotationFormatError(f"{parts_path}:{lineno}: expected 5 columns, got {len(cols)}")
        img_id, part_id = int(cols[0]), int(cols[1])
        kp_rows.setdefault(img_id, []).append((part_id, float(cols[2]), float(cols[3]), cols[4] == "1"))

    out = {}
    for img_id, (rel_path,) in images.items():
        rows = sorted(kp_rows.get(img_id, []))
        xy = np.array([(x, y) for _, x, y, _ in rows], dtype=np.float64).reshape(-1, 2)
        vis = np.array([v for _, _, _, v in rows], dtype=bool)
        bbox_hw = None
        if img_id in boxes:
            _, _, bw, bh = map(float, boxes[img_id])
            bbox_hw = (bh, bw)
        name = Path(rel_path).name
        out[name] = ImageAnnotation(name, xy, vis, bbox_hw)
    return out


def parse_annotations(dataset_dir, fmt: str, category: str | None = None) -> dict[str, ImageAnnotation]:
    fmt = fmt.lower()
    if fmt == "spair":
        if category is None:
            raise AnnotationFormatError("SPair parsing needs a category name")
        return parse_spair(dataset_dir, category)
    if fmt == "cub":
        return parse_cub(dataset_dir)
    raise AnnotationFormatError(f"unknown annotation format {fmt!r} (expected 'spair' or 'cub')")


def scale_keypoints(
    ann: ImageAnnotation, orig_size: tuple[int, int], feat_size: tuple[int, int]
) -> np.ndarray:
    """Original-image pixel coordinates to feature-map pixels: multiply by
    (W_feat / W_img, H_feat / H_img) per axis.  Visible points that annotate
    the inclusive image edge are nudged just inside the half-open feature
    bounds [0, W_feat) x [0, H_feat)."""
    ow, oh = orig_size
    fw, fh = feat_size
    if ow <= 0 or oh <= 0:
        raise AnnotationFormatError(f"{ann.name}: bad original size {orig_size}")
    scaled = ann.keypoints * np.array([fw / ow, fh / oh])
    scaled = np.clip(scaled, 0.0, np.array([fw, fh]) - 1e-3)
    return scaled.astype(np.float32)
