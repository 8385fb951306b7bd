"""End-to-end extraction: images -> ViT feature maps + attention masks +
scaled keypoints -> one bundle file with a JSON sidecar."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import parse_annotations, scale_keypoints
from .bundleio import BundleContractError, BundleImage, write_bundle
from .saliency import attention_mask
from .vit import VitBackbone, preprocess_images

__all__ = ["ExtractionSpec", "extract", "main"]


@dataclass
class ExtractionSpec:
    out_path: Path
    model_path: Path | None = None
    preset: str = "vit-s8"
    resolution: int = 224
    seed: int = 0
    annotations_dir: Path | None = None
    annotation_format: str | None = None  # "spair" | "cub"
    category: str | None = None
    batch_size: int = 4
    config_overrides: dict | None = field(default=None)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if self.batch_size <= 0:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if (self.annotations_dir is None) != (self.annotation_format is None):
            raise ValueError("annotations_dir and annotation_format go together")


def extract(image_paths, spec: ExtractionSpec) -> Path:
    """Write the bundle for a collection of image files; returns its path.

    Keypoints are attached per image by file name when an annotation source
    is configured; images without annotations get none."""
    paths = [Path(p) for p in image_paths]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing input images: {', '.join(missing)}")
    if len(paths) < 2:
        raise BundleContractError("a collection needs at least 2 images")

    annotations = {}
    if spec.annotations_dir is not None:
        annotations = parse_annotations(spec.annotations_dir, spec.annotation_format, spec.category)

    backbone = VitBackbone(
        model_path=spec.model_path,
        preset=spec.preset,
        resolution=spec.resolution,
        seed=spec.seed,
        config_overrides=spec.config_overrides,
    )
    g = backbone.grid

    images: list[BundleImage] = []
    sizes: list[tuple[int, int]] = []
    for start in range(0, len(paths), spec.batch_size):
        chunk = paths[start : start + spec.batch_size]
        batch, orig_sizes = preprocess_images(chunk, spec.resolution)
        sizes.extend(orig_sizes)
        for path, orig, result in zip(chunk, orig_sizes, backbone(batch)):
            mask = attention_mask(result.cls_attention)
            kps = vis = None
            ann = annotations.get(path.name)
            if ann is not None:
                kps = scale_keypoints(ann, orig, (g, g))
                vis = ann.visible.astype(np.uint8)
            images.append(BundleImage(result.features, mask, kps, vis, name=path.name))

    shapes = {im.features.shape for im in images}
    if len(shapes) != 1:
        raise BundleContractError(f"inconsistent feature shapes across the collection: {shapes}")

    sidecar = {
        "images": [im.name for im in images],
        "original_sizes": [[w, h] for w, h in sizes],
        "scale_factors": [[g / w, g / h] for w, h in sizes],
        "grid": [g, g],
        "channels": backbone.channels,
        "resolution": spec.resolution,
        "patch_size": backbone.patch_size,
        "model_path": str(spec.model_path) if spec.model_path else None,
        "preset": spec.preset if spec.model_path is None else None,
        "seed": spec.seed,
        "extractor_version": __version__,
    }
    return write_bundle(spec.out_path, images, sidecar)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bundle-extract",
        description="Extract ViT feature-map bundles (features + saliency masks + keypoints) from images.",
    )
    p.add_argument("--images", nargs="+", required=True, help="image files, or one directory")
    p.add_argument("--out", required=True)
    p.add_argument("--model-path", dest="model_path", help="local ViT checkpoint directory")
    p.add_argument("--preset", default="vit-s8", help="architecture preset when no checkpoint is given")
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--annotations", dest="annotations_dir")
    p.add_argument("--format", dest="annotation_format", choices=["spair", "cub"])
    p.add_argument("--category", help="SPair category name")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=4)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        images = [Path(p) for p in args.images]
        if len(images) == 1 and images[0].is_dir():
            exts = {".jpg", ".jpeg", ".png", ".bmp"}
            images = sorted(p for p in images[0].iterdir() if p.suffix.lower() in exts)
        spec = ExtractionSpec(
            out_path=Path(args.out),
            model_path=Path(args.model_path) if args.model_path else None,
            preset=args.preset,
            resolution=args.resolution,
            seed=args.seed,
            annotations_dir=Path(args.annotations_dir) if args.annotations_dir else None,
            annotation_format=args.annotation_format,
            category=args.category,
            batch_size=args.batch_size,
        )
        out = extract(images, spec)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"bundle": str(out), "images": len(images)}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
