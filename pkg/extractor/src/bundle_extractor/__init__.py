"""Feature-bundle extraction: ViT feature maps, attention saliency masks, and
dataset keypoint annotations, written in the alignment pipeline's bundle file
format.  The file format is the only coupling to the alignment package."""

__version__ = "0.1.0"

from .annotations import (
    AnnotationFormatError,
    ImageAnnotation,
    parse_annotations,
    parse_cub,
    parse_spair,
    parse_spair_pair,
    scale_keypoints,
)
from .bundleio import BundleContractError, BundleImage, read_bundle, write_bundle
from .extract import ExtractionSpec, extract
from .saliency import attention_mask, otsu_threshold
from .vit import BackboneError, VitBackbone, grid_size, preprocess_images

__all__ = [
    "AnnotationFormatError",
    "ImageAnnotation",
    "parse_annotations",
    "parse_cub",
    "parse_spair",
    "parse_spair_pair",
    "scale_keypoints",
    "BundleContractError",
    "BundleImage",
    "read_bundle",
    "write_bundle",
    "ExtractionSpec",
    "extract",
    "attention_mask",
    "otsu_threshold",
    "BackboneError",
    "VitBackbone",
    "grid_size",
    "preprocess_images",
    "__version__",
]
