"""ViT dense-feature backbone.

Patch tokens of the last hidden layer become the (d, H, W) feature map and
the final layer's CLS-token attention (head-averaged) drives the saliency
mask.  Weights come from a local checkpoint directory when given; otherwise
the architecture is instantiated with seeded random weights, which keeps the
whole pipeline runnable offline (shape, mask, and format behavior are
weight-independent).

torch/transformers are imported lazily so the parsers and bundle IO work
without them installed."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["BackboneError", "VitFeatures", "VitBackbone", "grid_size", "preprocess_images", "PRESETS"]

# channel stats used by the common self-supervised ViT recipes
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

PRESETS: dict[str, dict] = {
    # small ViT with 8x8 patches: 384 channels, 224 -> 28x28 tokens
    "vit-s8": dict(
        hidden_size=384,
        num_hidden_layers=12,
        num_attention_heads=6,
        intermediate_size=1536,
        patch_size=8,
    ),
    # pocket-size variant for tests and smoke runs
    "tiny": dict(
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        patch_size=8,
    ),
}


class BackboneError(RuntimeError):
    pass


def grid_size(resolution: int, patch_size: int) -> int:
    """Token grid side length for non-overlapping patches."""
    if resolution % patch_size != 0:
        raise BackboneError(f"resolution {resolution} is not a multiple of patch size {patch_size}")
    return resolution // patch_size


@dataclass(eq=False)
class VitFeatures:
    features: np.ndarray  # (d, H, W) float32
    cls_attention: np.ndarray  # (H, W) float32, head-averaged final layer


def preprocess_images(paths, resolution: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Load, resize to (resolution, resolution), and normalize.  Returns the
    (B, 3, R, R) float32 batch plus each image's original (width, height)."""
    batch, sizes = [], []
    for p in paths:
        with Image.open(p) as im:
            sizes.append(im.size)
            rgb = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
        arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
        batch.append(arr.transpose(2, 0, 1))
    return np.stack(batch), sizes


class VitBackbone:
    def __init__(
        self,
        model_path: str | Path | None = None,
        preset: str = "vit-s8",
        resolution: int = 224,
        seed: int = 0,
        config_overrides: dict | None = None,
    ):
        try:
            import torch
            from transformers import ViTConfig, ViTModel
        except ImportError as exc:  # pragma: no cover - environment-dependent
            raise BackboneError(
                "the ViT backbone needs torch and transformers (pip install 'bundle-extractor[vit]')"
            ) from exc

        self.resolution = resolution
        if model_path is not None:
            if not Path(model_path).exists():
                raise BackboneError(f"model path {model_path} does not exist")
            try:
                self.model = ViTModel.from_pretrained(str(model_path), attn_implementation="eager")
            except Exception as exc:
                raise BackboneError(f"could not load ViT weights from {model_path}: {exc}") from exc
            self.patch_size = self.model.config.patch_size
        else:
            if preset not in PRESETS:
                raise BackboneError(f"unknown preset {preset!r} (have {sorted(PRESETS)})")
            params = {**PRESETS[preset], **(config_overrides or {})}
            self.patch_size = params["patch_size"]
            config = ViTConfig(image_size=resolution, attn_implementation="eager", **params)
            torch.manual_seed(seed)
            self.model = ViTModel(config)
        self.model.eval()
        self.grid = grid_size(resolution, self.patch_size)
        self.channels = int(self.model.config.hidden_size)
        self._torch = torch

    def __call__(self, batch: np.ndarray) -> list[VitFeatures]:
        """(B, 3, R, R) float32 -> per-image dense features and CLS attention."""
        torch = self._torch
        if batch.ndim != 4 or batch.shape[1] != 3 or batch.shape[2:] != (self.resolution, self.resolution):
            raise BackboneError(
                f"batch must be (B, 3, {self.resolution}, {self.resolution}), got {batch.shape}"
            )
        with torch.no_grad():
            out = self.model(torch.from_numpy(np.ascontiguousarray(batch)), output_attentions=True)
        g = self.grid
        tokens = out.last_hidden_state[:, 1:, :].numpy()  # (B, g*g, d), CLS dropped
        attn = out.attentions[-1][:, :, 0, 1:].mean(dim=1).numpy()  # (B, g*g)
        results = []
        for i in range(batch.shape[0]):
            feats = tokens[i].reshape(g, g, -1).transpose(2, 0, 1).astype(np.float32)
            results.append(VitFeatures(feats, attn[i].reshape(g, g).astype(np.float32)))
        return results
