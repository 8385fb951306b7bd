"""Alignment outputs, atlas construction, keypoint-transfer scoring, and a
synthetic ground-truth benchmark generator.

Transform direction used throughout: each image's stored matrix maps shared
(atlas) coordinates to that image's coordinates, because warping samples
output-to-input.  Keypoints therefore move between images i and j via
m_j . m_i^-1, and flips fuse into the chain as m = composed . flip_matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import lie, warp
from .features import FeatureBundle
from .lie import GroupFamily
from .warp import FlipConfig

__all__ = [
    "AlignmentEntry",
    "AlignmentResult",
    "KeypointAnnotation",
    "UndefinedPairError",
    "fused_matrix",
    "build_atlas",
    "pck_transfer",
    "evaluate_collection",
    "PckReport",
    "write_pck_report",
    "corner_transfer_error",
    "make_synthetic",
    "SyntheticCollection",
    "mask_bbox",
    "result_from_training",
]


class UndefinedPairError(ValueError):
    """A pair has no shared visible keypoints; its score is undefined."""


@dataclass(eq=False)
class AlignmentEntry:
    index: int
    transform: np.ndarray  # (3, 3) atlas-to-image
    flip: FlipConfig
    thetas: np.ndarray  # (R, 8) per-recurrence coefficients
    loss: float

    def fused(self) -> np.ndarray:
        return fused_matrix(self.transform, self.flip)


@dataclass(eq=False)
class AlignmentResult:
    family: GroupFamily
    entries: list
    checkpoint_hash: str = ""

    def matrices(self) -> np.ndarray:
        return np.stack([e.transform for e in self.entries])

    def fused_matrices(self) -> np.ndarray:
        return np.stack([e.fused() for e in self.entries])

    def to_json(self) -> str:
        payload = {
            "family": self.family.value,
            "checkpoint_hash": self.checkpoint_hash,
            "images": [
                {
                    "index": e.index,
                    "transform": [[float(x) for x in row] for row in e.transform],
                    "flip": e.flip.value,
                    "thetas": [[float(x) for x in step] for step in e.thetas],
                    "loss": float(e.loss),
                }
                for e in self.entries
            ],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "AlignmentResult":
        payload = json.loads(text)
        entries = [
            AlignmentEntry(
                index=img["index"],
                transform=np.array(img["transform"], dtype=np.float64),
                flip=FlipConfig(img["flip"]),
                thetas=np.array(img["thetas"], dtype=np.float64),
                loss=float(img["loss"]),
            )
            for img in payload["images"]
        ]
        return cls(GroupFamily(payload["family"]), entries, payload.get("checkpoint_hash", ""))


def result_from_training(train_result, config=None, checkpoint_hash: str = "") -> AlignmentResult:
    from .training import curriculum_family

    family = GroupFamily.SL3
    if config is not None:
        family = curriculum_family(max(config.joint_epochs - 1, 0), config)
    entries = [
        AlignmentEntry(
            index=i,
            transform=train_result.final_mats[i],
            flip=train_result.flip_configs[i],
            thetas=train_result.final_thetas[i],
            loss=float(train_result.per_image_loss[i]),
        )
        for i in range(len(train_result.final_mats))
    ]
    return AlignmentResult(family, entries, checkpoint_hash)


def fused_matrix(transform: np.ndarray, flip: FlipConfig) -> np.ndarray:
    """Single matrix applying the flip and then the stored transform in one
    interpolation; identical to warping and then reversing columns."""
    return np.asarray(transform, dtype=np.float64) @ flip.matrix


def build_atlas(maps: np.ndarray, result: AlignmentResult) -> np.ndarray:
    """Per-pixel mean of every map warped into the shared frame: (N, C, H, W)
    in, (C, H, W) out.  Out-of-support reads contribute zeros to the mean."""
    maps = np.asarray(maps)
    n = maps.shape[0]
    if n != len(result.entries):
        raise ValueError(f"{n} maps but {len(result.entries)} alignment entries")
    acc = np.zeros(maps.shape[1:], dtype=np.float64)
    for i, entry in enumerate(result.entries):
        acc += warp.warp(maps[i], entry.fused()).astype(np.float64)
    return (acc / n).astype(maps.dtype)


@dataclass(eq=False)
class KeypointAnnotation:
    """Keypoints in feature-map pixels plus the object's bbox size (h, w)."""

    xy: np.ndarray  # (M, 2) float
    visible: np.ndarray  # (M,) bool
    bbox_hw: tuple[float, float]

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if self.visible.shape[0] != self.xy.shape[0]:
            raise ValueError("visible flags must match keypoint count")
        if min(self.bbox_hw) <= 0:
            raise ValueError("bounding box must have positive size")


def mask_bbox(mask: np.ndarray) -> tuple[float, float]:
    """Tight (h, w) of the foreground; the default bbox when none is annotated."""
    ys, xs = np.nonzero(np.asarray(mask))
    if ys.size == 0:
        raise ValueError("empty mask has no bounding box")
    return (float(ys.max() - ys.min() + 1), float(xs.max() - xs.min() + 1))


def pck_transfer(
    src: KeypointAnnotation,
    dst: KeypointAnnotation,
    t_src: np.ndarray,
    t_dst: np.ndarray,
    h: int,
    w: int,
    alpha: float = 0.1,
) -> tuple[int, int, float]:
    """Transfer source keypoints through t_dst . t_src^-1 and count how many
    land within alpha * max(dst bbox) of their annotated positions.

    Returns (hits, total, score); raises UndefinedPairError when the pair
    shares no visible keypoints.
    """
    if len(src.xy) != len(dst.xy):
        raise ValueError("annotations must share keypoint identities")
    both = src.visible & dst.visible
    total = int(both.sum())
    if total == 0:
        raise UndefinedPairError("no shared visible keypoints")
    pred = warp.transfer_point(src.xy[both], t_src, t_dst, h, w)
    dist = np.linalg.norm(pred - dst.xy[both], axis=-1)
    threshold = alpha * max(dst.bbox_hw)
    hits = int((dist <= threshold).sum())
    return hits, total, hits / total


@dataclass(eq=False)
class PckReport:
    pair_scores: np.ndarray  # (N, N), nan where undefined or diagonal
    rows: list  # (src, dst, hits, total, score)
    mean: float
    alpha: float


def evaluate_collection(
    annotations: list,
    result: AlignmentResult,
    h: int,
    w: int,
    alpha: float = 0.1,
) -> PckReport:
    """Score every ordered annotated pair; undefined pairs are excluded from
    the mean, and an all-undefined collection is an error."""
    n = len(annotations)
    mats = result.fused_matrices()
    if n != len(result.entries):
        raise ValueError(f"{n} annotations but {len(result.entries)} alignment entries")
    scores = np.full((n, n), np.nan)
    rows = []
    for i in range(n):
        for j in range(n):
            if i == j or annotations[i] is None or annotations[j] is None:
                continue
            try:
                hits, total, score = pck_transfer(annotations[i], annotations[j], mats[i], mats[j], h, w, alpha)
            except UndefinedPairError:
                continue
            scores[i, j] = score
            rows.append((i, j, hits, total, score))
    if not rows:
        raise UndefinedPairError("no pair in the collection has shared visible keypoints")
    mean = float(np.nanmean(scores))
    return PckReport(scores, rows, mean, alpha)


def write_pck_report(csv_path, json_path, report: PckReport) -> None:
    lines = ["src,dst,hits,total,score"]
    for src, dst, hits, total, score in report.rows:
        lines.append(f"{src},{dst},{hits},{total},{score!r}")
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    summary = {"mean": report.mean, "alpha": report.alpha, "N": len(report.pair_scores)}
    with open(json_path, "w") as fh:
        fh.write(json.dumps(summary, sort_keys=True, separators=(",", ":")) + "\n")


def corner_transfer_error(pred_mats: np.ndarray, gt_mats: np.ndarray, h: int, w: int) -> float:
    """Mean pixel distance, over all ordered pairs and the four image corners,
    between predicted and ground-truth point transfer.  Invariant to any
    global transform shared by all predictions."""
    pred_mats = np.asarray(pred_mats, dtype=np.float64)
    gt_mats = np.asarray(gt_mats, dtype=np.float64)
    n = pred_mats.shape[0]
    corners = np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])
    errs = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            p_pred = warp.transfer_point(corners, pred_mats[i], pred_mats[j], h, w)
            p_true = warp.transfer_point(corners, gt_mats[i], gt_mats[j], h, w)
            errs.append(np.linalg.norm(p_pred - p_true, axis=-1).mean())
    return float(np.mean(errs))


@dataclass(eq=False)
class SyntheticCollection:
    bundles: list  # FeatureBundle per image
    gt_mats: np.ndarray  # (N, 3, 3) atlas-to-image ground truth (flip fused)
    thetas: np.ndarray  # (N, 8) generating coefficients
    mirrored: np.ndarray  # (N,) bool
    family: GroupFamily
    annotations: list  # KeypointAnnotation per image


def _smooth_base(rng: np.random.Generator, h: int, w: int, blobs: int = 6) -> np.ndarray:
    """Smooth 3-channel map: random anisotropic bumps plus one fixed
    off-center bump so mirrored copies are distinguishable."""
    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    base = np.zeros((3, h, w))
    for c in range(3):
        for _ in range(blobs):
            cx, cy = rng.uniform(-0.55, 0.55, size=2)
            sx, sy = rng.uniform(0.12, 0.35, size=2)
            amp = rng.uniform(0.6, 1.4) * rng.choice([-1.0, 1.0])
            base[c] += amp * np.exp(-(((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2))
    base[0] += 2.0 * np.exp(-(((xs + 0.45) / 0.10) ** 2 + ((ys + 0.30) / 0.10) ** 2))
    base -= base.mean(axis=(1, 2), keepdims=True)
    base /= base.std(axis=(1, 2), keepdims=True) + 1e-12
    return base


def make_synthetic(
    seed: int,
    n: int,
    family: GroupFamily,
    magnitude,
    h: int = 32,
    w: int = 32,
    d: int = 40,
    mirrored=None,
    noise: float = 0.01,
    kp_grid: int = 3,
) -> SyntheticCollection:
    """Generate a collection with known alignment.

    One smooth 3-channel pattern is lifted to d channels by a fixed random
    orthonormal map (plus a little full-rank noise so channel reduction has
    spectrum to work with) and warped by n random family elements.  The
    stored ground-truth matrix per image maps atlas coordinates to image
    coordinates, so transferring points with the ground truth reproduces the
    construction exactly.

    magnitude: scalar bound applied to all active coefficients, or an
    8-vector of per-coefficient bounds.  mirrored: optional boolean list
    marking images built from the horizontally flipped pattern.
    """
    if n < 2:
        raise ValueError("a collection needs at least 2 images")
    rng = np.random.Generator(np.random.PCG64(seed))
    base = _smooth_base(rng, h, w)
    lift, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lifted = np.einsum("dc,chw->dhw", lift[:, :3], base)
    lifted += noise * rng.standard_normal((d, h, w))

    bounds = np.asarray(magnitude, dtype=np.float64) * np.ones(8)
    mask = lie.curriculum_mask(family)
    if mirrored is None:
        mirrored = np.zeros(n, dtype=bool)
    mirrored = np.asarray(mirrored, dtype=bool)
    if mirrored.shape != (n,):
        raise ValueError("mirrored must have one flag per image")

    qs = np.linspace(-0.5, 0.5, kp_grid)
    kp_atlas = np.stack(np.meshgrid(qs, qs), axis=-1).reshape(-1, 2)
    kp_hom = np.concatenate([kp_atlas, np.ones((len(kp_atlas), 1))], axis=1)

    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1)  # (h, w, 3) normalized homogeneous

    flip_m = FlipConfig.HORIZONTAL.matrix
    bundles = []
    annotations = []
    gt_mats = np.zeros((n, 3, 3))
    thetas = np.zeros((n, 8))
    for i in range(n):
        theta = rng.uniform(-bounds, bounds) * mask
        thetas[i] = theta
        gen = lie.expm_matrix(lie.embed_matrix(theta, family))
        gen_inv = lie.expm_matrix(lie.embed_matrix(-theta, family))
        if mirrored[i]:
            gen = gen @ flip_m
            gen_inv = flip_m @ gen_inv
        gt_mats[i] = gen_inv

        feats = warp.warp(lifted, gen).astype(np.float32)
        atlas_coords = pix @ gen.T
        atlas_xy = atlas_coords[..., :2] / atlas_coords[..., 2:]
        ellipse = (atlas_xy[..., 0] / 0.82) ** 2 + (atlas_xy[..., 1] / 0.68) ** 2
        mask_img = (ellipse <= 1.0).astype(np.uint8)

        kp = kp_hom @ gen_inv.T
        kp_xy = warp.denormalize_points(kp[:, :2] / kp[:, 2:], h, w)
        vis = (
            (kp_xy[:, 0] >= 0)
            & (kp_xy[:, 0] <= w - 1)
            & (kp_xy[:, 1] >= 0)
            & (kp_xy[:, 1] <= h - 1)
        ).astype(np.uint8)
        bundles.append(
            FeatureBundle(feats, mask_img, kp_xy.astype(np.float32), vis, name=f"synthetic_{i:03d}")
        )
        annotations.append(KeypointAnnotation(kp_xy, vis.astype(bool), mask_bbox(mask_img)))
    return SyntheticCollection(bundles, gt_mats, thetas, mirrored, family, annotations)
