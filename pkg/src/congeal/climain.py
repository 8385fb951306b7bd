"""Subcommand implementations behind the console entry point.

Every failure surfaces as one JSON object on stderr ({"error": class,
"message": text}) and a nonzero exit code, so callers can script against it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, evaluation, features, nets, training, warp
from .lie import GroupFamily
from .training import TrainConfig

__all__ = ["run", "build_parser"]


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def render_rgb(stack: np.ndarray, scale: int = 8):
    """Feature maps (N, C, H, W) to a list of RGB images, normalizing the
    first 3 channels with one min-max range per channel over the whole stack
    so colors are comparable across the collection."""
    from PIL import Image

    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim == 3:
        stack = stack[None]
    rgb = stack[:, :3]
    if rgb.shape[1] < 3:
        rgb = np.repeat(rgb[:, :1], 3, axis=1)
    lo = rgb.min(axis=(0, 2, 3), keepdims=True)
    hi = rgb.max(axis=(0, 2, 3), keepdims=True)
    norm = (rgb - lo) / np.where(hi - lo > 0, hi - lo, 1.0)
    out = []
    for img in norm:
        arr = (img.transpose(1, 2, 0) * 255).round().astype(np.uint8)
        im = Image.fromarray(arr, "RGB")
        if scale > 1:
            im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
        out.append(im)
    return out


def _config_from_args(args) -> TrainConfig:
    cfg = training.load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {
        "epochs_ae": "ae_epochs",
        "epochs_joint": "joint_epochs",
        "recurrences": "recurrences",
        "lr": "learning_rate",
        "seed": "seed",
        "batch_size": "batch_size",
    }
    for arg_name, field in overrides.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(cfg, field, value)
    if getattr(args, "curriculum", None):
        cfg.curriculum = training._parse_curriculum(args.curriculum)
    if getattr(args, "flips", False):
        cfg.flips_enabled = True
    if getattr(args, "no_curriculum", False):
        cfg.use_curriculum = False
    if getattr(args, "freeze_ae", False):
        cfg.freeze_ae = True
    if getattr(args, "direct_matrix", False):
        cfg.direct_matrix = True
    cfg.validate()
    return cfg


def _load_reduced(bundle_path, pca_path):
    collection = features.load_bundle(bundle_path)
    pca = features.load_pca(pca_path)
    reduced = np.stack([features.reduce_and_mask(b, pca) for b in collection])
    return collection, pca, reduced


def cmd_synth(args) -> int:
    family = GroupFamily(args.family)
    magnitude = args.magnitude if len(args.magnitude) > 1 else args.magnitude[0]
    if len(args.magnitude) not in (1, 8):
        raise ValueError("--magnitude takes 1 or 8 values")
    mirrored = None
    if args.mirror_half:
        mirrored = [i >= (args.n + 1) // 2 for i in range(args.n)]
    synth = evaluation.make_synthetic(
        args.seed, args.n, family, magnitude, h=args.height, w=args.width, d=args.channels, mirrored=mirrored
    )
    sidecar = {
        "images": [b.name for b in synth.bundles],
        "family": family.value,
        "seed": args.seed,
        "gt_transforms": synth.gt_mats.tolist(),
        "thetas": synth.thetas.tolist(),
        "mirrored": synth.mirrored.astype(int).tolist(),
    }
    features.save_bundle(args.out, synth.bundles, sidecar)
    print(json.dumps({"bundle": str(args.out), "n": args.n, "family": family.value}))
    return 0


def cmd_preprocess(args) -> int:
    collection = features.load_bundle(args.bundle)
    pca = features.fit_pca(collection, args.k)
    features.save_pca(args.out, pca)
    print(
        json.dumps(
            {
                "pca": str(args.out),
                "k": pca.k,
                "input_channels": int(pca.components.shape[1]),
                "explained_variance_ratio": float(
                    pca.explained_variance.sum() / max(pca.total_variance, 1e-30)
                ),
            }
        )
    )
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.ae_epochs == 0:
        print("warning: ae_epochs=0, skipping reconstruction pretraining", file=sys.stderr)

    _, _, reduced = _load_reduced(args.bundle, args.pca)
    t0 = time.perf_counter()
    result = training.train(reduced, cfg)
    elapsed = time.perf_counter() - t0

    ckpt_path = out_dir / "checkpoint.sjwt"
    nets.save_checkpoint(ckpt_path, result.encoder, result.decoder, result.locnet)
    training.save_config(out_dir / "config.cfg", cfg)
    training.write_loss_curve(out_dir / "loss_curve.csv", result.joint_logs)
    ae_rows = ["epoch,lr,loss"] + [f"{l.epoch},{l.lr!r},{l.loss!r}" for l in result.ae_logs]
    (out_dir / "loss_curve_ae.csv").write_text("\n".join(ae_rows) + "\n")

    alignment = evaluation.result_from_training(result, cfg, _sha256(ckpt_path))
    (out_dir / "alignment.json").write_text(alignment.to_json() + "\n")

    manifest = {
        "command": "train",
        "version": __version__,
        "seed": cfg.seed,
        "bundle": str(args.bundle),
        "bundle_sha256": _sha256(args.bundle),
        "pca": str(args.pca),
        "checkpoint": str(ckpt_path),
        "checkpoint_sha256": _sha256(ckpt_path),
        "config": json.loads(json.dumps(vars(cfg), default=str)),
        "final_loss": result.final_loss,
        "baseline_loss": result.baseline_loss,
        "timings": {"total_s": elapsed},
    }
    _write_json(out_dir / "manifest.json", manifest)
    print(json.dumps({"final_loss": result.final_loss, "baseline_loss": result.baseline_loss, "out_dir": str(out_dir)}))
    return 0


def _alignment_from_checkpoint(args, reduced):
    cfg = _config_from_args(args)
    enc, dec, loc = nets.init_models(reduced.shape[1], cfg.seed)
    nets.load_checkpoint(args.checkpoint, enc, dec, loc)
    mats, thetas, flips, per_image, _ = training.align_collection(reduced, enc, loc, cfg)
    entries = [
        evaluation.AlignmentEntry(i, mats[i], flips[i], thetas[i], float(per_image[i]))
        for i in range(len(mats))
    ]
    family = training.curriculum_family(max(cfg.joint_epochs - 1, 0), cfg)
    return evaluation.AlignmentResult(family, entries, _sha256(args.checkpoint)), (enc, dec, loc), cfg


def cmd_align(args) -> int:
    _, _, reduced = _load_reduced(args.bundle, args.pca)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result, (enc, _, _), _ = _alignment_from_checkpoint(args, reduced)
    (out_dir / "alignment.json").write_text(result.to_json() + "\n")

    from . import autodiff

    latent = enc(autodiff.tensor(reduced)).data
    aligned = np.stack(
        [warp.warp(latent[i], e.fused()) for i, e in enumerate(result.entries)]
    )
    for i, im in enumerate(render_rgb(aligned, args.scale)):
        im.save(out_dir / f"aligned_{i:03d}.png")
    print(json.dumps({"alignment": str(out_dir / "alignment.json"), "images": len(result.entries)}))
    return 0


def cmd_atlas(args) -> int:
    collection, _, reduced = _load_reduced(args.bundle, args.pca)
    result, (enc, _, _), _ = _alignment_from_checkpoint(args, reduced)
    if args.source == "latent":
        from . import autodiff

        maps = enc(autodiff.tensor(reduced)).data
    elif args.source == "reduced":
        maps = reduced
    else:
        maps = np.stack([b.features for b in collection])
    atlas = evaluation.build_atlas(maps, result)
    render_rgb(atlas, args.scale)[0].save(args.out)
    print(json.dumps({"atlas": str(args.out), "source": args.source}))
    return 0


def cmd_eval_pck(args) -> int:
    collection = features.load_bundle(args.bundle)
    result = evaluation.AlignmentResult.from_json(Path(args.alignment).read_text())
    h, w = collection[0].mask.shape
    annotations = []
    for b in collection:
        if b.keypoints is None or len(b.keypoints) == 0:
            annotations.append(None)
            continue
        annotations.append(
            evaluation.KeypointAnnotation(b.keypoints, b.visible.astype(bool), evaluation.mask_bbox(b.mask))
        )
    report = evaluation.evaluate_collection(annotations, result, h, w, args.alpha)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_pck_report(out_dir / "pck.csv", out_dir / "pck.json", report)
    print(json.dumps({"mean_pck": report.mean, "alpha": report.alpha, "pairs": len(report.rows)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="congeal", description="Joint alignment of feature-map collections.")
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread cap (default 1, for reproducibility)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic bundle with known alignment")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--family", choices=[f.value for f in GroupFamily], default="se2")
    sp.add_argument("--magnitude", type=float, nargs="+", default=[0.2], help="coefficient bound (1 or 8 values)")
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--channels", type=int, default=40)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mirror-half", action="store_true", help="mirror the second half of the collection")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="fit PCA channel reduction on a bundle")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--k", type=int, default=25)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_preprocess)

    def add_train_like(sp, with_train_flags: bool):
        sp.add_argument("--bundle", required=True)
        sp.add_argument("--pca", required=True)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--recurrences", type=int)
        sp.add_argument("--flips", action="store_true")
        if with_train_flags:
            sp.add_argument("--epochs-ae", dest="epochs_ae", type=int)
            sp.add_argument("--epochs-joint", dest="epochs_joint", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--batch-size", dest="batch_size", type=int)
            sp.add_argument("--curriculum", help="e.g. 0:se2,130:aff2,260:sl3")
            sp.add_argument("--no-curriculum", dest="no_curriculum", action="store_true")
            sp.add_argument("--freeze-ae", dest="freeze_ae", action="store_true")
            sp.add_argument("--direct-matrix", dest="direct_matrix", action="store_true")

    sp = sub.add_parser("train", help="run pretraining and joint alignment")
    add_train_like(sp, True)
    sp.add_argument("--out-dir", dest="out_dir", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("align", help="apply a checkpoint to a bundle")
    add_train_like(sp, False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out-dir", dest="out_dir", required=True)
    sp.add_argument("--scale", type=int, default=8)
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("atlas", help="render the mean of the aligned maps")
    add_train_like(sp, False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--source", choices=["latent", "reduced", "raw"], default="latent")
    sp.add_argument("--scale", type=int, default=8)
    sp.set_defaults(func=cmd_atlas)

    sp = sub.add_parser("eval-pck", help="keypoint-transfer scoring of an alignment")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--alignment", required=True)
    sp.add_argument("--alpha", type=float, default=0.1)
    sp.add_argument("--out-dir", dest="out_dir", required=True)
    sp.set_defaults(func=cmd_eval_pck)
    return p


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface every module error in one parseable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
