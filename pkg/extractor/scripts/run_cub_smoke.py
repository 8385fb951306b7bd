"""End-to-end smoke: extract a bundle from a small bird-image subset, run the
congeal CLI pipeline on it, and compare keypoint-transfer PCK against an
identity-alignment baseline.

With --cub-root pointing at a CUB_200_2011 checkout (and ideally --model-path
at a pretrained ViT checkpoint) this scores real data.  Without it, the script
renders a stand-in collection: one analytic scene of Gaussian blobs viewed
under random rigid motions, with CUB-format annotations derived from the same
motions.  The stand-in exercises every pipeline stage end to end; its absolute
PCK is not comparable to real-data numbers.

Usage: python scripts/run_cub_smoke.py --out-dir runs/smoke
"""

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from bundle_extractor import ExtractionSpec, extract

PART_NAMES = ["beak", "crown", "breast", "tail", "left_wing", "right_wing"]


def _scene(rng, n_texture: int = 40):
    """Analytic scene: Gaussian texture plus one bright blob per part.

    Returns (centers, amps (3, K), sigmas, part_centers) in a [0, 1]^2 frame.
    """
    centers = rng.uniform(0.05, 0.95, size=(n_texture, 2))
    amps = rng.uniform(0.1, 0.5, size=(3, n_texture))
    sigmas = rng.uniform(0.02, 0.08, size=n_texture)
    # parts sit on a loose ring near the center so they stay visible under motion
    angles = np.linspace(0.0, 2 * np.pi, len(PART_NAMES), endpoint=False) + rng.uniform(0, 0.5)
    radius = rng.uniform(0.12, 0.22, size=len(PART_NAMES))
    parts = 0.5 + radius[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    centers = np.concatenate([centers, parts])
    part_amps = rng.uniform(0.8, 1.0, size=(3, len(PART_NAMES)))
    amps = np.concatenate([amps, part_amps], axis=1)
    sigmas = np.concatenate([sigmas, np.full(len(PART_NAMES), 0.03)])
    return centers, amps, sigmas, parts


def _render(pts, centers, amps, sigmas):
    """Evaluate the scene at pts (..., 2); returns (..., 3) in [0, 255]."""
    d2 = ((pts[..., None, :] - centers) ** 2).sum(-1)
    basis = np.exp(-d2 / (2 * sigmas**2))
    rgb = basis @ amps.T
    return np.clip(rgb * 255.0 / max(rgb.max(), 1e-9), 0, 255).astype(np.uint8)


def make_standin(root: Path, n: int, size: int, seed: int) -> list:
    """Render n rigidly perturbed views of one scene with CUB-format annotations."""
    from PIL import Image

    rng = np.random.default_rng(seed)
    centers, amps, sigmas, parts = _scene(rng)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    (root / "parts").mkdir(exist_ok=True)

    ys, xs = np.mgrid[0:size, 0:size]
    grid = np.stack([xs, ys], axis=-1).astype(np.float64)
    images_txt, bbox_txt, part_txt, paths = [], [], [], []
    for i in range(n):
        theta = rng.uniform(-np.deg2rad(15), np.deg2rad(15))
        scale = rng.uniform(0.95, 1.05)
        shift = rng.uniform(-0.08, 0.08, size=2)
        c, s = np.cos(theta), np.sin(theta)
        rot = scale * np.array([[c, -s], [s, c]])
        # pixel -> scene frame, rotating about the image center
        scene_pts = (grid / size - 0.5 - shift) @ rot.T + 0.5
        rgb = _render(scene_pts, centers, amps, sigmas)
        name = f"img_{i:02d}.png"
        Image.fromarray(rgb).save(img_dir / name)
        paths.append(img_dir / name)
        images_txt.append(f"{i + 1} images/{name}")
        # scene -> pixel is the inverse motion
        px = ((parts - 0.5) @ np.linalg.inv(rot).T + 0.5 + shift) * size
        vis = (px >= 0).all(1) & (px < size).all(1)
        for p, ((x, y), v) in enumerate(zip(px, vis), start=1):
            if not v:
                x = y = 0.0
            part_txt.append(f"{i + 1} {p} {x:.2f} {y:.2f} {int(v)}")
        seen = px[vis]
        lo = np.clip(seen.min(0) - 0.1 * size, 0, size - 2)
        hi = np.clip(seen.max(0) + 0.1 * size, lo + 1, size - 1)
        bbox_txt.append(f"{i + 1} {lo[0]:.1f} {lo[1]:.1f} {hi[0] - lo[0]:.1f} {hi[1] - lo[1]:.1f}")
    (root / "images.txt").write_text("\n".join(images_txt) + "\n")
    (root / "bounding_boxes.txt").write_text("\n".join(bbox_txt) + "\n")
    (root / "parts" / "part_locs.txt").write_text("\n".join(part_txt) + "\n")
    return paths


def list_cub_images(cub_root: Path, class_prefix: str, limit: int) -> list:
    rows = (cub_root / "images.txt").read_text().split("\n")
    paths = []
    for row in rows:
        if not row.strip():
            continue
        rel = row.split(maxsplit=1)[1]
        if class_prefix and not Path(rel).name.startswith(class_prefix) and class_prefix not in rel:
            continue
        paths.append(cub_root / "images" / rel)
        if len(paths) == limit:
            break
    return paths


def identity_alignment(n: int) -> str:
    eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    images = [
        {"index": i, "transform": eye, "flip": "identity", "thetas": [[0.0] * 8], "loss": 0.0}
        for i in range(n)
    ]
    payload = {"family": "sl3", "checkpoint_hash": "0" * 64, "images": images}
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def congeal(*args: str) -> dict:
    proc = subprocess.run(["congeal", *args], capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"congeal {args[0]} failed: {proc.stderr.strip()}")
    return json.loads(proc.stdout.strip().split("\n")[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", type=Path, default=Path("runs/smoke"))
    ap.add_argument("--cub-root", type=Path, help="CUB_200_2011 root; omit to render a stand-in")
    ap.add_argument("--class-prefix", default="", help="filter CUB rows, e.g. 001.")
    ap.add_argument("--limit", type=int, default=26)
    ap.add_argument("--model-path", help="pretrained backbone dir; omit for seeded random init")
    ap.add_argument("--preset", default="vit-s8")
    ap.add_argument("--resolution", type=int, default=224)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-seed", type=int, default=1)
    ap.add_argument("--k", type=int, default=25)
    ap.add_argument("--epochs-ae", type=int, default=None)
    ap.add_argument("--epochs-joint", type=int, default=None)
    ap.add_argument("--alpha", type=float, default=0.1)
    args = ap.parse_args()

    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if args.cub_root:
        ann_root, data = args.cub_root, "cub"
        paths = list_cub_images(args.cub_root, args.class_prefix, args.limit)
    else:
        ann_root, data = out / "standin", "standin"
        paths = make_standin(ann_root, args.limit, 224, args.seed)

    bundle = out / "collection.sjam"
    spec = ExtractionSpec(
        out_path=bundle,
        model_path=args.model_path,
        preset=args.preset,
        resolution=args.resolution,
        seed=args.seed,
        annotations_dir=ann_root,
        annotation_format="cub",
    )
    t0 = time.perf_counter()
    extract(paths, spec)
    extract_s = time.perf_counter() - t0

    pca = out / "pca.sjpc"
    congeal("preprocess", "--bundle", str(bundle), "--k", str(args.k), "--out", str(pca))
    train_args = ["train", "--bundle", str(bundle), "--pca", str(pca),
                  "--out-dir", str(out / "run"), "--seed", str(args.train_seed)]
    if args.epochs_ae is not None:
        train_args += ["--epochs-ae", str(args.epochs_ae)]
    if args.epochs_joint is not None:
        third = args.epochs_joint // 3
        train_args += ["--epochs-joint", str(args.epochs_joint),
                       "--curriculum", f"0:se2,{third}:aff2,{2 * third}:sl3"]
    t0 = time.perf_counter()
    congeal(*train_args)
    train_s = time.perf_counter() - t0

    trained = congeal("eval-pck", "--bundle", str(bundle), "--alpha", str(args.alpha),
                      "--alignment", str(out / "run" / "alignment.json"),
                      "--out-dir", str(out / "pck_trained"))
    (out / "identity_alignment.json").write_text(identity_alignment(len(paths)) + "\n")
    baseline = congeal("eval-pck", "--bundle", str(bundle), "--alpha", str(args.alpha),
                       "--alignment", str(out / "identity_alignment.json"),
                       "--out-dir", str(out / "pck_identity"))

    summary = {
        "data": data,
        "images": len(paths),
        "trained_pck": trained["mean_pck"],
        "identity_pck": baseline["mean_pck"],
        "gain": trained["mean_pck"] - baseline["mean_pck"],
        "alpha": args.alpha,
        "pairs": trained["pairs"],
        "extract_seconds": extract_s,
        "train_seconds": train_s,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    if summary["gain"] <= 0 and data == "cub":
        sys.exit(1)


if __name__ == "__main__":
    main()
