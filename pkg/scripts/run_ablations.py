"""Ablation grid on the synthetic benchmark: exponential parameterization vs
direct matrix entries, curriculum vs none, and cascade depth.  Each variant
trains a shortened schedule on the same collection; the table reports final
corner transfer error in pixels.

Usage: python scripts/run_ablations.py --out-dir runs/ablations
"""

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from congeal import evaluation, features, training
from congeal.lie import GroupFamily
from congeal.training import TrainConfig


def variants(base: TrainConfig) -> dict[str, TrainConfig]:
    third = base.joint_epochs // 3
    curriculum = ((0, GroupFamily.SE2), (third, GroupFamily.AFF2), (2 * third, GroupFamily.SL3))
    out = {
        "full": dataclasses.replace(base, curriculum=curriculum),
        "direct_matrix": dataclasses.replace(base, curriculum=curriculum, direct_matrix=True, use_curriculum=False),
        "no_curriculum": dataclasses.replace(base, use_curriculum=False),
        "single_step": dataclasses.replace(base, curriculum=curriculum, recurrences=1),
        "frozen_encoder": dataclasses.replace(base, curriculum=curriculum, freeze_ae=True),
    }
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", type=Path, default=Path("runs/ablations"))
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs-ae", type=int, default=100)
    ap.add_argument("--epochs-joint", type=int, default=150)
    args = ap.parse_args()

    magnitude = (0.0, np.deg2rad(20.0), 0.2, 0.0, 0.0, 0.2, 0.0, 0.0)
    synth = evaluation.make_synthetic(args.seed, args.n, GroupFamily.SE2, magnitude, h=32, w=32, d=40)
    pca = features.fit_pca(synth.bundles, 25)
    reduced = np.stack([features.reduce_and_mask(b, pca) for b in synth.bundles])
    identity = np.broadcast_to(np.eye(3), (args.n, 3, 3))
    initial = evaluation.corner_transfer_error(identity, synth.gt_mats, 32, 32)

    base = TrainConfig(ae_epochs=args.epochs_ae, joint_epochs=args.epochs_joint, seed=1)
    rows = {}
    for name, cfg in variants(base).items():
        t0 = time.perf_counter()
        try:
            result = training.train(reduced, cfg)
            err = evaluation.corner_transfer_error(result.final_mats, synth.gt_mats, 32, 32)
            rows[name] = {"corner_px": err, "final_loss": result.final_loss, "seconds": time.perf_counter() - t0}
        except training.TrainingDivergedError as exc:
            rows[name] = {"diverged": str(exc), "seconds": time.perf_counter() - t0}
        got = rows[name].get("corner_px")
        print(f"{name:16s} {got if got is None else f'{got:.3f}px'}")

    args.out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"initial_corner_px": initial, "variants": rows}
    (args.out_dir / "summary.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))


if __name__ == "__main__":
    main()
