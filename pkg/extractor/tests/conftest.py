import json

import numpy as np
import pytest
from PIL import Image


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def _blob_image(path, size, seed):
    """Object-centric test image: bright blob on a dark textured background."""
    w, h = size
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = w / 2 + r.uniform(-w / 8, w / 8), h / 2 + r.uniform(-h / 8, h / 8)
    blob = np.exp(-(((xx - cx) / (w / 5)) ** 2 + ((yy - cy) / (h / 5)) ** 2))
    base = 0.15 * r.random((h, w))
    img = np.clip(base + 0.8 * blob, 0, 1)
    rgb = np.stack([img, img * 0.8, img * 0.6], axis=-1)
    Image.fromarray((rgb * 255).astype(np.uint8)).save(path)


@pytest.fixture()
def image_files(tmp_path):
    sizes = [(64, 48), (80, 80), (60, 72)]
    paths = []
    for i, size in enumerate(sizes):
        p = tmp_path / f"im{i}.png"
        _blob_image(p, size, seed=i)
        paths.append(p)
    return paths, sizes


@pytest.fixture()
def spair_dir(tmp_path):
    """Minimal SPair-style tree: two image annotations and one pair file."""
    cat = tmp_path / "spair" / "ImageAnnotation" / "cat"
    cat.mkdir(parents=True)
    ann_a = {
        "filename": "im0.png",
        "image_width": 64,
        "image_height": 48,
        "bndbox": [10, 8, 50, 40],
        "kps": {"0": [12.0, 10.0], "1": None, "2": [30.0, 20.0], "3": [45.5, 33.0]},
    }
    ann_b = {
        "filename": "im1.png",
        "image_width": 80,
        "image_height": 80,
        "bndbox": [5, 5, 70, 75],
        "kps": {"0": [8.0, 9.0], "1": [22.0, 40.0], "2": None, "3": [60.0, 66.0]},
    }
    (cat / "im0.json").write_text(json.dumps(ann_a))
    (cat / "im1.json").write_text(json.dumps(ann_b))
    pair_dir = tmp_path / "spair" / "PairAnnotation" / "test"
    pair_dir.mkdir(parents=True)
    pair = {
        "src_imname": "im0.png",
        "trg_imname": "im1.png",
        "src_bndbox": [10, 8, 50, 40],
        "trg_bndbox": [5, 5, 70, 75],
        "src_kps": [[float(3 + 4 * i), float(2 + 3 * i)] for i in range(9)],
        "trg_kps": [[float(5 + 4 * i), float(4 + 3 * i)] for i in range(9)],
    }
    pair_path = pair_dir / "pair0.json"
    pair_path.write_text(json.dumps(pair))
    return tmp_path / "spair", pair_path


@pytest.fixture()
def cub_dir(tmp_path):
    """Minimal CUB-style tree: 3 images, 4 parts, one image unannotated."""
    root = tmp_path / "cub"
    (root / "parts").mkdir(parents=True)
    (root / "images.txt").write_text(
        "1 001.Species/im0.png\n2 001.Species/im1.png\n3 001.Species/im2.png\n"
    )
    (root / "bounding_boxes.txt").write_text(
        "1 10.0 8.0 40.0 32.0\n2 5.0 5.0 65.0 70.0\n3 2.0 2.0 50.0 60.0\n"
    )
    lines = []
    for img_id, base in ((1, (12.0, 10.0)), (2, (20.0, 30.0))):
        for part in range(1, 5):
            visible = 0 if part == 3 else 1
            x, y = base[0] + part, base[1] + 2 * part
            if not visible:
                x = y = 0.0
            lines.append(f"{img_id} {part} {x} {y} {visible}")
    (root / "parts" / "part_locs.txt").write_text("\n".join(lines) + "\n")
    return root
