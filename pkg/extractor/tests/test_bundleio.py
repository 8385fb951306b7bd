import json

import numpy as np
import pytest

from bundle_extractor.bundleio import BundleContractError, BundleImage, read_bundle, write_bundle


def _images(rng, n=3, d=5, h=4, w=6, with_kps=True):
    out = []
    for i in range(n):
        kps = vis = None
        if with_kps:
            kps = np.column_stack([rng.uniform(0, w - 1, 3), rng.uniform(0, h - 1, 3)]).astype(np.float32)
            vis = np.array([1, 0, 1], dtype=np.uint8)
        out.append(
            BundleImage(
                rng.standard_normal((d, h, w)).astype(np.float32),
                (rng.random((h, w)) > 0.4).astype(np.uint8),
                kps,
                vis,
                name=f"img{i}.png",
            )
        )
    return out


def test_round_trip_is_bit_exact(tmp_path, rng):
    images = _images(rng)
    path = tmp_path / "c.sjam"
    write_bundle(path, images, {"images": [im.name for im in images]})
    back = read_bundle(path)
    assert len(back) == len(images)
    for a, b in zip(images, back):
        assert a.features.tobytes() == b.features.tobytes()
        assert np.array_equal(a.mask, b.mask)
        assert a.keypoints.tobytes() == b.keypoints.tobytes()
        assert np.array_equal(a.visible, b.visible)
        assert a.name == b.name


def test_rewrite_is_byte_identical(tmp_path, rng):
    images = _images(rng)
    p1, p2 = tmp_path / "a.sjam", tmp_path / "b.sjam"
    write_bundle(p1, images)
    write_bundle(p2, read_bundle(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_bundle_loads_in_the_alignment_package(tmp_path, rng):
    congeal_features = pytest.importorskip("congeal.features")
    images = _images(rng)
    path = tmp_path / "c.sjam"
    write_bundle(path, images, {"images": [im.name for im in images]})
    loaded = congeal_features.load_bundle(path)
    assert len(loaded) == 3
    for ours, theirs in zip(images, loaded):
        assert ours.features.tobytes() == theirs.features.tobytes()
        assert np.array_equal(ours.mask, theirs.mask)
        assert ours.keypoints.tobytes() == theirs.keypoints.tobytes()
        assert theirs.name == ours.name


def test_alignment_package_bundles_read_back(tmp_path, rng):
    congeal_features = pytest.importorskip("congeal.features")
    theirs = [
        congeal_features.FeatureBundle(
            rng.standard_normal((4, 5, 5)).astype(np.float32),
            np.ones((5, 5), np.uint8),
            name=f"x{i}",
        )
        for i in range(2)
    ]
    path = tmp_path / "c.sjam"
    congeal_features.save_bundle(path, theirs, {"images": ["x0", "x1"]})
    ours = read_bundle(path)
    assert [im.name for im in ours] == ["x0", "x1"]
    for a, b in zip(theirs, ours):
        assert a.features.tobytes() == b.features.tobytes()


def test_sidecar_written_and_optional(tmp_path, rng):
    images = _images(rng, with_kps=False)
    path = tmp_path / "c.sjam"
    write_bundle(path, images, {"images": [im.name for im in images], "note": 1})
    meta = json.loads((tmp_path / "c.json").read_text())
    assert meta["note"] == 1
    (tmp_path / "c.json").unlink()
    back = read_bundle(path)
    assert all(im.name is None for im in back)
    assert all(im.keypoints is None for im in back)


def test_single_image_rejected(tmp_path, rng):
    with pytest.raises(BundleContractError, match="at least 2"):
        write_bundle(tmp_path / "c.sjam", _images(rng, n=1))


def test_shape_mismatch_rejected(tmp_path, rng):
    images = _images(rng)
    images[1] = BundleImage(np.zeros((5, 4, 7), np.float32), np.zeros((4, 7), np.uint8))
    with pytest.raises(BundleContractError, match="shape mismatch"):
        write_bundle(tmp_path / "c.sjam", images)


def test_non_binary_mask_rejected(tmp_path, rng):
    images = _images(rng, with_kps=False)
    images[0].mask[0, 0] = 7
    with pytest.raises(BundleContractError, match="non-binary"):
        write_bundle(tmp_path / "c.sjam", images)


def test_visible_keypoint_outside_rejected(tmp_path, rng):
    images = _images(rng)
    images[0].keypoints[0] = (99.0, 1.0)
    with pytest.raises(BundleContractError, match="outside"):
        write_bundle(tmp_path / "c.sjam", images)
    images[0].visible[0] = 0  # hidden points may sit anywhere
    write_bundle(tmp_path / "c.sjam", images)


def test_truncated_and_trailing_bytes_diagnosed(tmp_path, rng):
    path = tmp_path / "c.sjam"
    write_bundle(path, _images(rng, with_kps=False))
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(BundleContractError, match="truncated"):
        read_bundle(path)
    path.write_bytes(blob + b"xx")
    with pytest.raises(BundleContractError, match="trailing"):
        read_bundle(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "c.sjam"
    path.write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(BundleContractError, match="not a feature bundle"):
        read_bundle(path)
