import json

import numpy as np
import pytest

from congeal import features
from congeal.features import (
    BundleFormatError,
    FeatureBundle,
    PcaModel,
    RankDeficiencyError,
    fit_pca,
    load_bundle,
    load_pca,
    reduce_and_mask,
    save_bundle,
    save_pca,
    sidecar_path,
)


def _bundle(rng, d=6, h=5, w=4, kp=True, name=None):
    feats = rng.standard_normal((d, h, w)).astype(np.float32)
    mask = (rng.uniform(size=(h, w)) > 0.3).astype(np.uint8)
    mask[2, 2] = 1  # keep at least one foreground pixel
    if kp:
        pts = np.stack([rng.uniform(0, w - 1, 3), rng.uniform(0, h - 1, 3)], axis=1).astype(np.float32)
        vis = np.array([1, 0, 1], dtype=np.uint8)
        return FeatureBundle(feats, mask, pts, vis, name=name)
    return FeatureBundle(feats, mask, name=name)


def test_bundle_round_trip_preserves_everything(rng, tmp_path):
    path = tmp_path / "c.sjam"
    bundles = [_bundle(rng, name=f"img_{i}") for i in range(3)]
    save_bundle(path, bundles, sidecar={"images": [b.name for b in bundles]})
    loaded = load_bundle(path)
    assert len(loaded) == 3
    for orig, back in zip(bundles, loaded):
        assert np.array_equal(orig.features, back.features)
        assert np.array_equal(orig.mask, back.mask)
        assert np.array_equal(orig.keypoints, back.keypoints)
        assert np.array_equal(orig.visible, back.visible)
        assert orig.name == back.name


def test_bundle_rewrite_is_byte_identical(rng, tmp_path):
    p1, p2 = tmp_path / "a.sjam", tmp_path / "b.sjam"
    bundles = [_bundle(rng) for _ in range(2)]
    save_bundle(p1, bundles)
    save_bundle(p2, load_bundle(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_bundle_without_keypoints(rng, tmp_path):
    path = tmp_path / "nokp.sjam"
    save_bundle(path, [_bundle(rng, kp=False) for _ in range(2)])
    loaded = load_bundle(path)
    assert all(b.keypoints is None for b in loaded)


def test_single_image_collections_are_rejected(rng, tmp_path):
    with pytest.raises(BundleFormatError, match="at least 2"):
        save_bundle(tmp_path / "one.sjam", [_bundle(rng)])


def test_shape_mismatch_across_images_is_rejected(rng, tmp_path):
    with pytest.raises(BundleFormatError, match="shape mismatch"):
        save_bundle(tmp_path / "bad.sjam", [_bundle(rng, h=5), _bundle(rng, h=6)])


def test_bad_magic_is_diagnosed(tmp_path):
    path = tmp_path / "junk.sjam"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(BundleFormatError, match="magic"):
        load_bundle(path)


def test_unsupported_version_is_diagnosed(rng, tmp_path):
    path = tmp_path / "v9.sjam"
    save_bundle(path, [_bundle(rng) for _ in range(2)])
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(BundleFormatError, match="version 9"):
        load_bundle(path)


def test_truncation_names_the_missing_image(rng, tmp_path):
    path = tmp_path / "cut.sjam"
    save_bundle(path, [_bundle(rng) for _ in range(2)])
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 15])
    with pytest.raises(BundleFormatError, match="truncated.*image 1"):
        load_bundle(path)


def test_trailing_garbage_is_diagnosed(rng, tmp_path):
    path = tmp_path / "extra.sjam"
    save_bundle(path, [_bundle(rng) for _ in range(2)])
    path.write_bytes(path.read_bytes() + b"\x00\x01")
    with pytest.raises(BundleFormatError, match="trailing"):
        load_bundle(path)


def test_non_binary_mask_is_rejected(rng):
    b = _bundle(rng)
    b.mask[0, 0] = 7
    with pytest.raises(BundleFormatError, match="non-binary"):
        b.validate()


def test_non_finite_features_are_rejected(rng):
    b = _bundle(rng)
    b.features[0, 0, 0] = np.nan
    with pytest.raises(BundleFormatError, match="non-finite"):
        b.validate()


def test_visible_keypoint_outside_map_is_rejected(rng):
    b = _bundle(rng)
    b.keypoints[0] = (99.0, 0.0)
    with pytest.raises(BundleFormatError, match="outside"):
        b.validate()
    # the same coordinate is fine when the point is marked hidden
    b.visible[0] = 0
    b.validate()


def test_sidecar_path_swaps_suffix(tmp_path):
    assert sidecar_path(tmp_path / "x.sjam") == tmp_path / "x.json"


def test_sidecar_json_round_trip(rng, tmp_path):
    path = tmp_path / "named.sjam"
    meta = {"images": ["a", "b"], "note": 5}
    save_bundle(path, [_bundle(rng) for _ in range(2)], sidecar=meta)
    assert json.loads(sidecar_path(path).read_text()) == meta


def _rank_limited_collection(rng, rank, d=10, h=8, w=8, n=3, noise=0.0):
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    basis = basis[:, :rank]
    out = []
    for _ in range(n):
        coeff = rng.standard_normal((rank, h, w))
        feats = np.einsum("dr,rhw->dhw", basis, coeff)
        if noise:
            feats = feats + noise * rng.standard_normal((d, h, w))
        out.append(FeatureBundle(feats.astype(np.float32), np.ones((h, w), np.uint8)))
    return out, basis


def test_pca_reconstructs_rank_limited_data(rng):
    collection, _ = _rank_limited_collection(rng, rank=4)
    pca = fit_pca(collection, k=4)
    b = collection[0]
    reduced = reduce_and_mask(b, pca)
    flat = reduced.reshape(4, -1).astype(np.float64)
    recon = (pca.components.T @ flat + pca.mean[:, None]).reshape(b.features.shape)
    assert np.max(np.abs(recon - b.features)) < 1e-4


def test_pca_with_full_dimension_is_lossless(rng):
    collection, _ = _rank_limited_collection(rng, rank=6, d=6, noise=0.1)
    pca = fit_pca(collection, k=6)
    b = collection[1]
    flat = reduce_and_mask(b, pca).reshape(6, -1).astype(np.float64)
    recon = (pca.components.T @ flat + pca.mean[:, None]).reshape(b.features.shape)
    assert np.max(np.abs(recon - b.features)) < 1e-4


def test_pca_finds_planted_directions(rng):
    # Data built as two known orthogonal directions at large variance plus
    # tiny isotropic noise; the fitted top-2 subspace must match the plant.
    d = 12
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    d1, d2 = basis[:, 0], basis[:, 1]
    n_pix = 4000
    x = (
        np.outer(rng.standard_normal(n_pix) * 3.0, d1)
        + np.outer(rng.standard_normal(n_pix) * 2.0, d2)
        + 0.01 * rng.standard_normal((n_pix, d))
    )
    feats = x.T.reshape(d, 50, 80).astype(np.float32)
    coll = [
        FeatureBundle(feats[:, :25], np.ones((25, 80), np.uint8)),
        FeatureBundle(feats[:, 25:], np.ones((25, 80), np.uint8)),
    ]
    pca = fit_pca(coll, k=2)
    planted = np.stack([d1, d2])
    # principal angles via singular values of the cross-projection
    sv = np.linalg.svd(pca.components @ planted.T, compute_uv=False)
    assert np.all(sv > 1.0 - 1e-4)


def test_pca_variances_are_sorted_and_positive(rng):
    collection, _ = _rank_limited_collection(rng, rank=8, noise=0.05)
    pca = fit_pca(collection, k=6)
    ev = pca.explained_variance
    assert np.all(np.diff(ev) <= 1e-12)
    assert np.all(ev > 0)
    assert pca.total_variance >= ev.sum() - 1e-9


def test_pca_components_are_orthonormal(rng):
    collection, _ = _rank_limited_collection(rng, rank=6, noise=0.05)
    pca = fit_pca(collection, k=5)
    assert np.max(np.abs(pca.components @ pca.components.T - np.eye(5))) < 1e-10


def test_pca_is_deterministic(rng):
    collection, _ = _rank_limited_collection(rng, rank=5, noise=0.02)
    p1 = fit_pca(collection, k=4)
    p2 = fit_pca(collection, k=4)
    assert np.array_equal(p1.components, p2.components)
    assert np.array_equal(p1.mean, p2.mean)


def test_pca_uses_only_foreground_pixels(rng):
    collection, _ = _rank_limited_collection(rng, rank=4, noise=0.02)
    # corrupt background pixels wildly; a foreground-only fit must not move
    masked = []
    for b in collection:
        mask = b.mask.copy()
        mask[:, :2] = 0
        feats = b.features.copy()
        feats[:, :, :2] = 1e6
        masked.append(FeatureBundle(feats, mask))
        clean = FeatureBundle(b.features.copy(), mask)
        masked.append(clean)
    corrupted = fit_pca(masked[::2], k=3)
    clean = fit_pca(masked[1::2], k=3)
    assert np.allclose(corrupted.components, clean.components)


def test_rank_deficient_data_raises(rng):
    collection, _ = _rank_limited_collection(rng, rank=2)
    with pytest.raises(RankDeficiencyError, match="rank"):
        fit_pca(collection, k=5)


def test_too_few_pixels_raises(rng):
    small = [
        FeatureBundle(rng.standard_normal((8, 2, 2)).astype(np.float32), np.eye(2, dtype=np.uint8))
        for _ in range(2)
    ]
    with pytest.raises(RankDeficiencyError, match="foreground"):
        fit_pca(small, k=6)


def test_reduction_zeroes_background(rng):
    collection, _ = _rank_limited_collection(rng, rank=4, noise=0.02)
    pca = fit_pca(collection, k=3)
    b = collection[0]
    mask = b.mask.copy()
    mask[0, :] = 0
    reduced = reduce_and_mask(FeatureBundle(b.features, mask), pca)
    assert reduced.dtype == np.float32
    assert np.all(reduced[:, 0, :] == 0.0)


def test_mean_pixel_reduces_to_zero(rng):
    collection, _ = _rank_limited_collection(rng, rank=4, noise=0.02)
    pca = fit_pca(collection, k=3)
    b = collection[0]
    feats = b.features.copy()
    feats[:, 0, 0] = pca.mean.astype(np.float32)
    reduced = reduce_and_mask(FeatureBundle(feats, b.mask), pca)
    assert np.max(np.abs(reduced[:, 0, 0])) < 1e-5


def test_reduction_is_linear_in_features(rng):
    collection, _ = _rank_limited_collection(rng, rank=5, noise=0.02)
    pca = fit_pca(collection, k=4)
    a, b = collection[0], collection[1]
    mask = np.ones_like(a.mask)
    ra = reduce_and_mask(FeatureBundle(a.features, mask), pca)
    rb = reduce_and_mask(FeatureBundle(b.features, mask), pca)
    diff = reduce_and_mask(FeatureBundle(a.features - b.features + pca.mean.astype(np.float32)[:, None, None], mask), pca)
    assert np.allclose(diff, ra - rb, atol=1e-4)


def test_channel_count_mismatch_is_rejected(rng):
    collection, _ = _rank_limited_collection(rng, rank=4, d=10)
    pca = fit_pca(collection, k=3)
    other = FeatureBundle(rng.standard_normal((7, 5, 5)).astype(np.float32), np.ones((5, 5), np.uint8))
    with pytest.raises(ValueError, match="channels"):
        reduce_and_mask(other, pca)


def test_pca_model_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        PcaModel(np.zeros(3), np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]))
    with pytest.raises(ValueError, match="cannot keep"):
        PcaModel(np.zeros(3), np.vstack([np.eye(3), [1.0, 0.0, 0.0]]))
    with pytest.raises(ValueError, match="inconsistent"):
        PcaModel(np.zeros(4), np.eye(3))


def test_pca_save_load_round_trip(rng, tmp_path):
    collection, _ = _rank_limited_collection(rng, rank=5, noise=0.02)
    pca = fit_pca(collection, k=4)
    path = tmp_path / "p.sjwt"
    save_pca(path, pca)
    back = load_pca(path)
    # storage is float32: compare at that precision
    assert np.array_equal(back.components, pca.components.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.mean, pca.mean.astype(np.float32).astype(np.float64))
    assert np.allclose(back.explained_variance, pca.explained_variance, rtol=1e-6)
    assert np.isclose(back.total_variance, pca.total_variance, rtol=1e-6)
