import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapnet.data import (AugmentConfig, ToyDatasetSpec, affine_matrix, augment, export_toy_dataset,
                         generate_toy_sample, is_validation, load_netpbm, save_netpbm, split_indices,
                         transform_keypoints, warp_image)
from lapnet.heatmap import COCO17, KeypointSet, read_keypoint_file, toy_schema


class TestToyData:
    def test_deterministic(self):
        spec = ToyDatasetSpec()
        a, ka = generate_toy_sample(spec, 17)
        b, kb = generate_toy_sample(spec, 17)
        assert np.array_equal(a, b) and np.array_equal(ka.xy, kb.xy)

    def test_margin_respected(self):
        spec = ToyDatasetSpec(num_samples=200)
        for i in range(spec.num_samples):
            xy = generate_toy_sample(spec, i)[1].xy
            assert np.all(xy >= spec.margin) and np.all(xy <= spec.image_size - 1 - spec.margin)

    def test_noise_free_single_blob_peaks_at_keypoint(self):
        spec = ToyDatasetSpec(num_keypoints=1, noise=0.0)
        img, kps = generate_toy_sample(spec, 3)
        r, c = np.unravel_index(img[0].argmax(), img[0].shape)
        assert (c, r) == tuple(np.rint(kps.xy[0]).astype(int))

    def test_index_range(self):
        with pytest.raises(IndexError):
            generate_toy_sample(ToyDatasetSpec(num_samples=4), 4)

    def test_split_is_stable_and_about_ten_percent(self):
        train, val = split_indices(ToyDatasetSpec())
        assert sorted(train + val) == list(range(512))
        assert 30 <= len(val) <= 75
        assert all(is_validation(i) for i in val)


class TestAugment:
    def test_disabled_is_identity(self, rng):
        img, kps = generate_toy_sample(ToyDatasetSpec(), 0)
        out, k = augment(img, kps, AugmentConfig(), rng)
        assert np.array_equal(out, img) and np.array_equal(k.xy, kps.xy)

    def test_rotate_90_about_center(self):
        m = affine_matrix((9, 9), angle_deg=90)
        # center (4, 4); (x, y) = (6, 4) -> (4 - 0, 4 + 2)
        kps = transform_keypoints(KeypointSet([[6.0, 4.0]], [True]), m, (9, 9))
        np.testing.assert_allclose(kps.xy, [[4.0, 6.0]], atol=1e-12)

    def test_warp_moves_pixel_with_keypoint(self):
        img = np.zeros((1, 9, 9))
        img[0, 4, 6] = 1.0
        m = affine_matrix((9, 9), angle_deg=90)
        out = warp_image(img, m)
        assert np.unravel_index(out[0].argmax(), (9, 9)) == (6, 4)

    def test_flip_only_delegates_to_schema(self):
        cfg = AugmentConfig(flip=True, flip_prob=1.0)
        xy = np.full((17, 2), 20.0)
        xy[COCO17.index("left_eye")] = [5, 8]
        out_img, out = augment(np.zeros((3, 32, 24)), KeypointSet(xy, np.ones(17, bool)), cfg,
                               np.random.default_rng(0), COCO17)
        np.testing.assert_allclose(out.xy[COCO17.index("right_eye")], [18, 8])

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_visibility_consistency(self, seed):
        rng = np.random.default_rng(seed)
        spec = ToyDatasetSpec()
        img, kps = generate_toy_sample(spec, seed % spec.num_samples)
        kps.visible[0] = False
        cfg = AugmentConfig(scale=True, rotate=True, flip=True, jitter=True, translate=0.3)
        _, out = augment(img, kps, cfg, rng, toy_schema(4))
        assert out.num_joints == kps.num_joints
        inside = np.all((out.xy >= 0) & (out.xy <= spec.image_size - 1), axis=1)
        np.testing.assert_array_equal(out.visible, inside & np.isin(np.arange(4), np.flatnonzero(kps.visible)))


class TestNetpbm:
    @pytest.mark.parametrize("channels", [1, 3])
    def test_round_trip(self, tmp_path, rng, channels):
        img = rng.integers(0, 256, size=(channels, 5, 7)) / 255.0
        save_netpbm(tmp_path / "a.pnm", img)
        np.testing.assert_allclose(load_netpbm(tmp_path / "a.pnm"), img, atol=1e-12)

    def test_export(self, tmp_path):
        spec = ToyDatasetSpec(num_samples=3)
        export_toy_dataset(spec, tmp_path)
        assert (tmp_path / "00002.pgm").read_bytes()[:2] == b"P5"
        recs = read_keypoint_file(tmp_path / "keypoints.txt", toy_schema(4))
        np.testing.assert_allclose(recs[1][1].xy, generate_toy_sample(spec, 1)[1].xy, atol=1e-6)
