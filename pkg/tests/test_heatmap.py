import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapnet.heatmap import (COCO17, MPII16, KeypointSet, decode, encode, encode_one, flip_keypoints, mse_loss,
                            read_keypoint_file, schema_for, toy_schema, write_keypoint_file)

from oracles import numeric_grad


class TestEncode:
    def test_peak_and_sigma_value(self):
        maps = encode_one(KeypointSet([[5.0, 7.0]], [True]), 16, 16, sigma=2.0)
        assert maps[0, 7, 5] == 1.0
        assert abs(maps[0, 7, 7] - np.exp(-0.5)) < 1e-12

    def test_invisible_joint_is_zero(self):
        maps = encode_one(KeypointSet([[5.0, 7.0], [3.0, 3.0]], [True, False]), 8, 8)
        assert not maps[1].any()

    def test_batch_shape(self):
        kps = [KeypointSet(np.full((4, 2), 3.0), np.ones(4, bool))] * 3
        assert encode(kps, 16, 12).maps.shape == (3, 4, 16, 12)

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            encode_one(KeypointSet([[1, 1]], [True]), 4, 4, sigma=0)


class TestDecode:
    @given(st.floats(2, 13), st.floats(2, 13))
    @settings(max_examples=200)
    def test_round_trip_interior(self, x, y):
        kps = KeypointSet([[x, y]], [True])
        out = decode(encode(kps, 16, 16))[0]
        assert np.all(np.abs(out.xy - kps.xy) <= 0.5)

    def test_quarter_offset_toward_larger_neighbour(self):
        m = np.zeros((1, 1, 5, 5))
        m[0, 0, 2, 2], m[0, 0, 2, 3], m[0, 0, 1, 2] = 1.0, 0.5, 0.2
        out = decode(m)[0]
        np.testing.assert_array_equal(out.xy, [[2.25, 1.75]])
        assert out.confidence[0] == 1.0

    def test_tie_goes_to_first_index(self):
        m = np.zeros((1, 1, 4, 4))
        m[0, 0, 3, 0] = m[0, 0, 1, 2] = 1.0
        np.testing.assert_array_equal(decode(m)[0].xy, [[2.0, 1.0]])


class TestLoss:
    def test_equal_stacks_zero_exactly(self, rng):
        a = rng.normal(size=(2, 3, 4, 4))
        loss, grad = mse_loss(a, a.copy())
        assert loss == 0.0 and not grad.any()

    def test_mask_excludes_joints(self, rng):
        p, g = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3))
        loss, grad = mse_loss(p, g, [[True, False]])
        assert loss == pytest.approx(np.mean((p[0, 0] - g[0, 0]) ** 2))
        assert not grad[0, 1].any()

    def test_gradient(self, rng):
        p, g = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3))
        _, grad = mse_loss(p, g)
        np.testing.assert_allclose(grad, numeric_grad(lambda: mse_loss(p, g)[0], p), atol=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


class TestSchemasAndFlip:
    @pytest.mark.parametrize("schema", [COCO17, MPII16, toy_schema(4)])
    def test_flip_is_involution(self, schema, rng):
        kps = KeypointSet(rng.uniform(0, 40, size=(schema.num_joints, 2)), rng.random(schema.num_joints) > 0.3)
        back = flip_keypoints(flip_keypoints(kps, schema, 48), schema, 48)
        np.testing.assert_allclose(back.xy, kps.xy)
        np.testing.assert_array_equal(back.visible, kps.visible)

    def test_flip_swaps_left_right(self):
        xy = np.zeros((17, 2))
        xy[COCO17.index("left_wrist")] = [10, 5]
        out = flip_keypoints(KeypointSet(xy, np.ones(17, bool)), COCO17, 48)
        np.testing.assert_array_equal(out.xy[COCO17.index("right_wrist")], [37, 5])

    def test_schema_lookup(self):
        assert schema_for("toy", 6).num_joints == 6
        assert schema_for("coco17") is COCO17
        assert len(COCO17.oks_k) == 17
        with pytest.raises(ValueError):
            schema_for("hands21")


class TestKeypointFile:
    def test_round_trip(self, tmp_path, rng):
        schema = toy_schema(3)
        recs = [("a", KeypointSet(rng.uniform(0, 60, (3, 2)), [True, False, True])),
                ("b", KeypointSet(rng.uniform(0, 60, (3, 2)), [True] * 3, np.array([0.5, 0.25, 1.0])))]
        write_keypoint_file(tmp_path / "k.txt", recs, schema)
        back = read_keypoint_file(tmp_path / "k.txt", schema)
        assert [r[0] for r in back] == ["a", "b"]
        np.testing.assert_allclose(back[0][1].xy, recs[0][1].xy, atol=1e-6)
        np.testing.assert_array_equal(back[0][1].visible, [True, False, True])
        assert back[0][1].confidence is None
        np.testing.assert_allclose(back[1][1].confidence, [0.5, 0.25, 1.0])

    def test_unknown_joint(self, tmp_path):
        (tmp_path / "k.txt").write_text("sample x\nelbow 1 2 1\n")
        with pytest.raises(ValueError, match="unknown joint"):
            read_keypoint_file(tmp_path / "k.txt", toy_schema(1))
