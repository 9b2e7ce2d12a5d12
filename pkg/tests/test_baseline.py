"""One-to-one fusion baseline tests."""

import numpy as np
import pytest

from dcafuse.baseline import (
    OneToOneParams,
    load_one_to_one_params,
    one_to_one_backward,
    one_to_one_fuse,
    save_one_to_one_params,
)
from dcafuse.dca import FeaturePyramid, PointFeatureSet
from dcafuse.diffcore import AffineParams, affine_forward, bilinear_sample
from dcafuse.geometry import Camera, CameraRig, project
from dcafuse.gradcheck import _toy_rig, check_one_to_one


def make_setup(seed, n_points=8, c_img=3, c_lidar=4):
    rng = np.random.default_rng(seed)
    rig = _toy_rig(32)
    pyramids = [
        FeaturePyramid(levels=[rng.normal(size=(8, 8, c_img))]) for _ in rig.cameras
    ]
    points = PointFeatureSet(
        features=rng.normal(size=(n_points, c_lidar)),
        coords=np.stack(
            [rng.uniform(-0.5, 0.5, n_points), rng.uniform(-0.5, 0.5, n_points),
             rng.uniform(-0.2, 0.2, n_points)], axis=1,
        ),
    )
    params = OneToOneParams(
        fuse=AffineParams(rng.normal(size=(c_lidar, c_lidar + c_img)) * 0.5,
                          rng.normal(size=c_lidar)),
        level=0,
    )
    return points, pyramids, rig, params


class TestOneToOneFuse:
    def test_zero_pyramid_gives_fuse_of_lidar_only(self):
        points, pyramids, rig, params = make_setup(0)
        zeroed = [FeaturePyramid(levels=[np.zeros_like(p.levels[0])]) for p in pyramids]
        fused, _ = one_to_one_fuse(points, zeroed, rig, params)
        stacked = np.concatenate([points.features, np.zeros((8, 3))], axis=1)
        expect, _ = affine_forward(stacked, params.fuse)
        np.testing.assert_array_equal(fused.features, expect)

    def test_single_valid_view_constant_map(self):
        points, pyramids, rig, params = make_setup(1)
        rig1 = CameraRig(cameras=(rig.cameras[0],))
        constant = [FeaturePyramid(levels=[np.full((8, 8, 3), 2.25)])]
        _, cache = one_to_one_fuse(points, constant, rig1, params)
        refs = project(rig1, points.coords)
        visible = refs.valid[0]
        np.testing.assert_allclose(cache["image_half"][visible], 2.25, atol=1e-12)
        np.testing.assert_array_equal(cache["image_half"][~visible], 0.0)

    def test_image_half_is_view_mean_of_level_samples(self):
        points, pyramids, rig, params = make_setup(2)
        _, cache = one_to_one_fuse(points, pyramids, rig, params)
        refs = project(rig, points.coords)
        n = points.features.shape[0]
        expect = np.zeros((n, 3))
        for i in range(n):
            vals = []
            for k in range(len(rig)):
                if refs.valid[k, i]:
                    s, _ = bilinear_sample(pyramids[k].levels[0], refs.coords[k, i])
                    vals.append(s)
            if vals:
                expect[i] = np.mean(vals, axis=0)
        np.testing.assert_allclose(cache["image_half"], expect, atol=1e-12)

    def test_coords_unchanged(self):
        points, pyramids, rig, params = make_setup(3)
        fused, _ = one_to_one_fuse(points, pyramids, rig, params)
        np.testing.assert_array_equal(fused.coords, points.coords)

    def test_width_mismatch_raises(self):
        points, pyramids, rig, params = make_setup(4)
        params.fuse = AffineParams(np.zeros((4, 5)), np.zeros(4))
        with pytest.raises(ValueError):
            one_to_one_fuse(points, pyramids, rig, params)

    def test_permutation_equivariance(self):
        points, pyramids, rig, params = make_setup(5)
        fused, _ = one_to_one_fuse(points, pyramids, rig, params)
        perm = np.random.default_rng(0).permutation(points.features.shape[0])
        permuted = PointFeatureSet(features=points.features[perm],
                                   coords=points.coords[perm])
        fused_p, _ = one_to_one_fuse(permuted, pyramids, rig, params)
        np.testing.assert_array_equal(fused_p.features, fused.features[perm])

    def test_output_depends_on_rig_only_through_projections(self):
        # Nudging the rig changes the output iff some reference point moves.
        points, pyramids, rig, params = make_setup(6)
        fused, _ = one_to_one_fuse(points, pyramids, rig, params)
        unchanged, _ = one_to_one_fuse(points, pyramids, rig, params)
        np.testing.assert_array_equal(fused.features, unchanged.features)
        nudged = CameraRig(cameras=tuple(
            Camera(proj=c.proj + np.array([[0, 0, 0, 0.35]] * 2 + [[0, 0, 0, 0]]),
                   width_px=c.width_px, height_px=c.height_px)
            for c in rig.cameras
        ))
        refs_a = project(rig, points.coords)
        refs_b = project(nudged, points.coords)
        assert np.abs(refs_a.coords - refs_b.coords).max() > 1e-6
        fused_b, _ = one_to_one_fuse(points, pyramids, nudged, params)
        assert np.abs(fused_b.features - fused.features).max() > 1e-9

    def test_backward_requires_cache(self):
        with pytest.raises(RuntimeError):
            one_to_one_backward(np.zeros((2, 2)), None)

    def test_gradients_match_finite_differences(self):
        assert check_one_to_one(0) < 1e-3
        assert check_one_to_one(1) < 1e-3


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        _, _, _, params = make_setup(7)
        save_one_to_one_params(tmp_path / "ckpt", params)
        loaded = load_one_to_one_params(tmp_path / "ckpt")
        np.testing.assert_allclose(loaded.fuse.weight, params.fuse.weight, atol=1e-6)
        assert loaded.level == params.level
