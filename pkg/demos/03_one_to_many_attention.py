#!/usr/bin/env python3
"""Anatomy of the one-to-many fusion operator.

For each 3D point and each camera that sees it, the operator:
  1. projects the point to a [0,1]-normalized reference location;
  2. builds a query from the unified LiDAR feature, concatenated with the
     mean of the layer-normalized image features sampled at the reference
     point on every pyramid level (the dynamic query enhancement);
  3. predicts sampling offsets (in normalized units, shared across levels)
     and a softmax weight per sample;
  4. takes the weighted sum of bilinear samples at reference + offset over
     all levels, averages over valid views, adds the raw LiDAR feature, and
     applies a feed-forward block.

This script pokes at the pieces on a toy two-camera scene and shows the
zero-offset initialization: a symmetric ring probe around the projection
with uniform attention.
"""

import numpy as np

from dcafuse import DcaHyper, FeaturePyramid, PointFeatureSet, dca_backward, dca_forward
from dcafuse.dca import init_dca_params
from dcafuse.gradcheck import _toy_rig

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(4)

rig = _toy_rig(image_px=32)
hyper = DcaHyper(num_levels=2, num_directions=4, points_per_direction=2, channels=6)
print(f"hyper: L={hyper.num_levels} levels, M={hyper.num_directions} directions, "
      f"D={hyper.points_per_direction} points each -> {hyper.num_samples} samples per view")

pyramids = [
    FeaturePyramid(levels=[rng.normal(size=(32 // s, 32 // s, 5)) for s in (4, 8)])
    for _ in rig.cameras
]
points = PointFeatureSet(
    features=rng.normal(size=(5, 6)),
    coords=np.stack([rng.uniform(-0.5, 0.5, 5), rng.uniform(-0.5, 0.5, 5),
                     rng.uniform(-0.2, 0.2, 5)], axis=1),
)
params = init_dca_params(
    rng, lidar_channels=6, level_channels=[5, 5], hyper=hyper, image_size_px=(32, 32)
)

fused, cache = dca_forward(points, pyramids, rig, params)
print("\nfused features:", fused.features.shape, "(coords pass through unchanged)")

field = cache.offset_field
print("\nzero-init offset ring for point 0, camera 0 (pixels):")
print(field.offsets[0, 0] * 32)
print("initial attention weights are uniform:",
      np.allclose(field.weights[0, 0], 1 / hyper.num_samples))
print("weights sum to 1 for every valid (point, view):",
      np.allclose(field.weights.sum(axis=2)[cache.refs.valid.T], 1.0))

# Backward: gradients for the inputs and every parameter group.
grads = dca_backward(rng.normal(size=fused.features.shape), cache)
print("\ngradient shapes: features", grads.features.shape,
      "| level-0 map", grads.pyramids[0][0].shape)
leaf_norms = {
    "offset_head": float(np.abs(grads.params.offset_head[0].weight).sum()),
    "weight_head": float(np.abs(grads.params.weight_head[0].weight).sum()),
    "ffn": float(np.abs(grads.params.ffn.inner.weight).sum()),
}
print("gradient mass per head:", {k: round(v, 4) for k, v in leaf_norms.items()})
