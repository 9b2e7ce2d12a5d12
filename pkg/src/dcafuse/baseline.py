"""One-to-one fusion comparator.

Each 3D point is paired with exactly the single image location its
calibration projection hits on one pyramid level (stride 4 by default): the
raw image feature is bilinearly sampled per valid view, averaged over views
(zero if none), concatenated with the LiDAR feature, and pushed through one
affine fusion layer. No offsets, no weights: the alignment is fixed entirely
by the calibration, which is what the robustness experiment stresses.
"""

from dataclasses import dataclass

import numpy as np

from .diffcore import AffineParams, affine_backward, affine_forward, bilinear_sample, \
    bilinear_sample_backward, param_leaves
from .dca import PointFeatureSet, mean_valid_views, mean_valid_views_backward, validate_pyramid
from .geometry import CameraRig, project
from . import tensorio


@dataclass
class OneToOneParams:
    fuse: AffineParams  # (lidar_channels + image_channels) -> out_channels
    level: int = 0      # pyramid level index; 0 = stride 4


def one_to_one_fuse(points: PointFeatureSet, pyramids, rig: CameraRig, params: OneToOneParams):
    """Returns (fused PointFeatureSet, cache). The cache exposes ``image_half``
    (the per-point view-averaged image feature) for equivalence checks."""
    if len(pyramids) != len(rig):
        raise ValueError(f"{len(pyramids)} pyramids for {len(rig)} cameras")
    for pyr, cam in zip(pyramids, rig.cameras):
        validate_pyramid(pyr, cam.width_px, cam.height_px, params.level + 1)
    n, c_lidar = points.features.shape
    c_img = pyramids[0].levels[params.level].shape[2]
    if params.fuse.weight.shape[1] != c_lidar + c_img:
        raise ValueError(
            f"fusion layer expects width {params.fuse.weight.shape[1]}, "
            f"inputs concatenate to {c_lidar + c_img}"
        )

    refs = project(rig, points.coords)
    k_cams = len(rig)
    per_view = np.zeros((k_cams, n, c_img))
    sample_caches = []
    valid_idx = []
    for k in range(k_cams):
        idx = np.flatnonzero(refs.valid[k])
        valid_idx.append(idx)
        if idx.size == 0:
            sample_caches.append(None)
            continue
        vals, cch = bilinear_sample(pyramids[k].levels[params.level], refs.coords[k, idx])
        per_view[k, idx] = vals
        sample_caches.append(cch)

    image_half = mean_valid_views(per_view, refs.valid)
    stacked = np.concatenate([points.features, image_half], axis=1)
    fused, fuse_cache = affine_forward(stacked, params.fuse)
    cache = {
        "refs": refs,
        "valid_idx": valid_idx,
        "sample_caches": sample_caches,
        "image_half": image_half,
        "fuse_cache": fuse_cache,
        "c_lidar": c_lidar,
        "level": params.level,
        "num_levels": [len(p.levels) for p in pyramids],
        "level_shapes": [[m.shape for m in p.levels] for p in pyramids],
    }
    return PointFeatureSet(features=fused, coords=points.coords), cache


def one_to_one_backward(grad_fused, cache, need_input_grads: bool = True):
    """Returns (grad_features, grad_pyramids, grad_params)."""
    if cache is None:
        raise RuntimeError("one_to_one_backward called without a forward cache")
    grad_stacked, grad_fuse = affine_backward(grad_fused, cache["fuse_cache"])
    c_lidar = cache["c_lidar"]
    grad_features = grad_stacked[:, :c_lidar]
    grad_params = OneToOneParams(fuse=grad_fuse, level=cache["level"])
    if not need_input_grads:
        return None, None, grad_params

    grad_image_half = grad_stacked[:, c_lidar:]
    grad_per_view = mean_valid_views_backward(grad_image_half, cache["refs"].valid)
    grad_pyramids = [
        [np.zeros(shape) for shape in shapes] for shapes in cache["level_shapes"]
    ]
    for k, cch in enumerate(cache["sample_caches"]):
        if cch is None:
            continue
        idx = cache["valid_idx"][k]
        gmap, _ = bilinear_sample_backward(grad_per_view[k, idx], cch)
        grad_pyramids[k][cache["level"]] += gmap
    return grad_features, grad_pyramids, grad_params


def save_one_to_one_params(directory, params: OneToOneParams) -> str:
    extra = {"kind": "one_to_one", "level": int(params.level)}
    return tensorio.save_param_groups(directory, param_leaves(params), extra=extra)


def load_one_to_one_params(directory) -> OneToOneParams:
    arrays, manifest = tensorio.load_param_groups(directory)
    return OneToOneParams(
        fuse=AffineParams(weight=arrays["fuse.weight"], bias=arrays["fuse.bias"]),
        level=int(manifest["level"]),
    )
