"""One-to-many cross-modal attention fusion with analytic gradients.

Pipeline per 3D point: project into each camera (geometry module), build a
query from the unified LiDAR feature and, optionally, the initially sampled
multi-level image features; predict per-level sampling offsets and softmax
attention weights from the query; sample the unified pyramid at the offset
locations; take the attention-weighted sum, average over valid camera views,
add to the raw LiDAR feature, and push the sum through a feed-forward block.

Offsets are expressed in normalized image units so a single prediction
addresses every pyramid level at the same physical location. The softmax
normalizes jointly over all levels * directions * points, making the sampled
value a convex combination.
"""

from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    AffineParams,
    FfnParams,
    LayerNormParams,
    affine_backward,
    affine_forward,
    bilinear_sample,
    bilinear_sample_backward,
    ffn_backward,
    ffn_forward,
    layer_norm_backward,
    layer_norm_forward,
    mlp_backward,
    mlp_forward,
    param_leaves,
    softmax_backward,
    softmax_forward,
)
from .geometry import CameraRig, project
from . import tensorio

PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass
class PointFeatureSet:
    features: np.ndarray  # (N, C)
    coords: np.ndarray    # (N, 3) meters

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.features.ndim != 2 or self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(
                f"expected features (N, C) and coords (N, 3), got "
                f"{self.features.shape} and {self.coords.shape}"
            )
        if self.features.shape[0] != self.coords.shape[0]:
            raise ValueError("features and coords disagree on N")


@dataclass
class FeaturePyramid:
    """One camera's multi-level feature maps at strides 4, 8, 16, 32."""

    levels: list  # level l: (H / stride_l, W / stride_l, C_l)

    def __post_init__(self):
        self.levels = [np.asarray(m, dtype=np.float64) for m in self.levels]
        for i, m in enumerate(self.levels):
            if m.ndim != 3:
                raise ValueError(f"pyramid level {i} must be (H, W, C), got {m.shape}")


def validate_pyramid(pyr: FeaturePyramid, width_px: int, height_px: int, num_levels: int):
    if len(pyr.levels) < num_levels:
        raise ValueError(f"pyramid has {len(pyr.levels)} levels, need {num_levels}")
    for l in range(num_levels):
        s = PYRAMID_STRIDES[l]
        expect = (height_px // s, width_px // s)
        got = pyr.levels[l].shape[:2]
        if got != expect:
            raise ValueError(
                f"pyramid level {l} is {got}, expected {expect} for stride {s} "
                f"on a {width_px}x{height_px} image"
            )


@dataclass(frozen=True)
class DcaHyper:
    num_levels: int           # pyramid levels fused, 1..4
    num_directions: int       # offset directions per level
    points_per_direction: int # sample points along each direction
    channels: int             # unified feature width

    def __post_init__(self):
        if not 1 <= self.num_levels <= 4:
            raise ValueError("num_levels must be in 1..4")
        if self.num_directions < 1 or self.points_per_direction < 1 or self.channels < 1:
            raise ValueError("num_directions, points_per_direction, channels must be >= 1")

    @property
    def num_samples(self) -> int:
        return self.num_levels * self.num_directions * self.points_per_direction


@dataclass
class DcaParams:
    lidar_mlp: list            # AffineParams stack unifying raw features to C
    lidar_norm: LayerNormParams
    level_unify: list          # one AffineParams (1x1 conv) per level
    level_norms: list          # one LayerNormParams per level (query image half)
    offset_head: list          # AffineParams stack -> num_samples * 2
    weight_head: list          # AffineParams stack -> num_samples
    ffn: FfnParams
    hyper: DcaHyper
    use_query_enhancement: bool = True

    @property
    def query_width(self) -> int:
        return 2 * self.hyper.channels if self.use_query_enhancement else self.hyper.channels


@dataclass
class OffsetField:
    """Dense predicted offsets/weights; rows for invalid (point, camera) pairs are zero."""

    offsets: np.ndarray  # (N, K, num_samples, 2) normalized units
    weights: np.ndarray  # (N, K, num_samples)


@dataclass
class DcaGrads:
    features: np.ndarray  # (N, C); None when input grads were skipped
    pyramids: list        # per camera, per level grad maps; None when skipped
    params: DcaParams     # same structure, gradient values


@dataclass
class DcaCache:
    params: DcaParams
    refs: object
    valid_idx: list
    unify_cache: object
    lidar_unified: np.ndarray
    per_camera: list
    per_view_values: np.ndarray
    view_count: np.ndarray
    ffn_cache: object
    offset_field: OffsetField
    n_points: int = field(default=0)


def init_dca_params(
    rng: np.random.Generator,
    lidar_channels: int,
    level_channels,
    hyper: DcaHyper,
    image_size_px,
    use_query_enhancement: bool = True,
    ffn_hidden: int | None = None,
    offset_init_px: float = float(PYRAMID_STRIDES[0]),
) -> DcaParams:
    """Build trainable parameters.

    The offset head's final layer starts at zero weights with biases laid out
    as ``num_directions`` equally spaced directions at radii of 1..D ring
    steps of ``offset_init_px`` image pixels (converted to normalized units
    via ``image_size_px``), so step 0 probes a symmetric neighborhood around
    the projected reference point. The default ring step is one stride-4
    pixel. The weight head starts at zero, giving uniform initial attention.
    """
    c = hyper.channels
    w_px, h_px = image_size_px
    level_channels = list(level_channels)
    if len(level_channels) < hyper.num_levels:
        raise ValueError("need a channel count for every fused level")

    def glorot(out_w, in_w):
        scale = np.sqrt(6.0 / (in_w + out_w))
        return AffineParams(
            weight=rng.uniform(-scale, scale, size=(out_w, in_w)),
            bias=np.zeros(out_w),
        )

    lidar_mlp = [glorot(c, lidar_channels), glorot(c, c)]
    lidar_norm = LayerNormParams(gamma=np.ones(c), beta=np.zeros(c))
    level_unify = [glorot(c, level_channels[l]) for l in range(hyper.num_levels)]
    level_norms = [
        LayerNormParams(gamma=np.ones(c), beta=np.zeros(c)) for _ in range(hyper.num_levels)
    ]

    qw = 2 * c if use_query_enhancement else c
    j = hyper.num_samples
    offset_bias = np.zeros((hyper.num_levels, hyper.num_directions, hyper.points_per_direction, 2))
    thetas = 2.0 * np.pi * np.arange(hyper.num_directions) / hyper.num_directions
    radii_px = offset_init_px * (1.0 + np.arange(hyper.points_per_direction))
    offset_bias[..., 0] = np.cos(thetas)[:, np.newaxis] * radii_px / w_px
    offset_bias[..., 1] = np.sin(thetas)[:, np.newaxis] * radii_px / h_px
    offset_head = [AffineParams(weight=np.zeros((j * 2, qw)), bias=offset_bias.reshape(-1))]
    weight_head = [AffineParams(weight=np.zeros((j, qw)), bias=np.zeros(j))]

    hidden = 2 * c if ffn_hidden is None else ffn_hidden
    ffn = FfnParams(inner=glorot(hidden, c), outer=glorot(c, hidden))
    # Rectifier units start alive; an all-negative hidden layer cannot recover.
    ffn.inner.bias[:] = 0.1
    lidar_mlp[0].bias[:] = 0.1
    return DcaParams(
        lidar_mlp=lidar_mlp,
        lidar_norm=lidar_norm,
        level_unify=level_unify,
        level_norms=level_norms,
        offset_head=offset_head,
        weight_head=weight_head,
        ffn=ffn,
        hyper=hyper,
        use_query_enhancement=use_query_enhancement,
    )


# ---------------------------------------------------------------------------
# channel unification

def unify_channels(pyramids, points: PointFeatureSet, params: DcaParams):
    """Bring image levels and LiDAR features to a common width C.

    Returns (unified maps per camera per level, unified LiDAR features, cache).
    The LiDAR side is layer-normalized (it feeds queries directly); image maps
    get the per-level 1x1 affine only, with normalization applied later on
    sampled vectors.
    """
    L = params.hyper.num_levels
    map_caches = []
    unified = []
    for pyr in pyramids:
        cam_maps = []
        cam_caches = []
        for l in range(L):
            raw = pyr.levels[l]
            if raw.shape[2] != params.level_unify[l].weight.shape[1]:
                raise ValueError(
                    f"level {l} has {raw.shape[2]} channels, unifier expects "
                    f"{params.level_unify[l].weight.shape[1]}"
                )
            out, cache = affine_forward(raw, params.level_unify[l])
            cam_maps.append(out)
            cam_caches.append(cache)
        unified.append(cam_maps)
        map_caches.append(cam_caches)

    pre_norm, mlp_cache = mlp_forward(points.features, params.lidar_mlp)
    lidar_unified, ln_cache = layer_norm_forward(pre_norm, params.lidar_norm)
    return unified, lidar_unified, (map_caches, mlp_cache, ln_cache, L)


def unify_channels_backward(grad_maps, grad_lidar, cache):
    """grad_maps: per camera per level (or None for untouched maps)."""
    map_caches, mlp_cache, ln_cache, L = cache
    grad_pyramids = []
    grad_unify = None
    for k, cam_caches in enumerate(map_caches):
        cam_grads = []
        for l in range(L):
            g = grad_maps[k][l] if grad_maps[k] is not None else None
            if g is None:
                raw_shape = cam_caches[l][0].shape
                cam_grads.append(np.zeros(raw_shape))
                continue
            graw, gp = affine_backward(g, cam_caches[l])
            cam_grads.append(graw)
            if grad_unify is None:
                grad_unify = [
                    AffineParams(np.zeros_like(c[1].weight), np.zeros_like(c[1].bias))
                    for c in cam_caches
                ]
            grad_unify[l].weight += gp.weight
            grad_unify[l].bias += gp.bias
        grad_pyramids.append(cam_grads)
    if grad_unify is None:
        grad_unify = [
            AffineParams(np.zeros_like(c[1].weight), np.zeros_like(c[1].bias))
            for c in map_caches[0]
        ]

    grad_pre, grad_norm = layer_norm_backward(grad_lidar, ln_cache)
    grad_features, grad_mlp = mlp_backward(grad_pre, mlp_cache)
    return grad_pyramids, grad_features, grad_mlp, grad_norm, grad_unify


# ---------------------------------------------------------------------------
# query construction

def enhance_query(lidar_rows, image_samples, level_norms):
    """Concatenate the normalized LiDAR feature with the mean of the
    per-level normalized image samples: (V, C) + L x (V, C) -> (V, 2C)."""
    L = len(image_samples)
    normed = []
    caches = []
    for l in range(L):
        t, c = layer_norm_forward(image_samples[l], level_norms[l])
        normed.append(t)
        caches.append(c)
    image_half = sum(normed) / L
    query = np.concatenate([lidar_rows, image_half], axis=1)
    return query, (caches, L, lidar_rows.shape[1])


def enhance_query_backward(grad_query, cache):
    caches, L, c = cache
    grad_lidar = grad_query[:, :c]
    g_mean = grad_query[:, c:]
    grad_samples = []
    grad_norms = []
    for l in range(L):
        gs, gn = layer_norm_backward(g_mean / L, caches[l])
        grad_samples.append(gs)
        grad_norms.append(gn)
    return grad_lidar, grad_samples, grad_norms


# ---------------------------------------------------------------------------
# offset / weight heads

def predict_offsets(query, offset_head, hyper: DcaHyper):
    """(V, query_width) -> (V, num_samples, 2); raw affine-stack output, no
    final activation (offsets may be negative)."""
    raw, cache = mlp_forward(query, offset_head)
    v = raw.shape[0]
    return raw.reshape(v, hyper.num_samples, 2), cache


def predict_offsets_backward(grad_offsets, cache):
    v = grad_offsets.shape[0]
    grad_query, grad_head = mlp_backward(grad_offsets.reshape(v, -1), cache)
    return grad_query, grad_head


def predict_weights(query, weight_head):
    """(V, query_width) -> (V, num_samples) softmax attention weights
    normalized jointly over all levels, directions and points."""
    logits, mlp_cache = mlp_forward(query, weight_head)
    weights, sm_cache = softmax_forward(logits)
    return weights, (mlp_cache, sm_cache)


def predict_weights_backward(grad_weights, cache):
    mlp_cache, sm_cache = cache
    grad_logits = softmax_backward(grad_weights, sm_cache)
    grad_query, grad_head = mlp_backward(grad_logits, mlp_cache)
    return grad_query, grad_head


# ---------------------------------------------------------------------------
# one-to-many sampling

def attend_one_to_many(level_maps, ref, offsets, weights):
    """Weighted sum of samples at ``ref + offset`` across levels.

    level_maps: L unified maps; ref (V, 2); offsets (V, J, 2); weights (V, J)
    with J = L * M * D laid out level-major. The same normalized location
    addresses every level (scale invariance). Returns (V, C) values.
    """
    L = len(level_maps)
    v, j, _ = offsets.shape
    if j % L != 0:
        raise ValueError(f"{j} samples do not divide over {L} levels")
    per_level = j // L
    c = level_maps[0].shape[2]
    locs = ref[:, np.newaxis, :] + offsets
    samples = np.empty((v, j, c))
    caches = []
    for l in range(L):
        sl = slice(l * per_level, (l + 1) * per_level)
        samples[:, sl], cache = bilinear_sample(level_maps[l], locs[:, sl])
        caches.append(cache)
    value = np.einsum("vj,vjc->vc", weights, samples)
    return value, (samples, weights, caches, per_level, L)


def attend_one_to_many_backward(grad_value, cache):
    samples, weights, caches, per_level, L = cache
    grad_weights = np.einsum("vc,vjc->vj", grad_value, samples)
    grad_samples = weights[..., np.newaxis] * grad_value[:, np.newaxis, :]
    grad_maps = []
    grad_offsets = np.empty(samples.shape[:2] + (2,))
    for l in range(L):
        sl = slice(l * per_level, (l + 1) * per_level)
        gmap, gloc = bilinear_sample_backward(grad_samples[:, sl], caches[l])
        grad_maps.append(gmap)
        grad_offsets[:, sl] = gloc
    grad_ref = grad_offsets.sum(axis=1)
    return grad_maps, grad_ref, grad_offsets, grad_weights


# ---------------------------------------------------------------------------
# valid-view mean

def mean_valid_views(per_view_values, valid):
    """Mean over valid camera views; zero vector where no view is valid.

    per_view_values: (K, C) or (K, N, C), valid: (K,) or (K, N).
    """
    values = np.asarray(per_view_values, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    squeeze = values.ndim == 2
    if squeeze:
        values = values[:, np.newaxis, :]
        valid = valid[:, np.newaxis]
    masked = np.where(valid[..., np.newaxis], values, 0.0)
    count = valid.sum(axis=0)
    denom = np.maximum(count, 1)
    mean = masked.sum(axis=0) / denom[:, np.newaxis]
    if squeeze:
        return mean[0]
    return mean


def mean_valid_views_backward(grad_mean, valid):
    valid = np.asarray(valid, dtype=bool)
    denom = np.maximum(valid.sum(axis=0), 1)
    scaled = grad_mean / denom[:, np.newaxis]
    return np.where(valid[..., np.newaxis], scaled[np.newaxis], 0.0)


# ---------------------------------------------------------------------------
# full operator

def dca_forward(points: PointFeatureSet, pyramids, rig: CameraRig, params: DcaParams):
    """Fuse image pyramids into point features; coords pass through unchanged.

    Returns (fused PointFeatureSet, cache for :func:`dca_backward`).
    """
    hyper = params.hyper
    n, c = points.features.shape
    if c != hyper.channels:
        raise ValueError(
            f"point features have {c} channels; the operator is configured for "
            f"{hyper.channels} (the raw feature is the residual source)"
        )
    if len(pyramids) != len(rig):
        raise ValueError(f"{len(pyramids)} pyramids for {len(rig)} cameras")
    for pyr, cam in zip(pyramids, rig.cameras):
        validate_pyramid(pyr, cam.width_px, cam.height_px, hyper.num_levels)

    refs = project(rig, points.coords)
    unified, lidar_unified, unify_cache = unify_channels(pyramids, points, params)

    k_cams = len(rig)
    j = hyper.num_samples
    per_view_values = np.zeros((k_cams, n, c))
    offs_dense = np.zeros((n, k_cams, j, 2))
    wts_dense = np.zeros((n, k_cams, j))
    valid_idx = []
    per_camera = []
    for k in range(k_cams):
        idx = np.flatnonzero(refs.valid[k])
        valid_idx.append(idx)
        if idx.size == 0:
            per_camera.append(None)
            continue
        ref_k = refs.coords[k, idx]
        init_caches = None
        if params.use_query_enhancement:
            init_samples = []
            init_caches = []
            for l in range(hyper.num_levels):
                s, cch = bilinear_sample(unified[k][l], ref_k)
                init_samples.append(s)
                init_caches.append(cch)
            query, q_cache = enhance_query(lidar_unified[idx], init_samples, params.level_norms)
        else:
            query, q_cache = lidar_unified[idx], None
        offsets, o_cache = predict_offsets(query, params.offset_head, hyper)
        weights, w_cache = predict_weights(query, params.weight_head)
        value, a_cache = attend_one_to_many(unified[k][: hyper.num_levels], ref_k, offsets, weights)
        per_view_values[k, idx] = value
        offs_dense[idx, k] = offsets
        wts_dense[idx, k] = weights
        per_camera.append(
            {"init": init_caches, "query": q_cache, "offsets": o_cache,
             "weights": w_cache, "attend": a_cache}
        )

    i_value = mean_valid_views(per_view_values, refs.valid)
    fused_pre, ffn_cache = ffn_forward(points.features + i_value, params.ffn)

    cache = DcaCache(
        params=params,
        refs=refs,
        valid_idx=valid_idx,
        unify_cache=unify_cache,
        lidar_unified=lidar_unified,
        per_camera=per_camera,
        per_view_values=per_view_values,
        view_count=refs.valid.sum(axis=0),
        ffn_cache=ffn_cache,
        offset_field=OffsetField(offsets=offs_dense, weights=wts_dense),
        n_points=n,
    )
    return PointFeatureSet(features=fused_pre, coords=points.coords), cache


def dca_backward(grad_fused, cache: DcaCache, need_input_grads: bool = True) -> DcaGrads:
    """Exact gradients for (lidar features, pyramid maps, all parameters).

    ``need_input_grads=False`` skips the raw-map and feature gradients (the
    parameter gradients are always produced), which is what training needs.
    """
    if cache is None:
        raise RuntimeError("dca_backward called without a forward cache")
    params = cache.params
    hyper = params.hyper
    grad_fused = np.asarray(grad_fused, dtype=np.float64)
    n = cache.n_points
    c = hyper.channels
    if grad_fused.shape != (n, c):
        raise ValueError(f"upstream gradient is {grad_fused.shape}, expected {(n, c)}")

    grad_z, grad_ffn = ffn_backward(grad_fused, cache.ffn_cache)
    grad_features = grad_z.copy()
    grad_per_view = mean_valid_views_backward(grad_z, cache.refs.valid)

    zero_head = lambda layers: [
        AffineParams(np.zeros_like(p.weight), np.zeros_like(p.bias)) for p in layers
    ]
    grad_offset_head = zero_head(params.offset_head)
    grad_weight_head = zero_head(params.weight_head)
    grad_level_norms = [
        LayerNormParams(np.zeros_like(p.gamma), np.zeros_like(p.beta), 0.0)
        for p in params.level_norms
    ]
    grad_lidar_unified = np.zeros_like(cache.lidar_unified)
    grad_maps = [None] * len(cache.per_camera)

    for k, cam_cache in enumerate(cache.per_camera):
        if cam_cache is None:
            continue
        idx = cache.valid_idx[k]
        grad_value = grad_per_view[k, idx]
        g_maps, _g_ref, g_offsets, g_weights = attend_one_to_many_backward(
            grad_value, cam_cache["attend"]
        )
        gq_w, gh_w = predict_weights_backward(g_weights, cam_cache["weights"])
        gq_o, gh_o = predict_offsets_backward(g_offsets, cam_cache["offsets"])
        for dst, src in ((grad_weight_head, gh_w), (grad_offset_head, gh_o)):
            for layer, g in zip(dst, src):
                layer.weight += g.weight
                layer.bias += g.bias
        grad_query = gq_w + gq_o

        if params.use_query_enhancement:
            g_lidar_rows, g_init, g_norms = enhance_query_backward(
                grad_query, cam_cache["query"]
            )
            for l in range(hyper.num_levels):
                grad_level_norms[l].gamma += g_norms[l].gamma
                grad_level_norms[l].beta += g_norms[l].beta
                gmap, _ = bilinear_sample_backward(g_init[l], cam_cache["init"][l])
                g_maps[l] += gmap
        else:
            g_lidar_rows = grad_query
        np.add.at(grad_lidar_unified, idx, g_lidar_rows)
        grad_maps[k] = g_maps

    grad_pyramids, grad_feat_q, grad_mlp, grad_norm, grad_unify = unify_channels_backward(
        grad_maps, grad_lidar_unified, cache.unify_cache
    )
    grad_features += grad_feat_q

    grad_params = DcaParams(
        lidar_mlp=grad_mlp,
        lidar_norm=grad_norm,
        level_unify=grad_unify,
        level_norms=grad_level_norms,
        offset_head=grad_offset_head,
        weight_head=grad_weight_head,
        ffn=grad_ffn,
        hyper=hyper,
        use_query_enhancement=params.use_query_enhancement,
    )
    if not need_input_grads:
        return DcaGrads(features=None, pyramids=None, params=grad_params)
    return DcaGrads(features=grad_features, pyramids=grad_pyramids, params=grad_params)


# ---------------------------------------------------------------------------
# checkpoints

def save_dca_params(directory, params: DcaParams) -> str:
    extra = {
        "kind": "dca",
        "hyper": {
            "num_levels": params.hyper.num_levels,
            "num_directions": params.hyper.num_directions,
            "points_per_direction": params.hyper.points_per_direction,
            "channels": params.hyper.channels,
        },
        "use_query_enhancement": bool(params.use_query_enhancement),
        "layer_norm_eps": float(params.lidar_norm.eps),
        "stack_sizes": {
            "lidar_mlp": len(params.lidar_mlp),
            "level_unify": len(params.level_unify),
            "offset_head": len(params.offset_head),
            "weight_head": len(params.weight_head),
        },
    }
    return tensorio.save_param_groups(directory, param_leaves(params), extra=extra)


def load_dca_params(directory) -> DcaParams:
    arrays, manifest = tensorio.load_param_groups(directory)
    hyper = DcaHyper(**manifest["hyper"])
    eps = manifest["layer_norm_eps"]
    sizes = manifest["stack_sizes"]

    def stack(name, count):
        return [
            AffineParams(weight=arrays[f"{name}.{i}.weight"], bias=arrays[f"{name}.{i}.bias"])
            for i in range(count)
        ]

    level_norms = [
        LayerNormParams(
            gamma=arrays[f"level_norms.{i}.gamma"], beta=arrays[f"level_norms.{i}.beta"], eps=eps
        )
        for i in range(hyper.num_levels)
    ]
    return DcaParams(
        lidar_mlp=stack("lidar_mlp", sizes["lidar_mlp"]),
        lidar_norm=LayerNormParams(
            gamma=arrays["lidar_norm.gamma"], beta=arrays["lidar_norm.beta"], eps=eps
        ),
        level_unify=stack("level_unify", sizes["level_unify"]),
        level_norms=level_norms,
        offset_head=stack("offset_head", sizes["offset_head"]),
        weight_head=stack("weight_head", sizes["weight_head"]),
        ffn=FfnParams(
            inner=AffineParams(arrays["ffn.inner.weight"], arrays["ffn.inner.bias"]),
            outer=AffineParams(arrays["ffn.outer.weight"], arrays["ffn.outer.bias"]),
        ),
        hyper=hyper,
        use_query_enhancement=manifest["use_query_enhancement"],
    )
