"""Finite-difference verification of every analytic backward pass.

Each registered check builds a seeded random problem, evaluates the analytic
gradient of a scalar loss through the backward pass under test, recomputes it
with central differences (h = 1e-4), and reports the maximum relative error.
Inputs are nudged away from rectifier kinks and pixel-boundary kinks so the
finite differences measure the smooth branch the analytic gradient reports.

Tolerances: 1e-4 for single primitives, 1e-3 for composed operators.
"""

from dataclasses import dataclass

import numpy as np

from . import baseline, dca, diffcore
from .geometry import Camera, CameraRig
from .seeding import derive_rng, derive_seed

FD_STEP = 1e-4
PRIMITIVE_RTOL = 1e-4
COMPOSED_RTOL = 1e-3
# A parameter step of h moves sampling locations by at most a few 1e-4 px on
# the toy maps; half a percent of a pixel keeps every location on one smooth
# branch of the interpolation.
_KINK_MARGIN_PX = 5e-3
_KINK_MARGIN_RELU = 1e-2
_MAX_INV_STD = 20.0  # reject near-constant layer-norm rows (curvature blows up)


def max_relative_error(analytic, numeric) -> float:
    """Per-coordinate |a - n| / max(|a| + |n|, floor), maximized.

    The floor is tied to the overall gradient scale so that central-difference
    truncation noise (~1e-8 at unit scale) on true-zero coordinates does not
    register as error.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    scale = max(1.0, float(np.abs(a).max()), float(np.abs(n).max()))
    denom = np.maximum(np.abs(a) + np.abs(n), 1e-3 * scale)
    return float((np.abs(a - n) / denom).max())


def _loss_grad_pair(forward, backward, inputs, rng):
    """Check d(sum(out * r))/d(inputs) for a forward/backward pair.

    ``inputs`` is any parameter tree; forward maps the tree to an output
    array; backward maps the upstream gradient to an identically-structured
    gradient tree.
    """
    out0 = forward(inputs)
    r = rng.normal(size=out0.shape)
    analytic = backward(r)

    flat0 = diffcore.flatten_params(inputs)

    def scalar(vec):
        return float(np.sum(forward(diffcore.unflatten_params(inputs, vec)) * r))

    numeric = diffcore.finite_diff_grad(scalar, flat0.copy(), h=FD_STEP)
    return max_relative_error(diffcore.flatten_params(analytic), numeric)


# ---------------------------------------------------------------------------
# primitive checks

def check_affine(seed: int) -> float:
    rng = derive_rng(seed, "gradcheck:affine")
    x = rng.normal(size=(4, 3))
    p = diffcore.AffineParams(weight=rng.normal(size=(5, 3)), bias=rng.normal(size=5))
    inputs = (x, p)

    cache = {}

    def forward(t):
        out, cache["c"] = diffcore.affine_forward(t[0], t[1])
        return out

    def backward(r):
        forward(inputs)
        gx, gp = diffcore.affine_backward(r, cache["c"])
        return (gx, gp)

    return _loss_grad_pair(forward, backward, inputs, rng)


def check_layer_norm(seed: int) -> float:
    rng = derive_rng(seed, "gradcheck:layer_norm")
    x = rng.normal(size=(4, 6))
    p = diffcore.LayerNormParams(gamma=rng.normal(size=6) + 1.0, beta=rng.normal(size=6))
    inputs = (x, p)
    cache = {}

    def forward(t):
        out, cache["c"] = diffcore.layer_norm_forward(t[0], t[1])
        return out

    def backward(r):
        forward(inputs)
        gx, gp = diffcore.layer_norm_backward(r, cache["c"])
        return (gx, gp)

    return _loss_grad_pair(forward, backward, inputs, rng)


def check_softmax(seed: int) -> float:
    rng = derive_rng(seed, "gradcheck:softmax")
    logits = rng.normal(size=(5, 7)) * 2.0
    cache = {}

    def forward(t):
        out, cache["c"] = diffcore.softmax_forward(t)
        return out

    def backward(r):
        forward(logits)
        return diffcore.softmax_backward(r, cache["c"])

    return _loss_grad_pair(forward, backward, logits, rng)


def _kink_safe_uv(rng, count, w, h, margin=0.05):
    """Normalized sample locations whose pixel coordinates keep ``margin``
    of a pixel away from the bilinear kinks at integer px."""
    px = rng.uniform(-1.5, w + 0.5, size=count)
    py = rng.uniform(-1.5, h + 0.5, size=count)
    for arr in (px, py):
        frac = arr - np.floor(arr)
        low = frac < margin
        high = frac > 1.0 - margin
        arr[low] += margin
        arr[high] -= margin
    return np.stack([(px + 0.5) / w, (py + 0.5) / h], axis=1)


def check_bilinear(seed: int) -> float:
    rng = derive_rng(seed, "gradcheck:bilinear")
    fmap = rng.normal(size=(6, 5, 3))
    uv = _kink_safe_uv(rng, 20, w=5, h=6)
    inputs = (fmap, uv)
    cache = {}

    def forward(t):
        out, cache["c"] = diffcore.bilinear_sample(t[0], t[1])
        return out

    def backward(r):
        forward(inputs)
        gm, guv = diffcore.bilinear_sample_backward(r, cache["c"])
        return (gm, guv)

    return _loss_grad_pair(forward, backward, inputs, rng)


def _relu_safe(preacts, margin=_KINK_MARGIN_RELU) -> bool:
    return all(np.abs(a).min() > margin for a in preacts if a.size)


def check_ffn(seed: int) -> float:
    for attempt in range(20):
        rng = derive_rng(seed, f"gradcheck:ffn:{attempt}")
        x = rng.normal(size=(4, 5))
        p = diffcore.FfnParams(
            inner=diffcore.AffineParams(rng.normal(size=(7, 5)) * 0.7, rng.normal(size=7)),
            outer=diffcore.AffineParams(rng.normal(size=(5, 7)) * 0.7, rng.normal(size=5)),
        )
        _, (c1, cr, _c2) = diffcore.ffn_forward(x, p)
        if _relu_safe([cr]):
            break
    inputs = (x, p)
    cache = {}

    def forward(t):
        out, cache["c"] = diffcore.ffn_forward(t[0], t[1])
        return out

    def backward(r):
        forward(inputs)
        gx, gp = diffcore.ffn_backward(r, cache["c"])
        return (gx, gp)

    return _loss_grad_pair(forward, backward, inputs, rng)


def check_mlp(seed: int) -> float:
    for attempt in range(20):
        rng = derive_rng(seed, f"gradcheck:mlp:{attempt}")
        x = rng.normal(size=(3, 4))
        layers = [
            diffcore.AffineParams(rng.normal(size=(6, 4)) * 0.7, rng.normal(size=6)),
            diffcore.AffineParams(rng.normal(size=(5, 6)) * 0.7, rng.normal(size=5)),
        ]
        _, caches = diffcore.mlp_forward(x, layers)
        if _relu_safe([c for _, rc in caches if rc is not None for c in [rc]]):
            break
    inputs = (x, layers)
    cache = {}

    def forward(t):
        out, cache["c"] = diffcore.mlp_forward(t[0], t[1])
        return out

    def backward(r):
        forward(inputs)
        gx, glayers = diffcore.mlp_backward(r, cache["c"])
        return (gx, glayers)

    return _loss_grad_pair(forward, backward, inputs, rng)


def check_cross_entropy(seed: int) -> float:
    from .trainer import cross_entropy_loss

    rng = derive_rng(seed, "gradcheck:cross_entropy")
    logits = rng.normal(size=(6, 4)) * 2.0
    labels = rng.integers(0, 4, size=6)
    _, analytic = cross_entropy_loss(logits, labels)

    def scalar(vec):
        return float(cross_entropy_loss(vec.reshape(6, 4), labels)[0])

    numeric = diffcore.finite_diff_grad(scalar, logits.reshape(-1).copy(), h=FD_STEP)
    return max_relative_error(analytic.reshape(-1), numeric)


# ---------------------------------------------------------------------------
# composed operators on a toy two-camera scene

def _toy_rig(image_px: int = 32) -> CameraRig:
    intr = np.array(
        [[float(image_px), 0.0, image_px / 2.0],
         [0.0, float(image_px), image_px / 2.0],
         [0.0, 0.0, 1.0]]
    )
    cams = []
    for angle in (0.12, np.pi * 0.5 + 0.2):
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        look = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])  # y down, z forward
        r = look @ rot
        t = np.array([0.0, 0.2, 2.0])
        cams.append(Camera(proj=intr @ np.concatenate([r, t.reshape(3, 1)], axis=1),
                           width_px=image_px, height_px=image_px))
    return CameraRig(cameras=tuple(cams))


def _toy_problem(rng, use_query_enhancement: bool = True):
    # Deliberately tiny: the end-to-end finite-difference sweep walks every
    # map pixel and every parameter, so dimensions dominate suite runtime.
    image_px = 32
    rig = _toy_rig(image_px)
    hyper = dca.DcaHyper(num_levels=2, num_directions=2, points_per_direction=1, channels=3)
    pyramids = []
    for _ in range(len(rig)):
        levels = [
            rng.normal(size=(image_px // s, image_px // s, 2))
            for s in dca.PYRAMID_STRIDES[: hyper.num_levels]
        ]
        pyramids.append(dca.FeaturePyramid(levels=levels))
    coords = np.stack(
        [rng.uniform(-0.6, 0.6, size=3), rng.uniform(-0.6, 0.6, size=3),
         rng.uniform(-0.3, 0.3, size=3)], axis=1
    )
    points = dca.PointFeatureSet(features=rng.normal(size=(3, 3)), coords=coords)
    params = dca.init_dca_params(
        rng, lidar_channels=3, level_channels=[2, 2], hyper=hyper,
        image_size_px=(image_px, image_px), use_query_enhancement=use_query_enhancement,
    )
    # Non-degenerate heads so query gradients are exercised.
    params.offset_head[0].weight = rng.normal(size=params.offset_head[0].weight.shape) * 0.02
    params.weight_head[0].weight = rng.normal(size=params.weight_head[0].weight.shape) * 0.3
    # Generous biases keep rectifier rows alive; a fully dead row would make a
    # pre-normalization row exactly constant, which finite differences cannot
    # handle (see _dca_kink_safe).
    params.lidar_mlp[0].bias[:] = 0.5
    params.lidar_mlp[1].bias[:] = rng.normal(size=3) * 0.2
    return points, pyramids, rig, params


def _dca_kink_safe(cache: dca.DcaCache) -> bool:
    fracs = []
    norm_caches = []
    for cam in cache.per_camera:
        if cam is None:
            continue
        bil_caches = list(cam["attend"][2])
        if cam["init"] is not None:
            bil_caches.extend(cam["init"])
        for c in bil_caches:
            _, fx, fy, _, _ = c
            fracs.extend([fx.reshape(-1), fy.reshape(-1)])
        if cam["query"] is not None:
            norm_caches.extend(cam["query"][0])
    if not fracs:
        return False
    frac = np.concatenate(fracs)
    if min(frac.min(), (1.0 - frac).min()) < _KINK_MARGIN_PX:
        return False
    relus = []
    _, mlp_cache, lidar_ln_cache, _ = cache.unify_cache
    relus.extend(rc for _, rc in mlp_cache if rc is not None)
    relus.append(cache.ffn_cache[1])
    if not _relu_safe(relus):
        return False
    # Degenerate (near-constant) rows put layer norm where its curvature
    # explodes and central differences stop measuring the analytic branch.
    norm_caches.append(lidar_ln_cache)
    return all(float(c[1].max()) < _MAX_INV_STD for c in norm_caches)


def check_dca(seed: int, use_query_enhancement: bool = True) -> float:
    """End-to-end check of dca_forward/dca_backward: gradients w.r.t. raw
    lidar features, every raw pyramid map, and every parameter group."""
    label = "gradcheck:dca" + ("" if use_query_enhancement else ":nodqe")
    for attempt in range(100):
        rng = derive_rng(seed, f"{label}:{attempt}")
        points, pyramids, rig, params = _toy_problem(rng, use_query_enhancement)
        fused, cache = dca.dca_forward(points, pyramids, rig, params)
        if _dca_kink_safe(cache) and all(i.size for i in cache.valid_idx):
            break
    else:
        raise RuntimeError(f"no kink-safe configuration found for seed {seed}")
    r = rng.normal(size=fused.features.shape)

    grads = dca.dca_backward(r, cache)
    analytic = (grads.features, grads.pyramids, grads.params)

    maps = [list(p.levels) for p in pyramids]
    inputs = (points.features, maps, params)
    flat0 = diffcore.flatten_params(inputs)

    def scalar(vec):
        feats, m, prm = diffcore.unflatten_params(inputs, vec)
        pyrs = [dca.FeaturePyramid(levels=lv) for lv in m]
        out, _ = dca.dca_forward(
            dca.PointFeatureSet(features=feats, coords=points.coords), pyrs, rig, prm
        )
        return float(np.sum(out.features * r))

    numeric = diffcore.finite_diff_grad(scalar, flat0.copy(), h=FD_STEP)

    grad_maps = [[grads.pyramids[k][l] for l in range(params.hyper.num_levels)]
                 + [np.zeros_like(m) for m in maps[k][params.hyper.num_levels:]]
                 for k in range(len(maps))]
    analytic_flat = diffcore.flatten_params((grads.features, grad_maps, grads.params))
    return max_relative_error(analytic_flat, numeric)


def check_dca_no_dqe(seed: int) -> float:
    return check_dca(seed, use_query_enhancement=False)


def check_one_to_one(seed: int) -> float:
    rng = derive_rng(seed, "gradcheck:one_to_one")
    points_, pyramids, rig, _ = _toy_problem(rng)
    c_lidar = points_.features.shape[1]
    c_img = pyramids[0].levels[0].shape[2]
    params = baseline.OneToOneParams(
        fuse=diffcore.AffineParams(
            rng.normal(size=(c_lidar, c_lidar + c_img)) * 0.5, rng.normal(size=c_lidar)
        ),
        level=0,
    )
    fused, cache = baseline.one_to_one_fuse(points_, pyramids, rig, params)
    r = rng.normal(size=fused.features.shape)
    gf, gp, gparams = baseline.one_to_one_backward(r, cache)

    maps = [list(p.levels) for p in pyramids]
    inputs = (points_.features, maps, params)
    flat0 = diffcore.flatten_params(inputs)

    def scalar(vec):
        feats, m, prm = diffcore.unflatten_params(inputs, vec)
        pyrs = [dca.FeaturePyramid(levels=lv) for lv in m]
        out, _ = baseline.one_to_one_fuse(
            dca.PointFeatureSet(features=feats, coords=points_.coords), pyrs, rig, prm
        )
        return float(np.sum(out.features * r))

    numeric = diffcore.finite_diff_grad(scalar, flat0.copy(), h=FD_STEP)
    analytic_flat = diffcore.flatten_params((gf, gp, gparams))
    return max_relative_error(analytic_flat, numeric)


# ---------------------------------------------------------------------------
# suite

@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    n_seeds: int
    passed: bool


DEFAULT_CHECKS = {
    "affine": (check_affine, PRIMITIVE_RTOL),
    "layer_norm": (check_layer_norm, PRIMITIVE_RTOL),
    "softmax": (check_softmax, PRIMITIVE_RTOL),
    "bilinear_sample": (check_bilinear, PRIMITIVE_RTOL),
    "ffn": (check_ffn, PRIMITIVE_RTOL),
    "mlp": (check_mlp, PRIMITIVE_RTOL),
    "cross_entropy": (check_cross_entropy, PRIMITIVE_RTOL),
    "one_to_one_fuse": (check_one_to_one, COMPOSED_RTOL),
    "dca": (check_dca, COMPOSED_RTOL),
    "dca_no_dqe": (check_dca_no_dqe, COMPOSED_RTOL),
}


def run_suite(n_seeds: int = 20, base_seed: int = 0, checks=None):
    """Run every registered check over ``n_seeds`` seeds; returns CheckResults."""
    checks = DEFAULT_CHECKS if checks is None else checks
    results = []
    for name, (fn, rtol) in checks.items():
        worst = 0.0
        for i in range(n_seeds):
            worst = max(worst, fn(derive_seed(base_seed, f"suite:{name}:{i}")))
        results.append(
            CheckResult(
                name=name, max_rel_err=worst, tolerance=rtol,
                n_seeds=n_seeds, passed=worst < rtol,
            )
        )
    return results
