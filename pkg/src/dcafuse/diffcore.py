"""Differentiable primitives with hand-written backward passes.

Every forward returns ``(output, cache)``; the matching ``*_backward`` takes
the upstream gradient plus the cache and returns exact analytic gradients.
There is no computation graph: callers compose backwards in reverse order
themselves. All arithmetic is float64.

Bilinear sampling convention: normalized coordinates ``uv`` in [0, 1]^2 map
to continuous pixel coordinates ``px = u * W - 0.5``, ``py = v * H - 0.5``
(pixel centers at integer px), and the four neighbor indices are clamped to
the map border, so out-of-range samples saturate. ``grad_uv`` differentiates
the blend through the un-clamped fractional weights; gradient mass for
clamped corners accumulates on border pixels.
"""

from dataclasses import dataclass, fields, is_dataclass, replace

import numpy as np


@dataclass
class AffineParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5


@dataclass
class FfnParams:
    inner: AffineParams  # widen
    outer: AffineParams  # project back


# ---------------------------------------------------------------------------
# affine

def affine_forward(x, p: AffineParams):
    """y = x W^T + b over the trailing axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.weight.shape[1]:
        raise ValueError(
            f"affine input width {x.shape[-1]} != weight in-width {p.weight.shape[1]}"
        )
    y = x @ p.weight.T + p.bias
    return y, (x, p)


def affine_backward(grad_out, cache):
    x, p = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_x = grad_out @ p.weight
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grad_p = AffineParams(weight=g2.T @ x2, bias=g2.sum(axis=0))
    return grad_x, grad_p


# ---------------------------------------------------------------------------
# layer normalization (per-row over the trailing axis)

def layer_norm_forward(x, p: LayerNormParams):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mu) * inv_std
    y = p.gamma * xhat + p.beta
    return y, (xhat, inv_std, p)


def layer_norm_backward(grad_out, cache):
    xhat, inv_std, p = cache
    g = np.asarray(grad_out, dtype=np.float64)
    gflat = g.reshape(-1, g.shape[-1])
    xflat = xhat.reshape(-1, xhat.shape[-1])
    grad_p = LayerNormParams(
        gamma=(gflat * xflat).sum(axis=0),
        beta=gflat.sum(axis=0),
        eps=0.0,
    )
    dxhat = g * p.gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    grad_x = inv_std * (dxhat - m1 - xhat * m2)
    return grad_x, grad_p


# ---------------------------------------------------------------------------
# softmax (rows over the trailing axis), max-stabilized

def softmax_forward(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    return probs, probs


def softmax_backward(grad_out, cache):
    probs = cache
    g = np.asarray(grad_out, dtype=np.float64)
    inner = (g * probs).sum(axis=-1, keepdims=True)
    return probs * (g - inner)


# ---------------------------------------------------------------------------
# bilinear sampling

def bilinear_sample(feature_map, uv):
    """Sample an (H, W, C) map at normalized locations ``uv`` of shape (..., 2).

    Returns values of shape (..., C). Exact at pixel centers; saturates at
    the border for out-of-range locations.
    """
    fmap = np.asarray(feature_map, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    h, w, _ = fmap.shape
    px = uv[..., 0] * w - 0.5
    py = uv[..., 1] * h - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    xc0 = np.clip(x0i, 0, w - 1)
    xc1 = np.clip(x0i + 1, 0, w - 1)
    yc0 = np.clip(y0i, 0, h - 1)
    yc1 = np.clip(y0i + 1, 0, h - 1)
    v00 = fmap[yc0, xc0]
    v01 = fmap[yc0, xc1]
    v10 = fmap[yc1, xc0]
    v11 = fmap[yc1, xc1]
    fx_ = fx[..., np.newaxis]
    fy_ = fy[..., np.newaxis]
    out = (
        v00 * (1.0 - fx_) * (1.0 - fy_)
        + v01 * fx_ * (1.0 - fy_)
        + v10 * (1.0 - fx_) * fy_
        + v11 * fx_ * fy_
    )
    cache = (fmap.shape, fx, fy, (yc0, xc0, yc1, xc1), (v00, v01, v10, v11))
    return out, cache


def bilinear_sample_backward(grad_out, cache):
    """Returns (grad_map, grad_uv)."""
    map_shape, fx, fy, idx, vals = cache
    yc0, xc0, yc1, xc1 = idx
    v00, v01, v10, v11 = vals
    h, w, _ = map_shape
    g = np.asarray(grad_out, dtype=np.float64)
    fx_ = fx[..., np.newaxis]
    fy_ = fy[..., np.newaxis]

    grad_map = np.zeros(map_shape)
    np.add.at(grad_map, (yc0, xc0), g * (1.0 - fx_) * (1.0 - fy_))
    np.add.at(grad_map, (yc0, xc1), g * fx_ * (1.0 - fy_))
    np.add.at(grad_map, (yc1, xc0), g * (1.0 - fx_) * fy_)
    np.add.at(grad_map, (yc1, xc1), g * fx_ * fy_)

    d_dfx = (v01 - v00) * (1.0 - fy_) + (v11 - v10) * fy_
    d_dfy = (v10 - v00) * (1.0 - fx_) + (v11 - v01) * fx_
    grad_px = (g * d_dfx).sum(axis=-1)
    grad_py = (g * d_dfy).sum(axis=-1)
    grad_uv = np.stack([grad_px * w, grad_py * h], axis=-1)
    return grad_map, grad_uv


# ---------------------------------------------------------------------------
# rectified-linear MLP stacks and the transformer-style feed-forward block

def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x


def relu_backward(grad_out, cache):
    # Subgradient at exactly 0 is defined as 0.
    return np.asarray(grad_out) * (cache > 0.0)


def mlp_forward(x, layers):
    """Affine stack with rectified-linear units between layers (none after the last)."""
    caches = []
    out = x
    for i, layer in enumerate(layers):
        out, acache = affine_forward(out, layer)
        rcache = None
        if i < len(layers) - 1:
            out, rcache = relu_forward(out)
        caches.append((acache, rcache))
    return out, caches


def mlp_backward(grad_out, caches):
    grad = grad_out
    grad_layers = [None] * len(caches)
    for i in range(len(caches) - 1, -1, -1):
        acache, rcache = caches[i]
        if rcache is not None:
            grad = relu_backward(grad, rcache)
        grad, grad_layers[i] = affine_backward(grad, acache)
    return grad, grad_layers


def ffn_forward(x, p: FfnParams):
    """affine -> rectified-linear -> affine; any residual is the caller's."""
    a, c1 = affine_forward(x, p.inner)
    hdn, cr = relu_forward(a)
    out, c2 = affine_forward(hdn, p.outer)
    return out, (c1, cr, c2)


def ffn_backward(grad_out, cache):
    c1, cr, c2 = cache
    g, grad_outer = affine_backward(grad_out, c2)
    g = relu_backward(g, cr)
    grad_x, grad_inner = affine_backward(g, c1)
    return grad_x, FfnParams(inner=grad_inner, outer=grad_outer)


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_diff_grad(f, x, h=1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function: (f(x+h e_i) - f(x-h e_i)) / 2h."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# parameter trees
#
# Parameter containers are (possibly nested) dataclasses, lists and tuples
# whose leaves are numpy arrays. Non-array fields (ints, floats such as the
# layer-norm eps, bools, strings) are configuration, not learnable state, and
# are carried through unchanged.

def param_leaves(tree, prefix=""):
    """Deterministic (name, array) pairs for every array leaf."""
    out = []
    if isinstance(tree, np.ndarray):
        out.append((prefix or "param", tree))
    elif is_dataclass(tree):
        for f in fields(tree):
            name = f"{prefix}.{f.name}" if prefix else f.name
            out.extend(param_leaves(getattr(tree, f.name), name))
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            name = f"{prefix}.{i}" if prefix else str(i)
            out.extend(param_leaves(item, name))
    return out


def flatten_params(tree) -> np.ndarray:
    leaves = param_leaves(tree)
    if not leaves:
        return np.zeros(0)
    return np.concatenate([arr.reshape(-1) for _, arr in leaves])


def unflatten_params(template, vec):
    """Rebuild a tree shaped like ``template`` from a flat vector."""
    vec = np.asarray(vec, dtype=np.float64)
    pos = 0

    def rebuild(node):
        nonlocal pos
        if isinstance(node, np.ndarray):
            n = node.size
            out = vec[pos:pos + n].reshape(node.shape).copy()
            pos += n
            return out
        if is_dataclass(node):
            return replace(
                node, **{f.name: rebuild(getattr(node, f.name)) for f in fields(node)
                         if _holds_arrays(getattr(node, f.name))}
            )
        if isinstance(node, list):
            return [rebuild(item) for item in node]
        if isinstance(node, tuple):
            return tuple(rebuild(item) for item in node)
        return node

    rebuilt = rebuild(template)
    if pos != vec.size:
        raise ValueError(f"flat vector length {vec.size} does not match template ({pos})")
    return rebuilt


def _holds_arrays(node) -> bool:
    if isinstance(node, np.ndarray):
        return True
    if is_dataclass(node):
        return any(_holds_arrays(getattr(node, f.name)) for f in fields(node))
    if isinstance(node, (list, tuple)):
        return any(_holds_arrays(item) for item in node)
    return False


def tree_map(fn, tree):
    """Apply ``fn`` to every array leaf, preserving structure."""
    if isinstance(tree, np.ndarray):
        return fn(tree)
    if is_dataclass(tree):
        return replace(
            tree, **{f.name: tree_map(fn, getattr(tree, f.name)) for f in fields(tree)
                     if _holds_arrays(getattr(tree, f.name))}
        )
    if isinstance(tree, list):
        return [tree_map(fn, item) for item in tree]
    if isinstance(tree, tuple):
        return tuple(tree_map(fn, item) for item in tree)
    return tree


def zeros_like_tree(tree):
    return tree_map(np.zeros_like, tree)


def tree_add(a, b):
    """Elementwise sum of two identically-structured trees."""
    flat = flatten_params(a) + flatten_params(b)
    return unflatten_params(a, flat)
