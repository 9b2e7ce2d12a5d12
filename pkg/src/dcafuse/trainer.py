"""Training loop, classification head, and the calibration-robustness grid.

The 3D detector of a full perception stack is replaced by a per-point linear
classification head on the fused features. Three fusion variants are
compared: ``one_to_one`` (calibration-fixed concatenation baseline),
``dca_no_dqe`` (one-to-many attention with the query built from the LiDAR
feature only), and ``dca_with_dqe`` (query enhanced with the initially
sampled image features).

"Loss of disturbance" for a trained model is its clean-calibration accuracy
minus its disturbed-calibration accuracy on held-out scenes. The robustness
grid runs {fusion} x {train disturbance on/off} x {eval disturbance on/off}
over several seeds and reports per-cell means and standard deviations.

Everything is deterministic given the config seeds: scene seeds, per-epoch
disturbance draws, and batch shuffles are all derived streams.
"""

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .baseline import OneToOneParams, one_to_one_backward, one_to_one_fuse
from .dca import (
    DcaHyper,
    DcaParams,
    PointFeatureSet,
    dca_backward,
    dca_forward,
    init_dca_params,
)
from .diffcore import AffineParams, affine_backward, affine_forward, flatten_params, \
    param_leaves, unflatten_params
from .geometry import DisturbanceConfig, disturb_calibration
from .seeding import derive_rng, derive_seed

FUSION_KINDS = ("one_to_one", "dca_no_dqe", "dca_with_dqe")
SGD_MOMENTUM = 0.9
SGD_WEIGHT_DECAY = 1e-4


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_points: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    train_disturbance: DisturbanceConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_points < 1:
            raise ValueError("epochs and batch_points must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")


@dataclass
class ExperimentReport:
    accuracy: float
    loss_of_disturbance: float
    per_class_accuracy: np.ndarray
    wall_time_s: float


@dataclass
class ModelParams:
    fusion: object  # OneToOneParams or DcaParams
    head: AffineParams


@dataclass
class FusionModel:
    kind: str
    params: ModelParams
    n_classes: int


# ---------------------------------------------------------------------------
# optimizers (flat parameter vectors)

def adamw_step(params, grads, state, lr, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected moments with decoupled weight decay. Returns (params, state)."""
    if state is None:
        state = {"step": 0, "m": np.zeros_like(params), "v": np.zeros_like(params)}
    if state["m"].shape != params.shape:
        raise ValueError("optimizer state does not match parameter vector")
    b1, b2 = betas
    step = state["step"] + 1
    m = b1 * state["m"] + (1.0 - b1) * grads
    v = b2 * state["v"] + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    new = params - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * weight_decay * params
    return new, {"step": step, "m": m, "v": v}


def sgd_step(params, grads, state, lr, momentum=SGD_MOMENTUM, weight_decay=0.0):
    """Momentum SGD with L2 weight decay folded into the gradient."""
    if state is None:
        state = {"buf": np.zeros_like(params)}
    if state["buf"].shape != params.shape:
        raise ValueError("optimizer state does not match parameter vector")
    g = grads + weight_decay * params
    buf = momentum * state["buf"] + g
    return params - lr * buf, {"buf": buf}


def cross_entropy_loss(logits, labels):
    """Mean negative log-softmax of the true class. Returns (loss, grad_logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# model assembly

def default_hyper(channels: int) -> DcaHyper:
    """Sample budget used by the shipped experiments: all 4 levels, 4
    directions, 2 points per direction (32 offsets per view)."""
    return DcaHyper(
        num_levels=4, num_directions=4, points_per_direction=2, channels=channels
    )


# Ring-init step of the offset head in image pixels. Three stride-4 pixels:
# at the desk-scale camera geometry this spans roughly the disturbance
# protocol's projection shift, so the initial neighborhood probe covers the
# misalignment it has to learn to absorb.
OFFSET_INIT_PX = 12.0

# Offset-head updates run at a fraction of the base learning rate (standard
# deformable-attention practice). Offsets live in normalized image units, so
# full-rate AdamW steps can push a sample off the image within a few dozen
# steps; once every corner clamps to the same border pixel the location
# gradient vanishes and the sample never comes back.
OFFSET_LR_MULT = 0.25


def init_model(kind: str, scene, rng, hyper: DcaHyper | None = None) -> FusionModel:
    if kind not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
    feats = scene.points.features
    c_lidar = feats.shape[1]
    cam0 = scene.rig.cameras[0]
    level_channels = [m.shape[2] for m in scene.pyramids[0].levels]

    def glorot(out_w, in_w):
        scale = np.sqrt(6.0 / (in_w + out_w))
        return AffineParams(
            weight=rng.uniform(-scale, scale, size=(out_w, in_w)), bias=np.zeros(out_w)
        )

    if kind == "one_to_one":
        fusion = OneToOneParams(fuse=glorot(c_lidar, c_lidar + level_channels[0]), level=0)
        out_width = c_lidar
    else:
        hyper = hyper or default_hyper(c_lidar)
        if hyper.channels != c_lidar:
            raise ValueError(
                f"hyper.channels={hyper.channels} but scene features have {c_lidar} "
                "channels (the raw feature is the residual source)"
            )
        # A multi-sample ring starts wide enough to straddle the disturbance
        # scale; a single-sample configuration has no ring to speak of and
        # starts exactly at the calibration point.
        init_px = OFFSET_INIT_PX if hyper.num_samples > 1 else 0.0
        fusion = init_dca_params(
            rng,
            lidar_channels=c_lidar,
            level_channels=level_channels,
            hyper=hyper,
            image_size_px=(cam0.width_px, cam0.height_px),
            use_query_enhancement=(kind == "dca_with_dqe"),
            offset_init_px=init_px,
        )
        out_width = hyper.channels
    head = glorot(scene.n_classes, out_width)
    return FusionModel(kind=kind, params=ModelParams(fusion=fusion, head=head),
                       n_classes=scene.n_classes)


def model_forward(model: FusionModel, points: PointFeatureSet, pyramids, rig):
    if model.kind == "one_to_one":
        fused, fcache = one_to_one_fuse(points, pyramids, rig, model.params.fusion)
    else:
        fused, fcache = dca_forward(points, pyramids, rig, model.params.fusion)
    logits, hcache = affine_forward(fused.features, model.params.head)
    return logits, (fcache, hcache)


def model_backward(model: FusionModel, grad_logits, caches) -> ModelParams:
    fcache, hcache = caches
    grad_fused, grad_head = affine_backward(grad_logits, hcache)
    if model.kind == "one_to_one":
        _, _, grad_fusion = one_to_one_backward(grad_fused, fcache, need_input_grads=False)
    else:
        grad_fusion = dca_backward(grad_fused, fcache, need_input_grads=False).params
    return ModelParams(fusion=grad_fusion, head=grad_head)


# ---------------------------------------------------------------------------
# training and evaluation

def _epoch_rig(scene, cfg: TrainConfig, epoch: int, scene_idx: int):
    dist = cfg.train_disturbance
    if dist is None:
        return scene.rig
    seed = derive_seed(cfg.seed, f"train-dist:{dist.seed}:{epoch}:{scene_idx}")
    return disturb_calibration(scene.rig, replace(dist, seed=seed))


def train_model(
    fusion_kind: str,
    scenes,
    cfg: TrainConfig,
    hyper: DcaHyper | None = None,
    offset_lr_mult: float = OFFSET_LR_MULT,
):
    """Train one fusion variant on the given scenes.

    Scene rigs are re-disturbed independently every epoch when
    ``cfg.train_disturbance`` is set; the rendered pyramids always come from
    the true calibration, so disturbance misaligns sampling, not content.
    ``offset_lr_mult`` scales offset-head updates; 0.0 freezes the sampling
    offsets at their initialization (the fixed zero-offset configuration).
    Returns (FusionModel, history) where history has one
    ``{"epoch", "loss", "accuracy"}`` row per epoch.
    """
    if not scenes:
        raise ValueError("train_model needs at least one scene")
    model = init_model(fusion_kind, scenes[0], derive_rng(cfg.seed, "train:init"), hyper)
    template = model.params
    flat = flatten_params(template)
    state = None
    step = adamw_step if cfg.optimizer == "adamw" else sgd_step
    step_kwargs = (
        {"weight_decay": cfg.weight_decay}
        if cfg.optimizer == "adamw"
        else {"momentum": SGD_MOMENTUM, "weight_decay": cfg.weight_decay}
    )

    # Damp offset-head updates (see OFFSET_LR_MULT): blend the stepped vector
    # back toward the previous one on those coordinates, which implements a
    # per-group learning rate on top of any optimizer.
    offset_mask = np.zeros(flat.size, dtype=bool)
    pos = 0
    for name, arr in param_leaves(template):
        if name.startswith("fusion.offset_head"):
            offset_mask[pos:pos + arr.size] = True
        pos += arr.size

    history = []
    for epoch in range(cfg.epochs):
        losses = []
        hits = 0
        total = 0
        for si, scene in enumerate(scenes):
            rig = _epoch_rig(scene, cfg, epoch, si)
            n = scene.points.features.shape[0]
            order = derive_rng(cfg.seed, f"train:batch:{epoch}:{si}").permutation(n)
            for start in range(0, n, cfg.batch_points):
                sel = order[start:start + cfg.batch_points]
                batch = PointFeatureSet(
                    features=scene.points.features[sel], coords=scene.points.coords[sel]
                )
                labels = scene.labels[sel]
                logits, caches = model_forward(model, batch, scene.pyramids, rig)
                loss, grad_logits = cross_entropy_loss(logits, labels)
                if not np.isfinite(loss):
                    raise TrainingError(epoch, f"non-finite loss {loss}")
                grads = model_backward(model, grad_logits, caches)
                stepped, state = step(flat, flatten_params(grads), state, cfg.lr, **step_kwargs)
                if offset_mask.any() and offset_lr_mult != 1.0:
                    stepped[offset_mask] = (
                        flat[offset_mask]
                        + offset_lr_mult * (stepped[offset_mask] - flat[offset_mask])
                    )
                flat = stepped
                model.params = unflatten_params(template, flat)
                losses.append(loss)
                hits += int((logits.argmax(axis=1) == labels).sum())
                total += labels.size
        history.append(
            {"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": hits / total}
        )
    return model, history


def _accuracy(model, scenes, rigs):
    hits = 0
    total = 0
    per_class_hits = np.zeros(model.n_classes)
    per_class_total = np.zeros(model.n_classes)
    for scene, rig in zip(scenes, rigs):
        logits, _ = model_forward(model, scene.points, scene.pyramids, rig)
        pred = logits.argmax(axis=1)
        hits += int((pred == scene.labels).sum())
        total += scene.labels.size
        for cls in range(model.n_classes):
            mask = scene.labels == cls
            per_class_total[cls] += mask.sum()
            per_class_hits[cls] += (pred[mask] == cls).sum()
    per_class = np.where(per_class_total > 0, per_class_hits / np.maximum(per_class_total, 1), 0.0)
    return hits / total, per_class


EVAL_DISTURBANCE_DRAWS = 8


def evaluate(
    model: FusionModel,
    scenes,
    eval_disturbance: DisturbanceConfig | None = None,
    n_disturbance_draws: int = EVAL_DISTURBANCE_DRAWS,
):
    """Accuracy over held-out scenes under one calibration condition.

    Clean accuracy is always measured; when a disturbance is given, each
    scene's rig is disturbed under ``n_disturbance_draws`` fresh derived
    seeds and the disturbed accuracy is the draw average (a single draw is a
    very noisy estimate at 50% per-camera probability).
    ``loss_of_disturbance = clean - disturbed``; the ``accuracy`` field
    reports the requested condition.
    """
    t0 = time.perf_counter()
    clean_rigs = [s.rig for s in scenes]
    clean_acc, clean_per_class = _accuracy(model, scenes, clean_rigs)
    if eval_disturbance is None:
        return ExperimentReport(
            accuracy=clean_acc,
            loss_of_disturbance=0.0,
            per_class_accuracy=clean_per_class,
            wall_time_s=time.perf_counter() - t0,
        )
    accs = []
    per_classes = []
    for draw in range(n_disturbance_draws):
        rigs = [
            disturb_calibration(
                s.rig,
                replace(eval_disturbance,
                        seed=derive_seed(eval_disturbance.seed, f"eval-dist:{i}:{draw}")),
            )
            for i, s in enumerate(scenes)
        ]
        acc, per_class = _accuracy(model, scenes, rigs)
        accs.append(acc)
        per_classes.append(per_class)
    dist_acc = float(np.mean(accs))
    return ExperimentReport(
        accuracy=dist_acc,
        loss_of_disturbance=clean_acc - dist_acc,
        per_class_accuracy=np.mean(per_classes, axis=0),
        wall_time_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# robustness grid

def make_scene_sets(scene_cfg, master_seed: int, n_train: int, n_eval: int):
    """Generate disjoint train/eval scene sets; seeds are derived streams and
    asserted disjoint (no leakage)."""
    from .synthscene import generate_scene  # local import keeps module load light

    train_seeds = [derive_seed(master_seed, f"train-scene:{i}") for i in range(n_train)]
    eval_seeds = [derive_seed(master_seed, f"eval-scene:{i}") for i in range(n_eval)]
    if set(train_seeds) & set(eval_seeds):
        raise AssertionError("train and eval scene seeds overlap")
    train = [generate_scene(replace(scene_cfg, seed=s)) for s in train_seeds]
    held_out = [generate_scene(replace(scene_cfg, seed=s)) for s in eval_seeds]
    return train, held_out


def robustness_experiment(
    scene_cfg,
    train_cfg: TrainConfig,
    disturbance: DisturbanceConfig,
    n_seeds: int,
    n_train_scenes: int = 3,
    n_eval_scenes: int = 2,
    hyper: DcaHyper | None = None,
    fusion_kinds=FUSION_KINDS,
    threads: int = 1,
):
    """Run {fusion} x {train dist on/off} x {eval dist on/off} over n_seeds.

    One model is trained per (fusion, train_dist, seed) and evaluated under
    both calibration conditions, which is what the loss-of-disturbance metric
    requires. Returns (rows, summary): rows have one dict per grid cell and
    seed; summary carries per-cell means/stds plus wall times.
    """
    if n_seeds < 3:
        raise ValueError("robustness_experiment needs n_seeds >= 3")

    jobs = []
    for seed_idx in range(n_seeds):
        master = derive_seed(train_cfg.seed, f"grid-seed:{seed_idx}")
        train_scenes, eval_scenes = make_scene_sets(
            scene_cfg, master, n_train_scenes, n_eval_scenes
        )
        for kind in fusion_kinds:
            for dist_on in (False, True):
                jobs.append((seed_idx, master, kind, dist_on, train_scenes, eval_scenes))

    def run_job(job):
        seed_idx, master, kind, dist_on, train_scenes, eval_scenes = job
        t0 = time.perf_counter()
        cfg = replace(
            train_cfg,
            seed=derive_seed(master, f"train:{kind}:{int(dist_on)}"),
            train_disturbance=replace(
                disturbance, seed=derive_seed(master, f"train-dist:{kind}")
            ) if dist_on else None,
        )
        model, _ = train_model(kind, train_scenes, cfg, hyper)
        clean = evaluate(model, eval_scenes, None)
        disturbed = evaluate(
            model,
            eval_scenes,
            replace(disturbance, seed=derive_seed(master, f"eval-dist:{kind}:{int(dist_on)}")),
        )
        wall = time.perf_counter() - t0
        loss = disturbed.loss_of_disturbance
        return [
            {
                "fusion": kind,
                "train_dist": dist_on,
                "eval_dist": False,
                "seed": seed_idx,
                "accuracy": clean.accuracy,
                "loss_of_disturbance": loss,
                "wall_time_s": wall,
            },
            {
                "fusion": kind,
                "train_dist": dist_on,
                "eval_dist": True,
                "seed": seed_idx,
                "accuracy": disturbed.accuracy,
                "loss_of_disturbance": loss,
                "wall_time_s": wall,
            },
        ]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run_job, jobs))
    else:
        chunks = [run_job(job) for job in jobs]

    rows = [row for chunk in chunks for row in chunk]
    rows.sort(
        key=lambda r: (
            fusion_kinds.index(r["fusion"]), r["train_dist"], r["eval_dist"], r["seed"]
        )
    )
    return rows, summarize_rows(rows)


def _cell_key(row) -> str:
    on = lambda b: "on" if b else "off"
    return f"{row['fusion']}|train_{on(row['train_dist'])}|eval_{on(row['eval_dist'])}"


def summarize_rows(rows) -> dict:
    cells = {}
    for row in rows:
        cells.setdefault(_cell_key(row), []).append(row)
    summary = {"cells": {}}
    for key, group in sorted(cells.items()):
        acc = np.array([r["accuracy"] for r in group])
        loss = np.array([r["loss_of_disturbance"] for r in group])
        wall = np.array([r["wall_time_s"] for r in group])
        ddof = 1 if len(group) > 1 else 0
        summary["cells"][key] = {
            "n": len(group),
            "accuracy_mean": float(acc.mean()),
            "accuracy_std": float(acc.std(ddof=ddof)),
            "loss_of_disturbance_mean": float(loss.mean()),
            "loss_of_disturbance_std": float(loss.std(ddof=ddof)),
            "wall_time_s_mean": float(wall.mean()),
        }
    summary["wall_time_s_total"] = float(sum(r["wall_time_s"] for r in rows) / 2.0)
    return summary


REPORT_COLUMNS = ("fusion", "train_dist", "eval_dist", "seed", "accuracy", "loss_of_disturbance")


def write_report_csv(path, rows) -> None:
    """Deterministic per-cell CSV; identical configs and seeds reproduce the
    file byte for byte (wall times live in the JSON summary)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["fusion"],
                    "on" if row["train_dist"] else "off",
                    "on" if row["eval_dist"] else "off",
                    row["seed"],
                    repr(float(row["accuracy"])),
                    repr(float(row["loss_of_disturbance"])),
                ]
            )


def write_summary_json(path, summary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def format_grid(summary) -> str:
    """Human-readable table of the grid cells."""
    lines = [
        f"{'cell':<42} {'acc mean':>9} {'acc std':>8} {'loss mean':>10} {'loss std':>9}"
    ]
    for key, stats in summary["cells"].items():
        lines.append(
            f"{key:<42} {stats['accuracy_mean']:>9.4f} {stats['accuracy_std']:>8.4f} "
            f"{stats['loss_of_disturbance_mean']:>10.4f} {stats['loss_of_disturbance_std']:>9.4f}"
        )
    return "\n".join(lines)
