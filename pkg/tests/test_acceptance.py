"""Acceptance suite: one test per shipped guarantee, one printed verdict line
each (run with ``pytest -s tests/test_acceptance.py`` to see them).

The heavyweight pieces share module-scoped fixtures: the 20-seed gradient
suite and the full robustness grid (3 fusion variants x train/eval
disturbance on/off x 5 seeds on the default synthetic task).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import dcafuse.cli as cli
from dcafuse.baseline import OneToOneParams, one_to_one_fuse
from dcafuse.dca import (
    DcaHyper,
    FeaturePyramid,
    PointFeatureSet,
    dca_forward,
    init_dca_params,
    mean_valid_views,
    predict_weights,
)
from dcafuse.diffcore import AffineParams
from dcafuse.geometry import Camera, CameraRig, DisturbanceConfig, project
from dcafuse.gradcheck import _toy_rig, run_suite
from dcafuse.seeding import derive_rng, derive_seed
from dcafuse.synthscene import SceneConfig
from dcafuse.trainer import (
    TrainConfig,
    evaluate,
    make_scene_sets,
    robustness_experiment,
    train_model,
)

# The default experiment protocol (mirrors dcafuse.cli.default_config).
SCENE = SceneConfig()
TRAIN = TrainConfig(epochs=200, batch_points=384, lr=5e-3, seed=0)
DISTURBANCE = DisturbanceConfig(probability=0.5, max_rot_deg=2.0, max_trans_m=0.2, seed=0)
HYPER = DcaHyper(num_levels=4, num_directions=4, points_per_direction=2, channels=8)
N_SEEDS = 6


def verdict(number, name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {number} {name}: {status}" + (f" ({detail})" if detail else ""))
    return passed


@pytest.fixture(scope="module")
def gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(n_seeds=20)
    return results, time.perf_counter() - t0


@pytest.fixture(scope="module")
def grid():
    t0 = time.perf_counter()
    rows, summary = robustness_experiment(
        SCENE, TRAIN, DISTURBANCE, n_seeds=N_SEEDS,
        n_train_scenes=4, n_eval_scenes=2, hyper=HYPER,
    )
    return rows, summary, time.perf_counter() - t0


def test_1_gradient_suite(gradient_suite):
    results, runtime = gradient_suite
    worst = {r.name: r.max_rel_err for r in results}
    ok = all(r.passed for r in results) and runtime < 120.0
    detail = f"{len(results)} primitives, worst {max(worst.values()):.2e}, {runtime:.0f}s"
    assert verdict(1, "gradient suite (h=1e-4, 20 seeds, <2min)", ok, detail)
    for r in results:
        assert r.passed, f"{r.name}: {r.max_rel_err:.3e} >= {r.tolerance}"
    assert runtime < 120.0


def test_2_attention_weight_normalization():
    rng = derive_rng(0, "acceptance:weights")
    head = [AffineParams(rng.normal(size=(128, 16)), rng.normal(size=128))]
    queries = rng.normal(size=(10_000, 16)) * 3.0
    weights, _ = predict_weights(queries, head)
    err = np.abs(weights.sum(axis=1) - 1.0).max()
    ok = err < 1e-6 and np.all(weights >= 0)
    assert verdict(2, "attention weights sum to 1 (10k queries)", ok, f"max |sum-1| {err:.1e}")


def test_3_degeneracy_equivalence():
    # L=M=D=1, zero offsets, identity unifiers: the attended image value must
    # equal the one-to-one baseline's image half on random scenes.
    worst = 0.0
    hyper = DcaHyper(num_levels=1, num_directions=1, points_per_direction=1, channels=3)
    for trial in range(100):
        rng = derive_rng(trial, "acceptance:degeneracy")
        rig = _toy_rig(32)
        params = init_dca_params(rng, 3, [3], hyper, (32, 32))
        params.lidar_mlp = [AffineParams(np.eye(3), np.zeros(3))]
        params.level_unify = [AffineParams(np.eye(3), np.zeros(3))]
        params.offset_head[0].weight[:] = 0.0
        params.offset_head[0].bias[:] = 0.0
        params.weight_head[0].weight[:] = 0.0
        pyramids = [FeaturePyramid(levels=[rng.normal(size=(8, 8, 3))]) for _ in rig.cameras]
        points = PointFeatureSet(
            features=rng.normal(size=(12, 3)),
            coords=np.stack([rng.uniform(-0.6, 0.6, 12), rng.uniform(-0.6, 0.6, 12),
                             rng.uniform(-0.3, 0.3, 12)], axis=1),
        )
        _, cache = dca_forward(points, pyramids, rig, params)
        i_value = mean_valid_views(cache.per_view_values, cache.refs.valid)
        fuse = OneToOneParams(fuse=AffineParams(np.zeros((3, 6)), np.zeros(3)), level=0)
        _, bl = one_to_one_fuse(points, pyramids, rig, fuse)
        denom = max(1e-12, np.abs(bl["image_half"]).max())
        worst = max(worst, float(np.abs(i_value - bl["image_half"]).max() / denom))
    ok = worst <= 1e-6
    assert verdict(3, "degeneracy equals one-to-one image half (100 scenes)", ok,
                   f"worst rel err {worst:.2e}")


def test_4_scale_invariant_projection():
    rng = derive_rng(0, "acceptance:projection")
    cams = []
    for _ in range(3):
        from scipy.spatial.transform import Rotation

        rot = Rotation.from_rotvec(rng.uniform(-0.3, 0.3, size=3)).as_matrix()
        trans = rng.uniform(-0.4, 0.4, size=3) + [0, 0, 2.5]
        focal = rng.uniform(50.0, 120.0)
        intr = np.array([[focal, 0, 32.0], [0, focal, 48.0], [0, 0, 1.0]])
        proj = intr @ np.concatenate([rot, trans.reshape(3, 1)], axis=1)
        cams.append(Camera(proj=proj, width_px=64, height_px=96))
    rig = CameraRig(cameras=tuple(cams))
    pts = rng.uniform(-1.2, 1.2, size=(60, 3))
    refs = project(rig, pts)

    stride_err = 0.0
    for k, cam in enumerate(rig.cameras):
        for stride in (4, 8, 16, 32):
            size = np.array([cam.width_px // stride, cam.height_px // stride])
            roundtrip = (refs.coords[k] * size) / size
            stride_err = max(stride_err, float(np.abs(roundtrip - refs.coords[k]).max()))

    doubled = CameraRig(cameras=tuple(
        Camera(proj=np.diag([2.0, 2.0, 1.0]) @ c.proj,
               width_px=2 * c.width_px, height_px=2 * c.height_px)
        for c in rig.cameras
    ))
    refs2 = project(doubled, pts)
    same_mask = np.array_equal(refs.valid, refs2.valid)
    rescale_err = float(np.abs(refs.coords[refs.valid] - refs2.coords[refs.valid]).max())
    ok = stride_err < 1e-12 and rescale_err < 1e-12 and same_mask
    assert verdict(4, "scale-invariant projection (strides + x2 rescale)", ok,
                   f"stride err {stride_err:.1e}, rescale err {rescale_err:.1e}")


def _cell(summary, fusion, train_on, eval_on):
    on = lambda b: "on" if b else "off"
    return summary["cells"][f"{fusion}|train_{on(train_on)}|eval_{on(eval_on)}"]


def test_5_robustness_direction(grid):
    rows, summary, runtime = grid
    o2o = _cell(summary, "one_to_one", True, True)["loss_of_disturbance_mean"]
    dqe = _cell(summary, "dca_with_dqe", True, True)["loss_of_disturbance_mean"]
    ratio = o2o / max(dqe, 1e-12)
    ok = (o2o > dqe) and (ratio >= 1.5) and runtime < 900.0
    assert verdict(
        5, "disturbance hurts one-to-one >= 1.5x more than attention fusion", ok,
        f"drops {o2o:.3f} vs {dqe:.3f}, ratio {ratio:.2f}, grid {runtime:.0f}s",
    )


def test_6_query_enhancement_ablation(grid):
    rows, _, _ = grid
    paired = {}
    for kind in ("dca_with_dqe", "dca_no_dqe"):
        paired[kind] = np.array([
            r["accuracy"] for r in sorted(
                (r for r in rows if r["fusion"] == kind and r["train_dist"]
                 and not r["eval_dist"]), key=lambda r: r["seed"])
        ])
    diff = paired["dca_with_dqe"] - paired["dca_no_dqe"]
    mean_diff = float(diff.mean())
    std_diff = float(diff.std(ddof=1))
    outright = mean_diff >= 0.0
    tie = abs(mean_diff) <= std_diff
    ok = outright or tie
    note = "outright" if outright else ("tie within 1 std" if tie else "behind")
    assert verdict(
        6, "query enhancement keeps clean accuracy (disturbed training)", ok,
        f"mean diff {mean_diff:+.4f}, std {std_diff:.4f}, {note}",
    )


def test_7_offset_learning_gain():
    # The one-to-one mapping with and without offset learning: the same
    # degenerate single-sample configuration (L=M=D=1) is trained under the
    # disturbance protocol twice, once with the offset head frozen at its
    # zero initialization (exactly the fixed one-to-one lookup) and once with
    # the offsets learnable. Learned offsets must match or beat the fixed
    # mapping on mean clean accuracy.
    single = DcaHyper(num_levels=1, num_directions=1, points_per_direction=1,
                      channels=HYPER.channels)
    fixed_acc = []
    learned_acc = []
    for seed in range(N_SEEDS):
        master = derive_seed(seed, "acceptance:offset-gain")
        train_scenes, eval_scenes = make_scene_sets(SCENE, master, 4, 2)
        cfg = replace(
            TRAIN,
            seed=derive_seed(master, "train"),
            train_disturbance=replace(DISTURBANCE, seed=derive_seed(master, "td")),
        )
        model_fixed, _ = train_model(
            "dca_with_dqe", train_scenes, cfg, single, offset_lr_mult=0.0
        )
        model_learned, _ = train_model("dca_with_dqe", train_scenes, cfg, single)
        fixed_acc.append(evaluate(model_fixed, eval_scenes, None).accuracy)
        learned_acc.append(evaluate(model_learned, eval_scenes, None).accuracy)
    fixed_mean = float(np.mean(fixed_acc))
    learned_mean = float(np.mean(learned_acc))
    ok = learned_mean >= fixed_mean
    assert verdict(
        7, "learned single offset >= fixed zero-offset mapping (clean eval)", ok,
        f"learned {learned_mean:.4f} vs fixed {fixed_mean:.4f} over {N_SEEDS} seeds",
    )


def test_8_cli_determinism(tmp_path):
    import json

    config = {
        "seed": 3,
        "scene": {"n_points": 96, "n_classes": 4, "n_cameras": 2, "image_px": 64,
                  "texture_scale": 0.45, "noise_std": 0.3},
        "train": {"epochs": 3, "batch_points": 96, "lr": 5e-3,
                  "weight_decay": 0.01, "optimizer": "adamw"},
        "disturbance": {"probability": 0.5, "max_rot_deg": 2.0, "max_trans_m": 0.2},
        "attention": {"num_levels": 2, "num_directions": 2,
                      "points_per_direction": 1, "channels": 8},
        "n_seeds": 3,
        "n_train_scenes": 1,
        "n_eval_scenes": 1,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config))
    rc1 = cli.main(["robustness", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
    rc2 = cli.main(["robustness", "--config", str(cfg_path), "--out", str(tmp_path / "b")])
    csv_a = (tmp_path / "a" / "results.csv").read_bytes()
    csv_b = (tmp_path / "b" / "results.csv").read_bytes()
    ok = rc1 == 0 and rc2 == 0 and csv_a == csv_b
    assert verdict(8, "robustness rerun reproduces byte-identical CSV", ok,
                   f"{len(csv_a)} bytes")
