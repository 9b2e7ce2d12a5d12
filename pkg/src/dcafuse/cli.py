"""Command-line entry point.

One JSON config document describes a run (the ``command`` field names it);
the few flags handle paths and overrides::

    dcafuse gradcheck  --config cfg.json --out runs/gc
    dcafuse train      --config cfg.json --out runs/t0
    dcafuse robustness --config cfg.json --out runs/grid --threads 2
    dcafuse genscene   --config cfg.json --out runs/scene0

Configs are validated fully before any side effect and are copied verbatim
into the output directory so every artifact is reproducible from its own
folder. Output directories are created atomically and never overwritten
unless --overwrite is given. --seed overrides the config's top-level seed;
--threads (or the DCAFUSE_THREADS environment variable) parallelizes the
robustness grid cells.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass

from . import gradcheck as gradcheck_mod
from . import tensorio, trainer
from .baseline import save_one_to_one_params
from .dca import DcaHyper, save_dca_params
from .diffcore import param_leaves
from .geometry import DisturbanceConfig
from .seeding import derive_seed
from .synthscene import GenerationError, LIDAR_FEATURE_DIM, SceneConfig, generate_scene, \
    save_scene

COMMANDS = ("gradcheck", "train", "robustness", "genscene")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int
    scene: SceneConfig
    train: trainer.TrainConfig
    disturbance: DisturbanceConfig
    hyper: DcaHyper
    fusion: str
    n_seeds: int
    n_train_scenes: int
    n_eval_scenes: int
    gradcheck_seeds: int
    raw_bytes: bytes


def default_config(command: str = "robustness", seed: int = 0) -> dict:
    """The shipped default run: the small desk-scale task the acceptance
    experiments use."""
    return {
        "command": command,
        "seed": seed,
        "scene": {
            "n_points": 384,
            "n_classes": 4,
            "n_cameras": 2,
            "image_px": 128,
            "texture_scale": 0.6,
            "noise_std": 0.6,
        },
        "train": {
            "epochs": 200,
            "batch_points": 384,
            "lr": 5e-3,
            "weight_decay": 0.01,
            "optimizer": "adamw",
        },
        "disturbance": {"probability": 0.5, "max_rot_deg": 2.0, "max_trans_m": 0.2},
        "attention": {
            "num_levels": 4,
            "num_directions": 4,
            "points_per_direction": 2,
            "channels": LIDAR_FEATURE_DIM,
        },
        "fusion": "dca_with_dqe",
        "n_seeds": 6,
        "n_train_scenes": 4,
        "n_eval_scenes": 2,
        "gradcheck_seeds": 20,
    }


def _require_keys(section: dict, allowed, path: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown field")


def _build_section(builder, data: dict, path: str):
    try:
        return builder(**data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(raw_bytes: bytes, command: str, seed_override=None) -> RunConfig:
    try:
        data = json.loads(raw_bytes.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a JSON object")
    _require_keys(
        data,
        {"command", "seed", "scene", "train", "disturbance", "attention", "fusion",
         "n_seeds", "n_train_scenes", "n_eval_scenes", "gradcheck_seeds"},
        "config",
    )
    if "command" in data and data["command"] != command:
        raise ConfigError(
            f"config.command: is {data['command']!r} but the CLI was invoked as {command!r}"
        )

    seed = int(data.get("seed", 0)) if seed_override is None else int(seed_override)
    defaults = default_config(command)

    scene_data = {**defaults["scene"], **data.get("scene", {})}
    _require_keys(scene_data, set(defaults["scene"]) | {"seed"}, "config.scene")
    scene_data.setdefault("seed", seed)
    scene = _build_section(SceneConfig, scene_data, "config.scene")

    dist_data = {**defaults["disturbance"], **data.get("disturbance", {})}
    _require_keys(dist_data, set(defaults["disturbance"]) | {"seed"}, "config.disturbance")
    dist_data.setdefault("seed", derive_seed(seed, "disturbance"))
    disturbance = _build_section(DisturbanceConfig, dist_data, "config.disturbance")

    train_data = {**defaults["train"], **data.get("train", {})}
    _require_keys(
        train_data, set(defaults["train"]) | {"seed", "with_disturbance"}, "config.train"
    )
    train_data.setdefault("seed", seed)
    # "with_disturbance": true trains under the config's disturbance protocol
    # (the robustness command manages this per grid cell itself).
    if train_data.pop("with_disturbance", False):
        train_data["train_disturbance"] = disturbance
    train = _build_section(trainer.TrainConfig, train_data, "config.train")

    hyper_data = {**defaults["attention"], **data.get("attention", {})}
    _require_keys(hyper_data, set(defaults["attention"]), "config.attention")
    hyper = _build_section(DcaHyper, hyper_data, "config.attention")

    fusion = data.get("fusion", defaults["fusion"])
    if fusion not in trainer.FUSION_KINDS:
        raise ConfigError(
            f"config.fusion: {fusion!r} is not one of {trainer.FUSION_KINDS}"
        )

    def _positive_int(name, minimum=1):
        value = data.get(name, defaults[name])
        if not isinstance(value, int) or value < minimum:
            raise ConfigError(f"config.{name}: must be an integer >= {minimum}")
        return value

    return RunConfig(
        command=command,
        seed=seed,
        scene=scene,
        train=train,
        disturbance=disturbance,
        hyper=hyper,
        fusion=fusion,
        n_seeds=_positive_int("n_seeds"),
        n_train_scenes=_positive_int("n_train_scenes"),
        n_eval_scenes=_positive_int("n_eval_scenes"),
        gradcheck_seeds=_positive_int("gradcheck_seeds"),
        raw_bytes=raw_bytes,
    )


def _prepare_out_dir(path: str, overwrite: bool, raw_config: bytes) -> None:
    try:
        os.makedirs(path, exist_ok=False)
    except FileExistsError:
        if not overwrite:
            raise ConfigError(
                f"output directory {path!r} exists; pass --overwrite to reuse it"
            ) from None
    with open(os.path.join(path, "config.json"), "wb") as fh:
        fh.write(raw_config)


# ---------------------------------------------------------------------------
# commands

def cmd_gradcheck(cfg: RunConfig, out_dir: str, checks=None) -> int:
    results = gradcheck_mod.run_suite(
        n_seeds=cfg.gradcheck_seeds, base_seed=cfg.seed, checks=checks
    )
    report = {
        "primitives": [
            {
                "name": r.name,
                "max_rel_err": r.max_rel_err,
                "tolerance": r.tolerance,
                "n_seeds": r.n_seeds,
                "passed": r.passed,
            }
            for r in results
        ],
        "all_passed": all(r.passed for r in results),
    }
    with open(os.path.join(out_dir, "gradcheck.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"gradcheck {r.name}: {status} (max rel err {r.max_rel_err:.3e}, "
              f"tol {r.tolerance:.0e}, {r.n_seeds} seeds)")
    failing = [r.name for r in results if not r.passed]
    if failing:
        print(f"gradient check FAILED for: {', '.join(failing)}", file=sys.stderr)
        return 1
    return 0


def cmd_train(cfg: RunConfig, out_dir: str) -> int:
    train_scenes, _ = trainer.make_scene_sets(
        cfg.scene, derive_seed(cfg.seed, "train-run"), cfg.n_train_scenes, 1
    )
    model, history = trainer.train_model(cfg.fusion, train_scenes, cfg.train, cfg.hyper)

    ckpt_dir = os.path.join(out_dir, "checkpoint")
    if model.kind == "one_to_one":
        save_one_to_one_params(os.path.join(ckpt_dir, "fusion"), model.params.fusion)
    else:
        save_dca_params(os.path.join(ckpt_dir, "fusion"), model.params.fusion)
    tensorio.save_param_groups(
        os.path.join(ckpt_dir, "head"),
        param_leaves(model.params.head, "head"),
        extra={"kind": "classifier_head", "n_classes": model.n_classes},
    )
    with open(os.path.join(out_dir, "history.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,accuracy\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['loss']!r},{row['accuracy']!r}\n")
    print(f"trained {model.kind}: final loss {history[-1]['loss']:.4f}, "
          f"train accuracy {history[-1]['accuracy']:.4f}")
    return 0


def cmd_robustness(cfg: RunConfig, out_dir: str, threads: int = 1) -> int:
    rows, summary = trainer.robustness_experiment(
        cfg.scene,
        cfg.train,
        cfg.disturbance,
        n_seeds=cfg.n_seeds,
        n_train_scenes=cfg.n_train_scenes,
        n_eval_scenes=cfg.n_eval_scenes,
        hyper=cfg.hyper,
        threads=threads,
    )
    trainer.write_report_csv(os.path.join(out_dir, "results.csv"), rows)
    trainer.write_summary_json(os.path.join(out_dir, "summary.json"), summary)
    print(trainer.format_grid(summary))
    print(f"total work time: {summary['wall_time_s_total']:.1f}s "
          f"({len(rows)} rows -> {out_dir})")
    return 0


def cmd_genscene(cfg: RunConfig, out_dir: str) -> int:
    scene = generate_scene(cfg.scene)
    save_scene(os.path.join(out_dir, "scene"), scene)
    counts = {int(c): int((scene.labels == c).sum()) for c in range(scene.n_classes)}
    print(f"scene: {scene.points.features.shape[0]} points, "
          f"{len(scene.rig)} cameras, class counts {counts}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcafuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the run's JSON config")
        p.add_argument("--out", required=True, help="output directory (created fresh)")
        p.add_argument("--overwrite", action="store_true",
                       help="reuse an existing output directory")
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("DCAFUSE_THREADS", "1")),
                       help="parallel grid cells (robustness only)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's top-level seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config, "rb") as fh:
            raw = fh.read()
        cfg = parse_config(raw, args.command, seed_override=args.seed)
        _prepare_out_dir(args.out, args.overwrite, raw)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "robustness":
            return cmd_robustness(cfg, args.out, threads=max(1, args.threads))
        return cmd_genscene(cfg, args.out)
    except trainer.TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except GenerationError as exc:
        print(f"scene generation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
