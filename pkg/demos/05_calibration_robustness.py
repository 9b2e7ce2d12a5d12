#!/usr/bin/env python3
"""The headline experiment, shrunk to a couple of minutes.

Three fusion variants are trained under the calibration-disturbance protocol
(each camera independently perturbed every epoch with 50% probability,
rotation within 2 degrees, translation within 20 cm) and evaluated on
held-out scenes with clean and disturbed calibration:

  one_to_one    fixed stride-4 concatenation at the projected pixel
  dca_no_dqe    one-to-many attention, query from the LiDAR feature only
  dca_with_dqe  one-to-many attention with the enhanced query

"Loss of disturbance" is a trained model's clean-eval accuracy minus its
disturbed-eval accuracy. The fixed one-to-one lookup has no way to adapt to
pose error, so its loss is the largest; the full grid (the `dcafuse
robustness` command and the acceptance suite) runs 5 seeds, this demo runs 3.

Expect roughly 4-6 minutes of CPU time.
"""

from dcafuse.geometry import DisturbanceConfig
from dcafuse.synthscene import SceneConfig
from dcafuse.trainer import TrainConfig, format_grid, robustness_experiment
from dcafuse.dca import DcaHyper

rows, summary = robustness_experiment(
    SceneConfig(),
    TrainConfig(epochs=200, batch_points=384, lr=5e-3, seed=0),
    DisturbanceConfig(probability=0.5, max_rot_deg=2.0, max_trans_m=0.2, seed=0),
    n_seeds=3,
    n_train_scenes=3,
    n_eval_scenes=2,
    hyper=DcaHyper(num_levels=4, num_directions=4, points_per_direction=2, channels=8),
)

print(format_grid(summary))

o2o = summary["cells"]["one_to_one|train_on|eval_on"]["loss_of_disturbance_mean"]
dqe = summary["cells"]["dca_with_dqe|train_on|eval_on"]["loss_of_disturbance_mean"]
nod = summary["cells"]["dca_no_dqe|train_on|eval_on"]["loss_of_disturbance_mean"]
print(f"\nloss of disturbance, trained under the protocol:")
print(f"  one_to_one   {o2o:+.3f}")
print(f"  dca_no_dqe   {nod:+.3f}")
print(f"  dca_with_dqe {dqe:+.3f}   -> one-to-one loses {o2o / max(dqe, 1e-9):.1f}x more")
