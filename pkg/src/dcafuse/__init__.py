"""dcafuse: one-to-many LiDAR-camera feature fusion with analytic gradients.

The package splits into:

- :mod:`dcafuse.geometry` — camera rigs, [0,1]-normalized projection,
  randomized calibration disturbance;
- :mod:`dcafuse.diffcore` — differentiable primitives (affine, layer norm,
  softmax, bilinear sampling, feed-forward) with hand-written backwards and a
  finite-difference oracle;
- :mod:`dcafuse.dca` — the one-to-many cross-attention fusion operator;
- :mod:`dcafuse.baseline` — the calibration-fixed one-to-one comparator;
- :mod:`dcafuse.synthscene` — procedural multi-view scenes whose labels are
  recoverable only from image texture;
- :mod:`dcafuse.trainer` — optimizers, training loop, and the
  calibration-robustness experiment grid;
- :mod:`dcafuse.gradcheck` — finite-difference verification of every
  backward pass;
- :mod:`dcafuse.cli` — the ``dcafuse`` command.
"""

from .baseline import OneToOneParams, one_to_one_backward, one_to_one_fuse
from .dca import (
    DcaHyper,
    DcaParams,
    FeaturePyramid,
    OffsetField,
    PointFeatureSet,
    attend_one_to_many,
    dca_backward,
    dca_forward,
    enhance_query,
    init_dca_params,
    load_dca_params,
    mean_valid_views,
    predict_offsets,
    predict_weights,
    save_dca_params,
    unify_channels,
)
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
    finite_diff_grad,
    layer_norm_backward,
    layer_norm_forward,
    softmax_backward,
    softmax_forward,
)
from .geometry import (
    Camera,
    CameraRig,
    DisturbanceConfig,
    ReferencePointSet,
    disturb_calibration,
    load_rig,
    project,
    save_rig,
    to_homogeneous,
)
from .synthscene import (
    GenerationError,
    LabeledScene,
    SceneConfig,
    generate_scene,
    load_scene,
    pool_pyramid,
    save_scene,
)
from .trainer import (
    ExperimentReport,
    FusionModel,
    TrainConfig,
    TrainingError,
    adamw_step,
    cross_entropy_loss,
    evaluate,
    robustness_experiment,
    sgd_step,
    train_model,
)

__version__ = "0.1.0"
