"""Training toolkit for fine-grained image classification on lightweight
stage-partitioned CNN backbones.

Three cooperating mechanisms, each usable on its own:

- recursive mosaic augmentation (:mod:`mosaictrain.mosaic`): images whose
  granularity varies by training phase,
- multi-stage feature interaction (:mod:`mosaictrain.interaction`): a gated
  residual exchange between per-stage feature vectors,
- progressive multi-phase training (:mod:`mosaictrain.trainer`): one
  supervised phase per interacting stage plus a concatenation phase.

Evaluation utilities (:mod:`mosaictrain.evalkit`) cover combined-head
prediction, corruption robustness reports and per-stage class activation
maps. The :mod:`mosaictrain.cli` module ties everything into the
``mosaictrain`` command.
"""

from .data import make_synthetic, scan_dataset
from .evalkit import evaluate, gradcam, predict_concat, predict_mix
from .model import ModelSpec, MultiStageClassifier, build_model
from .mosaic import MosaicConfig, generate, replay
from .trainer import TrainConfig, build_schedule, fit

__version__ = "0.1.0"

__all__ = [
    "MosaicConfig", "generate", "replay",
    "ModelSpec", "MultiStageClassifier", "build_model",
    "TrainConfig", "build_schedule", "fit",
    "evaluate", "gradcam", "predict_concat", "predict_mix",
    "make_synthetic", "scan_dataset",
    "__version__",
]
