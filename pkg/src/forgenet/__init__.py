"""Two-stream patch-level image forgery detection, built on a small
self-contained float64 autodiff core.

The package splits into: `autodiff` (tensors, ops, backward), `optim`
(Adam), `srm` (fixed noise-residual frontend), `model` (the two-stream
network), `supervision` (patch labels, pseudo-labels, losses), `data`
(synthetic forgery corpus), `metrics` (AUC/ACC, saliency maps, reports),
`train` (training/evaluation harness) and `cli` (command-line surface).
"""

from .autodiff import Tensor, backward, finite_diff_check
from .model import ModelConfig, TwoStreamModel
from .optim import ParamStore, adam_step

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_check",
    "ModelConfig",
    "TwoStreamModel",
    "ParamStore",
    "adam_step",
]

__version__ = "0.1.0"
