"""Deformable 3D image registration with selective state-space scan blocks.

The package layers a minimal float64 autodiff engine (`autodiff`, `spatial`)
under selective-scan kernels (`ssm`), a six-direction volumetric cross-scan
block (`crossscan`), and a U-shaped registration network (`network`). Field
algebra (`fields`), losses and metrics (`losses`, `metrics`), a synthetic
pair generator (`synth`, `volio`), and a training loop (`train`) complete the
pipeline; `cli` exposes it as the `scanreg` command.
"""

from .autodiff import Tape, Tensor, backward, grad_check, parameter
from .config import RunConfig
from .fields import compose, jacobian_det, recursive_register, warp
from .metrics import MetricsReport, dice_score, hd95, njd_pct
from .network import NetConfig, RegistrationModel, load_checkpoint, save_checkpoint
from .synth import PairSample, gen_base, gen_pair, random_smooth_field

__all__ = [
    "Tape", "Tensor", "backward", "grad_check", "parameter",
    "RunConfig", "NetConfig", "RegistrationModel",
    "load_checkpoint", "save_checkpoint",
    "compose", "jacobian_det", "recursive_register", "warp",
    "MetricsReport", "dice_score", "hd95", "njd_pct",
    "PairSample", "gen_base", "gen_pair", "random_smooth_field",
]

__version__ = "0.1.0"
