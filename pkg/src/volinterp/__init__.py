"""Unsupervised volumetric frame interpolation.

Two endpoint volumes go in; intermediate volumes at any ``t`` in [0, 1] come
out.  Training needs only the endpoints: virtual frames synthesized outside
and between them are pushed back to the endpoints and compared (cycle
consistency).
"""
from .augment import LabelVolume, augment_pair, cycle_step_with_labels, warp_labels
from .cycletrain import TrainConfig, TripleTime, cycle_step, make_virtual, sample_times, train
from .evalkit import EvalReport, evaluate_sequence, ncc_global, nmse, psnr, ssim3d
from .interp import (InterpolationRequest, extrapolate, instance_optimize, interpolate,
                     interpolate_linear_baseline, interpolate_sequence)
from .losses import LossBreakdown, charbonnier, dice_loss, grad_check, ncc_local, smoothness
from .nets import ModelBundle, init_bundle, load_bundle, save_bundle
from .preprocess import PhantomSpec, PreprocessSpec, phantom_pair, preprocess_pair
from .volcore import (ContractViolation, UVIVFormatError, Volume, downscale_field, read_uviv, resize_volume,
                      scale_field, spatial_gradient, warp, weighted_fuse, write_uviv)

__version__ = "0.1.0"
