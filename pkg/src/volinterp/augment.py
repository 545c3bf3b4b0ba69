"""Label-carrying interpolation for segmentation data augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cycletrain import cycle_step
from .interp import _check_t, _tensor, interpolate
from .nets import flow_forward
from .volcore import ContractViolation, warp, weighted_fuse

SIMPLEX_TOL = 1e-5


@dataclass(frozen=True)
class LabelVolume:
    """K-channel soft labels ``(K, D, H, W)``; ``hard`` is their argmax."""

    soft: np.ndarray

    def __post_init__(self):
        soft = np.asarray(self.soft, dtype=np.float32)
        if soft.ndim != 4 or soft.shape[0] < 2:
            raise ContractViolation(f"soft labels must be (K>=2, D, H, W), got {soft.shape}")
        if soft.min() < 0 or np.abs(soft.sum(0) - 1).max() > SIMPLEX_TOL:
            raise ContractViolation("soft label channels must be non-negative and sum to 1")
        object.__setattr__(self, "soft", soft)

    @classmethod
    def from_hard(cls, hard, k=None):
        hard = np.asarray(hard)
        if not np.issubdtype(hard.dtype, np.integer):
            raise ContractViolation("hard labels must be integers")
        k = int(hard.max()) + 1 if k is None else int(k)
        if hard.min() < 0 or hard.max() >= k:
            raise ContractViolation(f"hard labels must lie in [0, {k - 1}]")
        return cls(np.eye(k, dtype=np.float32)[hard].transpose(3, 0, 1, 2))

    @property
    def k(self):
        return self.soft.shape[0]

    @property
    def hard(self):
        return self.soft.argmax(0).astype(np.int64)

    def tensor(self):
        return torch.as_tensor(self.soft)[None]


def renormalize(soft):
    return soft / soft.sum(1, keepdim=True)


def warp_soft(soft, flow):
    """Warp each soft channel and renormalize so channels sum to one."""
    return renormalize(warp(soft, flow))


def warp_labels(s: LabelVolume, flow) -> LabelVolume:
    with torch.no_grad():
        out = warp_soft(s.tensor(), flow)
    return LabelVolume(out[0].numpy())


def _check_vocab(s0, s1):
    if s0.k != s1.k:
        raise ContractViolation(f"label vocabularies differ: {s0.k} vs {s1.k} classes")
    if s0.soft.shape != s1.soft.shape:
        raise ContractViolation("label volumes have different shapes")


def augment_pair(bundle, i0, i1, s0: LabelVolume, s1: LabelVolume, t):
    """Image and label at time ``t``; labels follow the image flows, which are
    computed from the images alone."""
    t = _check_t(t)
    _check_vocab(s0, s1)
    a, b = _tensor(i0), _tensor(i1)
    if tuple(s0.soft.shape[1:]) != tuple(a.shape[2:]):
        raise ContractViolation("label and image shapes differ")
    image = interpolate(bundle, i0, i1, t)
    bundle.eval()
    with torch.no_grad():
        f01, f10 = flow_forward(bundle, a, b)
        l0 = warp_soft(s0.tensor(), f01 * t)
        l1 = warp_soft(s1.tensor(), f10 * (1 - t))
        fused = weighted_fuse(l0, l1, 1 - t, t)
    return image, LabelVolume(fused[0].numpy())


def cycle_step_with_labels(bundle, i0, i1, s0: LabelVolume, s1: LabelVolume, optimizer=None, cfg=None,
                           times=None):
    """``cycle_step`` plus a Dice term on the fused label candidates."""
    _check_vocab(s0, s1)
    return cycle_step(bundle, _tensor(i0), _tensor(i1), optimizer=optimizer, cfg=cfg,
                      labels=(s0.tensor(), s1.tensor()), times=times)


def label_centroid(hard, label=1):
    idx = np.argwhere(np.asarray(hard) == label)
    if len(idx) == 0:
        raise ContractViolation(f"label {label} is absent")
    return idx.mean(0)
