"""Inference: cycle-mode interpolation, the linear-flow baseline, bounded
extrapolation and per-pair fine-tuning."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .cycletrain import cycle_step, warp_moves
from .nets import feature_many, flow_forward, recon_forward
from .volcore import ContractViolation, Volume, warp, weighted_fuse

MODES = ("cycle", "linear_baseline")
MAX_OFFSET = 0.5


@dataclass(frozen=True)
class InterpolationRequest:
    t: float
    mode: str = "cycle"
    extrapolation_allowed: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        t = float(self.t)
        if 0.0 <= t <= 1.0:
            return
        if not self.extrapolation_allowed:
            raise ContractViolation(f"t={t} outside [0, 1] and extrapolation is not enabled")
        if self.mode != "cycle":
            raise ContractViolation("extrapolation is only defined for the cycle mode")
        if not -MAX_OFFSET <= t <= 1 + MAX_OFFSET:
            raise ContractViolation(f"t={t} is more than {MAX_OFFSET} outside [0, 1]")

    @property
    def extrapolates(self):
        return not 0.0 <= self.t <= 1.0


def _tensor(v):
    if isinstance(v, Volume):
        return v.tensor()
    if not isinstance(v, torch.Tensor) or v.dim() != 5:
        raise ContractViolation("expected a Volume or an (N, C, D, H, W) tensor")
    return v


def _like(ref, t):
    if isinstance(ref, Volume):
        return Volume.from_tensor(t, spacing=ref.spacing)
    return t


def _check_pair(a, b):
    if a.shape != b.shape or a.shape[1] != 1:
        raise ContractViolation(f"endpoints must be matching single-channel volumes, got "
                                f"{tuple(a.shape)} and {tuple(b.shape)}")


def _check_t(t):
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ContractViolation(f"t={t} outside [0, 1]")
    return t


class _Context:
    """Flows and feature pyramids of one endpoint pair, shared across times."""

    def __init__(self, bundle, i0, i1, features=True):
        self.bundle = bundle
        self.i0, self.i1 = i0, i1
        self.f01, self.f10 = flow_forward(bundle, i0, i1)
        self.pyr = feature_many(bundle, [i0, i1]) if features else None

    def cycle(self, t):
        flows = (self.f01 * t, self.f10 * (1 - t))
        single = self.bundle.config.feature_extractor_mode == "single_scale"
        (c0, c1), (s0, s1) = warp_moves((self.i0, self.i1), self.pyr, flows, single)
        fused = weighted_fuse(c0, c1, 1 - t, t)
        out, _ = recon_forward(self.bundle, fused, s0, s1)
        return out

    def linear(self, t):
        return warp(self.i0, self.f01 * t)


def interpolate_sequence(bundle, i0, i1, ts, mode="cycle"):
    """Frames at each ``t`` in ``ts``; flows and features are computed once."""
    ts = [_check_t(t) for t in ts]
    if mode not in MODES:
        raise ContractViolation(f"mode must be one of {MODES}, got {mode!r}")
    a, b = _tensor(i0), _tensor(i1)
    _check_pair(a, b)
    bundle.eval()
    with torch.no_grad():
        ctx = _Context(bundle, a, b, features=mode == "cycle")
        frames = [ctx.cycle(t) if mode == "cycle" else ctx.linear(t) for t in ts]
    return [_like(i0, f) for f in frames]


def interpolate(bundle, i0, i1, t):
    """Cycle-mode frame at ``t`` in [0, 1]: two warped candidates fused by
    temporal distance and refined by the reconstruction network."""
    return interpolate_sequence(bundle, i0, i1, [t])[0]


def interpolate_linear_baseline(bundle, i0, i1, t):
    """``warp(i0, t * f01)`` with no fusion and no reconstruction."""
    return interpolate_sequence(bundle, i0, i1, [t], mode="linear_baseline")[0]


def extrapolate(bundle, i0, i1, t, extrapolation_allowed=True):
    """Frame at ``t`` up to 0.5 outside [0, 1], warped from the nearer endpoint."""
    req = InterpolationRequest(t, "cycle", extrapolation_allowed)
    t = float(req.t)
    if not req.extrapolates:
        raise ContractViolation(f"t={t} lies in [0, 1]; use interpolate")
    a, b = _tensor(i0), _tensor(i1)
    _check_pair(a, b)
    bundle.eval()
    with torch.no_grad():
        f01, f10 = flow_forward(bundle, a, b)
        out = warp(a, f01 * t) if t < 0 else warp(b, f10 * (1 - t))
    return _like(i0, out)


def run_request(bundle, i0, i1, req: InterpolationRequest):
    if req.extrapolates:
        return extrapolate(bundle, i0, i1, req.t, req.extrapolation_allowed)
    if req.mode == "linear_baseline":
        return interpolate_linear_baseline(bundle, i0, i1, req.t)
    return interpolate(bundle, i0, i1, req.t)


def instance_optimize(bundle, i0, i1, steps=100, cfg=None, callback=None):
    """Fine-tune a clone of ``bundle`` on one pair; the input is left untouched."""
    if steps < 0:
        raise ContractViolation("steps must be >= 0")
    tuned = bundle.clone()
    a, b = _tensor(i0), _tensor(i1)
    _check_pair(a, b)
    for k in range(steps):
        bd = cycle_step(tuned, a, b, cfg=cfg)
        if callback is not None:
            callback(k, bd)
    return tuned
