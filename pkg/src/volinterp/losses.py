"""Training objectives and the finite-difference gradient harness."""
from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .volcore import ContractViolation, spatial_gradient, warp

NCC_EPS = 1e-5
DICE_EPS = 1e-5

COMPONENT_COEF = {
    "smooth_fwd": "smooth", "smooth_bwd": "smooth",
    "image_fwd": "image", "image_bwd": "image",
    "cyc_image_0": "cyc_image", "cyc_image_1": "cyc_image",
    "reg_0": "reg", "reg_1": "reg",
    "dice_0": "dice", "dice_1": "dice",
}


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _window_sum(x, window):
    # separable box sum via cumulative sums; zero padding so border windows
    # only see in-bounds voxels
    r = window // 2
    for dim in (2, 3, 4):
        pad = [0, 0] * 3
        pad[2 * (4 - dim)] = r + 1
        pad[2 * (4 - dim) + 1] = r
        c = F.pad(x, pad).cumsum(dim)
        n = x.shape[dim]
        x = c.narrow(dim, window, n) - c.narrow(dim, 0, n)
    return x


@functools.lru_cache(maxsize=16)
def _window_count(shape, window, dtype):
    # in-bounds voxels per window; depends only on the grid
    return _window_sum(torch.ones((1, 1) + shape, dtype=dtype), window)


def ncc_local(a, b, window=9, eps=NCC_EPS, squared=False):
    """Windowed normalized cross-correlation, averaged over voxels.

    Local statistics use window sums over the in-bounds part of each cube.
    The signed coefficient is ``cross / sqrt(var_a * var_b + eps)``; with
    ``squared=True`` it is ``cross**2 / (var_a * var_b + eps)`` instead.
    """
    _same_shape(a, b)
    if window < 3 or window % 2 == 0:
        raise ContractViolation(f"window must be odd and >= 3, got {window}")
    # the coefficient is shift invariant; centring cuts cancellation in the sums
    a = a - a.mean().detach()
    b = b - b.mean().detach()
    count = _window_count(tuple(a.shape[2:]), window, a.dtype)
    sa, sb = _window_sum(a, window), _window_sum(b, window)
    saa, sbb, sab = _window_sum(a * a, window), _window_sum(b * b, window), _window_sum(a * b, window)
    cross = sab - sa * sb / count
    var_a = (saa - sa * sa / count).clamp(min=0)
    var_b = (sbb - sb * sb / count).clamp(min=0)
    if squared:
        cc = cross * cross / (var_a * var_b + eps)
    else:
        cc = cross / torch.sqrt(var_a * var_b + eps)
    return cc.mean()


def ncc_global(a, b, eps=NCC_EPS):
    _same_shape(a, b)
    da = a - a.mean()
    db = b - b.mean()
    return (da * db).sum() / torch.sqrt((da * da).sum() * (db * db).sum() + eps)


def charbonnier(a, b, eps=1e-3):
    _same_shape(a, b)
    if eps <= 0:
        raise ContractViolation("charbonnier eps must be positive")
    d = a - b
    # mean(s) == mean(s - eps) + eps; this form returns eps exactly for a == b
    return (torch.sqrt(d * d + eps * eps) - eps).mean() + eps


def smoothness(flow):
    """Mean squared forward difference, averaged over the three axes."""
    return sum((g * g).mean() for g in spatial_gradient(flow)) / 3.0


def image_loss(a, b, window=9, eps=1e-3, ncc_mode="local"):
    if ncc_mode == "local":
        sim = ncc_local(a, b, window)
    elif ncc_mode == "global":
        sim = ncc_global(a, b)
    else:
        raise ContractViolation(f"unknown ncc mode {ncc_mode!r}")
    return -sim + charbonnier(a, b, eps)


def warp_terms(i0, i1, f01, f10, window=9, eps=1e-3, ncc_mode="local"):
    return {
        "smooth_fwd": smoothness(f01),
        "image_fwd": image_loss(i1, warp(i0, f01), window, eps, ncc_mode),
        "smooth_bwd": smoothness(f10),
        "image_bwd": image_loss(i0, warp(i1, f10), window, eps, ncc_mode),
    }


def warp_loss(i0, i1, f01, f10, window=9, eps=1e-3, ncc_mode="local"):
    t = warp_terms(i0, i1, f01, f10, window, eps, ncc_mode)
    # pairwise grouping keeps the swap (i0, f01) <-> (i1, f10) exact in floating point
    return (t["smooth_fwd"] + t["image_fwd"]) + (t["smooth_bwd"] + t["image_bwd"])


def residual_l1(residual):
    return residual.abs().mean()


def cycle_loss(i, i_cyc, residual, window=9, eps=1e-3, ncc_mode="local"):
    return image_loss(i, i_cyc, window, eps, ncc_mode) + residual_l1(residual)


def dice_loss(pred, target, eps=DICE_EPS):
    """Soft Dice loss over channels; tensors are (N, K, D, H, W)."""
    _same_shape(pred, target)
    dims = [0] + list(range(2, pred.dim()))
    inter = (pred * target).sum(dims)
    denom = pred.sum(dims) + target.sum(dims)
    return 1 - ((2 * inter + eps) / (denom + eps)).mean()


@dataclass
class LossBreakdown:
    smooth_fwd: float = 0.0
    smooth_bwd: float = 0.0
    image_fwd: float = 0.0
    image_bwd: float = 0.0
    cyc_image_0: float = 0.0
    cyc_image_1: float = 0.0
    reg_0: float = 0.0
    reg_1: float = 0.0
    dice_0: float = 0.0
    dice_1: float = 0.0
    total: float = 0.0
    coefficients: dict = field(default_factory=dict)

    def weighted_sum(self):
        return sum(self.coefficients.get(COMPONENT_COEF[k], 0.0) * getattr(self, k) for k in COMPONENT_COEF)

    def to_json(self, **extra):
        rec = dict(extra)
        rec.update(asdict(self))
        return json.dumps(rec, sort_keys=True)


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: dict
    tolerance: float

    @property
    def passed(self):
        return all(v <= self.tolerance for v in self.max_rel_error.values())

    def __str__(self):
        errs = ", ".join(f"{k}={v:.3e}" for k, v in self.max_rel_error.items())
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {errs} (tol {self.tolerance:g})"


def grad_check(loss_fn, inputs, step=1e-4, tolerance=1e-4, name="loss", max_entries=None, seed=0):
    """Compare autograd gradients with central differences in float64.

    ``inputs`` maps argument names to arrays; ``loss_fn(**tensors)`` must return
    a scalar.  The error for each input is ``max|analytic - numeric|``
    divided by the largest gradient magnitude seen for that input.
    """
    tensors = {k: torch.as_tensor(np.ascontiguousarray(v), dtype=torch.float64).clone().requires_grad_(True)
               for k, v in inputs.items()}
    loss = loss_fn(**tensors)
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        plain = {k: t.detach().clone() for k, t in tensors.items()}
        for (key, t), g in zip(tensors.items(), grads):
            analytic = torch.zeros_like(t) if g is None else g
            flat = plain[key].view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            num = np.empty(len(idx))
            ana = analytic.reshape(-1)[torch.as_tensor(idx)].numpy()
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn(**plain).item()
                flat[i] = orig - step
                down = loss_fn(**plain).item()
                flat[i] = orig
                num[j] = (up - down) / (2 * step)
            scale = max(np.abs(ana).max(), np.abs(num).max(), 1e-12)
            errors[key] = float(np.abs(ana - num).max() / scale)
    return GradCheckReport(name, errors, tolerance)


def gradient_suite(seed=0):
    """Standard gradient checks: charbonnier, ncc, smoothness, warp composite, dice."""
    rng = np.random.default_rng(seed)
    shape = (1, 1, 4, 4, 4)
    a, b = rng.random(shape), rng.random(shape)
    field_ = rng.uniform(-1.5, 1.5, (1, 3, 4, 4, 4))
    # keep sample points away from trilinear kinks at integer coordinates
    field_ = np.floor(field_) + np.clip(field_ - np.floor(field_), 0.1, 0.9)
    logits = rng.normal(size=(1, 3, 4, 4, 4))
    soft = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    onehot = np.eye(3)[rng.integers(0, 3, (4, 4, 4))].transpose(3, 0, 1, 2)[None]

    def composite(img, fixed, flow):
        return image_loss(fixed, warp(img, flow), window=3) + smoothness(flow)

    return [
        grad_check(lambda a, b: charbonnier(a, b, 1e-3), {"a": a, "b": b}, name="charbonnier"),
        grad_check(lambda a, b: ncc_local(a, b, 3), {"a": a, "b": b}, name="ncc_local(w=3)"),
        grad_check(smoothness, {"flow": field_}, name="smoothness"),
        grad_check(composite, {"img": a, "fixed": b, "flow": field_}, name="warp-composite"),
        grad_check(lambda pred, target: dice_loss(pred, target), {"pred": soft, "target": onehot},
                   name="dice"),
    ]
