"""Volumes, displacement fields and the differentiable spatial transforms.

Tensors follow the ``(N, C, D, H, W)`` layout throughout.  A displacement
field is a ``(N, 3, D, H, W)`` tensor whose components are displacements
along depth, height and width, in voxel units of its own grid.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numba
import numpy as np
import torch
import torch.nn.functional as F

UVIV_MAGIC = b"UVIV"
UVIV_VERSION = 1
UVIV_FLOAT32 = 1
_HEADER = struct.Struct("<4sBBH3I3f")


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class UVIVFormatError(OSError):
    pass


def deterministic_mode() -> bool:
    return os.environ.get("UVI_DETERMINISTIC", "0") == "1"


def configure_determinism():
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)


def _check(cond, msg):
    if not cond:
        raise ContractViolation(msg)


@dataclass(frozen=True)
class Volume:
    """A C-channel 3D grid of scalar intensities.

    ``data`` is stored as ``(C, D, H, W)``.  ``spacing`` is carried along for
    I/O but never enters the math: displacements are in voxel units.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    normalized: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        _check(data.ndim == 4, f"volume must be (C, D, H, W), got shape {data.shape}")
        _check(data.shape[0] >= 1, "volume needs at least one channel")
        _check(all(s >= 2 for s in data.shape[1:]), f"spatial dims must be >= 2, got {data.shape[1:]}")
        _check(bool(np.isfinite(data).all()), "volume contains non-finite values")
        if self.normalized:
            _check(data.min() >= 0.0 and data.max() <= 1.0, "normalized volume must lie in [0, 1]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return self.data.shape[1:]

    @property
    def channels(self):
        return self.data.shape[0]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(self.data), dtype=dtype)[None]

    @classmethod
    def from_tensor(cls, t: torch.Tensor, spacing=(1.0, 1.0, 1.0), normalized=False):
        arr = t.detach().cpu().numpy()
        if arr.ndim == 5:
            _check(arr.shape[0] == 1, "expected a batch of one")
            arr = arr[0]
        return cls(arr, spacing=spacing, normalized=normalized)


def write_uviv(path, vol: Volume):
    data = np.ascontiguousarray(vol.data, dtype="<f4")
    c, d, h, w = data.shape
    header = _HEADER.pack(UVIV_MAGIC, UVIV_VERSION, UVIV_FLOAT32, c, d, h, w, *vol.spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))


def read_uviv(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise UVIVFormatError(f"{path}: truncated header")
    magic, version, dtype, c, d, h, w, *spacing = _HEADER.unpack_from(raw)
    if magic != UVIV_MAGIC:
        raise UVIVFormatError(f"{path}: bad magic {magic!r}")
    if version != UVIV_VERSION:
        raise UVIVFormatError(f"{path}: unsupported version {version}")
    if dtype != UVIV_FLOAT32:
        raise UVIVFormatError(f"{path}: unsupported dtype code {dtype}")
    n = c * d * h * w
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * n:
        raise UVIVFormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, d, h, w).astype(np.float32)
    return Volume(data, spacing=tuple(spacing))


def _check_field(vol, flow):
    _check(vol.dim() == 5 and flow.dim() == 5, "expected 5D tensors (N, C, D, H, W)")
    _check(flow.shape[1] == 3, f"displacement field needs 3 components, got {flow.shape[1]}")
    _check(vol.shape[0] == flow.shape[0] and vol.shape[2:] == flow.shape[2:],
           f"shape mismatch: volume {tuple(vol.shape)} vs field {tuple(flow.shape)}")
    _check(bool(torch.isfinite(flow).all()), "displacement field contains non-finite values")


@numba.njit(cache=True)
def _coords(flow, b, axis, size, lo, frac, inside):
    # clamped sample coordinate along one axis -> lower index, fraction and
    # whether the displacement gradient passes the clamp
    d, h, w = flow.shape[2:]
    i = 0
    for z in range(d):
        for y in range(h):
            for x in range(w):
                base = z if axis == 0 else (y if axis == 1 else x)
                pos = base + np.float64(flow[b, axis, z, y, x])
                inside[i] = 0.0 <= pos <= size - 1
                pos = min(max(pos, 0.0), size - 1.0)
                k = min(int(np.floor(pos)), size - 2)
                lo[i] = k
                frac[i] = pos - k
                i += 1


@numba.njit(cache=True)
def _grid(flow, b):
    d, h, w = flow.shape[2:]
    p = d * h * w
    lo = np.empty((3, p), np.int64)
    frac = np.empty((3, p), np.float64)
    inside = np.empty((3, p), np.bool_)
    for axis, size in enumerate((d, h, w)):
        _coords(flow, b, axis, size, lo[axis], frac[axis], inside[axis])
    return lo, frac, inside


@numba.njit(cache=True)
def _warp_forward(vol, flow, out):
    n, c, d, h, w = vol.shape
    hw = h * w
    for b in range(n):
        lo, frac, _ = _grid(flow, b)
        for ch in range(c):
            v = vol[b, ch].ravel()
            o = out[b, ch].ravel()
            for i in range(d * hw):
                fz, fy, fx = frac[0, i], frac[1, i], frac[2, i]
                gz, gy, gx = 1.0 - fz, 1.0 - fy, 1.0 - fx
                j = lo[0, i] * hw + lo[1, i] * w + lo[2, i]
                o[i] = (gz * (gy * (gx * v[j] + fx * v[j + 1]) + fy * (gx * v[j + w] + fx * v[j + w + 1]))
                        + fz * (gy * (gx * v[j + hw] + fx * v[j + hw + 1])
                                + fy * (gx * v[j + hw + w] + fx * v[j + hw + w + 1])))


@numba.njit(cache=True)
def _warp_backward(vol, flow, grad, grad_vol, grad_flow):
    n, c, d, h, w = vol.shape
    hw = h * w
    p = d * hw
    for b in range(n):
        lo, frac, inside = _grid(flow, b)
        gfz = np.zeros(p)
        gfy = np.zeros(p)
        gfx = np.zeros(p)
        for ch in range(c):
            v = vol[b, ch].ravel()
            gv = grad_vol[b, ch].ravel()
            g_out = grad[b, ch].ravel()
            for i in range(p):
                g = np.float64(g_out[i])
                if g == 0.0:
                    continue
                fz, fy, fx = frac[0, i], frac[1, i], frac[2, i]
                gz, gy, gx = 1.0 - fz, 1.0 - fy, 1.0 - fx
                j = lo[0, i] * hw + lo[1, i] * w + lo[2, i]
                v000, v001, v010, v011 = v[j], v[j + 1], v[j + w], v[j + w + 1]
                v100, v101, v110, v111 = v[j + hw], v[j + hw + 1], v[j + hw + w], v[j + hw + w + 1]
                gv[j] += g * gz * gy * gx
                gv[j + 1] += g * gz * gy * fx
                gv[j + w] += g * gz * fy * gx
                gv[j + w + 1] += g * gz * fy * fx
                gv[j + hw] += g * fz * gy * gx
                gv[j + hw + 1] += g * fz * gy * fx
                gv[j + hw + w] += g * fz * fy * gx
                gv[j + hw + w + 1] += g * fz * fy * fx
                # bilinear values on the two faces normal to each axis
                a0 = gy * (gx * v000 + fx * v001) + fy * (gx * v010 + fx * v011)
                a1 = gy * (gx * v100 + fx * v101) + fy * (gx * v110 + fx * v111)
                gfz[i] += g * (a1 - a0)
                b0 = gz * (gx * v000 + fx * v001) + fz * (gx * v100 + fx * v101)
                b1 = gz * (gx * v010 + fx * v011) + fz * (gx * v110 + fx * v111)
                gfy[i] += g * (b1 - b0)
                c0 = gz * (gy * v000 + fy * v010) + fz * (gy * v100 + fy * v110)
                c1 = gz * (gy * v001 + fy * v011) + fz * (gy * v101 + fy * v111)
                gfx[i] += g * (c1 - c0)
        gf = grad_flow[b]
        for i in range(p):
            z = i // hw
            y = (i // w) % h
            x = i % w
            gf[0, z, y, x] = gfz[i] if inside[0, i] else 0.0
            gf[1, z, y, x] = gfy[i] if inside[1, i] else 0.0
            gf[2, z, y, x] = gfx[i] if inside[2, i] else 0.0


class _TrilinearWarp(torch.autograd.Function):
    # fused single-pass kernels; the equivalent chain of torch gathers is
    # memory bound and several times slower on CPU

    @staticmethod
    def forward(ctx, vol, flow):
        vol_c = vol.detach().contiguous()
        flow_c = flow.detach().to(vol.dtype).contiguous()
        out = torch.empty_like(vol_c)
        _warp_forward(vol_c.numpy(), flow_c.numpy(), out.numpy())
        ctx.save_for_backward(vol_c, flow_c)
        ctx.flow_dtype = flow.dtype
        return out

    @staticmethod
    def backward(ctx, grad):
        vol, flow = ctx.saved_tensors
        grad = grad.to(vol.dtype).contiguous()
        grad_vol = torch.zeros_like(vol)
        grad_flow = torch.empty_like(flow)
        _warp_backward(vol.numpy(), flow.numpy(), grad.numpy(), grad_vol.numpy(), grad_flow.numpy())
        return grad_vol, grad_flow.to(ctx.flow_dtype)


def warp(vol: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward trilinear warp: ``out[x] = vol[x + flow[x]]``.

    Sample coordinates are clamped to the grid (border replication).  A zero
    field reproduces ``vol`` bit-exactly because integer coordinates give
    interpolation weights of exactly one and zero.
    """
    _check_field(vol, flow)
    _check(vol.device.type == "cpu", "warp runs on CPU tensors")
    return _TrilinearWarp.apply(vol, flow)


def scale_field(flow: torch.Tensor, t: float) -> torch.Tensor:
    _check(np.isfinite(float(t)), "scale must be finite")
    return flow * t


def downscale_field(flow: torch.Tensor, factor: float) -> torch.Tensor:
    """Resample a field onto a grid ``factor`` times the size, keeping voxel units.

    Trilinear with half-voxel-centred geometry, so halving maps output voxel
    ``i`` to input coordinate ``2i + 0.5`` and magnitudes scale by ``factor``.
    """
    _check(factor in (1, 0.5, 0.25), f"factor must be 1, 1/2 or 1/4, got {factor}")
    if factor == 1:
        return flow
    step = int(round(1 / factor))
    dims = flow.shape[2:]
    _check(all(s % step == 0 for s in dims), f"spatial shape {tuple(dims)} not divisible by {step}")
    size = [s // step for s in dims]
    return F.interpolate(flow, size=size, mode="trilinear", align_corners=False) * factor


def weighted_fuse(a: torch.Tensor, b: torch.Tensor, w_a: float, w_b: float) -> torch.Tensor:
    _check(a.shape == b.shape, f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    _check(w_a >= 0 and w_b >= 0, "fusion weights must be non-negative")
    _check(abs(w_a + w_b - 1.0) <= 1e-9, f"fusion weights must sum to 1, got {w_a} + {w_b}")
    return w_a * a + w_b * b


def spatial_gradient(flow: torch.Tensor):
    """Forward differences along depth, height and width (no padding)."""
    _check(all(s >= 2 for s in flow.shape[2:]), "need at least 2 voxels per axis")
    dd = flow[:, :, 1:] - flow[:, :, :-1]
    dh = flow[:, :, :, 1:] - flow[:, :, :, :-1]
    dw = flow[:, :, :, :, 1:] - flow[:, :, :, :, :-1]
    return dd, dh, dw


def resize_volume(vol: torch.Tensor, target_shape) -> torch.Tensor:
    """Trilinear resize with corner-aligned sampling."""
    target_shape = tuple(int(s) for s in target_shape)
    _check(len(target_shape) == 3 and all(s >= 2 for s in target_shape),
           f"target shape must be three dims >= 2, got {target_shape}")
    if tuple(vol.shape[2:]) == target_shape:
        return vol.clone()
    return F.interpolate(vol, size=target_shape, mode="trilinear", align_corners=True)
