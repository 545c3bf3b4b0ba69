"""Independent reference implementations used as test oracles.

Everything here is written as plain loops or direct numpy formulas and shares
no code with the package.
"""
import math

import numpy as np


def warp_scalar(vol, flow):
    """Per-voxel trilinear backward warp with border clamping.

    vol: (C, D, H, W); flow: (3, D, H, W) displacements in voxels.
    """
    c, d, h, w = vol.shape
    dims = (d, h, w)
    out = np.zeros_like(vol, dtype=np.float64)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                pos = []
                for axis, base in enumerate((z, y, x)):
                    p = base + float(flow[axis, z, y, x])
                    pos.append(min(max(p, 0.0), dims[axis] - 1.0))
                lo = [min(int(math.floor(p)), s - 2) for p, s in zip(pos, dims)]
                fr = [p - l for p, l in zip(pos, lo)]
                for ch in range(c):
                    acc = 0.0
                    for dz in (0, 1):
                        for dy in (0, 1):
                            for dx in (0, 1):
                                wgt = ((fr[0] if dz else 1 - fr[0]) * (fr[1] if dy else 1 - fr[1])
                                       * (fr[2] if dx else 1 - fr[2]))
                                acc += wgt * vol[ch, lo[0] + dz, lo[1] + dy, lo[2] + dx]
                    out[ch, z, y, x] = acc
    return out


def trilinear_at(vol, z, y, x):
    """Trilinear sample of a (D, H, W) array with edge clamping."""
    d, h, w = vol.shape
    z = min(max(z, 0.0), d - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    z0, y0, x0 = min(int(z), d - 2), min(int(y), h - 2), min(int(x), w - 2)
    fz, fy, fx = z - z0, y - y0, x - x0
    acc = 0.0
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                wgt = (fz if dz else 1 - fz) * (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
                acc += wgt * vol[z0 + dz, y0 + dy, x0 + dx]
    return acc


def downscale_bruteforce(flow, factor):
    """Half-voxel-centred trilinear resampling of each component, then scaling."""
    step = int(round(1 / factor))
    comps, d, h, w = flow.shape
    out = np.zeros((comps, d // step, h // step, w // step))
    for c in range(comps):
        for z in range(d // step):
            for y in range(h // step):
                for x in range(w // step):
                    src = [(i + 0.5) * step - 0.5 for i in (z, y, x)]
                    out[c, z, y, x] = trilinear_at(flow[c], *src) * factor
    return out


def ncc_sliding(a, b, window, eps=1e-5):
    """Local NCC by explicit windows clipped to the volume; signed form."""
    d, h, w = a.shape
    r = window // 2
    vals = []
    for z in range(d):
        for y in range(h):
            for x in range(w):
                sl = (slice(max(z - r, 0), z + r + 1), slice(max(y - r, 0), y + r + 1),
                      slice(max(x - r, 0), x + r + 1))
                pa, pb = a[sl].ravel(), b[sl].ravel()
                da, db = pa - pa.mean(), pb - pb.mean()
                cross = (da * db).sum()
                va, vb = (da * da).sum(), (db * db).sum()
                vals.append(cross / math.sqrt(va * vb + eps))
    return float(np.mean(vals))


def ssim_sliding(a, b, window=7, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over all full windows, population statistics."""
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    d, h, w = a.shape
    vals = []
    for z in range(d - window + 1):
        for y in range(h - window + 1):
            for x in range(w - window + 1):
                pa = a[z:z + window, y:y + window, x:x + window].ravel()
                pb = b[z:z + window, y:y + window, x:x + window].ravel()
                ma, mb = pa.mean(), pb.mean()
                va, vb = pa.var(), pb.var()
                cov = ((pa - ma) * (pb - mb)).mean()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def pearson(a, b):
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    return float(np.corrcoef(a, b)[0, 1])


def dice_per_channel(pred, target, eps=1e-5):
    scores = []
    for k in range(pred.shape[0]):
        inter = float((pred[k] * target[k]).sum())
        scores.append((2 * inter + eps) / (float(pred[k].sum() + target[k].sum()) + eps))
    return 1 - float(np.mean(scores))
