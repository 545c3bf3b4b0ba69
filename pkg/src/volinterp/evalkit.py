"""Similarity metrics for interpolated volumes and per-sequence reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .volcore import ContractViolation, Volume

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CSV_FIELDS = ("t", "psnr_db", "ncc", "ssim", "nmse")


def _array(v):
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    return np.asarray(data, dtype=np.float64)


def _pair(gt, pred):
    a, b = _array(gt), _array(pred)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr_capped(gt, pred, data_range=1.0):
    """Return ``(psnr_db, capped)``; a zero MSE reports the cap with the flag set."""
    a, b = _pair(gt, pred)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB, True
    value = 10.0 * math.log10(data_range ** 2 / mse)
    if value > PSNR_CAP_DB:
        return PSNR_CAP_DB, True
    return value, False


def psnr(gt, pred, data_range=1.0):
    return psnr_capped(gt, pred, data_range)[0]


def ncc_global(gt, pred):
    """Pearson correlation over all voxels."""
    a, b = _pair(gt, pred)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0.0:
        raise ContractViolation("ncc_global is undefined for a constant volume")
    return float((da * db).sum() / denom)


def ssim3d(gt, pred, window=SSIM_WINDOW, data_range=1.0):
    """Mean SSIM over every full ``window``-cube inside the volume.

    Local statistics are uniform-window means with population (biased)
    variances; constants use K1 = 0.01, K2 = 0.03.
    """
    a, b = _pair(gt, pred)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ContractViolation("ssim3d expects single-channel volumes")
        a, b = a[0], b[0]
    if any(s < window for s in a.shape):
        raise ContractViolation(f"volume {a.shape} smaller than the {window}^3 window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    r = window // 2
    inner = tuple(slice(r, s - r) for s in a.shape)

    def mean(x):
        return ndimage.uniform_filter(x, size=window, mode="constant")[inner]

    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a * mu_a
    var_b = mean(b * b) - mu_b * mu_b
    cov = mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def nmse(gt, pred):
    a, b = _pair(gt, pred)
    denom = float((a * a).sum())
    if denom == 0.0:
        raise ContractViolation("nmse is undefined for an all-zero ground truth")
    return float(((a - b) ** 2).sum() / denom)


@dataclass
class EvalRow:
    t: float
    psnr_db: float
    ncc: float
    ssim: float
    nmse: float
    psnr_capped: bool = False


@dataclass
class EvalReport:
    rows: list
    metadata: dict = field(default_factory=dict)

    @property
    def means(self):
        if not self.rows:
            return {}
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in CSV_FIELDS[1:]}

    @property
    def inf_capped(self):
        return any(r.psnr_capped for r in self.rows)

    def to_dict(self):
        return {"rows": [asdict(r) for r in self.rows], "means": self.means,
                "inf_capped": self.inf_capped, "metadata": self.metadata}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_FIELDS)
            for r in self.rows:
                writer.writerow([repr(float(getattr(r, k))) for k in CSV_FIELDS])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def evaluate_sequence(gts, preds, ts, metadata=None):
    """Score each predicted frame against its ground truth; rows come back sorted by t."""
    gts, preds, ts = list(gts), list(preds), [float(t) for t in ts]
    if not len(gts) == len(preds) == len(ts):
        raise ContractViolation(f"need equal counts, got {len(gts)} gts, {len(preds)} preds, {len(ts)} ts")
    rows = []
    for g, p, t in zip(gts, preds, ts):
        value, capped = psnr_capped(g, p)
        rows.append(EvalRow(t, value, ncc_global(g, p), ssim3d(g, p), nmse(g, p), capped))
    rows.sort(key=lambda r: r.t)
    return EvalReport(rows, dict(metadata or {}))
