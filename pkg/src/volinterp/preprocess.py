"""CT/MRI preprocessing and analytic phantoms with closed-form ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .volcore import ContractViolation, Volume, resize_volume

MODALITIES = ("cardiac_mri", "lung_ct", "phantom")
PHANTOM_KINDS = ("translating_sphere", "expanding_sphere", "sinusoidal_deformation")
DEFAULT_SHAPES = {"cardiac_mri": (128, 128, 32), "lung_ct": (128, 128, 128), "phantom": (64, 64, 64)}


@dataclass
class PreprocessSpec:
    modality: str = "lung_ct"
    window: tuple = (-1400.0, 200.0)
    bed_threshold: float = -500.0
    target_shape: tuple = None
    normalize: bool = True

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ContractViolation(f"modality must be one of {MODALITIES}")
        if self.target_shape is None:
            self.target_shape = DEFAULT_SHAPES[self.modality]
        self.window = tuple(float(x) for x in self.window)
        self.target_shape = tuple(int(x) for x in self.target_shape)
        if not self.window[0] < self.window[1]:
            raise ContractViolation("window low must be below window high")
        if len(self.target_shape) != 3 or any(s % 16 for s in self.target_shape):
            raise ContractViolation(f"target dims must be divisible by 16, got {self.target_shape}")

    @classmethod
    def from_file(cls, path, **overrides):
        """Read a flat ``key = value`` file; keyword overrides win."""
        import configparser

        parser = configparser.ConfigParser(interpolation=None)
        with open(path) as fh:
            parser.read_string("[spec]\n" + fh.read())
        raw = dict(parser["spec"])
        kw = {}
        for key, value in raw.items():
            if key == "modality":
                kw[key] = value.strip()
            elif key == "window":
                kw[key] = tuple(float(x) for x in value.split(","))
            elif key == "bed_threshold":
                kw[key] = float(value)
            elif key == "target_shape":
                kw[key] = tuple(int(x) for x in value.split(","))
            elif key == "normalize":
                kw[key] = value.strip().lower() in ("1", "true", "yes", "on")
            else:
                raise ContractViolation(f"unknown preprocess key {key!r}")
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


def window_clamp(ct, low=-1400.0, high=200.0):
    if not low < high:
        raise ContractViolation("window low must be below window high")
    return np.clip(ct, low, high)


def minmax_normalize(v):
    lo, hi = float(np.min(v)), float(np.max(v))
    if not hi > lo:
        raise ContractViolation("cannot min-max normalize a constant volume")
    out = (v - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def body_mask(ct, threshold=-500.0, iterations=2):
    """Largest 6-connected body region after opening, with holes filled."""
    binary = ct > threshold
    struct = np.ones((3, 3, 3), dtype=bool)
    opened = ndimage.binary_erosion(binary, struct, iterations=iterations)
    opened = ndimage.binary_dilation(opened, struct, iterations=iterations)
    labels, n = ndimage.label(opened, structure=ndimage.generate_binary_structure(3, 1))
    if n == 0:
        raise ContractViolation("bed removal produced an empty body mask")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    mask = labels == int(np.argmax(sizes))
    return ndimage.binary_fill_holes(mask)


def bed_removal(ct, threshold=-500.0, fill=-1400.0):
    """Mask out everything but the body contour; returns ``(volume, mask)``."""
    mask = body_mask(ct, threshold)
    return np.where(mask, ct, fill), mask


def preprocess_volume(raw, spec: PreprocessSpec):
    raw = np.asarray(raw, dtype=np.float64)
    if spec.modality == "phantom":
        return minmax_normalize(raw).astype(np.float32) if spec.normalize else raw.astype(np.float32)
    if spec.modality == "lung_ct":
        low, high = spec.window
        v = window_clamp(raw, low, high)
        mask = body_mask(v, spec.bed_threshold)
        # intensity centering; its offset is undone by the final min-max scaling
        offset = v.mean()
        v = np.where(mask, v - offset, low - offset)
    else:
        v = raw
    t = torch.as_tensor(v, dtype=torch.float64)[None, None]
    v = resize_volume(t, spec.target_shape)[0, 0].numpy()
    if spec.normalize:
        v = minmax_normalize(v)
    return v.astype(np.float32)


def preprocess_pair(raw0, raw1, spec: PreprocessSpec):
    a = preprocess_volume(raw0, spec)
    b = preprocess_volume(raw1, spec)
    norm = spec.normalize
    return Volume(a, normalized=norm), Volume(b, normalized=norm)


@dataclass
class PhantomSpec:
    kind: str = "translating_sphere"
    shape: tuple = (64, 64, 64)
    amplitude: float = 6.0
    noise_sigma: float = 0.01
    seed: int = 0
    direction: tuple = (0.0, 0.0, 1.0)
    background: float = 0.2
    foreground: float = 0.8
    edge: float = 2.0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        d = np.asarray(self.direction, dtype=float)
        self.direction = tuple(d / np.linalg.norm(d))
        if self.kind not in PHANTOM_KINDS:
            raise ContractViolation(f"phantom kind must be one of {PHANTOM_KINDS}")
        if self.noise_sigma < 0:
            raise ContractViolation("noise_sigma must be >= 0")
        if any(s < 16 for s in self.shape):
            raise ContractViolation("phantom dims must be >= 16")
        r_max = self.radius + self.edge / 2 + self._max_extent()
        if r_max > min(self.shape) / 2 - 2:
            raise ContractViolation(
                f"amplitude {self.amplitude} pushes the object within 2 voxels of the border")

    @property
    def radius(self):
        return 0.2 * min(self.shape)

    @property
    def center0(self):
        return np.array([(s - 1) / 2 for s in self.shape])

    def _max_extent(self):
        # largest object excursion over t in [-0.5, 1.5]
        if self.kind == "translating_sphere":
            return abs(self.amplitude)
        if self.kind == "expanding_sphere":
            return 1.5 * abs(self.amplitude)
        return abs(self.amplitude) * 1.5


class Phantom:
    """Analytic scene with a closed-form renderer for t in [-0.5, 1.5]."""

    def __init__(self, spec: PhantomSpec):
        self.spec = spec
        self.grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in spec.shape],
                                         indexing="ij"))

    def center(self, t):
        s = self.spec
        c = s.center0.copy()
        if s.kind == "translating_sphere":
            c = c + s.amplitude * (t - 0.5) * np.asarray(s.direction)
        return c

    def radius(self, t):
        s = self.spec
        if s.kind == "expanding_sphere":
            return s.radius + s.amplitude * t
        return s.radius

    def _profile(self, r, radius):
        # cosine ramp of width `edge` centred on the radius
        half = self.spec.edge / 2
        x = np.clip((r - (radius - half)) / self.spec.edge, 0.0, 1.0)
        return 0.5 * (1 + np.cos(np.pi * x))

    def _check_t(self, t):
        if not -0.5 <= t <= 1.5:
            raise ContractViolation(f"phantom time {t} outside [-0.5, 1.5]")

    def render(self, t):
        """Noiseless ground-truth frame at time ``t``."""
        self._check_t(t)
        s = self.spec
        if s.kind == "sinusoidal_deformation":
            return self._render_sinusoidal(t)
        c = self.center(t).reshape(3, 1, 1, 1)
        r = np.sqrt(((self.grid - c) ** 2).sum(0))
        occ = self._profile(r, self.radius(t))
        return (s.background + (s.foreground - s.background) * occ).astype(np.float32)

    def _render_sinusoidal(self, t):
        s = self.spec
        shape = np.asarray(s.shape, dtype=float).reshape(3, 1, 1, 1)
        # backward displacement along `direction`, sinusoidal across the volume
        phase = 2 * np.pi * self.grid / shape
        disp = s.amplitude * t * np.sin(phase[0]) * np.sin(phase[1])
        coords = self.grid - disp * np.asarray(s.direction).reshape(3, 1, 1, 1)
        c = s.center0.reshape(3, 1, 1, 1)
        r = np.sqrt(((coords - c) ** 2).sum(0))
        occ = self._profile(r, s.radius)
        stripes = 0.5 + 0.5 * np.cos(2 * np.pi * coords[1] / 8.0)
        val = s.background + (s.foreground - s.background) * occ * (0.6 + 0.4 * stripes)
        return val.astype(np.float32)

    def label(self, t):
        """Hard sphere label (1 inside the nominal radius)."""
        self._check_t(t)
        s = self.spec
        if s.kind == "sinusoidal_deformation":
            raise ContractViolation("sinusoidal phantom has no analytic label")
        c = self.center(t).reshape(3, 1, 1, 1)
        r = np.sqrt(((self.grid - c) ** 2).sum(0))
        return (r <= self.radius(t)).astype(np.int64)


def phantom_pair(spec: PhantomSpec):
    """Return ``(i0, i1, gt)`` where ``gt(t)`` renders the noiseless frame."""
    ph = Phantom(spec)
    rng = np.random.default_rng(spec.seed)
    frames = []
    for t in (0.0, 1.0):
        v = ph.render(t).astype(np.float64)
        if spec.noise_sigma > 0:
            v = v + rng.normal(0.0, spec.noise_sigma, v.shape)
        frames.append(Volume(np.clip(v, 0.0, 1.0).astype(np.float32), normalized=True))

    def gt(t):
        return Volume(ph.render(t), normalized=True)

    return frames[0], frames[1], gt
