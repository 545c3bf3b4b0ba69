"""Flow, feature-extraction and reconstruction networks plus checkpointing."""
from __future__ import annotations

import copy
import hashlib
import io
import pickle

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volcore import ContractViolation

FEATURE_CHANNELS = (4, 8, 16)
FEATURE_MODES = ("multi_scale_cnn", "none", "edge", "unet", "single_scale")
CHECKPOINT_FORMAT = "volinterp-checkpoint"
CHECKPOINT_VERSION = 1
# oneDNN convolutions are markedly faster on CPU with channels-last 3D tensors;
# batch sizes > 1 also keep PyTorch off its slow native conv3d kernel, which is
# why the pipeline stacks related passes into one batch
MEMORY_FORMAT = torch.channels_last_3d


def conv_block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv3d(cin, cout, 3, stride=stride, padding=1), nn.LeakyReLU(0.2))


def _zero_(conv):
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


def _require_divisible(x, k, what):
    if any(s % k for s in x.shape[2:]):
        raise ContractViolation(f"{what}: spatial shape {tuple(x.shape[2:])} must be divisible by {k}")


class FlowNet(nn.Module):
    """VoxelMorph-style UNet mapping a 2-channel pair to a 3-channel flow."""

    def __init__(self, enc=(16, 32, 32, 32), dec=(32, 32, 32, 32, 32, 16, 16)):
        super().__init__()
        if len(enc) != 4 or len(dec) != 7:
            raise ContractViolation("flow net needs 4 encoder and 7 decoder widths")
        self.enc = nn.ModuleList()
        prev = 2
        for w in enc:
            self.enc.append(conv_block(prev, w, stride=2))
            prev = w
        skips = [enc[2], enc[1], enc[0]]
        self.dec = nn.ModuleList([conv_block(enc[3], dec[0])])
        prev = dec[0]
        for i, skip in enumerate(skips):
            self.dec.append(conv_block(prev + skip, dec[i + 1]))
            prev = dec[i + 1]
        self.dec.append(conv_block(prev, dec[4]))
        self.dec.append(conv_block(dec[4] + 2, dec[5]))
        self.dec.append(conv_block(dec[5], dec[6]))
        self.flow = _zero_(nn.Conv3d(dec[6], 3, 3, padding=1))

    def forward(self, x):
        _require_divisible(x, 16, "flow network input")
        x = x.contiguous(memory_format=MEMORY_FORMAT)
        feats = [x]
        h = x
        for layer in self.enc:
            h = layer(h)
            feats.append(h)
        h = self.dec[0](h)
        for i in range(3):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.dec[i + 1](torch.cat([h, feats[3 - i]], 1))
        h = self.dec[4](h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.dec[5](torch.cat([h, x], 1))
        h = self.dec[6](h)
        return self.flow(h)


def _sobel_magnitude(x):
    # x: (N, 1, D, H, W); separable Sobel gradient magnitude
    smooth = torch.tensor([1.0, 2.0, 1.0], dtype=x.dtype)
    diff = torch.tensor([-1.0, 0.0, 1.0], dtype=x.dtype)
    sq = 0
    for axis in range(3):
        k = [smooth, smooth, smooth]
        k[axis] = diff
        kernel = torch.einsum("i,j,k->ijk", *k)[None, None]
        g = F.conv3d(F.pad(x, (1,) * 6, mode="replicate"), kernel)
        sq = sq + g * g
    return torch.sqrt(sq + 1e-12)


class FeatureExtractor(nn.Module):
    """Produces feature maps at scales 1, 1/2, 1/4 with 4, 8, 16 channels.

    ``mode`` selects the extractor variant; ``multi_scale_cnn`` is the
    default stride-2 CNN, the others exist for ablation runs.
    """

    def __init__(self, mode="multi_scale_cnn"):
        super().__init__()
        if mode not in FEATURE_MODES:
            raise ContractViolation(f"unknown feature extractor mode {mode!r}")
        self.mode = mode
        c1, c2, c3 = FEATURE_CHANNELS
        if mode == "multi_scale_cnn":
            self.levels = nn.ModuleList([
                nn.Sequential(conv_block(1, c1), conv_block(c1, c1)),
                nn.Sequential(conv_block(c1, c2, 2), conv_block(c2, c2)),
                nn.Sequential(conv_block(c2, c3, 2), conv_block(c3, c3)),
            ])
        elif mode == "unet":
            self.down1 = conv_block(1, c1)
            self.down2 = conv_block(c1, c2, 2)
            self.down3 = conv_block(c2, c3, 2)
            self.up2 = conv_block(c3 + c2, c2)
            self.up1 = conv_block(c2 + c1, c1)
        elif mode == "single_scale":
            self.body = nn.Sequential(conv_block(1, c3), conv_block(c3, c3))
            self.heads = nn.ModuleList([nn.Conv3d(c3, c, 1) for c in FEATURE_CHANNELS])

    def forward(self, x):
        _require_divisible(x, 4, "feature extractor input")
        x = x.contiguous(memory_format=MEMORY_FORMAT)
        n, _, d, h, w = x.shape
        shapes = [(d, h, w), (d // 2, h // 2, w // 2), (d // 4, h // 4, w // 4)]
        if self.mode == "multi_scale_cnn":
            out, f = [], x
            for level in self.levels:
                f = level(f)
                out.append(f)
            return out
        if self.mode == "none":
            return [x.new_zeros((n, c) + s) for c, s in zip(FEATURE_CHANNELS, shapes)]
        if self.mode == "edge":
            out = []
            for c, s in zip(FEATURE_CHANNELS, shapes):
                img = x if s == shapes[0] else F.adaptive_avg_pool3d(x, s)
                out.append(_sobel_magnitude(img).expand(n, c, *s).contiguous())
            return out
        if self.mode == "unet":
            e1 = self.down1(x)
            e2 = self.down2(e1)
            e3 = self.down3(e2)
            u2 = self.up2(torch.cat([F.interpolate(e3, scale_factor=2, mode="nearest"), e2], 1))
            u1 = self.up1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), e1], 1))
            return [u1, u2, e3]
        # single_scale: every level lives at full resolution and is pooled after warping
        body = self.body(x)
        return [head(body) for head in self.heads]


def pool_single_scale(pyramid):
    """Bring a single-scale pyramid back to the 1, 1/2, 1/4 layout."""
    return [pyramid[0], F.avg_pool3d(pyramid[1], 2), F.avg_pool3d(pyramid[2], 4)]


class ReconNet(nn.Module):
    """Small 3D UNet predicting an additive residual for the fused image.

    The two warped pyramids enter each encoder level as their elementwise sum
    and product, which carries the unordered pair exactly and keeps the
    output invariant to which endpoint comes first.
    """

    def __init__(self, base=16):
        super().__init__()
        c1, c2, c3 = FEATURE_CHANNELS
        b = base
        self.enc1 = conv_block(1 + 2 * c1, b)
        self.down2 = conv_block(b, 2 * b, 2)
        self.enc2 = conv_block(2 * b + 2 * c2, 2 * b)
        self.down3 = conv_block(2 * b, 2 * b, 2)
        self.enc3 = conv_block(2 * b + 2 * c3, 2 * b)
        self.dec3 = conv_block(2 * b, 2 * b)
        self.dec2 = conv_block(4 * b, 2 * b)
        self.dec1 = conv_block(3 * b, b)
        self.out = _zero_(nn.Conv3d(b, 1, 3, padding=1))

    @staticmethod
    def _pair(sa, sb):
        return torch.cat([sa + sb, sa * sb], 1)

    def forward(self, fused, s_a, s_b):
        _require_divisible(fused, 4, "reconstruction input")
        for k, (a, b) in enumerate(zip(s_a, s_b)):
            expect = tuple(s // 2 ** k for s in fused.shape[2:])
            if tuple(a.shape[2:]) != expect or a.shape != b.shape:
                raise ContractViolation(f"pyramid level {k} has shape {tuple(a.shape)}, expected spatial {expect}")
        fused = fused.contiguous(memory_format=MEMORY_FORMAT)
        e1 = self.enc1(torch.cat([fused, self._pair(s_a[0], s_b[0])], 1))
        e2 = self.enc2(torch.cat([self.down2(e1), self._pair(s_a[1], s_b[1])], 1))
        e3 = self.enc3(torch.cat([self.down3(e2), self._pair(s_a[2], s_b[2])], 1))
        d = self.dec3(e3)
        d = self.dec2(torch.cat([F.interpolate(d, scale_factor=2, mode="nearest"), e2], 1))
        d = self.dec1(torch.cat([F.interpolate(d, scale_factor=2, mode="nearest"), e1], 1))
        residual = self.out(d)
        return fused + residual, residual


class ModelBundle:
    """Flow (theta), feature (omega) and reconstruction (psi) networks with
    their shared Adam state, step counter and time-sampling RNG."""

    def __init__(self, config, seed):
        self.config = config
        self.seed = int(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.theta = FlowNet(tuple(config.flow_enc), tuple(config.flow_dec))
            self.omega = FeatureExtractor(config.feature_extractor_mode)
            self.psi = ReconNet(config.recon_base)
        for net in (self.theta, self.omega, self.psi):
            net.to(memory_format=MEMORY_FORMAT)
        self.step_count = 0
        self.epoch = 0
        self.rng = np.random.default_rng(self.seed)
        self.optimizer = torch.optim.Adam(self.parameters(), lr=config.learning_rate, betas=(0.9, 0.999))

    def parameters(self):
        return [p for net in (self.theta, self.omega, self.psi) for p in net.parameters()]

    def named_tensors(self):
        out = {}
        for prefix, net in (("theta", self.theta), ("omega", self.omega), ("psi", self.psi)):
            for k, v in net.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def train(self, mode=True):
        for net in (self.theta, self.omega, self.psi):
            net.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def clone(self):
        return copy.deepcopy(self)

    def state(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": {k: v.detach().clone() for k, v in self.named_tensors().items()},
            "optimizer": self.optimizer.state_dict(),
            "step_count": self.step_count,
            "epoch": self.epoch,
            "seed": self.seed,
            "rng_state": self.rng.bit_generator.state,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
        }

    def digest(self):
        """SHA-256 over parameters, optimizer moments and counters."""
        h = hashlib.sha256()
        for k, v in sorted(self.named_tensors().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        for pid, st in sorted(self.optimizer.state_dict()["state"].items()):
            for k in sorted(st):
                h.update(f"{pid}.{k}".encode())
                h.update(torch.as_tensor(st[k]).cpu().numpy().tobytes())
        h.update(f"{self.step_count}:{self.epoch}:{self.seed}:{self.config.hash()}".encode())
        return h.hexdigest()

    def param_count(self):
        return {name: sum(p.numel() for p in net.parameters())
                for name, net in (("theta", self.theta), ("omega", self.omega), ("psi", self.psi))}


def init_bundle(seed=0, config=None):
    if config is None:
        from .cycletrain import TrainConfig
        config = TrainConfig(rng_seed=seed)
    return ModelBundle(config, seed)


def flow_pairs(bundle, pairs):
    """Flows for several ``(moving, fixed)`` pairs in a single batched pass."""
    for a, b in pairs:
        if a.shape != b.shape or a.shape[1] != 1:
            raise ContractViolation(f"flow inputs must be matching single-channel volumes, got "
                                    f"{tuple(a.shape)} and {tuple(b.shape)}")
    n = pairs[0][0].shape[0]
    out = bundle.theta(torch.cat([torch.cat([a, b], 1) for a, b in pairs], 0))
    return [out[k * n:(k + 1) * n] for k in range(len(pairs))]


def flow_forward(bundle, i0, i1):
    """Return ``(f01, f10)``; ``f10`` is the same network run on the swapped pair."""
    f01, f10 = flow_pairs(bundle, [(i0, i1), (i1, i0)])
    return f01, f10


def feature_forward(bundle, v):
    if v.shape[1] != 1:
        raise ContractViolation("feature extractor expects a single-channel volume")
    return bundle.omega(v)


def feature_many(bundle, vols):
    """Pyramids for several volumes from one batched pass."""
    n = vols[0].shape[0]
    levels = feature_forward(bundle, torch.cat(vols, 0))
    return [[lv[k * n:(k + 1) * n] for lv in levels] for k in range(len(vols))]


def recon_forward(bundle, fused, s_a, s_b):
    if fused.shape[1] != 1:
        raise ContractViolation("reconstruction expects a single-channel fused volume")
    return bundle.psi(fused, s_a, s_b)


def save_bundle(bundle, path):
    buf = io.BytesIO()
    torch.save(bundle.state(), buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_bundle(path, expected_config_hash=None, force=False):
    from .cycletrain import TrainConfig

    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except (RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as exc:
        raise OSError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise OSError(f"{path}: not a volinterp checkpoint")
    if state.get("version") != CHECKPOINT_VERSION:
        raise OSError(f"{path}: unsupported checkpoint version {state.get('version')}")
    if expected_config_hash is not None and state["config_hash"] != expected_config_hash and not force:
        raise ContractViolation(
            f"{path}: config hash {state['config_hash'][:12]} does not match {expected_config_hash[:12]} "
            "(use --force to override)")
    config = TrainConfig.from_dict(state["config"])
    bundle = ModelBundle(config, state["seed"])
    nets = {"theta": bundle.theta, "omega": bundle.omega, "psi": bundle.psi}
    for prefix, net in nets.items():
        sub = {k[len(prefix) + 1:]: v for k, v in state["params"].items() if k.startswith(prefix + ".")}
        net.load_state_dict(sub)
    bundle.optimizer.load_state_dict(state["optimizer"])
    bundle.step_count = state["step_count"]
    bundle.epoch = state["epoch"]
    bundle.rng.bit_generator.state = state["rng_state"]
    return bundle
