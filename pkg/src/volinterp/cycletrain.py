"""Cycle-consistency training from endpoint frames only."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import torch

from . import losses
from .nets import (FEATURE_MODES, feature_many, flow_forward, flow_pairs, init_bundle,
                   pool_single_scale, recon_forward, save_bundle)
from .volcore import ContractViolation, downscale_field, warp, weighted_fuse

log = logging.getLogger(__name__)

MIN_GAP = 1e-3
# fields that change how long a run lasts, not what it computes
_RUN_LENGTH_FIELDS = ("epochs", "checkpoint_every")


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 2e-4
    batch_size: int = 1
    coef_smooth: float = 1.0
    coef_image: float = 1.0
    coef_cyc_image: float = 1.0
    coef_reg: float = 1.0
    coef_dice: float = 1.0
    ncc_window: int = 9
    ncc_mode: str = "local"
    charbonnier_eps: float = 1e-3
    rng_seed: int = 0
    feature_extractor_mode: str = "multi_scale_cnn"
    use_cyc_image: bool = True
    use_reg: bool = True
    use_dice: bool = True
    grad_clip: float = 1.0
    flow_enc: tuple = (16, 32, 32, 32)
    flow_dec: tuple = (32, 32, 32, 32, 32, 16, 16)
    recon_base: int = 16
    checkpoint_every: int = 1

    def __post_init__(self):
        self.flow_enc = tuple(int(x) for x in self.flow_enc)
        self.flow_dec = tuple(int(x) for x in self.flow_dec)
        if self.epochs < 1:
            raise ContractViolation("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be positive")
        if self.batch_size != 1:
            raise ContractViolation("only batch_size == 1 is supported")
        if self.feature_extractor_mode not in FEATURE_MODES:
            raise ContractViolation(f"feature_extractor_mode must be one of {FEATURE_MODES}")
        if self.ncc_mode not in ("local", "global"):
            raise ContractViolation("ncc_mode must be 'local' or 'global'")

    @property
    def coefficients(self):
        return {"smooth": self.coef_smooth, "image": self.coef_image, "cyc_image": self.coef_cyc_image,
                "reg": self.coef_reg, "dice": self.coef_dice}

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["flow_enc"] = list(self.flow_enc)
        d["flow_dec"] = list(self.flow_dec)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self):
        d = {k: v for k, v in self.to_dict().items() if k not in _RUN_LENGTH_FIELDS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def parse_values(cls, raw):
        """Coerce string values (config file / CLI) to the field types."""
        types = {f.name: f.default for f in dataclasses.fields(cls)}
        out = {}
        for key, value in raw.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ContractViolation(f"unknown config key {key!r}")
            default = types[key]
            value = value.strip() if isinstance(value, str) else value
            if not isinstance(value, str):
                out[key] = value
            elif isinstance(default, bool):
                if value.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ContractViolation(f"{key}: expected a boolean, got {value!r}")
                out[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    if isinstance(default, int):
                        out[key] = int(value)
                    elif isinstance(default, float):
                        out[key] = float(value)
                    elif isinstance(default, tuple):
                        out[key] = tuple(int(x) for x in value.split(","))
                    else:
                        out[key] = value
                except ValueError:
                    raise ContractViolation(f"{key}: cannot parse {value!r}") from None
        return out

    @classmethod
    def from_file(cls, path, **overrides):
        """Read a flat ``key = value`` file; ``overrides`` take precedence."""
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
        with open(path) as fh:
            parser.read_string("[config]\n" + fh.read())
        values = cls.parse_values(dict(parser["config"]))
        values.update(overrides)
        return cls(**values)


class TripleTime(NamedTuple):
    t1: float
    t2: float
    t3: float


def sample_times(rng):
    """Uniform draws t1 in [-0.5, 0], t2 in [0, 1], t3 in [1, 1.5], resampled
    until both gaps are at least ``MIN_GAP``."""
    while True:
        t1 = float(rng.uniform(-0.5, 0.0))
        t2 = float(rng.uniform(0.0, 1.0))
        t3 = float(rng.uniform(1.0, 1.5))
        if t2 - t1 >= MIN_GAP and t3 - t2 >= MIN_GAP:
            return TripleTime(t1, t2, t3)


def make_virtual(i0, i1, f01, f10, t):
    """Synthesize a frame at ``t`` from whichever endpoint is closer."""
    if not -0.5 <= t <= 1.5:
        raise ContractViolation(f"virtual time {t} outside [-0.5, 1.5]")
    if t <= 0.5:
        return warp(i0, f01 * t)
    return warp(i1, f10 * (1 - t))


def make_virtuals(i0, i1, f01, f10, times):
    """``make_virtual`` for several times with a single batched warp."""
    for t in times:
        if not -0.5 <= t <= 1.5:
            raise ContractViolation(f"virtual time {t} outside [-0.5, 1.5]")
    src = torch.cat([i0 if t <= 0.5 else i1 for t in times], 0)
    flow = torch.cat([f01 * t if t <= 0.5 else f10 * (1 - t) for t in times], 0)
    return warp(src, flow).chunk(len(times), 0)


def _split(x, n, sizes):
    return [list(c.split(sizes, 1)) for c in x.chunk(n, 0)]


def warp_moves(srcs, pyramids, flows, single_scale=False):
    """Warp each source image and its feature pyramid by the matching flow.

    All moves are stacked along the batch axis, and the image rides along
    with the full-resolution feature level, so each pyramid level costs a
    single warp.  Returns ``(images, warped_pyramids)``.
    """
    n = len(srcs)
    flow = torch.cat(flows, 0)
    levels = [torch.cat([p[k] for p in pyramids], 0) for k in range(3)]
    src = torch.cat(srcs, 0)
    if single_scale:
        sizes = [1] + [lv.shape[1] for lv in levels]
        parts = _split(warp(torch.cat([src] + levels, 1), flow), n, sizes)
        return [p[0] for p in parts], [pool_single_scale(p[1:]) for p in parts]
    top = _split(warp(torch.cat([src, levels[0]], 1), flow), n, [1, levels[0].shape[1]])
    lower = [warp(levels[k], downscale_field(flow, 0.5 ** k)).chunk(n, 0) for k in (1, 2)]
    imgs = [t[0] for t in top]
    pyrs = [[top[j][1], lower[0][j], lower[1][j]] for j in range(n)]
    return imgs, pyrs


def warp_pyramid(pyramid, flow, single_scale=False):
    """Warp each level with the flow resampled to that level's grid."""
    if single_scale:
        return pool_single_scale([warp(level, flow) for level in pyramid])
    return [warp(level, downscale_field(flow, 0.5 ** k)) for k, level in enumerate(pyramid)]


def candidate_factors(tt):
    t1, t2, t3 = tt
    return {
        "t1_to_0": -t1 / (t2 - t1),
        "t2_to_0": t2 / (t2 - t1),
        "t2_to_1": (1 - t2) / (t3 - t2),
        "t3_to_1": (t3 - 1) / (t3 - t2),
    }


def fusion_weights(tt):
    """Inverse-distance weights for the (outer, inner) candidate of each side."""
    t1, t2, t3 = tt
    w10 = t2 / (t2 - t1)
    w31 = (1 - t2) / (t3 - t2)
    return (w10, 1.0 - w10), (1.0 - w31, w31)


def _check_times(tt):
    t1, t2, t3 = tt
    if not (-0.5 <= t1 <= 0 <= t2 <= 1 <= t3 <= 1.5):
        raise ContractViolation(f"time triple out of range: {tt}")
    for name, f in candidate_factors(tt).items():
        if not 0.0 <= f <= 1.0:
            raise ContractViolation(f"candidate factor {name}={f} outside [0, 1]")


def cycle_forward(bundle, i0, i1, tt, labels=None):
    """Run the full cycle pipeline and return a dict of tensors.

    ``labels`` optionally holds one-hot ``(s0, s1)`` soft-label tensors that
    follow the image warps so that a Dice term can be formed.
    """
    _check_times(tt)
    cfg = bundle.config
    single = cfg.feature_extractor_mode == "single_scale"
    t1, t2, t3 = tt
    f01, f10 = flow_forward(bundle, i0, i1)

    v1, v2, v3 = make_virtuals(i0, i1, f01, f10, tt)
    p12, p21, p23, p32 = flow_pairs(bundle, [(v1, v2), (v2, v1), (v2, v3), (v3, v2)])

    fac = candidate_factors(tt)
    keys = ("t1_to_0", "t2_to_0", "t2_to_1", "t3_to_1")
    srcs = (v1, v2, v2, v3)
    flows = (p12 * fac["t1_to_0"], p21 * fac["t2_to_0"], p23 * fac["t2_to_1"], p32 * fac["t3_to_1"])
    moves = {k: (src, flow) for k, src, flow in zip(keys, srcs, flows)}

    p1, p2, p3 = feature_many(bundle, [v1, v2, v3])
    imgs, pyrs = warp_moves(srcs, (p1, p2, p2, p3), flows, single)
    cand = dict(zip(keys, imgs))
    feats = dict(zip(keys, pyrs))

    (w10, w20), (w21, w31) = fusion_weights(tt)
    fused0 = weighted_fuse(cand["t1_to_0"], cand["t2_to_0"], w10, w20)
    fused1 = weighted_fuse(cand["t2_to_1"], cand["t3_to_1"], w21, w31)
    # both sides share one batched reconstruction pass
    n = i0.shape[0]
    cat = [torch.cat([a, b], 0) for a, b in zip(feats["t1_to_0"], feats["t2_to_1"])]
    cbt = [torch.cat([a, b], 0) for a, b in zip(feats["t2_to_0"], feats["t3_to_1"])]
    cyc, res = recon_forward(bundle, torch.cat([fused0, fused1], 0), cat, cbt)
    cyc0, cyc1 = cyc[:n], cyc[n:]
    res0, res1 = res[:n], res[n:]
    out = {"f01": f01, "f10": f10, "virtual": (v1, v2, v3), "cand": cand,
           "fused0": fused0, "fused1": fused1, "cyc0": cyc0, "cyc1": cyc1, "res0": res0, "res1": res1}

    if labels is not None:
        from .augment import warp_soft

        s0, s1 = labels
        sv = [make_virtual_soft(s0, s1, f01, f10, t) for t in tt]
        lsrc = {"t1_to_0": sv[0], "t2_to_0": sv[1], "t2_to_1": sv[1], "t3_to_1": sv[2]}
        lc = {k: warp_soft(lsrc[k], moves[k][1]) for k in moves}
        out["label0"] = weighted_fuse(lc["t1_to_0"], lc["t2_to_0"], w10, w20)
        out["label1"] = weighted_fuse(lc["t2_to_1"], lc["t3_to_1"], w21, w31)
    return out


def make_virtual_soft(s0, s1, f01, f10, t):
    from .augment import warp_soft

    if t <= 0.5:
        return warp_soft(s0, f01 * t)
    return warp_soft(s1, f10 * (1 - t))


def assemble_loss(cfg, i0, i1, out, labels=None):
    """Weighted total (tensor) plus the float breakdown."""
    kw = dict(window=cfg.ncc_window, eps=cfg.charbonnier_eps, ncc_mode=cfg.ncc_mode)
    terms = losses.warp_terms(i0, i1, out["f01"], out["f10"], **kw)
    if cfg.use_cyc_image:
        terms["cyc_image_0"] = losses.image_loss(i0, out["cyc0"], **kw)
        terms["cyc_image_1"] = losses.image_loss(i1, out["cyc1"], **kw)
    if cfg.use_reg:
        terms["reg_0"] = losses.residual_l1(out["res0"])
        terms["reg_1"] = losses.residual_l1(out["res1"])
    if labels is not None and cfg.use_dice:
        terms["dice_0"] = losses.dice_loss(out["label0"], labels[0])
        terms["dice_1"] = losses.dice_loss(out["label1"], labels[1])
    coefs = cfg.coefficients
    total = 0
    for name, value in terms.items():
        total = total + coefs[losses.COMPONENT_COEF[name]] * value
    breakdown = losses.LossBreakdown(**{k: float(v.detach()) for k, v in terms.items()},
                                     total=float(total.detach()), coefficients=dict(coefs))
    return total, breakdown


def cycle_step(bundle, i0, i1, optimizer=None, cfg=None, labels=None, times=None):
    """One optimization step of the full objective; returns the LossBreakdown."""
    cfg = cfg or bundle.config
    optimizer = optimizer or bundle.optimizer
    tt = times if times is not None else sample_times(bundle.rng)
    bundle.train()
    optimizer.zero_grad(set_to_none=True)
    out = cycle_forward(bundle, i0, i1, tt, labels)
    total, breakdown = assemble_loss(cfg, i0, i1, out, labels)
    if not math.isfinite(breakdown.total):
        raise NonFiniteLoss(f"non-finite loss at step {bundle.step_count}: {breakdown}")
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(bundle.parameters(), cfg.grad_clip)
    optimizer.step()
    bundle.step_count += 1
    return breakdown


def train(pairs, cfg, out_dir=None, bundle=None, label_pairs=None, callback=None):
    """Train on endpoint pairs for ``cfg.epochs`` epochs (batch size 1).

    Pass a loaded ``bundle`` to resume; training continues from its epoch.
    Writes ``train_log.jsonl`` and ``checkpoints/epoch_####.ckpt`` under
    ``out_dir`` when given.  Returns ``(bundle, log_records)``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractViolation("training dataset is empty")
    if bundle is None:
        bundle = init_bundle(cfg.rng_seed, cfg)
    elif bundle.config.hash() == cfg.hash():
        # same run, possibly a longer schedule: adopt the new run length
        bundle.config = cfg
    records = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a")
    try:
        while bundle.epoch < cfg.epochs:
            for k, (i0, i1) in enumerate(pairs):
                labels = label_pairs[k] if label_pairs is not None else None
                try:
                    bd = cycle_step(bundle, i0, i1, cfg=cfg, labels=labels)
                except NonFiniteLoss:
                    log.error("halting: non-finite loss in epoch %d pair %d", bundle.epoch, k)
                    raise
                rec = {"epoch": bundle.epoch, "pair": k, "step": bundle.step_count}
                records.append((rec, bd))
                if log_fh is not None:
                    log_fh.write(bd.to_json(**rec) + "\n")
                if callback is not None:
                    callback(rec, bd)
            bundle.epoch += 1
            log.info("epoch %d done, last total %.5f", bundle.epoch, records[-1][1].total)
            if out_dir is not None and (bundle.epoch % cfg.checkpoint_every == 0 or bundle.epoch == cfg.epochs):
                save_bundle(bundle, out_dir / "checkpoints" / f"epoch_{bundle.epoch:04d}.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    return bundle, records
