"""Command-line entry point: ``volinterp <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from .volcore import ContractViolation, Volume, configure_determinism, deterministic_mode, read_uviv, write_uviv

log = logging.getLogger("volinterp")

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2
HELP_WIDTH = 100
DEFAULT_AUGMENT_TS = ",".join(f"{k / 10:g}" for k in range(1, 11))


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for I/O failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.required:
            return action.help
        return super()._get_help_string(action)


def _formatter(prog):
    return _HelpFormatter(prog, width=HELP_WIDTH)


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def frame_name(t, prefix="frame"):
    return f"{prefix}_t{t:g}.uviv"


def parse_frame_time(path):
    stem = Path(path).stem
    if "_t" not in stem:
        raise ContractViolation(f"{path}: file name carries no _t<time> suffix")
    return float(stem.rsplit("_t", 1)[1])


def read_pairs(path):
    """Manifest lines hold 2 (images) or 4 (images + labels) whitespace-separated
    paths; relative paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 4):
            raise ContractViolation(f"{path}:{lineno}: expected 2 or 4 paths, got {len(parts)}")
        rows.append([Path(p) if Path(p).is_absolute() else base / p for p in parts])
    if not rows:
        raise ContractViolation(f"{path}: manifest lists no pairs")
    if len({len(r) for r in rows}) != 1:
        raise ContractViolation(f"{path}: mix of labelled and unlabelled rows")
    return rows


def _version():
    try:
        from importlib.metadata import version
        ver = version("artifact")
    except Exception:
        ver = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5).stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        rev = None
    return {"package": ver, "git": rev}


def _rel(path, out):
    if path is None:
        return None
    path = Path(path).resolve()
    try:
        return str(path.relative_to(out.resolve()))
    except ValueError:
        return str(path)


def write_run_manifest(out, args, inputs=(), config=None, checkpoint=None, extra=None):
    out = Path(out)
    manifest = {
        "command": args.command,
        "argv": getattr(args, "argv", None),
        "config_file": _rel(getattr(args, "config", None), out),
        "inputs": [_rel(p, out) for p in inputs],
        "output_dir": ".",
        "seed": getattr(args, "seed", None),
        "checkpoint": _rel(checkpoint, out),
        "resolved_config": config,
        "deterministic": deterministic_mode(),
        "version": _version(),
    }
    if extra:
        manifest.update(extra)
    with open(out / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return manifest


def _hard_label(vol: Volume):
    data = vol.data[0]
    hard = np.rint(data).astype(np.int64)
    if not np.array_equal(hard, data) or hard.min() < 0:
        raise ContractViolation("label volumes must hold non-negative integer values")
    return hard


def _resolve_config(args):
    from .cycletrain import TrainConfig

    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ContractViolation(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    overrides = TrainConfig.parse_values(overrides)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**overrides)


def _load_checkpoint(args):
    from .nets import load_bundle

    expected = None
    if getattr(args, "config", None):
        from .cycletrain import TrainConfig
        expected = TrainConfig.from_file(args.config).hash()
    return load_bundle(args.checkpoint, expected_config_hash=expected, force=args.force)


# commands

def cmd_phantom(args):
    from .preprocess import Phantom, PhantomSpec, phantom_pair

    spec = PhantomSpec(kind=args.kind, shape=args.shape, amplitude=args.amplitude,
                       noise_sigma=args.noise_sigma, seed=args.seed)
    out = Path(args.out)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    i0, i1, gt = phantom_pair(spec)
    write_uviv(out / "i0.uviv", i0)
    write_uviv(out / "i1.uviv", i1)
    for t in args.ts:
        write_uviv(out / "gt" / frame_name(t), gt(t))
    (out / "pairs.txt").write_text("i0.uviv i1.uviv\n")
    if spec.kind != "sinusoidal_deformation":
        ph = Phantom(spec)
        for name, t in (("s0.uviv", 0.0), ("s1.uviv", 1.0)):
            write_uviv(out / name, Volume(ph.label(t).astype(np.float32)))
        (out / "labeled_pairs.txt").write_text("i0.uviv i1.uviv s0.uviv s1.uviv\n")
    write_run_manifest(out, args, extra={"phantom": vars(spec)})
    print(f"wrote phantom pair and {len(args.ts)} ground-truth frames to {out}")


def cmd_preprocess(args):
    from .preprocess import PreprocessSpec, preprocess_pair

    overrides = {"modality": args.modality, "target_shape": args.shape}
    if args.config:
        spec = PreprocessSpec.from_file(args.config, **overrides)
    else:
        spec = PreprocessSpec(**{k: v for k, v in overrides.items() if v is not None})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw0, raw1 = read_uviv(args.i0), read_uviv(args.i1)
    a, b = preprocess_pair(raw0.data[0], raw1.data[0], spec)
    write_uviv(out / "i0.uviv", a)
    write_uviv(out / "i1.uviv", b)
    (out / "pairs.txt").write_text("i0.uviv i1.uviv\n")
    write_run_manifest(out, args, inputs=[args.i0, args.i1], extra={"preprocess": vars(spec)})
    print(f"preprocessed pair written to {out}")


def cmd_train(args):
    from .augment import LabelVolume
    from .cycletrain import train
    from .nets import load_bundle

    cfg = _resolve_config(args)
    rows = read_pairs(args.manifest)
    pairs, labels = [], None
    for row in rows:
        pairs.append((read_uviv(row[0]).tensor(), read_uviv(row[1]).tensor()))
    if len(rows[0]) == 4 and cfg.use_dice:
        hard = [(_hard_label(read_uviv(r[2])), _hard_label(read_uviv(r[3]))) for r in rows]
        k = max(int(max(h0.max(), h1.max())) for h0, h1 in hard) + 1
        k = max(k, 2)
        labels = [(LabelVolume.from_hard(h0, k).tensor(), LabelVolume.from_hard(h1, k).tensor())
                  for h0, h1 in hard]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = None
    if args.resume:
        bundle = load_bundle(args.resume, expected_config_hash=cfg.hash(), force=args.force)
    write_run_manifest(out, args, inputs=[p for r in rows for p in r], config=cfg.to_dict(),
                       checkpoint=args.resume, extra={"config_hash": cfg.hash()})

    def report(rec, bd):
        if rec["pair"] == len(pairs) - 1:
            print(f"epoch {rec['epoch'] + 1}/{cfg.epochs} step {rec['step']} loss {bd.total:.5f}", flush=True)

    bundle, _ = train(pairs, cfg, out_dir=out, bundle=bundle, label_pairs=labels, callback=report)
    print(f"final checkpoint: {out / 'checkpoints' / f'epoch_{bundle.epoch:04d}.ckpt'}")


def cmd_infer(args):
    from .interp import InterpolationRequest, instance_optimize, run_request

    bundle = _load_checkpoint(args)
    i0, i1 = read_uviv(args.i0), read_uviv(args.i1)
    mode = "cycle" if args.mode == "cycle" else "linear_baseline"
    requests = [InterpolationRequest(t, mode, args.extrapolate) for t in args.t]
    if args.instance_opt:
        bundle = instance_optimize(bundle, i0, i1, steps=args.instance_opt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for req in requests:
        frame = run_request(bundle, i0, i1, req)
        frames.append(frame)
        write_uviv(out / frame_name(req.t), frame)
    if args.montage:
        from .plotting import plot_montage
        plot_montage(frames, args.t, out / "montage.png")
    write_run_manifest(out, args, inputs=[args.i0, args.i1], config=bundle.config.to_dict(),
                       checkpoint=args.checkpoint, extra={"mode": mode, "ts": args.t})
    print(f"wrote {len(frames)} frames to {out}")


def cmd_optimize(args):
    from .interp import instance_optimize
    from .nets import save_bundle

    bundle = _load_checkpoint(args)
    i0, i1 = read_uviv(args.i0), read_uviv(args.i1)
    tuned = instance_optimize(bundle, i0, i1, steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(tuned, out / "optimized.ckpt")
    write_run_manifest(out, args, inputs=[args.i0, args.i1], config=tuned.config.to_dict(),
                       checkpoint=args.checkpoint, extra={"steps": args.steps})
    print(f"fine-tuned checkpoint written to {out / 'optimized.ckpt'}")


def cmd_eval(args):
    from .evalkit import evaluate_sequence
    from .plotting import plot_metrics

    gt_files = {parse_frame_time(p): p for p in sorted(Path(args.gt_dir).glob("*_t*.uviv"))}
    pred_files = {parse_frame_time(p): p for p in sorted(Path(args.pred_dir).glob("*_t*.uviv"))}
    ts = sorted(set(gt_files) & set(pred_files))
    if not ts:
        raise ContractViolation("no frame times shared by --gt-dir and --pred-dir")
    missing = sorted(set(gt_files) ^ set(pred_files))
    if missing:
        log.warning("ignoring unmatched frame times: %s", missing)
    gts = [read_uviv(gt_files[t]) for t in ts]
    preds = [read_uviv(pred_files[t]) for t in ts]
    report = evaluate_sequence(gts, preds, ts, metadata={"gt_dir": str(args.gt_dir),
                                                         "pred_dir": str(args.pred_dir)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    plot_metrics(report, out / "metrics.png")
    write_run_manifest(out, args, inputs=[gt_files[t] for t in ts] + [pred_files[t] for t in ts])
    print(",".join(("t", "psnr_db", "ncc", "ssim", "nmse")))
    for r in report.rows:
        print(f"{r.t:g},{r.psnr_db:.4f},{r.ncc:.6f},{r.ssim:.6f},{r.nmse:.6e}")
    means = report.means
    print(f"mean,{means['psnr_db']:.4f},{means['ncc']:.6f},{means['ssim']:.6f},{means['nmse']:.6e}")


def cmd_augment(args):
    from .augment import LabelVolume, augment_pair

    bundle = _load_checkpoint(args)
    rows = read_pairs(args.pairs)
    if len(rows[0]) != 4:
        raise ContractViolation("augment needs manifest rows with images and labels (4 paths)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for k, row in enumerate(rows):
        i0, i1 = read_uviv(row[0]), read_uviv(row[1])
        h0, h1 = _hard_label(read_uviv(row[2])), _hard_label(read_uviv(row[3]))
        num = max(int(h0.max()), int(h1.max()), 1) + 1
        s0, s1 = LabelVolume.from_hard(h0, num), LabelVolume.from_hard(h1, num)
        for t in args.ts:
            image, label = augment_pair(bundle, i0, i1, s0, s1, t)
            write_uviv(out / frame_name(t, f"pair{k:03d}_image"), image)
            write_uviv(out / frame_name(t, f"pair{k:03d}_label"), Volume(label.hard.astype(np.float32)))
            count += 1
    write_run_manifest(out, args, inputs=[p for r in rows for p in r], config=bundle.config.to_dict(),
                       checkpoint=args.checkpoint, extra={"ts": args.ts})
    print(f"wrote {count} image/label pairs to {out}")


def cmd_gradcheck(args):
    from .losses import gradient_suite

    reports = gradient_suite(seed=args.seed)
    for rep in reports:
        print(rep)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CONTRACT


def build_parser():
    parser = Parser(prog="volinterp", description="Unsupervised volumetric frame interpolation.",
                    formatter_class=_formatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=_formatter)
        p.set_defaults(func=fn)
        return p

    p = add("phantom", cmd_phantom, "write an analytic phantom pair with ground-truth frames")
    p.add_argument("--kind", default="translating_sphere",
                   choices=("translating_sphere", "expanding_sphere", "sinusoidal_deformation"),
                   help="analytic scene")
    p.add_argument("--shape", type=_ints, default=(64, 64, 64), help="depth,height,width")
    p.add_argument("--amplitude", type=float, default=6.0, help="motion amplitude in voxels")
    p.add_argument("--noise-sigma", type=float, default=0.01, help="Gaussian noise on the endpoints")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--ts", type=_floats, default=[0.25, 0.5, 0.75], help="ground-truth frame times")
    p.add_argument("--out", required=True, help="output directory")

    p = add("preprocess", cmd_preprocess, "window, clean, resize and normalize a raw pair")
    p.add_argument("--i0", required=True, help="first raw volume (UVIV)")
    p.add_argument("--i1", required=True, help="second raw volume (UVIV)")
    p.add_argument("--config", default=None, help="key=value preprocessing config")
    p.add_argument("--modality", default=None, choices=("cardiac_mri", "lung_ct", "phantom"),
                   help="overrides the config file")
    p.add_argument("--shape", type=_ints, default=None,
                   help="target depth,height,width (modality default when unset)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, "train the interpolation model on endpoint pairs")
    p.add_argument("--manifest", required=True, help="file listing endpoint pairs")
    p.add_argument("--config", default=None, help="key=value training config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--epochs", type=int, default=None, help="overrides the config value")
    p.add_argument("--seed", type=int, default=None, help="overrides rng_seed")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true", help="load checkpoints despite a config-hash mismatch")
    p.add_argument("--out", required=True, help="output directory")

    p = add("infer", cmd_infer, "synthesize frames between two volumes")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--i0", required=True, help="first endpoint volume (UVIV)")
    p.add_argument("--i1", required=True, help="second endpoint volume (UVIV)")
    p.add_argument("--t", type=_floats, default=[0.5], help="comma-separated target times")
    p.add_argument("--mode", choices=("cycle", "linear"), default="cycle",
                   help="full model or the warp-only linear baseline")
    p.add_argument("--extrapolate", action="store_true", help="allow t up to 0.5 outside [0, 1]")
    p.add_argument("--instance-opt", type=int, default=0, metavar="N",
                   help="fine-tune on this pair for N steps first")
    p.add_argument("--montage", action="store_true", help="also save a mid-slice montage PNG")
    p.add_argument("--config", default=None, help="training config the checkpoint must match")
    p.add_argument("--force", action="store_true", help="load despite a config-hash mismatch")
    p.add_argument("--out", required=True, help="output directory")

    p = add("optimize", cmd_optimize, "instance-specific fine-tuning on one pair")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--i0", required=True, help="first endpoint volume (UVIV)")
    p.add_argument("--i1", required=True, help="second endpoint volume (UVIV)")
    p.add_argument("--steps", type=int, default=100, help="fine-tuning steps")
    p.add_argument("--config", default=None, help="training config the checkpoint must match")
    p.add_argument("--force", action="store_true", help="load despite a config-hash mismatch")
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", cmd_eval, "score predicted frames against ground truth")
    p.add_argument("--gt-dir", required=True, help="directory of *_t<time>.uviv ground-truth frames")
    p.add_argument("--pred-dir", required=True, help="directory of *_t<time>.uviv predicted frames")
    p.add_argument("--out", required=True, help="directory for report.csv, report.json, metrics.png")

    p = add("augment", cmd_augment, "generate interpolated image/label pairs")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--pairs", required=True, help="manifest with image and label paths")
    p.add_argument("--ts", type=_floats, default=_floats(DEFAULT_AUGMENT_TS), help="frame times")
    p.add_argument("--config", default=None, help="training config the checkpoint must match")
    p.add_argument("--force", action="store_true", help="load despite a config-hash mismatch")
    p.add_argument("--out", required=True, help="output directory")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the loss gradients")
    p.add_argument("--seed", type=int, default=0, help="seed for the random test inputs")
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONTRACT
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_determinism()
    try:
        code = args.func(args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
