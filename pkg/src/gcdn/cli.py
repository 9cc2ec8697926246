"""Command-line surface: training, denoising, evaluation, noise synthesis,
and the analysis procedures.

Configuration precedence: built-in defaults, then a key=value --config file,
then explicit flags. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analysis
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_image_dir
from .imageio import list_images, load_image, save_image
from .metrics import add_awgn, psnr, ssim
from .network import (
    ModelConfig,
    build_network,
    denoise,
    model_from_checkpoint,
    parameter_count,
    train,
)


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


MODEL_FLAGS = (
    # (flag, attr, type)
    ("--sigma", "sigma", float),
    ("--patch", "patch", int),
    ("--batch", "batch", int),
    ("--iters", "iters", int),
    ("--lr-start", "lr_start", float),
    ("--lr-end", "lr_end", float),
    ("--knn", "knn", int),
    ("--window", "window", int),
    ("--features", "features", int),
    ("--lpf-blocks", "lpf_blocks", int),
    ("--rank", "rank", int),
    ("--circ-shifts", "shifts", int),
    ("--delta", "delta", float),
    ("--seed", "seed", int),
)


def add_model_flags(p):
    for flag, attr, typ in MODEL_FLAGS:
        p.add_argument(flag, dest=attr, type=typ, default=None)
    p.add_argument(
        "--attention-only", dest="attention_only", action="store_const",
        const=True, default=None,
    )
    p.add_argument("--config", default=None, help="key=value file of defaults")


def resolve_config(args):
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg = ModelConfig.from_kv(f.read())
    else:
        cfg = ModelConfig()
    for _, attr, _ in MODEL_FLAGS:
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg, attr, v)
            if attr == "features":
                cfg.branch_features = v // 3
    if getattr(args, "attention_only", None) is not None:
        cfg.attention_only = args.attention_only
    return cfg.validate()


def build_parser():
    parser = CliParser(prog="gcdn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a denoiser on a directory of clean images")
    add_model_flags(p)
    p.add_argument("--data", required=True, help="directory of clean .pgm/.png images")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise images with a trained checkpoint")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output file (single input) or directory")
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM between reference and test images")
    p.add_argument("--clean", required=True, help="reference image or directory")
    p.add_argument("--test", required=True, help="test image or directory")
    p.add_argument("--out", default="-", help="TSV output path, '-' for stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth-noise", help="add white Gaussian noise to an image")
    p.add_argument("input")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_noise)

    p = sub.add_parser("analyze", help="feature-analysis reports")
    p.add_argument(
        "what",
        choices=[
            "receptive-field",
            "distance-map",
            "feature-dft",
            "edge-accuracy",
            "memory-report",
        ],
    )
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--pixel", default=None, help="y,x target pixel")
    p.add_argument("--layers", default=None, help="layer span a:b (names or indices)")
    p.add_argument("--layer", type=int, default=0, help="graph layer index")
    p.add_argument("--block", default="lpf1", help="block name for feature-dft")
    p.add_argument("--ktrue", default="4,8,16", help="true-graph neighbor counts")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--outdir", default=".")
    # memory-report sizing
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--pixels", type=int, default=1024)
    p.add_argument("--knn", type=int, default=8)
    p.add_argument("--features", type=int, default=66)
    p.add_argument("--features-out", type=int, default=None)
    p.add_argument("--rank", type=int, default=10)
    p.set_defaults(func=cmd_analyze)

    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = resolve_config(args)
    images = load_image_dir(args.data)
    model = build_network(cfg, seed=cfg.seed)
    if not args.quiet:
        print(
            f"training: {len(images)} images, {parameter_count(model)} parameters, "
            f"{cfg.iters} iterations",
            file=sys.stderr,
        )
    step = max(1, cfg.iters // 50)

    def progress(t, loss):
        if not args.quiet and (t % step == 0 or t == cfg.iters - 1):
            print(f"iter {t}: loss {loss:.6f}", file=sys.stderr)

    ckpt, losses = train(model, images, cfg, callback=progress)
    save_checkpoint(args.out, ckpt)
    analysis.write_tsv(
        args.out + ".loss.tsv",
        ["iteration", "loss"],
        [[i, v] for i, v in enumerate(losses)],
    )
    print(args.out)
    return 0


def cmd_denoise(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    multi = len(args.inputs) > 1
    if multi:
        os.makedirs(args.out, exist_ok=True)

    def run(path):
        noisy = load_image(path)
        out = denoise(model, noisy, tile=args.tile, window=args.window)
        dest = (
            os.path.join(args.out, os.path.basename(path)) if multi else args.out
        )
        save_image(dest, out)
        return dest

    with ThreadPoolExecutor(max_workers=os.cpu_count() or 1) as pool:
        for dest in pool.map(run, args.inputs):
            print(dest)
    return 0


def _pair_images(clean, test):
    if os.path.isdir(clean) != os.path.isdir(test):
        raise ValueError("--clean and --test must both be files or both directories")
    if not os.path.isdir(clean):
        return [(os.path.basename(test), clean, test)]
    pairs = []
    testdir = {os.path.basename(p): p for p in list_images(test)}
    for cpath in list_images(clean):
        name = os.path.basename(cpath)
        if name not in testdir:
            raise FileNotFoundError(f"no test image matching {name}")
        pairs.append((name, cpath, testdir[name]))
    return pairs


def cmd_eval(args):
    pairs = _pair_images(args.clean, args.test)

    def run(item):
        name, cpath, tpath = item
        a = load_image(cpath)
        b = load_image(tpath)
        return [name, psnr(a, b), ssim(a, b)]

    with ThreadPoolExecutor(max_workers=os.cpu_count() or 1) as pool:
        rows = list(pool.map(run, pairs))
    header = ["image", "psnr_db", "ssim"]
    if args.out == "-":
        print("\t".join(header))
        for row in rows:
            print("\t".join(analysis._fmt(v) for v in row))
    else:
        analysis.write_tsv(args.out, header, rows)
        print(args.out)
    return 0


def cmd_synth_noise(args):
    img = load_image(args.input)
    noisy = add_awgn(img, args.sigma, seed=args.seed)
    save_image(args.out, noisy)
    print(args.out)
    return 0


def _parse_pixel(spec, default=None):
    if spec is None:
        return default
    y, _, x = spec.partition(",")
    return int(y), int(x)


def cmd_analyze(args):
    if args.what == "memory-report":
        report = analysis.memory_report_analysis(
            args.batch, args.pixels, args.knn, args.features,
            args.features_out, args.rank,
        )
        full, low = report.rows[0][-2], report.rows[0][-1]
        print(f"full_bytes\t{full}")
        print(f"lowrank_bytes\t{low}")
        report.save(args.outdir)
        return 0
    if not args.checkpoint or not args.image:
        raise ValueError(f"analyze {args.what} requires --checkpoint and --image")
    ckpt = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    h, w = image.shape
    pixel = _parse_pixel(args.pixel, (h // 2, w // 2))
    if args.what == "receptive-field":
        report = analysis.analyze_receptive_field(
            ckpt, image, pixel, layers=args.layers, window=args.window
        )
    elif args.what == "distance-map":
        report = analysis.analyze_distance_map(
            ckpt, image, pixel, layer=args.layer, window=args.window
        )
    elif args.what == "feature-dft":
        report = analysis.analyze_feature_dft(
            ckpt, image, args.block, window=args.window
        )
    else:
        ks = tuple(int(k) for k in args.ktrue.split(","))
        report = analysis.analyze_edge_accuracy(
            ckpt, image, ks, sigma=args.sigma, seed=args.seed, window=args.window
        )
    for path in report.save(args.outdir):
        print(path)
    return 0


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args) or 0
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:  # runtime failures exit 2 with a message
        print(f"gcdn: error: {e}", file=sys.stderr)
        return 2


def entrypoint():
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
