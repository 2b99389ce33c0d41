"""Command-line interface: ``tokenmark <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Thread-count
environment variables are set from ``--threads`` before numpy is imported.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")

SUBCOMMANDS = (
    "dataset",
    "pretrain-vae",
    "pretrain-denoiser",
    "pretrain-detector",
    "train-token",
    "sweep-tau",
    "generate",
    "attack",
    "detect",
    "heatmap",
    "evaluate",
    "report",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=None, help="worker threads for numeric libraries")
    common.add_argument("--config", help="flat key = value run config")
    common.add_argument("--data-dir", help="cache directory (default $TOKENMARK_DATA or ~/.cache/tokenmark)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = _Parser(prog="tokenmark", description="In-generation watermarking with a learned token embedding.")
    sub = ap.add_subparsers(dest="cmd", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("dataset", parents=[common], help="synthesize the shapes corpus as PNG files")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--overlap", action="store_true", help="two overlapping objects per image")

    sub.add_parser("pretrain-vae", parents=[common], help="train (or load cached) autoencoder")
    sub.add_parser("pretrain-denoiser", parents=[common], help="train (or load cached) denoiser and text encoder")
    p = sub.add_parser("pretrain-detector", parents=[common], help="train (or load cached) detector")
    p.add_argument("--k", type=int)

    p = sub.add_parser("train-token", parents=[common], help="train the watermark token embedding")
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=int)
    p.add_argument("--out", help="copy of the trained token checkpoint")

    p = sub.add_parser("sweep-tau", parents=[common], help="accuracy / PSNR over the tau list")
    p.add_argument("--out", help="directory for the report")

    p = sub.add_parser("generate", parents=[common], help="generate an image, watermarking bracketed objects")
    p.add_argument("--prompt", required=True)
    p.add_argument("--token", help="token checkpoint (default: the cached token of the config)")
    p.add_argument("--mask", help="8x8 or 32x32 gray PNG replacing the attention region")
    p.add_argument("--n", type=int, default=1, help="number of images (seeds seed, seed+1, ...)")
    p.add_argument("--out", default="out.png")

    p = sub.add_parser("attack", parents=[common], help="apply an attack spec to a PNG")
    p.add_argument("--image", required=True)
    p.add_argument("--attack", required=True, help="e.g. jpeg:80, blur:1, crop:0.1, identity")
    p.add_argument("--crop-mode", choices=("remove", "keep"), default="remove")
    p.add_argument("--out", required=True)

    for name, helptext in (("detect", "decode the key from a PNG"), ("heatmap", "sliding-patch accuracy heatmap")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--image", required=True)
        p.add_argument("--detector", help="detector checkpoint (default: cached detector of the config)")
        p.add_argument("--key-file", help="text file of 0/1 characters (default: the config key)")
        p.add_argument("--fpr", type=float)
        if name == "heatmap":
            p.add_argument("--patch", type=int)
            p.add_argument("--stride", type=int)
            p.add_argument("--sigma", type=float)
            p.add_argument("--out", default="heatmap.png")

    p = sub.add_parser("evaluate", parents=[common], help="run the configured experiment, print the JSON report")
    p.add_argument("--experiment", choices=("table1", "table2", "bits", "tau"))
    p.add_argument("--out", help="directory for the report and artifacts")

    p = sub.add_parser("report", parents=[common], help="summarize report.json files")
    p.add_argument("reports", nargs="+")
    return ap


def _apply_threads(n) -> None:
    if n is not None:
        if n < 1:
            raise UsageError("--threads must be >= 1")
        for v in THREAD_VARS:
            os.environ[v] = str(n)


def _config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.data_dir:
        kw["data_dir"] = args.data_dir
    for name in ("k", "tau", "experiment"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return cfg.replace(**kw) if kw else cfg


def _key(args, cfg, k):
    import numpy as np

    from .pipeline import make_key

    if args.key_file:
        text = open(args.key_file).read()
        bits = [c for c in text if c in "01"]
        if not bits:
            raise ValueError(f"no 0/1 characters in {args.key_file}")
        return np.array([int(c) for c in bits], dtype=np.uint8)
    return make_key(k, cfg.key_seed)


def _detector(args, ws):
    from .pipeline import load_detector

    return load_detector(args.detector) if args.detector else ws.detector()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_dataset(args, cfg, ws):
    from pathlib import Path

    from .dataset import make_shapes_dataset
    from .imageio import write_png

    out = Path(args.out)
    samples = make_shapes_dataset(args.n, cfg.dataset_seed if args.seed is None else args.seed, overlap=args.overlap)
    meta = []
    for i, s in enumerate(samples):
        write_png(out / f"{i:05d}.png", s.image)
        for j, m in enumerate(s.masks):
            write_png(out / f"{i:05d}_mask{j}.png", m.astype("float32"))
        meta.append({"file": f"{i:05d}.png", "caption": s.caption})
    (out / "captions.json").write_text(json.dumps(meta, indent=1))
    print(f"wrote {len(samples)} samples to {out}")


def cmd_pretrain(stage):
    def run(args, cfg, ws):
        if stage == "vae":
            ws.vae()
            path = ws.vae_path()
        elif stage == "denoiser":
            ws.denoiser()
            path = ws.denoiser_path()
        else:
            k = args.k or cfg.k
            ws.detector(k)
            path = ws.detector_path(k)
        print(path)

    return run


def cmd_train_token(args, cfg, ws):
    tok = ws.token()
    print(json.dumps({"k": tok.k, "tau": tok.tau, "loss_w": tok.meta["loss_w"][-1], "loss_z": tok.meta["loss_z"][-1]}))
    if args.out:
        tok.save(args.out)
        print(args.out)


def cmd_evaluate(args, cfg, ws):
    from .experiments import run_experiment

    report = run_experiment(cfg, ws, args.out)
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_sweep_tau(args, cfg, ws):
    from .experiments import run_experiment

    report = run_experiment(cfg.replace(experiment="tau"), ws, args.out)
    print(json.dumps({k: report[k] for k in ("sweep", "spearman_accuracy", "spearman_psnr")}, indent=2))


def cmd_generate(args, cfg, ws):
    from pathlib import Path

    from ..overlay import OverlayConfig, generate_watermarked, load_mask, parse_prompt
    from ..tokenforge import TokenEmbedding
    from .imageio import read_mask, write_png

    spec = parse_prompt(args.prompt)
    ldm = ws.ldm()
    seeds = [cfg.seed + i for i in range(args.n)]
    ocfg = OverlayConfig(cfg.alpha_ov, cfg.pi_mode, None, cfg.ramp_start, cfg.ramp_width)
    if spec.groups:
        token = TokenEmbedding.load(args.token) if args.token else ws.token()
        tokens = {g.token: token for g in spec.groups}
        masks = None
        if args.mask:
            m = load_mask(read_mask(args.mask))
            masks = {g.token: m for g in spec.groups}
        gen = generate_watermarked(ldm, spec, tokens, seeds, ocfg, masks)
        images, attention = gen.images, gen.attention
    else:
        images, attention = ldm.sample(spec.text, seeds)
    out = Path(args.out)
    paths = [out] if len(images) == 1 else [out.with_name(f"{out.stem}_{i}{out.suffix}") for i in range(len(images))]
    for p, img in zip(paths, images):
        write_png(p, img)
        print(p)
    out.with_suffix(".attention.json").write_text(json.dumps(attention.to_json()))


def cmd_attack(args, cfg, ws):
    from ..attacks import AttackSpec, apply_attack
    from .imageio import read_png, write_png

    img = read_png(args.image)
    out = apply_attack(img, AttackSpec.parse(args.attack), args.crop_mode)
    write_png(args.out, out)
    print(args.out)


def cmd_detect(args, cfg, ws):
    from ..detector import decision_threshold, detect_bits
    from .imageio import read_png

    det = _detector(args, ws)
    key = _key(args, cfg, det.k)
    if key.size != det.k:
        raise ValueError(f"key has {key.size} bits, detector decodes {det.k}")
    _, bits = detect_bits(read_png(args.image), det)
    matched = int((bits == key).sum())
    fpr = args.fpr if args.fpr is not None else cfg.fpr
    thr = decision_threshold(det.k, fpr)
    print(
        json.dumps(
            {
                "bit_accuracy": matched / det.k,
                "matched_bits": matched,
                "threshold": thr,
                "fpr": fpr,
                "watermarked": matched >= thr,
                "bits": "".join(map(str, bits.tolist())),
            }
        )
    )


def cmd_heatmap(args, cfg, ws):
    from pathlib import Path

    from ..evalmark import heatmap
    from .imageio import read_png, write_png

    det = _detector(args, ws)
    key = _key(args, cfg, det.k)
    patch = args.patch or cfg.heatmap_patch
    stride = args.stride or cfg.heatmap_stride
    sigma = cfg.heatmap_sigma if args.sigma is None else args.sigma
    hm = heatmap(read_png(args.image), key, det, patch, stride, sigma)
    out = Path(args.out)
    write_png(out, hm.values)
    out.with_suffix(".json").write_text(hm.to_json())
    print(out)


def cmd_report(args, cfg, ws):
    rows = []
    for path in args.reports:
        with open(path) as f:
            r = json.load(f)
        rows.append(
            {
                "file": path,
                "experiment": r.get("experiment"),
                "config_hash": r.get("config_hash"),
                "bit_accuracy": r.get("bit_accuracy"),
                "psnr_db": r.get("psnr_db"),
                "ssim": r.get("ssim"),
                "tpr": r.get("tpr"),
            }
        )
    print(json.dumps(rows, indent=2))


COMMANDS = {
    "dataset": cmd_dataset,
    "pretrain-vae": cmd_pretrain("vae"),
    "pretrain-denoiser": cmd_pretrain("denoiser"),
    "pretrain-detector": cmd_pretrain("detector"),
    "train-token": cmd_train_token,
    "sweep-tau": cmd_sweep_tau,
    "generate": cmd_generate,
    "attack": cmd_attack,
    "detect": cmd_detect,
    "heatmap": cmd_heatmap,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _apply_threads(args.threads)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        from .config import ConfigError
        from .pipeline import Workspace

        try:
            cfg = _config(args)
        except ConfigError as e:
            print(f"tokenmark: config error: {e}", file=sys.stderr)
            return 1
        ws = Workspace(cfg)
        COMMANDS[args.cmd](args, cfg, ws)
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # runtime failure
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"tokenmark {args.cmd}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
