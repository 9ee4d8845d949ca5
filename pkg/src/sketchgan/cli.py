"""Command-line entry point: ``sketchgan {toygen,prepare,train,synth,eval}``.

Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DataError, write_keyvalue

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("sketchgan")


class UsageError(ValueError):
    pass


def _record_args(directory: Path, command: str, args: argparse.Namespace) -> None:
    values = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    write_keyvalue(Path(directory) / f"{command}.args", {"command": command, **values})


# --------------------------------------------------------------------------
# subcommands


def cmd_toygen(args) -> int:
    from .data import generate_toy_dataset

    if args.subjects < 2:
        raise UsageError(f"--subjects must be >= 2, got {args.subjects}")
    if args.per_subject < 1:
        raise UsageError(f"--per-subject must be >= 1, got {args.per_subject}")
    manifest = generate_toy_dataset(args.subjects, args.per_subject, (args.size, args.size), args.seed, args.out)
    _record_args(args.out, "toygen", args)
    print(f"wrote {len(manifest.records)} images to {args.out}")
    print(f"content_hash {manifest.content_hash}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    from .data import DatasetManifest, XdogParams, sketch_manifest

    try:
        params = XdogParams(sigma=args.sigma, k=args.k, tau=args.tau, epsilon_t=args.epsilon, phi=args.phi)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = DatasetManifest.read(args.manifest)
    out = sketch_manifest(manifest, params, force=args.force)
    _record_args(out.root, "prepare", args)
    print(f"wrote {len(out.records)} sketches under {out.root}")
    return EXIT_OK


def _run_config(args):
    from .config import RunConfig, read_config
    from .trainer import TrainConfig, toy_config

    if args.config is not None:
        base = read_config(args.config)
    else:
        base = RunConfig(toy_config() if args.toy else TrainConfig())
    overrides = {
        "seed": args.seed,
        "batch_size": args.batch_size,
        "base_lr": args.lr,
        "num_critics": args.critics,
        "checkpoint_every": args.checkpoint_every,
    }
    paths = {"manifest": args.manifest, "out": args.out}
    try:
        cfg = base.with_overrides(overrides, paths)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for key in ("manifest", "out"):
        if key not in cfg.paths:
            raise UsageError(f"--{key} is required (or set it under [paths] in the config)")
    return cfg


def cmd_train(args) -> int:
    from .config import write_config
    from .data import DatasetManifest
    from .trainer import fit

    cfg = _run_config(args)
    out = Path(cfg.paths["out"])
    manifest = DatasetManifest.read(cfg.paths["manifest"])
    write_config(out / "run.cfg", cfg)
    ckpt = fit(manifest, cfg.train, out, resume=args.resume, max_steps=args.max_steps)
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_synth(args) -> int:
    import torch

    from .conditioning import attrs_from_names, attrs_to_tag, concat_condition
    from .data import load_image, save_image, xdog_sketch
    from .layers import FadeInState
    from .trainer import Trainer

    try:
        targets = [attrs_from_names(a, rec=0) for a in args.attrs]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    trainer = Trainer.load(args.checkpoint)
    index = json.loads((Path(args.checkpoint) / "index.json").read_text())
    res = int(index["resolution"])
    fade = FadeInState.fixed(res, float(index["alpha"]))
    sketch = load_image(args.sketch, (res, res))
    if sketch.shape[1] == 3:
        sketch = xdog_sketch(sketch, trainer.config.xdog)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    G = trainer.bundle.G_x.eval()
    stem = Path(args.sketch).stem
    for attrs in targets:
        with torch.no_grad():
            photo = G(concat_condition(torch.from_numpy(sketch), attrs[None]), fade).numpy()
        path = out / f"{stem}_{attrs_to_tag(attrs)}.png"
        save_image(path, photo)
        print(path)
    _record_args(out, "synth", args)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import DatasetManifest
    from .metrics import evaluate_checkpoint

    manifest = DatasetManifest.read(args.manifest)
    report = evaluate_checkpoint(args.checkpoint, manifest, args.out, seed=args.seed)
    _record_args(Path(args.out).parent, "eval", args)
    print(json.dumps({k: report[k] for k in ("ssim", "toy-FID", "toy-IS")}, sort_keys=True))
    print(f"cmc rank-1 {report['cmc']['rank1']:.4f}  roc auc {report['roc']['auc']:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="sketchgan", description="Attribute-conditioned sketch-to-photo GAN.",
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("toygen", help="render a toy face dataset", formatter_class=fmt)
    p.add_argument("--subjects", type=int, default=50, help="number of identities (>= 2)")
    p.add_argument("--per-subject", type=int, default=4, help="images per identity")
    p.add_argument("--size", type=int, default=64, help="image side, a power of two")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("prepare", help="write XDoG sketches for a manifest", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest.csv or its directory")
    p.add_argument("--sigma", type=float, default=1.0, help="inner Gaussian scale")
    p.add_argument("--k", type=float, default=1.6, help="outer/inner scale ratio")
    p.add_argument("--tau", type=float, default=0.98, help="outer Gaussian weight")
    p.add_argument("--epsilon", type=float, default=0.0, help="threshold")
    p.add_argument("--phi", type=float, default=200.0, help="soft threshold sharpness")
    p.add_argument("--force", action="store_true", help="overwrite existing sketches")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on a manifest", formatter_class=fmt)
    p.add_argument("--config", default=None, help="run config file; flags override its values")
    p.add_argument("--manifest", default=None, help="manifest.csv or its directory")
    p.add_argument("--out", default=None, help="run directory (logs, checkpoints, run.cfg)")
    p.add_argument("--toy", action="store_true", help="start from the toy-run preset instead of the defaults")
    p.add_argument("--seed", type=int, default=None, help="random seed (config value if omitted)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (config value if omitted)")
    p.add_argument("--lr", type=float, default=None, help="base learning rate (config value if omitted)")
    p.add_argument("--critics", type=int, default=None, help="number of critics per domain")
    p.add_argument("--checkpoint-every", type=int, default=None, help="steps between checkpoints")
    p.add_argument("--max-steps", type=int, default=None, help="stop early after this many steps")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesise photos from one sketch", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--sketch", required=True, help="sketch PNG (an RGB photo is sketched first)")
    p.add_argument("--attrs", action="append", required=True,
                   help="target attributes, e.g. black_hair=1,young=1 (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--manifest", required=True, help="manifest.csv or its directory")
    p.add_argument("--out", required=True, help="report path (JSON); cmc.csv and roc.csv go beside it")
    p.add_argument("--seed", type=int, default=0, help="seed for target-attribute sampling")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    from .config import ConfigError
    from .trainer import ConfigMismatchError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    except FloatingPointError as exc:
        print(f"sketchgan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigMismatchError, FileNotFoundError, FileExistsError, OSError) as exc:
        print(f"sketchgan: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"sketchgan: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
