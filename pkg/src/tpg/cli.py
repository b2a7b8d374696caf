"""Command-line entry point: ``tpg <command> [options]``.

Failures print one line ``error <CODE>: <message>`` to stderr and exit with 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from tpg import TPGError, ConfigError, StateError, __version__
from tpg.config import ABLATIONS, RunConfig, load_config


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="run seed (also the dataset seed)")
    p.add_argument("--out", type=Path, required=True, help="output directory (or file for infer)")
    p.add_argument("--ablate", default="", help=f"comma-separated subset of {','.join(ABLATIONS)}")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. sldm.steps=200 (repeatable)")
    p.add_argument("--steps", type=int, help="sampler steps")
    p.add_argument("--guidance", type=float, help="guidance scale")
    p.add_argument("--eta", type=float, help="sampler eta (0 = deterministic)")


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"data.seed={args.seed}"]
    if args.ablate:
        names = [a.strip() for a in args.ablate.split(",") if a.strip()]
        overrides.append("ablate=" + json.dumps(names))
    for flag, key in (("steps", "sampler.steps"), ("guidance", "sampler.guidance"), ("eta", "sampler.eta")):
        if getattr(args, flag) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    return load_config(args.config, overrides)


def _echo(run: RunConfig, out_dir: Path | None) -> None:
    print(run.to_json())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.json").write_text(run.to_json() + "\n")


def _require(path: Path, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise StateError(f"{what} not found: {path}")
    return Path(path)


def cmd_gen_data(args) -> None:
    from tpg.data import build_dataset

    run = resolve_config(args)
    _echo(run, args.out)
    manifest = build_dataset(run.data, args.out)
    print(f"manifest {manifest}")


def cmd_train_ldn(args) -> None:
    from tpg.training import DatasetArrays, train_ldn

    run = resolve_config(args)
    _echo(run, args.out)
    data = DatasetArrays.from_manifest(_require(args.data, "manifest"))
    ckpt = train_ldn(run, data, args.out, resume=args.resume)
    print(f"checkpoint {ckpt}")


def cmd_train_sldm(args) -> None:
    from tpg.training import DatasetArrays, load_ldn, train_sldm

    run = resolve_config(args)
    ldn_path = args.ldn or args.out / "ldn.pt"
    if not Path(ldn_path).exists():
        raise StateError(f"stage II needs a stage-I checkpoint; {ldn_path} does not exist")
    _echo(run, args.out)
    data = DatasetArrays.from_manifest(_require(args.data, "manifest"))
    ldn, meta = load_ldn(ldn_path, run)
    ckpt = train_sldm(run, data, ldn, meta, args.out, resume=args.resume)
    print(f"checkpoint {ckpt}")


def _generator(args, run):
    from tpg.training import PatternGenerator

    return PatternGenerator.from_checkpoints(_require(args.ldn, "stage-I checkpoint"),
                                             _require(args.sldm, "stage-II checkpoint"), run)


def cmd_infer(args) -> None:
    from tpg.data import _save_rgb, load_mask, load_rgb, quantize

    run = resolve_config(args)
    _echo(run, None)
    gen = _generator(args, run)
    clothing = torch.from_numpy(load_rgb(_require(args.clothing, "clothing image")))[None]
    if args.mask is not None:
        mask = torch.from_numpy(load_mask(_require(args.mask, "mask")).astype(np.float32))[None]
    else:
        mask = torch.ones(clothing.shape[:3])
    if clothing.shape[1] != gen.run.data.image_size or clothing.shape[2] != gen.run.data.image_size:
        raise ConfigError(f"image must be {gen.run.data.image_size}x{gen.run.data.image_size}")
    out = gen.generate(clothing, mask, seeds=[args.sample_seed])[0]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    _save_rgb(args.out, quantize(out.numpy()))
    print(f"image {args.out}")


def cmd_evaluate(args) -> None:
    from tpg.metrics import evaluate_dataset
    from tpg.training import DatasetArrays

    run = resolve_config(args)
    _echo(run, args.out)
    gen = _generator(args, run)
    data = DatasetArrays.from_manifest(_require(args.data, "manifest"))
    report = evaluate_dataset(data, gen, args.out / "report.json",
                              image_dir=args.out / "images" if args.save_images else None)
    print(json.dumps({"count": report["count"], "means": report["means"]}, sort_keys=True))


def cmd_analyze_features(args) -> None:
    from tpg.codec import encode
    from tpg.metrics import feature_distance_report
    from tpg.training import DatasetArrays, load_ldn

    run = resolve_config(args)
    _echo(run, args.out)
    paths = list(args.ldn or [])
    if args.series is not None:
        paths = sorted(_require(args.series, "checkpoint directory").glob("ldn_step*.pt")) + paths
    if not paths:
        raise StateError("no stage-I checkpoints given")
    data = DatasetArrays.from_manifest(_require(args.data, "manifest"))
    lab = torch.from_numpy(data.labeled_indices())
    r = run.sldm.codec_factor
    z_c, z_p = encode(data.clothing[lab], r), encode(data.pattern[lab], r)
    nets = [load_ldn(p)[0] for p in paths]
    report = feature_distance_report(z_c, z_p, nets, [str(p) for p in paths])
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "features.json", "w") as f:
        json.dump(report, f, indent=2)
    for e in report["series"]:
        print(json.dumps(e))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build a synthetic dataset")
    _common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-ldn", help="stage I")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="manifest.jsonl")
    p.add_argument("--resume", type=Path)
    p.set_defaults(fn=cmd_train_ldn)

    p = sub.add_parser("train-sldm", help="stage II (needs a stage-I checkpoint)")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ldn", type=Path, help="stage-I checkpoint (default OUT/ldn.pt)")
    p.add_argument("--resume", type=Path)
    p.set_defaults(fn=cmd_train_sldm)

    p = sub.add_parser("infer", help="generate a pattern PNG for one clothing image")
    _common(p)
    p.add_argument("--clothing", type=Path, required=True)
    p.add_argument("--mask", type=Path)
    p.add_argument("--ldn", type=Path, required=True)
    p.add_argument("--sldm", type=Path, required=True)
    p.add_argument("--sample-seed", type=int, default=0)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("evaluate", help="generate and score a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ldn", type=Path, required=True)
    p.add_argument("--sldm", type=Path, required=True)
    p.add_argument("--save-images", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("analyze-features", help="feature centroid distances over stage-I checkpoints")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ldn", type=Path, nargs="*", help="stage-I checkpoints")
    p.add_argument("--series", type=Path, help="directory of periodic stage-I checkpoints")
    p.set_defaults(fn=cmd_analyze_features)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except TPGError as e:
        print(f"error {e.code}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error IO_ERROR: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
