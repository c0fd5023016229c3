"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .export import dump_attention
from .geometry import PointCloud, estimate_normals
from .io import ParseError, read_config, read_ply, read_xyz_table, write_ply, write_xyz_table
from .kernel import ContractError
from .network import GSTran, ModelConfig
from .synthetic import SyntheticSpec, generate_synthetic, load_manifest
from .training import NumericAbort, SegmentationData, TrainConfig, evaluate, load_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix == ".ply":
        return read_ply(path)[0]
    return read_xyz_table(path)


def _eval_split(manifest) -> str:
    for name in ("val", "test"):
        if manifest.splits.get(name):
            return name
    return "train"


def _configs(args) -> tuple[dict, dict]:
    values = read_config(args.config) if args.config else {}
    model_keys = {k: v for k, v in values.items() if k in ModelConfig.__dataclass_fields__}
    train_keys = {k: v for k, v in values.items() if k in TrainConfig.__dataclass_fields__}
    unknown = set(values) - set(model_keys) - set(train_keys)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for flag, key in (("k", "k_neighbors"), ("heads", "head_count"), ("combine_op", "combine_op"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            model_keys[key] = getattr(args, flag)
    for flag in ("seed", "epochs", "lr", "batch_size"):
        if getattr(args, flag) is not None:
            train_keys[flag] = getattr(args, flag)
    return model_keys, train_keys


def cmd_normals(args) -> int:
    if args.data:
        manifest = load_manifest(args.data)
        paths = [p for split in manifest.splits for p in manifest.files(split)]
        pairs = [(p, p) for p in paths]
    else:
        if not args.input or not args.output:
            raise UsageError("normals needs --data, or --input and --output")
        pairs = [(Path(args.input), Path(args.output))]
    for src, dst in pairs:
        cloud = _read_cloud(src)
        est = estimate_normals(cloud.positions, min(args.k, len(cloud)))
        cloud.normals = est.normals
        write_xyz_table(cloud, dst)
        print(f"{dst}\t{len(cloud)} points\t{len(est.degenerate)} degenerate")
    return EXIT_OK


def cmd_synth(args) -> int:
    test_count = args.test_count if args.test_count is not None else args.count // 4
    spec = SyntheticSpec(args.family, args.points, args.noise, args.count, test_count, args.seed, args.ratio)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {args.count} train / {test_count} test clouds to {manifest.root}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    model_keys, train_keys = _configs(args)
    model_keys.setdefault("class_count", manifest.class_count)
    try:
        model = GSTran(ModelConfig.from_dict(model_keys))
        tcfg = TrainConfig.from_dict(train_keys)
    except ValueError as e:
        raise UsageError(f"invalid configuration: {e}") from None
    train_data = SegmentationData(manifest.load("train"), model)
    split = _eval_split(manifest)
    eval_data = SegmentationData(manifest.load(split), model) if split != "train" else None
    result = train(model, train_data, tcfg, eval_data, run_dir=args.out, log=print)
    print(f"best miou {result.best_miou:.6f} at epoch {result.best_epoch}; checkpoint {Path(args.out) / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    manifest = load_manifest(args.data)
    split = args.split or _eval_split(manifest)
    report = evaluate(model, SegmentationData(manifest.load(split), model))
    print(report.line())
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint)
    cloud = _read_cloud(args.input)
    pred = model.predict_logits(cloud, args.category).argmax(-1)
    write_ply(cloud, args.output, color_by="prediction", prediction=pred)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    model = load_model(args.checkpoint)
    cloud = _read_cloud(args.input)
    files = dump_attention(model, cloud, args.query, args.out, args.category)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def cmd_info(args) -> int:
    info = {"version": __version__}
    if args.checkpoint:
        model = load_model(args.checkpoint)
        info["config"] = model.config.to_dict()
        info["parameters"] = int(sum(p.size for p in model.parameters()))
    if args.data:
        m = load_manifest(args.data)
        info["dataset"] = {"format": m.format, "mode": m.mode, "classes": m.class_names,
                           "splits": {k: len(v) for k, v in m.splits.items()}}
    print(json.dumps(info, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gstran", description="Point cloud segmentation with local and global transformers.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("normals", help="estimate and store normals")
    s.add_argument("--data", help="dataset directory; files are rewritten in place")
    s.add_argument("--input")
    s.add_argument("--output")
    s.add_argument("--k", type=int, default=16)
    s.set_defaults(func=cmd_normals)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--family", default="plane_with_fin")
    s.add_argument("--count", type=int, default=200, help="training clouds")
    s.add_argument("--test-count", type=int, help="test clouds (default count // 4)")
    s.add_argument("--points", type=int, default=512)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--ratio", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        s = sub.add_parser(name)
        s.add_argument("--data", required=True)
        if name == "train":
            s.add_argument("--config", help="key=value file")
            s.add_argument("--out", default="run")
            s.add_argument("--k", type=int)
            s.add_argument("--heads", type=int)
            s.add_argument("--combine-op")
            s.add_argument("--seed", type=int)
            s.add_argument("--epochs", type=int)
            s.add_argument("--lr", type=float)
            s.add_argument("--batch-size", type=int)
        else:
            s.add_argument("--checkpoint", required=True)
            s.add_argument("--split")
        s.set_defaults(func=func)

    s = sub.add_parser("infer", help="write a prediction-colored ply")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--category", type=int)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("dump-attn", help="export attention rows of the last global block")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--query", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--category", type=int)
    s.set_defaults(func=cmd_dump_attn)

    s = sub.add_parser("info", help="version, checkpoint and dataset summary")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as e:
        print(f"numeric abort: {e}" + (f" (batch saved to {e.dump})" if e.dump else ""), file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ParseError, ContractError, KeyError, ValueError, IndexError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
