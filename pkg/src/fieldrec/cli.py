"""Command-line interface.

Commands: reconstruct, train, extract, inpaint, rimls, metrics, degrade,
attn-map. Any pipeline config key can be overridden with --key=value (bare
--key for booleans). Exit codes: 0 success, 2 argument error, 3 stage
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import PipelineConfig
from .errors import ArgumentError, FieldRecError, StageError

EXIT_OK = 0
EXIT_ARGUMENT = 2
EXIT_STAGE = 3

_CONFIG_COMMANDS = {"reconstruct", "train", "extract", "inpaint", "rimls", "metrics"}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fieldrec",
        description="Point-cloud surface reconstruction with an attentive "
                    "implicit field and robust implicit MLS refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="full pipeline: train, extract, "
                                           "inpaint, orient, RIMLS, mesh")
    p.add_argument("input", help="input point cloud (xyz/ply/obj)")
    p.add_argument("out_dir", help="output directory")
    p.add_argument("--config", default=None, help="key=value config file")

    p = sub.add_parser("train", help="train the field only")
    p.add_argument("input")
    p.add_argument("out_dir")
    p.add_argument("--config", default=None)

    p = sub.add_parser("extract", help="marching-cubes mesh of a trained field")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--config", default=None)

    p = sub.add_parser("inpaint", help="level-set sampling, 3-sigma fill, normals")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("out_dir")
    p.add_argument("--config", default=None)

    p = sub.add_parser("rimls", help="RIMLS mesh from an oriented PLY cloud")
    p.add_argument("enhanced", help="oriented cloud written by inpaint")
    p.add_argument("out_dir")
    p.add_argument("--config", default=None)
    p.add_argument("--normalization", default=None,
                   help="normalization.json to map the mesh back to input units")

    p = sub.add_parser("metrics", help="compare a reconstruction to ground truth")
    p.add_argument("rec_mesh")
    p.add_argument("gt_mesh")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="CSV report path")

    p = sub.add_parser("degrade", help="noise / subsample / cap-removal inputs")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--mode", required=True,
                   choices=["gaussian", "subsample", "remove-cap"])
    p.add_argument("--value", required=True, type=float,
                   help="noise %% of bbox diagonal, fraction, or cap angle (deg)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--axis", default="z", help="cap axis (remove-cap mode)")

    p = sub.add_parser("attn-map", help="attention-similarity scalars as PLY")
    p.add_argument("checkpoint")
    p.add_argument("cloud")
    p.add_argument("output")
    p.add_argument("--anchor", required=True,
                   help="anchor point 'x,y,z' in input coordinates")
    return parser


def _require_file(path):
    if not Path(path).is_file():
        raise ArgumentError(f"input file not found: {path}")


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)

    try:
        if args.command in _CONFIG_COMMANDS:
            cfg = PipelineConfig.load(args.config, overrides=extra)
        elif extra:
            raise ArgumentError(f"unrecognized arguments: {' '.join(extra)}")
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT

    from . import pipeline

    try:
        if args.command == "reconstruct":
            _require_file(args.input)
            manifest = pipeline.run_reconstruct(args.input, args.out_dir, cfg)
            print(f"final mesh: {Path(args.out_dir) / 'final_mesh.obj'} "
                  f"({manifest['final_vertices']} vertices, "
                  f"{manifest['final_faces']} faces)")
        elif args.command == "train":
            _require_file(args.input)
            pipeline.run_train(args.input, args.out_dir, cfg)
            print(f"checkpoint: {Path(args.out_dir) / 'checkpoint.ckpt'}")
        elif args.command == "extract":
            _require_file(args.checkpoint)
            mesh = pipeline.run_extract(args.checkpoint, args.out_dir, cfg)
            print(f"field mesh: {Path(args.out_dir) / 'mesh_field.obj'} "
                  f"({len(mesh.vertices)} vertices)")
        elif args.command == "inpaint":
            _require_file(args.checkpoint)
            _require_file(args.input)
            report = pipeline.run_inpaint(args.checkpoint, args.input,
                                          args.out_dir, cfg)
            s = report.summary()
            print(f"fill points: {s['fill_points']} (sigma_d={s['sigma_d']:.3e}); "
                  f"enhanced cloud: {Path(args.out_dir) / 'enhanced_cloud.ply'}")
        elif args.command == "rimls":
            _require_file(args.enhanced)
            mesh = pipeline.run_rimls(args.enhanced, args.out_dir, cfg,
                                      normalization_path=args.normalization)
            print(f"final mesh: {Path(args.out_dir) / 'final_mesh.obj'} "
                  f"({len(mesh.vertices)} vertices)")
        elif args.command == "metrics":
            _require_file(args.rec_mesh)
            _require_file(args.gt_mesh)
            report = pipeline.run_metrics(args.rec_mesh, args.gt_mesh, cfg,
                                          out_path=args.out)
            print(report.table())
            if args.out:
                print(f"report: {args.out}")
        elif args.command == "degrade":
            _require_file(args.input)
            cloud = pipeline.run_degrade(args.input, args.output, args.mode,
                                         args.value, seed=args.seed, axis=args.axis)
            print(f"wrote {len(cloud)} points to {args.output}")
        elif args.command == "attn-map":
            _require_file(args.checkpoint)
            _require_file(args.cloud)
            try:
                anchor = tuple(float(v) for v in args.anchor.split(","))
                if len(anchor) != 3:
                    raise ValueError
            except ValueError:
                raise ArgumentError(f"bad anchor '{args.anchor}', expected x,y,z") from None
            _, warned = pipeline.run_attn_map(args.checkpoint, args.cloud,
                                              args.output, anchor)
            if warned:
                print("warning: anchor lies outside the normalized bounds",
                      file=sys.stderr)
            print(f"attention map: {args.output}")
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT
    except FieldRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
