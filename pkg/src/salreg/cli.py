"""Command-line entry point: ``salreg <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 degenerate or malformed
input, 4 pose estimation failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import PRESETS, PipelineConfig
from .errors import EstimationFailure, FormatError, ParameterError, RegistrationError
from .features import feature_provider
from .geom import build_hierarchy
from .pipeline import _neighbors, evaluate, run_pipeline
from .saliency import saliency_scores
from .synth import STRUCTURES, synth_scene


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="JSON pipeline configuration")
    g.add_argument("--seed", type=int, help="seed for scene generation, attention weights and RANSAC")
    g.add_argument("--preset", type=int, choices=sorted(PRESETS), help="matching sample-count preset")
    g.add_argument("--estimator", choices=("svd", "ransac", "lgr"))
    g.add_argument("--out", default=".", help="output directory (created if missing)")
    g.add_argument("--no-attention", action="store_true", help="skip the attention stage")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="salreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic scene pair and its ground truth")
    s.add_argument("--n-points", type=int, default=5000)
    s.add_argument("--overlap", type=float, default=0.6)
    s.add_argument("--noise", type=float, default=0.005)
    s.add_argument("--structure", choices=STRUCTURES, default="room")
    s.add_argument("--format", choices=("ply", "xyz"), default="ply")

    r = sub.add_parser("register", parents=[common], help="estimate the transform between two clouds")
    r.add_argument("source")
    r.add_argument("target")
    r.add_argument("--gt", help="ground-truth transform JSON; adds metrics to the report")

    m = sub.add_parser("match", parents=[common], help="dump superpoint and dense matches as CSV")
    m.add_argument("source")
    m.add_argument("target")

    sa = sub.add_parser("saliency", parents=[common], help="dump per-point saliency scores as CSV")
    sa.add_argument("cloud")

    e = sub.add_parser("eval", parents=[common], help="score an estimated transform against ground truth")
    e.add_argument("source")
    e.add_argument("target")
    e.add_argument("--gt", required=True)
    e.add_argument("--est", help="estimated transform JSON (omit to score matches only)")
    e.add_argument("--matches", help="dense match CSV from the match command")
    e.add_argument("--coarse", help="superpoint match CSV from the match command")
    return parser


def load_config(args) -> PipelineConfig:
    raw = io.read_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ParameterError("config file must hold a JSON object")
    cfg = PipelineConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.attention.seed = args.seed
    if args.preset is not None:
        cfg.matching.apply_preset(args.preset)
    if args.estimator is not None:
        cfg.estimator.kind = args.estimator
    if args.no_attention:
        cfg.attention.enabled = False
    return cfg.validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, command: str, cfg: PipelineConfig, **extra) -> None:
    io.write_json(out / "manifest.json", {"command": command, "config": cfg.to_dict(), **extra})


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    scene = synth_scene(cfg.seed, args.n_points, args.overlap, args.noise, args.structure, cfg.base_voxel)
    ext = args.format
    io.write_cloud(out / f"source.{ext}", scene.source)
    io.write_cloud(out / f"target.{ext}", scene.target)
    io.write_json(out / "gt.json", scene.gt.to_dict())
    _manifest(out, "synth", cfg, overlap=scene.overlap, noise_sigma=scene.noise_sigma,
              structure=args.structure, n_points=args.n_points)
    print(f"wrote {out}/source.{ext}, {out}/target.{ext}, {out}/gt.json (overlap {scene.overlap:.3f})")
    return 0


def cmd_register(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    gt = io.read_transform(args.gt) if args.gt else None
    result = run_pipeline(cfg, io.read_cloud(args.source), io.read_cloud(args.target), gt)
    _manifest(out, "register", cfg, source=args.source, target=args.target)
    io.write_json(out / "report.json", result.report())
    if not result.pose.success:
        raise EstimationFailure(f"[pose] {result.pose.message}")
    io.write_json(out / "transform.json", result.transform_record())
    print(io.dump_json(result.transform_record()), end="")
    return 0


def cmd_match(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    cfg.estimator.kind = "svd"  # matches do not depend on the estimator; skip the expensive ones
    result = run_pipeline(cfg, io.read_cloud(args.source), io.read_cloud(args.target))
    io.write_matches_csv(out / "superpoint_matches.csv", result.coarse.rows())
    io.write_matches_csv(out / "dense_matches.csv", result.dense.rows())
    _manifest(out, "match", cfg, source=args.source, target=args.target,
              superpoint_matches=len(result.coarse), dense_matches=len(result.dense))
    print(f"{len(result.coarse)} superpoint and {len(result.dense)} dense matches written to {out}")
    return 0


def cmd_saliency(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    hier = build_hierarchy(io.read_cloud(args.cloud), cfg.base_voxel, cfg.levels)
    fc = cfg.feature
    lf = feature_provider(fc.kind, hier, radius=fc.radius, dim=fc.dim, dense_path=fc.source_path,
                          standardize=fc.standardize)
    scores = saliency_scores(lf.dense, _neighbors(hier.dense, cfg.saliency.knn))
    io.write_scores_csv(out / "saliency.csv", scores)
    io.write_cloud(out / "dense.ply", hier.dense)
    _manifest(out, "saliency", cfg, cloud=args.cloud, dense_points=len(hier.dense))
    print(f"{len(scores)} dense-point scores written to {out}/saliency.csv")
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    gt = io.read_transform(args.gt)
    est = io.read_transform(args.est) if args.est else None
    hp = build_hierarchy(io.read_cloud(args.source), cfg.base_voxel, cfg.levels)
    hq = build_hierarchy(io.read_cloud(args.target), cfg.base_voxel, cfg.levels)
    empty = np.zeros(0, dtype=np.int64)
    ds, dt = io.read_matches_csv(args.matches)[:2] if args.matches else (empty, empty)
    cs, ct = io.read_matches_csv(args.coarse)[:2] if args.coarse else (empty, empty)
    for name, idx, n in (("dense source", ds, len(hp.dense)), ("dense target", dt, len(hq.dense)),
                         ("superpoint source", cs, len(hp.superpoints)),
                         ("superpoint target", ct, len(hq.superpoints))):
        if len(idx) and (idx.min() < 0 or idx.max() >= n):
            raise FormatError(f"{name} index out of range for a cloud of {n} points")
    metrics = evaluate(cfg, hp, hq, cs, ct, ds, dt, est, gt)
    io.write_json(out / "metrics.json", metrics)
    _manifest(out, "eval", cfg, source=args.source, target=args.target)
    print(io.dump_json(metrics), end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "register": cmd_register,
    "match": cmd_match,
    "saliency": cmd_saliency,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except RegistrationError as exc:
        print(f"salreg {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"salreg {args.command}: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
