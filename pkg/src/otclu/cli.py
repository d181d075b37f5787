"""Command-line front end.

Commands:
  pretrain  <config.json> <data-dir> <out-dir>   full EM training run
  cluster   <checkpoint> <cloud> <out.ply>       one-shot soft clustering
  export    <input> <output>                     convert/prepare a cloud file
  verify    [--level fast|full]                  run the self-check suite

Exit codes: 0 success, 1 verification failure, 2 config error,
3 data error, 4 numerical abort, 5 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import cloud as pc
from . import encoder as enc
from .clustering import SolverConfig
from .errors import (CheckpointError, ConfigError, EmptyCloudError, NumericalError,
                     OtcluError, ParseError)
from .trainer import TrainConfig, e_step, pretrain
from .verify import run_checks

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_MISMATCH = 5

_CLOUD_SUFFIXES = (".off", ".ply", ".xyz")

_CONFIG_SECTIONS = {
    "train": {"epochs", "batch_size", "lr", "lr_decay", "decay_every", "weight_decay",
              "beta1", "beta2", "adam_eps", "seed", "eta", "checkpoint_every"},
    "solver": {"epsilon", "iters", "tol", "lambda", "learn_lambda", "num_clusters"},
    "encoder": {"hidden_sizes", "feature_dim", "global_context"},
    "data": {"num_points", "normalize"},
}


def load_config(path) -> tuple[TrainConfig, dict]:
    """Parse the JSON run config; returns (TrainConfig, data section).

    Unknown sections or keys are rejected so a typo cannot silently fall
    back to a default. The cluster count lives in the solver section and
    also sizes the encoder head.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for section, keys in raw.items():
        if section not in _CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(keys, dict):
            raise ConfigError(f"section {section!r} must be an object")
        unknown = set(keys) - _CONFIG_SECTIONS[section]
        if unknown:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")

    train = dict(raw.get("train", {}))
    solver_keys = dict(raw.get("solver", {}))
    encoder_keys = dict(raw.get("encoder", {}))
    data = {"num_points": 2048, "normalize": True}
    data.update(raw.get("data", {}))

    if "lambda" in solver_keys:
        solver_keys["lam"] = solver_keys.pop("lambda")
    try:
        solver = SolverConfig(**solver_keys)
        if "hidden_sizes" in encoder_keys:
            encoder_keys["hidden_sizes"] = tuple(encoder_keys["hidden_sizes"])
        encoder_cfg = enc.EncoderConfig(num_clusters=solver.num_clusters, **encoder_keys)
        config = TrainConfig(solver=solver, encoder=encoder_cfg, **train)
    except (ValueError, TypeError, ConfigError) as exc:
        raise ConfigError(str(exc)) from None
    return config, data


def resolved_config_dict(config: TrainConfig, data: dict) -> dict:
    """Every setting materialized, defaults included."""
    train = dataclasses.asdict(config)
    solver = train.pop("solver")
    solver["lambda"] = solver.pop("lam")
    encoder_cfg = train.pop("encoder")
    encoder_cfg["hidden_sizes"] = list(encoder_cfg["hidden_sizes"])
    return {"train": train, "solver": solver, "encoder": encoder_cfg, "data": dict(data)}


def config_hash(resolved: dict) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _out_dir(arg: str) -> Path:
    return Path(os.environ.get("OTCLU_OUT_DIR", arg))


def _scan_data_dir(data_dir: Path) -> list[Path]:
    files = sorted(p for p in data_dir.iterdir()
                   if p.suffix.lower() in _CLOUD_SUFFIXES) if data_dir.is_dir() else []
    return files


def cmd_pretrain(args) -> int:
    try:
        config, data = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    data_dir = Path(args.data_dir)
    files = _scan_data_dir(data_dir)
    if not files:
        print(f"data error: found 0 cloud files (*.off, *.ply, *.xyz) in {data_dir}",
              file=sys.stderr)
        return EXIT_DATA

    out_dir = _out_dir(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    clouds = []
    try:
        for i, path in enumerate(files):
            cloud = pc.load_cloud(path)
            if data["normalize"]:
                cloud = pc.normalize(cloud)
            if cloud.n_points != data["num_points"]:
                cloud = pc.downsample_random(cloud, data["num_points"],
                                             seed=config.seed * 100003 + i)
            clouds.append(cloud)
    except (ParseError, EmptyCloudError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA

    resolved = resolved_config_dict(config, data)
    digest = config_hash(resolved)
    manifest = {
        "tool_version": __version__,
        "config": resolved,
        "config_hash": digest,
        "seed": config.seed,
        "inputs": [str(p) for p in files],
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "finished_at": None,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")

    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w") as metrics_fh:
        def on_epoch(metrics):
            metrics_fh.write(json.dumps(metrics) + "\n")
            metrics_fh.flush()
            print(f"epoch {metrics['epoch']:4d}  l_total {metrics['l_total']:.6f}  "
                  f"l_soft {metrics['l_soft']:.6f}  l_orth {metrics['l_orth']:.6f}  "
                  f"lr {metrics['lr']:.6g}")

        try:
            pretrain(clouds, config, checkpoint_dir=out_dir,
                     checkpoint_meta={"config_hash": digest}, on_epoch=on_epoch,
                     threads=args.threads)
        except NumericalError as exc:
            print(f"numerical abort: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL

    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"done: checkpoints and metrics in {out_dir}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    try:
        params, meta = enc.load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        print(f"data error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH

    head_width = params.config.num_clusters
    if args.clusters is not None and args.clusters != head_width:
        print(f"checkpoint mismatch: head is sized for {head_width} clusters; "
              f"refusing to re-initialize it for {args.clusters}", file=sys.stderr)
        return EXIT_MISMATCH

    try:
        cloud = pc.load_cloud(args.cloud)
    except (ParseError, EmptyCloudError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    cloud = pc.normalize(cloud)
    if args.points is not None:
        cloud = pc.downsample_random(cloud, args.points, seed=args.seed)

    try:
        solver = SolverConfig(num_clusters=head_width, epsilon=args.epsilon,
                              lam=args.lam, iters=args.iters)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        result = e_step(params, cloud, solver)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    labeled = pc.LabeledCloud.from_soft_labels(cloud, result.gamma.matrix)
    out_ply = Path(args.out_ply)
    try:
        pc.export_labeled_ply(labeled, out_ply, pc.default_palette(head_width))
    except OSError as exc:
        print(f"data error: cannot write {out_ply}: {exc}", file=sys.stderr)
        return EXIT_DATA

    counts = np.bincount(labeled.labels, minlength=head_width)
    sidecar = {
        "num_points": cloud.n_points,
        "num_clusters": head_width,
        "epsilon": solver.epsilon,
        "lambda": solver.lam,
        "cluster_counts": counts.tolist(),
        "mean_confidence": float(labeled.confidences.mean()),
        "marginal_residual": result.marginal_residual,
        "checkpoint_meta": meta,
    }
    sidecar_path = out_ply.with_suffix(".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {out_ply} and {sidecar_path}")
    return EXIT_OK


def cmd_export(args) -> int:
    try:
        cloud = pc.load_cloud(args.input)
    except (ParseError, EmptyCloudError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.normalize:
        cloud = pc.normalize(cloud)
    if args.points is not None:
        cloud = pc.downsample_random(cloud, args.points, seed=args.seed)
    try:
        pc.save_cloud(cloud, args.output, args.format)
    except ParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"data error: cannot write {args.output}: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {args.output} ({cloud.n_points} points)")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks(args.level)
    width = max(len(r.name) for r in results)
    all_ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.seconds:6.2f}s  {r.detail}")
        all_ok = all_ok and r.passed
    print(f"{'all checks passed' if all_ok else 'SOME CHECKS FAILED'} "
          f"({sum(r.passed for r in results)}/{len(results)})")
    return EXIT_OK if all_ok else EXIT_VERIFY_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otclu",
        description="Unsupervised point-cloud feature learning via balanced "
                    "optimal-transport soft clustering.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the EM training loop on a directory of clouds")
    p.add_argument("config", help="JSON run configuration")
    p.add_argument("data_dir", help="directory of .off/.ply/.xyz files")
    p.add_argument("out_dir", help="output directory (env OTCLU_OUT_DIR overrides)")
    p.add_argument("--threads", type=int, default=1,
                   help="E-step worker threads; 1 guarantees bit-reproducibility")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("cluster", help="soft-cluster one cloud with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("cloud")
    p.add_argument("out_ply")
    p.add_argument("--clusters", type=int, default=None,
                   help="expected cluster count; must match the checkpoint head")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--points", type=int, default=None, help="downsample to this many points")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("export", help="convert/prepare a point-cloud file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--format", choices=pc.FORMATS, default=None,
                   help="output format (default: inferred from extension)")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("verify", help="run the oracle-backed self-check suite")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except OtcluError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
