"""Command-line driver for the tracking pipeline.

Every config key is also a flag (``--omega 0.6``, ``--trackgen.theta_link 0.4``);
flags override values read with ``--config``.

Exit codes: 0 success, 1 bad input, 2 internal consistency failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .assoc import ConsistencyError
from .core import Config, ConfigError, config_from_mapping, config_items, load_config, validate_config
from .embed import load_net, save_net
from .evaluation import evaluate
from .io import InputError, emit_trajectories, load_detections, load_trajectories, write_detections, write_tracklets
from .metric import load_metrics, save_metrics
from .pipeline import PipelineError, dump_result, run_pipeline
from .synth import SynthConfig, synth_scene

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_CONSISTENCY = 2

_CFG_PREFIX = "cfg:"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value config file")
    group = parser.add_argument_group("config overrides")
    for key, default in config_items(Config()):
        group.add_argument(f"--{key}", dest=_CFG_PREFIX + key, metavar="VALUE", help=f"default {default}")


def _config_from_args(args: argparse.Namespace) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    overrides = {k[len(_CFG_PREFIX):]: v for k, v in vars(args).items()
                 if k.startswith(_CFG_PREFIX) and v is not None}
    try:
        cfg = config_from_mapping(overrides, cfg)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("<flags>", str(exc)) from None
    return validate_config(cfg)


def _load(path, cfg: Config) -> list:
    dets = load_detections(path)
    if dets and dets[0].feature.size and dets[0].feature.size != cfg.d_in:
        raise InputError(f"d_in is {cfg.d_in} but {path} has {dets[0].feature.size}-dimensional features")
    return dets


def cmd_synth(args) -> int:
    scfg = SynthConfig(
        n_objects=args.n_objects, n_frames=args.n_frames, miss_rate=args.miss_rate,
        n_crossings=args.n_crossings, d_in=args.d_in, sigma_feat=args.sigma_feat,
        rng_seed=args.seed,
    )
    dets, gt = synth_scene(scfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(dets, out / "detections.csv")
    emit_trajectories(gt, out / "gt.txt")
    print(f"{len(dets)} detections, {len(gt)} objects -> {out}")
    return EXIT_OK


def cmd_tracklets(args) -> int:
    from .trackgen import generate_tracklets

    cfg = _config_from_args(args)
    tracklets = generate_tracklets(_load(args.detections, cfg), cfg.trackgen)
    write_tracklets(tracklets, args.out)
    print(f"{len(tracklets)} tracklets -> {args.out}")
    return EXIT_OK


def cmd_learn(args) -> int:
    cfg = _config_from_args(args)
    result = run_pipeline(_load(args.detections, cfg), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if result.metrics is not None:
        save_metrics(result.metrics, out / "metrics.npz")
        save_net(result.net, out / "net.npz")
    with open(out / "learning_trace.json", "w") as fh:
        json.dump(result.trace, fh, indent=1)
    print(f"learned metrics for {result.plan.n_segments if result.plan else 0} segments -> {out}")
    return EXIT_OK


def cmd_associate(args) -> int:
    cfg = _config_from_args(args)
    metrics = load_metrics(args.metrics)
    net = load_net(args.net) if args.net else None
    result = run_pipeline(_load(args.detections, cfg), cfg, net=net, metrics=metrics)
    emit_trajectories(result.trajectories, args.out)
    if args.dump:
        dump_result(result, cfg, args.dump)
    print(f"{len(result.trajectories)} trajectories -> {args.out}")
    return EXIT_OK


def _track_one(path: Path, out: Path, cfg: Config, dump) -> str:
    result = run_pipeline(_load(path, cfg), cfg)
    emit_trajectories(result.trajectories, out)
    if dump is not None:
        dump_result(result, cfg, dump)
    return f"{path}: {len(result.trajectories)} trajectories -> {out}"


def cmd_track(args) -> int:
    cfg = _config_from_args(args)
    inputs = [Path(p) for p in args.detections]
    out = Path(args.out)
    if len(inputs) == 1 and not out.is_dir():
        jobs = [(inputs[0], out, args.dump)]
    else:
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(p, out / f"{p.stem}.txt", Path(args.dump) / p.stem if args.dump else None) for p in inputs]
    # each sequence runs its own sequential pipeline
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        for line in pool.map(lambda job: _track_one(job[0], job[1], cfg, job[2]), jobs):
            print(line)
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate(load_trajectories(args.gt), load_trajectories(args.pred), args.iou)
    print(report.to_json() if args.format == "json" else report.to_table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracklink", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-objects", type=int, default=SynthConfig.n_objects)
    p.add_argument("--n-frames", type=int, default=SynthConfig.n_frames)
    p.add_argument("--miss-rate", type=float, default=SynthConfig.miss_rate)
    p.add_argument("--n-crossings", type=int, default=SynthConfig.n_crossings)
    p.add_argument("--d-in", type=int, default=SynthConfig.d_in)
    p.add_argument("--sigma-feat", type=float, default=SynthConfig.sigma_feat)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tracklets", help="link detections into tracklets")
    p.add_argument("detections")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_tracklets)

    p = sub.add_parser("learn", help="learn metrics and fine-tune the embedding")
    p.add_argument("detections")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    _add_config_flags(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("associate", help="associate tracklets with saved metrics")
    p.add_argument("detections")
    p.add_argument("--metrics", required=True)
    p.add_argument("--net", help="embedding checkpoint; raw features if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--dump", help="directory for intermediate artifacts")
    _add_config_flags(p)
    p.set_defaults(func=cmd_associate)

    p = sub.add_parser("track", help="full pipeline on one or more sequences")
    p.add_argument("detections", nargs="+")
    p.add_argument("--out", required=True, help="track file, or a directory for several inputs")
    p.add_argument("--dump", help="directory for intermediate artifacts")
    p.add_argument("--workers", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="CLEAR-MOT scores of a track file")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--format", choices=("json", "table"), default="table")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        # InputError and ConfigError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConsistencyError as exc:
        print(f"consistency error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT if isinstance(exc.cause, (InputError, ConfigError)) else EXIT_CONSISTENCY


if __name__ == "__main__":
    sys.exit(main())
