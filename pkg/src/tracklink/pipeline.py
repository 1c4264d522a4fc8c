"""End-to-end tracking: tracklets -> joint learning -> affinities -> assignment."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .affinity import AffinityMatrix, build_affinity
from .assoc import AssignmentSolution, gap_levels, hierarchical_associate
from .core import Config, Detection, SegmentPlan, assign_segments, plan_segments, save_config
from .embed import EmbeddingNet, save_net, warm_up
from .io import emit_trajectories, write_tracklets
from .metric import MetricSet, collect_pairs, learn_metrics, save_metrics, segment_tracklets
from .trackgen import generate_tracklets


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    trajectories: list
    metrics: Optional[MetricSet]
    net: Optional[EmbeddingNet]
    affinity: Optional[AffinityMatrix]
    tracklets: list
    solution: Optional[AssignmentSolution]
    plan: Optional[SegmentPlan]
    trace: list


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def initial_net(cfg: Config) -> EmbeddingNet:
    return EmbeddingNet.initialize(cfg.d_in, cfg.d_emb, cfg.hidden_sizes, rng=cfg.rng_seed)


def warm_up_net(net: EmbeddingNet, tracklets: Sequence, plan: SegmentPlan, cfg: Config) -> EmbeddingNet:
    rng = np.random.default_rng(cfg.rng_seed + 1)
    raw_pairs = []
    for t, group in enumerate(segment_tracklets(tracklets, plan), start=1):
        pairs, _ = collect_pairs(group, cfg.kappa, None, None, t, rng, cfg.pairs_per_segment)
        raw_pairs += [(p.raw_i, p.raw_j, p.label) for p in pairs]
    return warm_up(net, raw_pairs, cfg.warmup_epochs, cfg.net_learning_rate, cfg.margin_b,
                   cfg.c_weight, cfg.batch_size, rng)


def run_pipeline(detections: Sequence[Detection], cfg: Config, net: Optional[EmbeddingNet] = None,
                 metrics: Optional[MetricSet] = None) -> PipelineResult:
    """Track ``detections``; pass ``net``/``metrics`` to skip learning."""
    if not detections:
        return PipelineResult([], None, net, None, [], None, None, [])
    with _Stage("tracklets"):
        tracklets = generate_tracklets(detections, cfg.trackgen)
        plan = plan_segments(max(d.frame for d in detections), cfg.segment_length)
        tracklets = assign_segments(tracklets, plan)
    trace = []
    with _Stage("learn"):
        if metrics is None:
            if net is None:
                net = initial_net(cfg)
                if cfg.warmup_epochs:
                    net = warm_up_net(net, tracklets, plan, cfg)
            metrics, net = learn_metrics(tracklets, net, cfg, plan, trace)
    with _Stage("affinity"):
        affinity = build_affinity(tracklets, metrics, net, cfg, plan)
    with _Stage("associate"):
        levels = gap_levels(cfg.effective_max_gap)

        def score(chains):
            a = build_affinity(chains, metrics, net, cfg, plan)
            return a.P, a.gaps
        trajectories, solution, _ = hierarchical_associate(tracklets, score, levels, cfg.solver)
    return PipelineResult(trajectories, metrics, net, affinity, tracklets, solution, plan, trace)


def dump_result(result: PipelineResult, cfg: Config, out_dir) -> None:
    """Write every intermediate artifact of a run into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.txt")
    write_tracklets(result.tracklets, out / "tracklets.csv")
    if result.metrics is not None:
        save_metrics(result.metrics, out / "metrics.npz")
    if result.net is not None:
        save_net(result.net, out / "net.npz")
    if result.affinity is not None:
        result.affinity.to_csv(out / "affinity.csv")
    if result.solution is not None:
        tids = [tr.tid for tr in result.tracklets]
        with open(out / "assignment.csv", "w") as fh:
            for i, j in result.solution.links():
                fh.write(f"{tids[i]},{tids[j]}\n")
    with open(out / "learning_trace.json", "w") as fh:
        json.dump(result.trace, fh, indent=1)
    emit_trajectories(result.trajectories, out / "tracks.txt")
