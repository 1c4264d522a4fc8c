import dataclasses

import numpy as np
import pytest

from tracklink import pipeline
from tracklink.core import Config, Detection
from tracklink.evaluation import evaluate
from tracklink.metric import MetricSet
from tracklink.pipeline import PipelineError, run_pipeline
from tracklink.synth import SynthConfig, synth_scene

SMALL = dict(n_objects=4, n_frames=150, n_crossings=1)


def test_noiseless_detections_equal_ground_truth():
    cfg = SynthConfig(n_objects=3, n_frames=30, n_crossings=0, miss_rate=0.0, sigma_pos=0.0, sigma_size=0.0)
    dets, gt = synth_scene(cfg)
    assert len(dets) == 90
    boxes = {(t.track_id, f): box for t in gt for f, box in t.entries}
    for d in dets:
        np.testing.assert_allclose(d.box, boxes[(d.id_hint, d.frame)], atol=1e-9)


def test_full_miss_rate_gives_no_detections():
    dets, gt = synth_scene(SynthConfig(n_objects=3, n_frames=30, n_crossings=0, miss_rate=1.0))
    assert dets == [] and len(gt) == 3


def test_miss_rate_frequency():
    dets, _ = synth_scene(SynthConfig(n_objects=8, n_frames=500, miss_rate=0.2))
    assert abs(1.0 - len(dets) / 4000 - 0.2) <= 0.05


def test_synth_is_deterministic():
    a, ga = synth_scene(SynthConfig(**SMALL, rng_seed=9))
    b, gb = synth_scene(SynthConfig(**SMALL, rng_seed=9))
    assert [(d.frame, d.box, d.confidence) for d in a] == [(d.frame, d.box, d.confidence) for d in b]
    assert all(np.array_equal(x.feature, y.feature) for x, y in zip(a, b))
    assert [t.entries for t in ga] == [t.entries for t in gb]


def test_crossing_pairs_meet():
    _, gt = synth_scene(SynthConfig(n_objects=4, n_frames=200, n_crossings=2, rng_seed=3))
    for a, b in ((gt[0], gt[1]), (gt[2], gt[3])):
        ca = np.array([[x + w / 2, y + h / 2] for _, (x, y, w, h) in a.entries])
        cb = np.array([[x + w / 2, y + h / 2] for _, (x, y, w, h) in b.entries])
        assert np.linalg.norm(ca - cb, axis=1).min() < 1e-9


def test_synth_config_rejects_bad_values():
    with pytest.raises(ValueError):
        SynthConfig(miss_rate=1.5)
    with pytest.raises(ValueError):
        SynthConfig(n_objects=3, n_crossings=2)


def test_no_detections_no_trajectories():
    result = run_pipeline([], Config())
    assert result.trajectories == [] and result.tracklets == []


def test_single_clean_object_is_one_trajectory():
    dets, gt = synth_scene(SynthConfig(n_objects=1, n_frames=120, n_crossings=0, miss_rate=0.0, rng_seed=2))
    result = run_pipeline(dets, Config())
    assert len(result.trajectories) == 1
    assert result.trajectories[0].frames == list(range(1, 121))
    assert evaluate(gt, result.trajectories).mota == 1.0


def test_gaps_are_bridged_and_interpolated():
    dets, _ = synth_scene(SynthConfig(n_objects=1, n_frames=120, n_crossings=0, miss_rate=0.0, rng_seed=2))
    holed = [d for d in dets if not 40 <= d.frame <= 42]
    result = run_pipeline(holed, Config())
    assert len(result.trajectories) == 1
    assert result.trajectories[0].is_contiguous()


@pytest.fixture(scope="module")
def small_run():
    dets, gt = synth_scene(SynthConfig(**SMALL, rng_seed=5))
    return dets, gt, run_pipeline(dets, Config())


def test_result_is_self_consistent(small_run):
    _, _, result = small_run
    n = len(result.tracklets)
    assert result.affinity.P.shape == (n, n)
    assert result.solution.X.shape == (n, n)
    assert (result.solution.X.sum(axis=0) <= 1).all() and (result.solution.X.sum(axis=1) <= 1).all()
    sources = sorted(tid for t in result.trajectories for tid in t.source_tracklets)
    assert sources == sorted(tr.tid for tr in result.tracklets)
    assert result.metrics.n_segments == result.plan.n_segments
    assert [row["segment"] for row in result.trace] == list(range(1, result.plan.n_segments + 1))


def test_small_scene_is_tracked_well(small_run):
    _, gt, result = small_run
    report = evaluate(gt, result.trajectories)
    assert report.mota >= 0.85 and report.ids <= 4


def test_identity_hints_are_ignored(small_run):
    dets, _, result = small_run
    rng = np.random.default_rng(0)
    scrambled = [dataclasses.replace(d, id_hint=int(rng.integers(1, 100))) for d in dets]
    again = run_pipeline(scrambled, Config())
    assert [t.entries for t in again.trajectories] == [t.entries for t in result.trajectories]


def test_saved_models_reproduce_the_run(small_run):
    dets, _, result = small_run
    again = run_pipeline(dets, Config(), net=result.net, metrics=result.metrics)
    assert [t.entries for t in again.trajectories] == [t.entries for t in result.trajectories]


def test_failures_are_labelled_by_stage(small_run, monkeypatch):
    dets, _, result = small_run
    wrong = MetricSet.initial(3, result.plan.n_segments)
    with pytest.raises(PipelineError) as info:
        run_pipeline(dets, Config(), net=result.net, metrics=wrong)
    assert info.value.stage == "affinity" and str(info.value).startswith("[affinity]")

    def boom(*args, **kwargs):
        raise ValueError("bad detections")

    monkeypatch.setattr(pipeline, "generate_tracklets", boom)
    with pytest.raises(PipelineError) as info:
        run_pipeline(dets, Config())
    assert info.value.stage == "tracklets" and isinstance(info.value.cause, ValueError)


def test_mixed_feature_dimensions_fail():
    dets = [Detection(1, (0, 0, 4, 4), 1.0, np.zeros(16)), Detection(2, (0, 0, 4, 4), 1.0, np.zeros(8))]
    with pytest.raises(PipelineError):
        run_pipeline(dets, Config())
