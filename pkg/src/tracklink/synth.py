"""Synthetic multi-target scenes with ground truth and identity-coded features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Detection, Trajectory


@dataclass(frozen=True)
class SynthConfig:
    n_objects: int = 8
    n_frames: int = 600
    arena: tuple = (1280.0, 720.0)
    box_size: tuple = (40.0, 100.0)
    box_jitter: float = 0.15  # relative per-object size variation
    speed_range: tuple = (0.5, 2.0)  # pixels per frame
    turn_prob: float = 0.004  # per object and frame
    max_turn: float = np.pi / 4
    sigma_pos: float = 1.5
    sigma_size: float = 1.0
    miss_rate: float = 0.1
    d_in: int = 16
    signal_dims: int = 4
    feature_separation: float = 1.2  # expected distance between identity means
    sigma_feat: float = 0.17
    n_crossings: int = 2
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError("miss_rate must be in [0, 1]")
        if not 0.0 <= self.turn_prob <= 1.0:
            raise ValueError("turn_prob must be in [0, 1]")
        for name in ("n_objects", "n_frames", "d_in", "signal_dims"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.signal_dims > self.d_in:
            raise ValueError("signal_dims cannot exceed d_in")
        if 2 * self.n_crossings > self.n_objects:
            raise ValueError("each crossing needs two distinct objects")
        if min(self.sigma_pos, self.sigma_size, self.sigma_feat) < 0:
            raise ValueError("noise levels must be nonnegative")


def identity_means(n_ids: int, d_in: int, signal_dims: int, separation: float, rng) -> np.ndarray:
    """Random means living in the first ``signal_dims`` coordinates.

    Scaled so the expected distance between two means is ``separation``.
    """
    means = np.zeros((n_ids, d_in))
    scale = separation / np.sqrt(2.0 * signal_dims)
    means[:, :signal_dims] = rng.normal(0.0, scale, size=(n_ids, signal_dims))
    return means


def sample_features(means: np.ndarray, labels: np.ndarray, sigma: float, rng) -> np.ndarray:
    return means[labels] + rng.normal(0.0, sigma, size=(len(labels), means.shape[1]))


def _velocity_track(n_frames: int, cfg: SynthConfig, rng) -> np.ndarray:
    speed = rng.uniform(*cfg.speed_range)
    heading = rng.uniform(0.0, 2 * np.pi)
    vel = np.zeros((n_frames, 2))
    for f in range(n_frames):
        if f and rng.random() < cfg.turn_prob:
            heading += rng.uniform(-cfg.max_turn, cfg.max_turn)
        vel[f] = speed * np.array([np.cos(heading), np.sin(heading)])
    return vel


def synth_scene(cfg: SynthConfig = SynthConfig()) -> tuple:
    """Return ``(detections, ground_truth)`` for a seeded scene.

    Ground-truth boxes are the noiseless object states for every frame.
    Objects paired in a crossing event pass through the same point in the
    same frame.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    n, T = cfg.n_objects, cfg.n_frames
    arena = np.asarray(cfg.arena, dtype=np.float64)
    sizes = np.asarray(cfg.box_size) * (1.0 + rng.uniform(-cfg.box_jitter, cfg.box_jitter, size=(n, 1)))

    centers = np.zeros((n, T, 2))
    anchors = {}
    for c in range(cfg.n_crossings):
        frame_idx = int(rng.integers(T // 5, max(T // 5 + 1, 4 * T // 5)))
        point = arena * rng.uniform(0.3, 0.7, size=2)
        anchors[2 * c] = anchors[2 * c + 1] = (frame_idx, point)
    for k in range(n):
        vel = _velocity_track(T, cfg, rng)
        disp = np.concatenate([[np.zeros(2)], np.cumsum(vel[:-1], axis=0)])
        if k in anchors:
            frame_idx, point = anchors[k]
            centers[k] = point + disp - disp[frame_idx]
        else:
            centers[k] = arena * rng.uniform(0.1, 0.9, size=2) + disp

    means = identity_means(n, cfg.d_in, cfg.signal_dims, cfg.feature_separation, rng)

    ground_truth = []
    for k in range(n):
        w, h = sizes[k]
        entries = [(f + 1, (centers[k, f, 0] - w / 2, centers[k, f, 1] - h / 2, w, h)) for f in range(T)]
        ground_truth.append(Trajectory(k + 1, entries))

    detections = []
    for f in range(T):
        for k in range(n):
            if rng.random() < cfg.miss_rate:
                continue
            w, h = sizes[k]
            cx, cy = centers[k, f] + rng.normal(0.0, cfg.sigma_pos, size=2)
            dw, dh = rng.normal(0.0, cfg.sigma_size, size=2)
            bw, bh = max(w + dw, 1.0), max(h + dh, 1.0)
            feature = sample_features(means, np.array([k]), cfg.sigma_feat, rng)[0]
            detections.append(Detection(
                frame=f + 1,
                box=(cx - bw / 2, cy - bh / 2, bw, bh),
                confidence=float(rng.uniform(0.5, 1.0)),
                feature=feature,
                id_hint=k + 1,
            ))
    return detections, ground_truth
