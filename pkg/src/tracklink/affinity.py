"""Tracklet-to-tracklet linking scores from motion and appearance cues."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import Config, SegmentPlan, Tracklet, plan_segments
from .embed import EmbeddingNet
from .metric import MetricSet, strongest_indices

APPEARANCE_EPS = 1e-12


class Velocities(NamedTuple):
    forward: np.ndarray
    backward: np.ndarray
    degenerate: bool


def tracklet_velocities(tr: Tracklet) -> Velocities:
    """Least-squares velocity of the box centre, forward and reversed in time."""
    if len(tr) < 2:
        zero = np.zeros(2)
        return Velocities(zero, zero.copy(), True)
    frames = np.array([d.frame for d in tr.detections], dtype=np.float64)
    centers = tr.centers()
    tc = frames - frames.mean()
    v_f = (tc @ (centers - centers.mean(axis=0))) / (tc @ tc)
    # same fit with time running tail -> head
    return Velocities(v_f, -v_f, False)


def motion_kernel(residual: np.ndarray, sigma: Sequence[float]) -> np.ndarray:
    inv = 1.0 / np.asarray(sigma, dtype=np.float64)
    return np.exp(-0.5 * np.sum(residual ** 2 * inv, axis=-1))


def motion_affinity(t_i: Tracklet, t_j: Tracklet, sigma: Sequence[float]) -> float:
    """Forward and backward linear-prediction kernels, each with peak value 1."""
    if t_i.end >= t_j.start:
        raise ValueError(f"tracklets {t_i.tid} and {t_j.tid} are not in temporal order")
    gap = t_j.start - t_i.end
    p_tail = t_i.tail.center
    p_head = t_j.head.center
    e_fwd = p_tail + tracklet_velocities(t_i).forward * gap - p_head
    e_bwd = p_head + tracklet_velocities(t_j).backward * gap - p_tail
    return float(motion_kernel(e_fwd, sigma) * motion_kernel(e_bwd, sigma))


@dataclass
class ProbeSet:
    """One probe embedding per tracklet (its strongest response), grouped by segment."""

    probe_of: dict  # tid -> embedding
    segments: list  # segments[t-1] = ordered list of tids with head in segment t

    def members(self, t: int) -> list:
        return self.segments[t - 1]

    def matrix(self, t: int) -> np.ndarray:
        tids = self.members(t)
        if not tids:
            raise ValueError(f"segment {t} has an empty probe set")
        return np.stack([self.probe_of[tid] for tid in tids])


def build_probes(tracklets: Sequence[Tracklet], embeddings: dict, plan: SegmentPlan) -> ProbeSet:
    probe_of = {}
    segments = [[] for _ in range(plan.n_segments)]
    for tr in tracklets:
        k = strongest_indices(tr, 1)[0]
        probe_of[tr.tid] = embeddings[tr.tid][k]
        segments[plan.segment_of(tr.start) - 1].append(tr.tid)
    return ProbeSet(probe_of, segments)


def embed_tracklets(tracklets: Sequence[Tracklet], net: Optional[EmbeddingNet]) -> dict:
    if net is None:
        return {tr.tid: tr.features() for tr in tracklets}
    return {tr.tid: net.embed(tr.features()) for tr in tracklets}


def _directed_distance(responses: np.ndarray, target: np.ndarray, probes: np.ndarray, m: np.ndarray) -> float:
    """[sum_k d(x^k, target) / sqrt(sum_g d(x^k, g))] / m over the responses x^k."""
    total = 0.0
    for x in responses:
        d_target = (x - target) @ m @ (x - target)
        norm = np.sqrt(sum((x - g) @ m @ (x - g) for g in probes))
        total += d_target / norm if norm > 0 else 0.0
    return total / len(responses)


def appearance_affinity(t_i: Tracklet, t_j: Tracklet, probes: ProbeSet, ms: MetricSet,
                        net: Optional[EmbeddingNet], plan: SegmentPlan,
                        cap: float = 1e12) -> float:
    """Inverse product of the two normalised directed probe distances.

    The metric and the normalising probe set come from the segment holding the
    later of the two head frames.
    """
    t = plan.segment_of(max(t_i.start, t_j.start))
    if not probes.members(t):
        raise ValueError(f"segment {t} has an empty probe set")
    m = ms.total(t)
    g_set = probes.matrix(t)
    emb = embed_tracklets([t_i, t_j], net)
    d_ij = _directed_distance(emb[t_i.tid], probes.probe_of[t_j.tid], g_set, m)
    d_ji = _directed_distance(emb[t_j.tid], probes.probe_of[t_i.tid], g_set, m)
    return float(min(1.0 / (d_ij * d_ji + APPEARANCE_EPS), cap))


@dataclass
class AffinityMatrix:
    P: np.ndarray  # final, normalised and thresholded
    raw: np.ndarray  # motion * appearance before normalisation
    feasible: np.ndarray  # bool mask
    gaps: np.ndarray  # head(j) - tail(i), 0 where infeasible
    tids: list

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for a, ti in enumerate(self.tids):
                for b, tj in enumerate(self.tids):
                    if self.P[a, b] > 0:
                        writer.writerow([ti, tj, repr(float(self.P[a, b]))])


def _metric_factor(m: np.ndarray) -> np.ndarray:
    """``L`` with ``L L^T = M`` (negative eigenvalues from rounding clipped)."""
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return v * np.sqrt(np.maximum(w, 0.0))


def _quad_distances(x: np.ndarray, g: np.ndarray, factor: np.ndarray) -> np.ndarray:
    """d[k, c] = (x_k - g_c)^T M (x_k - g_c) for ``M = factor factor^T``.

    Differences are taken in the factored space so a response equal to a
    probe gives exactly zero.
    """
    xl = x @ factor
    gl = g @ factor
    return np.stack([np.sum((xl - row) ** 2, axis=1) for row in gl], axis=1)


def _per_tracklet_mean(values: np.ndarray, starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, starts, axis=0) / lengths[:, None]


def normalize_columns(raw: np.ndarray, mode: str = "max") -> np.ndarray:
    scale = raw.max(axis=0) if mode == "max" else raw.sum(axis=0)
    out = np.zeros_like(raw)
    nz = scale > 0
    out[:, nz] = raw[:, nz] / scale[nz]
    return out


def build_affinity(tracklets: Sequence[Tracklet], ms: MetricSet, net: Optional[EmbeddingNet],
                   cfg: Config, plan: Optional[SegmentPlan] = None,
                   max_gap: Optional[int] = None) -> AffinityMatrix:
    n = len(tracklets)
    tids = [tr.tid for tr in tracklets]
    if n == 0:
        empty = np.zeros((0, 0))
        return AffinityMatrix(empty, empty, empty.astype(bool), empty.astype(int), tids)
    if plan is None:
        plan = plan_segments(max(tr.end for tr in tracklets), cfg.segment_length)

    starts_f = np.array([tr.start for tr in tracklets])
    ends_f = np.array([tr.end for tr in tracklets])
    gaps = starts_f[None, :] - ends_f[:, None]
    max_gap = cfg.effective_max_gap if max_gap is None else max_gap
    feasible = (gaps > 0) & (gaps <= max_gap)
    gaps = np.where(feasible, gaps, 0)

    # motion
    vel = [tracklet_velocities(tr) for tr in tracklets]
    v_f = np.stack([v.forward for v in vel])
    v_b = np.stack([v.backward for v in vel])
    tails = np.stack([tr.tail.center for tr in tracklets])
    heads = np.stack([tr.head.center for tr in tracklets])
    dt = gaps[:, :, None].astype(np.float64)
    e_fwd = tails[:, None, :] + v_f[:, None, :] * dt - heads[None, :, :]
    e_bwd = heads[None, :, :] + v_b[None, :, :] * dt - tails[:, None, :]
    p_motion = motion_kernel(e_fwd, cfg.sigma_motion) * motion_kernel(e_bwd, cfg.sigma_motion)

    # appearance
    emb = embed_tracklets(tracklets, net)
    probes = build_probes(tracklets, emb, plan)
    all_x = np.concatenate([emb[tid] for tid in tids])
    lengths = np.array([len(tr) for tr in tracklets])
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    all_probes = np.stack([probes.probe_of[tid] for tid in tids])
    index_of = {tid: a for a, tid in enumerate(tids)}

    p_app = np.zeros((n, n))
    for t in range(1, plan.n_segments + 1):
        members = probes.members(t)
        if not members:
            continue
        cols = np.array([index_of[tid] for tid in members])
        if not feasible[:, cols].any():
            continue
        factor = _metric_factor(ms.total(t))
        g_set = probes.matrix(t)
        d_set = _quad_distances(all_x, g_set, factor)
        norm = np.sqrt(d_set.sum(axis=1))
        safe = np.where(norm > 0, norm, 1.0)
        # predecessor responses against successor probes
        d_ij = _per_tracklet_mean(np.where(norm[:, None] > 0, d_set / safe[:, None], 0.0), offsets, lengths)
        # successor responses against every tracklet's probe
        rows = np.concatenate([np.arange(offsets[c], offsets[c] + lengths[c]) for c in cols])
        d_back = _quad_distances(all_x[rows], all_probes, factor)
        ratio = np.where(norm[rows, None] > 0, d_back / safe[rows, None], 0.0)
        sub_offsets = np.concatenate([[0], np.cumsum(lengths[cols])[:-1]])
        d_ji = _per_tracklet_mean(ratio, sub_offsets, lengths[cols])  # (len(cols), n)
        prod = d_ij * d_ji.T  # (n, len(cols)): d_ij[i, c] * d_ji[c, i]
        p_app[:, cols] = np.minimum(1.0 / (prod + APPEARANCE_EPS), cfg.affinity_cap)

    raw = np.where(feasible, p_motion * p_app, 0.0)
    np.fill_diagonal(raw, 0.0)
    P = normalize_columns(raw, cfg.column_norm)
    P[P < cfg.omega] = 0.0
    return AffinityMatrix(P=P, raw=raw, feasible=feasible, gaps=gaps, tids=tids)
