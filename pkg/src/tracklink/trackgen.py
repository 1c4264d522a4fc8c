"""Conservative frame-to-frame linking into reliable tracklets.

A link between detections in consecutive frames is accepted only when it is
strong (affinity >= theta_link) and unambiguous: it is the best option in both
its row and its column and beats every runner-up there by theta_margin.
"""
from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np

from .core import Detection, TrackGenConfig, Tracklet


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0 if na == nb else 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def affinity_terms(a: Detection, b: Detection, cfg: TrackGenConfig) -> tuple:
    """Unweighted (position, size, appearance) terms, each in (0, 1]."""
    la, ta, wa, ha = a.box
    lb, tb, wb, hb = b.box
    mean_w = 0.5 * (wa + wb)
    mean_h = 0.5 * (ha + hb)
    dx = (lb + wb / 2) - (la + wa / 2)
    dy = (tb + hb / 2) - (ta + ha / 2)
    pos_cost = ((dx / mean_w) ** 2 + (dy / mean_h) ** 2) / (2 * cfg.pos_sigma ** 2)
    size_cost = (np.log(wb / wa) ** 2 + np.log(hb / ha) ** 2) / (2 * cfg.size_sigma ** 2)
    app_cost = _cosine_distance(a.feature, b.feature)
    return np.exp(-pos_cost), np.exp(-size_cost), np.exp(-app_cost)


def frame_affinity(a: Detection, b: Detection, cfg: TrackGenConfig = TrackGenConfig()) -> float:
    """Weighted product of the per-cue similarity terms (see ``TrackGenConfig`` weights).

    Each term enters raised to its weight, so with weights summing to one the
    result is a weighted geometric mean in (0, 1].
    """
    if b.frame != a.frame + 1:
        raise ValueError(f"frame_affinity needs consecutive frames, got {a.frame} -> {b.frame}")
    pos, size, app = affinity_terms(a, b, cfg)
    return float(pos ** cfg.w_pos * size ** cfg.w_size * app ** cfg.w_app)


def affinity_table(prev: Sequence[Detection], cur: Sequence[Detection], cfg: TrackGenConfig) -> np.ndarray:
    """Vectorised ``frame_affinity`` for every (prev, cur) pair."""
    pa = np.array([d.box for d in prev])
    pb = np.array([d.box for d in cur])
    ca = pa[:, :2] + pa[:, 2:] / 2
    cb = pb[:, :2] + pb[:, 2:] / 2
    mean_wh = 0.5 * (pa[:, None, 2:] + pb[None, :, 2:])
    rel = (cb[None, :, :] - ca[:, None, :]) / mean_wh
    pos_cost = (rel ** 2).sum(axis=2) / (2 * cfg.pos_sigma ** 2)
    log_ratio = np.log(pb[None, :, 2:] / pa[:, None, 2:])
    size_cost = (log_ratio ** 2).sum(axis=2) / (2 * cfg.size_sigma ** 2)

    fa = np.stack([d.feature for d in prev])
    fb = np.stack([d.feature for d in cur])
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    denom = na[:, None] * nb[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_dist = 1.0 - (fa @ fb.T) / denom
    zero = denom == 0.0
    if zero.any():
        both = (na[:, None] == 0.0) & (nb[None, :] == 0.0)
        cos_dist[zero] = np.where(both[zero], 0.0, 1.0)

    return np.exp(-(cfg.w_pos * pos_cost + cfg.w_size * size_cost + cfg.w_app * cos_dist))


def dual_threshold_links(table: np.ndarray, theta_link: float, theta_margin: float) -> list:
    """(row, col) pairs that pass both the absolute and the ambiguity test."""
    links = []
    n_rows, n_cols = table.shape
    for i in range(n_rows):
        for j in range(n_cols):
            value = table[i, j]
            if value < theta_link:
                continue
            row_others = np.delete(table[i], j)
            col_others = np.delete(table[:, j], i)
            runner_up = max(
                row_others.max() if row_others.size else 0.0,
                col_others.max() if col_others.size else 0.0,
            )
            if value - runner_up >= theta_margin and value > runner_up:
                links.append((i, j))
    return links


def generate_tracklets(dets: Sequence[Detection], cfg: TrackGenConfig = TrackGenConfig()) -> list:
    """Link detections into contiguous tracklets.

    Tracklets are numbered from 1 in order of (start frame, first detection
    position in the input). Runs shorter than ``cfg.min_tracklet_len`` are
    dropped.
    """
    if not dets:
        return []
    by_frame = defaultdict(list)
    for d in dets:
        by_frame[d.frame].append(d)
    frames = sorted(by_frame)

    # tail_of: id(detection) -> index of the chain it currently ends
    chains = []
    tail_of = {}
    for d in by_frame[frames[0]]:
        tail_of[id(d)] = len(chains)
        chains.append([d])

    for prev_f, cur_f in zip(frames, frames[1:]):
        cur = by_frame[cur_f]
        linked = set()
        if cur_f == prev_f + 1:
            prev = by_frame[prev_f]
            table = affinity_table(prev, cur, cfg)
            for i, j in dual_threshold_links(table, cfg.theta_link, cfg.theta_margin):
                k = tail_of[id(prev[i])]
                chains[k].append(cur[j])
                tail_of[id(cur[j])] = k
                linked.add(j)
        for j, d in enumerate(cur):
            if j not in linked:
                tail_of[id(d)] = len(chains)
                chains.append([d])

    kept = [c for c in chains if len(c) >= cfg.min_tracklet_len]
    return [Tracklet(tid=k, detections=tuple(c)) for k, c in enumerate(kept, start=1)]
